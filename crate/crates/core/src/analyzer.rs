//! Static multiply-accumulate and parameter counts per layer.
//!
//! Only filter multiply-accumulates are counted; bias additions, pooling
//! comparisons and activations cost nothing. Counts are per image.

use crate::arch::{ArchSpec, LayerSpec};
use crate::composite::CompositeConvSpec;
use crate::error::Result;
use crate::tensor::Shape;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub out_shape: Shape,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub model: String,
    pub rows: Vec<CostRow>,
    pub total_macs: u64,
    pub total_params: u64,
}

/// MACs and parameters of a `kh x kw` conv producing an `out` map from `c`
/// input channels.
fn conv_cost(out: Shape, c: usize, kh: usize, kw: usize) -> (u64, u64) {
    let per_pixel = (out.c * kh * kw * c) as u64;
    let macs = (out.h * out.w) as u64 * per_pixel;
    (macs, per_pixel + out.c as u64)
}

fn composite_cost(spec: &CompositeConvSpec, c: usize, out: Shape) -> (u64, u64) {
    let (h, w) = (out.h, out.w);
    let mut total = (0, 0);
    for g in &spec.groups {
        let (m, p) = conv_cost(Shape::new(1, g.d, h, w), c, g.kh, g.kw);
        total = (total.0 + m, total.1 + p);
    }
    if let Some(j) = spec.join {
        let (m, p) = conv_cost(Shape::new(1, j, h, w), spec.basis_channels(), 1, 1);
        total = (total.0 + m, total.1 + p);
    }
    total
}

/// Per-layer costs of `arch` evaluated at input `(c, h, w)`.
pub fn analyze(arch: &ArchSpec, input: (usize, usize, usize)) -> Result<CostReport> {
    let arch = arch.with_input(input);
    let shapes = arch.shapes()?;
    let mut counters = std::collections::HashMap::new();
    let mut rows = Vec::with_capacity(arch.layers.len());
    for (layer, out) in arch.layers.iter().zip(&shapes) {
        let out = Shape::new(1, out.c, out.h, out.w);
        let k = counters.entry(layer.kind()).or_insert(0usize);
        *k += 1;
        let (macs, params) = match layer {
            LayerSpec::Conv {
                in_channels, kh, kw, ..
            } => conv_cost(out, *in_channels, *kh, *kw),
            LayerSpec::Composite {
                in_channels,
                composite,
            } => composite_cost(composite, *in_channels, out),
            LayerSpec::Dense { inputs, outputs } => {
                let w = (*inputs * *outputs) as u64;
                (w, w + *outputs as u64)
            }
            _ => (0, 0),
        };
        rows.push(CostRow {
            name: format!("{}{}", layer.kind(), k),
            out_shape: out,
            macs,
            params,
        });
    }
    Ok(CostReport {
        model: arch.name.clone(),
        total_macs: rows.iter().map(|r| r.macs).sum(),
        total_params: rows.iter().map(|r| r.params).sum(),
        rows,
    })
}

impl CostReport {
    /// Report of an architecture at its declared input.
    pub fn of(arch: &ArchSpec) -> Result<Self> {
        analyze(arch, arch.input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Savings {
    pub macs: f64,
    pub params: f64,
}

/// Signed savings of `b` relative to `a`: `1 - b / a`.
pub fn compare(a: &CostReport, b: &CostReport) -> Savings {
    let frac = |x: u64, y: u64| if x == 0 { 0.0 } else { 1.0 - y as f64 / x as f64 };
    Savings {
        macs: frac(a.total_macs, b.total_macs),
        params: frac(a.total_params, b.total_params),
    }
}

fn shape_label(s: Shape) -> String {
    format!("{}x{}x{}", s.c, s.h, s.w)
}

pub fn report_csv(report: &CostReport) -> String {
    let mut s = String::from("layer,out_shape,macs,params\n");
    for r in &report.rows {
        s.push_str(&format!("{},{},{},{}\n", r.name, shape_label(r.out_shape), r.macs, r.params));
    }
    s.push_str(&format!("total,,{},{}\n", report.total_macs, report.total_params));
    s
}

/// Side-by-side table of the parametric layers of two reports, aligned by
/// row name, with each model's MACs and the difference.
pub fn diff_table(a: &CostReport, b: &CostReport) -> String {
    let mut names: Vec<&str> = Vec::new();
    for r in a.rows.iter().chain(&b.rows) {
        if (r.macs > 0 || r.params > 0) && !names.contains(&r.name.as_str()) {
            names.push(&r.name);
        }
    }
    let find = |rep: &CostReport, n: &str| rep.rows.iter().find(|r| r.name == n).map_or(0, |r| r.macs);
    let mut s = format!("{:<8} {:>15} {:>15} {:>16}\n", "layer", a.model, b.model, "delta");
    for n in names {
        let (x, y) = (find(a, n), find(b, n));
        s.push_str(&format!("{n:<8} {x:>15} {y:>15} {:>16}\n", y as i64 - x as i64));
    }
    s.push_str(&format!(
        "{:<8} {:>15} {:>15} {:>16}\n",
        "total",
        a.total_macs,
        b.total_macs,
        b.total_macs as i64 - a.total_macs as i64
    ));
    s
}
