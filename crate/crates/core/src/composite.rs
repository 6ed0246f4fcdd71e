//! Composite convolution layers: `N` filter groups of different spatial
//! shapes applied to the same input, outputs concatenated along channels in
//! group order, optionally followed by a 1x1 join that linearly combines the
//! basis responses. No nonlinearity sits between the groups and the join.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::ops::{concat_channels, conv2d_backward, conv2d_forward, conv2d_output_shape, split_channels};
use crate::ops::{ConvWeights, GradBundle};
use crate::tensor::{Shape, Tensor};

/// `d` filters of spatial size `kw` (width) by `kh` (height). Table-style
/// names read width first: `3x1` is a horizontal row of three taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilterGroup {
    pub kw: usize,
    pub kh: usize,
    pub d: usize,
    /// Only set when a group declares its own stride; it must then equal the
    /// layer stride.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<(usize, usize)>,
}

impl FilterGroup {
    pub const fn new(kw: usize, kh: usize, d: usize) -> Self {
        FilterGroup {
            kw,
            kh,
            d,
            stride: None,
        }
    }

    /// Outgoing connections per input element, `kw * kh * d`.
    pub const fn fan_out(&self) -> usize {
        self.kw * self.kh * self.d
    }

    /// Same padding `(py, px)`.
    pub const fn padding(&self) -> (usize, usize) {
        (self.kh / 2, self.kw / 2)
    }

    pub const fn is_horizontal(&self) -> bool {
        self.kh == 1 && self.kw > 1
    }

    pub const fn is_vertical(&self) -> bool {
        self.kw == 1 && self.kh > 1
    }
}

impl std::fmt::Display for FilterGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{},{}", self.kw, self.kh, self.d)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeConvSpec {
    pub groups: Vec<FilterGroup>,
    #[serde(default = "unit_stride")]
    pub stride: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub join: Option<usize>,
}

fn unit_stride() -> (usize, usize) {
    (1, 1)
}

impl CompositeConvSpec {
    pub fn new(groups: Vec<FilterGroup>) -> Self {
        CompositeConvSpec {
            groups,
            stride: (1, 1),
            join: None,
        }
    }

    pub fn with_join(mut self, d: usize) -> Self {
        self.join = Some(d);
        self
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    /// Channels of the concatenated basis responses, `sum d_i`.
    pub fn basis_channels(&self) -> usize {
        self.groups.iter().map(|g| g.d).sum()
    }

    pub fn out_channels(&self) -> usize {
        self.join.unwrap_or_else(|| self.basis_channels())
    }

    /// Structural checks plus the output shape for `input`.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        const OP: &str = "composite";
        if self.groups.is_empty() {
            return Err(Error::invalid(OP, "no filter groups"));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::invalid(OP, "stride must be at least 1"));
        }
        if self.join == Some(0) {
            return Err(Error::invalid(OP, "join must have at least one output channel"));
        }
        let mut spatial: Option<(usize, usize)> = None;
        for (i, g) in self.groups.iter().enumerate() {
            if g.kw == 0 || g.kh == 0 || g.d == 0 {
                return Err(Error::invalid(OP, format!("group {i} ({g}) has a zero dimension")));
            }
            if let Some(s) = g.stride {
                if s != self.stride {
                    return Err(Error::invalid(
                        OP,
                        format!(
                            "group {i} stride {}x{} differs from layer stride {}x{}",
                            s.0, s.1, self.stride.0, self.stride.1
                        ),
                    ));
                }
            }
            let probe = ConvWeights {
                d: g.d,
                c: input.c,
                kh: g.kh,
                kw: g.kw,
                weights: Vec::new(),
                bias: Vec::new(),
            };
            let os = conv2d_output_shape(input, &probe, self.stride, g.padding())?;
            match spatial {
                None => spatial = Some((os.h, os.w)),
                Some(prev) if prev != (os.h, os.w) => {
                    return Err(Error::invalid(
                        OP,
                        format!(
                            "group {i} ({g}) yields {}x{} maps, group 0 yields {}x{}",
                            os.h, os.w, prev.0, prev.1
                        ),
                    ))
                }
                Some(_) => {}
            }
        }
        let (h, w) = spatial.expect("non-empty groups");
        Ok(Shape::new(input.n, self.out_channels(), h, w))
    }
}

impl std::fmt::Display for CompositeConvSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let groups: Vec<String> = self.groups.iter().map(ToString::to_string).collect();
        write!(f, "{}", groups.join(" | "))?;
        if self.stride != (1, 1) {
            write!(f, " /{}x{}", self.stride.0, self.stride.1)?;
        }
        if let Some(j) = self.join {
            write!(f, " + 1x1,{j}")?;
        }
        Ok(())
    }
}

/// Weights for every group, plus the join when present.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeParams {
    pub groups: Vec<ConvWeights>,
    pub join: Option<ConvWeights>,
}

impl CompositeParams {
    pub fn zeros(spec: &CompositeConvSpec, in_channels: usize) -> Self {
        CompositeParams {
            groups: spec
                .groups
                .iter()
                .map(|g| ConvWeights::zeros(g.d, in_channels, g.kh, g.kw))
                .collect(),
            join: spec
                .join
                .map(|d| ConvWeights::zeros(d, spec.basis_channels(), 1, 1)),
        }
    }

    fn check(&self, spec: &CompositeConvSpec, in_channels: usize) -> Result<()> {
        const OP: &str = "composite params";
        ensure_dim(OP, "group count", spec.groups.len(), self.groups.len())?;
        for (g, w) in spec.groups.iter().zip(&self.groups) {
            ensure_dim(OP, "group filters", g.d, w.d)?;
            ensure_dim(OP, "group input channels", in_channels, w.c)?;
            ensure_dim(OP, "group kernel height", g.kh, w.kh)?;
            ensure_dim(OP, "group kernel width", g.kw, w.kw)?;
        }
        match (spec.join, &self.join) {
            (None, None) => Ok(()),
            (Some(d), Some(j)) => {
                ensure_dim(OP, "join filters", d, j.d)?;
                ensure_dim(OP, "join input channels", spec.basis_channels(), j.c)?;
                ensure_dim(OP, "join kernel", 1, j.kh * j.kw)
            }
            (Some(_), None) => Err(Error::invalid(OP, "join weights missing")),
            (None, Some(_)) => Err(Error::invalid(OP, "join weights given for a join-free layer")),
        }
    }
}

/// Forward pass that also returns the concatenated basis responses when a
/// join follows (the join's input, needed again in backward).
pub fn composite_forward_parts(
    input: &Tensor,
    spec: &CompositeConvSpec,
    params: &CompositeParams,
) -> Result<(Tensor, Option<Tensor>)> {
    spec.output_shape(input.shape())?;
    params.check(spec, input.shape().c)?;
    let responses = spec
        .groups
        .iter()
        .zip(&params.groups)
        .map(|(g, w)| conv2d_forward(input, w, spec.stride, g.padding()))
        .collect::<Result<Vec<_>>>()?;
    let basis = if responses.len() == 1 {
        responses.into_iter().next().expect("one response")
    } else {
        concat_channels(&responses)?
    };
    match &params.join {
        Some(j) => {
            let out = conv2d_forward(&basis, j, (1, 1), (0, 0))?;
            Ok((out, Some(basis)))
        }
        None => Ok((basis, None)),
    }
}

pub fn composite_forward(
    input: &Tensor,
    spec: &CompositeConvSpec,
    params: &CompositeParams,
) -> Result<Tensor> {
    composite_forward_parts(input, spec, params).map(|(out, _)| out)
}

/// Gradients of a composite layer. Each entry of `groups` carries that
/// group's own contribution to the input gradient; `grad_input` is their sum
/// in group order.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeGrads {
    pub grad_input: Tensor,
    pub groups: Vec<GradBundle>,
    pub join: Option<GradBundle>,
}

/// Backward pass given the join input cached by [`composite_forward_parts`].
pub fn composite_backward_cached(
    input: &Tensor,
    spec: &CompositeConvSpec,
    params: &CompositeParams,
    basis: Option<&Tensor>,
    grad_out: &Tensor,
) -> Result<CompositeGrads> {
    let os = spec.output_shape(input.shape())?;
    params.check(spec, input.shape().c)?;
    ensure_dim("composite_backward", "grad elements", os.numel(), grad_out.shape().numel())?;
    ensure_dim("composite_backward", "grad channels", os.c, grad_out.shape().c)?;

    let (grad_basis, join) = match &params.join {
        Some(j) => {
            let basis = basis.ok_or_else(|| {
                Error::invalid("composite_backward", "join input not supplied")
            })?;
            let bundle = conv2d_backward(basis, j, grad_out, (1, 1), (0, 0))?;
            (bundle.grad_input.clone(), Some(bundle))
        }
        None => (grad_out.clone(), None),
    };

    let sizes: Vec<usize> = spec.groups.iter().map(|g| g.d).collect();
    let pieces = if sizes.len() == 1 {
        vec![grad_basis]
    } else {
        split_channels(&grad_basis, &sizes)?
    };
    let groups = spec
        .groups
        .iter()
        .zip(&params.groups)
        .zip(&pieces)
        .map(|((g, w), go)| conv2d_backward(input, w, go, spec.stride, g.padding()))
        .collect::<Result<Vec<_>>>()?;

    let mut grad_input = groups[0].grad_input.clone();
    for b in &groups[1..] {
        for (a, v) in grad_input.data_mut().iter_mut().zip(b.grad_input.data()) {
            *a += v;
        }
    }
    Ok(CompositeGrads {
        grad_input,
        groups,
        join,
    })
}

/// Exact gradients of `sum(grad_out * composite_forward(input))`.
pub fn composite_backward(
    input: &Tensor,
    spec: &CompositeConvSpec,
    params: &CompositeParams,
    grad_out: &Tensor,
) -> Result<CompositeGrads> {
    let basis = if params.join.is_some() {
        composite_forward_parts(input, spec, params)?.1
    } else {
        None
    };
    composite_backward_cached(input, spec, params, basis.as_ref(), grad_out)
}

/// Spatial kernel seen by one (join output, input channel) pair after
/// folding the join weights into the horizontal and vertical bases.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveKernel {
    pub out_channel: usize,
    pub in_channel: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub values: Vec<f64>,
}

impl EffectiveKernel {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

/// Folds a join into its horizontal (`kw x 1`) and vertical (`1 x kh`)
/// bases, giving one cross-shaped kernel per join output and input channel.
/// The centre cell receives both orientations.
pub fn effective_filters(
    spec: &CompositeConvSpec,
    params: &CompositeParams,
) -> Result<Vec<EffectiveKernel>> {
    if spec.groups.is_empty()
        || !spec.groups.iter().all(|g| g.is_horizontal() || g.is_vertical())
    {
        return Err(Error::Unsupported(format!(
            "effective filters need only horizontal (Wx1) and vertical (1xH) groups, got {spec}"
        )));
    }
    let join = params
        .join
        .as_ref()
        .ok_or_else(|| Error::Unsupported("effective filters need a 1x1 join".into()))?;
    let c = params.groups.first().map_or(0, |g| g.c);
    params.check(spec, c)?;

    let cols = spec.groups.iter().filter(|g| g.is_horizontal()).map(|g| g.kw).max().unwrap_or(1);
    let rows = spec.groups.iter().filter(|g| g.is_vertical()).map(|g| g.kh).max().unwrap_or(1);
    let (cy, cx) = (rows / 2, cols / 2);

    let mut out = Vec::with_capacity(join.d * c);
    for o in 0..join.d {
        for ci in 0..c {
            let mut values = vec![0.0; rows * cols];
            let mut base = 0;
            for (g, w) in spec.groups.iter().zip(&params.groups) {
                for f in 0..g.d {
                    let jw = join.weights[join.index(o, base + f, 0, 0)];
                    if g.is_horizontal() {
                        let x0 = cx - g.kw / 2;
                        for kx in 0..g.kw {
                            values[cy * cols + x0 + kx] += jw * w.weights[w.index(f, ci, 0, kx)];
                        }
                    } else {
                        let y0 = cy - g.kh / 2;
                        for ky in 0..g.kh {
                            values[(y0 + ky) * cols + cx] += jw * w.weights[w.index(f, ci, ky, 0)];
                        }
                    }
                }
                base += g.d;
            }
            out.push(EffectiveKernel {
                out_channel: o,
                in_channel: ci,
                rows,
                cols,
                values,
            });
        }
    }
    Ok(out)
}

/// One block per kernel: a `# out=O,in=I,rows=R,cols=C` header, then `R`
/// comma-separated rows; blocks are separated by a blank line. Values use
/// the shortest round-trip float representation.
pub fn effective_filters_csv(kernels: &[EffectiveKernel]) -> String {
    let mut s = String::new();
    for (i, k) in kernels.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        s.push_str(&format!(
            "# out={},in={},rows={},cols={}\n",
            k.out_channel, k.in_channel, k.rows, k.cols
        ));
        for r in 0..k.rows {
            let row: Vec<String> = (0..k.cols).map(|c| k.at(r, c).to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
    }
    s
}

pub fn parse_effective_filters_csv(text: &str) -> Result<Vec<EffectiveKernel>> {
    let bad = |msg: String| Error::Config(format!("filters csv: {msg}"));
    let mut kernels = Vec::new();
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    while let Some(header) = lines.next() {
        let header = header
            .strip_prefix("# ")
            .ok_or_else(|| bad(format!("expected block header, got `{header}`")))?;
        let mut fields = [0usize; 4];
        for (slot, part) in fields.iter_mut().zip(header.split(',')) {
            let (_, v) = part.split_once('=').ok_or_else(|| bad(format!("bad header field `{part}`")))?;
            *slot = v.parse().map_err(|_| bad(format!("bad header value `{v}`")))?;
        }
        let [out_channel, in_channel, rows, cols] = fields;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines.next().ok_or_else(|| bad("truncated block".into()))?;
            for v in line.split(',') {
                values.push(v.trim().parse().map_err(|_| bad(format!("bad value `{v}`")))?);
            }
        }
        if values.len() != rows * cols {
            return Err(bad(format!("block has {} values, header says {}", values.len(), rows * cols)));
        }
        kernels.push(EffectiveKernel {
            out_channel,
            in_channel,
            rows,
            cols,
            values,
        });
    }
    Ok(kernels)
}
