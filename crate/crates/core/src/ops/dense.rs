use crate::error::{ensure_dim, Result};
use crate::ops::conv::GradBundle;
use crate::tensor::{Shape, Tensor};

/// Affine map `k -> m`; `weights` is `k x m` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseWeights {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseWeights {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseWeights {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        ensure_dim("dense weights", "weight count", inputs * outputs, weights.len())?;
        ensure_dim("dense weights", "bias count", outputs, bias.len())?;
        Ok(DenseWeights {
            inputs,
            outputs,
            weights,
            bias,
        })
    }
}

/// Input is flattened per sample; output is `(n, m, 1, 1)`.
pub fn dense_forward(input: &Tensor, w: &DenseWeights) -> Result<Tensor> {
    let s = input.shape();
    ensure_dim("dense", "fan-in", w.inputs, s.sample())?;
    let m = w.outputs;
    let mut out = Vec::with_capacity(s.n * m);
    for n in 0..s.n {
        let x = input.sample(n);
        let mut row = w.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = &w.weights[i * m..(i + 1) * m];
            for (o, &wv) in row.iter_mut().zip(wrow) {
                *o += xi * wv;
            }
        }
        out.extend(row);
    }
    Tensor::from_vec(Shape::new(s.n, m, 1, 1), out)
}

pub fn dense_backward(input: &Tensor, w: &DenseWeights, grad_out: &Tensor) -> Result<GradBundle> {
    const OP: &str = "dense_backward";
    let s = input.shape();
    ensure_dim(OP, "fan-in", w.inputs, s.sample())?;
    ensure_dim(OP, "grad batch", s.n, grad_out.shape().n)?;
    ensure_dim(OP, "grad width", w.outputs, grad_out.shape().sample())?;
    let (k, m) = (w.inputs, w.outputs);
    let mut gi = vec![0.0; s.numel()];
    let mut gw = vec![0.0; k * m];
    let mut gb = vec![0.0; m];
    for n in 0..s.n {
        let x = input.sample(n);
        let g = grad_out.sample(n);
        for (b, &gv) in gb.iter_mut().zip(g) {
            *b += gv;
        }
        let gin = &mut gi[n * k..(n + 1) * k];
        for i in 0..k {
            let wrow = &w.weights[i * m..(i + 1) * m];
            gin[i] = wrow.iter().zip(g).map(|(a, b)| a * b).sum();
            let xi = x[i];
            let gwrow = &mut gw[i * m..(i + 1) * m];
            for (o, &gv) in gwrow.iter_mut().zip(g) {
                *o += xi * gv;
            }
        }
    }
    Ok(GradBundle {
        grad_input: Tensor::from_vec(s, gi)?,
        grad_weights: gw,
        grad_bias: gb,
    })
}
