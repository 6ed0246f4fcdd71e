//! Parameter storage for a whole architecture and the layer-by-layer
//! forward and backward passes over it.

use crate::arch::{ArchSpec, LayerSpec};
use crate::composite::{composite_backward_cached, composite_forward_parts, CompositeParams};
use crate::error::{ensure_dim, Error, Result};
use crate::ops::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, global_maxpool_backward,
    global_maxpool_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward,
    same_padding, ConvWeights, DenseWeights, PoolIndices,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    Conv(ConvWeights),
    Composite(CompositeParams),
    Dense(DenseWeights),
}

/// Role of one parameter tensor inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Conv,
    Group(usize),
    Join,
    Dense,
}

/// One weight tensor and its bias, with their dimensions.
#[derive(Debug)]
pub struct ParamBlock<'a> {
    pub layer: usize,
    pub role: Role,
    /// `(d, c, kh, kw)` for conv-like blocks, `(inputs, outputs, 1, 1)` for dense.
    pub dims: [usize; 4],
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

/// Parameters (or, with identical layout, gradients) for every layer of an
/// architecture, indexed by layer position.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn zeros(arch: &ArchSpec) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kh,
                    kw,
                    ..
                } => LayerParams::Conv(ConvWeights::zeros(*out_channels, *in_channels, *kh, *kw)),
                LayerSpec::Composite {
                    in_channels,
                    composite,
                } => LayerParams::Composite(CompositeParams::zeros(composite, *in_channels)),
                LayerSpec::Dense { inputs, outputs } => {
                    LayerParams::Dense(DenseWeights::zeros(*inputs, *outputs))
                }
                _ => LayerParams::None,
            })
            .collect();
        Ok(ModelParams { layers })
    }

    /// Every parameter block in layer order (groups before join).
    pub fn blocks(&self) -> Vec<ParamBlock<'_>> {
        let mut out = Vec::new();
        for (layer, p) in self.layers.iter().enumerate() {
            fn conv(layer: usize, role: Role, w: &ConvWeights) -> ParamBlock<'_> {
                ParamBlock {
                    layer,
                    role,
                    dims: [w.d, w.c, w.kh, w.kw],
                    weights: &w.weights,
                    bias: &w.bias,
                }
            }
            match p {
                LayerParams::None => {}
                LayerParams::Conv(w) => out.push(conv(layer, Role::Conv, w)),
                LayerParams::Composite(cp) => {
                    for (i, g) in cp.groups.iter().enumerate() {
                        out.push(conv(layer, Role::Group(i), g));
                    }
                    if let Some(j) = &cp.join {
                        out.push(conv(layer, Role::Join, j));
                    }
                }
                LayerParams::Dense(d) => out.push(ParamBlock {
                    layer,
                    role: Role::Dense,
                    dims: [d.inputs, d.outputs, 1, 1],
                    weights: &d.weights,
                    bias: &d.bias,
                }),
            }
        }
        out
    }

    /// Mutable `(weights, bias)` slices in the same order as [`Self::blocks`].
    pub fn blocks_mut(&mut self) -> Vec<(&mut Vec<f64>, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for p in &mut self.layers {
            match p {
                LayerParams::None => {}
                LayerParams::Conv(w) => out.push((&mut w.weights, &mut w.bias)),
                LayerParams::Composite(cp) => {
                    for g in cp.groups.iter_mut().chain(cp.join.iter_mut()) {
                        out.push((&mut g.weights, &mut g.bias));
                    }
                }
                LayerParams::Dense(d) => out.push((&mut d.weights, &mut d.bias)),
            }
        }
        out
    }

    pub fn count(&self) -> usize {
        self.blocks().iter().map(|b| b.weights.len() + b.bias.len()).sum()
    }

    /// Checks that every block has the dimensions `arch` requires.
    pub fn check(&self, arch: &ArchSpec) -> Result<()> {
        let expected = ModelParams::zeros(arch)?;
        ensure_dim("model params", "layer count", expected.layers.len(), self.layers.len())?;
        let (a, b) = (expected.blocks(), self.blocks());
        ensure_dim("model params", "block count", a.len(), b.len())?;
        for (x, y) in a.iter().zip(&b) {
            if x.layer != y.layer || x.role != y.role || x.dims != y.dims {
                return Err(Error::invalid(
                    "model params",
                    format!("layer {} {:?} has dims {:?}, expected {:?}", y.layer, y.role, y.dims, x.dims),
                ));
            }
            ensure_dim("model params", "weight count", x.weights.len(), y.weights.len())?;
            ensure_dim("model params", "bias count", x.bias.len(), y.bias.len())?;
        }
        Ok(())
    }
}

/// What a layer's backward pass needs from its forward pass, beyond its input.
#[derive(Debug, Clone)]
enum Cache {
    None,
    Pool(PoolIndices),
    Basis(Option<Tensor>),
    Dropout(Vec<f64>),
}

/// Inputs and caches of every layer from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Tensor>,
    caches: Vec<Cache>,
}

impl Trace {
    /// Input tensor of layer `i`.
    pub fn input(&self, i: usize) -> &Tensor {
        &self.inputs[i]
    }
}

pub struct Backward {
    pub grads: ModelParams,
    /// Gradient w.r.t. each layer's input, when requested.
    pub input_grads: Option<Vec<Tensor>>,
}

/// Optional inverted dropout on the inputs of every dense layer after the
/// first (the positions fc7 and fc8 occupy in VGG).
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut Rng,
}

fn dropout_targets(arch: &ArchSpec) -> Vec<bool> {
    let mut seen_dense = false;
    arch.layers
        .iter()
        .map(|l| {
            if matches!(l, LayerSpec::Dense { .. }) {
                let hit = seen_dense;
                seen_dense = true;
                hit
            } else {
                false
            }
        })
        .collect()
}

/// Inference forward pass; returns logits (the softmax lives in the loss).
pub fn forward(arch: &ArchSpec, params: &ModelParams, input: &Tensor) -> Result<Tensor> {
    forward_traced(arch, params, input, None).map(|(out, _)| out)
}

pub fn forward_traced(
    arch: &ArchSpec,
    params: &ModelParams,
    input: &Tensor,
    mut dropout: Option<Dropout<'_>>,
) -> Result<(Tensor, Trace)> {
    ensure_dim("forward", "layer params", arch.layers.len(), params.layers.len())?;
    let targets = dropout_targets(arch);
    let mut x = input.clone();
    let mut inputs = Vec::with_capacity(arch.layers.len());
    let mut caches = Vec::with_capacity(arch.layers.len());
    for (i, (layer, p)) in arch.layers.iter().zip(&params.layers).enumerate() {
        let mut cache = Cache::None;
        if targets[i] {
            if let Some(d) = dropout.as_mut().filter(|d| d.p > 0.0) {
                let keep = 1.0 - d.p;
                let mask: Vec<f64> = (0..x.data().len())
                    .map(|_| if d.rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                x.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                cache = Cache::Dropout(mask);
            }
        }
        let y = match (layer, p) {
            (LayerSpec::Conv { kh, kw, stride, .. }, LayerParams::Conv(w)) => {
                conv2d_forward(&x, w, *stride, same_padding(*kh, *kw))?
            }
            (LayerSpec::Composite { composite, .. }, LayerParams::Composite(cp)) => {
                let (out, basis) = composite_forward_parts(&x, composite, cp)?;
                cache = Cache::Basis(basis);
                out
            }
            (LayerSpec::Dense { .. }, LayerParams::Dense(w)) => dense_forward(&x, w)?,
            (LayerSpec::MaxPool { k, stride }, LayerParams::None) => {
                let (out, idx) = maxpool_forward(&x, *k, *stride)?;
                cache = Cache::Pool(idx);
                out
            }
            (LayerSpec::GlobalMaxPool, LayerParams::None) => {
                let (out, idx) = global_maxpool_forward(&x)?;
                cache = Cache::Pool(idx);
                out
            }
            (LayerSpec::Relu, LayerParams::None) => relu_forward(&x),
            (LayerSpec::Softmax, LayerParams::None) => x.clone(),
            _ => {
                return Err(Error::invalid(
                    "forward",
                    format!("layer {i} ({layer}) has mismatched parameters"),
                ))
            }
        };
        inputs.push(x);
        caches.push(cache);
        x = y;
    }
    Ok((x, Trace { inputs, caches }))
}

pub fn backward(
    arch: &ArchSpec,
    params: &ModelParams,
    trace: &Trace,
    grad_out: &Tensor,
    keep_input_grads: bool,
) -> Result<Backward> {
    let mut grads = ModelParams {
        layers: vec![LayerParams::None; arch.layers.len()],
    };
    let mut input_grads = keep_input_grads.then(|| Vec::with_capacity(arch.layers.len()));
    let mut g = grad_out.clone();
    for i in (0..arch.layers.len()).rev() {
        let x = &trace.inputs[i];
        let (layer, p) = (&arch.layers[i], &params.layers[i]);
        let mut gi = match (layer, p, &trace.caches[i]) {
            (LayerSpec::Conv { kh, kw, stride, .. }, LayerParams::Conv(w), _) => {
                let b = conv2d_backward(x, w, &g, *stride, same_padding(*kh, *kw))?;
                grads.layers[i] = LayerParams::Conv(ConvWeights {
                    weights: b.grad_weights,
                    bias: b.grad_bias,
                    ..w.clone_shape()
                });
                b.grad_input
            }
            (LayerSpec::Composite { composite, .. }, LayerParams::Composite(cp), Cache::Basis(basis)) => {
                let cg = composite_backward_cached(x, composite, cp, basis.as_ref(), &g)?;
                let as_weights = |w: &ConvWeights, b: crate::ops::GradBundle| ConvWeights {
                    weights: b.grad_weights,
                    bias: b.grad_bias,
                    ..w.clone_shape()
                };
                grads.layers[i] = LayerParams::Composite(CompositeParams {
                    groups: cp.groups.iter().zip(cg.groups).map(|(w, b)| as_weights(w, b)).collect(),
                    join: cp.join.as_ref().zip(cg.join).map(|(w, b)| as_weights(w, b)),
                });
                cg.grad_input
            }
            (LayerSpec::Dense { .. }, LayerParams::Dense(w), _) => {
                let b = dense_backward(x, w, &g)?;
                grads.layers[i] = LayerParams::Dense(DenseWeights {
                    inputs: w.inputs,
                    outputs: w.outputs,
                    weights: b.grad_weights,
                    bias: b.grad_bias,
                });
                b.grad_input
            }
            (LayerSpec::MaxPool { .. }, _, Cache::Pool(idx)) => maxpool_backward(idx, &g)?,
            (LayerSpec::GlobalMaxPool, _, Cache::Pool(idx)) => global_maxpool_backward(idx, &g)?,
            (LayerSpec::Relu, _, _) => relu_backward(x, &g)?,
            (LayerSpec::Softmax, _, _) => g.clone(),
            _ => {
                return Err(Error::invalid(
                    "backward",
                    format!("layer {i} ({layer}) has mismatched parameters or trace"),
                ))
            }
        };
        if let Cache::Dropout(mask) = &trace.caches[i] {
            gi.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
        }
        if let Some(v) = input_grads.as_mut() {
            v.push(gi.clone());
        }
        g = gi;
    }
    if let Some(v) = input_grads.as_mut() {
        v.reverse();
    }
    Ok(Backward { grads, input_grads })
}

impl ConvWeights {
    fn clone_shape(&self) -> ConvWeights {
        ConvWeights {
            d: self.d,
            c: self.c,
            kh: self.kh,
            kw: self.kw,
            weights: Vec::new(),
            bias: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;
    use crate::tensor::Shape;

    #[test]
    fn zero_params_match_analyzer_counts() {
        let arch = zoo::build("desk-lr").unwrap();
        let p = ModelParams::zeros(&arch).unwrap();
        p.check(&arch).unwrap();
        let total: usize = p.blocks().iter().map(|b| b.weights.len() + b.bias.len()).sum();
        assert_eq!(total, p.count());
    }

    #[test]
    fn forward_shape_is_logits() {
        let arch = zoo::build("desk-full").unwrap();
        let p = ModelParams::zeros(&arch).unwrap();
        let x = Tensor::zeros(Shape::new(2, 3, 32, 32));
        assert_eq!(forward(&arch, &p, &x).unwrap().shape(), Shape::new(2, 10, 1, 1));
    }

    #[test]
    fn check_rejects_foreign_params() {
        let a = zoo::build("desk-full").unwrap();
        let b = zoo::build("desk-lr").unwrap();
        assert!(ModelParams::zeros(&b).unwrap().check(&a).is_err());
    }
}
