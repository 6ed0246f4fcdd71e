//! Central finite-difference checks of every backward pass.
//!
//! Each case uses the scalar objective `L = sum(R * op(x))` with a random
//! weighting `R`, perturbs every input and parameter element by `±EPS` and
//! compares `sum(R * (y+ - y-)) / 2 EPS` against the analytic gradient.
//! Differencing outputs before weighting keeps outputs the perturbation does
//! not reach at exactly zero. Per-element error is
//! `|a - n| / max(|a|, |n|, DENOM_FLOOR)`.

use crate::arch::{ArchSpec, LayerSpec};
use crate::composite::{composite_backward, composite_forward, CompositeConvSpec, CompositeParams, FilterGroup};
use crate::error::Result;
use crate::model::{backward, forward, forward_traced, ModelParams};
use crate::ops::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, global_maxpool_backward,
    global_maxpool_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward, softmax_xent,
    ConvWeights, DenseWeights,
};
use crate::par;
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

pub const EPS: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const DENOM_FLOOR: f64 = 1e-2;

pub const OPS: [&str; 9] = [
    "conv",
    "composite",
    "composite-join",
    "maxpool",
    "global-maxpool",
    "relu",
    "dense",
    "softmax-xent",
    "network",
];

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(DENOM_FLOOR)
}

/// Largest error over every element of every variable. `vars[k]` is
/// perturbed in place; `analytic[k]` is its claimed gradient of
/// `sum(weights * f(vars))`.
pub fn max_fd_error(
    vars: &mut [Vec<f64>],
    analytic: &[Vec<f64>],
    weights: &[f64],
    f: impl Fn(&[Vec<f64>]) -> Result<Vec<f64>>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for k in 0..vars.len() {
        for i in 0..vars[k].len() {
            let orig = vars[k][i];
            vars[k][i] = orig + EPS;
            let up = f(vars)?;
            vars[k][i] = orig - EPS;
            let down = f(vars)?;
            vars[k][i] = orig;
            let diff: f64 = up.iter().zip(&down).zip(weights).map(|((u, d), r)| r * (u - d)).sum();
            worst = worst.max(rel_error(analytic[k][i], diff / (2.0 * EPS)));
        }
    }
    Ok(worst)
}

fn randv(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn pick<T: Copy>(rng: &mut Rng, items: &[T]) -> T {
    items[rng.below(items.len())]
}

/// Values whose pairwise gaps are at least 0.09, so a `±EPS` nudge never
/// changes which element of a pooling window is largest.
fn separated(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 + 0.01 * rng.uniform()).collect();
    rng.shuffle(&mut v);
    v.iter().map(|x| x - n as f64 * 0.05).collect()
}

fn conv_case(rng: &mut Rng) -> Result<f64> {
    let (n, c, d) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
    let (kh, kw) = pick(rng, &[(3, 3), (1, 3), (3, 1), (1, 1), (5, 5), (1, 7), (7, 1), (2, 3)]);
    let stride = (1 + rng.below(2), 1 + rng.below(2));
    let pad = (rng.below(kh / 2 + 1), rng.below(kw / 2 + 1));
    let s = Shape::new(n, c, kh + rng.below(4), kw + rng.below(4));
    let w0 = ConvWeights::new(d, c, kh, kw, randv(rng, d * c * kh * kw), randv(rng, d))?;
    let x0 = randv(rng, s.numel());
    let os = crate::ops::conv2d_output_shape(s, &w0, stride, pad)?;
    let r = randv(rng, os.numel());
    let g = conv2d_backward(&Tensor::from_vec(s, x0.clone())?, &w0, &Tensor::from_vec(os, r.clone())?, stride, pad)?;
    let mut vars = vec![x0, w0.weights.clone(), w0.bias.clone()];
    max_fd_error(&mut vars, &[g.grad_input.into_vec(), g.grad_weights, g.grad_bias], &r, |v| {
        let w = ConvWeights::new(d, c, kh, kw, v[1].clone(), v[2].clone())?;
        Ok(conv2d_forward(&Tensor::from_vec(s, v[0].clone())?, &w, stride, pad)?.into_vec())
    })
}

fn composite_case(rng: &mut Rng, with_join: bool) -> Result<f64> {
    let c = 1 + rng.below(3);
    let shapes = [(3, 1), (1, 3), (3, 3), (1, 1), (5, 1), (1, 5)];
    let groups: Vec<FilterGroup> = (0..1 + rng.below(3))
        .map(|_| {
            let (kw, kh) = pick(rng, &shapes);
            FilterGroup::new(kw, kh, 1 + rng.below(3))
        })
        .collect();
    let mut spec = CompositeConvSpec::new(groups).with_stride(pick(rng, &[(1, 1), (2, 2), (1, 2)]));
    if with_join {
        spec = spec.with_join(1 + rng.below(3));
    }
    let s = Shape::new(1 + rng.below(2), c, 5 + rng.below(3), 5 + rng.below(3));
    let mut p = CompositeParams::zeros(&spec, c);
    let mut vars = vec![randv(rng, s.numel())];
    for w in p.groups.iter_mut().chain(p.join.iter_mut()) {
        w.weights = randv(rng, w.weights.len());
        w.bias = randv(rng, w.bias.len());
        vars.push(w.weights.clone());
        vars.push(w.bias.clone());
    }
    let os = spec.output_shape(s)?;
    let r = randv(rng, os.numel());
    let cg = composite_backward(&Tensor::from_vec(s, vars[0].clone())?, &spec, &p, &Tensor::from_vec(os, r.clone())?)?;
    let mut analytic = vec![cg.grad_input.into_vec()];
    for b in cg.groups.into_iter().chain(cg.join) {
        analytic.push(b.grad_weights);
        analytic.push(b.grad_bias);
    }
    let template = p.clone();
    max_fd_error(&mut vars, &analytic, &r, |v| {
        let mut q = template.clone();
        for (k, w) in q.groups.iter_mut().chain(q.join.iter_mut()).enumerate() {
            w.weights.clone_from(&v[1 + 2 * k]);
            w.bias.clone_from(&v[2 + 2 * k]);
        }
        Ok(composite_forward(&Tensor::from_vec(s, v[0].clone())?, &spec, &q)?.into_vec())
    })
}

fn maxpool_case(rng: &mut Rng, global: bool) -> Result<f64> {
    let s = Shape::new(1 + rng.below(2), 1 + rng.below(3), 2 + rng.below(6), 2 + rng.below(6));
    let x = Tensor::from_vec(s, separated(rng, s.numel()))?;
    let (y, idx) = if global {
        global_maxpool_forward(&x)?
    } else {
        maxpool_forward(&x, 2, 2)?
    };
    let r = randv(rng, y.shape().numel());
    let go = Tensor::from_vec(y.shape(), r.clone())?;
    let gi = if global {
        global_maxpool_backward(&idx, &go)?
    } else {
        maxpool_backward(&idx, &go)?
    };
    let mut vars = vec![x.into_vec()];
    max_fd_error(&mut vars, &[gi.into_vec()], &r, |v| {
        let t = Tensor::from_vec(s, v[0].clone())?;
        let out = if global {
            global_maxpool_forward(&t)?.0
        } else {
            maxpool_forward(&t, 2, 2)?.0
        };
        Ok(out.into_vec())
    })
}

fn relu_case(rng: &mut Rng) -> Result<f64> {
    let s = Shape::new(1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(5), 1 + rng.below(5));
    // Keep clear of the kink at zero.
    let x0: Vec<f64> = (0..s.numel())
        .map(|_| loop {
            let v = rng.normal();
            if v.abs() >= 1e-3 {
                break v;
            }
        })
        .collect();
    let r = randv(rng, s.numel());
    let gi = relu_backward(&Tensor::from_vec(s, x0.clone())?, &Tensor::from_vec(s, r.clone())?)?;
    max_fd_error(&mut [x0], &[gi.into_vec()], &r, |v| Ok(relu_forward(&Tensor::from_vec(s, v[0].clone())?).into_vec()))
}

fn dense_case(rng: &mut Rng) -> Result<f64> {
    let (n, k, m) = (1 + rng.below(3), 1 + rng.below(9), 1 + rng.below(6));
    let s = Shape::new(n, k, 1, 1);
    let w0 = DenseWeights::new(k, m, randv(rng, k * m), randv(rng, m))?;
    let x0 = randv(rng, n * k);
    let r = randv(rng, n * m);
    let g = dense_backward(&Tensor::from_vec(s, x0.clone())?, &w0, &Tensor::from_vec(Shape::new(n, m, 1, 1), r.clone())?)?;
    let mut vars = vec![x0, w0.weights.clone(), w0.bias.clone()];
    max_fd_error(&mut vars, &[g.grad_input.into_vec(), g.grad_weights, g.grad_bias], &r, |v| {
        let w = DenseWeights::new(k, m, v[1].clone(), v[2].clone())?;
        Ok(dense_forward(&Tensor::from_vec(s, v[0].clone())?, &w)?.into_vec())
    })
}

fn softmax_case(rng: &mut Rng) -> Result<f64> {
    let (n, k) = (1 + rng.below(4), 2 + rng.below(9));
    let s = Shape::new(n, k, 1, 1);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
    let z: Vec<f64> = randv(rng, n * k).iter().map(|v| 3.0 * v).collect();
    let (_, g) = softmax_xent(&Tensor::from_vec(s, z.clone())?, &labels)?;
    max_fd_error(&mut [z], &[g.into_vec()], &[1.0], |v| Ok(vec![softmax_xent(&Tensor::from_vec(s, v[0].clone())?, &labels)?.0]))
}

/// A small network touching every layer kind, checked end to end through
/// the model-level forward and backward passes and the loss.
fn network_case(rng: &mut Rng) -> Result<f64> {
    let arch = ArchSpec::new(
        "gradcheck-net",
        (2, 6, 6),
        vec![
            LayerSpec::conv(2, 3, 3, 3),
            LayerSpec::Relu,
            LayerSpec::MaxPool { k: 2, stride: 2 },
            LayerSpec::composite(
                3,
                CompositeConvSpec::new(vec![FilterGroup::new(3, 1, 2), FilterGroup::new(1, 3, 2)]).with_join(3),
            ),
            LayerSpec::Relu,
            LayerSpec::GlobalMaxPool,
            LayerSpec::dense(3, 4),
            LayerSpec::Relu,
            LayerSpec::dense(4, 3),
            LayerSpec::Softmax,
        ],
    );
    let mut params = ModelParams::zeros(&arch)?;
    for (w, b) in params.blocks_mut() {
        w.iter_mut().for_each(|v| *v = 0.7 * rng.normal());
        b.iter_mut().for_each(|v| *v = 0.1 * rng.normal());
    }
    let x0 = randv(rng, 2 * 2 * 6 * 6);
    let labels = [rng.below(3), rng.below(3)];
    let shape = arch.input_shape(2);
    let loss_of = |p: &ModelParams, x: &[f64]| -> Result<f64> {
        Ok(softmax_xent(&forward(&arch, p, &Tensor::from_vec(shape, x.to_vec())?)?, &labels)?.0)
    };
    let (logits, trace) = forward_traced(&arch, &params, &Tensor::from_vec(shape, x0.clone())?, None)?;
    let (_, gl) = softmax_xent(&logits, &labels)?;
    let bw = backward(&arch, &params, &trace, &gl, true)?;

    let mut analytic = vec![bw.input_grads.expect("requested")[0].data().to_vec()];
    let mut vars = vec![x0];
    for (blk, gblk) in params.blocks().iter().zip(bw.grads.blocks()) {
        vars.push(blk.weights.to_vec());
        vars.push(blk.bias.to_vec());
        analytic.push(gblk.weights.to_vec());
        analytic.push(gblk.bias.to_vec());
    }
    let template = params.clone();
    max_fd_error(&mut vars, &analytic, &[1.0], |v| {
        let mut p = template.clone();
        for (k, (w, b)) in p.blocks_mut().into_iter().enumerate() {
            w.clone_from(&v[1 + 2 * k]);
            b.clone_from(&v[2 + 2 * k]);
        }
        Ok(vec![loss_of(&p, &v[0])?])
    })
}

fn run_case(op: &str, rng: &mut Rng) -> Result<f64> {
    match op {
        "conv" => conv_case(rng),
        "composite" => composite_case(rng, false),
        "composite-join" => composite_case(rng, true),
        "maxpool" => maxpool_case(rng, false),
        "global-maxpool" => maxpool_case(rng, true),
        "relu" => relu_case(rng),
        "dense" => dense_case(rng),
        "softmax-xent" => softmax_case(rng),
        "network" => network_case(rng),
        _ => unreachable!("unknown op {op}"),
    }
}

/// Runs `cases` random cases of every op in [`OPS`]. Case `i` of op `k`
/// draws from the stream derived from `(seed, k * cases + i)`.
pub fn gradient_suite(seed: u64, cases: usize) -> Result<Vec<OpCheck>> {
    OPS.iter()
        .enumerate()
        .map(|(k, &op)| {
            let errs = par::map_indexed(cases, |i| {
                let mut rng = Rng::derive(seed, (k * cases + i) as u64);
                run_case(op, &mut rng)
            });
            let mut max_rel_error = 0.0f64;
            for e in errs {
                max_rel_error = max_rel_error.max(e?);
            }
            Ok(OpCheck {
                op,
                cases,
                max_rel_error,
            })
        })
        .collect()
}
