//! Minibatch SGD with the inverse-time learning-rate schedule, data
//! ingestion and preprocessing, evaluation and checkpoints.

pub mod augment;
pub mod checkpoint;
pub mod cifar;
pub mod zca;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use augment::{augment, crop_mirror, Augment};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use cifar::{load_cifar10, Dataset};
pub use zca::Zca;

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::init::{init_network, InitScheme, InitSpec};
use crate::model::{backward, forward, forward_traced, Dropout, ModelParams};
use crate::ops::softmax_xent;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma0: f64,
    #[serde(default)]
    pub lambda: f64,
    pub batch: usize,
    #[serde(default = "one")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stop after this many iterations even mid-epoch.
    #[serde(default)]
    pub max_iterations: Option<u64>,
    #[serde(default)]
    pub momentum: f64,
    /// Inverted-dropout rate on the inputs of every dense layer after the
    /// first.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub augment: Augment,
    #[serde(default)]
    pub zca: bool,
    #[serde(default = "zca_eps")]
    pub zca_eps: f64,
    /// `(iteration, factor)`: from `iteration` on, the rate is multiplied by
    /// `factor`. Drops compound.
    #[serde(default)]
    pub manual_lr_drops: Vec<(u64, f64)>,
    #[serde(default = "composite_he")]
    pub init: InitScheme,
}

fn one() -> usize {
    1
}

fn zca_eps() -> f64 {
    zca::DEFAULT_EPS
}

fn composite_he() -> InitScheme {
    InitScheme::CompositeHe
}

impl TrainConfig {
    pub fn new(gamma0: f64, lambda: f64, batch: usize, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            gamma0,
            lambda,
            batch,
            epochs,
            seed,
            max_iterations: None,
            momentum: 0.0,
            dropout: 0.0,
            augment: Augment::default(),
            zca: false,
            zca_eps: zca::DEFAULT_EPS,
            manual_lr_drops: Vec::new(),
            init: InitScheme::CompositeHe,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma0 > 0.0) {
            return bad("gamma0 must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.zca_eps > 0.0) {
            return bad("zca_eps must be positive");
        }
        if self.manual_lr_drops.iter().any(|&(_, f)| !(f > 0.0)) {
            return bad("lr drop factors must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// `gamma0 / (1 + gamma0 * lambda * t)`, times every manual drop factor
/// whose iteration is at most `t`.
pub fn lr_schedule(gamma0: f64, lambda: f64, t: u64, drops: &[(u64, f64)]) -> f64 {
    let base = gamma0 / (1.0 + gamma0 * lambda * t as f64);
    drops.iter().filter(|&&(at, _)| at <= t).fold(base, |g, &(_, f)| g * f)
}

/// `w -= gamma * (g + lambda * w)` on weights, `b -= gamma * g` on biases.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, gamma: f64, lambda: f64) {
    for ((w, b), g) in params.blocks_mut().into_iter().zip(grads.blocks()) {
        for (w, g) in w.iter_mut().zip(g.weights) {
            *w -= gamma * (g + lambda * *w);
        }
        for (b, g) in b.iter_mut().zip(g.bias) {
            *b -= gamma * g;
        }
    }
}

/// SGD with heavy-ball momentum; with `momentum = 0` every step equals
/// [`sgd_step`].
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Sgd {
    pub fn new(params: &ModelParams, momentum: f64) -> Self {
        let velocity = params
            .blocks()
            .iter()
            .map(|b| (vec![0.0; b.weights.len()], vec![0.0; b.bias.len()]))
            .collect();
        Sgd { momentum, velocity }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, gamma: f64, lambda: f64) {
        if self.momentum == 0.0 {
            return sgd_step(params, grads, gamma, lambda);
        }
        let mu = self.momentum;
        for (((w, b), g), (vw, vb)) in params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(&mut self.velocity)
        {
            for ((w, g), v) in w.iter_mut().zip(g.weights).zip(vw.iter_mut()) {
                *v = mu * *v + g + lambda * *w;
                *w -= gamma * *v;
            }
            for ((b, g), v) in b.iter_mut().zip(g.bias).zip(vb.iter_mut()) {
                *v = mu * *v + g;
                *b -= gamma * *v;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub t: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Accuracy on the (augmented) training batches seen during the epoch.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub iterations: Vec<IterRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,lr,loss\n");
        for r in &self.iterations {
            s.push_str(&format!("{},{},{}\n", r.t, r.lr, r.loss));
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,train_acc,val_acc\n");
        for e in &self.epochs {
            let val = e.val_acc.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{val}\n", e.epoch, e.train_acc));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    pub history: TrainHistory,
    pub zca: Option<Zca>,
}

impl Trained {
    pub fn checkpoint(self, arch: &ArchSpec) -> Checkpoint {
        Checkpoint {
            arch: arch.clone(),
            params: self.params,
            zca: self.zca,
        }
    }
}

// Stream indices for the per-purpose generators derived from the seed.
const STREAM_SHUFFLE: u64 = 1 << 40;
const STREAM_AUGMENT: u64 = 2 << 40;
const STREAM_DROPOUT: u64 = 3 << 40;

fn check_data(arch: &ArchSpec, data: &Dataset) -> Result<()> {
    if data.dims != arch.input {
        return Err(Error::invalid(
            "train",
            format!("data is {:?} but {} expects {:?}", data.dims, arch.name, arch.input),
        ));
    }
    Ok(())
}

/// Trains from a fresh initialization. With `config.zca` the whitening is
/// fitted on `data` and applied to both `data` and `val`.
pub fn train(arch: &ArchSpec, data: &Dataset, val: Option<&Dataset>, config: &TrainConfig) -> Result<Trained> {
    config.validate()?;
    arch.validate()?;
    check_data(arch, data)?;
    if data.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    let zca = config.zca.then(|| Zca::fit(data, config.zca_eps)).transpose()?;
    let (data, val) = match &zca {
        Some(z) => (z.apply(data)?, val.map(|v| z.apply(v)).transpose()?),
        None => (data.clone(), val.cloned()),
    };

    let mut params = init_network(arch, &InitSpec::new(config.init, config.seed))?;
    let mut opt = Sgd::new(&params, config.momentum);
    let mut history = TrainHistory::default();
    let mut t = 0u64;
    let limit = config.max_iterations.unwrap_or(u64::MAX);
    let mut order: Vec<usize> = (0..data.len()).collect();

    'epochs: for epoch in 0..config.epochs {
        Rng::derive(config.seed, STREAM_SHUFFLE + epoch as u64).shuffle(&mut order);
        let (mut correct, mut seen) = (0usize, 0usize);
        for idx in order.chunks(config.batch) {
            if t >= limit {
                break 'epochs;
            }
            let (mut x, labels) = data.batch(idx);
            if !config.augment.is_identity() {
                let mut rng = Rng::derive(config.seed, STREAM_AUGMENT + t);
                let n = data.image_len();
                for i in 0..idx.len() {
                    let img = augment(&x.data()[i * n..(i + 1) * n], data.dims, &config.augment, &mut rng);
                    x.data_mut()[i * n..(i + 1) * n].copy_from_slice(&img);
                }
            }
            let mut drop_rng = Rng::derive(config.seed, STREAM_DROPOUT + t);
            let dropout = (config.dropout > 0.0).then_some(Dropout {
                p: config.dropout,
                rng: &mut drop_rng,
            });
            let (logits, trace) = forward_traced(arch, &params, &x, dropout)?;
            let (loss, grad) = softmax_xent(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration: t, loss });
            }
            correct += top_k_hits(&logits, &labels, 1);
            seen += labels.len();
            let lr = lr_schedule(config.gamma0, config.lambda, t, &config.manual_lr_drops);
            let bw = backward(arch, &params, &trace, &grad, false)?;
            opt.step(&mut params, &bw.grads, lr, config.lambda);
            history.iterations.push(IterRecord { t, lr, loss });
            t += 1;
        }
        let val_acc = val.as_ref().map(|v| evaluate(arch, &params, v, 1)).transpose()?;
        history.epochs.push(EpochRecord {
            epoch,
            train_acc: correct as f64 / seen.max(1) as f64,
            val_acc: val_acc.map(|e| e.top1),
        });
    }
    Ok(Trained { params, history, zca })
}

/// Count of rows whose label is among the `k` largest logits. Ties rank
/// the lower class index first.
fn top_k_hits(logits: &Tensor, labels: &[usize], k: usize) -> usize {
    let classes = logits.shape().c;
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let above = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > row[y] || (v == row[y] && j < y))
                .count();
            above < k
        })
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
    pub loss: f64,
}

const EVAL_BATCH: usize = 100;

/// Single-view accuracy and mean loss over `data`.
pub fn evaluate(arch: &ArchSpec, params: &ModelParams, data: &Dataset, k: usize) -> Result<Evaluation> {
    check_data(arch, data)?;
    if data.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let (mut top1, mut topk, mut loss) = (0, 0, 0.0);
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(idx);
        let logits = forward(arch, params, &x)?;
        top1 += top_k_hits(&logits, &labels, 1);
        topk += top_k_hits(&logits, &labels, k);
        loss += softmax_xent(&logits, &labels)?.0 * labels.len() as f64;
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        top1: top1 as f64 / n,
        topk: topk as f64 / n,
        k,
        loss: loss / n,
    })
}

/// Evaluates a checkpoint, applying its stored whitening first.
pub fn evaluate_checkpoint(ck: &Checkpoint, data: &Dataset, k: usize) -> Result<Evaluation> {
    match &ck.zca {
        Some(z) => evaluate(&ck.arch, &ck.params, &z.apply(data)?, k),
        None => evaluate(&ck.arch, &ck.params, data, k),
    }
}

/// Uniform-logit loss for `classes` classes, the expected starting point.
pub fn chance_loss(classes: usize) -> f64 {
    (classes as f64).ln()
}
