//! Gaussian weight initialization that keeps back-propagated gradient
//! variance constant through ReLU layers, extended to composite layers, and
//! an empirical probe of that property.
//!
//! A layer whose input elements each feed `n` outgoing weights and whose
//! output passes through a ReLU keeps `Var[grad]` unchanged when
//! `n * Var[w] / 2 = 1`, i.e. `sigma = sqrt(2 / n)`. For a composite layer every
//! group sees the same input, so `n` sums over groups:
//! `n = sum_i kw_i * kh_i * d_i`.

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, LayerSpec};
use crate::composite::FilterGroup;
use crate::error::{Error, Result};
use crate::model::{backward, forward_traced, LayerParams, ModelParams};
use crate::par;
use crate::rng::Rng;
use crate::tensor::{variance, Tensor};

pub fn he_stddev(n_hat: usize) -> Result<f64> {
    if n_hat == 0 {
        return Err(Error::invalid("he_stddev", "connection count must be at least 1"));
    }
    Ok((2.0 / n_hat as f64).sqrt())
}

/// `sqrt(2 / sum_i kw_i * kh_i * d_i)`: the whole composite layer is
/// initialized as one layer with the summed outgoing connection count.
pub fn composite_stddev(groups: &[FilterGroup]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::invalid("composite_stddev", "no filter groups"));
    }
    he_stddev(groups.iter().map(FilterGroup::fan_out).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Each filter group is initialized as if it were a layer of its own,
    /// `sigma = sqrt(2 / (kw * kh * d))` per group. Correct for plain convs,
    /// too large for composite layers.
    HeFanin,
    /// Composite layers use [`composite_stddev`] over all their groups.
    CompositeHe,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub seed: u64,
    /// Multiplier on every sampled weight's standard deviation; `1.0` except
    /// for deliberate mis-scaling experiments.
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl InitSpec {
    pub fn new(scheme: InitScheme, seed: u64) -> Self {
        InitSpec {
            scheme,
            seed,
            scale: 1.0,
        }
    }

    pub fn composite(seed: u64) -> Self {
        Self::new(InitScheme::CompositeHe, seed)
    }

    pub fn scaled(self, scale: f64) -> Self {
        InitSpec { scale, ..self }
    }
}

fn fill(rng: &mut Rng, weights: &mut [f64], sigma: f64) {
    for w in weights {
        *w = sigma * rng.normal();
    }
}

/// Per-layer standard deviations `(layer, sigmas)`, one sigma per parameter
/// block in [`ModelParams::blocks`] order.
pub fn layer_stddevs(arch: &ArchSpec, scheme: InitScheme) -> Result<Vec<(usize, Vec<f64>)>> {
    let last_dense = arch
        .layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Dense { .. }));
    let mut out = Vec::new();
    for (i, layer) in arch.layers.iter().enumerate() {
        let sigmas = match layer {
            LayerSpec::Conv {
                out_channels, kh, kw, ..
            } => vec![he_stddev(kh * kw * out_channels)?],
            LayerSpec::Composite { composite, .. } => {
                let mut s = match scheme {
                    InitScheme::CompositeHe => {
                        vec![composite_stddev(&composite.groups)?; composite.groups.len()]
                    }
                    InitScheme::HeFanin => composite
                        .groups
                        .iter()
                        .map(|g| he_stddev(g.fan_out()))
                        .collect::<Result<_>>()?,
                };
                if let Some(j) = composite.join {
                    s.push(he_stddev(j)?);
                }
                s
            }
            // No ReLU follows the classifier layer, so no factor of two.
            LayerSpec::Dense { inputs, .. } if Some(i) == last_dense => {
                vec![(1.0 / *inputs as f64).sqrt()]
            }
            LayerSpec::Dense { outputs, .. } => vec![he_stddev(*outputs)?],
            _ => continue,
        };
        out.push((i, sigmas));
    }
    Ok(out)
}

/// Zero-mean Gaussian weights and zero biases for every layer. Layer `i`
/// draws from its own stream derived from `(seed, i)`.
pub fn init_network(arch: &ArchSpec, init: &InitSpec) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(arch)?;
    for (i, sigmas) in layer_stddevs(arch, init.scheme)? {
        let mut rng = Rng::derive(init.seed, i as u64);
        let mut sig = sigmas.iter().map(|s| s * init.scale);
        match &mut params.layers[i] {
            LayerParams::Conv(w) => fill(&mut rng, &mut w.weights, sig.next().expect("sigma")),
            LayerParams::Composite(cp) => {
                for w in cp.groups.iter_mut().chain(cp.join.iter_mut()) {
                    fill(&mut rng, &mut w.weights, sig.next().expect("sigma"));
                }
            }
            LayerParams::Dense(d) => fill(&mut rng, &mut d.weights, sig.next().expect("sigma")),
            LayerParams::None => {}
        }
    }
    Ok(params)
}

/// Gradient variance ratio across one parametric layer, over all trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub layer_index: usize,
    pub ratio_mean: f64,
    pub ratio_std: f64,
}

/// Measures `Var[grad at layer input] / Var[grad at next parametric layer's
/// input]` for each parametric layer (the last one is compared with the
/// injected output gradient). Each trial draws fresh weights, a unit
/// Gaussian input batch of one and a unit Gaussian output gradient.
pub fn variance_probe(arch: &ArchSpec, init: &InitSpec, trials: usize, seed: u64) -> Result<Vec<ProbeRow>> {
    if trials == 0 {
        return Err(Error::invalid("variance_probe", "need at least one trial"));
    }
    arch.validate()?;
    let param_layers: Vec<usize> = arch
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.has_params())
        .map(|(i, _)| i)
        .collect();
    if param_layers.is_empty() {
        return Err(Error::invalid("variance_probe", "architecture has no parametric layers"));
    }

    let run = |t: usize| -> Result<Vec<f64>> {
        let trial_init = InitSpec {
            seed: init.seed.wrapping_add(t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed,
            ..*init
        };
        let params = init_network(arch, &trial_init)?;
        let mut rng = Rng::derive(seed, t as u64);
        let x = Tensor::randn(arch.input_shape(1), &mut rng);
        let (y, trace) = forward_traced(arch, &params, &x, None)?;
        let g = Tensor::randn(y.shape(), &mut rng);
        let bw = backward(arch, &params, &trace, &g, true)?;
        let grads = bw.input_grads.expect("requested");
        let vars: Vec<f64> = param_layers.iter().map(|&i| grads[i].variance()).collect();
        let top = variance(g.data());
        Ok(vars
            .iter()
            .enumerate()
            .map(|(k, v)| v / vars.get(k + 1).copied().unwrap_or(top))
            .collect())
    };
    let per_trial = par::map_indexed(trials, run)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    Ok(param_layers
        .iter()
        .enumerate()
        .map(|(k, &layer_index)| {
            let xs: Vec<f64> = per_trial.iter().map(|r| r[k]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let std = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            ProbeRow {
                layer_index,
                ratio_mean: mean,
                ratio_std: std,
            }
        })
        .collect())
}

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut s = String::from("layer_index,ratio_mean,ratio_std\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.layer_index, r.ratio_mean, r.ratio_std));
    }
    s
}

/// Geometric mean of the per-layer mean ratios.
pub fn geometric_mean_ratio(rows: &[ProbeRow]) -> f64 {
    (rows.iter().map(|r| r.ratio_mean.ln()).sum::<f64>() / rows.len() as f64).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composite::CompositeConvSpec;
    use crate::zoo;
    use proptest::prelude::*;

    #[test]
    fn he_values() {
        assert_eq!(he_stddev(2).unwrap(), 1.0);
        assert_eq!(he_stddev(8).unwrap(), 0.5);
        assert!((he_stddev(576).unwrap() - 0.058_925_565_098_878_96).abs() < 1e-15);
        assert!(he_stddev(0).is_err());
    }

    #[test]
    fn composite_values() {
        let cross = [FilterGroup::new(3, 1, 32), FilterGroup::new(1, 3, 32)];
        assert!((composite_stddev(&cross).unwrap() - (2.0f64 / 192.0).sqrt()).abs() < 1e-15);
        let wfull = [FilterGroup::new(3, 1, 24), FilterGroup::new(1, 3, 24), FilterGroup::new(3, 3, 16)];
        assert!((composite_stddev(&wfull).unwrap() - 1.0 / 12.0).abs() < 1e-15);
        assert!(composite_stddev(&[]).is_err());
    }

    proptest! {
        #[test]
        fn single_group_reduces_to_he(kw in 1usize..8, kh in 1usize..8, d in 1usize..600) {
            prop_assert_eq!(composite_stddev(&[FilterGroup::new(kw, kh, d)]).unwrap(), he_stddev(kw * kh * d).unwrap());
        }

        #[test]
        fn group_order_irrelevant(groups in prop::collection::vec((1usize..6, 1usize..6, 1usize..100), 1..5)) {
            let gs: Vec<FilterGroup> = groups.iter().map(|&(w, h, d)| FilterGroup::new(w, h, d)).collect();
            let mut rev = gs.clone();
            rev.reverse();
            prop_assert_eq!(composite_stddev(&gs).unwrap(), composite_stddev(&rev).unwrap());
        }
    }

    fn one_conv(c: usize, d: usize) -> ArchSpec {
        ArchSpec::new("one", (c, 16, 16), vec![LayerSpec::conv(c, d, 3, 3), LayerSpec::Relu])
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let arch = zoo::build("desk-lr").unwrap();
        let a = init_network(&arch, &InitSpec::composite(5)).unwrap();
        let b = init_network(&arch, &InitSpec::composite(5)).unwrap();
        let c = init_network(&arch, &InitSpec::composite(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for blk in a.blocks() {
            assert!(blk.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn sampled_moments_match_sigma() {
        // 64 filters of 3x3 over 64 channels: 36,864 weights, sigma = sqrt(2/576).
        let arch = one_conv(64, 64);
        let p = init_network(&arch, &InitSpec::composite(11)).unwrap();
        let w = p.blocks()[0].weights;
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = variance(w).sqrt();
        let sigma = he_stddev(576).unwrap();
        assert!(mean.abs() < 4.0 * sigma / n.sqrt(), "mean {mean}");
        assert!((std - sigma).abs() < 0.05 * sigma, "std {std}");
    }

    #[test]
    fn composite_layers_share_one_sigma() {
        let arch = zoo::build("vgg-gmp-lr-join-wfull").unwrap();
        let sig = layer_stddevs(&arch, InitScheme::CompositeHe).unwrap();
        let (_, first) = &sig[0];
        assert_eq!(first.len(), 4);
        assert!((first[0] - 1.0 / 12.0).abs() < 1e-15);
        assert_eq!(first[0], first[2]);
        assert_eq!(first[3], he_stddev(64).unwrap());
        // Classifier layer: fan-in without the ReLU factor.
        let (_, last) = sig.last().unwrap();
        assert_eq!(last[0], (1.0f64 / 4096.0).sqrt());
    }

    #[test]
    fn single_layer_probe_near_one() {
        let rows = variance_probe(&one_conv(32, 32), &InitSpec::composite(1), 8, 3).unwrap();
        assert_eq!(rows.len(), 1);
        assert!((rows[0].ratio_mean - 1.0).abs() < 0.15, "{rows:?}");
    }

    #[test]
    fn per_group_he_overestimates_composite_variance() {
        let arch = ArchSpec::new(
            "c",
            (32, 12, 12),
            vec![
                LayerSpec::composite(32, CompositeConvSpec::new(vec![FilterGroup::new(3, 1, 16), FilterGroup::new(1, 3, 16)])),
                LayerSpec::Relu,
            ],
        );
        let good = variance_probe(&arch, &InitSpec::composite(2), 8, 1).unwrap();
        let naive = variance_probe(&arch, &InitSpec::new(InitScheme::HeFanin, 2), 8, 1).unwrap();
        assert!((good[0].ratio_mean - 1.0).abs() < 0.2, "{good:?}");
        assert!((naive[0].ratio_mean - 2.0).abs() < 0.4, "{naive:?}");
    }

    #[test]
    fn probe_csv_header() {
        let csv = probe_csv(&[ProbeRow { layer_index: 0, ratio_mean: 1.0, ratio_std: 0.5 }]);
        assert_eq!(csv, "layer_index,ratio_mean,ratio_std\n0,1,0.5\n");
    }
}
