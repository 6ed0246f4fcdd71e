//! Test-only oracles and fixtures, independent of the library's fast paths.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use lrcnn_core::ops::ConvWeights;
use lrcnn_core::train::cifar::{IMAGE_BYTES, RECORD_BYTES};
use lrcnn_core::{Rng, Shape, Tensor};

/// Textbook six-loop cross-correlation: every output element sums its valid
/// taps in `(ci, ky, kx)` order from `0.0`, then adds the bias.
pub fn naive_conv(input: &Tensor, w: &ConvWeights, stride: (usize, usize), pad: (usize, usize)) -> Tensor {
    let s = input.shape();
    let oh = (s.h + 2 * pad.0 - w.kh) / stride.0 + 1;
    let ow = (s.w + 2 * pad.1 - w.kw) / stride.1 + 1;
    let mut out = vec![0.0; s.n * w.d * oh * ow];
    for n in 0..s.n {
        for co in 0..w.d {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..s.c {
                        for ky in 0..w.kh {
                            for kx in 0..w.kw {
                                let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                                let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let wi = ((co * w.c + ci) * w.kh + ky) * w.kw + kx;
                                acc += w.weights[wi] * input.get(n, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out[((n * w.d + co) * oh + oy) * ow + ox] = acc + w.bias[co];
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, w.d, oh, ow), out).unwrap()
}

pub fn random_weights(rng: &mut Rng, d: usize, c: usize, kh: usize, kw: usize) -> ConvWeights {
    let weights = (0..d * c * kh * kw).map(|_| rng.normal()).collect();
    let bias = (0..d).map(|_| rng.normal()).collect();
    ConvWeights::new(d, c, kh, kw, weights, bias).unwrap()
}

/// Raw CIFAR-format records: uniformly random pixel bytes, labels cycling
/// through the ten classes.
pub fn synthetic_records(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n * RECORD_BYTES);
    for i in 0..n {
        out.push((i % 10) as u8);
        out.extend((0..IMAGE_BYTES).map(|_| rng.below(256) as u8));
    }
    out
}

/// Writes a full synthetic CIFAR-10 directory (five training batches and a
/// test batch of `per_file` records each).
pub fn write_synthetic_cifar(dir: &Path, per_file: usize, seed: u64) {
    for (i, f) in lrcnn_core::train::cifar::TRAIN_FILES.iter().enumerate() {
        std::fs::write(dir.join(f), synthetic_records(per_file, seed + i as u64)).unwrap();
    }
    std::fs::write(dir.join(lrcnn_core::train::cifar::TEST_FILE), synthetic_records(per_file, seed + 99)).unwrap();
}

/// Real CIFAR-10 location: `$LRCNN_CIFAR_DIR`, else `data/cifar-10-batches-bin`
/// under the workspace root, if it holds the test batch.
pub fn cifar_dir() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("LRCNN_CIFAR_DIR").map(PathBuf::from),
        Some(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/cifar-10-batches-bin")),
    ];
    candidates
        .into_iter()
        .flatten()
        .find(|d| d.join(lrcnn_core::train::cifar::TEST_FILE).exists())
}
