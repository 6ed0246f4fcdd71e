//! Direct 2-D convolution (cross-correlation, zero padding).
//!
//! The forward pass lowers the input to a tap matrix and accumulates every
//! output element in `(ci, ky, kx)` order starting from `0.0`, adding the
//! bias last. That agrees bit for bit with the textbook nested-loop
//! definition. The backward pass has no such constraint and uses a blocked
//! GEMM.

use crate::error::{ensure_dim, Error, Result};
use crate::par;
use crate::tensor::{Shape, Tensor};

/// Filter bank of `d` filters over `c` input channels, stored `(d, c, kh, kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub d: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvWeights {
    pub fn zeros(d: usize, c: usize, kh: usize, kw: usize) -> Self {
        ConvWeights {
            d,
            c,
            kh,
            kw,
            weights: vec![0.0; d * c * kh * kw],
            bias: vec![0.0; d],
        }
    }

    pub fn new(
        d: usize,
        c: usize,
        kh: usize,
        kw: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        ensure_dim("conv weights", "weight count", d * c * kh * kw, weights.len())?;
        ensure_dim("conv weights", "bias count", d, bias.len())?;
        Ok(ConvWeights {
            d,
            c,
            kh,
            kw,
            weights,
            bias,
        })
    }

    pub fn index(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.c + ci) * self.kh + ky) * self.kw + kx
    }
}

/// Gradients of a parametric layer. `grad_weights` and `grad_bias` share the
/// layout of the layer's weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub grad_input: Tensor,
    pub grad_weights: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

/// Padding that keeps spatial size at stride 1 for odd kernels.
pub const fn same_padding(kh: usize, kw: usize) -> (usize, usize) {
    (kh / 2, kw / 2)
}

/// Output length along one axis, or `None` if the kernel does not fit.
pub const fn output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        None
    } else {
        Some((input + 2 * pad - kernel) / stride + 1)
    }
}

pub fn conv2d_output_shape(
    input: Shape,
    w: &ConvWeights,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Shape> {
    const OP: &str = "conv2d";
    ensure_dim(OP, "input channels", w.c, input.c)?;
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::invalid(OP, "stride must be at least 1"));
    }
    let oh = output_len(input.h, w.kh, stride.0, pad.0).ok_or_else(|| {
        Error::invalid(
            OP,
            format!("kernel height {} exceeds padded input height {}", w.kh, input.h + 2 * pad.0),
        )
    })?;
    let ow = output_len(input.w, w.kw, stride.1, pad.1).ok_or_else(|| {
        Error::invalid(
            OP,
            format!("kernel width {} exceeds padded input width {}", w.kw, input.w + 2 * pad.1),
        )
    })?;
    Ok(Shape::new(input.n, w.d, oh, ow))
}

/// Output indices `o` in `0..out_len` whose tap `o*stride + k - pad` lands in `0..in_len`.
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > k {
        (in_len + pad - k).div_ceil(stride).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    sy: usize,
    sx: usize,
    py: usize,
    px: usize,
}

/// Lowers one sample to a `(c*kh*kw) x (oh*ow)` matrix, row `(ci, ky, kx)`
/// holding that tap for every output position (zero where it falls in the
/// padding).
fn im2col(input: &[f64], kh: usize, kw: usize, g: Geometry) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut col = vec![0.0; g.c * kh * kw * p];
    for ci in 0..g.c {
        let ip = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.py, g.sy, g.h, g.oh);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = valid_range(kx, g.px, g.sx, g.w, g.ow);
                let row = &mut col[((ci * kh + ky) * kw + kx) * p..][..p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.sy + ky - g.py;
                    let src = &ip[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox_lo..ox_hi {
                        dst[ox] = src[ox * g.sx + kx - g.px];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a column-gradient matrix back onto the input layout.
fn col2im(gcol: &[f64], kh: usize, kw: usize, g: Geometry, gin: &mut [f64]) {
    let p = g.oh * g.ow;
    for ci in 0..g.c {
        let gp = &mut gin[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.py, g.sy, g.h, g.oh);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = valid_range(kx, g.px, g.sx, g.w, g.ow);
                let row = &gcol[((ci * kh + ky) * kw + kx) * p..][..p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.sy + ky - g.py;
                    let dst = &mut gp[iy * g.w..(iy + 1) * g.w];
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox_lo..ox_hi {
                        dst[ox * g.sx + kx - g.px] += src[ox];
                    }
                }
            }
        }
    }
}

/// `out[r, j] = sum_k w[r, k] * col[k, j]`, each sum accumulated from `0.0`
/// in ascending `k`. Padding taps contribute exact zeros, which leave a
/// finite accumulator bit-for-bit unchanged.
#[inline(always)]
fn ordered_gemm<const ROWS: usize, const LANES: usize>(w: &[f64], d: usize, k: usize, col: &[f64], p: usize, out: &mut [f64]) {
    let mut co = 0;
    while co < d {
        let rows = ROWS.min(d - co);
        let mut wr: [&[f64]; ROWS] = [&[]; ROWS];
        for (r, slot) in wr.iter_mut().enumerate().take(rows) {
            *slot = &w[(co + r) * k..(co + r + 1) * k];
        }
        let mut j = 0;
        while j + LANES <= p {
            let mut acc = [[0.0f64; LANES]; ROWS];
            for kk in 0..k {
                let x: &[f64; LANES] = col[kk * p + j..kk * p + j + LANES].try_into().expect("lanes");
                for r in 0..rows {
                    let wv = wr[r][kk];
                    for l in 0..LANES {
                        acc[r][l] += wv * x[l];
                    }
                }
            }
            for (r, a) in acc.iter().enumerate().take(rows) {
                out[(co + r) * p + j..(co + r) * p + j + LANES].copy_from_slice(a);
            }
            j += LANES;
        }
        for jj in j..p {
            for r in 0..rows {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += wr[r][kk] * col[kk * p + jj];
                }
                out[(co + r) * p + jj] = acc;
            }
        }
        co += rows;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn ordered_gemm_avx2(w: &[f64], d: usize, k: usize, col: &[f64], p: usize, out: &mut [f64]) {
    ordered_gemm::<4, 8>(w, d, k, col, p, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn ordered_gemm_avx512(w: &[f64], d: usize, k: usize, col: &[f64], p: usize, out: &mut [f64]) {
    ordered_gemm::<R512, L512>(w, d, k, col, p, out);
}

fn ordered_gemm_dispatch(w: &[f64], d: usize, k: usize, col: &[f64], p: usize, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        // SAFETY: the CPU supports AVX-512F, checked just above.
        return unsafe { ordered_gemm_avx512(w, d, k, col, p, out) };
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { ordered_gemm_avx2(w, d, k, col, p, out) };
    }
    ordered_gemm::<4, 4>(w, d, k, col, p, out);
}

const R512: usize = 4;
const L512: usize = 16;

const fn is_pointwise(wt: &ConvWeights, g: Geometry) -> bool {
    wt.kh == 1 && wt.kw == 1 && g.sy == 1 && g.sx == 1 && g.py == 0 && g.px == 0
}

fn forward_sample(input: &[f64], wt: &ConvWeights, g: Geometry, out: &mut [f64]) {
    let p = g.oh * g.ow;
    let k = g.c * wt.kh * wt.kw;
    let lowered;
    let col = if is_pointwise(wt, g) {
        input
    } else {
        lowered = im2col(input, wt.kh, wt.kw, g);
        &lowered
    };
    ordered_gemm_dispatch(&wt.weights, wt.d, k, col, p, out);
    for (plane, &b) in out.chunks_exact_mut(p).zip(&wt.bias) {
        for v in plane {
            *v += b;
        }
    }
}

/// Cross-correlation of `input` with `w`, zero padding, bias per output channel.
pub fn conv2d_forward(
    input: &Tensor,
    w: &ConvWeights,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor> {
    let s = input.shape();
    let os = conv2d_output_shape(s, w, stride, pad)?;
    let g = Geometry {
        c: s.c,
        h: s.h,
        w: s.w,
        oh: os.h,
        ow: os.w,
        sy: stride.0,
        sx: stride.1,
        py: pad.0,
        px: pad.1,
    };
    let mut out = Tensor::zeros(os);
    let sample_in = s.sample();
    let data = input.data();
    par::for_each_chunk(out.data_mut(), os.sample(), |n, chunk| {
        forward_sample(&data[n * sample_in..(n + 1) * sample_in], w, g, chunk)
    });
    Ok(out)
}

struct SampleGrads {
    input: Vec<f64>,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// `c = a * b` for row-major `a: m x k` (strides `ars`, `acs`) and
/// `b: k x n` (strides `brs`, `bcs`); `c` is row-major `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ars: usize, acs: usize, b: &[f64], brs: usize, bcs: usize, c: &mut [f64]) {
    debug_assert!(c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every index touched, (m-1)*rs + (k-1)*cs and the like, lies
    // inside the slices by construction of the callers' shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            ars as isize,
            acs as isize,
            b.as_ptr(),
            brs as isize,
            bcs as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn backward_sample(input: &[f64], wt: &ConvWeights, g: Geometry, grad_out: &[f64]) -> SampleGrads {
    let p = g.oh * g.ow;
    let k = g.c * wt.kh * wt.kw;
    let lowered;
    let col = if is_pointwise(wt, g) {
        input
    } else {
        lowered = im2col(input, wt.kh, wt.kw, g);
        &lowered
    };
    // dW = dY (d x p) * col^T (p x k)
    let mut gw = vec![0.0; wt.weights.len()];
    gemm(wt.d, p, k, grad_out, p, 1, col, 1, p, &mut gw);
    let gb = grad_out.chunks_exact(p).map(|r| r.iter().sum()).collect();
    // dcol = W^T (k x d) * dY (d x p)
    let mut gcol = vec![0.0; k * p];
    gemm(k, wt.d, p, &wt.weights, 1, k, grad_out, p, 1, &mut gcol);
    let gi = if is_pointwise(wt, g) {
        gcol
    } else {
        let mut gi = vec![0.0; input.len()];
        col2im(&gcol, wt.kh, wt.kw, g, &mut gi);
        gi
    };
    SampleGrads {
        input: gi,
        weights: gw,
        bias: gb,
    }
}

/// Exact gradients of `sum(grad_out * conv2d_forward(input))`.
pub fn conv2d_backward(
    input: &Tensor,
    w: &ConvWeights,
    grad_out: &Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<GradBundle> {
    const OP: &str = "conv2d_backward";
    let s = input.shape();
    let os = conv2d_output_shape(s, w, stride, pad)?;
    let gs = grad_out.shape();
    ensure_dim(OP, "grad batch", os.n, gs.n)?;
    ensure_dim(OP, "grad channels", os.c, gs.c)?;
    ensure_dim(OP, "grad height", os.h, gs.h)?;
    ensure_dim(OP, "grad width", os.w, gs.w)?;
    let g = Geometry {
        c: s.c,
        h: s.h,
        w: s.w,
        oh: os.h,
        ow: os.w,
        sy: stride.0,
        sx: stride.1,
        py: pad.0,
        px: pad.1,
    };
    let parts = par::map_indexed(s.n, |n| backward_sample(input.sample(n), w, g, grad_out.sample(n)));

    let mut grad_input = Vec::with_capacity(s.numel());
    let mut grad_weights = vec![0.0; w.weights.len()];
    let mut grad_bias = vec![0.0; w.d];
    for p in parts {
        grad_input.extend_from_slice(&p.input);
        for (a, b) in grad_weights.iter_mut().zip(&p.weights) {
            *a += b;
        }
        for (a, b) in grad_bias.iter_mut().zip(&p.bias) {
            *a += b;
        }
    }
    Ok(GradBundle {
        grad_input: Tensor::from_vec(s, grad_input)?,
        grad_weights,
        grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive(input: &Tensor, w: &ConvWeights, stride: (usize, usize), pad: (usize, usize)) -> Tensor {
        let s = input.shape();
        let oh = (s.h + 2 * pad.0 - w.kh) / stride.0 + 1;
        let ow = (s.w + 2 * pad.1 - w.kw) / stride.1 + 1;
        let os = Shape::new(s.n, w.d, oh, ow);
        let mut out = Tensor::zeros(os);
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
                                    acc += w.weights[w.index(co, ci, ky, kx)]
                                        * input.get(n, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.data_mut()[os.offset(n, co, oy, ox)] = acc + w.bias[co];
                    }
                }
            }
        }
        out
    }

    fn random_weights(rng: &mut Rng, d: usize, c: usize, kh: usize, kw: usize) -> ConvWeights {
        let weights = (0..d * c * kh * kw).map(|_| rng.normal()).collect();
        let bias = (0..d).map(|_| rng.normal()).collect();
        ConvWeights::new(d, c, kh, kw, weights, bias).unwrap()
    }

    #[test]
    fn hand_computed_single_window() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = ConvWeights::new(1, 1, 2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0]).unwrap();
        let y = conv2d_forward(&x, &w, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = Rng::new(1);
        let x = Tensor::randn(Shape::new(2, 3, 5, 4), &mut rng);
        let w = ConvWeights::zeros(4, 3, 3, 3);
        let y = conv2d_forward(&x, &w, (1, 1), (1, 1)).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 4, 5, 4));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_kernel_is_identity_forward_and_backward() {
        let mut rng = Rng::new(2);
        let x = Tensor::randn(Shape::new(2, 1, 4, 3), &mut rng);
        let w = ConvWeights::new(1, 1, 1, 1, vec![1.0], vec![0.0]).unwrap();
        assert_eq!(conv2d_forward(&x, &w, (1, 1), (0, 0)).unwrap(), x);
        let g = Tensor::randn(x.shape(), &mut rng);
        let grads = conv2d_backward(&x, &w, &g, (1, 1), (0, 0)).unwrap();
        assert_eq!(grads.grad_input, g);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = Rng::new(3);
        let x = Tensor::randn(Shape::new(1, 2, 5, 5), &mut rng);
        let w = random_weights(&mut rng, 3, 2, 3, 3);
        let g = Tensor::zeros(Shape::new(1, 3, 5, 5));
        let grads = conv2d_backward(&x, &w, &g, (1, 1), (1, 1)).unwrap();
        assert!(grads.grad_input.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_weights.iter().all(|&v| v == 0.0));
        assert!(grads.grad_bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_loops_bitwise() {
        let mut rng = Rng::new(4);
        for &(kh, kw, sy, sx, py, px) in &[
            (3, 3, 1, 1, 1, 1),
            (1, 3, 1, 1, 0, 1),
            (3, 1, 2, 2, 1, 0),
            (5, 5, 2, 1, 2, 2),
            (2, 2, 1, 1, 0, 0),
            (3, 3, 3, 2, 0, 2),
        ] {
            let x = Tensor::randn(Shape::new(2, 3, 7, 6), &mut rng);
            let w = random_weights(&mut rng, 4, 3, kh, kw);
            let fast = conv2d_forward(&x, &w, (sy, sx), (py, px)).unwrap();
            let slow = naive(&x, &w, (sy, sx), (py, px));
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let w = ConvWeights::zeros(1, 3, 3, 3);
        let err = conv2d_forward(&x, &w, (1, 1), (1, 1)).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn oversized_kernel_rejected() {
        let x = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let w = ConvWeights::zeros(1, 1, 3, 3);
        assert!(conv2d_forward(&x, &w, (1, 1), (0, 0)).is_err());
    }

    #[test]
    fn backward_rejects_wrong_grad_shape() {
        let x = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let w = ConvWeights::zeros(2, 1, 3, 3);
        let g = Tensor::zeros(Shape::new(1, 2, 3, 3));
        assert!(conv2d_backward(&x, &w, &g, (1, 1), (1, 1)).is_err());
    }

    #[test]
    fn same_padding_is_half_kernel() {
        assert_eq!(same_padding(1, 3), (0, 1));
        assert_eq!(same_padding(3, 1), (1, 0));
        assert_eq!(same_padding(3, 3), (1, 1));
    }
}
