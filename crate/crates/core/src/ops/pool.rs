//! Max pooling. Ties resolve to the first maximum in row-major window scan
//! order, so the backward routing is deterministic.

use crate::error::{ensure_dim, Error, Result};
use crate::tensor::{Shape, Tensor};

/// Flat input offsets of each output element's winning position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Shape,
    pub output_shape: Shape,
    pub argmax: Vec<usize>,
}

pub fn maxpool_output_shape(input: Shape, k: usize, stride: usize) -> Result<Shape> {
    if k == 0 || stride == 0 {
        return Err(Error::invalid("maxpool", "window and stride must be at least 1"));
    }
    if input.h < k || input.w < k {
        return Err(Error::invalid(
            "maxpool",
            format!("{k}x{k} window does not fit {}x{} input", input.h, input.w),
        ));
    }
    Ok(Shape::new(
        input.n,
        input.c,
        (input.h - k) / stride + 1,
        (input.w - k) / stride + 1,
    ))
}

fn pool_windows(
    input: &Tensor,
    os: Shape,
    win_h: usize,
    win_w: usize,
    stride: usize,
) -> (Tensor, PoolIndices) {
    let s = input.shape();
    let data = input.data();
    let mut out = Vec::with_capacity(os.numel());
    let mut argmax = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = s.offset(n, c, oy * stride, ox * stride);
                    for dy in 0..win_h {
                        for dx in 0..win_w {
                            let idx = s.offset(n, c, oy * stride + dy, ox * stride + dx);
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
    }
    let indices = PoolIndices {
        input_shape: s,
        output_shape: os,
        argmax,
    };
    (Tensor::from_vec(os, out).expect("pool output length"), indices)
}

/// `k`x`k` max pooling with the given stride (floor mode, no padding).
pub fn maxpool_forward(input: &Tensor, k: usize, stride: usize) -> Result<(Tensor, PoolIndices)> {
    let os = maxpool_output_shape(input.shape(), k, stride)?;
    Ok(pool_windows(input, os, k, k, stride))
}

/// Per-channel spatial maximum, output `(n, c, 1, 1)`.
pub fn global_maxpool_forward(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let s = input.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::invalid("global_maxpool", "empty spatial extent"));
    }
    Ok(pool_windows(input, Shape::new(s.n, s.c, 1, 1), s.h, s.w, 1))
}

/// Routes each output gradient to its stored argmax position.
pub fn maxpool_backward(indices: &PoolIndices, grad_out: &Tensor) -> Result<Tensor> {
    let os = indices.output_shape;
    let gs = grad_out.shape();
    ensure_dim("maxpool_backward", "grad element count", os.numel(), gs.numel())?;
    ensure_dim("maxpool_backward", "grad channels", os.c, gs.c)?;
    let mut gi = Tensor::zeros(indices.input_shape);
    let gdata = gi.data_mut();
    for (&idx, &g) in indices.argmax.iter().zip(grad_out.data()) {
        gdata[idx] += g;
    }
    Ok(gi)
}

pub fn global_maxpool_backward(indices: &PoolIndices, grad_out: &Tensor) -> Result<Tensor> {
    maxpool_backward(indices, grad_out)
}
