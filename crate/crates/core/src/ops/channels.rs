use crate::error::{ensure_dim, Error, Result};
use crate::tensor::{Shape, Tensor};

/// Concatenates along the channel axis, preserving part order.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no parts"))?
        .shape();
    for p in &parts[1..] {
        let s = p.shape();
        ensure_dim("concat_channels", "batch", first.n, s.n)?;
        ensure_dim("concat_channels", "height", first.h, s.h)?;
        ensure_dim("concat_channels", "width", first.w, s.w)?;
    }
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let shape = Shape::new(first.n, c, first.h, first.w);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..first.n {
        for p in parts {
            data.extend_from_slice(p.sample(n));
        }
    }
    Tensor::from_vec(shape, data)
}

/// Exact inverse of [`concat_channels`] for the given channel sizes.
pub fn split_channels(t: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let s = t.shape();
    ensure_dim("split_channels", "channel total", s.c, sizes.iter().sum())?;
    let plane = s.plane();
    let mut parts: Vec<Vec<f64>> = sizes
        .iter()
        .map(|&c| Vec::with_capacity(s.n * c * plane))
        .collect();
    for n in 0..s.n {
        let sample = t.sample(n);
        let mut start = 0;
        for (part, &c) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&sample[start * plane..(start + c) * plane]);
            start += c;
        }
    }
    parts
        .into_iter()
        .zip(sizes)
        .map(|(data, &c)| Tensor::from_vec(Shape::new(s.n, c, s.h, s.w), data))
        .collect()
}
