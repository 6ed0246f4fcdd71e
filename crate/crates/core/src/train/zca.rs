//! ZCA whitening: `x -> W (x - mean)` with `W = (C + eps I)^(-1/2)` the
//! symmetric inverse square root of the training covariance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::cifar::Dataset;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct Zca {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim` whitening matrix.
    pub whiten: Vec<f64>,
    pub eps: f64,
}

impl Zca {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fits on `data`, which must be the training set.
    pub fn fit(data: &Dataset, eps: f64) -> Result<Zca> {
        if data.is_empty() {
            return Err(Error::invalid("zca_fit", "empty training set"));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid("zca_fit", "eps must be positive"));
        }
        let (n, dim) = (data.len(), data.image_len());
        let x = DMatrix::from_fn(n, dim, |i, j| f64::from(data.image(i)[j]));
        let mean: DVector<f64> = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.tr_mul(&centered) / n as f64;
        let eig = SymmetricEigen::new(cov);
        let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + eps).sqrt());
        let v = &eig.eigenvectors;
        let w = v * DMatrix::from_diagonal(&inv_sqrt) * v.transpose();
        Ok(Zca {
            mean: mean.iter().copied().collect(),
            whiten: w.transpose().iter().copied().collect(),
            eps,
        })
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.whiten)
    }

    pub fn apply_one(&self, image: &[f64]) -> Vec<f64> {
        let centered = DVector::from_iterator(self.dim(), image.iter().zip(&self.mean).map(|(x, m)| x - m));
        (self.matrix() * centered).iter().copied().collect()
    }

    /// Whitened copy of `data`.
    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.image_len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "zca_apply",
                dim: "image size",
                expected: self.dim(),
                found: data.image_len(),
            });
        }
        let w = self.matrix();
        let x = DMatrix::from_fn(self.dim(), data.len(), |j, i| f64::from(data.image(i)[j]) - self.mean[j]);
        let y = w * x;
        let images = y.iter().map(|&v| v as f32).collect();
        Dataset::new(data.dims, images, data.labels.clone())
    }

    /// Undoes [`Self::apply_one`].
    pub fn invert_one(&self, white: &[f64]) -> Result<Vec<f64>> {
        let lu = self.matrix().lu();
        let y = DVector::from_column_slice(white);
        let x = lu
            .solve(&y)
            .ok_or_else(|| Error::invalid("zca_inverse", "singular whitening matrix"))?;
        Ok(x.iter().zip(&self.mean).map(|(v, m)| v + m).collect())
    }
}
