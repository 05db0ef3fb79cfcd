//! Pinball loss.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// `(τ − 1[y < ŷ]) · (y − ŷ)`.
pub fn quantile_loss(y: f64, yhat: f64, tau: f64) -> f64 {
    let r = y - yhat;
    if r < 0.0 {
        (tau - 1.0) * r
    } else {
        tau * r
    }
}

/// Sum of [`quantile_loss`] over rows, horizons, and quantiles. `grid` is
/// `[B, H, Q]` and `labels` is `[B, H]`.
pub fn batch_loss(grid: &Tensor, labels: &Tensor, quantiles: &[f64]) -> Result<f64> {
    Ok(per_quantile_loss(grid, labels, quantiles)?.iter().sum())
}

/// The same sum split by quantile.
pub fn per_quantile_loss(grid: &Tensor, labels: &Tensor, quantiles: &[f64]) -> Result<Vec<f64>> {
    let q = quantiles.len();
    let gs = grid.shape();
    if gs.len() != 3 || gs[2] != q || labels.shape() != &gs[..2] {
        return Err(Error::shape(format!(
            "forecast grid {gs:?} does not match labels {:?} and {q} quantiles",
            labels.shape()
        )));
    }
    let mut out = vec![0.0; q];
    for (cell, &y) in labels.data().iter().enumerate() {
        for (qi, &tau) in quantiles.iter().enumerate() {
            out[qi] += quantile_loss(y, grid.data()[cell * q + qi], tau);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_cases() {
        assert_eq!(quantile_loss(4.0, 4.0, 0.5), 0.0);
        assert!((quantile_loss(10.0, 6.0, 0.9) - 3.6).abs() < 1e-12);
        assert!((quantile_loss(6.0, 10.0, 0.9) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn single_cell_batch() {
        let grid = Tensor::from_vec(&[1, 1, 1], vec![6.0]).unwrap();
        let labels = Tensor::from_vec(&[1, 1], vec![10.0]).unwrap();
        let l = batch_loss(&grid, &labels, &[0.9]).unwrap();
        assert_eq!(l, quantile_loss(10.0, 6.0, 0.9));
        assert!(batch_loss(&grid, &labels, &[0.5, 0.9]).is_err());
    }
}
