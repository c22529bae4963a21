//! Central finite-difference gradient checks (64-bit).

use alloc::vec::Vec;

use crate::error::Result;
use crate::linalg::Matrix;
use crate::losses::{compute, EmbeddingBatch, LossConfig};

/// Acceptance bound on [`max_relative_error`].
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise gap relative to the gradient's scale:
/// `max_i |a_i - n_i| / max(max_j |a_j|, max_j |n_j|)`. Two vanishing
/// gradients compare as equal.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let gap = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale < 1e-12 {
        gap
    } else {
        gap / scale
    }
}

/// Analytic loss gradient vs central differences over every batch entry.
pub fn check_loss_gradient(batch: &EmbeddingBatch<f64>, cfg: &LossConfig) -> Result<f64> {
    let analytic = compute(batch, cfg)?.gradient;
    let (rows, cols) = (batch.len(), batch.dim());
    let (na, ppa) = (batch.n_anchors(), batch.n_ppa());
    let mut failure = None;
    let numeric = numeric_gradient(batch.vectors().as_slice(), FD_STEP, |x| {
        let m = Matrix::from_vec(rows, cols, x.to_vec()).expect("same shape");
        match EmbeddingBatch::from_raw(m, na, ppa).and_then(|b| compute(&b, cfg)) {
            Ok(out) => out.value,
            Err(e) => {
                failure = Some(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(max_relative_error(analytic.as_slice(), &numeric))
}
