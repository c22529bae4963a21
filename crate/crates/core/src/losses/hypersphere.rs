//! Alignment/uniformity objectives on the hypersphere: A&U and its
//! kernel reformulation KCL. Both need one positive per anchor.

use alloc::vec::Vec;

use super::{pairwise_sq_dist, EmbeddingBatch, LossConfig, LossOutput};
use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::scalar::Scalar;

fn check<F: Scalar>(batch: &EmbeddingBatch<F>, name: &str) -> Result<()> {
    if batch.n_ppa() != 1 {
        return Err(Error::Batch(alloc::format!(
            "{name} needs exactly one positive per anchor"
        )));
    }
    if batch.n_anchors() < 2 {
        return Err(Error::Batch(alloc::format!(
            "{name} uniformity needs at least two groups"
        )));
    }
    Ok(())
}

/// Unordered row pairs from different groups.
fn negative_pairs<F: Scalar>(batch: &EmbeddingBatch<F>) -> Vec<(usize, usize)> {
    let n = batch.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if batch.group_of(i) != batch.group_of(j) {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Adds `scale * d(|x_i - x_j|^2)` to the gradient rows of `i` and `j`.
fn add_sq_dist_grad<F: Scalar>(grad: &mut Matrix<F>, batch: &EmbeddingBatch<F>, i: usize, j: usize, scale: F) {
    let two = F::lit(2.0);
    let diff: Vec<F> = batch.row(i).iter().zip(batch.row(j)).map(|(&a, &b)| a - b).collect();
    axpy(grad.row_mut(i), two * scale, &diff);
    axpy(grad.row_mut(j), -two * scale, &diff);
}

/// `mean_pairs |a - p|^alpha + lambda * log(mean_{i,j in different groups}
/// exp(-t |x_i - x_j|^2))`.
pub fn align_uniform_loss<F: Scalar>(batch: &EmbeddingBatch<F>, cfg: &LossConfig) -> Result<LossOutput<F>> {
    check(batch, "A&U")?;
    let alpha = F::lit(cfg.au_align_alpha);
    let t = F::lit(cfg.au_uniform_t);
    let lambda = F::lit(cfg.au_lambda);
    let dist = pairwise_sq_dist(batch);
    let mut grad = Matrix::zeros(batch.len(), batch.dim());

    let inv_a = F::one() / F::lit(batch.n_anchors() as f64);
    let mut align = F::zero();
    for g in 0..batch.n_anchors() {
        let (a, p) = (batch.anchor_row(g), batch.anchor_row(g) + 1);
        let d2 = dist.get(a, p);
        // |d|^alpha = (d^2)^(alpha/2)
        let half = alpha / F::lit(2.0);
        align += d2.powf(half) * inv_a;
        if d2 > F::zero() {
            let dterm = half * d2.powf(half - F::one());
            add_sq_dist_grad(&mut grad, batch, a, p, dterm * inv_a);
        }
    }

    let pairs = negative_pairs(batch);
    let inv_s = F::one() / F::lit(pairs.len() as f64);
    let kernel: Vec<F> = pairs.iter().map(|&(i, j)| (-t * dist.get(i, j)).exp()).collect();
    let mean_k: F = kernel.iter().copied().sum::<F>() * inv_s;
    let uniform = mean_k.ln();
    for (&(i, j), &k) in pairs.iter().zip(&kernel) {
        // d log(M) = (1/M) * inv_s * k * (-t) d(|x_i - x_j|^2)
        add_sq_dist_grad(&mut grad, batch, i, j, lambda * (-t) * k * inv_s / mean_k);
    }

    Ok(LossOutput {
        value: align + lambda * uniform,
        gradient: grad,
    })
}

/// `-mean_pairs exp(-t |a - p|^2) + gamma * mean_{different groups}
/// exp(-t |x_i - x_j|^2)` with a Gaussian kernel of width `kcl_t`.
pub fn kcl_loss<F: Scalar>(batch: &EmbeddingBatch<F>, cfg: &LossConfig) -> Result<LossOutput<F>> {
    check(batch, "KCL")?;
    let t = F::lit(cfg.kcl_t);
    let gamma = F::lit(cfg.kcl_gamma);
    let dist = pairwise_sq_dist(batch);
    let mut grad = Matrix::zeros(batch.len(), batch.dim());

    let inv_a = F::one() / F::lit(batch.n_anchors() as f64);
    let mut align = F::zero();
    for g in 0..batch.n_anchors() {
        let (a, p) = (batch.anchor_row(g), batch.anchor_row(g) + 1);
        let k = (-t * dist.get(a, p)).exp();
        align -= k * inv_a;
        add_sq_dist_grad(&mut grad, batch, a, p, t * k * inv_a);
    }

    let pairs = negative_pairs(batch);
    let inv_s = F::one() / F::lit(pairs.len() as f64);
    let mut uniform = F::zero();
    for &(i, j) in &pairs {
        let k = (-t * dist.get(i, j)).exp();
        uniform += k * inv_s;
        add_sq_dist_grad(&mut grad, batch, i, j, gamma * (-t) * k * inv_s);
    }

    Ok(LossOutput {
        value: align + gamma * uniform,
        gradient: grad,
    })
}
