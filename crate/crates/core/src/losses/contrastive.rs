//! NT-Xent in its multi-positive (MultiPosCon) form, and DCL.

use alloc::vec::Vec;

use super::{grad_from_gram_coefs, gram, log_sum_exp, log_sum_exp_split, EmbeddingBatch, LossConfig, LossOutput};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::scalar::Scalar;

/// MultiPosCon: every row `i` is an anchor whose target distribution is
/// uniform over the other rows of its group; logits are `<x_i, x_k> / tau`
/// over all `k != i`. Value is the mean cross-entropy over rows. With one
/// positive per anchor this is the symmetric NT-Xent objective.
pub fn multiposcon_loss<F: Scalar>(batch: &EmbeddingBatch<F>, cfg: &LossConfig) -> LossOutput<F> {
    contrastive(batch, F::lit(cfg.tau), false)
}

/// NT-Xent generalized to several positives per anchor.
pub fn ntxent_loss<F: Scalar>(batch: &EmbeddingBatch<F>, cfg: &LossConfig) -> LossOutput<F> {
    multiposcon_loss(batch, cfg)
}

/// Decoupled contrastive loss: NT-Xent with the positive removed from the
/// denominator. Only defined for one positive per anchor.
pub fn dcl_loss<F: Scalar>(batch: &EmbeddingBatch<F>, cfg: &LossConfig) -> Result<LossOutput<F>> {
    if batch.n_ppa() != 1 {
        return Err(Error::Batch("DCL needs exactly one positive per anchor".into()));
    }
    Ok(contrastive(batch, F::lit(cfg.tau), true))
}

/// One DCL term: `-s_pos / tau + log sum_k exp(s_neg_k / tau)`.
pub fn dcl_term(s_pos: f64, s_neg: &[f64], tau: f64) -> f64 {
    -s_pos / tau + log_sum_exp(s_neg.iter().map(|&s| s / tau))
}

fn contrastive<F: Scalar>(batch: &EmbeddingBatch<F>, tau: F, decoupled: bool) -> LossOutput<F> {
    let n = batch.len();
    let sims = gram(batch);
    let inv_n = F::one() / F::lit(n as f64);
    let inv_pos = F::one() / F::lit(batch.n_ppa() as f64);
    let mut value = F::zero();
    let mut coef = Matrix::zeros(n, n);
    let mut logits: Vec<F> = Vec::with_capacity(n);
    for i in 0..n {
        let g = batch.group_of(i);
        let in_denominator = |k: usize| k != i && !(decoupled && batch.group_of(k) == g);
        logits.clear();
        logits.extend((0..n).map(|k| sims.get(i, k) / tau));
        let (m, tail) = log_sum_exp_split((0..n).filter(|&k| in_denominator(k)).map(|k| logits[k]));
        let lse = m + tail;
        let mut row_loss = tail;
        for k in (0..n).filter(|&k| k != i && batch.group_of(k) == g) {
            row_loss += inv_pos * (m - logits[k]);
            // d/ds_ik of the target term
            coef.set(i, k, coef.get(i, k) - inv_pos * inv_n / tau);
        }
        for k in (0..n).filter(|&k| in_denominator(k)) {
            let q = (logits[k] - lse).exp();
            coef.set(i, k, coef.get(i, k) + q * inv_n / tau);
        }
        value += row_loss * inv_n;
    }
    // Each coefficient multiplies <x_i, x_k>, which the gram-gradient helper
    // differentiates into both rows.
    LossOutput {
        value,
        gradient: grad_from_gram_coefs(batch, &coef),
    }
}

/// Classic pairwise NT-Xent (one positive per anchor), evaluated literally:
/// `l(i, j) = -log(exp(s_ij/tau) / sum_{k != i} exp(s_ik/tau))` averaged over
/// both directions of every anchor-positive pair. Value only; it backs the
/// NT-Xent / MultiPosCon equivalence check.
pub fn ntxent_pairwise_value(batch: &EmbeddingBatch<f64>, tau: f64) -> Result<f64> {
    if batch.n_ppa() != 1 {
        return Err(Error::Batch("pairwise NT-Xent needs one positive per anchor".into()));
    }
    let n = batch.len();
    let term = |i: usize, j: usize| -> f64 {
        let num = libm::exp(dot(batch.row(i), batch.row(j)) / tau);
        let den: f64 = (0..n)
            .filter(|&k| k != i)
            .map(|k| libm::exp(dot(batch.row(i), batch.row(k)) / tau))
            .sum();
        -libm::log(num / den)
    };
    let mut total = 0.0;
    for g in 0..batch.n_anchors() {
        let a = batch.anchor_row(g);
        total += term(a, a + 1) + term(a + 1, a);
    }
    Ok(total / n as f64)
}
