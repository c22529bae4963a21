//! Metric-learning losses over a batch of unit-norm embeddings laid out as
//! anchor groups: row `g * (1 + n_ppa)` is anchor `g`, followed by its
//! `n_ppa` positives. Every loss returns its value and the analytic gradient
//! with respect to the raw rows (no projection onto the sphere).

pub mod contrastive;
pub mod hypersphere;
pub mod triplet;

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, sq_dist, Matrix};
use crate::scalar::Scalar;

pub use contrastive::{dcl_loss, dcl_term, multiposcon_loss, ntxent_loss, ntxent_pairwise_value};
pub use hypersphere::{align_uniform_loss, kcl_loss};
pub use triplet::{mine_triplets, triplet_loss, Triplet};

/// Tolerance on row norms accepted by [`EmbeddingBatch::new`].
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch<F> {
    vectors: Matrix<F>,
    n_anchors: usize,
    n_ppa: usize,
}

impl<F: Scalar> EmbeddingBatch<F> {
    /// Checks the group layout and that every row is unit-norm.
    pub fn new(vectors: Matrix<F>, n_anchors: usize, n_ppa: usize) -> Result<Self> {
        let b = Self::from_raw(vectors, n_anchors, n_ppa)?;
        for (i, r) in b.vectors.iter_rows().enumerate() {
            let n = norm(r).as_f64();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Batch(format!("row {i} has norm {n}")));
            }
        }
        Ok(b)
    }

    /// Checks only the layout; rows may have any norm (gradient checks
    /// perturb them off the sphere).
    pub fn from_raw(vectors: Matrix<F>, n_anchors: usize, n_ppa: usize) -> Result<Self> {
        if n_anchors == 0 || n_ppa == 0 {
            return Err(Error::Batch(
                "need at least one anchor and one positive per anchor".into(),
            ));
        }
        if vectors.rows() != n_anchors * (1 + n_ppa) {
            return Err(Error::Batch(format!(
                "{} rows for {n_anchors} anchors x (1 + {n_ppa}) positives",
                vectors.rows()
            )));
        }
        Ok(Self {
            vectors,
            n_anchors,
            n_ppa,
        })
    }

    pub fn vectors(&self) -> &Matrix<F> {
        &self.vectors
    }

    pub fn into_vectors(self) -> Matrix<F> {
        self.vectors
    }

    pub fn n_anchors(&self) -> usize {
        self.n_anchors
    }

    pub fn n_ppa(&self) -> usize {
        self.n_ppa
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn group_size(&self) -> usize {
        1 + self.n_ppa
    }

    #[inline]
    pub fn group_of(&self, row: usize) -> usize {
        row / self.group_size()
    }

    #[inline]
    pub fn anchor_row(&self, group: usize) -> usize {
        group * self.group_size()
    }

    pub fn positive_rows(&self, group: usize) -> core::ops::Range<usize> {
        let a = self.anchor_row(group);
        a + 1..a + self.group_size()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[F] {
        self.vectors.row(i)
    }

    /// Reorders anchor groups: new group `k` is old group `perm[k]`.
    pub fn permute_groups(&self, perm: &[usize]) -> Self {
        let g = self.group_size();
        let rows: Vec<usize> = perm.iter().flat_map(|&p| p * g..(p + 1) * g).collect();
        Self {
            vectors: self.vectors.select_rows(&rows),
            n_anchors: self.n_anchors,
            n_ppa: self.n_ppa,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Triplet,
    Ntxent,
    Dcl,
    AlignUniform,
    Kcl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// NT-Xent / DCL temperature.
    pub tau: f64,
    /// Triplet margin on squared distances.
    pub margin_alpha: f64,
    pub au_align_alpha: f64,
    pub au_uniform_t: f64,
    pub au_lambda: f64,
    /// Gaussian kernel width of KCL.
    pub kcl_t: f64,
    /// Weight of the KCL uniformity (negative-pair) term.
    pub kcl_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Triplet,
            tau: 0.05,
            margin_alpha: 0.5,
            au_align_alpha: 2.0,
            au_uniform_t: 2.0,
            au_lambda: 1.0,
            kcl_t: 2.0,
            kcl_gamma: 16.0,
        }
    }
}

impl LossConfig {
    pub fn of(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config("tau must be positive"));
        }
        if !(self.margin_alpha > 0.0) {
            return Err(Error::config("margin_alpha must be positive"));
        }
        if !(self.au_align_alpha > 0.0 && self.au_uniform_t > 0.0 && self.kcl_t > 0.0) {
            return Err(Error::config("A&U / KCL exponents and kernel widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<F> {
    pub value: F,
    /// `d value / d vectors`, same shape as the batch.
    pub gradient: Matrix<F>,
}

/// Evaluates the loss selected by `cfg.kind`.
pub fn compute<F: Scalar>(batch: &EmbeddingBatch<F>, cfg: &LossConfig) -> Result<LossOutput<F>> {
    cfg.validate()?;
    match cfg.kind {
        LossKind::Triplet => Ok(triplet_loss(batch, cfg)),
        LossKind::Ntxent => Ok(ntxent_loss(batch, cfg)),
        LossKind::Dcl => dcl_loss(batch, cfg),
        LossKind::AlignUniform => align_uniform_loss(batch, cfg),
        LossKind::Kcl => kcl_loss(batch, cfg),
    }
}

/// Squared Euclidean distances; exactly 0 on the diagonal.
pub fn pairwise_sq_dist<F: Scalar>(batch: &EmbeddingBatch<F>) -> Matrix<F> {
    let n = batch.len();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(batch.row(i), batch.row(j));
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    d
}

/// Cosine similarities; exactly 1 on the diagonal.
pub fn pairwise_cos_sim<F: Scalar>(batch: &EmbeddingBatch<F>) -> Matrix<F> {
    let n = batch.len();
    let norms: Vec<F> = (0..n).map(|i| norm(batch.row(i))).collect();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        s.set(i, i, F::one());
        for j in i + 1..n {
            let v = dot(batch.row(i), batch.row(j)) / (norms[i] * norms[j]);
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    s
}

/// Inner products (cosine similarity for unit rows) without normalization,
/// the form the contrastive losses differentiate through.
pub(crate) fn gram<F: Scalar>(batch: &EmbeddingBatch<F>) -> Matrix<F> {
    let n = batch.len();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(batch.row(i), batch.row(j));
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    s
}

/// `gradient_i = sum_j (coef_ij + coef_ji) x_j` for a loss of the form
/// `sum_ij coef_ij <x_i, x_j>` (coefficients held fixed).
pub(crate) fn grad_from_gram_coefs<F: Scalar>(batch: &EmbeddingBatch<F>, coef: &Matrix<F>) -> Matrix<F> {
    let n = batch.len();
    let mut g = Matrix::zeros(n, batch.dim());
    for i in 0..n {
        for j in 0..n {
            let c = coef.get(i, j) + coef.get(j, i);
            if c != F::zero() {
                crate::linalg::axpy(g.row_mut(i), c, batch.row(j));
            }
        }
    }
    g
}

pub(crate) fn log_sum_exp<F: Scalar>(xs: impl Iterator<Item = F> + Clone) -> F {
    let (m, tail) = log_sum_exp_split(xs);
    m + tail
}

/// `(m, t)` with `log sum exp(x) = m + t`, `m` the maximum. `t` is formed with
/// `ln_1p` so that `m - x_k + t` keeps full precision when one term dominates.
pub(crate) fn log_sum_exp_split<F: Scalar>(xs: impl Iterator<Item = F> + Clone) -> (F, F) {
    let m = xs.clone().fold(F::neg_infinity(), F::max);
    if m == F::neg_infinity() {
        return (m, F::zero());
    }
    let mut seen_max = false;
    let rest: F = xs
        .filter(|&x| {
            if x == m && !seen_max {
                seen_max = true;
                false
            } else {
                true
            }
        })
        .map(|x| (x - m).exp())
        .sum();
    (m, rest.ln_1p())
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use rand::Rng;

    pub fn random_batch(seed: u64, n_anchors: usize, n_ppa: usize, dim: usize) -> EmbeddingBatch<f64> {
        let mut rng = crate::seeded_rng(seed);
        let n = n_anchors * (1 + n_ppa);
        let mut m = Matrix::zeros(n, dim);
        for i in 0..n {
            let r = m.row_mut(i);
            for v in r.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            crate::linalg::normalize(r);
        }
        EmbeddingBatch::new(m, n_anchors, n_ppa).unwrap()
    }

    pub fn batch_from(rows: &[&[f64]], n_anchors: usize, n_ppa: usize) -> EmbeddingBatch<f64> {
        EmbeddingBatch::new(Matrix::from_rows(rows).unwrap(), n_anchors, n_ppa).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;
    use crate::gradcheck::{check_loss_gradient, GRADCHECK_TOL};

    #[test]
    fn layout_is_validated() {
        let m = Matrix::<f64>::zeros(5, 3);
        assert!(EmbeddingBatch::from_raw(m.clone(), 2, 1).is_err());
        assert!(EmbeddingBatch::from_raw(m, 1, 0).is_err());
        let unnormed = Matrix::from_rows(&[[2.0f64, 0.0], [1.0, 0.0]]).unwrap();
        assert!(EmbeddingBatch::new(unnormed, 1, 1).is_err());
    }

    #[test]
    fn batch_geometry() {
        let b = random_batch(0, 4, 2, 3);
        assert_eq!(b.len(), 12);
        assert_eq!(b.anchor_row(2), 6);
        assert_eq!(b.positive_rows(2), 7..9);
        assert_eq!(b.group_of(8), 2);
    }

    #[test]
    fn pairwise_special_geometry() {
        let e1: &[f64] = &[1.0, 0.0];
        let e2: &[f64] = &[0.0, 1.0];
        let m1: &[f64] = &[-1.0, 0.0];
        let b = batch_from(&[e1, e1, e2, m1], 2, 1);
        let d = pairwise_sq_dist(&b);
        let s = pairwise_cos_sim(&b);
        assert_eq!((d.get(0, 1), s.get(0, 1)), (0.0, 1.0));
        assert_eq!((d.get(0, 2), s.get(0, 2)), (2.0, 0.0));
        assert_eq!((d.get(0, 3), s.get(0, 3)), (4.0, -1.0));
    }

    proptest::proptest! {
        #[test]
        fn pairwise_relations(seed in 0u64..500) {
            let b = random_batch(seed, 3, 2, 5);
            let d = pairwise_sq_dist(&b);
            let s = pairwise_cos_sim(&b);
            for i in 0..b.len() {
                proptest::prop_assert_eq!(d.get(i, i), 0.0);
                proptest::prop_assert_eq!(s.get(i, i), 1.0);
                for j in 0..b.len() {
                    proptest::prop_assert_eq!(d.get(i, j), d.get(j, i));
                    proptest::prop_assert!((d.get(i, j) - (2.0 - 2.0 * s.get(i, j))).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn losses_are_invariant_to_group_permutation(seed in 0u64..200, kind_idx in 0usize..5) {
            use rand::seq::SliceRandom;
            let kind = [LossKind::Triplet, LossKind::Ntxent, LossKind::Dcl, LossKind::AlignUniform, LossKind::Kcl][kind_idx];
            let n_ppa = if matches!(kind, LossKind::Triplet | LossKind::Ntxent) { 2 } else { 1 };
            let b = random_batch(seed, 5, n_ppa, 4);
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut crate::seeded_rng(seed + 1));
            let pb = b.permute_groups(&perm);
            let cfg = LossConfig::of(kind);
            let base = compute(&b, &cfg).unwrap();
            let permuted = compute(&pb, &cfg).unwrap();
            proptest::prop_assert!((base.value - permuted.value).abs() < 1e-10);
            let g = b.group_size();
            for (k, &p) in perm.iter().enumerate() {
                for r in 0..g {
                    for c in 0..b.dim() {
                        let x = base.gradient.get(p * g + r, c);
                        let y = permuted.gradient.get(k * g + r, c);
                        proptest::prop_assert!((x - y).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn all_losses_pass_gradient_check() {
        for kind in [
            LossKind::Triplet,
            LossKind::Ntxent,
            LossKind::Dcl,
            LossKind::AlignUniform,
            LossKind::Kcl,
        ] {
            for n_anchors in [2, 4, 8] {
                for dim in [3, 8] {
                    let n_ppa = if matches!(kind, LossKind::Triplet | LossKind::Ntxent) {
                        2
                    } else {
                        1
                    };
                    let b = random_batch(n_anchors as u64 * 31 + dim as u64, n_anchors, n_ppa, dim);
                    let err = check_loss_gradient(&b, &LossConfig::of(kind)).unwrap();
                    assert!(err < GRADCHECK_TOL, "{kind:?} N_A={n_anchors} d={dim}: {err}");
                }
            }
        }
    }
}
