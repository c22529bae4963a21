//! Self-supervised triplet loss with hard-positive and semi-hard-negative
//! mining on squared Euclidean distances.

use alloc::vec::Vec;

use super::{pairwise_sq_dist, EmbeddingBatch, LossConfig, LossOutput};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    /// False when no semi-hard negative existed and the hardest one was used.
    pub semi_hard: bool,
}

/// Per anchor: the farthest of its positives, then the closest negative with
/// `d(a,p) < d(a,n) < d(a,p) + margin`, or the closest negative overall when
/// that band is empty. Ties go to the lower row index.
pub fn mine_triplets<F: Scalar>(batch: &EmbeddingBatch<F>, margin: F, dist: &Matrix<F>) -> Vec<Triplet> {
    (0..batch.n_anchors())
        .map(|g| {
            let a = batch.anchor_row(g);
            let mut positive = a + 1;
            for p in batch.positive_rows(g) {
                if dist.get(a, p) > dist.get(a, positive) {
                    positive = p;
                }
            }
            let d_ap = dist.get(a, positive);
            let mut semi: Option<usize> = None;
            let mut hardest: Option<usize> = None;
            for n in (0..batch.len()).filter(|&n| batch.group_of(n) != g) {
                let d_an = dist.get(a, n);
                if hardest.is_none_or(|h| d_an < dist.get(a, h)) {
                    hardest = Some(n);
                }
                if d_an > d_ap && d_an < d_ap + margin && semi.is_none_or(|s| d_an < dist.get(a, s)) {
                    semi = Some(n);
                }
            }
            // A single-group batch has no negatives; the anchor then pairs
            // with itself and contributes a constant margin.
            let negative = semi.or(hardest).unwrap_or(a);
            Triplet {
                anchor: a,
                positive,
                negative,
                semi_hard: semi.is_some(),
            }
        })
        .collect()
}

/// `mean_a max(0, d(a,p*) - d(a,n*) + margin)`; the mining choice is held
/// fixed when differentiating.
pub fn triplet_loss<F: Scalar>(batch: &EmbeddingBatch<F>, cfg: &LossConfig) -> LossOutput<F> {
    let margin = F::lit(cfg.margin_alpha);
    let dist = pairwise_sq_dist(batch);
    let triplets = mine_triplets(batch, margin, &dist);
    let inv_n = F::one() / F::lit(batch.n_anchors() as f64);
    let two = F::lit(2.0);
    let mut value = F::zero();
    let mut grad = Matrix::zeros(batch.len(), batch.dim());
    for t in &triplets {
        let hinge = dist.get(t.anchor, t.positive) - dist.get(t.anchor, t.negative) + margin;
        if hinge <= F::zero() {
            continue;
        }
        value += hinge * inv_n;
        let s = two * inv_n;
        // d/dx of |a-p|^2 - |a-n|^2
        for c in 0..batch.dim() {
            let (a, p, n) = (
                batch.row(t.anchor)[c],
                batch.row(t.positive)[c],
                batch.row(t.negative)[c],
            );
            grad.row_mut(t.anchor)[c] += s * (n - p);
            grad.row_mut(t.positive)[c] += s * (p - a);
            grad.row_mut(t.negative)[c] += s * (a - n);
        }
    }
    LossOutput { value, gradient: grad }
}

#[cfg(test)]
mod tests {
    use super::super::test_util::*;
    use super::super::LossKind;
    use super::*;

    fn cfg() -> LossConfig {
        LossConfig::of(LossKind::Triplet)
    }

    #[test]
    fn equal_distances_give_the_margin() {
        // Group 0: anchor e1, positive at distance^2 2 (e2).
        // Group 1: e3 twice, at distance^2 2 from the anchor.
        let e1: &[f64] = &[1.0, 0.0, 0.0];
        let e2: &[f64] = &[0.0, 1.0, 0.0];
        let e3: &[f64] = &[0.0, 0.0, 1.0];
        let b = batch_from(&[e1, e2, e3, e3], 2, 1);
        let dist = pairwise_sq_dist(&b);
        let t = mine_triplets(&b, 0.5, &dist);
        assert_eq!(dist.get(0, t[0].positive), dist.get(0, t[0].negative));
        assert!(!t[0].semi_hard);
        let out = triplet_loss(&b, &cfg());
        // Anchor 0 contributes exactly the margin; anchor 1 (positive at 0,
        // negatives at 2) clears it and contributes 0.
        assert!((out.value - 0.5 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn inactive_hinge_has_zero_loss_and_gradient() {
        // Positives coincide with anchors, groups antipodal: d(a,n) = 4 > 0 + 0.5.
        let u: &[f64] = &[1.0, 0.0];
        let v: &[f64] = &[-1.0, 0.0];
        let b = batch_from(&[u, u, v, v], 2, 1);
        let out = triplet_loss(&b, &cfg());
        assert_eq!(out.value, 0.0);
        assert!(out.gradient.as_slice().iter().all(|&g| g == 0.0));
    }

    /// Exhaustive re-derivation of the mining rules on 3-group batches.
    #[test]
    fn mining_matches_brute_force() {
        for seed in 0..300 {
            let n_ppa = 1 + (seed as usize % 3);
            let b = random_batch(seed, 3, n_ppa, 3);
            let dist = pairwise_sq_dist(&b);
            let margin = 0.5;
            let mined = mine_triplets(&b, margin, &dist);
            for g in 0..3 {
                let a = g * (1 + n_ppa);
                let pos: Vec<usize> = (a + 1..a + 1 + n_ppa).collect();
                let neg: Vec<usize> = (0..b.len()).filter(|r| r / (1 + n_ppa) != g).collect();
                // Hard positive: no positive strictly farther.
                let p = mined[g].positive;
                assert!(pos.contains(&p));
                assert!(pos.iter().all(|&q| dist.get(a, q) <= dist.get(a, p)));
                let dp = dist.get(a, p);
                let band: Vec<usize> = neg
                    .iter()
                    .copied()
                    .filter(|&n| dist.get(a, n) > dp && dist.get(a, n) < dp + margin)
                    .collect();
                let pool = if band.is_empty() { &neg } else { &band };
                let best = pool
                    .iter()
                    .copied()
                    .min_by(|&x, &y| dist.get(a, x).partial_cmp(&dist.get(a, y)).unwrap())
                    .unwrap();
                assert_eq!(mined[g].negative, best, "seed {seed} group {g}");
                assert_eq!(mined[g].semi_hard, !band.is_empty());
            }
        }
    }

    #[test]
    fn value_matches_direct_recomputation() {
        let b = random_batch(77, 8, 1, 4);
        let out = triplet_loss(&b, &cfg());
        let dist = pairwise_sq_dist(&b);
        let mined = mine_triplets(&b, 0.5, &dist);
        let expected: f64 = mined
            .iter()
            .map(|t| {
                let sq =
                    |i: usize, j: usize| -> f64 { b.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum() };
                (sq(t.anchor, t.positive) - sq(t.anchor, t.negative) + 0.5).max(0.0)
            })
            .sum::<f64>()
            / 8.0;
        assert!((out.value - expected).abs() < 1e-12);
    }
}
