//! Small fully-connected encoder over flattened log-mel segments: affine
//! layers with ELU between them and a final L2 normalization. Forward and
//! backward passes are written out by hand; Adam and the learning-rate
//! schedule live here too, along with SpecAugment-style masking.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SILENCE_VALUE;
use crate::linalg::{axpy, dot, Matrix};
use crate::scalar::Scalar;

/// Norm below which an output row is mapped to `e1` instead of being scaled.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl EncoderArch {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
        }
    }

    /// `(in, out)` of every affine layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config("encoder layer sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer<F> {
    /// `[out x in]`
    pub weight: Matrix<F>,
    pub bias: Vec<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams<F> {
    pub arch: EncoderArch,
    pub layers: Vec<Layer<F>>,
}

#[inline]
fn elu<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn elu_grad<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else {
        x.exp()
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    /// Input of each layer.
    inputs: Vec<Matrix<F>>,
    /// Pre-activation of each layer.
    pre: Vec<Matrix<F>>,
    /// Norm of each unnormalized output row.
    norms: Vec<F>,
    pub output: Matrix<F>,
}

impl<F: Scalar> EncoderParams<F> {
    pub fn zeros(arch: EncoderArch) -> Self {
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Layer {
                weight: Matrix::zeros(o, i),
                bias: vec![F::zero(); o],
            })
            .collect();
        Self { arch, layers }
    }

    /// Uniform fan-in initialization `U(-sqrt(3/fan_in), sqrt(3/fan_in))`, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: EncoderArch, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        for layer in &mut p.layers {
            let bound = libm::sqrt(3.0 / layer.weight.cols() as f64);
            for w in layer.weight.as_mut_slice() {
                *w = F::lit(rng.gen_range(-bound..bound));
            }
        }
        p
    }

    pub fn n_params(&self) -> usize {
        self.arch.n_params()
    }

    /// Parameters in layer order, each layer as weight (row-major) then bias.
    pub fn to_flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn from_flat(arch: EncoderArch, flat: &[F]) -> Result<Self> {
        let mut p = Self::zeros(arch);
        p.set_flat(flat)?;
        Ok(p)
    }

    pub fn set_flat(&mut self, flat: &[F]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::shape(alloc::format!(
                "{} parameters for an encoder with {}",
                flat.len(),
                self.n_params()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&flat[at..at + w.len()]);
            at += w.len();
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> EncoderParams<G> {
        EncoderParams {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.cast(),
                    bias: l.bias.iter().map(|&b| G::lit(b.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Unit-norm embeddings, one row per input row.
    pub fn forward(&self, inputs: &Matrix<F>) -> Result<Matrix<F>> {
        Ok(self.forward_cached(inputs)?.output)
    }

    pub fn forward_cached(&self, inputs: &Matrix<F>) -> Result<ForwardCache<F>> {
        if inputs.cols() != self.arch.input_dim {
            return Err(Error::shape(alloc::format!(
                "encoder expects {} inputs, got {}",
                self.arch.input_dim,
                inputs.cols()
            )));
        }
        let n_layers = self.layers.len();
        let mut cache_inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut x = inputs.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let out_dim = layer.weight.rows();
            let mut z = Matrix::zeros(x.rows(), out_dim);
            for r in 0..x.rows() {
                let xr = x.row(r);
                let zr = z.row_mut(r);
                for (j, zj) in zr.iter_mut().enumerate() {
                    *zj = dot(layer.weight.row(j), xr) + layer.bias[j];
                }
            }
            let next = if li + 1 < n_layers {
                let mut a = z.clone();
                for v in a.as_mut_slice() {
                    *v = elu(*v);
                }
                a
            } else {
                z.clone()
            };
            cache_inputs.push(x);
            pre.push(z);
            x = next;
        }
        let mut norms = Vec::with_capacity(x.rows());
        let eps = F::lit(NORM_EPS);
        for r in 0..x.rows() {
            let row = x.row_mut(r);
            let n = dot(row, row).sqrt();
            norms.push(n);
            if n < eps {
                row.fill(F::zero());
                row[0] = F::one();
            } else {
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
        }
        Ok(ForwardCache {
            inputs: cache_inputs,
            pre,
            norms,
            output: x,
        })
    }

    /// Gradient of a scalar loss with respect to every parameter, given
    /// `grad_out = d loss / d output` (same shape as the embeddings).
    pub fn backward(&self, cache: &ForwardCache<F>, grad_out: &Matrix<F>) -> Result<EncoderParams<F>> {
        if grad_out.rows() != cache.output.rows() || grad_out.cols() != cache.output.cols() {
            return Err(Error::shape("gradient shape differs from encoder output"));
        }
        let mut grads = Self::zeros(self.arch.clone());
        let eps = F::lit(NORM_EPS);
        // Through y = z / |z|.
        let mut delta = Matrix::zeros(grad_out.rows(), grad_out.cols());
        for r in 0..grad_out.rows() {
            let n = cache.norms[r];
            if n < eps {
                continue;
            }
            let y = cache.output.row(r);
            let dy = grad_out.row(r);
            let proj = dot(y, dy);
            for ((d, &yi), &dyi) in delta.row_mut(r).iter_mut().zip(y).zip(dy) {
                *d = (dyi - yi * proj) / n;
            }
        }
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &cache.inputs[li];
            let g = &mut grads.layers[li];
            for r in 0..delta.rows() {
                let dr = delta.row(r);
                let xr = input.row(r);
                for (j, &d) in dr.iter().enumerate() {
                    if d != F::zero() {
                        axpy(g.weight.row_mut(j), d, xr);
                        g.bias[j] += d;
                    }
                }
            }
            if li == 0 {
                break;
            }
            // Into the previous layer's activation, then through its ELU.
            let prev_pre = &cache.pre[li - 1];
            let mut next = Matrix::zeros(delta.rows(), layer.weight.cols());
            for r in 0..delta.rows() {
                let nr = next.row_mut(r);
                for (j, &d) in delta.row(r).iter().enumerate() {
                    if d != F::zero() {
                        axpy(nr, d, layer.weight.row(j));
                    }
                }
                for (v, &z) in nr.iter_mut().zip(prev_pre.row(r)) {
                    *v *= elu_grad(z);
                }
            }
            delta = next;
        }
        Ok(grads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step<F: Scalar>(&mut self, params: &mut [F], grads: &[F], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - libm::pow(beta1, f64::from(self.t));
        let c2 = 1.0 - libm::pow(beta2, f64::from(self.t));
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let g = g.as_f64();
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let update = lr * (*m / c1) / (libm::sqrt(*v / c2) + eps);
            *p = F::lit(p.as_f64() - update);
        }
    }
}

/// Linear warmup followed by cosine decay to `final_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_frac: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            final_lr: 1e-5,
            warmup_frac: 0.05,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, step: usize, total_steps: usize) -> f64 {
        let total = total_steps.max(1);
        let warmup = libm::ceil(self.warmup_frac * total as f64) as usize;
        if step < warmup {
            return self.base_lr * (step + 1) as f64 / warmup as f64;
        }
        let span = (total - warmup).max(1);
        let progress = ((step - warmup) as f64 / span as f64).min(1.0);
        self.final_lr + 0.5 * (self.base_lr - self.final_lr) * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecAugmentConfig {
    pub n_time_masks: usize,
    pub n_freq_masks: usize,
    /// Largest mask width as a fraction of the masked axis.
    pub max_width_frac: f64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            n_time_masks: 1,
            n_freq_masks: 1,
            max_width_frac: 0.1,
        }
    }
}

impl SpecAugmentConfig {
    pub fn max_widths(&self, n_mels: usize, n_frames: usize) -> (usize, usize) {
        let w = |dim: usize| (libm::floor(self.max_width_frac * dim as f64) as usize).min(dim.saturating_sub(1));
        (w(n_frames), w(n_mels))
    }
}

/// Sets `n_time_masks` runs of whole frames (columns) and `n_freq_masks`
/// runs of mel bands (rows) to the silence value. Each width is uniform in
/// `[0, max_width]` and each start uniform over the positions that fit.
pub fn spec_augment<R: Rng + ?Sized>(
    mel: &Matrix<f32>,
    rng: &mut R,
    n_time_masks: usize,
    n_freq_masks: usize,
    max_time_width: usize,
    max_freq_width: usize,
) -> Result<Matrix<f32>> {
    let (n_mels, n_frames) = (mel.rows(), mel.cols());
    if (n_time_masks > 0 && max_time_width > n_frames) || (n_freq_masks > 0 && max_freq_width > n_mels) {
        return Err(Error::config("mask width exceeds the masked axis"));
    }
    let mut out = mel.clone();
    for _ in 0..n_time_masks {
        let w = rng.gen_range(0..=max_time_width);
        let start = rng.gen_range(0..=n_frames - w);
        for r in 0..n_mels {
            out.row_mut(r)[start..start + w].fill(SILENCE_VALUE);
        }
    }
    for _ in 0..n_freq_masks {
        let w = rng.gen_range(0..=max_freq_width);
        let start = rng.gen_range(0..=n_mels - w);
        for r in start..start + w {
            out.row_mut(r).fill(SILENCE_VALUE);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_relative_error, numeric_gradient, FD_STEP, GRADCHECK_TOL};

    fn random_inputs(seed: u64, rows: usize, cols: usize) -> Matrix<f64> {
        let mut rng = crate::seeded_rng(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_params_give_e1() {
        let p = EncoderParams::<f64>::zeros(EncoderArch::new(6, vec![4], 3));
        let out = p.forward(&random_inputs(1, 2, 6)).unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn outputs_are_unit_and_deterministic() {
        let p = EncoderParams::<f32>::init(EncoderArch::new(20, vec![16, 8], 5), &mut crate::seeded_rng(2));
        let x = random_inputs(3, 10, 20).cast::<f32>();
        let a = p.forward(&x).unwrap();
        assert_eq!(a, p.forward(&x).unwrap());
        for r in a.iter_rows() {
            assert!((crate::linalg::norm(r) - 1.0).abs() < 1e-6);
        }
        let same = Matrix::from_rows(&[x.row(0), x.row(0)]).unwrap();
        let o = p.forward(&same).unwrap();
        assert_eq!(o.row(0), o.row(1));
        assert!(p.forward(&random_inputs(3, 2, 19).cast::<f32>()).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let arch = EncoderArch::new(5, vec![4, 3], 3);
        let params = EncoderParams::<f64>::init(arch.clone(), &mut crate::seeded_rng(4));
        let x = random_inputs(5, 4, 5);
        // Linear functional of the embeddings as the upstream loss.
        let weights = random_inputs(6, 4, 3);
        let cache = params.forward_cached(&x).unwrap();
        let analytic = params.backward(&cache, &weights).unwrap().to_flat();
        let numeric = numeric_gradient(&params.to_flat(), FD_STEP, |flat| {
            let p = EncoderParams::from_flat(arch.clone(), flat).unwrap();
            let y = p.forward(&x).unwrap();
            y.as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum()
        });
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < GRADCHECK_TOL, "{err}");
    }

    #[test]
    fn flat_round_trip() {
        let arch = EncoderArch::new(7, vec![3], 2);
        let p = EncoderParams::<f32>::init(arch.clone(), &mut crate::seeded_rng(8));
        assert_eq!(EncoderParams::from_flat(arch, &p.to_flat()).unwrap(), p);
        assert_eq!(p.n_params(), 7 * 3 + 3 + 3 * 2 + 2);
    }

    #[test]
    fn adam_with_zero_lr_is_a_no_op() {
        let mut p = vec![0.5f32, -1.0];
        let mut adam = Adam::new(2, AdamConfig::default());
        adam.step(&mut p, &[1.0, 2.0], 0.0);
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![0.0f64];
        let mut adam = Adam::new(1, AdamConfig::default());
        adam.step(&mut p, &[3.0], 0.01);
        assert!((p[0] + 0.01).abs() < 1e-8);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::default();
        assert!((s.lr(0, 100) - 1e-3 / 5.0).abs() < 1e-12);
        assert!((s.lr(4, 100) - 1e-3).abs() < 1e-12);
        assert!((s.lr(5, 100) - 1e-3).abs() < 1e-12);
        assert!((s.lr(100, 100) - 1e-5).abs() < 1e-12);
        assert!(s.lr(50, 100) < s.lr(20, 100));
    }

    #[test]
    fn spec_augment_cases() {
        let mel = Matrix::from_vec(8, 6, vec![0.25f32; 48]).unwrap();
        let mut rng = crate::seeded_rng(1);
        assert_eq!(spec_augment(&mel, &mut rng, 0, 0, 3, 3).unwrap(), mel);
        let full = spec_augment(&mel, &mut rng, 1, 0, 6, 0);
        // A full-width draw blanks every column; any draw blanks whole columns.
        let full = full.unwrap();
        for c in 0..6 {
            let col: Vec<f32> = (0..8).map(|r| full.get(r, c)).collect();
            assert!(col.iter().all(|&v| v == -1.0) || col.iter().all(|&v| v == 0.25));
        }
        let a = spec_augment(&mel, &mut crate::seeded_rng(5), 1, 1, 2, 3).unwrap();
        let b = spec_augment(&mel, &mut crate::seeded_rng(5), 1, 1, 2, 3).unwrap();
        assert_eq!(a, b);
        assert!(spec_augment(&mel, &mut rng, 1, 0, 7, 0).is_err());
    }

    #[test]
    fn full_width_time_mask_blanks_everything() {
        let mel = Matrix::from_vec(4, 3, vec![0.5f32; 12]).unwrap();
        // Width is drawn from [0, 3]; find a seed that draws the full width.
        let hit = (0..200u64)
            .map(|s| spec_augment(&mel, &mut crate::seeded_rng(s), 1, 0, 3, 0).unwrap())
            .find(|m| m.as_slice().iter().all(|&v| v == -1.0));
        assert!(hit.is_some());
    }

    #[test]
    fn masked_cell_count_matches_expectation() {
        let (f, t) = (256usize, 28usize);
        let mel = Matrix::from_vec(f, t, vec![0.0f32; f * t]).unwrap();
        let cfg = SpecAugmentConfig::default();
        let (wt, wf) = cfg.max_widths(f, t);
        let mut rng = crate::seeded_rng(77);
        let trials = 10_000;
        let mut total = 0usize;
        for _ in 0..trials {
            let m = spec_augment(&mel, &mut rng, 1, 1, wt, wf).unwrap();
            total += m.as_slice().iter().filter(|&&v| v == -1.0).count();
        }
        // Time mask covers wt' * F cells, freq mask wf' * T, overlapping in
        // wt' * wf'; widths are independent and uniform on [0, W].
        let (et, ef) = (wt as f64 / 2.0, wf as f64 / 2.0);
        let expected = et * f as f64 + ef * t as f64 - et * ef;
        let measured = total as f64 / trials as f64;
        assert!((measured / expected - 1.0).abs() < 0.02, "{measured} vs {expected}");
    }
}
