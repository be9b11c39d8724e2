//! Label-conditioned variational autoencoder.
//!
//! The encoder is a ResNet-18-style stack (SiLU, no normalisation) that sees
//! the class label as constant feature maps at the input of every residual
//! block. The decoder projects `z ‖ label` to 8×8 maps and upsamples four
//! times to 128×128, with the label maps appended before every convolution.
//! Training minimises the negative ELBO: summed squared reconstruction error
//! against the clean target plus `alpha` times the Gaussian KL term.

mod checkpoint;
mod net;
mod train;

pub use checkpoint::{checkpoint_hash, CheckpointError};
pub use net::LabelMode;
pub use train::{train_cvae, CvaeTrainConfig, EpochLog, TrainingLog};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{ClassLabel, CROP_SIZE};
use crate::nn::{concat_label_maps, ParamLayout, Real, Tensor};
use net::{injection_widths, Arch};

/// Bound applied to the predicted `log σ²`.
pub const LOG_VAR_CLAMP: f64 = 30.0;

#[derive(Debug, Error)]
pub enum CvaeError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("non-finite loss at epoch {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeConfig {
    /// Latent dimensionality `n`.
    pub latent_dim: usize,
    /// Class count `K`; taken from the dataset when zero.
    pub num_classes: usize,
    /// KL weight.
    pub alpha: f64,
    /// Channels of the first encoder stage; later stages double it.
    pub base_width: usize,
    /// Residual blocks per encoder stage.
    pub blocks: [usize; 4],
    /// Channels of the decoder's 8×8 starting maps.
    pub decoder_width: usize,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 256,
            num_classes: 0,
            alpha: 0.1,
            base_width: 64,
            blocks: [2, 2, 2, 2],
            decoder_width: 256,
            label_mode: LabelMode::Full,
            seed: 0,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<(), CvaeError> {
        let bad = |m: String| Err(CvaeError::Config(m));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if self.base_width == 0 || self.blocks.iter().any(|&b| b == 0) {
            return bad("base_width and every stage's block count must be positive".into());
        }
        if self.decoder_width < 8 || self.decoder_width % 8 != 0 {
            return bad(format!(
                "decoder_width must be a positive multiple of 8, got {}",
                self.decoder_width
            ));
        }
        Ok(())
    }

    /// Total label-map widening, in parameters, across all injection sites.
    pub fn label_parameter_count(&self) -> usize {
        let [k_stem, k_block, k_fc, k_conv] = injection_widths(self.label_mode, self.num_classes);
        let w = self.base_width;
        let mut n = k_stem * w * 9;
        for (s, &count) in self.blocks.iter().enumerate() {
            n += count * k_block * (w << s) * 9;
        }
        n += k_fc * self.decoder_width * 64;
        let mut c = self.decoder_width;
        for i in 0..4 {
            let out = if i == 3 { 3 } else { c / 2 };
            n += k_conv * out * 9;
            c = out;
        }
        n
    }
}

/// Mean and log-variance of the approximate posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentCode {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Appends `K` constant planes to `features`, plane `k` filled with
/// `label[k]`.
pub fn embed_label_as_maps<T: Real>(
    features: &Tensor<T>,
    label: &[T],
    num_classes: usize,
) -> Result<Tensor<T>, CvaeError> {
    if label.len() != num_classes {
        return Err(CvaeError::ShapeMismatch(format!(
            "label has {} entries, expected {num_classes}",
            label.len()
        )));
    }
    Ok(concat_label_maps(features, label))
}

/// Standard-normal noise for one sample.
pub fn noise(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `z = μ + exp(½ log σ²) ⊙ ε` with `ε ~ N(0, I)` drawn from `noise_seed`.
pub fn reparameterize(code: &LatentCode, noise_seed: u64) -> Vec<f64> {
    reparameterize_with(code, &noise(code.dim(), noise_seed))
}

pub fn reparameterize_with(code: &LatentCode, eps: &[f64]) -> Vec<f64> {
    code.mu
        .iter()
        .zip(&code.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (σ² + μ² − 1 − log σ²)`.
pub fn kl_divergence(code: &LatentCode) -> f64 {
    0.5 * code
        .mu
        .iter()
        .zip(&code.log_var)
        .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
        .sum::<f64>()
}

/// Negative ELBO for one sample: `‖x̂ − x′‖² + α·KL`.
pub fn elbo_loss<T: Real>(
    x_prime: &Tensor<T>,
    x_hat: &Tensor<T>,
    code: &LatentCode,
    alpha: f64,
) -> Result<ElboLoss, CvaeError> {
    if x_prime.shape() != x_hat.shape() {
        return Err(CvaeError::ShapeMismatch(format!(
            "reconstruction {:?} vs target {:?}",
            x_prime.shape(),
            x_hat.shape()
        )));
    }
    if code.mu.len() != code.log_var.len() {
        return Err(CvaeError::ShapeMismatch("mu and log_var lengths differ".into()));
    }
    let recon = x_prime
        .data
        .iter()
        .zip(&x_hat.data)
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>();
    let kl = kl_divergence(code);
    Ok(ElboLoss {
        total: recon + alpha * kl,
        recon,
        kl,
    })
}

/// Sum of per-sample losses over a batch.
pub fn elbo_loss_batch<T: Real>(
    x_prime: &[Tensor<T>],
    x_hat: &[Tensor<T>],
    codes: &[LatentCode],
    alpha: f64,
) -> Result<ElboLoss, CvaeError> {
    if x_prime.len() != x_hat.len() || x_prime.len() != codes.len() {
        return Err(CvaeError::ShapeMismatch("batch sizes differ".into()));
    }
    let mut acc = ElboLoss {
        total: 0.0,
        recon: 0.0,
        kl: 0.0,
    };
    for ((a, b), c) in x_prime.iter().zip(x_hat).zip(codes) {
        let l = elbo_loss(a, b, c, alpha)?;
        acc.total += l.total;
        acc.recon += l.recon;
        acc.kl += l.kl;
    }
    Ok(acc)
}

/// Gradient of the negative ELBO with respect to `(μ, log σ²)` for a fixed
/// upstream gradient `dz` and noise `ε`.
pub fn latent_gradient(code: &LatentCode, eps: &[f64], dz: &[f64], alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let n = code.dim();
    let mut g_mu = Vec::with_capacity(n);
    let mut g_lv = Vec::with_capacity(n);
    for j in 0..n {
        let (m, lv) = (code.mu[j], code.log_var[j]);
        g_mu.push(dz[j] + alpha * m);
        g_lv.push(dz[j] * eps[j] * 0.5 * (0.5 * lv).exp() + alpha * 0.5 * (lv.exp() - 1.0));
    }
    (g_mu, g_lv)
}

/// A network instance: configuration plus flat parameters.
pub struct Cvae<T> {
    pub config: CvaeConfig,
    pub params: Vec<T>,
    arch: Arch,
    layout: ParamLayout,
}

impl<T: Real> Clone for Cvae<T> {
    fn clone(&self) -> Self {
        Self::with_params(self.config.clone(), self.params.clone()).expect("validated config")
    }
}

/// Per-sample losses and the gradient they produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleLoss {
    pub recon: f64,
    pub kl: f64,
}

impl<T: Real> Cvae<T> {
    /// Freshly initialised network for `config.seed`.
    pub fn new(config: CvaeConfig) -> Result<Self, CvaeError> {
        config.validate()?;
        let (arch, layout) = Self::arch(&config);
        let params = layout.initialize(config.seed);
        Ok(Self {
            config,
            params,
            arch,
            layout,
        })
    }

    pub fn with_params(config: CvaeConfig, params: Vec<T>) -> Result<Self, CvaeError> {
        config.validate()?;
        let (arch, layout) = Self::arch(&config);
        if params.len() != layout.len() {
            return Err(CvaeError::ShapeMismatch(format!(
                "{} parameters for a network of {}",
                params.len(),
                layout.len()
            )));
        }
        Ok(Self {
            config,
            params,
            arch,
            layout,
        })
    }

    fn arch(c: &CvaeConfig) -> (Arch, ParamLayout) {
        Arch::build(
            c.latent_dim,
            c.num_classes,
            c.base_width,
            c.blocks,
            c.decoder_width,
            c.label_mode,
        )
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Real>(&self) -> Cvae<U> {
        Cvae::with_params(
            self.config.clone(),
            self.params.iter().map(|&p| U::of(p.as_f64())).collect(),
        )
        .expect("same config")
    }

    fn check_input(&self, x: &Tensor<T>, label: &ClassLabel) -> Result<(), CvaeError> {
        if x.shape() != (3, CROP_SIZE, CROP_SIZE) {
            return Err(CvaeError::ShapeMismatch(format!(
                "input {:?}, expected (3, {CROP_SIZE}, {CROP_SIZE})",
                x.shape()
            )));
        }
        if label.num_classes() != self.config.num_classes {
            return Err(CvaeError::ShapeMismatch(format!(
                "label over {} classes, model expects {}",
                label.num_classes(),
                self.config.num_classes
            )));
        }
        Ok(())
    }

    fn split_raw(&self, raw: &[T]) -> LatentCode {
        let n = self.config.latent_dim;
        LatentCode {
            mu: raw[..n].iter().map(|v| v.as_f64()).collect(),
            log_var: raw[n..]
                .iter()
                .map(|v| v.as_f64().clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP))
                .collect(),
        }
    }

    pub fn encode(&self, x: &Tensor<T>, label: &ClassLabel) -> Result<LatentCode, CvaeError> {
        self.check_input(x, label)?;
        let (raw, _) = self.arch.encode(&self.params, x, &label.one_hot(), None);
        Ok(self.split_raw(&raw))
    }

    pub fn decode(&self, z: &[f64], label: &ClassLabel) -> Result<Tensor<T>, CvaeError> {
        if z.len() != self.config.latent_dim {
            return Err(CvaeError::ShapeMismatch(format!(
                "latent of {} entries, expected {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        let zt: Vec<T> = z.iter().map(|&v| T::of(v)).collect();
        Ok(self.arch.decode(&self.params, &zt, &label.one_hot()).0)
    }

    /// Forward and backward pass for one sample, adding parameter gradients
    /// of the negative ELBO into `grads`.
    pub fn accumulate_gradient(
        &self,
        x: &Tensor<T>,
        target: &Tensor<T>,
        label: &ClassLabel,
        eps: &[f64],
        alpha: f64,
        grads: &mut [T],
    ) -> Result<SampleLoss, CvaeError> {
        self.check_input(x, label)?;
        if target.shape() != x.shape() {
            return Err(CvaeError::ShapeMismatch("target shape differs from input".into()));
        }
        let onehot = label.one_hot::<T>();
        let (raw, enc) = self.arch.encode(&self.params, x, &onehot, None);
        let code = self.split_raw(&raw);
        let z = reparameterize_with(&code, eps);
        let zt: Vec<T> = z.iter().map(|&v| T::of(v)).collect();
        let (out, dec) = self.arch.decode(&self.params, &zt, &onehot);
        let mut recon = 0.0;
        let mut g_out = out.clone();
        for (g, (&o, &t)) in g_out.data.iter_mut().zip(out.data.iter().zip(&target.data)) {
            let d = o - t;
            recon += d.as_f64() * d.as_f64();
            *g = d + d;
        }
        let dz: Vec<f64> = self
            .arch
            .decode_backward(&self.params, &dec, &g_out, grads)
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let (g_mu, mut g_lv) = latent_gradient(&code, eps, &dz, alpha);
        let n = self.config.latent_dim;
        for (j, g) in g_lv.iter_mut().enumerate() {
            if raw[n + j].as_f64().abs() > LOG_VAR_CLAMP {
                *g = 0.0;
            }
        }
        let g_raw: Vec<T> = g_mu.iter().chain(&g_lv).map(|&v| T::of(v)).collect();
        self.arch.encode_backward(&self.params, &enc, &g_raw, grads);
        Ok(SampleLoss {
            recon,
            kl: kl_divergence(&code),
        })
    }

    /// Loss for one sample with fixed noise, without gradients.
    pub fn sample_loss(
        &self,
        x: &Tensor<T>,
        target: &Tensor<T>,
        label: &ClassLabel,
        eps: &[f64],
        alpha: f64,
    ) -> Result<ElboLoss, CvaeError> {
        let code = self.encode(x, label)?;
        let out = self.decode(&reparameterize_with(&code, eps), label)?;
        elbo_loss(&out, target, &code, alpha)
    }

    /// Which input each stem max-pool output took for this sample.
    pub fn pool_routing(&self, x: &Tensor<T>, label: &ClassLabel) -> Result<Vec<u32>, CvaeError> {
        self.check_input(x, label)?;
        Ok(self.arch.encode(&self.params, x, &label.one_hot(), None).1.pool_arg)
    }

    /// [`Cvae::sample_loss`] with the stem pool held to `routing`. The loss
    /// is then smooth in the parameters, which finite-difference checks of
    /// the gradient need: max-pooling has kinks wherever two inputs tie.
    pub fn sample_loss_routed(
        &self,
        x: &Tensor<T>,
        target: &Tensor<T>,
        label: &ClassLabel,
        eps: &[f64],
        alpha: f64,
        routing: &[u32],
    ) -> Result<ElboLoss, CvaeError> {
        self.check_input(x, label)?;
        let (raw, _) = self.arch.encode(&self.params, x, &label.one_hot(), Some(routing));
        let code = self.split_raw(&raw);
        let out = self.decode(&reparameterize_with(&code, eps), label)?;
        elbo_loss(&out, target, &code, alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    pub(crate) fn tiny(n: usize, k: usize, mode: LabelMode) -> CvaeConfig {
        CvaeConfig {
            latent_dim: n,
            num_classes: k,
            base_width: 2,
            blocks: [1, 1, 1, 1],
            decoder_width: 8,
            label_mode: mode,
            ..Default::default()
        }
    }

    fn image<T: Real>(seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * CROP_SIZE * CROP_SIZE).map(|_| T::of(rng.gen())).collect();
        Tensor::from_vec(3, CROP_SIZE, CROP_SIZE, data).unwrap()
    }

    #[test]
    fn label_maps() {
        let x = Tensor::<f64>::from_vec(2, 4, 4, vec![0.3; 32]).unwrap();
        let y = embed_label_as_maps(&x, &[0.0, 1.0, 0.0], 3).unwrap();
        assert_eq!(y.c, 5);
        for (k, want) in [0.0, 1.0, 0.0].iter().enumerate() {
            let plane = &y.data[(2 + k) * 16..(3 + k) * 16];
            assert!(plane.iter().all(|v| v == want));
            assert_eq!(plane.iter().sum::<f64>() / 16.0, *want);
        }
        assert!(matches!(
            embed_label_as_maps(&x, &[1.0, 0.0], 3),
            Err(CvaeError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn reparameterize_limits_and_moments() {
        let code = LatentCode {
            mu: vec![0.7, -1.2],
            log_var: vec![-LOG_VAR_CLAMP; 2],
        };
        let z = reparameterize(&code, 3);
        assert!((z[0] - 0.7).abs() < 1e-6 && (z[1] + 1.2).abs() < 1e-6);

        let unit = LatentCode {
            mu: vec![0.0],
            log_var: vec![0.0],
        };
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|s| reparameterize(&unit, s)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        // Var of the sample variance for a normal is 2σ⁴/(n−1).
        assert!((var - 1.0).abs() < 3.0 * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn elbo_closed_forms() {
        let x = image::<f64>(1);
        let zero = LatentCode {
            mu: vec![0.0; 4],
            log_var: vec![0.0; 4],
        };
        assert_eq!(elbo_loss(&x, &x, &zero, 0.1).unwrap().total, 0.0);
        let one = LatentCode {
            mu: vec![1.0, 0.0, 0.0, 0.0],
            log_var: vec![0.0; 4],
        };
        let l = elbo_loss(&x, &x, &one, 0.1).unwrap();
        assert_eq!(l.kl, 0.5);
        assert_relative_eq!(l.total, 0.05);
        let small = Tensor::<f64>::zeros(3, 4, 4);
        assert!(matches!(elbo_loss(&x, &small, &zero, 0.1), Err(CvaeError::ShapeMismatch(_))));
    }

    #[test]
    fn encode_decode_shapes_and_ranges() {
        for n in [32, 64] {
            let m = Cvae::<f32>::new(tiny(n, 3, LabelMode::Full)).unwrap();
            let label = ClassLabel::new(1, 3).unwrap();
            let x = image::<f32>(2);
            let a = m.encode(&x, &label).unwrap();
            assert_eq!((a.mu.len(), a.log_var.len()), (n, n));
            assert_eq!(a, m.encode(&x, &label).unwrap());
            let z: Vec<f64> = noise(n, 5).iter().map(|e| e * 5f64.sqrt()).collect();
            let out = m.decode(&z, &label).unwrap();
            assert_eq!(out.shape(), (3, 128, 128));
            assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn parameter_count_audit() {
        for mode in [LabelMode::Full, LabelMode::FirstLayer] {
            let with = tiny(8, 3, mode);
            let without = CvaeConfig {
                label_mode: LabelMode::None,
                ..with.clone()
            };
            let a = Cvae::<f32>::new(with.clone()).unwrap().num_params();
            let b = Cvae::<f32>::new(without).unwrap().num_params();
            assert_eq!(a - b, with.label_parameter_count());
        }
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut r = || rng.gen_range(-1.0..1.0);
        let code = LatentCode {
            mu: (0..4).map(|_| r()).collect(),
            log_var: (0..4).map(|_| r()).collect(),
        };
        let eps: Vec<f64> = noise(4, 2);
        let c: Vec<f64> = (0..4).map(|_| r()).collect();
        let alpha = 0.3;
        // Stand-in decoder: loss ½‖z − c‖² + α·KL, so dL/dz = z − c.
        let loss = |code: &LatentCode| {
            let z = reparameterize_with(code, &eps);
            0.5 * z.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                + alpha * kl_divergence(code)
        };
        let z = reparameterize_with(&code, &eps);
        let dz: Vec<f64> = z.iter().zip(&c).map(|(a, b)| a - b).collect();
        let (g_mu, g_lv) = latent_gradient(&code, &eps, &dz, alpha);
        let h = 1e-6;
        for j in 0..4 {
            for (which, analytic) in [(0, g_mu[j]), (1, g_lv[j])] {
                let mut up = code.clone();
                let mut down = code.clone();
                let (u, d) = if which == 0 {
                    (&mut up.mu[j], &mut down.mu[j])
                } else {
                    (&mut up.log_var[j], &mut down.log_var[j])
                };
                *u += h;
                *d -= h;
                let fd = (loss(&up) - loss(&down)) / (2.0 * h);
                assert!((fd - analytic).abs() / fd.abs().max(1e-8) < 1e-4);
            }
        }
    }

    /// Central finite differences of the full network loss.
    #[test]
    fn network_gradient_matches_finite_differences() {
        let cfg = CvaeConfig {
            seed: 4,
            ..tiny(4, 2, LabelMode::Full)
        };
        let mut m = Cvae::<f64>::new(cfg).unwrap();
        // Nonzero residual branches so every layer carries gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in m.params.iter_mut() {
            if *p == 0.0 {
                *p = rng.gen_range(-0.05..0.05);
            }
        }
        let x = image::<f64>(3);
        let label = ClassLabel::new(1, 2).unwrap();
        let eps = noise(4, 9);
        // A target near the current reconstruction keeps the loss small, so
        // its rounding does not swamp the central differences.
        let code = m.encode(&x, &label).unwrap();
        let mut t = m.decode(&reparameterize_with(&code, &eps), &label).unwrap();
        for v in t.data.iter_mut() {
            *v += rng.gen_range(-0.01..0.01);
        }
        let mut grads = vec![0.0; m.num_params()];
        m.accumulate_gradient(&x, &t, &label, &eps, 0.1, &mut grads).unwrap();
        let n = m.num_params();
        // Near-zero gradients are compared against a floor tied to the
        // overall gradient scale, below which differences are FD noise.
        let rms = (grads.iter().map(|g| g * g).sum::<f64>() / n as f64).sqrt();
        let mut checked = 0;
        for idx in (0..n).step_by(n / 60) {
            let h = 3e-4;
            let orig = m.params[idx];
            m.params[idx] = orig + h;
            let up = m.sample_loss(&x, &t, &label, &eps, 0.1).unwrap().total;
            m.params[idx] = orig - h;
            let down = m.sample_loss(&x, &t, &label, &eps, 0.1).unwrap().total;
            m.params[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let scale = fd.abs().max(grads[idx].abs()).max(1e-3 * rms);
            assert!(
                (fd - grads[idx]).abs() / scale < 1e-4,
                "param {idx}: analytic {} vs fd {fd}",
                grads[idx]
            );
            checked += 1;
        }
        assert!(checked >= 60);
    }
}
