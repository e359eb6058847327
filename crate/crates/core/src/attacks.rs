//! Reconstruction attacks and their empirical MSE.
//!
//! Each attack maps an encoding back to an input estimate. [`evaluate_attack`]
//! draws inputs from a prior, encodes them, attacks, and records
//! `|x_hat - x|^2 / d` per trial.

use std::fmt;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::optim::{minimize, Adam, OptConfig};
use crate::diff::{loss::batch_loss_gradient, Activation, SmoothMap, SquaredError};
use crate::encoders::NoisyEncoder;
use crate::error::{ensure_dim, invalid, Error, Result};
use crate::exec::Execution;
use crate::priors::{GaussianMixture, TrainingLog};
use crate::rng::{self, TAG_BATCH, TAG_INIT, TAG_NOISE, TAG_PRIOR};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    UnbiasedLs,
    MapGaussian,
    PriorMean,
    LearnedInversion,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::UnbiasedLs => "unbiased-ls",
            AttackKind::MapGaussian => "map-gaussian",
            AttackKind::PriorMean => "prior-mean",
            AttackKind::LearnedInversion => "learned-inversion",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            AttackKind::UnbiasedLs,
            AttackKind::MapGaussian,
            AttackKind::PriorMean,
            AttackKind::LearnedInversion,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| invalid(format!("unknown attack kind `{s}`")))
    }
}

/// An input estimate together with optimiser diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub x: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl Reconstruction {
    fn direct(x: DVector<f64>) -> Self {
        Self {
            x,
            converged: true,
            iterations: 0,
            grad_norm: 0.0,
        }
    }
}

/// Empirical MSE of an attack over independent trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack_kind: AttackKind,
    pub per_sample_mse: Vec<f64>,
    pub mean_mse: f64,
    /// Standard error of `mean_mse`; zero for a single trial.
    pub std_error: f64,
    pub n_trials: usize,
    pub seed: u64,
    /// Trials whose optimiser met its gradient tolerance.
    pub converged_trials: usize,
}

pub trait Attack: Sync {
    fn kind(&self) -> AttackKind;

    fn reconstruct(&self, enc: &NoisyEncoder, e: &DVector<f64>) -> Result<Reconstruction>;
}

fn check_encoding(enc: &NoisyEncoder, e: &DVector<f64>) -> Result<()> {
    ensure_dim("encoding", enc.output_dim(), e.len())
}

/// `argmin_x |e - Enc_D(x)|^2`, started at `init` (zero by default).
pub fn attack_unbiased(
    enc: &NoisyEncoder,
    e: &Tensor,
    init: Option<&Tensor>,
    opt: &OptConfig,
) -> Result<Reconstruction> {
    let attack = UnbiasedAttack {
        opt: *opt,
        init: init.map(Tensor::to_dvector),
    };
    attack.reconstruct(enc, &e.to_dvector())
}

/// MAP estimate under `N(0, tau^2 I)`: minimises
/// `|e - Enc_D(x)|^2 / (2 sigma^2) + |x|^2 / (2 tau^2)`.
pub fn attack_map_gaussian(enc: &NoisyEncoder, e: &Tensor, tau: f64, opt: &OptConfig) -> Result<Reconstruction> {
    MapGaussianAttack::new(tau, *opt)?.reconstruct(enc, &e.to_dvector())
}

/// Ignores the encoding and returns the prior mean.
pub fn attack_prior_mean(prior_mean: &Tensor) -> Tensor {
    prior_mean.clone()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnbiasedAttack {
    pub opt: OptConfig,
    pub init: Option<DVector<f64>>,
}

impl Attack for UnbiasedAttack {
    fn kind(&self) -> AttackKind {
        AttackKind::UnbiasedLs
    }

    fn reconstruct(&self, enc: &NoisyEncoder, e: &DVector<f64>) -> Result<Reconstruction> {
        check_encoding(enc, e)?;
        let base = enc.base();
        let x0 = match &self.init {
            Some(x) => {
                ensure_dim("attack initialisation", enc.input_dim(), x.len())?;
                x.clone()
            }
            None => DVector::zeros(enc.input_dim()),
        };
        let out = minimize(
            |x| {
                let traced = base.trace(x, false)?;
                let r = &traced.output - e;
                let g = base.input_gradient(&traced, &(&r * 2.0))?;
                Ok((r.norm_squared(), g))
            },
            x0,
            &self.opt,
        )?;
        Ok(Reconstruction {
            x: out.x,
            converged: out.converged,
            iterations: out.iterations,
            grad_norm: out.grad_norm,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapGaussianAttack {
    tau: f64,
    pub opt: OptConfig,
}

impl MapGaussianAttack {
    pub fn new(tau: f64, opt: OptConfig) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(invalid(format!("prior scale must be positive, got {tau}")));
        }
        Ok(Self { tau, opt })
    }
}

impl Attack for MapGaussianAttack {
    fn kind(&self) -> AttackKind {
        AttackKind::MapGaussian
    }

    fn reconstruct(&self, enc: &NoisyEncoder, e: &DVector<f64>) -> Result<Reconstruction> {
        check_encoding(enc, e)?;
        let base = enc.base();
        let inv_s2 = 1.0 / (enc.sigma() * enc.sigma());
        let inv_t2 = 1.0 / (self.tau * self.tau);
        let out = minimize(
            |x| {
                let traced = base.trace(x, false)?;
                let r = &traced.output - e;
                let g = base.input_gradient(&traced, &(&r * inv_s2))? + x * inv_t2;
                let value = 0.5 * (r.norm_squared() * inv_s2 + x.norm_squared() * inv_t2);
                Ok((value, g))
            },
            DVector::zeros(enc.input_dim()),
            &self.opt,
        )?;
        Ok(Reconstruction {
            x: out.x,
            converged: out.converged,
            iterations: out.iterations,
            grad_norm: out.grad_norm,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorMeanAttack {
    pub mean: DVector<f64>,
}

impl Attack for PriorMeanAttack {
    fn kind(&self) -> AttackKind {
        AttackKind::PriorMean
    }

    fn reconstruct(&self, enc: &NoisyEncoder, _: &DVector<f64>) -> Result<Reconstruction> {
        ensure_dim("prior mean", enc.input_dim(), self.mean.len())?;
        Ok(Reconstruction::direct(self.mean.clone()))
    }
}

/// Training settings for the learned inversion network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    /// Hidden width of a two-hidden-layer tanh network; a single affine map
    /// when absent.
    pub hidden_width: Option<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl InversionConfig {
    /// Two hidden layers of width `4 d`.
    pub fn deep(d: usize) -> Self {
        Self {
            hidden_width: Some(4 * d),
            steps: 2000,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// A trained decoder from (standardised) encodings to inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedInversion {
    pub net: SmoothMap,
    shift: DVector<f64>,
    scale: DVector<f64>,
}

impl LearnedInversion {
    fn standardise(&self, e: &DVector<f64>) -> DVector<f64> {
        (e - &self.shift).component_div(&self.scale)
    }
}

impl Attack for LearnedInversion {
    fn kind(&self) -> AttackKind {
        AttackKind::LearnedInversion
    }

    fn reconstruct(&self, enc: &NoisyEncoder, e: &DVector<f64>) -> Result<Reconstruction> {
        check_encoding(enc, e)?;
        ensure_dim("inversion output", enc.input_dim(), self.net.output_dim())?;
        Ok(Reconstruction::direct(self.net.eval_vec(&self.standardise(e))?))
    }
}

/// Encodes `xs` with independent noise streams starting at `first_stream`.
pub fn encode_pairs(enc: &NoisyEncoder, xs: &[Tensor], first_stream: u64) -> Result<Vec<(Tensor, Tensor)>> {
    xs.iter()
        .enumerate()
        .map(|(i, x)| Ok((x.clone(), enc.encode_stream(x, first_stream + i as u64)?)))
        .collect()
}

/// Trains a decoder on `(x, e)` pairs with squared loss.
pub fn attack_learned_inversion(
    enc: &NoisyEncoder,
    train_pairs: &[(Tensor, Tensor)],
    config: &InversionConfig,
) -> Result<(LearnedInversion, TrainingLog)> {
    if train_pairs.len() < 100 {
        return Err(invalid(format!(
            "learned inversion needs at least 100 training pairs, got {}",
            train_pairs.len()
        )));
    }
    if config.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let (d, k) = (enc.input_dim(), enc.output_dim());
    let mut xs = Vec::with_capacity(train_pairs.len());
    let mut es = Vec::with_capacity(train_pairs.len());
    for (x, e) in train_pairs {
        ensure_dim("training input", d, x.len())?;
        ensure_dim("training encoding", k, e.len())?;
        xs.push(x.to_dvector());
        es.push(e.to_dvector());
    }
    let n = es.len() as f64;
    let shift = es.iter().fold(DVector::zeros(k), |acc, e| acc + e) / n;
    let scale = es
        .iter()
        .fold(DVector::zeros(k), |acc: DVector<f64>, e| {
            let c = e - &shift;
            acc + c.component_mul(&c)
        })
        .map(|v| (v / n).sqrt().max(1e-12));

    let mut init = rng::stream(config.seed, TAG_INIT, 1);
    let sizes = match config.hidden_width {
        Some(h) => vec![k, h, h, d],
        None => vec![k, d],
    };
    let net = SmoothMap::mlp(&sizes, Activation::Tanh, &mut init)?;
    let mut inversion = LearnedInversion { net, shift, scale };
    let inputs: Vec<DVector<f64>> = es.iter().map(|e| inversion.standardise(e)).collect();

    let mut params = inversion.net.params_flat();
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let mut log = TrainingLog::default();
    let mut r = rng::stream(config.seed, TAG_BATCH, 1);
    let batch = config.batch_size.min(inputs.len());
    for step in 0..config.steps {
        let idx: Vec<usize> = (0..batch).map(|_| r.random_range(0..inputs.len())).collect();
        let bx: Vec<DVector<f64>> = idx.iter().map(|&i| inputs[i].clone()).collect();
        let by: Vec<DVector<f64>> = idx.iter().map(|&i| xs[i].clone()).collect();
        let g = batch_loss_gradient(&inversion.net, &SquaredError { targets: &by }, &bx)
            .map_err(|e| Error::Training(format!("inversion step {step}: {e}")))?;
        log.losses.push(g.value);
        adam.step(&mut params, &g.flat);
        inversion
            .net
            .set_params_flat(&params)
            .map_err(|e| Error::Training(format!("inversion step {step}: {e}")))?;
    }
    Ok((inversion, log))
}

/// Source of inputs for attack evaluation.
pub trait PriorSampler: Sync {
    fn dim(&self) -> usize;

    fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64>;
}

/// `N(mean, tau^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub tau: f64,
}

impl GaussianPrior {
    pub fn centered(d: usize, tau: f64) -> Result<Self> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(invalid(format!("prior scale must be non-negative, got {tau}")));
        }
        Ok(Self {
            mean: DVector::zeros(d),
            tau,
        })
    }
}

impl PriorSampler for GaussianPrior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        &self.mean + rng::standard_normal(rng, self.mean.len()) * self.tau
    }
}

impl PriorSampler for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        GaussianMixture::sample(self, rng)
    }
}

/// Uniform draws from a fixed sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalPrior {
    samples: Vec<DVector<f64>>,
}

impl EmpiricalPrior {
    pub fn new(samples: &[Tensor]) -> Result<Self> {
        Ok(Self {
            samples: crate::priors::stack(samples)?,
        })
    }

    pub fn mean(&self) -> DVector<f64> {
        let d = self.samples[0].len();
        self.samples.iter().fold(DVector::zeros(d), |acc, s| acc + s) / self.samples.len() as f64
    }
}

impl PriorSampler for EmpiricalPrior {
    fn dim(&self) -> usize {
        self.samples[0].len()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        self.samples[rng.random_range(0..self.samples.len())].clone()
    }
}

/// Runs `n_trials` independent draw-encode-attack trials.
pub fn evaluate_attack(
    attack: &dyn Attack,
    enc: &NoisyEncoder,
    prior: &dyn PriorSampler,
    n_trials: usize,
    seed: u64,
) -> Result<AttackReport> {
    evaluate_attack_with(Execution::default(), attack, enc, prior, n_trials, seed)
}

pub fn evaluate_attack_with(
    exec: Execution,
    attack: &dyn Attack,
    enc: &NoisyEncoder,
    prior: &dyn PriorSampler,
    n_trials: usize,
    seed: u64,
) -> Result<AttackReport> {
    if n_trials == 0 {
        return Err(invalid("attack evaluation needs at least one trial"));
    }
    ensure_dim("prior dimension", enc.input_dim(), prior.dim())?;
    let d = enc.input_dim() as f64;
    let trials = exec.try_map_indexed(n_trials, |t| {
        let x = prior.sample(&mut rng::stream(seed, TAG_PRIOR, t as u64));
        let e = enc.encode_vec(&x, rng::derive_seed(seed, TAG_NOISE, t as u64))?;
        let rec = attack.reconstruct(enc, &e)?;
        Ok::<_, Error>(((rec.x - x).norm_squared() / d, rec.converged))
    })?;
    let per_sample_mse: Vec<f64> = trials.iter().map(|(m, _)| *m).collect();
    let converged_trials = trials.iter().filter(|(_, c)| *c).count();
    let (mean_mse, std_error) = mean_and_stderr(&per_sample_mse);
    Ok(AttackReport {
        attack_kind: attack.kind(),
        per_sample_mse,
        mean_mse,
        std_error,
        n_trials,
        seed,
        converged_trials,
    })
}

pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::van_trees_bound;
    use crate::priors::gaussian_prior_info;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn randm(seed: u64, r: usize, c: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
    }

    fn tight() -> OptConfig {
        OptConfig {
            max_iters: 20_000,
            step_size: 1.0,
            grad_tol: 1e-12,
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ["unbiased-ls", "map-gaussian", "prior-mean", "learned-inversion"] {
            assert_eq!(k.parse::<AttackKind>().unwrap().as_str(), k);
        }
        assert!("tv".parse::<AttackKind>().is_err());
    }

    #[test]
    fn noiseless_full_rank_affine_is_inverted() {
        let m = randm(1, 12, 6);
        let enc = NoisyEncoder::new(SmoothMap::affine(m.clone(), None).unwrap(), 1.0, 0).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.1, 0.8, 0.0, -0.5, 0.2]);
        let e = Tensor::try_from(&m * &x).unwrap();
        let rec = attack_unbiased(&enc, &e, None, &tight()).unwrap();
        assert!(rec.converged);
        assert!((rec.x - x).norm_squared() / 6.0 <= 1e-8);
    }

    #[test]
    fn tanh_encoder_fixed_point() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let base = SmoothMap::mlp(&[4, 10, 6], Activation::Tanh, &mut r).unwrap();
        let enc = NoisyEncoder::new(base.clone(), 0.1, 0).unwrap();
        let x = Tensor::vector(vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let e = base.evaluate(&x).unwrap();
        let rec = attack_unbiased(&enc, &e, Some(&x), &tight()).unwrap();
        assert_eq!(rec.iterations, 0);
        assert_eq!(rec.x, x.to_dvector());
    }

    #[test]
    fn attack_rejects_wrong_encoding_width() {
        let enc = NoisyEncoder::new(SmoothMap::identity(3).unwrap(), 1.0, 0).unwrap();
        let e = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!(attack_unbiased(&enc, &e, None, &tight()).is_err());
        assert!(attack_map_gaussian(&enc, &e, 1.0, &tight()).is_err());
        assert!(MapGaussianAttack::new(0.0, tight()).is_err());
    }

    #[test]
    fn map_limits() {
        let m = randm(2, 10, 5);
        let base = SmoothMap::affine(m.clone(), None).unwrap();
        let x = DVector::from_vec(vec![0.05, -0.02, 0.01, 0.03, -0.04]);
        let e = Tensor::try_from(&m * &x).unwrap();
        // Enormous noise: the prior dominates and the estimate collapses to 0.
        let loud = NoisyEncoder::new(base.clone(), 1e8, 0).unwrap();
        let rec = attack_map_gaussian(&loud, &e, 0.05, &tight()).unwrap();
        assert!(rec.x.norm() < 1e-10);
        // Negligible noise: the likelihood dominates and MAP approaches LS.
        let quiet = NoisyEncoder::new(base, 1e-5, 0).unwrap();
        let map = attack_map_gaussian(&quiet, &e, 0.05, &tight()).unwrap();
        let ls = attack_unbiased(&quiet, &e, None, &tight()).unwrap();
        assert!((map.x - ls.x).norm() < 1e-6);
    }

    #[test]
    fn prior_mean_attack() {
        let mean = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert_eq!(attack_prior_mean(&mean), mean);
        let enc = NoisyEncoder::new(SmoothMap::identity(2).unwrap(), 1.0, 0).unwrap();
        // Point-mass prior at the mean: zero error.
        let prior = GaussianPrior {
            mean: mean.to_dvector(),
            tau: 0.0,
        };
        let attack = PriorMeanAttack { mean: mean.to_dvector() };
        let r = evaluate_attack(&attack, &enc, &prior, 10, 1).unwrap();
        assert_eq!(r.mean_mse, 0.0);
    }

    #[test]
    fn prior_mean_mse_is_prior_variance_regardless_of_noise() {
        let tau = 0.05;
        let prior = GaussianPrior::centered(16, tau).unwrap();
        let attack = PriorMeanAttack { mean: DVector::zeros(16) };
        let mut values = Vec::new();
        for sigma in [1e-3, 1.0, 1e3] {
            let enc = NoisyEncoder::new(SmoothMap::identity(16).unwrap(), sigma, 0).unwrap();
            let r = evaluate_attack(&attack, &enc, &prior, 10_000, 4).unwrap();
            assert!((r.mean_mse - tau * tau).abs() < 0.05 * tau * tau);
            values.push(r.mean_mse);
        }
        assert!(values.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn evaluation_is_reproducible_and_sized() {
        let enc = NoisyEncoder::new(SmoothMap::identity(3).unwrap(), 0.5, 0).unwrap();
        let prior = GaussianPrior::centered(3, 1.0).unwrap();
        let attack = UnbiasedAttack { opt: tight(), init: None };
        let one = evaluate_attack(&attack, &enc, &prior, 1, 0).unwrap();
        assert_eq!(one.per_sample_mse.len(), 1);
        assert_eq!(one.std_error, 0.0);
        let a = evaluate_attack_with(Execution::Sequential, &attack, &enc, &prior, 40, 9).unwrap();
        let b = evaluate_attack_with(Execution::Parallel, &attack, &enc, &prior, 40, 9).unwrap();
        assert_eq!(a, b);
        assert!(evaluate_attack(&attack, &enc, &prior, 0, 0).is_err());
        let mean: f64 = a.per_sample_mse.iter().sum::<f64>() / 40.0;
        assert!((a.mean_mse - mean).abs() <= 1e-12);
    }

    #[test]
    fn isotropic_affine_unbiased_attack_meets_cramer_rao() {
        // M^T M = 4 I, so the least-squares estimator is efficient.
        let d = 8;
        let m = DMatrix::identity(d, d) * 2.0;
        let sigma = 0.3;
        let enc = NoisyEncoder::new(SmoothMap::affine(m, None).unwrap(), sigma, 2).unwrap();
        let bound = sigma * sigma / 4.0;
        let prior = GaussianPrior::centered(d, 1.0).unwrap();
        let r = evaluate_attack(&UnbiasedAttack { opt: tight(), init: None }, &enc, &prior, 4000, 3).unwrap();
        assert!(r.mean_mse >= bound - 3.0 * r.std_error);
        assert!((r.mean_mse - bound).abs() < 0.05 * bound, "{} vs {bound}", r.mean_mse);
    }

    #[test]
    fn map_mse_does_not_increase_as_noise_drops() {
        let m = randm(5, 20, 6);
        let base = SmoothMap::affine(m, None).unwrap();
        let prior = GaussianPrior::centered(6, 0.5).unwrap();
        let attack = MapGaussianAttack::new(0.5, tight()).unwrap();
        let mut last = f64::INFINITY;
        for sigma in [10.0, 3.0, 1.0, 0.3, 0.1] {
            let enc = NoisyEncoder::new(base.clone(), sigma, 0).unwrap();
            let r = evaluate_attack(&attack, &enc, &prior, 2000, 8).unwrap();
            assert!(r.mean_mse <= last);
            last = r.mean_mse;
        }
    }

    #[test]
    fn learned_inversion_needs_pairs() {
        let enc = NoisyEncoder::new(SmoothMap::identity(2).unwrap(), 1.0, 0).unwrap();
        let xs: Vec<Tensor> = (0..10).map(|i| Tensor::vector(vec![i as f64, 0.0]).unwrap()).collect();
        let pairs = encode_pairs(&enc, &xs, 0).unwrap();
        assert!(attack_learned_inversion(&enc, &pairs, &InversionConfig::deep(2)).is_err());
    }

    #[test]
    fn linear_inversion_of_quiet_identity_encoder() {
        let d = 4;
        let enc = NoisyEncoder::new(SmoothMap::identity(d).unwrap(), 1e-3, 1).unwrap();
        let prior = GaussianPrior::centered(d, 1.0).unwrap();
        let xs: Vec<Tensor> = (0..400)
            .map(|i| Tensor::try_from(prior.sample(&mut rng::stream(5, TAG_PRIOR, i))).unwrap())
            .collect();
        let pairs = encode_pairs(&enc, &xs, 0).unwrap();
        let cfg = InversionConfig {
            hidden_width: None,
            steps: 3000,
            learning_rate: 1e-2,
            batch_size: 64,
            seed: 0,
        };
        let (inv, log) = attack_learned_inversion(&enc, &pairs, &cfg).unwrap();
        let (head, tail) = log.head_tail_means(0.1).unwrap();
        assert!(tail < head);
        let r = evaluate_attack(&inv, &enc, &prior, 500, 77).unwrap();
        assert!(r.mean_mse < 1e-3, "mse {}", r.mean_mse);
    }

    #[test]
    fn untrained_inversion_respects_van_trees() {
        let d = 4;
        let tau = 0.5;
        let enc = NoisyEncoder::new(SmoothMap::identity(d).unwrap(), 0.2, 1).unwrap();
        let prior = GaussianPrior::centered(d, tau).unwrap();
        let xs: Vec<Tensor> = (0..200)
            .map(|i| Tensor::try_from(prior.sample(&mut rng::stream(6, TAG_PRIOR, i))).unwrap())
            .collect();
        let pairs = encode_pairs(&enc, &xs, 0).unwrap();
        let cfg = InversionConfig {
            steps: 0,
            ..InversionConfig::deep(d)
        };
        let (inv, _) = attack_learned_inversion(&enc, &pairs, &cfg).unwrap();
        let mut init = rng::stream(cfg.seed, TAG_INIT, 1);
        let fresh = SmoothMap::mlp(&[d, 4 * d, 4 * d, d], Activation::Tanh, &mut init).unwrap();
        assert_eq!(inv.net, fresh);
        let r = evaluate_attack(&inv, &enc, &prior, 1000, 2).unwrap();
        let dfil = 1.0 / (0.2f64 * 0.2);
        let bound = van_trees_bound(dfil, &gaussian_prior_info(tau, d).unwrap()).unwrap();
        assert!(r.mean_mse >= bound.value.as_f64());
    }
}
