//! Prior Fisher information `trace(J(f_pi)) / d` of the input distribution.
//!
//! Closed forms cover isotropic Gaussians and Gaussian mixtures. For priors
//! known only through samples, a score network is fitted by denoising score
//! matching on the Gaussian-smoothed data and `E|score|^2 / d` is estimated on
//! held-out points.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::optim::Adam;
use crate::diff::{loss::batch_loss_gradient, Activation, SmoothMap, SquaredError};
use crate::error::{ensure_dim, invalid, Error, Result};
use crate::rng::{self, TAG_BATCH, TAG_DATA, TAG_INIT, TAG_PRIOR, TAG_SPLIT};
use crate::tensor::Tensor;

/// Smoothing below this level is reported as unreliable.
pub const LOW_SMOOTHING_CAVEAT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    AnalyticGaussian,
    AnalyticMixture,
    ScoreMatched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorFisherInfo {
    pub trace_over_d: f64,
    pub provenance: Provenance,
    /// Standard deviation of the smoothing noise; 0 when unsmoothed.
    pub smoothing_sigma: f64,
}

impl PriorFisherInfo {
    /// Whether a bound computed from this prior is exact rather than an
    /// estimate that may understate what an attacker knows.
    pub fn is_certified(&self) -> bool {
        self.provenance != Provenance::ScoreMatched
    }

    pub fn caveats(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.is_certified() {
            out.push(
                "score-matched prior information can underestimate attacker knowledge; treat the bound as advisory"
                    .to_string(),
            );
            if self.smoothing_sigma < LOW_SMOOTHING_CAVEAT {
                out.push(format!(
                    "smoothing {} is below {LOW_SMOOTHING_CAVEAT}; score estimates are known to be unstable there",
                    self.smoothing_sigma
                ));
            }
        }
        out
    }
}

/// `N(0, tau^2 I)` prior: `1 / tau^2`.
pub fn gaussian_prior_info(tau: f64, d: usize) -> Result<PriorFisherInfo> {
    smoothed_gaussian_prior_info(tau, 0.0, d)
}

/// Prior information of `N(0, tau^2 I)` convolved with `N(0, s^2 I)`:
/// `1 / (tau^2 + s^2)`.
pub fn smoothed_gaussian_prior_info(tau: f64, smoothing: f64, d: usize) -> Result<PriorFisherInfo> {
    if !(tau > 0.0) || tau.is_nan() {
        return Err(invalid(format!("prior scale must be positive, got {tau}")));
    }
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(invalid(format!("smoothing must be non-negative, got {smoothing}")));
    }
    if d == 0 {
        return Err(invalid("dimension must be positive"));
    }
    Ok(PriorFisherInfo {
        trace_over_d: 1.0 / (tau * tau + smoothing * smoothing),
        provenance: Provenance::AnalyticGaussian,
        smoothing_sigma: smoothing,
    })
}

/// Mixture of isotropic Gaussians sharing the variance `tau^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    tau: f64,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, tau: f64) -> Result<Self> {
        if weights.is_empty() {
            return Err(invalid("mixture has no components"));
        }
        if weights.len() != means.len() {
            return Err(Error::Dimension {
                context: "mixture means",
                expected: weights.len(),
                got: means.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid("mixture weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("mixture weights sum to {total}, not 1")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(invalid(format!("component scale must be positive, got {tau}")));
        }
        let d = means[0].len();
        for m in &means {
            ensure_dim("mixture mean", d, m.len())?;
        }
        Ok(Self { weights, means, tau })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    fn log_responsibilities(&self, x: &DVector<f64>) -> Vec<f64> {
        let s2 = self.tau * self.tau;
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| {
                if *w == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    w.ln() - (x - m).norm_squared() / (2.0 * s2)
                }
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logs.iter().map(|l| l - norm).collect()
    }

    /// `∇ log f(x) = -sum_i r_i(x) (x - mu_i) / tau^2`.
    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        let s2 = self.tau * self.tau;
        let mut out = DVector::zeros(x.len());
        for (lr, m) in self.log_responsibilities(x).into_iter().zip(&self.means) {
            let r = lr.exp();
            if r > 0.0 {
                out -= (x - m) * (r / s2);
            }
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        let d = self.dim();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)));
        &self.means[pick] + z * self.tau
    }
}

/// Monte Carlo `E|∇ log f|^2 / d` under the mixture itself.
pub fn mixture_prior_info(mixture: &GaussianMixture, n_mc: usize, seed: u64) -> Result<PriorFisherInfo> {
    if n_mc == 0 {
        return Err(invalid("mixture prior information needs at least one draw"));
    }
    let mut r = rng::stream(seed, TAG_PRIOR, 0);
    let total: f64 = (0..n_mc)
        .map(|_| mixture.score(&mixture.sample(&mut r)).norm_squared())
        .sum();
    Ok(PriorFisherInfo {
        trace_over_d: total / (n_mc as f64 * mixture.dim() as f64),
        provenance: Provenance::AnalyticMixture,
        smoothing_sigma: 0.0,
    })
}

/// Adds independent `N(0, sigma^2 I)` noise to every sample.
pub fn smooth_samples(data: &[Tensor], smoothing_sigma: f64, seed: u64) -> Result<Vec<Tensor>> {
    if !(smoothing_sigma >= 0.0 && smoothing_sigma.is_finite()) {
        return Err(invalid(format!("smoothing must be non-negative, got {smoothing_sigma}")));
    }
    if smoothing_sigma == 0.0 {
        return Ok(data.to_vec());
    }
    data.iter()
        .enumerate()
        .map(|(i, x)| {
            let mut r = rng::stream(seed, TAG_DATA, i as u64);
            let noisy = x.to_dvector() + rng::standard_normal(&mut r, x.len()) * smoothing_sigma;
            Tensor::new(x.shape().to_vec(), noisy.data.into())
        })
        .collect()
}

/// Score-matching hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub smoothing_sigma: f64,
    /// Hidden width; `4 d` when absent.
    pub hidden_width: Option<usize>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            learning_rate: 2e-3,
            batch_size: 128,
            seed: 0,
            smoothing_sigma: 0.25,
            hidden_width: None,
        }
    }
}

/// A network estimating `∇ log` of the smoothed data density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub net: SmoothMap,
    pub config: ScoreConfig,
    pub smoothing_sigma: f64,
}

impl ScoreModel {
    /// Wraps an existing score function (network or closed form).
    pub fn from_net(net: SmoothMap, smoothing_sigma: f64) -> Result<Self> {
        ensure_dim("score network output", net.input_dim(), net.output_dim())?;
        Ok(Self {
            net,
            config: ScoreConfig {
                smoothing_sigma,
                ..ScoreConfig::default()
            },
            smoothing_sigma,
        })
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        self.net.evaluate(x)
    }
}

/// Per-step training losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub losses: Vec<f64>,
}

impl TrainingLog {
    /// Mean loss over the first and last `fraction` of steps.
    pub fn head_tail_means(&self, fraction: f64) -> Option<(f64, f64)> {
        let n = ((self.losses.len() as f64 * fraction).ceil() as usize).max(1);
        if self.losses.len() < 2 * n {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..n]), mean(&self.losses[self.losses.len() - n..])))
    }
}

pub(crate) fn stack(data: &[Tensor]) -> Result<Vec<DVector<f64>>> {
    let d = data.first().ok_or_else(|| invalid("empty sample set"))?.len();
    data.iter()
        .map(|x| {
            ensure_dim("sample width", d, x.len())?;
            Ok(x.to_dvector())
        })
        .collect()
}

/// Fits a score network by denoising score matching: for `x~ = x + s z`,
/// regress `net(x~)` onto `-z / s`, whose minimiser is the score of the
/// smoothed density.
pub fn fit_score_model(data: &[Tensor], config: &ScoreConfig) -> Result<(ScoreModel, TrainingLog)> {
    if data.len() < 2 {
        return Err(invalid("score matching needs at least two samples"));
    }
    let s = config.smoothing_sigma;
    if !(s > 0.0 && s.is_finite()) {
        return Err(invalid(format!("score matching needs positive smoothing, got {s}")));
    }
    if config.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let xs = stack(data)?;
    let d = xs[0].len();
    let width = config.hidden_width.unwrap_or(4 * d);
    let mut init = rng::stream(config.seed, TAG_INIT, 0);
    let mut net = SmoothMap::mlp(&[d, width, width, d], Activation::Tanh, &mut init)?;

    let mut params = net.params_flat();
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let mut log = TrainingLog::default();
    let mut r = rng::stream(config.seed, TAG_BATCH, 0);
    for step in 0..config.steps {
        let (inputs, targets) = dsm_batch(&xs, config.batch_size, s, &mut r);
        let g = batch_loss_gradient(&net, &SquaredError { targets: &targets }, &inputs)
            .map_err(|e| Error::Training(format!("step {step}: {e}")))?;
        log.losses.push(g.value);
        // Linear decay to a tenth of the initial rate.
        adam.set_lr(config.learning_rate * (1.0 - 0.9 * step as f64 / config.steps as f64));
        adam.step(&mut params, &g.flat);
        net.set_params_flat(&params)
            .map_err(|e| Error::Training(format!("step {step}: {e}")))?;
    }
    Ok((
        ScoreModel {
            net,
            config: config.clone(),
            smoothing_sigma: s,
        },
        log,
    ))
}

fn dsm_batch(
    xs: &[DVector<f64>],
    batch: usize,
    s: f64,
    r: &mut ChaCha8Rng,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let d = xs[0].len();
    let mut inputs = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    for _ in 0..batch {
        let x = &xs[r.random_range(0..xs.len())];
        let z = rng::standard_normal(r, d);
        inputs.push(x + &z * s);
        targets.push(z / -s);
    }
    (inputs, targets)
}

/// `mean |net(x)|^2 / d` over held-out points, which should already carry the
/// model's smoothing noise.
pub fn estimated_prior_info(model: &ScoreModel, heldout: &[Tensor]) -> Result<PriorFisherInfo> {
    if heldout.is_empty() {
        return Err(invalid("held-out set is empty"));
    }
    let xs = stack(heldout)?;
    ensure_dim("held-out width", model.dim(), xs[0].len())?;
    let scores = model.net.eval_many(&xs)?;
    let total: f64 = scores.iter().map(DVector::norm_squared).sum();
    Ok(PriorFisherInfo {
        trace_over_d: total / (xs.len() * model.dim()) as f64,
        provenance: Provenance::ScoreMatched,
        smoothing_sigma: model.smoothing_sigma,
    })
}

/// Result of [`fit_and_estimate`].
#[derive(Debug, Clone)]
pub struct ScoreEstimate {
    pub model: ScoreModel,
    pub log: TrainingLog,
    pub info: PriorFisherInfo,
    /// Smoothed held-out points the estimate was computed on.
    pub heldout: Vec<Tensor>,
}

/// Seeded 80/20 split, fit on the larger part, estimate on the smoothed rest.
pub fn fit_and_estimate(data: &[Tensor], config: &ScoreConfig) -> Result<ScoreEstimate> {
    if data.len() < 5 {
        return Err(invalid("need at least five samples for a train/held-out split"));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng::stream(config.seed, TAG_SPLIT, 0));
    let cut = data.len() * 4 / 5;
    let train: Vec<Tensor> = idx[..cut].iter().map(|&i| data[i].clone()).collect();
    let rest: Vec<Tensor> = idx[cut..].iter().map(|&i| data[i].clone()).collect();
    let (model, log) = fit_score_model(&train, config)?;
    let heldout = smooth_samples(&rest, config.smoothing_sigma, config.seed ^ 0x4845_4c44)?;
    let info = estimated_prior_info(&model, &heldout)?;
    Ok(ScoreEstimate {
        model,
        log,
        info,
        heldout,
    })
}

/// Closed-form score network `x -> -x / v` for `N(0, v I)`.
pub fn gaussian_score_net(d: usize, variance: f64) -> Result<SmoothMap> {
    SmoothMap::affine(DMatrix::identity(d, d) * (-1.0 / variance), None)
}
