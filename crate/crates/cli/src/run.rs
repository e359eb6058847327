//! Experiment runners behind each subcommand.

use dfil_core::attacks::{
    attack_learned_inversion, encode_pairs, evaluate_attack, mean_and_stderr, Attack, AttackKind, EmpiricalPrior,
    GaussianPrior, InversionConfig, MapGaussianAttack, PriorMeanAttack, PriorSampler, UnbiasedAttack,
};
use dfil_core::bounds::{cramer_rao_from_dfil, rdp_bound, van_trees_bound, BoundReport};
use dfil_core::diff::SmoothMap;
use dfil_core::encoders::{calibrate_sigma_population, jacobian_trace, random_projection, NoisyEncoder};
use dfil_core::priors::{
    fit_and_estimate, gaussian_prior_info, mixture_prior_info, smoothed_gaussian_prior_info, GaussianMixture,
    PriorFisherInfo,
};
use dfil_core::rng::{derive_seed, stream};
use dfil_core::splitsim::{run_split_experiment, MetricRow};
use dfil_core::{DVector, Execution, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{EncoderSpec, ExperimentConfig, PriorSpec};
use crate::error::{CliError, Result};
use crate::io::read_samples;

// Stream purposes for draws made by the runners.
const STREAM_GRID: u64 = 0x4752_4944;
const STREAM_CAL: u64 = 0x4341_4c42;
const STREAM_TRAIN: u64 = 0x5452_4e53;
const STREAM_SCORE: u64 = 0x5343_5253;

/// Number of prior draws used to calibrate sigma on the population.
const CALIBRATION_DRAWS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2Row {
    pub one_over_dfil: f64,
    pub sigma: f64,
    pub bound_ub: f64,
    pub bound_ours: f64,
    pub mse_attack_ub: f64,
    pub stderr_ub: f64,
    pub mse_attack_b: f64,
    pub stderr_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub attack_kind: AttackKind,
    pub one_over_dfil: f64,
    pub mean_mse: f64,
    pub stderr: f64,
    pub n_trials: usize,
}

fn check_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numeric(format!("{what} contains non-finite values")));
    }
    Ok(())
}

pub fn build_encoder(cfg: &ExperimentConfig) -> Result<SmoothMap> {
    Ok(match &cfg.encoder {
        EncoderSpec::Identity => SmoothMap::identity(cfg.d)?,
        EncoderSpec::RandomProjection => random_projection(cfg.k, cfg.d, cfg.seed)?,
        EncoderSpec::Mlp { hidden, activation } => {
            let mut sizes = vec![cfg.d];
            sizes.extend(hidden);
            sizes.push(cfg.k);
            SmoothMap::mlp(&sizes, *activation, &mut stream(cfg.seed, STREAM_TRAIN, 0))?
        }
    })
}

/// A prior to sample from, its mean, and its exact Fisher information when
/// one is available in closed form or by Monte Carlo.
pub struct PriorModel {
    pub sampler: Box<dyn PriorSampler>,
    pub mean: DVector<f64>,
    pub info: Option<PriorFisherInfo>,
    pub gaussian_tau: Option<f64>,
}

pub fn build_prior(cfg: &ExperimentConfig) -> Result<PriorModel> {
    Ok(match &cfg.prior {
        PriorSpec::Gaussian { tau } => PriorModel {
            sampler: Box::new(GaussianPrior::centered(cfg.d, *tau)?),
            mean: DVector::zeros(cfg.d),
            info: Some(gaussian_prior_info(*tau, cfg.d)?),
            gaussian_tau: Some(*tau),
        },
        PriorSpec::Mixture { weights, means, tau } => {
            let means: Vec<DVector<f64>> = means.iter().map(|m| DVector::from_column_slice(m)).collect();
            let total: f64 = weights.iter().sum();
            let mean = weights
                .iter()
                .zip(&means)
                .fold(DVector::zeros(cfg.d), |acc, (w, m)| acc + m * (*w / total));
            let mixture = GaussianMixture::new(weights.clone(), means, *tau)?;
            let info = mixture_prior_info(&mixture, cfg.mixture_mc, cfg.seed)?;
            PriorModel {
                sampler: Box::new(mixture),
                mean,
                info: Some(info),
                gaussian_tau: None,
            }
        }
        PriorSpec::Samples { path } => {
            let prior = EmpiricalPrior::new(&read_samples(path)?)?;
            PriorModel {
                mean: prior.mean(),
                sampler: Box::new(prior),
                info: None,
                gaussian_tau: None,
            }
        }
    })
}

fn draw(prior: &dyn PriorSampler, seed: u64, purpose: u64, n: usize) -> Result<Vec<Tensor>> {
    (0..n)
        .map(|i| Ok(Tensor::try_from(prior.sample(&mut stream(seed, purpose, i as u64)))?))
        .collect()
}

/// Reproduces the bound-versus-attack sweep on a Gaussian prior and a random
/// projection encoder.
pub fn run_fig2(cfg: &ExperimentConfig) -> Result<Vec<Fig2Row>> {
    let PriorSpec::Gaussian { tau } = cfg.prior else {
        return Err(CliError::Invalid("fig2 needs a gaussian prior".into()));
    };
    if cfg.encoder != EncoderSpec::RandomProjection {
        return Err(CliError::Invalid("fig2 needs a random-projection encoder".into()));
    }
    let base = random_projection(cfg.k, cfg.d, cfg.seed)?;
    // Affine encoder: the Jacobian and hence trace(J^T J) are constant.
    let trace = jacobian_trace(&base, &DVector::zeros(cfg.d))?;
    let prior = GaussianPrior::centered(cfg.d, tau)?;
    let prior_info = gaussian_prior_info(tau, cfg.d)?;
    let ub = UnbiasedAttack {
        opt: cfg.optimizer,
        init: None,
    };
    let map = MapGaussianAttack::new(tau, cfg.optimizer)?;
    let mut rows = Vec::with_capacity(cfg.one_over_dfil.len());
    for (i, &inv) in cfg.one_over_dfil.iter().enumerate() {
        let dfil = 1.0 / inv;
        let sigma = (trace / (cfg.d as f64 * dfil)).sqrt();
        let enc = NoisyEncoder::new(base.clone(), sigma, cfg.seed)?;
        // Both attacks see the same inputs and noise.
        let seed = derive_seed(cfg.seed, STREAM_GRID, i as u64);
        let a = evaluate_attack(&ub, &enc, &prior, cfg.trials, seed)?;
        let b = evaluate_attack(&map, &enc, &prior, cfg.trials, seed)?;
        let row = Fig2Row {
            one_over_dfil: inv,
            sigma,
            bound_ub: cramer_rao_from_dfil(dfil)?.value.as_f64(),
            bound_ours: van_trees_bound(dfil, &prior_info)?.value.as_f64(),
            mse_attack_ub: a.mean_mse,
            stderr_ub: a.std_error,
            mse_attack_b: b.mean_mse,
            stderr_b: b.std_error,
        };
        check_finite(
            "fig2 row",
            [row.sigma, row.bound_ub, row.bound_ours, row.mse_attack_ub, row.mse_attack_b],
        )?;
        rows.push(row);
    }
    Ok(rows)
}

/// Mean MSE of every configured attack across the grid.
pub fn run_attack(cfg: &ExperimentConfig) -> Result<Vec<AttackRow>> {
    let base = build_encoder(cfg)?;
    let prior = build_prior(cfg)?;
    let calibration = draw(prior.sampler.as_ref(), cfg.seed, STREAM_CAL, CALIBRATION_DRAWS)?;
    let mut rows = Vec::new();
    for (i, &inv) in cfg.one_over_dfil.iter().enumerate() {
        let sigma = calibrate_sigma_population(&base, &calibration, 1.0 / inv, Execution::default())?;
        let enc = NoisyEncoder::new(base.clone(), sigma, cfg.seed)?;
        let seed = derive_seed(cfg.seed, STREAM_GRID, i as u64);
        for &kind in &cfg.attacks {
            let attack: Box<dyn Attack> = match kind {
                AttackKind::UnbiasedLs => Box::new(UnbiasedAttack {
                    opt: cfg.optimizer,
                    init: None,
                }),
                AttackKind::MapGaussian => {
                    let tau = cfg.map_tau.or(prior.gaussian_tau).ok_or_else(|| {
                        CliError::Invalid("map-gaussian needs `map_tau` unless the prior is gaussian".into())
                    })?;
                    Box::new(MapGaussianAttack::new(tau, cfg.optimizer)?)
                }
                AttackKind::PriorMean => Box::new(PriorMeanAttack {
                    mean: prior.mean.clone(),
                }),
                AttackKind::LearnedInversion => {
                    let xs = draw(prior.sampler.as_ref(), seed, STREAM_TRAIN, cfg.inversion_pairs)?;
                    let pairs = encode_pairs(&enc, &xs, derive_seed(seed, STREAM_TRAIN, 1))?;
                    let net_cfg = cfg.inversion.clone().unwrap_or_else(|| InversionConfig {
                        seed: cfg.seed,
                        ..InversionConfig::deep(cfg.d)
                    });
                    Box::new(attack_learned_inversion(&enc, &pairs, &net_cfg)?.0)
                }
            };
            let report = evaluate_attack(attack.as_ref(), &enc, prior.sampler.as_ref(), cfg.trials, seed)?;
            check_finite("attack report", [report.mean_mse, report.std_error])?;
            rows.push(AttackRow {
                attack_kind: kind,
                one_over_dfil: inv,
                mean_mse: report.mean_mse,
                stderr: report.std_error,
                n_trials: report.n_trials,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSummary {
    #[serde(flatten)]
    pub info: PriorFisherInfo,
    pub certified: bool,
    pub caveats: Vec<String>,
}

impl From<PriorFisherInfo> for PriorSummary {
    fn from(info: PriorFisherInfo) -> Self {
        Self {
            certified: info.is_certified(),
            caveats: info.caveats(),
            info,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub one_over_dfil: f64,
    pub cramer_rao: BoundReport,
    pub van_trees: Option<BoundReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTable {
    pub d: usize,
    pub prior: Option<PriorSummary>,
    pub rows: Vec<BoundRow>,
    pub rdp: Option<BoundReport>,
}

fn prior_info_for_bounds(cfg: &ExperimentConfig) -> Result<Option<PriorFisherInfo>> {
    if let PriorSpec::Samples { path } = &cfg.prior {
        return Ok(Some(fit_and_estimate(&read_samples(path)?, &cfg.score)?.info));
    }
    Ok(build_prior(cfg)?.info)
}

pub fn run_bound(cfg: &ExperimentConfig) -> Result<BoundTable> {
    let info = prior_info_for_bounds(cfg)?;
    let rows = cfg
        .one_over_dfil
        .iter()
        .map(|&inv| {
            Ok(BoundRow {
                one_over_dfil: inv,
                cramer_rao: cramer_rao_from_dfil(1.0 / inv)?,
                van_trees: info.as_ref().map(|p| van_trees_bound(1.0 / inv, p)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rdp = cfg
        .rdp
        .as_ref()
        .map(|r| {
            let diameters = if r.diameters.len() == 1 {
                vec![r.diameters[0]; cfg.d]
            } else {
                r.diameters.clone()
            };
            rdp_bound(r.epsilon, &diameters)
        })
        .transpose()?;
    Ok(BoundTable {
        d: cfg.d,
        prior: info.map(PriorSummary::from),
        rows,
        rdp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfilSummary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub target_dfil: f64,
    pub sigma: f64,
    pub cramer_rao: BoundReport,
    pub van_trees: Vec<BoundReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularitySummary {
    pub n_samples: usize,
    pub mean_score: Vec<f64>,
    pub max_abs_z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub d: usize,
    pub k: usize,
    pub n_samples: usize,
    pub encoder_sigma: f64,
    pub seed: u64,
    pub dfil: DfilSummary,
    pub mean_jacobian_trace: f64,
    pub calibration: Vec<Calibration>,
    pub regularity: RegularitySummary,
    pub priors: Vec<PriorSummary>,
}

/// Audits an encoder on a sample file. `targets` are dFIL values; the
/// reciprocal of the config grid is used when it is empty.
pub fn run_audit(cfg: &ExperimentConfig, targets: &[f64]) -> Result<AuditReport> {
    let path = cfg
        .samples
        .as_ref()
        .ok_or_else(|| CliError::Invalid("audit needs a sample file (`samples` or --samples)".into()))?;
    let xs = read_samples(path)?;
    let mut cfg = cfg.clone();
    cfg.d = xs[0].len();
    if cfg.encoder == EncoderSpec::Identity {
        cfg.k = cfg.d;
    }
    let base = build_encoder(&cfg)?;
    let enc = NoisyEncoder::new(base.clone(), cfg.encoder_sigma, cfg.seed)?;
    let population = enc.population_fisher(&xs, Execution::default())?;
    let regularity = enc.check_regularity(&xs[0], cfg.regularity_samples)?;

    let mut priors = Vec::new();
    if !matches!(cfg.prior, PriorSpec::Samples { .. }) {
        let model = build_prior(&cfg).map_err(|e| CliError::Invalid(format!("prior does not fit the samples: {e}")))?;
        priors.extend(model.info);
    }
    if cfg.audit_score_prior {
        priors.push(fit_and_estimate(&xs, &cfg.score)?.info);
    }

    let targets: Vec<f64> = if targets.is_empty() {
        cfg.one_over_dfil.iter().map(|v| 1.0 / v).collect()
    } else {
        targets.to_vec()
    };
    let calibration = targets
        .iter()
        .map(|&t| {
            Ok(Calibration {
                target_dfil: t,
                sigma: calibrate_sigma_population(&base, &xs, t, Execution::default())?,
                cramer_rao: cramer_rao_from_dfil(t)?,
                van_trees: priors.iter().map(|p| van_trees_bound(t, p)).collect::<dfil_core::Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    check_finite("per-sample dFIL", population.per_sample_dfil.iter().copied())?;
    Ok(AuditReport {
        d: cfg.d,
        k: base.output_dim(),
        n_samples: xs.len(),
        encoder_sigma: cfg.encoder_sigma,
        seed: cfg.seed,
        dfil: DfilSummary {
            min: population.min_dfil,
            mean: population.mean_dfil,
            max: population.max_dfil,
        },
        mean_jacobian_trace: population.mean_jacobian_trace,
        calibration,
        regularity: RegularitySummary {
            n_samples: regularity.n_samples,
            max_abs_z: regularity.max_abs_z(),
            mean_score: regularity.mean_score,
        },
        priors: priors.into_iter().map(PriorSummary::from).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFitReport {
    pub d: usize,
    pub n_samples: usize,
    pub estimate: PriorSummary,
    /// Closed-form smoothed information when the prior is Gaussian.
    pub analytic_trace_over_d: Option<f64>,
    pub relative_error: Option<f64>,
    /// Mean cosine between learned and analytic scores on held-out points.
    pub mean_cosine: Option<f64>,
    pub loss_first_decile: Option<f64>,
    pub loss_last_decile: Option<f64>,
}

pub fn run_score_fit(cfg: &ExperimentConfig) -> Result<ScoreFitReport> {
    let samples = match (&cfg.samples, &cfg.prior) {
        (Some(path), _) | (None, PriorSpec::Samples { path }) => read_samples(path)?,
        _ => draw(build_prior(cfg)?.sampler.as_ref(), cfg.seed, STREAM_SCORE, cfg.score_samples)?,
    };
    let d = samples[0].len();
    let est = fit_and_estimate(&samples, &cfg.score)?;
    let (analytic, cosine) = match (&cfg.prior, &cfg.samples) {
        (PriorSpec::Gaussian { tau }, None) => {
            let s = est.model.smoothing_sigma;
            let exact = smoothed_gaussian_prior_info(*tau, s, d)?.trace_over_d;
            let variance = tau * tau + s * s;
            let cosines = est
                .heldout
                .iter()
                .map(|x| {
                    let learned = est.model.score(x)?.to_dvector();
                    let truth = x.to_dvector() / -variance;
                    Ok(learned.dot(&truth) / (learned.norm() * truth.norm()).max(1e-300))
                })
                .collect::<Result<Vec<f64>>>()?;
            (Some(exact), Some(mean_and_stderr(&cosines).0))
        }
        _ => (None, None),
    };
    let losses = est.log.head_tail_means(0.1);
    Ok(ScoreFitReport {
        d,
        n_samples: samples.len(),
        relative_error: analytic.map(|a| (est.info.trace_over_d - a).abs() / a),
        analytic_trace_over_d: analytic,
        mean_cosine: cosine,
        estimate: est.info.into(),
        loss_first_decile: losses.map(|l| l.0),
        loss_last_decile: losses.map(|l| l.1),
    })
}

pub fn run_splitsim(cfg: &ExperimentConfig) -> Result<Vec<MetricRow>> {
    let rows = run_split_experiment(&cfg.splitsim)?;
    check_finite("splitsim metrics", rows.iter().flat_map(|r| [r.accuracy, r.mean_snr_reg]))?;
    Ok(rows)
}
