//! JSON experiment configuration. Every field has a default, so `{}` is a
//! valid config that reproduces the scaled Figure-2 style sweep.

use std::path::{Path, PathBuf};

use dfil_core::attacks::{AttackKind, InversionConfig};
use dfil_core::diff::optim::OptConfig;
use dfil_core::diff::Activation;
use dfil_core::priors::ScoreConfig;
use dfil_core::splitsim::SplitExperiment;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriorSpec {
    /// `N(0, tau^2 I)`.
    Gaussian { tau: f64 },
    /// Isotropic Gaussian mixture with shared scale `tau`.
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        tau: f64,
    },
    /// Uniform over the rows of a sample file.
    Samples { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EncoderSpec {
    Identity,
    /// `k x d` matrix with `N(0, 1/k)` entries.
    RandomProjection,
    /// Randomly initialised MLP with the given hidden widths, output width `k`.
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
    },
}

fn default_activation() -> Activation {
    Activation::Tanh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RdpSpec {
    pub epsilon: f64,
    /// Per-coordinate diameters of the input domain; one entry is broadcast
    /// to all `d` coordinates.
    pub diameters: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub d: usize,
    pub k: usize,
    pub prior: PriorSpec,
    pub encoder: EncoderSpec,
    /// Grid of `1/dFIL` values.
    pub one_over_dfil: Vec<f64>,
    pub attacks: Vec<AttackKind>,
    pub trials: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub optimizer: OptConfig,
    /// Prior scale assumed by the MAP attack; taken from a Gaussian prior
    /// when absent.
    pub map_tau: Option<f64>,
    pub inversion: Option<InversionConfig>,
    pub inversion_pairs: usize,
    /// Sample file audited by `audit`.
    pub samples: Option<PathBuf>,
    /// Noise scale of the audited encoder.
    pub encoder_sigma: f64,
    pub regularity_samples: usize,
    /// Also fit a score model to the audited samples.
    pub audit_score_prior: bool,
    pub score: ScoreConfig,
    /// Samples drawn from `prior` when `score-fit` has no sample file.
    pub score_samples: usize,
    pub mixture_mc: usize,
    pub rdp: Option<RdpSpec>,
    pub splitsim: SplitExperiment,
}

/// `10^-4 .. 10^2` in half-decade steps.
pub fn default_grid() -> Vec<f64> {
    (0..13).map(|i| 10f64.powf(-4.0 + 0.5 * i as f64)).collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: "fig2".into(),
            d: 196,
            k: 2500,
            prior: PriorSpec::Gaussian { tau: 0.05 },
            encoder: EncoderSpec::RandomProjection,
            one_over_dfil: default_grid(),
            attacks: vec![AttackKind::UnbiasedLs, AttackKind::MapGaussian],
            trials: 50,
            seed: 0,
            out: None,
            optimizer: OptConfig::default(),
            map_tau: None,
            inversion: None,
            inversion_pairs: 2000,
            samples: None,
            encoder_sigma: 1.0,
            regularity_samples: 10_000,
            audit_score_prior: false,
            score: ScoreConfig::default(),
            score_samples: 2000,
            mixture_mc: 20_000,
            rdp: None,
            splitsim: SplitExperiment::default(),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub paper_scale: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: {
                let full = e.to_string();
                full.rsplit_once(" at line ").map_or(full.clone(), |(m, _)| m.to_string())
            },
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.score.seed = seed;
            self.splitsim.task.seed = seed;
            self.splitsim.train.seed = seed;
            self.splitsim.head.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if o.paper_scale {
            self.d = 784;
            self.k = 10_000;
        }
    }

    /// Input dimension implied by the config: the width of a sample-file
    /// prior when there is one, `d` otherwise.
    pub fn resolve_dims(&mut self) -> Result<()> {
        if let PriorSpec::Samples { path } = &self.prior {
            self.d = crate::io::read_samples(path)?[0].len();
        }
        if let EncoderSpec::Identity = self.encoder {
            self.k = self.d;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(CliError::Invalid(m));
        if self.d == 0 || self.k == 0 {
            return invalid("dimensions d and k must be positive".into());
        }
        if self.trials == 0 {
            return invalid("trials must be at least 1".into());
        }
        if self.one_over_dfil.is_empty() {
            return invalid("the 1/dFIL grid is empty".into());
        }
        if let Some(v) = self.one_over_dfil.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return invalid(format!("1/dFIL grid values must be positive and finite, got {v}"));
        }
        match &self.prior {
            PriorSpec::Gaussian { tau } if !(*tau > 0.0 && tau.is_finite()) => {
                return invalid(format!("prior tau must be positive, got {tau}"));
            }
            PriorSpec::Mixture { means, .. } => {
                if let Some(m) = means.iter().find(|m| m.len() != self.d) {
                    return invalid(format!("mixture mean has {} entries, expected d = {}", m.len(), self.d));
                }
            }
            PriorSpec::Samples { path } => {
                let width = crate::io::read_samples(path)?[0].len();
                if width != self.d {
                    return invalid(format!("{} has {width} columns, expected d = {}", path.display(), self.d));
                }
            }
            PriorSpec::Gaussian { .. } => {}
        }
        if let Some(path) = &self.samples {
            crate::io::read_samples(path)?;
        }
        if let Some(rdp) = &self.rdp {
            if rdp.diameters.len() != 1 && rdp.diameters.len() != self.d {
                return invalid(format!(
                    "rdp diameters must have 1 or d = {} entries, got {}",
                    self.d,
                    rdp.diameters.len()
                ));
            }
        }
        if self.encoder_sigma.is_nan() || self.encoder_sigma <= 0.0 {
            return invalid("encoder_sigma must be positive".into());
        }
        Ok(())
    }
}
