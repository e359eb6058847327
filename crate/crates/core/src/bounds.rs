//! Lower bounds on the reconstruction MSE `E|x_hat - x|^2 / d`.
//!
//! * Cramér-Rao: unbiased attacks, `1 / dFIL`.
//! * van Trees: any attack, `1 / (E[dFIL] + trace(J(f_pi)) / d)`.
//! * RDP: unbiased attacks against a `(2, eps)`-RDP encoder,
//!   `(sum_i diam_i^2 / 4d) / (e^eps - 1)`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::diff::{Layer, SmoothMap};
use crate::encoders::{FisherReport, NoisyEncoder};
use crate::error::{invalid, Result};
use crate::priors::PriorFisherInfo;
use crate::rng::{self, TAG_NOISE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    CramerRao,
    VanTrees,
    Rdp,
}

/// A bound value; `Unbounded` when no information leaks at all.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundValue {
    Finite(f64),
    Unbounded,
}

impl BoundValue {
    /// The value as a float, `+inf` when unbounded.
    pub fn as_f64(self) -> f64 {
        match self {
            BoundValue::Finite(v) => v,
            BoundValue::Unbounded => f64::INFINITY,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            BoundValue::Finite(v) => Some(v),
            BoundValue::Unbounded => None,
        }
    }
}

/// Quantities a bound was computed from, echoed for reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_dfil: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_trace_over_d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diameters: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub kind: BoundKind,
    pub value: BoundValue,
    pub inputs: BoundInputs,
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be finite and non-negative, got {v}")))
    }
}

/// `1 / dFIL` from a Fisher report.
pub fn cramer_rao_bound(report: &FisherReport) -> Result<BoundReport> {
    let mut r = cramer_rao_from_dfil(report.dfil)?;
    r.inputs.d = Some(report.d);
    Ok(r)
}

pub fn cramer_rao_from_dfil(dfil: f64) -> Result<BoundReport> {
    check_nonneg("dFIL", dfil)?;
    let value = if dfil == 0.0 {
        BoundValue::Unbounded
    } else {
        BoundValue::Finite(1.0 / dfil)
    };
    Ok(BoundReport {
        kind: BoundKind::CramerRao,
        value,
        inputs: BoundInputs {
            mean_dfil: Some(dfil),
            ..Default::default()
        },
    })
}

/// `1 / (mean_dfil + prior.trace_over_d)`.
pub fn van_trees_bound(mean_dfil: f64, prior: &PriorFisherInfo) -> Result<BoundReport> {
    check_nonneg("mean dFIL", mean_dfil)?;
    check_nonneg("prior Fisher information", prior.trace_over_d)?;
    let total = mean_dfil + prior.trace_over_d;
    let value = if total == 0.0 {
        BoundValue::Unbounded
    } else {
        BoundValue::Finite(1.0 / total)
    };
    Ok(BoundReport {
        kind: BoundKind::VanTrees,
        value,
        inputs: BoundInputs {
            mean_dfil: Some(mean_dfil),
            prior_trace_over_d: Some(prior.trace_over_d),
            ..Default::default()
        },
    })
}

/// MSE bound for a `(2, epsilon)`-RDP encoder over a box with the given
/// per-coordinate diameters.
pub fn rdp_bound(epsilon: f64, diameters: &[f64]) -> Result<BoundReport> {
    if !(epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if diameters.is_empty() {
        return Err(invalid("diameters must cover at least one coordinate"));
    }
    for &diam in diameters {
        check_nonneg("diameter", diam)?;
    }
    let d = diameters.len() as f64;
    let spread = diameters.iter().map(|v| v * v).sum::<f64>() / (4.0 * d);
    Ok(BoundReport {
        kind: BoundKind::Rdp,
        value: BoundValue::Finite(spread / epsilon.exp_m1()),
        inputs: BoundInputs {
            d: Some(diameters.len()),
            epsilon: Some(epsilon),
            diameters: Some(diameters.to_vec()),
            ..Default::default()
        },
    })
}

/// How the noise scale of the RDP encoder is derived from the clip norm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RdpCalibration {
    /// Gaussian mechanism with sensitivity `2C`: `D_2 = (2C)^2 / sigma^2 = eps`,
    /// so `sigma = 2C / sqrt(eps)`.
    #[default]
    GaussianMechanism,
    /// `sigma = (2C)^2 / eps`. Does not reach `(2, eps)`-RDP in general; kept
    /// for comparison.
    SquaredSensitivity,
}

pub fn rdp_sigma(clip: f64, epsilon: f64, calibration: RdpCalibration) -> Result<f64> {
    if !(clip > 0.0 && clip.is_finite()) {
        return Err(invalid(format!("clip norm must be positive, got {clip}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("epsilon must be positive and finite, got {epsilon}")));
    }
    let sensitivity = 2.0 * clip;
    Ok(match calibration {
        RdpCalibration::GaussianMechanism => sensitivity / epsilon.sqrt(),
        RdpCalibration::SquaredSensitivity => sensitivity * sensitivity / epsilon,
    })
}

/// Clips `base` to norm `clip` and adds Gaussian noise calibrated for
/// `(2, epsilon)`-RDP. Any two outputs differ by at most `2 * clip`.
pub fn rdp_encoder(
    base: &SmoothMap,
    clip: f64,
    epsilon: f64,
    calibration: RdpCalibration,
    seed: u64,
) -> Result<NoisyEncoder> {
    let sigma = rdp_sigma(clip, epsilon, calibration)?;
    let clipped = base.clone().push(Layer::scale_clip(clip)?)?;
    NoisyEncoder::new(clipped, sigma, seed)
}

/// Closed-form Rényi divergence of order `alpha` between `N(mu1, s^2 I)` and
/// `N(mu2, s^2 I)`: `alpha |mu1 - mu2|^2 / (2 s^2)`.
pub fn gaussian_renyi_divergence(alpha: f64, mu1: &DVector<f64>, mu2: &DVector<f64>, sigma: f64) -> f64 {
    alpha * (mu1 - mu2).norm_squared() / (2.0 * sigma * sigma)
}

/// Monte Carlo estimate of `D_2(P || Q) = log E_Q[(P/Q)^2]` for
/// `P = N(mu1, s^2 I)`, `Q = N(mu2, s^2 I)`, with its standard error on the
/// log scale (delta method).
pub fn monte_carlo_renyi2(
    mu1: &DVector<f64>,
    mu2: &DVector<f64>,
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(invalid("Monte Carlo divergence needs at least two draws"));
    }
    let s2 = sigma * sigma;
    let mut r = rng::stream(seed, TAG_NOISE ^ 0x2d2, 0);
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n {
        let y = mu2 + rng::standard_normal(&mut r, mu2.len()) * sigma;
        let log_ratio = ((&y - mu2).norm_squared() - (&y - mu1).norm_squared()) / (2.0 * s2);
        let w = (2.0 * log_ratio).exp();
        sum += w;
        sq += w * w;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sq - nf * mean * mean) / (nf - 1.0);
    Ok((mean.ln(), (var.max(0.0) / nf).sqrt() / mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{gaussian_prior_info, Provenance};
    use crate::tensor::Tensor;

    fn prior(v: f64) -> PriorFisherInfo {
        PriorFisherInfo {
            trace_over_d: v,
            provenance: Provenance::AnalyticGaussian,
            smoothing_sigma: 0.0,
        }
    }

    #[test]
    fn cramer_rao_examples() {
        assert_eq!(cramer_rao_from_dfil(4.0).unwrap().value, BoundValue::Finite(0.25));
        assert_eq!(cramer_rao_from_dfil(0.01).unwrap().value.as_f64(), 100.0);
        assert_eq!(cramer_rao_from_dfil(0.0).unwrap().value, BoundValue::Unbounded);
        assert!(cramer_rao_from_dfil(-1.0).is_err());

        let enc = NoisyEncoder::new(SmoothMap::identity(784).unwrap(), 10.0, 0).unwrap();
        let report = enc.fisher_report(&Tensor::zeros(vec![784]).unwrap()).unwrap();
        let b = cramer_rao_bound(&report).unwrap();
        assert!((b.value.as_f64() - 100.0).abs() < 1e-10);
        assert_eq!(b.inputs.d, Some(784));
    }

    #[test]
    fn van_trees_examples() {
        let p = gaussian_prior_info(0.05, 784).unwrap();
        let b = van_trees_bound(0.0, &p).unwrap().value.as_f64();
        assert!((b - 0.0025).abs() < 1e-15);
        let b = van_trees_bound(4.0, &prior(400.0)).unwrap().value.as_f64();
        assert!((b - 1.0 / 404.0).abs() < 1e-15);
        assert!((b - 2.475e-3).abs() < 1e-6);
        let b = van_trees_bound(4.0, &prior(0.0)).unwrap();
        assert_eq!(b.value, cramer_rao_from_dfil(4.0).unwrap().value);
        assert_eq!(van_trees_bound(0.0, &prior(0.0)).unwrap().value, BoundValue::Unbounded);
        assert!(van_trees_bound(-1.0, &prior(1.0)).is_err());
    }

    #[test]
    fn van_trees_is_monotone_and_below_both_terms() {
        let dfils = [0.0, 1e-3, 0.5, 4.0, 100.0];
        let priors = [0.0, 0.1, 400.0];
        for &a in &dfils {
            for &p in &priors {
                let Some(v) = van_trees_bound(a, &prior(p)).unwrap().value.finite() else {
                    continue;
                };
                assert!(v <= 1.0 / a && v <= 1.0 / p);
                let more_dfil = van_trees_bound(a + 1.0, &prior(p)).unwrap().value.as_f64();
                let more_prior = van_trees_bound(a, &prior(p + 1.0)).unwrap().value.as_f64();
                assert!(more_dfil < v && more_prior < v);
                if a > 0.0 {
                    assert!(v <= cramer_rao_from_dfil(a).unwrap().value.as_f64());
                }
            }
        }
    }

    #[test]
    fn rdp_bound_examples() {
        let v = rdp_bound(2f64.ln(), &[1.0; 10]).unwrap().value.as_f64();
        assert!((v - 0.25).abs() < 1e-12);
        assert_eq!(rdp_bound(f64::INFINITY, &[1.0; 3]).unwrap().value.as_f64(), 0.0);
        let a = rdp_bound(0.7, &[1.0; 3]).unwrap().value.as_f64();
        let b = rdp_bound(0.7, &[1.0; 300]).unwrap().value.as_f64();
        assert!((a - b).abs() < 1e-15);
        assert!(rdp_bound(0.0, &[1.0]).is_err());
        assert!(rdp_bound(-1.0, &[1.0]).is_err());
        assert!(rdp_bound(1.0, &[-1.0]).is_err());
    }

    #[test]
    fn rdp_sigma_variants() {
        assert!((rdp_sigma(1.0, 4.0, RdpCalibration::GaussianMechanism).unwrap() - 1.0).abs() < 1e-15);
        assert!((rdp_sigma(1.0, 4.0, RdpCalibration::SquaredSensitivity).unwrap() - 1.0).abs() < 1e-15);
        assert!((rdp_sigma(0.5, 0.25, RdpCalibration::GaussianMechanism).unwrap() - 2.0).abs() < 1e-15);
        assert!((rdp_sigma(0.5, 0.25, RdpCalibration::SquaredSensitivity).unwrap() - 4.0).abs() < 1e-15);
        assert!(rdp_sigma(0.0, 1.0, RdpCalibration::GaussianMechanism).is_err());
    }

    #[test]
    fn bound_report_serialises_unbounded_as_tag() {
        let json = serde_json::to_string(&cramer_rao_from_dfil(0.0).unwrap()).unwrap();
        assert!(json.contains("\"unbounded\""), "{json}");
        assert!(!json.contains("inf") && !json.contains("null"));
        let json = serde_json::to_string(&van_trees_bound(4.0, &prior(400.0)).unwrap()).unwrap();
        assert!(json.contains("\"kind\":\"van-trees\""), "{json}");
        assert!(json.contains("\"prior_trace_over_d\":400.0"), "{json}");
    }
}
