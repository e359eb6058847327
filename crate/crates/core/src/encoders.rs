//! Gaussian-noise instance encoders and their Fisher information.
//!
//! For `Enc(x) = Enc_D(x) + N(0, sigma^2 I)` the Fisher information about the
//! input is `J^T J / sigma^2`, with `J` the Jacobian of the deterministic part.
//! dFIL is its trace divided by the input dimension.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::SmoothMap;
use crate::error::{ensure_dim, invalid, Error, Result};
use crate::exec::Execution;
use crate::rng::{self, TAG_NOISE};
use crate::tensor::Tensor;

/// Monte Carlo work is split into chunks of this many draws, each with its
/// own random stream, so estimates do not depend on the execution mode.
const MC_CHUNK: usize = 4096;

/// A deterministic smooth map followed by isotropic Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyEncoder {
    base: SmoothMap,
    sigma: f64,
    seed: u64,
}

/// Fisher information of an encoder at one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherReport {
    pub fim_trace: f64,
    pub d: usize,
    pub dfil: f64,
    /// Diagonal of the Fisher information matrix.
    pub per_coordinate_diag: Tensor,
}

/// Monte Carlo mean of the score `∇_x log p(e; x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityCheck {
    pub n_samples: usize,
    pub mean_score: Vec<f64>,
    /// Standard error of each mean coordinate; absent for a single draw.
    pub std_error: Option<Vec<f64>>,
}

impl RegularityCheck {
    /// Largest `|mean| / std_error` over coordinates.
    pub fn max_abs_z(&self) -> Option<f64> {
        let se = self.std_error.as_ref()?;
        Some(
            self.mean_score
                .iter()
                .zip(se)
                .map(|(m, s)| if *s > 0.0 { (m / s).abs() } else { 0.0 })
                .fold(0.0, f64::max),
        )
    }
}

/// dFIL over a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationFisher {
    pub per_sample_dfil: Vec<f64>,
    pub mean_dfil: f64,
    pub min_dfil: f64,
    pub max_dfil: f64,
    /// Mean of `trace(J^T J)` over the samples.
    pub mean_jacobian_trace: f64,
}

impl NoisyEncoder {
    pub fn new(base: SmoothMap, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("noise scale must be positive and finite, got {sigma}")));
        }
        Ok(Self { base, sigma, seed })
    }

    pub fn base(&self) -> &SmoothMap {
        &self.base
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.base.output_dim()
    }

    /// Same deterministic part and seed, different noise level.
    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::new(self.base.clone(), sigma, self.seed)
    }

    /// `Enc_D(x)` plus noise from stream 0 of this encoder's seed.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encode_stream(x, 0)
    }

    /// Encoding with noise drawn from the given stream; distinct streams
    /// give independent noise.
    pub fn encode_stream(&self, x: &Tensor, stream: u64) -> Result<Tensor> {
        Tensor::try_from(self.encode_vec(&x.to_dvector(), stream)?)
    }

    pub fn encode_vec(&self, x: &DVector<f64>, stream: u64) -> Result<DVector<f64>> {
        let clean = self.base.eval_vec(x)?;
        let mut r = rng::stream(self.seed, TAG_NOISE, stream);
        Ok(clean + rng::standard_normal(&mut r, self.output_dim()) * self.sigma)
    }

    pub fn fisher_report(&self, x: &Tensor) -> Result<FisherReport> {
        self.fisher_report_vec(&x.to_dvector())
    }

    pub fn fisher_report_vec(&self, x: &DVector<f64>) -> Result<FisherReport> {
        let j = self.base.jacobian_vec(x)?;
        Ok(report_from_jacobian(&j, self.sigma))
    }

    /// dFIL at every sample, plus summary statistics.
    pub fn population_fisher(&self, xs: &[Tensor], exec: Execution) -> Result<PopulationFisher> {
        if xs.is_empty() {
            return Err(invalid("population Fisher information needs at least one sample"));
        }
        let traces = exec.try_map_indexed(xs.len(), |i| jacobian_trace(&self.base, &xs[i].to_dvector()))?;
        let d = self.input_dim() as f64;
        let s2 = self.sigma * self.sigma;
        let per_sample_dfil: Vec<f64> = traces.iter().map(|t| t / (s2 * d)).collect();
        let n = per_sample_dfil.len() as f64;
        Ok(PopulationFisher {
            mean_dfil: per_sample_dfil.iter().sum::<f64>() / n,
            min_dfil: per_sample_dfil.iter().copied().fold(f64::INFINITY, f64::min),
            max_dfil: per_sample_dfil.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_jacobian_trace: traces.iter().sum::<f64>() / n,
            per_sample_dfil,
        })
    }

    /// Score vectors `J^T (e - Enc_D(x)) / sigma^2` for `n` sampled encodings,
    /// folded chunk by chunk with `fold`.
    fn fold_scores<T, F>(&self, x: &DVector<f64>, n: usize, init: T, fold: F) -> Result<Vec<T>>
    where
        T: Clone + Send + Sync,
        F: Fn(&mut T, &DVector<f64>) + Sync + Send,
    {
        let j = self.base.jacobian_vec(x)?;
        let jt = j.transpose() / self.sigma;
        let k = self.output_dim();
        let chunks = n.div_ceil(MC_CHUNK);
        let results = Execution::default().map_indexed(chunks, |c| {
            let mut r = rng::stream(self.seed, TAG_NOISE ^ 0xf15, c as u64);
            let count = MC_CHUNK.min(n - c * MC_CHUNK);
            let mut acc = init.clone();
            for _ in 0..count {
                // (e - Enc_D(x)) / sigma is a standard normal draw.
                let z = rng::standard_normal(&mut r, k);
                fold(&mut acc, &(&jt * z));
            }
            acc
        });
        Ok(results)
    }

    /// Monte Carlo trace of `E[s s^T]` with `s` the score of the encoding
    /// density at `x`.
    pub fn empirical_fim_trace(&self, x: &Tensor, n_samples: usize) -> Result<f64> {
        if n_samples == 0 {
            return Err(invalid("empirical Fisher trace needs at least one sample"));
        }
        let x = x.to_dvector();
        let parts = self.fold_scores(&x, n_samples, 0.0, |acc, s| *acc += s.norm_squared())?;
        Ok(parts.iter().sum::<f64>() / n_samples as f64)
    }

    /// Monte Carlo mean score; zero in expectation for a regular encoder.
    pub fn check_regularity(&self, x: &Tensor, n_samples: usize) -> Result<RegularityCheck> {
        if n_samples == 0 {
            return Err(invalid("regularity check needs at least one sample"));
        }
        let xv = x.to_dvector();
        let d = self.input_dim();
        let zero = (DVector::<f64>::zeros(d), DVector::<f64>::zeros(d));
        let parts = self.fold_scores(&xv, n_samples, zero, |(sum, sq), s| {
            *sum += s;
            *sq += s.component_mul(s);
        })?;
        let (mut sum, mut sq) = (DVector::zeros(d), DVector::zeros(d));
        for (s, q) in parts {
            sum += s;
            sq += q;
        }
        let n = n_samples as f64;
        let mean = &sum / n;
        let std_error = (n_samples > 1).then(|| {
            (0..d)
                .map(|i| {
                    let var = (sq[i] - n * mean[i] * mean[i]) / (n - 1.0);
                    (var.max(0.0) / n).sqrt()
                })
                .collect()
        });
        Ok(RegularityCheck {
            n_samples,
            mean_score: mean.data.into(),
            std_error,
        })
    }
}

pub(crate) fn report_from_jacobian(j: &DMatrix<f64>, sigma: f64) -> FisherReport {
    let s2 = sigma * sigma;
    let diag: Vec<f64> = j.column_iter().map(|c| c.norm_squared() / s2).collect();
    let d = j.ncols();
    let fim_trace = j.norm_squared() / s2;
    FisherReport {
        fim_trace,
        d,
        dfil: fim_trace / d as f64,
        per_coordinate_diag: Tensor::vector(diag).expect("finite Fisher diagonal"),
    }
}

/// Linear map `R^d -> R^k` with i.i.d. `N(0, 1/k)` entries, so that
/// `E[M^T M] = I`.
pub fn random_projection(k: usize, d: usize, seed: u64) -> Result<SmoothMap> {
    if k == 0 || d == 0 {
        return Err(invalid("projection dimensions must be positive"));
    }
    let mut r = rng::stream(seed, rng::TAG_INIT, 4);
    let scale = (1.0 / k as f64).sqrt();
    let mut m = DMatrix::zeros(k, d);
    // Column-major fill keeps the draw order independent of the storage.
    for j in 0..d {
        for i in 0..k {
            let z: f64 = StandardNormal.sample(&mut r);
            m[(i, j)] = scale * z;
        }
    }
    SmoothMap::affine(m, None)
}

/// `trace(J^T J)`, the squared Frobenius norm of the Jacobian at `x`.
pub fn jacobian_trace(base: &SmoothMap, x: &DVector<f64>) -> Result<f64> {
    Ok(base.jacobian_vec(x)?.norm_squared())
}

fn sigma_for(trace: f64, d: usize, target_dfil: f64) -> Result<f64> {
    if !(target_dfil > 0.0 && target_dfil.is_finite()) {
        return Err(invalid(format!("target dFIL must be positive and finite, got {target_dfil}")));
    }
    if trace <= 0.0 {
        return Err(Error::DegenerateEncoder(
            "Jacobian vanishes, the encoding carries no local information".into(),
        ));
    }
    Ok((trace / (d as f64 * target_dfil)).sqrt())
}

/// Noise scale that gives exactly `target_dfil` at `x`.
pub fn calibrate_sigma(base: &SmoothMap, x: &Tensor, target_dfil: f64) -> Result<f64> {
    ensure_dim("calibration input", base.input_dim(), x.len())?;
    let trace = jacobian_trace(base, &x.to_dvector())?;
    sigma_for(trace, base.input_dim(), target_dfil)
}

/// Noise scale that gives `target_dfil` on average over `xs`, calibrated on
/// the mean of `trace(J^T J)`.
pub fn calibrate_sigma_population(
    base: &SmoothMap,
    xs: &[Tensor],
    target_dfil: f64,
    exec: Execution,
) -> Result<f64> {
    if xs.is_empty() {
        return Err(invalid("calibration set is empty"));
    }
    let traces = exec.try_map_indexed(xs.len(), |i| jacobian_trace(base, &xs[i].to_dvector()))?;
    let mean = traces.iter().sum::<f64>() / traces.len() as f64;
    sigma_for(mean, base.input_dim(), target_dfil)
}

/// `trace(J^T J) / |Enc_D(x)|^2`; minimising it raises the SNR reached at a
/// fixed dFIL.
pub fn snr_regularizer(base: &SmoothMap, x: &Tensor) -> Result<f64> {
    let xv = x.to_dvector();
    let e = base.eval_vec(&xv)?;
    let energy = e.norm_squared();
    if energy <= 0.0 {
        return Err(invalid("SNR regularizer is undefined for a zero encoding"));
    }
    Ok(jacobian_trace(base, &xv)? / energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{Activation, Layer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    fn scaled_identity(d: usize, c: f64) -> SmoothMap {
        SmoothMap::affine(DMatrix::identity(d, d) * c, None).unwrap()
    }

    fn randm(seed: u64, r: usize, c: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn sigma_must_be_positive() {
        let id = SmoothMap::identity(2).unwrap();
        assert!(NoisyEncoder::new(id.clone(), 0.0, 1).is_err());
        assert!(NoisyEncoder::new(id.clone(), -1.0, 1).is_err());
        assert!(NoisyEncoder::new(id, f64::NAN, 1).is_err());
    }

    #[test]
    fn vanishing_noise_returns_base_output() {
        let enc = NoisyEncoder::new(SmoothMap::identity(2).unwrap(), 1e-12, 3).unwrap();
        let e = enc.encode(&t(&[1.0, 2.0])).unwrap();
        assert!((e.data()[0] - 1.0).abs() < 1e-6 && (e.data()[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn encoding_is_deterministic_per_stream() {
        let enc = NoisyEncoder::new(SmoothMap::identity(3).unwrap(), 1.0, 42).unwrap();
        let x = t(&[0.0, 1.0, 2.0]);
        assert_eq!(enc.encode(&x).unwrap(), enc.encode(&x).unwrap());
        assert_ne!(enc.encode_stream(&x, 1).unwrap(), enc.encode_stream(&x, 2).unwrap());
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let enc = NoisyEncoder::new(SmoothMap::identity(3).unwrap(), 1.0, 0).unwrap();
        assert!(matches!(enc.encode(&t(&[1.0])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn noise_has_zero_mean_and_sigma_variance() {
        let sigma = 0.7;
        let enc = NoisyEncoder::new(scaled_identity(3, 2.0), sigma, 5).unwrap();
        let x = DVector::from_vec(vec![1.0, -1.0, 0.5]);
        let clean = enc.base().eval_vec(&x).unwrap();
        let n = 100_000;
        let mut sum = DVector::zeros(3);
        let mut sq = DVector::zeros(3);
        for s in 0..n {
            let r = enc.encode_vec(&x, s as u64).unwrap() - &clean;
            sq += r.component_mul(&r);
            sum += r;
        }
        let tol = 3.0 * sigma / (n as f64).sqrt();
        for i in 0..3 {
            assert!((sum[i] / n as f64).abs() < tol);
            let var = sq[i] / n as f64;
            assert!((var - sigma * sigma).abs() < 0.02 * sigma * sigma);
        }
    }

    #[test]
    fn fisher_report_examples() {
        let enc = NoisyEncoder::new(SmoothMap::identity(4).unwrap(), 0.5, 0).unwrap();
        let r = enc.fisher_report(&t(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(r.fim_trace, 16.0);
        assert_eq!(r.dfil, 4.0);
        assert_eq!(1.0 / r.dfil, 0.25);
        assert_eq!(r.per_coordinate_diag.data(), &[4.0; 4]);

        let enc = NoisyEncoder::new(scaled_identity(4, 2.0), 2.0, 0).unwrap();
        let r = enc.fisher_report(&t(&[0.0; 4])).unwrap();
        assert_eq!(r.dfil, 1.0);
    }

    #[test]
    fn report_bookkeeping_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = SmoothMap::mlp(&[5, 9, 4], Activation::Tanh, &mut rng).unwrap();
        let enc = NoisyEncoder::new(base, 0.3, 0).unwrap();
        let r = enc.fisher_report(&t(&[0.1, 0.2, -0.3, 0.4, 1.0])).unwrap();
        assert!((r.dfil * r.d as f64 - r.fim_trace).abs() <= 1e-12 * r.fim_trace);
        let sum: f64 = r.per_coordinate_diag.data().iter().sum();
        assert!((sum - r.fim_trace).abs() <= 1e-10 * r.fim_trace);
    }

    #[test]
    fn empirical_trace_single_draw_is_nonnegative() {
        let enc = NoisyEncoder::new(SmoothMap::identity(2).unwrap(), 1.0, 9).unwrap();
        let v = enc.empirical_fim_trace(&t(&[0.0, 0.0]), 1).unwrap();
        assert!(v >= 0.0);
        assert!(enc.empirical_fim_trace(&t(&[0.0, 0.0]), 0).is_err());
    }

    #[test]
    fn regularity_needs_samples() {
        let enc = NoisyEncoder::new(SmoothMap::identity(2).unwrap(), 1.0, 9).unwrap();
        assert!(enc.check_regularity(&t(&[0.0, 0.0]), 0).is_err());
        let one = enc.check_regularity(&t(&[0.0, 0.0]), 1).unwrap();
        assert!(one.std_error.is_none());
    }

    #[test]
    fn calibration_examples() {
        let s = calibrate_sigma(&scaled_identity(4, 2.0), &t(&[0.0; 4]), 1.0).unwrap();
        assert!((s - 2.0).abs() < 1e-15);
        let s = calibrate_sigma(&SmoothMap::identity(7).unwrap(), &t(&[1.0; 7]), 4.0).unwrap();
        assert!((s - 0.5).abs() < 1e-15);
        let s = calibrate_sigma(&SmoothMap::identity(784).unwrap(), &Tensor::zeros(vec![784]).unwrap(), 1e-2)
            .unwrap();
        assert!((s - 10.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_rejects_degenerate_and_bad_targets() {
        let zero = SmoothMap::affine(DMatrix::zeros(3, 2), None).unwrap();
        assert!(matches!(
            calibrate_sigma(&zero, &t(&[1.0, 1.0]), 1.0),
            Err(Error::DegenerateEncoder(_))
        ));
        let id = SmoothMap::identity(2).unwrap();
        assert!(calibrate_sigma(&id, &t(&[1.0, 1.0]), 0.0).is_err());
        assert!(calibrate_sigma(&id, &t(&[1.0, 1.0]), -3.0).is_err());
    }

    #[test]
    fn calibration_round_trips_on_large_projection() {
        let m = randm(4, 10_000, 784) / 100.0;
        let base = SmoothMap::affine(m, None).unwrap();
        let x = Tensor::zeros(vec![784]).unwrap();
        for target in [1e-4, 0.37, 12.0] {
            let sigma = calibrate_sigma(&base, &x, target).unwrap();
            let r = NoisyEncoder::new(base.clone(), sigma, 0).unwrap().fisher_report(&x).unwrap();
            assert!((r.dfil - target).abs() <= 1e-9 * target);
        }
    }

    #[test]
    fn population_calibration_hits_mean_dfil() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = SmoothMap::mlp(&[3, 6, 5], Activation::Tanh, &mut rng).unwrap();
        let xs: Vec<Tensor> = (0..20)
            .map(|i| t(&[i as f64 * 0.1, -0.2, 0.5 - i as f64 * 0.05]))
            .collect();
        let sigma = calibrate_sigma_population(&base, &xs, 2.5, Execution::default()).unwrap();
        let pop = NoisyEncoder::new(base, sigma, 0)
            .unwrap()
            .population_fisher(&xs, Execution::Sequential)
            .unwrap();
        assert!((pop.mean_dfil - 2.5).abs() < 1e-12);
        assert!(pop.min_dfil <= pop.mean_dfil && pop.mean_dfil <= pop.max_dfil);
    }

    #[test]
    fn snr_regularizer_examples() {
        let v = snr_regularizer(&scaled_identity(4, 2.0), &t(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!((v - 4.0).abs() < 1e-15);
        let id = SmoothMap::identity(6).unwrap();
        let v = snr_regularizer(&id, &t(&[0.0, 0.6, 0.0, 0.8, 0.0, 0.0])).unwrap();
        assert!((v - 6.0).abs() < 1e-12);
        assert!(snr_regularizer(&id, &Tensor::zeros(vec![6]).unwrap()).is_err());
    }

    #[test]
    fn snr_regularizer_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let base = SmoothMap::mlp(&[4, 8, 3], Activation::Gelu, &mut rng).unwrap();
        let scaled = base
            .clone()
            .push(Layer::affine(DMatrix::identity(3, 3) * 3.7, DVector::zeros(3)).unwrap())
            .unwrap();
        let x = t(&[0.3, -0.4, 1.1, 0.2]);
        let a = snr_regularizer(&base, &x).unwrap();
        let b = snr_regularizer(&scaled, &x).unwrap();
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn dfil_is_invariant_to_output_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let base = SmoothMap::mlp(&[5, 8, 6], Activation::Tanh, &mut rng).unwrap();
        let q = randm(99, 6, 6).qr().q();
        let rotated = base.clone().push(Layer::affine(q, DVector::zeros(6)).unwrap()).unwrap();
        let x = t(&[0.5, -1.0, 0.2, 0.0, 0.9]);
        let a = NoisyEncoder::new(base, 0.4, 0).unwrap().fisher_report(&x).unwrap();
        let b = NoisyEncoder::new(rotated, 0.4, 0).unwrap().fisher_report(&x).unwrap();
        assert!((a.dfil - b.dfil).abs() <= 1e-8 * a.dfil);
    }
}
