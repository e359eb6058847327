use dfil_core::diff::{Activation, SmoothMap};
use dfil_core::encoders::{calibrate_sigma, NoisyEncoder};
use dfil_core::{DMatrix, DVector, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian_matrix(seed: u64, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut r))
}

fn point(seed: u64, d: usize) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::vector((0..d).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn affine_dfil_is_exact() {
    let sigma = 0.37;
    let diag = DMatrix::from_diagonal(&DVector::from_fn(24, |i, _| 0.5 + i as f64 / 10.0));
    for m in [DMatrix::identity(8, 8), diag, gaussian_matrix(1, 100, 64), gaussian_matrix(2, 5, 12)] {
        let d = m.ncols();
        let analytic = (m.transpose() * &m).trace() / (sigma * sigma * d as f64);
        let enc = NoisyEncoder::new(SmoothMap::affine(m, None).unwrap(), sigma, 0).unwrap();
        let report = enc.fisher_report(&point(3, d)).unwrap();
        assert!(rel(report.dfil, analytic) <= 1e-9);
        assert_eq!(report.d, d);
    }
}

#[test]
fn empirical_trace_agrees_with_jacobian() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let base = SmoothMap::mlp(&[6, 12, 9], Activation::Tanh, &mut r).unwrap();
    let enc = NoisyEncoder::new(base, 0.3, 7).unwrap();
    let x = point(5, 6);
    let exact = enc.fisher_report(&x).unwrap().fim_trace;
    let mc = enc.empirical_fim_trace(&x, 100_000).unwrap();
    assert!(rel(mc, exact) < 0.05, "{mc} vs {exact}");
    let check = enc.check_regularity(&x, 100_000).unwrap();
    assert!(check.max_abs_z().unwrap() < 4.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn calibration_round_trips(seed in 0u64..1000, target in 1e-3f64..1e3, d in 1usize..12) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let base = SmoothMap::mlp(&[d, 2 * d + 1, d + 3], Activation::Gelu, &mut r).unwrap();
        let x = point(seed + 1, d);
        let sigma = calibrate_sigma(&base, &x, target).unwrap();
        let enc = NoisyEncoder::new(base, sigma, 0).unwrap();
        prop_assert!(rel(enc.fisher_report(&x).unwrap().dfil, target) <= 1e-9);
    }

    #[test]
    fn dfil_scales_inversely_with_noise_power(seed in 0u64..1000, s in 0.01f64..10.0, c in 0.1f64..10.0) {
        let m = gaussian_matrix(seed, 7, 5);
        let enc = NoisyEncoder::new(SmoothMap::affine(m, None).unwrap(), s, 0).unwrap();
        let x = point(seed, 5);
        let a = enc.fisher_report(&x).unwrap().dfil;
        let b = enc.with_sigma(s * c).unwrap().fisher_report(&x).unwrap().dfil;
        prop_assert!(rel(a, b * c * c) <= 1e-12);
    }
}
