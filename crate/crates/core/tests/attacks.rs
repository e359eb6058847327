use dfil_core::attacks::{
    attack_learned_inversion, attack_map_gaussian, encode_pairs, evaluate_attack, Attack, GaussianPrior,
    InversionConfig, MapGaussianAttack, PriorMeanAttack, PriorSampler, UnbiasedAttack,
};
use dfil_core::bounds::{cramer_rao_from_dfil, van_trees_bound};
use dfil_core::diff::optim::OptConfig;
use dfil_core::diff::{Activation, SmoothMap};
use dfil_core::encoders::NoisyEncoder;
use dfil_core::priors::gaussian_prior_info;
use dfil_core::{rng, DMatrix, DVector, Execution, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn projection(seed: u64, k: usize, d: usize) -> DMatrix<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let scale = (1.0 / k as f64).sqrt();
    DMatrix::from_fn(k, d, |_, _| {
        let z: f64 = StandardNormal.sample(&mut r);
        scale * z
    })
}

fn tight() -> OptConfig {
    OptConfig {
        max_iters: 20_000,
        step_size: 1.0,
        grad_tol: 1e-12,
    }
}

/// `(M^T M / s^2 + I / t^2)^{-1} M^T e / s^2`.
fn posterior_mean(m: &DMatrix<f64>, e: &DVector<f64>, sigma: f64, tau: f64) -> DVector<f64> {
    let d = m.ncols();
    let precision = m.transpose() * m / (sigma * sigma) + DMatrix::identity(d, d) / (tau * tau);
    precision.cholesky().unwrap().solve(&(m.transpose() * e / (sigma * sigma)))
}

#[test]
fn map_matches_conjugate_posterior() {
    let (d, tau) = (32, 0.05);
    let m = projection(1, 96, d);
    for sigma in [1e-3, 0.05, 0.5] {
        let enc = NoisyEncoder::new(SmoothMap::affine(m.clone(), None).unwrap(), sigma, 2).unwrap();
        let x = GaussianPrior::centered(d, tau).unwrap().sample(&mut rng::stream(1, 2, 3));
        let e = enc.encode_vec(&x, 0).unwrap();
        let exact = posterior_mean(&m, &e, sigma, tau);
        let got = attack_map_gaussian(&enc, &Tensor::try_from(e).unwrap(), tau, &tight()).unwrap();
        assert!((got.x - &exact).norm() <= 1e-6 * exact.norm());
    }
}

#[test]
fn map_mse_matches_posterior_covariance() {
    let (d, tau, sigma) = (32, 0.05, 0.05);
    let m = projection(3, 96, d);
    let enc = NoisyEncoder::new(SmoothMap::affine(m.clone(), None).unwrap(), sigma, 0).unwrap();
    let precision = m.transpose() * &m / (sigma * sigma) + DMatrix::identity(d, d) / (tau * tau);
    let oracle = precision.try_inverse().unwrap().trace() / d as f64;
    let attack = MapGaussianAttack::new(tau, OptConfig::default()).unwrap();
    let prior = GaussianPrior::centered(d, tau).unwrap();
    let report = evaluate_attack(&attack, &enc, &prior, 1000, 4).unwrap();
    assert!((report.mean_mse - oracle).abs() < 0.05 * oracle, "{} vs {oracle}", report.mean_mse);
}

#[test]
fn least_squares_mse_matches_covariance_trace() {
    let (d, sigma) = (16, 0.1);
    let m = projection(5, 64, d);
    let enc = NoisyEncoder::new(SmoothMap::affine(m.clone(), None).unwrap(), sigma, 0).unwrap();
    let oracle = sigma * sigma * (m.transpose() * &m).try_inverse().unwrap().trace() / d as f64;
    let dfil = enc.fisher_report(&Tensor::zeros(vec![d]).unwrap()).unwrap().dfil;
    let cr = cramer_rao_from_dfil(dfil).unwrap().value.as_f64();
    let report = evaluate_attack(&UnbiasedAttack { opt: tight(), init: None }, &enc, &GaussianPrior::centered(d, 1.0).unwrap(), 2000, 6).unwrap();
    assert!((report.mean_mse - oracle).abs() < 4.0 * report.std_error);
    assert!(report.mean_mse >= cr - 3.0 * report.std_error);
    assert!(oracle >= cr);
}

#[test]
fn no_attack_beats_the_van_trees_bound() {
    let d = 8;
    let tau = 0.5;
    let prior = GaussianPrior::centered(d, tau).unwrap();
    let prior_info = gaussian_prior_info(tau, d).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let encoders = vec![
        SmoothMap::identity(d).unwrap(),
        SmoothMap::affine(projection(7, 24, d), None).unwrap(),
        SmoothMap::mlp(&[d, 16, 12], Activation::Tanh, &mut r).unwrap(),
    ];
    for base in encoders {
        for sigma in [0.05, 0.5, 5.0] {
            let enc = NoisyEncoder::new(base.clone(), sigma, 1).unwrap();
            let xs: Vec<Tensor> = (0..300)
                .map(|i| Tensor::try_from(prior.sample(&mut rng::stream(11, 0, i))).unwrap())
                .collect();
            let mean_dfil = enc.population_fisher(&xs, Execution::default()).unwrap().mean_dfil;
            let bound = van_trees_bound(mean_dfil, &prior_info).unwrap().value.as_f64();
            let pairs = encode_pairs(&enc, &xs, 1000).unwrap();
            let (inversion, _) = attack_learned_inversion(
                &enc,
                &pairs,
                &InversionConfig {
                    steps: 300,
                    ..InversionConfig::deep(d)
                },
            )
            .unwrap();
            let attacks: Vec<Box<dyn Attack>> = vec![
                Box::new(UnbiasedAttack { opt: OptConfig::default(), init: None }),
                Box::new(MapGaussianAttack::new(tau, OptConfig::default()).unwrap()),
                Box::new(PriorMeanAttack { mean: DVector::zeros(d) }),
                Box::new(inversion),
            ];
            for attack in &attacks {
                let report = evaluate_attack(attack.as_ref(), &enc, &prior, 300, 2).unwrap();
                assert!(
                    report.mean_mse >= bound - 3.0 * report.std_error,
                    "{} at sigma {sigma}: {} < {bound}",
                    attack.kind(),
                    report.mean_mse
                );
            }
        }
    }
}

#[test]
fn learned_attack_falls_back_to_the_prior_under_heavy_noise() {
    let (d, tau) = (8, 0.05);
    let m = projection(2, 32, d);
    let enc = NoisyEncoder::new(SmoothMap::affine(m, None).unwrap(), 100.0, 0).unwrap();
    let prior = GaussianPrior::centered(d, tau).unwrap();
    let xs: Vec<Tensor> = (0..2000)
        .map(|i| Tensor::try_from(prior.sample(&mut rng::stream(12, 0, i))).unwrap())
        .collect();
    let pairs = encode_pairs(&enc, &xs, 0).unwrap();
    let cfg = InversionConfig {
        steps: 1500,
        ..InversionConfig::deep(d)
    };
    let (inversion, _) = attack_learned_inversion(&enc, &pairs, &cfg).unwrap();
    let report = evaluate_attack(&inversion, &enc, &prior, 2000, 13).unwrap();
    let prior_var = tau * tau;
    assert!((report.mean_mse - prior_var).abs() < 0.15 * prior_var, "{}", report.mean_mse);
}
