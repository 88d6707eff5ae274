use matchest_core::control::impute_all;
use matchest_core::estimator::{fit_point, FirstStageConfig};
use matchest_core::optim::OptimizerSettings;
use matchest_core::regression::{
    fit_second_stage, fit_with_bootstrap, ComboSpec, RegressionSpec, CORRECTION,
};
use matchest_core::rng::derive_seed;
use matchest_core::synth::{generate, SimConfig, SyntheticData};
use matchest_core::{ErrorParams, MatchParams};

const REGRESSORS: [&str; 3] = ["female_founder", "relocated", "log_cohort_size"];

fn spec(include_correction: bool) -> RegressionSpec {
    RegressionSpec {
        outcome: "y".into(),
        regressors: REGRESSORS.map(String::from).to_vec(),
        include_correction,
        fixed_effects: vec![],
        filters: vec![],
        tests: vec![ComboSpec {
            names: vec!["female_founder".into(), "relocated".into()],
            weights: vec![1.0, 1.0],
        }],
        resample: Default::default(),
    }
}

fn simulate(n_markets: usize, rho: f64, seed: u64) -> SyntheticData {
    generate(&SimConfig {
        n_markets,
        error: ErrorParams::new(rho, 1.0).unwrap(),
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// First stage at simulation-grade settings, then the correction terms.
fn estimated_beta(data: &SyntheticData, seed: u64) -> MatchParams {
    let fit = fit_point(
        &data.observed,
        &FirstStageConfig {
            n_draws: 300,
            seed,
            n_boot: 0,
            optimizer: OptimizerSettings {
                x_tol: 1e-3,
                f_tol: 1e-4,
                max_restarts: 1,
                ..Default::default()
            },
            ..Default::default()
        },
    )
    .unwrap();
    MatchParams { beta: fit.beta }
}

/// One draw lands outside 2 SE about one time in twenty, so the check is
/// made on the mean of several replications against the SE of that mean.
#[test]
fn correction_coefficient_recovers_rho_sigma() {
    const REPS: u64 = 8;
    let (mut lambdas, mut variances) = (Vec::new(), Vec::new());
    for r in 0..REPS {
        let data = simulate(74, 0.35, derive_seed(21, r));
        let beta = estimated_beta(&data, r);
        let corrections = impute_all(&data.observed, &beta, 5000, r).unwrap();
        let fit =
            fit_with_bootstrap(&data.outcomes, Some(&corrections), &spec(true), 200, r).unwrap();
        lambdas.push(fit.alpha_hat.get(CORRECTION).unwrap());
        variances.push(fit.boot_se.get(CORRECTION).unwrap().powi(2));
    }
    let n = REPS as f64;
    let mean = lambdas.iter().sum::<f64>() / n;
    let se = (variances.iter().sum::<f64>() / n).sqrt() / n.sqrt();
    assert!(
        (mean - 0.35).abs() <= 2.0 * se,
        "{mean} ± {se} from {lambdas:?}"
    );
}

#[test]
fn correction_is_harmless_without_endogeneity() {
    let data = simulate(37, 0.0, 22);
    let beta = estimated_beta(&data, 3);
    let corrections = impute_all(&data.observed, &beta, 5000, 3).unwrap();
    let with = fit_with_bootstrap(&data.outcomes, Some(&corrections), &spec(true), 200, 4).unwrap();
    let without = fit_with_bootstrap(&data.outcomes, None, &spec(false), 200, 4).unwrap();
    for name in REGRESSORS {
        let gap = (with.alpha_hat.get(name).unwrap() - without.alpha_hat.get(name).unwrap()).abs();
        let se = without.boot_se.get(name).unwrap();
        assert!(gap <= se, "{name}: gap {gap}, se {se}");
    }
}

#[test]
fn offsetting_effects_sum_to_zero() {
    let data = simulate(74, 0.35, 23);
    let beta = estimated_beta(&data, 5);
    let corrections = impute_all(&data.observed, &beta, 5000, 5).unwrap();
    let fit = fit_with_bootstrap(&data.outcomes, Some(&corrections), &spec(true), 300, 6).unwrap();
    let test = &fit.tests[0];
    assert!(
        test.estimate.abs() <= 2.0 * test.se,
        "{} ± {}",
        test.estimate,
        test.se
    );
}

#[test]
fn four_times_the_sample_halves_the_standard_error() {
    let small = simulate(30, 0.35, 24);
    let large = simulate(120, 0.35, 25);
    let a = fit_with_bootstrap(&small.outcomes, None, &spec(false), 300, 7).unwrap();
    let b = fit_with_bootstrap(&large.outcomes, None, &spec(false), 300, 8).unwrap();
    for name in ["relocated", "log_cohort_size"] {
        let ratio = a.boot_se.get(name).unwrap() / b.boot_se.get(name).unwrap();
        assert!((1.6..=2.5).contains(&ratio), "{name}: ratio {ratio}");
    }
}

/// The correction is imputed at the true coefficients so the comparison
/// isolates the second stage; large markets keep per-replication noise
/// below the selection bias.
#[test]
fn correction_reduces_bias_in_nearly_every_replication() {
    const REPS: u64 = 50;
    let mut better = 0;
    for r in 0..REPS {
        let sim = SimConfig {
            n_markets: 300,
            error: ErrorParams::new(0.7, 1.0).unwrap(),
            seed: derive_seed(26, r),
            ..Default::default()
        };
        let data = generate(&sim).unwrap();
        let truth = sim.alpha_true.get("relocated").unwrap();
        let corrections = impute_all(&data.observed, &sim.beta_true, 2000, r).unwrap();
        let with = fit_second_stage(&data.outcomes, Some(&corrections), &spec(true)).unwrap();
        let without = fit_second_stage(&data.outcomes, None, &spec(false)).unwrap();
        let bias = |f: &matchest_core::regression::SecondStageFit| {
            (f.alpha_hat.get("relocated").unwrap() - truth).abs()
        };
        if bias(&with) < bias(&without) {
            better += 1;
        }
    }
    assert!(better * 10 >= REPS * 9, "{better}/{REPS}");
}
