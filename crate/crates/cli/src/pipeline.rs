//! simulate → estimate → impute → regress on synthetic data, plus a summary
//! comparing every estimate with the truth it was generated from.
//!
//! Artifacts refer to each other by paths relative to the output directory
//! and never mention worker counts, so two runs with the same seed produce
//! identical bytes.

use matchest_core::io::write_json;
use matchest_core::regression::{ComboSpec, RegressionSpec, SecondStageFit, CORRECTION, INTERCEPT};
use matchest_core::rng::derive_seed;
use matchest_core::synth::SimConfig;
use matchest_core::ErrorParams;
use serde::Serialize;
use serde_json::json;

use crate::artifacts::RunRecord;
use crate::commands::{
    first_stage_config, write_corrections, write_fit, write_regression, write_simulation,
};
use crate::{CliResult, PipelineArgs};

#[derive(Serialize)]
struct BetaRow {
    name: String,
    truth: f64,
    estimate: f64,
    se: Option<f64>,
}

#[derive(Serialize)]
struct AlphaRow {
    name: String,
    truth: f64,
    corrected: Option<f64>,
    corrected_se: Option<f64>,
    uncorrected: Option<f64>,
    uncorrected_se: Option<f64>,
}

fn finite(v: Option<f64>) -> Option<f64> {
    v.filter(|x| x.is_finite())
}

/// `female_founder + relocated = 0` when both are present: the two effects
/// are generated with equal size and opposite sign.
fn combo_test(regressors: &[String]) -> Vec<ComboSpec> {
    let names = ["female_founder", "relocated"];
    if names.iter().all(|n| regressors.iter().any(|r| r == n)) {
        vec![ComboSpec {
            names: names.map(String::from).to_vec(),
            weights: vec![1.0, 1.0],
        }]
    } else {
        vec![]
    }
}

pub fn run(args: &PipelineArgs) -> CliResult<()> {
    let out = &args.out;
    let sim_seed = derive_seed(args.seed.seed, 1);
    let fit_seed = derive_seed(args.seed.seed, 2);
    let regress_seed = derive_seed(args.seed.seed, 3);

    let sim = SimConfig {
        n_markets: args.markets,
        error: ErrorParams::new(args.rho, args.sigma)?,
        seed: sim_seed,
        ..Default::default()
    };
    let data = write_simulation(out, &sim, args.force)?;

    let inputs = json!({ "markets": "markets", "matching": "matching.json" });
    let config = first_stage_config(fit_seed, args.draws, args.boot, None)?;
    let fit = write_fit(
        &out.join("fit.json"),
        &data.observed,
        &config,
        inputs.clone(),
        args.force,
    )?;

    let mut impute_inputs = inputs;
    impute_inputs["fit"] = json!("fit.json");
    let corrections = write_corrections(
        &out.join("corrections.csv"),
        &data.observed,
        &fit,
        fit.n_draws,
        fit.draw_seed,
        impute_inputs,
        args.force,
    )?;

    let regressors: Vec<String> = sim
        .alpha_true
        .names()
        .into_iter()
        .filter(|n| n != INTERCEPT)
        .collect();
    let spec = RegressionSpec {
        outcome: "y".into(),
        regressors: regressors.clone(),
        include_correction: true,
        fixed_effects: vec!["year".into()],
        filters: vec![],
        tests: combo_test(&regressors),
        resample: Default::default(),
    };
    write_json(&out.join("regress_spec.json"), &spec, args.force)?;
    let reg_inputs = json!({
        "outcomes": "outcomes.csv",
        "corrections": "corrections.csv",
        "fit": "fit.json",
        "first_stage_beta": fit.beta_hat,
    });
    let corrected = write_regression(
        &out.join("regression.csv"),
        &data.outcomes,
        Some(&corrections),
        &spec,
        args.second_boot,
        regress_seed,
        reg_inputs,
        args.force,
    )?;
    let plain_spec = RegressionSpec {
        include_correction: false,
        ..spec
    };
    let uncorrected = write_regression(
        &out.join("regression_uncorrected.csv"),
        &data.outcomes,
        None,
        &plain_spec,
        args.second_boot,
        regress_seed,
        json!({ "outcomes": "outcomes.csv" }),
        args.force,
    )?;

    let beta: Vec<BetaRow> = sim
        .beta_true
        .beta
        .0
        .iter()
        .map(|(name, &truth)| BetaRow {
            name: name.clone(),
            truth,
            estimate: fit.beta_hat.get(name).unwrap_or(f64::NAN),
            se: finite(fit.se.get(name)),
        })
        .collect();
    let alpha: Vec<AlphaRow> = sim
        .alpha_true
        .0
        .iter()
        .map(|(name, &truth)| AlphaRow {
            name: name.clone(),
            truth,
            corrected: finite(corrected.alpha_hat.get(name)),
            corrected_se: finite(corrected.boot_se.get(name)),
            uncorrected: finite(uncorrected.alpha_hat.get(name)),
            uncorrected_se: finite(uncorrected.boot_se.get(name)),
        })
        .collect();
    let lambda = |f: &SecondStageFit| {
        json!({
            "estimate": finite(f.alpha_hat.get(CORRECTION)),
            "se": finite(f.boot_se.get(CORRECTION)),
        })
    };
    let min_ess = corrections
        .markets
        .iter()
        .map(|m| m.ess)
        .fold(f64::INFINITY, f64::min);
    let summary = json!({
        "run": RunRecord::new("pipeline", Some(args.seed.seed), json!({
            "markets": args.markets,
            "draws": args.draws,
            "boot": args.boot,
            "second_boot": args.second_boot,
            "rho": args.rho,
            "sigma": args.sigma,
            "stage_seeds": { "simulate": sim_seed, "estimate": fit_seed, "regress": regress_seed },
        })),
        "data": {
            "markets": data.observed.len(),
            "startups": data.outcomes.rows.len(),
        },
        "first_stage": {
            "beta": beta,
            "converged": fit.converged,
            "log_likelihood": fit.final_loglik,
            "bootstrap_failures": fit.boot_failures,
        },
        "goodness_of_fit": {
            "ratio": fit.gof_ratio,
            "pseudo_r2": fit.pseudo_r2,
        },
        "correction": {
            "lambda": lambda(&corrected),
            "rho_sigma": sim.error.covariance(),
            "min_ess": min_ess,
        },
        "second_stage": {
            "alpha": alpha,
            "n_obs": corrected.n_obs,
            "tests": corrected.tests,
        },
    });
    write_json(&out.join("summary.json"), &summary, args.force)?;
    println!("{}", out.join("summary.json").display());
    Ok(())
}
