use std::path::Path;

use log::info;
use matchest_core::control::{impute_all, CorrectionTable};
use matchest_core::estimator::{estimate_first_stage, FirstStageConfig, FirstStageFit};
use matchest_core::io::{
    correction_table_csv, matching_file, outcome_table_csv, read_correction_table, read_json,
    read_outcome_table, read_utilities, to_json_bytes, write_json, write_markets, write_new,
};
use matchest_core::matcher::solve_stable;
use matchest_core::optim::OptimizerSettings;
use matchest_core::regression::{fit_with_bootstrap, RegressionSpec, SecondStageFit};
use matchest_core::synth::{generate, SimConfig, SyntheticData};
use matchest_core::{ErrorParams, Market, MatchParams, MatchedMarket, Result};
use serde_json::json;

use crate::artifacts::{
    load_fit, load_observed, matching_path, FitDocument, MatchingDocument, RunRecord, TruthDocument,
};
use crate::{CliResult, EstimateArgs, ImputeArgs, RegressArgs, SimulateArgs, SolveArgs};

pub fn resolve_sim_config(args: &SimulateArgs) -> Result<SimConfig> {
    let mut config: SimConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    config.seed = args.seed.seed;
    if let Some(n) = args.markets {
        config.n_markets = n;
    }
    let rho = args.rho.unwrap_or(config.error.rho);
    let sigma = args.sigma.unwrap_or(config.error.sigma);
    config.error = ErrorParams::new(rho, sigma)?;
    Ok(config)
}

/// Writes `markets/`, `matching.json`, `outcomes.csv` and `ground_truth.json` under `dir`.
pub fn write_simulation(dir: &Path, config: &SimConfig, force: bool) -> Result<SyntheticData> {
    let data = generate(config)?;
    let run = RunRecord::new("simulate", Some(config.seed), serde_json::to_value(config)?);
    let markets: Vec<&Market> = data.observed.iter().map(|o| &o.market).collect();
    write_markets(&dir.join("markets"), &markets, force)?;
    write_json(
        &dir.join("matching.json"),
        &MatchingDocument {
            run: Some(run.clone()),
            matchings: matching_file(&data.observed),
        },
        force,
    )?;
    write_new(
        &dir.join("outcomes.csv"),
        &outcome_table_csv(&data.outcomes, Some(&json!({ "run": run })))?,
        force,
    )?;
    write_json(
        &dir.join("ground_truth.json"),
        &TruthDocument {
            run,
            truth: data.truth.clone(),
        },
        force,
    )?;
    info!(
        "simulated {} markets, {} matched startups",
        data.observed.len(),
        data.outcomes.rows.len()
    );
    Ok(data)
}

pub fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let config = resolve_sim_config(args)?;
    write_simulation(&args.out, &config, args.force)?;
    Ok(())
}

pub fn solve(args: &SolveArgs) -> CliResult<()> {
    let market = Market::load(&args.market)?;
    let u = read_utilities(&args.utilities, &market)?;
    let matching = solve_stable(&market, &u)?;
    let doc = json!({
        "run": RunRecord::new("solve", None, json!({
            "market": args.market,
            "utilities": args.utilities,
        })),
        "matchings": { market.id.clone(): matching.to_id_map(&market) },
    });
    match &args.out {
        Some(p) => write_json(p, &doc, args.force)?,
        None => print!("{}", String::from_utf8_lossy(&to_json_bytes(&doc)?)),
    }
    Ok(())
}

pub fn first_stage_config(
    seed: u64,
    draws: usize,
    boot: usize,
    optimizer: Option<&Path>,
) -> Result<FirstStageConfig> {
    Ok(FirstStageConfig {
        n_draws: draws,
        seed,
        n_boot: boot,
        optimizer: match optimizer {
            Some(p) => read_json::<OptimizerSettings>(p)?,
            None => OptimizerSettings::default(),
        },
        ..Default::default()
    })
}

pub fn write_fit(
    path: &Path,
    observed: &[MatchedMarket],
    config: &FirstStageConfig,
    inputs: serde_json::Value,
    force: bool,
) -> Result<FirstStageFit> {
    let fit = estimate_first_stage(observed, config)?;
    info!(
        "first stage: log-likelihood {:.4} -> {:.4} after {} evaluations",
        fit.initial_loglik, fit.final_loglik, fit.evaluations
    );
    let doc = FitDocument {
        run: RunRecord::new(
            "estimate",
            Some(config.seed),
            json!({ "inputs": inputs, "first_stage": config }),
        ),
        fit,
    };
    write_json(path, &doc, force)?;
    Ok(doc.fit)
}

pub fn estimate(args: &EstimateArgs) -> CliResult<()> {
    let observed = load_observed(&args.inputs.markets, args.inputs.matching.as_ref())?;
    let config = first_stage_config(
        args.seed.seed,
        args.draws,
        args.boot,
        args.optimizer.as_deref(),
    )?;
    let inputs = json!({ "markets": args.inputs.markets, "matching": matching_path(&args.inputs.markets, args.inputs.matching.as_ref()) });
    write_fit(&args.out, &observed, &config, inputs, args.force)?;
    Ok(())
}

pub fn write_corrections(
    path: &Path,
    observed: &[MatchedMarket],
    fit: &FirstStageFit,
    draws: usize,
    seed: u64,
    inputs: serde_json::Value,
    force: bool,
) -> Result<CorrectionTable> {
    let params = MatchParams {
        beta: fit.beta_hat.clone(),
    };
    let table = impute_all(observed, &params, draws, seed)?;
    let run = RunRecord::new(
        "impute",
        Some(seed),
        json!({ "inputs": inputs, "beta": fit.beta_hat, "n_draws": draws }),
    );
    write_new(
        path,
        &correction_table_csv(&table, Some(&json!({ "run": run })))?,
        force,
    )?;
    Ok(table)
}

pub fn impute(args: &ImputeArgs) -> CliResult<()> {
    let observed = load_observed(&args.inputs.markets, args.inputs.matching.as_ref())?;
    let doc = load_fit(&args.fit)?;
    let draws = args.draws.unwrap_or(doc.fit.n_draws);
    let seed = args.seed.unwrap_or(doc.fit.draw_seed);
    let inputs = json!({
        "markets": args.inputs.markets,
        "matching": matching_path(&args.inputs.markets, args.inputs.matching.as_ref()),
        "fit": args.fit,
    });
    write_corrections(
        &args.out, &observed, &doc.fit, draws, seed, inputs, args.force,
    )?;
    Ok(())
}

fn csv_number(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

/// Coefficient, fixed-effect, test and summary rows.
pub fn regression_table(fit: &SecondStageFit, header: &serde_json::Value) -> Result<Vec<u8>> {
    let mut lines = vec![
        format!("# {}", serde_json::to_string(header)?),
        "kind,name,estimate,se".to_string(),
    ];
    for t in &fit.terms {
        let est = fit.alpha_hat.get(t).unwrap_or(f64::NAN);
        let se = fit.boot_se.get(t).unwrap_or(f64::NAN);
        lines.push(format!("coef,{t},{},{}", csv_number(est), csv_number(se)));
    }
    for (name, v) in &fit.fixed_effects.0 {
        lines.push(format!("fixed_effect,{name},{},", csv_number(*v)));
    }
    for t in &fit.tests {
        let label: Vec<String> = t
            .names
            .iter()
            .zip(&t.weights)
            .map(|(n, w)| {
                if *w == 1.0 {
                    n.clone()
                } else {
                    format!("{w}*{n}")
                }
            })
            .collect();
        lines.push(format!(
            "test,\"H0: {} = 0\",{},{}",
            label.join(" + "),
            csv_number(t.estimate),
            csv_number(t.se)
        ));
    }
    lines.push(format!("stat,n_obs,{},", fit.n_obs));
    lines.push(format!("stat,r_squared,{},", csv_number(fit.r_squared)));
    let skipped = fit.boot.as_ref().map_or(0, |b| b.skipped);
    lines.push(format!("stat,boot_skipped,{skipped},"));
    let mut out = lines.join("\n").into_bytes();
    out.push(b'\n');
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn write_regression(
    path: &Path,
    outcomes: &matchest_core::regression::OutcomeTable,
    corrections: Option<&CorrectionTable>,
    spec: &RegressionSpec,
    n_boot: usize,
    seed: u64,
    inputs: serde_json::Value,
    force: bool,
) -> Result<SecondStageFit> {
    let fit = fit_with_bootstrap(outcomes, corrections, spec, n_boot, seed)?;
    for w in &fit.warnings {
        log::warn!("{w}");
    }
    let run = RunRecord::new(
        "regress",
        Some(seed),
        json!({ "inputs": inputs, "spec": spec, "n_boot": n_boot }),
    );
    write_new(
        path,
        &regression_table(&fit, &json!({ "run": run }))?,
        force,
    )?;
    Ok(fit)
}

pub fn regress(args: &RegressArgs) -> CliResult<()> {
    let spec: RegressionSpec = read_json(&args.spec)?;
    let outcomes = read_outcome_table(&args.outcomes)?;
    let corrections = args
        .corrections
        .as_deref()
        .map(read_correction_table)
        .transpose()?;
    let beta = match &args.fit {
        Some(p) => Some(load_fit(p)?.fit.beta_hat),
        None => None,
    };
    let inputs = json!({
        "outcomes": args.outcomes,
        "corrections": args.corrections,
        "fit": args.fit,
        "first_stage_beta": beta,
    });
    write_regression(
        &args.out,
        &outcomes,
        corrections.as_ref(),
        &spec,
        args.boot,
        args.seed.seed,
        inputs,
        args.force,
    )?;
    Ok(())
}
