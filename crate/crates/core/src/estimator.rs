//! First stage: simulated maximum likelihood of the observed matchings,
//! market-level bootstrap, and goodness of fit.

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::impute_prepared;
use crate::error::{Error, Result};
use crate::likelihood::{SmlObjective, DEFAULT_DRAWS};
use crate::model::{deterministic_utility, MatchParams, MatchedMarket, NamedVector};
use crate::optim::{maximize, OptimizerSettings};
use crate::rng::{derive_seed, stream_rng};

pub const DEFAULT_BOOTSTRAP: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstStageConfig {
    pub n_draws: usize,
    pub seed: u64,
    /// Replications for standard errors; 0 skips the bootstrap.
    pub n_boot: usize,
    pub optimizer: OptimizerSettings,
    /// Starting point; zeros when absent.
    pub initial: Option<NamedVector>,
    /// Rescale continuous covariates to unit variance while optimizing.
    pub standardize: bool,
}

impl Default for FirstStageConfig {
    fn default() -> Self {
        Self {
            n_draws: DEFAULT_DRAWS,
            seed: 0,
            n_boot: DEFAULT_BOOTSTRAP,
            optimizer: OptimizerSettings::default(),
            initial: None,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstStageFit {
    pub beta_hat: NamedVector,
    /// Bootstrap standard errors; empty when the bootstrap was skipped.
    pub se: NamedVector,
    pub n_draws: usize,
    pub n_boot: usize,
    /// Replications dropped because the resample was not identified.
    pub boot_failures: usize,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub initial_loglik: f64,
    pub final_loglik: f64,
    pub gof_ratio: Option<f64>,
    pub pseudo_r2: Option<f64>,
    /// Seed of the simulation draws; market `k` used stream `k`.
    pub draw_seed: u64,
    pub config: FirstStageConfig,
}

/// Point estimate without standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFit {
    pub beta: NamedVector,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub initial_loglik: f64,
    pub final_loglik: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FirstStageBootstrap {
    pub se: NamedVector,
    /// Coefficient vectors (in `se` name order) of the successful replications.
    pub replicates: Vec<Vec<f64>>,
    pub failures: usize,
}

fn common_names(markets: &[MatchedMarket]) -> Result<Vec<String>> {
    let first = markets
        .first()
        .ok_or_else(|| Error::config("no markets to estimate from"))?;
    let mut names = first.market.covariate_names();
    names.sort();
    for m in markets {
        let mut other = m.market.covariate_names();
        other.sort();
        if other != names {
            return Err(Error::config(format!(
                "market `{}` has covariates {:?}, expected {:?}",
                m.market.id, other, names
            )));
        }
    }
    Ok(names)
}

fn check_identified(markets: &[MatchedMarket]) -> Result<()> {
    if markets.iter().all(|m| m.market.n_accelerators() < 2) {
        return Err(Error::Identification(
            "every market has a single accelerator, so the likelihood does not depend on the coefficients"
                .into(),
        ));
    }
    Ok(())
}

/// Per-column scale used for optimization: the standard deviation over all
/// pairs for covariates that are not 0/1 indicators, 1 otherwise.
fn column_scales(markets: &[MatchedMarket], names: &[String]) -> Vec<f64> {
    names
        .iter()
        .map(|n| {
            let vals: Vec<f64> = markets
                .iter()
                .flat_map(|m| m.market.pair_covariates.iter().map(move |pc| pc.x[n]))
                .collect();
            if vals.iter().all(|&v| v == 0.0 || v == 1.0) {
                return 1.0;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd =
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect()
}

fn fit_objective(
    objective: &SmlObjective,
    scales: &[f64],
    start: &[f64],
    settings: &OptimizerSettings,
) -> PointFit {
    // Optimize over θ = β · scale; Ū only shifts by a constant under centering,
    // which the likelihood ignores, so scaling is the whole transform.
    let theta0: Vec<f64> = start.iter().zip(scales).map(|(b, s)| b * s).collect();
    let to_beta =
        |theta: &[f64]| -> Vec<f64> { theta.iter().zip(scales).map(|(t, s)| t / s).collect() };
    let result = maximize(|theta| objective.value(&to_beta(theta)), &theta0, settings);
    PointFit {
        beta: NamedVector::new(objective.names().iter().cloned().zip(to_beta(&result.x))),
        converged: result.converged,
        iterations: result.iterations,
        evaluations: result.evaluations,
        initial_loglik: result.initial_value,
        final_loglik: result.value,
    }
}

fn start_point(names: &[String], initial: Option<&NamedVector>) -> Result<Vec<f64>> {
    match initial {
        None => Ok(vec![0.0; names.len()]),
        Some(init) => names
            .iter()
            .map(|n| {
                init.get(n)
                    .ok_or_else(|| Error::config(format!("initial value missing for `{n}`")))
            })
            .collect(),
    }
}

/// Maximizes the simulated log-likelihood with draws fixed by `config.seed`.
pub fn fit_point(markets: &[MatchedMarket], config: &FirstStageConfig) -> Result<PointFit> {
    let names = common_names(markets)?;
    check_identified(markets)?;
    let objective = SmlObjective::new(markets, &names, config.n_draws, config.seed)?;
    let scales = if config.standardize {
        column_scales(markets, &names)
    } else {
        vec![1.0; names.len()]
    };
    let start = start_point(&names, config.initial.as_ref())?;
    Ok(fit_objective(
        &objective,
        &scales,
        &start,
        &config.optimizer,
    ))
}

/// Sample standard deviation of each coefficient across replications.
pub fn bootstrap_se(replicates: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = replicates.first() else {
        return Vec::new();
    };
    let n = replicates.len() as f64;
    (0..first.len())
        .map(|j| {
            let mean = replicates.iter().map(|r| r[j]).sum::<f64>() / n;
            let ss = replicates
                .iter()
                .map(|r| (r[j] - mean).powi(2))
                .sum::<f64>();
            if replicates.len() < 2 {
                0.0
            } else {
                (ss / (n - 1.0)).sqrt()
            }
        })
        .collect()
}

/// Market-level bootstrap. Replication `r` resamples markets with an RNG
/// derived from `(config.seed, r)` and simulates fresh draws from the same
/// derived seed; each replication starts from `warm_start` when given.
pub fn bootstrap_first_stage(
    markets: &[MatchedMarket],
    config: &FirstStageConfig,
    n_boot: usize,
    warm_start: Option<&NamedVector>,
) -> Result<FirstStageBootstrap> {
    if n_boot < 2 {
        return Err(Error::config("bootstrap needs at least 2 replications"));
    }
    if markets.len() < 2 {
        return Err(Error::config(
            "bootstrap needs at least 2 markets to resample",
        ));
    }
    let names = common_names(markets)?;
    let scales = if config.standardize {
        column_scales(markets, &names)
    } else {
        vec![1.0; names.len()]
    };
    let start = start_point(&names, warm_start.or(config.initial.as_ref()))?;
    let k = markets.len();
    let results: Vec<Option<Vec<f64>>> = (0..n_boot)
        .into_par_iter()
        .map(|r| {
            let rep_seed = derive_seed(config.seed, r as u64 + 1);
            let mut rng = stream_rng(rep_seed, u64::MAX);
            let sample: Vec<MatchedMarket> = (0..k)
                .map(|_| markets[rng.random_range(0..k)].clone())
                .collect();
            if check_identified(&sample).is_err() {
                return None;
            }
            let objective = SmlObjective::new(&sample, &names, config.n_draws, rep_seed).ok()?;
            let fit = fit_objective(&objective, &scales, &start, &config.optimizer);
            Some(fit.beta.values())
        })
        .collect();
    let failures = results.iter().filter(|r| r.is_none()).count();
    let replicates: Vec<Vec<f64>> = results.into_iter().flatten().collect();
    if replicates.len() < 2 {
        return Err(Error::Identification(format!(
            "only {} of {n_boot} bootstrap resamples were identified",
            replicates.len()
        )));
    }
    if failures > 0 {
        warn!("{failures} of {n_boot} bootstrap resamples were not identified and were skipped");
    }
    let mut sorted = names.clone();
    sorted.sort();
    Ok(FirstStageBootstrap {
        se: NamedVector::new(sorted.into_iter().zip(bootstrap_se(&replicates))),
        replicates,
        failures,
    })
}

/// `ratio/(1 + ratio)`: share of match-value variance explained by the covariates.
pub fn pseudo_r2(ratio: f64) -> f64 {
    ratio / (1.0 + ratio)
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// `Var(Ū)/Var(ε̂)` over matched pairs, and the implied pseudo-R².
/// `eps_hat` lists the imputed shocks market by market in startup order.
pub fn goodness_of_fit(
    markets: &[MatchedMarket],
    params: &MatchParams,
    eps_hat: &[f64],
) -> Result<(f64, f64)> {
    let mut ubar = Vec::with_capacity(eps_hat.len());
    for m in markets {
        let u = deterministic_utility(&m.market, params)?;
        ubar.extend((0..m.market.n_startups()).map(|s| u.get(m.matching.accelerator_of(s), s)));
    }
    if ubar.len() != eps_hat.len() {
        return Err(Error::config(format!(
            "{} imputed shocks for {} matched pairs",
            eps_hat.len(),
            ubar.len()
        )));
    }
    let ve = variance(eps_hat);
    // Also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(ve > 0.0) {
        return Err(Error::numeric(
            "imputed shocks have zero variance; goodness of fit is undefined",
        ));
    }
    let ratio = variance(&ubar) / ve;
    Ok((ratio, pseudo_r2(ratio)))
}

/// Full first stage: point estimate, bootstrap standard errors (when
/// `config.n_boot >= 2`), and goodness of fit using shocks imputed with the
/// estimation draws.
pub fn estimate_first_stage(
    markets: &[MatchedMarket],
    config: &FirstStageConfig,
) -> Result<FirstStageFit> {
    let names = common_names(markets)?;
    check_identified(markets)?;
    let objective = SmlObjective::new(markets, &names, config.n_draws, config.seed)?;
    let scales = if config.standardize {
        column_scales(markets, &names)
    } else {
        vec![1.0; names.len()]
    };
    let start = start_point(&names, config.initial.as_ref())?;
    let point = fit_objective(&objective, &scales, &start, &config.optimizer);
    if !point.converged {
        warn!("first-stage optimizer hit its iteration cap; reporting the best point found");
    }

    let beta_vec: Vec<f64> = names
        .iter()
        .map(|n| point.beta.get(n).unwrap_or(0.0))
        .collect();
    let mut eps_hat = Vec::new();
    for (m, prepared) in markets.iter().zip(objective.markets()) {
        eps_hat.extend(impute_prepared(m, prepared, &beta_vec)?.eps_hat());
    }
    let params = MatchParams {
        beta: point.beta.clone(),
    };
    let (gof_ratio, pseudo) = match goodness_of_fit(markets, &params, &eps_hat) {
        Ok((r, p)) => (Some(r), Some(p)),
        Err(e) => {
            warn!("goodness of fit unavailable: {e}");
            (None, None)
        }
    };

    let (se, boot_failures) = if config.n_boot >= 2 {
        let boot = bootstrap_first_stage(markets, config, config.n_boot, Some(&point.beta))?;
        (boot.se, boot.failures)
    } else {
        (NamedVector::default(), 0)
    };

    Ok(FirstStageFit {
        beta_hat: point.beta,
        se,
        n_draws: config.n_draws,
        n_boot: config.n_boot,
        boot_failures,
        converged: point.converged,
        iterations: point.iterations,
        evaluations: point.evaluations,
        initial_loglik: point.initial_loglik,
        final_loglik: point.final_loglik,
        gof_ratio,
        pseudo_r2: pseudo,
        draw_seed: config.seed,
        config: config.clone(),
    })
}
