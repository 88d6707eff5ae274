//! Reference checks on tiny markets, shared by the `validate` command and
//! the acceptance tests. Each check returns raw comparisons; callers decide
//! how strict to be.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    enumerate_stable, mc_matching_probability, rejection_conditional_moments, tiny_market,
    tiny_params,
};
use crate::control::impute_correction;
use crate::error::Result;
use crate::likelihood::simulated_likelihood_with_se;
use crate::matcher::solve_stable;
use crate::model::{
    Accelerator, CovariateRecipe, ErrorParams, Market, MatchedMarket, Startup, UtilityTable,
};
use crate::rng::{derive_seed, stream_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub markets: usize,
    /// Markets with exactly one stable matching equal to the solver's.
    pub agreeing: usize,
    pub failures: Vec<String>,
}

/// A market with no covariates, for checks driven by raw utility tables.
pub fn bare_market(quotas: &[usize]) -> Market {
    let accelerators = quotas
        .iter()
        .enumerate()
        .map(|(i, &quota)| Accelerator {
            id: format!("a{i}"),
            quota,
            state: "CA".into(),
            equity_share: 0.06,
            features: Default::default(),
        })
        .collect();
    let startups = (0..quotas.iter().sum())
        .map(|j| Startup {
            id: format!("s{j}"),
            home_state: "CA".into(),
            industry: String::new(),
            cohort_year: 2020,
            features: Default::default(),
        })
        .collect();
    Market::assemble(
        "bare",
        accelerators,
        startups,
        CovariateRecipe::new(Vec::<String>::new()),
    )
    .expect("an empty recipe always assembles")
}

/// Random quotas with at most `max_accelerators` programs, quotas at most
/// `max_quota`, and at most `max_startups` startups in total.
fn random_quotas(
    rng: &mut impl Rng,
    max_accelerators: usize,
    max_quota: usize,
    max_startups: usize,
) -> Vec<usize> {
    loop {
        let n_a = rng.random_range(1..=max_accelerators);
        let q: Vec<usize> = (0..n_a).map(|_| rng.random_range(1..=max_quota)).collect();
        if q.iter().sum::<usize>() <= max_startups {
            return q;
        }
    }
}

/// Enumerates every stable matching of `n_markets` random markets with
/// standard normal utilities and compares with the greedy solver.
pub fn check_uniqueness(
    n_markets: usize,
    max_accelerators: usize,
    max_quota: usize,
    max_startups: usize,
    seed: u64,
) -> Result<UniquenessReport> {
    let mut rng = stream_rng(seed, 0);
    let mut agreeing = 0;
    let mut failures = Vec::new();
    for k in 0..n_markets {
        let quotas = random_quotas(&mut rng, max_accelerators, max_quota, max_startups);
        let market = bare_market(&quotas);
        let n = quotas.len() * market.n_startups();
        let values = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let u = UtilityTable::new(quotas.len(), market.n_startups(), values)?;
        let stable = enumerate_stable(&market, &u)?;
        let solved = solve_stable(&market, &u)?;
        if stable.len() == 1 && stable[0] == solved {
            agreeing += 1;
        } else {
            failures.push(format!(
                "market {k} (quotas {quotas:?}): {} stable matchings, solver gave {:?}",
                stable.len(),
                solved.assignment
            ));
        }
    }
    Ok(UniquenessReport {
        markets: n_markets,
        agreeing,
        failures,
    })
}

/// Quotas of the `k`-th tiny market: two programs, two or three startups.
pub fn tiny_quotas(k: usize) -> Vec<usize> {
    match k % 3 {
        0 => vec![1, 1],
        1 => vec![1, 2],
        _ => vec![2, 1],
    }
}

pub fn tiny_markets(n: usize, seed: u64) -> Result<Vec<MatchedMarket>> {
    (0..n)
        .map(|k| {
            tiny_market(
                &format!("tiny{k:02}"),
                &tiny_quotas(k),
                derive_seed(seed, k as u64),
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityComparison {
    pub market_id: String,
    pub simulated: f64,
    pub simulated_se: f64,
    pub frequency: f64,
    pub frequency_se: f64,
}

impl ProbabilityComparison {
    /// Difference in units of the combined standard error.
    pub fn z(&self) -> f64 {
        let se = self.simulated_se.hypot(self.frequency_se);
        if se > 0.0 {
            (self.simulated - self.frequency).abs() / se
        } else if self.simulated == self.frequency {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Simulated likelihood with `n_sml` draws against the frequency of the
/// observed matching over `n_mc` full re-solves.
pub fn check_likelihood(
    markets: &[MatchedMarket],
    n_sml: usize,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<ProbabilityComparison>> {
    let params = tiny_params();
    markets
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let (simulated, simulated_se) =
                simulated_likelihood_with_se(m, &params, n_sml, seed, k as u64)?;
            let (frequency, frequency_se) =
                mc_matching_probability(m, &params, n_mc, derive_seed(seed, k as u64))?;
            Ok(ProbabilityComparison {
                market_id: m.market.id.clone(),
                simulated,
                simulated_se,
                frequency,
                frequency_se,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentComparison {
    pub market_id: String,
    pub startup_id: String,
    pub eps_rejection: f64,
    pub eps_rejection_se: f64,
    pub eta_rejection: f64,
    pub eta_rejection_se: f64,
    pub eps_importance: f64,
    pub eps_importance_se: f64,
}

impl MomentComparison {
    pub fn eps_z(&self) -> f64 {
        (self.eps_rejection - self.eps_importance).abs()
            / self.eps_rejection_se.hypot(self.eps_importance_se)
    }

    pub fn eta_ratio(&self) -> f64 {
        self.eta_rejection / self.eps_rejection
    }
}

/// Rejection-sampled `E[ε|μ]`, `E[η|μ]` next to the importance-sampled
/// correction for every matched pair.
pub fn check_moments(
    markets: &[MatchedMarket],
    errors: &ErrorParams,
    n_rejection: usize,
    n_importance: usize,
    seed: u64,
) -> Result<Vec<MomentComparison>> {
    let params = tiny_params();
    let mut out = Vec::new();
    for (k, m) in markets.iter().enumerate() {
        let rej = rejection_conditional_moments(
            m,
            &params,
            errors,
            n_rejection,
            derive_seed(seed, k as u64),
        )?;
        let is = impute_correction(m, &params, n_importance, seed, k as u64)?;
        for (p, c) in rej.pairs.iter().zip(&is.rows) {
            out.push(MomentComparison {
                market_id: m.market.id.clone(),
                startup_id: p.startup_id.clone(),
                eps_rejection: p.eps_mean,
                eps_rejection_se: p.eps_se,
                eta_rejection: p.eta_mean,
                eta_rejection_se: p.eta_se,
                eps_importance: c.eps_hat,
                eps_importance_se: c.se,
            });
        }
    }
    Ok(out)
}

/// Rejection-sampled `E[η|μ]/E[ε|μ]` against `ρσ` on pairs whose `|E[ε|μ]|`
/// exceeds `min_eps`; returns the worst relative error and the pairs used.
pub fn scalar_multiple_error(
    comparisons: &[MomentComparison],
    errors: &ErrorParams,
    min_eps: f64,
) -> (f64, usize) {
    let target = errors.covariance();
    comparisons
        .iter()
        .filter(|c| c.eps_rejection.abs() > min_eps)
        .fold((0.0_f64, 0), |(worst, n), c| {
            (
                worst.max((c.eta_ratio() - target).abs() / target.abs()),
                n + 1,
            )
        })
}

/// Largest `|E[η|μ]|` in standard errors, the check for independent shocks.
pub fn max_eta_z(comparisons: &[MomentComparison]) -> f64 {
    comparisons
        .iter()
        .map(|c| c.eta_rejection.abs() / c.eta_rejection_se)
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TinySuiteSettings {
    pub uniqueness_markets: usize,
    pub likelihood_markets: usize,
    pub likelihood_draws: usize,
    pub frequency_draws: usize,
    pub moment_markets: usize,
    pub rejection_draws: usize,
    pub importance_draws: usize,
}

impl Default for TinySuiteSettings {
    fn default() -> Self {
        Self {
            uniqueness_markets: 1000,
            likelihood_markets: 20,
            likelihood_draws: 100_000,
            frequency_draws: 1_000_000,
            moment_markets: 10,
            rejection_draws: 1_000_000,
            importance_draws: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinySuiteReport {
    pub seed: u64,
    pub checks: Vec<CheckOutcome>,
}

impl TinySuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Every reference check at the strictness the estimator is held to.
pub fn run_tiny_suite(settings: &TinySuiteSettings, seed: u64) -> Result<TinySuiteReport> {
    let mut checks = Vec::new();

    let u = check_uniqueness(settings.uniqueness_markets, 4, 3, 8, derive_seed(seed, 1))?;
    checks.push(CheckOutcome {
        name: "unique stable matching".into(),
        passed: u.agreeing == u.markets,
        detail: format!("{}/{} markets agree", u.agreeing, u.markets),
    });

    let markets = tiny_markets(settings.likelihood_markets, derive_seed(seed, 2))?;
    let probs = check_likelihood(
        &markets,
        settings.likelihood_draws,
        settings.frequency_draws,
        derive_seed(seed, 3),
    )?;
    let within = probs.iter().filter(|c| c.z() <= 3.0).count();
    let needed = (probs.len() * 19).div_ceil(20);
    checks.push(CheckOutcome {
        name: "simulated likelihood".into(),
        passed: within >= needed,
        detail: format!(
            "{within}/{} markets within 3 SE (need {needed})",
            probs.len()
        ),
    });

    let markets = tiny_markets(settings.moment_markets, derive_seed(seed, 4))?;
    let correlated = ErrorParams::new(0.7, 2.0)?;
    let moments = check_moments(
        &markets,
        &correlated,
        settings.rejection_draws,
        settings.importance_draws,
        derive_seed(seed, 5),
    )?;
    let worst_z = moments
        .iter()
        .map(MomentComparison::eps_z)
        .fold(0.0, f64::max);
    checks.push(CheckOutcome {
        name: "importance vs rejection".into(),
        passed: worst_z <= 3.0,
        detail: format!("{} pairs, largest gap {worst_z:.2} SE", moments.len()),
    });
    let (worst, used) = scalar_multiple_error(&moments, &correlated, 0.1);
    checks.push(CheckOutcome {
        name: "scalar multiple".into(),
        passed: used > 0 && worst <= 0.1,
        detail: format!(
            "{used} pairs, largest relative error {worst:.4} against {}",
            correlated.covariance()
        ),
    });

    let independent = ErrorParams::new(0.0, 2.0)?;
    let null = check_moments(
        &markets,
        &independent,
        settings.rejection_draws,
        1000,
        derive_seed(seed, 6),
    )?;
    let z = max_eta_z(&null);
    checks.push(CheckOutcome {
        name: "independent shocks".into(),
        passed: z <= 3.0,
        detail: format!("{} pairs, largest |E[eta]| {z:.2} SE", null.len()),
    });

    Ok(TinySuiteReport { seed, checks })
}
