//! Brute-force references: exhaustive stable-matching enumeration, frequency
//! estimates of matching probabilities, and rejection-sampled conditional
//! shock means. Slow by design; used to check the fast paths.

pub mod suite;

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::{is_stable, solve_greedy};
use crate::model::{
    deterministic_utility, Accelerator, CovariateRecipe, ErrorParams, Market, MatchParams,
    MatchedMarket, Matching, Startup, UtilityTable,
};
use crate::rng::stream_rng;

/// Largest number of quota-respecting assignments [`enumerate_stable`] will visit.
pub const MAX_ENUMERATION: u128 = 1_000_000;
pub const MAX_ENUMERATION_STARTUPS: usize = 10;
pub const MIN_MC_DRAWS: usize = 10_000;
pub const MIN_ACCEPTED: usize = 200;

/// Draws per independent random stream. Fixed so that results do not depend
/// on how many threads share the work.
const CHUNK: usize = 1 << 14;

/// Number of total assignments with exactly `quota[a]` startups per accelerator.
pub fn count_assignments(quotas: &[usize]) -> u128 {
    // multinomial n! / Π q_a!, built as a product of binomials
    let mut remaining: u128 = quotas.iter().sum::<usize>() as u128;
    let mut total: u128 = 1;
    for &q in quotas {
        let mut c: u128 = 1;
        for i in 0..q as u128 {
            c = c * (remaining - i) / (i + 1);
        }
        total = total.saturating_mul(c);
        remaining -= q as u128;
    }
    total
}

fn visit(
    quotas: &mut [usize],
    assignment: &mut Vec<usize>,
    n: usize,
    out: &mut dyn FnMut(&[usize]),
) {
    if assignment.len() == n {
        out(assignment);
        return;
    }
    for a in 0..quotas.len() {
        if quotas[a] > 0 {
            quotas[a] -= 1;
            assignment.push(a);
            visit(quotas, assignment, n, out);
            assignment.pop();
            quotas[a] += 1;
        }
    }
}

/// Every quota-respecting total assignment that admits no blocking pair.
pub fn enumerate_stable(market: &Market, utilities: &UtilityTable) -> Result<Vec<Matching>> {
    utilities.check_shape(market)?;
    let n = market.n_startups();
    let count = count_assignments(&market.quotas());
    if n > MAX_ENUMERATION_STARTUPS || count > MAX_ENUMERATION {
        return Err(Error::Oracle(format!(
            "market `{}` has {n} startups and {count} feasible assignments; the limits are {MAX_ENUMERATION_STARTUPS} and {MAX_ENUMERATION}",
            market.id
        )));
    }
    let mut quotas = market.quotas();
    let mut found = Vec::new();
    visit(
        &mut quotas,
        &mut Vec::with_capacity(n),
        n,
        &mut |assignment| {
            let m = Matching::new(assignment.to_vec());
            if is_stable(market, utilities, &m) {
                found.push(m);
            }
        },
    );
    Ok(found)
}

fn full_shocks(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

fn chunks(n_draws: usize) -> Vec<(u64, usize)> {
    (0..n_draws.div_ceil(CHUNK))
        .map(|c| (c as u64, CHUNK.min(n_draws - c * CHUNK)))
        .collect()
}

/// How often each matching arises when every pair shock is drawn fresh.
pub fn mc_matching_frequencies(
    market: &Market,
    params: &MatchParams,
    n_draws: usize,
    seed: u64,
) -> Result<BTreeMap<Vec<usize>, usize>> {
    if n_draws < MIN_MC_DRAWS {
        return Err(Error::config(format!(
            "frequency estimates need at least {MIN_MC_DRAWS} draws, got {n_draws}"
        )));
    }
    let ubar = deterministic_utility(market, params)?;
    let quotas = market.quotas();
    let parts: Vec<BTreeMap<Vec<usize>, usize>> = chunks(n_draws)
        .into_par_iter()
        .map(|(c, len)| {
            let mut rng = stream_rng(seed, c);
            let mut u = ubar.clone();
            let mut eps = vec![0.0; ubar.values.len()];
            let mut counts = BTreeMap::new();
            for _ in 0..len {
                full_shocks(&mut rng, &mut eps);
                for ((u, b), e) in u.values.iter_mut().zip(&ubar.values).zip(&eps) {
                    *u = b + e;
                }
                *counts
                    .entry(solve_greedy(&quotas, &u).assignment)
                    .or_insert(0) += 1;
            }
            counts
        })
        .collect();
    let mut total = BTreeMap::new();
    for part in parts {
        for (k, v) in part {
            *total.entry(k).or_insert(0) += v;
        }
    }
    Ok(total)
}

/// Frequency of the observed matching and its binomial standard error.
pub fn mc_matching_probability(
    observed: &MatchedMarket,
    params: &MatchParams,
    n_draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let counts = mc_matching_frequencies(&observed.market, params, n_draws, seed)?;
    let hits = counts
        .get(&observed.matching.assignment)
        .copied()
        .unwrap_or(0);
    let p = hits as f64 / n_draws as f64;
    Ok((p, (p * (1.0 - p) / n_draws as f64).sqrt()))
}

/// Rejection-sampled means of the matched-pair shocks given the matching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMoments {
    pub startup_id: String,
    pub accelerator_id: String,
    pub eps_mean: f64,
    pub eps_se: f64,
    pub eta_mean: f64,
    pub eta_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMoments {
    pub accepted: usize,
    pub n_draws: usize,
    pub pairs: Vec<PairMoments>,
}

struct Sums {
    accepted: usize,
    eps: Vec<f64>,
    eps2: Vec<f64>,
    eta: Vec<f64>,
    eta2: Vec<f64>,
}

impl Sums {
    fn new(n: usize) -> Self {
        Self {
            accepted: 0,
            eps: vec![0.0; n],
            eps2: vec![0.0; n],
            eta: vec![0.0; n],
            eta2: vec![0.0; n],
        }
    }

    fn merge(mut self, other: Self) -> Self {
        self.accepted += other.accepted;
        for (dst, src) in [
            (&mut self.eps, &other.eps),
            (&mut self.eps2, &other.eps2),
            (&mut self.eta, &other.eta),
            (&mut self.eta2, &other.eta2),
        ] {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        self
    }
}

/// Draws `(ε, η)` for every pair, keeps the draws whose stable matching is
/// the observed one, and averages the matched pairs' shocks.
pub fn rejection_conditional_moments(
    observed: &MatchedMarket,
    params: &MatchParams,
    errors: &ErrorParams,
    n_draws: usize,
    seed: u64,
) -> Result<ConditionalMoments> {
    let market = &observed.market;
    let ubar = deterministic_utility(market, params)?;
    let quotas = market.quotas();
    let (n_a, n_s) = (market.n_accelerators(), market.n_startups());
    let target = &observed.matching.assignment;
    let (rho, sigma) = (errors.rho, errors.sigma);
    let resid = sigma * (1.0 - rho * rho).sqrt();

    let sums = chunks(n_draws)
        .into_par_iter()
        .map(|(c, len)| {
            let mut rng = stream_rng(seed, c);
            let mut u = ubar.clone();
            let mut eps = vec![0.0; n_a * n_s];
            let mut z = vec![0.0; n_a * n_s];
            let mut sums = Sums::new(n_s);
            for _ in 0..len {
                full_shocks(&mut rng, &mut eps);
                full_shocks(&mut rng, &mut z);
                for ((u, b), e) in u.values.iter_mut().zip(&ubar.values).zip(&eps) {
                    *u = b + e;
                }
                if solve_greedy(&quotas, &u).assignment != *target {
                    continue;
                }
                sums.accepted += 1;
                for (s, &a) in target.iter().enumerate() {
                    let i = a * n_s + s;
                    let eta = rho * sigma * eps[i] + resid * z[i];
                    sums.eps[s] += eps[i];
                    sums.eps2[s] += eps[i] * eps[i];
                    sums.eta[s] += eta;
                    sums.eta2[s] += eta * eta;
                }
            }
            sums
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(Sums::new(n_s), Sums::merge);

    if sums.accepted < MIN_ACCEPTED {
        return Err(Error::Oracle(format!(
            "only {} of {n_draws} draws reproduced the matching of market `{}` (acceptance rate {:.2e}); need {MIN_ACCEPTED}",
            sums.accepted,
            market.id,
            sums.accepted as f64 / n_draws as f64
        )));
    }
    let k = sums.accepted as f64;
    let mean_se = |sum: f64, sum2: f64| {
        let m = sum / k;
        let var = ((sum2 / k - m * m) * k / (k - 1.0)).max(0.0);
        (m, (var / k).sqrt())
    };
    let pairs = (0..n_s)
        .map(|s| {
            let (eps_mean, eps_se) = mean_se(sums.eps[s], sums.eps2[s]);
            let (eta_mean, eta_se) = mean_se(sums.eta[s], sums.eta2[s]);
            PairMoments {
                startup_id: market.startups[s].id.clone(),
                accelerator_id: market.accelerators[target[s]].id.clone(),
                eps_mean,
                eps_se,
                eta_mean,
                eta_se,
            }
        })
        .collect();
    Ok(ConditionalMoments {
        accepted: sums.accepted,
        n_draws,
        pairs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub market_id: String,
    pub n_stable_found: usize,
    pub stable: Vec<Vec<usize>>,
    pub mc_probability: f64,
    pub mc_probability_se: f64,
    pub moments: Option<ConditionalMoments>,
}

/// Runs every oracle on one tiny market. The conditional moments are omitted
/// when too few draws reproduce the matching.
pub fn oracle_report(
    observed: &MatchedMarket,
    params: &MatchParams,
    errors: &ErrorParams,
    n_draws: usize,
    seed: u64,
) -> Result<OracleReport> {
    let ubar = deterministic_utility(&observed.market, params)?;
    let stable = enumerate_stable(&observed.market, &ubar)?;
    let (p, se) = mc_matching_probability(observed, params, n_draws, seed)?;
    let moments = match rejection_conditional_moments(observed, params, errors, n_draws, seed) {
        Ok(m) => Some(m),
        Err(Error::Oracle(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(OracleReport {
        market_id: observed.market.id.clone(),
        n_stable_found: stable.len(),
        stable: stable.into_iter().map(|m| m.assignment).collect(),
        mc_probability: p,
        mc_probability_se: se,
        moments,
    })
}

/// Covariates of the tiny reference markets: a startup quality score, an
/// accelerator prestige score, and relocation.
pub fn tiny_params() -> MatchParams {
    MatchParams {
        beta: crate::model::NamedVector::new([
            ("quality", 0.8),
            ("prestige", 0.5),
            ("relocated", -1.0),
        ]),
    }
}

/// A small random market under [`tiny_params`]'s recipe, matched by solving
/// one draw of the full shock matrix.
pub fn tiny_market(id: &str, quotas: &[usize], seed: u64) -> Result<MatchedMarket> {
    use rand::Rng;
    const STATES: [&str; 4] = ["CA", "NY", "TX", "WA"];
    let mut rng = stream_rng(seed, 0);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let accelerators: Vec<Accelerator> = quotas
        .iter()
        .enumerate()
        .map(|(i, &quota)| Accelerator {
            id: format!("a{i}"),
            quota,
            state: STATES[i % STATES.len()].into(),
            equity_share: 0.06,
            features: [("prestige".to_string(), normal(&mut rng))].into(),
        })
        .collect();
    let n: usize = quotas.iter().sum();
    let startups = (0..n)
        .map(|j| {
            let home = STATES[rng.random_range(0..quotas.len().min(STATES.len()))];
            Startup {
                id: format!("s{j}"),
                home_state: home.into(),
                industry: String::new(),
                cohort_year: 2020,
                features: [("quality".to_string(), normal(&mut rng))].into(),
            }
        })
        .collect();
    let market = Market::new(
        id,
        accelerators,
        startups,
        CovariateRecipe::new(["quality", "prestige", "relocated"]),
    )?;
    let ubar = deterministic_utility(&market, &tiny_params())?;
    let mut u = ubar.clone();
    for v in &mut u.values {
        *v += normal(&mut rng);
    }
    let matching = solve_greedy(&market.quotas(), &u);
    MatchedMarket::new(market, matching)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::solve_stable;
    use crate::model::fixtures::market_with_ubar;

    fn z() -> MatchParams {
        MatchParams::new([("z", 1.0)]).unwrap()
    }

    #[test]
    fn tiny_markets_are_valid_and_reproducible() {
        let a = tiny_market("t", &[1, 2], 4).unwrap();
        assert_eq!(a, tiny_market("t", &[1, 2], 4).unwrap());
        assert_eq!(a.market.n_startups(), 3);
        assert_eq!(a.market.covariate_names().len(), 3);
    }

    #[test]
    fn assignment_counts() {
        assert_eq!(count_assignments(&[1, 1]), 2);
        assert_eq!(count_assignments(&[2, 1]), 3);
        assert_eq!(count_assignments(&[3, 3, 2]), 560);
        assert_eq!(count_assignments(&[5]), 1);
    }

    #[test]
    fn hand_built_two_by_two_has_the_greedy_matching_only() {
        let m = market_with_ubar(&[1, 1], &[vec![2.0, 1.5], vec![1.0, 0.5]]);
        let u = deterministic_utility(&m, &z()).unwrap();
        let stable = enumerate_stable(&m, &u).unwrap();
        assert_eq!(stable, vec![Matching::new(vec![0, 1])]);
        assert_eq!(stable[0], solve_stable(&m, &u).unwrap());
    }

    #[test]
    fn one_accelerator_has_one_feasible_and_stable_matching() {
        let m = market_with_ubar(&[4], &[vec![0.3, -1.0, 2.0, 0.0]]);
        let u = deterministic_utility(&m, &z()).unwrap();
        assert_eq!(enumerate_stable(&m, &u).unwrap().len(), 1);
        let obs = MatchedMarket::new(m, Matching::new(vec![0; 4])).unwrap();
        assert_eq!(
            mc_matching_probability(&obs, &z(), MIN_MC_DRAWS, 1).unwrap(),
            (1.0, 0.0)
        );
    }

    #[test]
    fn enumeration_guard_reports_size() {
        let m = market_with_ubar(&[6, 5], &[vec![0.0; 11], vec![0.0; 11]]);
        let u = deterministic_utility(&m, &z()).unwrap();
        let err = enumerate_stable(&m, &u).unwrap_err().to_string();
        assert!(err.contains("11 startups"), "{err}");
    }

    #[test]
    fn symmetric_market_splits_evenly() {
        let m = market_with_ubar(&[1, 1], &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let n = 40_000;
        let counts = mc_matching_frequencies(&m, &z(), n, 3).unwrap();
        assert_eq!(counts.values().sum::<usize>(), n);
        for assignment in [vec![0, 1], vec![1, 0]] {
            let p = counts[&assignment] as f64 / n as f64;
            let se = (0.25 / n as f64).sqrt();
            assert!((p - 0.5).abs() <= 3.0 * se, "{p}");
        }
    }

    #[test]
    fn frequencies_do_not_depend_on_thread_count() {
        let m = market_with_ubar(&[1, 2], &[vec![0.5, 0.0, -0.2], vec![0.1, 0.3, 0.0]]);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| mc_matching_frequencies(&m, &z(), 50_000, 5).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn too_few_acceptances_is_an_error() {
        // The observed matching is the reverse of a wide utility gap.
        let m = market_with_ubar(&[1, 1], &[vec![9.0, -9.0], vec![-9.0, 9.0]]);
        let obs = MatchedMarket::new(m, Matching::new(vec![1, 0])).unwrap();
        let err = rejection_conditional_moments(
            &obs,
            &z(),
            &ErrorParams {
                rho: 0.5,
                sigma: 1.0,
            },
            20_000,
            1,
        );
        assert!(matches!(err, Err(Error::Oracle(_))));
    }

    #[test]
    fn uncorrelated_outcome_shock_has_zero_conditional_mean() {
        let m = market_with_ubar(&[1, 2], &[vec![0.8, 0.0, -0.3], vec![0.0, 0.4, 0.2]]);
        let obs = MatchedMarket::new(m, Matching::new(vec![0, 1, 1])).unwrap();
        let cm = rejection_conditional_moments(
            &obs,
            &z(),
            &ErrorParams {
                rho: 0.0,
                sigma: 1.0,
            },
            100_000,
            2,
        )
        .unwrap();
        for p in &cm.pairs {
            assert!(p.eta_mean.abs() <= 3.0 * p.eta_se, "{p:?}");
        }
    }
}
