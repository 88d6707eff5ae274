//! Stability likelihood of an observed matching.
//!
//! Conditional on the shocks of the matched pairs, each unmatched pair
//! `(a, s')` fails to block exactly when its own shock stays below
//! `max(U_{μ(s'),s'}, min_{s∈μ⁻¹(a)} U_{as}) - Ū_{as'}`. Those shocks are
//! independent standard normals, so the conditional probability of the
//! observed matching is a product of `Φ` terms and only the matched-pair
//! shocks need to be simulated.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    deterministic_utility, Market, MatchParams, MatchedMarket, Matching, UtilityTable,
};
use crate::normal::{ln_phi, log_mean_exp};
use crate::rng::stream_rng;

/// Default number of simulated shock vectors per market.
pub const DEFAULT_DRAWS: usize = 10_000;

/// `T` draws of the matched-pair shocks of one market, one value per startup
/// (the startup's matched pair), stored draw-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsDraws {
    pub n_startups: usize,
    pub n_draws: usize,
    pub values: Vec<f64>,
}

impl EpsDraws {
    /// Draws for market number `stream` of a run seeded with `seed`.
    pub fn generate(n_startups: usize, n_draws: usize, seed: u64, stream: u64) -> Self {
        let mut rng = stream_rng(seed, stream);
        let values = (0..n_startups * n_draws)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            n_startups,
            n_draws,
            values,
        }
    }

    /// The shock vector with draw id `t`.
    #[inline]
    pub fn draw(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_startups..(t + 1) * self.n_startups]
    }
}

fn check_draw_len(market: &Market, eps: &[f64]) -> Result<()> {
    if eps.len() != market.n_startups() {
        return Err(Error::config(format!(
            "shock vector has {} entries, market `{}` has {} matched pairs",
            eps.len(),
            market.id,
            market.n_startups()
        )));
    }
    Ok(())
}

/// Threshold above which the shock of the unmatched pair `(a, s_prime)` makes it block.
pub fn blocking_threshold(
    market: &Market,
    matching: &Matching,
    ubar: &UtilityTable,
    eps_matched: &[f64],
    a: usize,
    s_prime: usize,
) -> Result<f64> {
    check_draw_len(market, eps_matched)?;
    let current = matching.accelerator_of(s_prime);
    if current == a {
        return Err(Error::config(format!(
            "pair ({}, {}) is matched; thresholds exist only for unmatched pairs",
            market.accelerators[a].id, market.startups[s_prime].id
        )));
    }
    let realized = |s: usize| ubar.get(matching.accelerator_of(s), s) + eps_matched[s];
    let worst_member = (0..market.n_startups())
        .filter(|&s| matching.accelerator_of(s) == a)
        .map(realized)
        .fold(f64::INFINITY, f64::min);
    let own = ubar.get(a, s_prime);
    Ok((realized(s_prime) - own).max(worst_member - own))
}

/// `Σ ln Φ(threshold)` over every unmatched pair, for one shock vector.
pub fn log_stability_prob(
    market: &Market,
    matching: &Matching,
    ubar: &UtilityTable,
    eps_matched: &[f64],
) -> Result<f64> {
    check_draw_len(market, eps_matched)?;
    let mut total = 0.0;
    for a in 0..market.n_accelerators() {
        for s in 0..market.n_startups() {
            if matching.accelerator_of(s) != a {
                total += ln_phi(blocking_threshold(
                    market,
                    matching,
                    ubar,
                    eps_matched,
                    a,
                    s,
                )?);
            }
        }
    }
    Ok(total)
}

/// One market laid out for repeated likelihood evaluation under common
/// random numbers.
#[derive(Clone, Debug)]
pub struct PreparedMarket {
    n_accelerators: usize,
    n_startups: usize,
    n_coef: usize,
    /// `design[(a * n_startups + s) * n_coef + j]`.
    design: Vec<f64>,
    assignment: Vec<usize>,
    members: Vec<Vec<usize>>,
    draws: EpsDraws,
}

impl PreparedMarket {
    pub fn new(observed: &MatchedMarket, names: &[String], draws: EpsDraws) -> Result<Self> {
        let market = &observed.market;
        let mut covs = market.covariate_names();
        covs.sort();
        let mut sorted = names.to_vec();
        sorted.sort();
        if covs != sorted {
            return Err(Error::config(format!(
                "market `{}` covariates {:?} do not match coefficients {:?}",
                market.id, covs, names
            )));
        }
        if draws.n_startups != market.n_startups() {
            return Err(Error::config("draw dimension does not match the market"));
        }
        let mut design = Vec::with_capacity(market.pair_covariates.len() * names.len());
        for pc in &market.pair_covariates {
            for n in names {
                design.push(pc.x[n]);
            }
        }
        Ok(Self {
            n_accelerators: market.n_accelerators(),
            n_startups: market.n_startups(),
            n_coef: names.len(),
            design,
            assignment: observed.matching.assignment.clone(),
            members: observed.matching.members(market.n_accelerators()),
            draws,
        })
    }

    pub fn n_draws(&self) -> usize {
        self.draws.n_draws
    }

    pub fn draws(&self) -> &EpsDraws {
        &self.draws
    }

    pub fn n_startups(&self) -> usize {
        self.n_startups
    }

    pub fn n_accelerators(&self) -> usize {
        self.n_accelerators
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn has_unmatched_pairs(&self) -> bool {
        self.n_accelerators > 1
    }

    /// Design row of pair `(a, s)`.
    pub fn row(&self, a: usize, s: usize) -> &[f64] {
        let i = (a * self.n_startups + s) * self.n_coef;
        &self.design[i..i + self.n_coef]
    }

    pub fn ubar(&self, beta: &[f64]) -> Vec<f64> {
        self.design
            .chunks_exact(self.n_coef.max(1))
            .map(|row| row.iter().zip(beta).map(|(x, b)| x * b).sum())
            .take(self.n_accelerators * self.n_startups)
            .collect()
    }

    /// `g(β, ε_t)` for every draw `t`.
    pub fn log_stability_probs(&self, beta: &[f64]) -> Vec<f64> {
        let n_s = self.n_startups;
        let ubar = if self.n_coef == 0 {
            vec![0.0; self.n_accelerators * n_s]
        } else {
            self.ubar(beta)
        };
        let mut realized = vec![0.0; n_s];
        let mut worst = vec![0.0; self.n_accelerators];
        (0..self.draws.n_draws)
            .map(|t| {
                if self.n_accelerators < 2 {
                    return 0.0;
                }
                let eps = self.draws.draw(t);
                for s in 0..n_s {
                    realized[s] = ubar[self.assignment[s] * n_s + s] + eps[s];
                }
                for (a, ms) in self.members.iter().enumerate() {
                    worst[a] = ms
                        .iter()
                        .map(|&s| realized[s])
                        .fold(f64::INFINITY, f64::min);
                }
                let mut g = 0.0;
                for a in 0..self.n_accelerators {
                    let row = &ubar[a * n_s..(a + 1) * n_s];
                    let w = worst[a];
                    for s in 0..n_s {
                        if self.assignment[s] != a {
                            g += ln_phi(realized[s].max(w) - row[s]);
                        }
                    }
                }
                g
            })
            .collect()
    }

    /// `ln((1/T) Σ_t exp g(β, ε_t))`.
    pub fn log_likelihood(&self, beta: &[f64]) -> f64 {
        if !self.has_unmatched_pairs() {
            return 0.0;
        }
        log_mean_exp(&self.log_stability_probs(beta))
    }

    /// Monte Carlo estimate of `Pr(μ | X)` with its standard error.
    pub fn likelihood_with_se(&self, beta: &[f64]) -> (f64, f64) {
        let probs: Vec<f64> = self
            .log_stability_probs(beta)
            .into_iter()
            .map(f64::exp)
            .collect();
        mean_and_se(&probs)
    }
}

pub(crate) fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Simulated log-likelihood over many markets with fixed draws.
#[derive(Clone, Debug)]
pub struct SmlObjective {
    names: Vec<String>,
    markets: Vec<PreparedMarket>,
}

impl SmlObjective {
    /// Draws for the `k`-th market come from stream `k` of `seed`.
    pub fn new(
        markets: &[MatchedMarket],
        names: &[String],
        n_draws: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_draws == 0 {
            return Err(Error::config(
                "number of simulation draws must be at least 1",
            ));
        }
        let markets = markets
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let draws = EpsDraws::generate(m.market.n_startups(), n_draws, seed, k as u64);
                PreparedMarket::new(m, names, draws)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            names: names.to_vec(),
            markets,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn markets(&self) -> &[PreparedMarket] {
        &self.markets
    }

    /// Per-market log-likelihood contributions, in market order.
    pub fn contributions(&self, beta: &[f64]) -> Vec<f64> {
        self.markets
            .par_iter()
            .map(|m| m.log_likelihood(beta))
            .collect()
    }

    /// Sum of per-market contributions; the reduction order is fixed so the
    /// value does not depend on the number of worker threads.
    pub fn value(&self, beta: &[f64]) -> f64 {
        self.contributions(beta).iter().sum()
    }
}

/// `Σ_k ln((1/T) Σ_t exp g_k(β, ε_t))` with draws fixed by `seed`.
pub fn simulated_log_likelihood(
    markets: &[MatchedMarket],
    params: &MatchParams,
    n_draws: usize,
    seed: u64,
) -> Result<f64> {
    let names = params.beta.names();
    for m in markets {
        params.check_aligned(&m.market.covariate_names())?;
    }
    let objective = SmlObjective::new(markets, &names, n_draws, seed)?;
    Ok(objective.value(&params.beta.values()))
}

/// Per-market `Pr(μ | X)` estimate and Monte Carlo standard error.
pub fn simulated_likelihood_with_se(
    observed: &MatchedMarket,
    params: &MatchParams,
    n_draws: usize,
    seed: u64,
    stream: u64,
) -> Result<(f64, f64)> {
    params.check_aligned(&observed.market.covariate_names())?;
    if n_draws == 0 {
        return Err(Error::config(
            "number of simulation draws must be at least 1",
        ));
    }
    let names = params.beta.names();
    let draws = EpsDraws::generate(observed.market.n_startups(), n_draws, seed, stream);
    let prepared = PreparedMarket::new(observed, &names, draws)?;
    Ok(prepared.likelihood_with_se(&params.beta.values()))
}

/// Convenience wrapper computing `Ū` and then [`log_stability_prob`].
pub fn log_stability_prob_at(
    observed: &MatchedMarket,
    params: &MatchParams,
    eps_matched: &[f64],
) -> Result<f64> {
    let ubar = deterministic_utility(&observed.market, params)?;
    log_stability_prob(&observed.market, &observed.matching, &ubar, eps_matched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::market_with_ubar;
    use crate::model::MatchParams;
    use proptest::prelude::*;

    fn two_by_two() -> MatchedMarket {
        let m = market_with_ubar(&[1, 1], &[vec![2.0, 1.0], vec![1.0, 0.5]]);
        MatchedMarket::new(m, Matching::new(vec![0, 1])).unwrap()
    }

    fn beta_one() -> MatchParams {
        MatchParams::new([("z", 1.0)]).unwrap()
    }

    #[test]
    fn threshold_two_by_two() {
        // Ū(a1,s2) = 1.0, realized U(a2,s2) = 0.5, realized U(a1,s1) = 2.0.
        let obs = two_by_two();
        let ubar = deterministic_utility(&obs.market, &beta_one()).unwrap();
        let th = blocking_threshold(&obs.market, &obs.matching, &ubar, &[0.0, 0.0], 0, 1).unwrap();
        assert_eq!(th, (0.5f64 - 1.0).max(2.0 - 1.0));
        assert_eq!(th, 1.0);
    }

    #[test]
    fn threshold_zero_when_matched_utilities_equal_the_pair_value() {
        let m = market_with_ubar(&[1, 1], &[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let obs = MatchedMarket::new(m, Matching::new(vec![0, 1])).unwrap();
        let ubar = deterministic_utility(&obs.market, &beta_one()).unwrap();
        let th = blocking_threshold(&obs.market, &obs.matching, &ubar, &[0.0, 0.0], 0, 1).unwrap();
        assert_eq!(th, 0.0);
    }

    #[test]
    fn startup_side_branch_moves_one_for_one() {
        let obs = two_by_two();
        let ubar = deterministic_utility(&obs.market, &beta_one()).unwrap();
        // Make the startup-side term bind: U(a2,s2) = 0.5 + 2 = 2.5 > U(a1,s1) = 2.
        let base =
            blocking_threshold(&obs.market, &obs.matching, &ubar, &[0.0, 2.0], 0, 1).unwrap();
        let up = blocking_threshold(&obs.market, &obs.matching, &ubar, &[0.0, 3.0], 0, 1).unwrap();
        assert!((up - base - 1.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_on_matched_pair_is_rejected() {
        let obs = two_by_two();
        let ubar = deterministic_utility(&obs.market, &beta_one()).unwrap();
        assert!(blocking_threshold(&obs.market, &obs.matching, &ubar, &[0.0, 0.0], 0, 0).is_err());
    }

    #[test]
    fn single_accelerator_has_log_probability_zero() {
        let m = market_with_ubar(&[3], &[vec![0.1, 0.2, 0.3]]);
        let obs = MatchedMarket::new(m, Matching::new(vec![0, 0, 0])).unwrap();
        assert_eq!(
            log_stability_prob_at(&obs, &beta_one(), &[0.3, -1.0, 2.0]).unwrap(),
            0.0
        );
        assert_eq!(
            simulated_log_likelihood(&[obs], &beta_one(), 50, 1).unwrap(),
            0.0
        );
    }

    #[test]
    fn one_unmatched_pair_at_threshold_zero() {
        let m = market_with_ubar(&[1, 1], &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let obs = MatchedMarket::new(m, Matching::new(vec![0, 1])).unwrap();
        let ubar = deterministic_utility(&obs.market, &beta_one()).unwrap();
        let th = blocking_threshold(&obs.market, &obs.matching, &ubar, &[0.0, 0.0], 1, 0).unwrap();
        assert_eq!(th, 0.0);
        assert!((ln_phi(th) - 0.5f64.ln()).abs() < 1e-15);
        // Both unmatched pairs sit at threshold zero.
        let lp = log_stability_prob(&obs.market, &obs.matching, &ubar, &[0.0, 0.0]).unwrap();
        assert!((lp - 2.0 * 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_by_two_log_probability_matches_a_scalar_cdf() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let obs = two_by_two();
        let ubar = deterministic_utility(&obs.market, &beta_one()).unwrap();
        let eps = [0.3, -0.4];
        // (a2, s1): max(U(a1,s1), U(a2,s2)) - Ū(a2,s1) = max(2.3, 0.1) - 1.0
        // (a1, s2): max(U(a2,s2), U(a1,s1)) - Ū(a1,s2) = max(0.1, 2.3) - 1.0
        let n = Normal::standard();
        let want = n.cdf(1.3).ln() + n.cdf(1.3).ln();
        let got = log_stability_prob(&obs.market, &obs.matching, &ubar, &eps).unwrap();
        // statrs' CDF is good to roughly 1e-11 here; the tighter check is a
        // 30-digit reference for 2 ln Φ(1.3).
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        #[allow(clippy::excessive_precision)]
        let frozen = -0.203623605335310061;
        assert!((got - frozen).abs() < 1e-15, "{got}");
    }

    #[test]
    fn zero_draws_is_a_config_error() {
        assert!(matches!(
            simulated_log_likelihood(&[two_by_two()], &beta_one(), 0, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn prepared_path_agrees_with_the_reference_path() {
        let obs = two_by_two();
        let draws = EpsDraws::generate(2, 40, 11, 0);
        let names = vec!["z".to_string()];
        let prepared = PreparedMarket::new(&obs, &names, draws.clone()).unwrap();
        let fast = prepared.log_stability_probs(&[0.8]);
        let p = MatchParams::new([("z", 0.8)]).unwrap();
        for (t, g) in fast.iter().enumerate() {
            let slow = log_stability_prob_at(&obs, &p, draws.draw(t)).unwrap();
            assert!((g - slow).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let obs = vec![two_by_two(), two_by_two()];
        let a = simulated_log_likelihood(&obs, &beta_one(), 500, 3).unwrap();
        let b = simulated_log_likelihood(&obs, &beta_one(), 500, 3).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn identically_zero_covariate_does_not_matter() {
        let obs = two_by_two();
        let mut with_zero = obs.clone();
        with_zero.market.recipe.terms.push("zero".into());
        for pc in &mut with_zero.market.pair_covariates {
            pc.x.insert("zero".into(), 0.0);
        }
        let base = simulated_log_likelihood(&[obs], &beta_one(), 300, 5).unwrap();
        for c in [-3.0, 0.0, 7.5] {
            let p = MatchParams::new([("z", 1.0), ("zero", c)]).unwrap();
            let v = simulated_log_likelihood(&[with_zero.clone()], &p, 300, 5).unwrap();
            assert_eq!(v, base);
        }
    }

    proptest! {
        #[test]
        fn stability_probability_is_a_probability(
            eps in proptest::collection::vec(-4.0f64..4.0, 3), b in -3.0f64..3.0,
        ) {
            let m = market_with_ubar(&[1, 2], &[vec![0.5, -1.0, 2.0], vec![1.0, 0.0, -0.5]]);
            let obs = MatchedMarket::new(m, Matching::new(vec![0, 1, 1])).unwrap();
            let g = log_stability_prob_at(&obs, &MatchParams::new([("z", b)]).unwrap(), &eps).unwrap();
            prop_assert!(g <= 0.0);
            prop_assert!(g.exp() > 0.0 && g.exp() <= 1.0);
        }

        #[test]
        fn raising_an_unmatched_pair_value_lowers_stability(
            eps in proptest::collection::vec(-3.0f64..3.0, 3), bump in 0.0f64..3.0,
        ) {
            let rows = vec![vec![0.5, -1.0, 2.0], vec![1.0, 0.0, -0.5]];
            let obs = |r: &Vec<Vec<f64>>| {
                MatchedMarket::new(market_with_ubar(&[1, 2], r), Matching::new(vec![0, 1, 1])).unwrap()
            };
            let mut bumped = rows.clone();
            bumped[0][1] += bump; // (a1, s2) is unmatched
            let g0 = log_stability_prob_at(&obs(&rows), &beta_one(), &eps).unwrap();
            let g1 = log_stability_prob_at(&obs(&bumped), &beta_one(), &eps).unwrap();
            prop_assert!(g1 <= g0 + 1e-15);
        }
    }
}
