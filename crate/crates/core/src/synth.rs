//! Synthetic markets with known coefficients and shocks.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::solve_stable;
use crate::model::{
    build_pair_covariates, deterministic_utility, Accelerator, CovariateRecipe, ErrorParams,
    FeatureMap, Market, MatchParams, MatchedMarket, NamedVector, Startup, UtilityTable,
};
use crate::regression::{OutcomeRow, OutcomeTable, INTERCEPT};
use crate::rng::stream_rng;

const INDUSTRIES: &[&str] = &[
    "biotech",
    "consumer",
    "enterprise",
    "fintech",
    "hardware",
    "software",
];
const HUB_STATES: &[&str] = &["CA", "MA", "NY"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_markets: usize,
    pub accelerators_per_market: usize,
    /// Quotas are uniform on `quota_min..=quota_max`.
    pub quota_min: usize,
    pub quota_max: usize,
    pub states: Vec<String>,
    /// Probability that a startup's home state is that of one of the market's accelerators.
    pub local_prob: f64,
    pub female_prob: f64,
    pub no_serial_prob: f64,
    pub grad_prob: f64,
    pub phd_prob: f64,
    pub stem_prob: f64,
    pub all_men_prob: f64,
    pub founder_age_mean: f64,
    pub founder_age_sd: f64,
    pub equity_mean: f64,
    pub equity_sd: f64,
    pub start_year: i32,
    pub recipe: CovariateRecipe,
    pub beta_true: MatchParams,
    pub error: ErrorParams,
    /// Outcome coefficients; `intercept` plus any covariate terms.
    pub alpha_true: NamedVector,
    /// Binary outcomes `name = 1{y > threshold}`.
    pub thresholds: Vec<(String, f64)>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_markets: 37,
            accelerators_per_market: 2,
            quota_min: 5,
            quota_max: 15,
            states: ["CA", "NY", "MA", "TX", "WA", "IL", "CO", "GA"]
                .map(String::from)
                .to_vec(),
            local_prob: 0.8,
            female_prob: 0.086,
            no_serial_prob: 0.6,
            grad_prob: 0.45,
            phd_prob: 0.12,
            stem_prob: 0.6,
            all_men_prob: 0.5,
            founder_age_mean: 33.0,
            founder_age_sd: 6.0,
            equity_mean: 0.062,
            equity_sd: 0.01,
            start_year: 2008,
            recipe: CovariateRecipe::default(),
            beta_true: MatchParams {
                beta: NamedVector::new([
                    ("female_founder", -0.326),
                    ("relocated", -2.692),
                    ("log_cohort_size", 0.652),
                ]),
            },
            error: ErrorParams {
                rho: 0.35,
                sigma: 1.0,
            },
            alpha_true: NamedVector::new([
                (INTERCEPT, 0.0),
                ("female_founder", -0.15),
                ("relocated", 0.15),
                ("log_cohort_size", 0.1),
            ]),
            thresholds: vec![
                ("funded".into(), -0.5),
                ("raised_1m".into(), 0.0),
                ("raised_2m".into(), 0.5),
                ("raised_5m".into(), 1.0),
            ],
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_markets == 0 || self.accelerators_per_market == 0 {
            return Err(Error::config(
                "need at least one market and one accelerator per market",
            ));
        }
        if self.quota_min == 0 || self.quota_min > self.quota_max {
            return Err(Error::config(format!(
                "quota range {}..={} is infeasible",
                self.quota_min, self.quota_max
            )));
        }
        if self.states.len() < self.accelerators_per_market {
            return Err(Error::config(
                "need at least as many states as accelerators per market",
            ));
        }
        for (name, p) in [
            ("local_prob", self.local_prob),
            ("female_prob", self.female_prob),
            ("no_serial_prob", self.no_serial_prob),
            ("grad_prob", self.grad_prob),
            ("phd_prob", self.phd_prob),
            ("stem_prob", self.stem_prob),
            ("all_men_prob", self.all_men_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!(
                    "{name} must be a probability, got {p}"
                )));
            }
        }
        ErrorParams::new(self.error.rho, self.error.sigma)?;
        let mut names = self.recipe.terms.clone();
        names.sort();
        if names != self.beta_true.beta.names() {
            return Err(Error::config(format!(
                "beta_true names {:?} do not match the recipe {:?}",
                self.beta_true.beta.names(),
                self.recipe.terms
            )));
        }
        Ok(())
    }

    fn outcome_recipe(&self) -> CovariateRecipe {
        CovariateRecipe::new(
            self.alpha_true
                .names()
                .into_iter()
                .filter(|n| n != INTERCEPT),
        )
    }
}

/// Every shock of one market, row-major `|A| x |S|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketTruth {
    pub market_id: String,
    pub n_accelerators: usize,
    pub n_startups: usize,
    pub eps: Vec<f64>,
    pub eta: Vec<f64>,
}

impl MarketTruth {
    pub fn eps_at(&self, a: usize, s: usize) -> f64 {
        self.eps[a * self.n_startups + s]
    }

    pub fn eta_at(&self, a: usize, s: usize) -> f64 {
        self.eta[a * self.n_startups + s]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SimConfig,
    pub markets: Vec<MarketTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub observed: Vec<MatchedMarket>,
    pub outcomes: OutcomeTable,
    pub truth: GroundTruth,
}

fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_market(config: &SimConfig, k: usize, rng: &mut ChaCha8Rng) -> Result<Market> {
    let mut states = config.states.clone();
    states.shuffle(rng);
    let accelerators: Vec<Accelerator> = (0..config.accelerators_per_market)
        .map(|i| {
            let quota = rng.random_range(config.quota_min..=config.quota_max);
            let state = states[i].clone();
            let all_men = bernoulli(rng, config.all_men_prob);
            let in_hub = if HUB_STATES.contains(&state.as_str()) {
                1.0
            } else {
                0.0
            };
            let equity = (config.equity_mean + config.equity_sd * normal(rng)).clamp(0.01, 0.2);
            let features = FeatureMap::from([
                ("log_cohort_size".into(), (quota as f64).ln()),
                ("cohort_size".into(), quota as f64),
                ("experience_years".into(), rng.random_range(0.0..8.0)),
                ("in_hub".into(), in_hub),
                ("all_men".into(), all_men),
                ("has_female_founder".into(), 1.0 - all_men),
            ]);
            Accelerator {
                id: format!("m{k:03}-a{i}"),
                quota,
                state,
                equity_share: equity,
                features,
            }
        })
        .collect();

    let n_s: usize = accelerators.iter().map(|a| a.quota).sum();
    let year = config.start_year + (k / 2) as i32;
    let startups = (0..n_s)
        .map(|j| {
            let home_state = if rng.random::<f64>() < config.local_prob {
                accelerators[rng.random_range(0..accelerators.len())]
                    .state
                    .clone()
            } else {
                config.states[rng.random_range(0..config.states.len())].clone()
            };
            let grad = bernoulli(rng, config.grad_prob);
            let phd = grad * bernoulli(rng, config.phd_prob / config.grad_prob.max(1e-12));
            let features = FeatureMap::from([
                ("female_founder".into(), bernoulli(rng, config.female_prob)),
                (
                    "no_serial_founder".into(),
                    bernoulli(rng, config.no_serial_prob),
                ),
                ("grad_degree".into(), grad),
                ("phd_degree".into(), phd),
                ("stem_degree".into(), bernoulli(rng, config.stem_prob)),
                ("startup_age".into(), rng.random_range(0.0..4.0)),
                (
                    "avg_founder_age".into(),
                    (config.founder_age_mean + config.founder_age_sd * normal(rng))
                        .clamp(20.0, 65.0),
                ),
                ("team_size".into(), rng.random_range(1..=4) as f64),
            ]);
            Startup {
                id: format!("m{k:03}-s{j:02}"),
                home_state,
                industry: INDUSTRIES[rng.random_range(0..INDUSTRIES.len())].into(),
                cohort_year: year,
                features,
            }
        })
        .collect();

    Market::new(
        format!("m{k:03}"),
        accelerators,
        startups,
        config.recipe.clone(),
    )
}

struct MarketDraw {
    observed: MatchedMarket,
    rows: Vec<OutcomeRow>,
    truth: MarketTruth,
}

fn generate_market(config: &SimConfig, k: usize) -> Result<MarketDraw> {
    let mut rng = stream_rng(config.seed, k as u64);
    let market = draw_market(config, k, &mut rng)?;
    let (n_a, n_s) = (market.n_accelerators(), market.n_startups());
    let ErrorParams { rho, sigma } = config.error;
    let mut eps = Vec::with_capacity(n_a * n_s);
    let mut eta = Vec::with_capacity(n_a * n_s);
    for _ in 0..n_a * n_s {
        let e = normal(&mut rng);
        let z = normal(&mut rng);
        eps.push(e);
        eta.push(rho * sigma * e + sigma * (1.0 - rho * rho).sqrt() * z);
    }
    let ubar = deterministic_utility(&market, &config.beta_true)?;
    let u = UtilityTable::new(
        n_a,
        n_s,
        ubar.values.iter().zip(&eps).map(|(a, b)| a + b).collect(),
    )?;
    let matching = solve_stable(&market, &u)?;

    let outcome_recipe = config.outcome_recipe();
    let intercept = config.alpha_true.get(INTERCEPT).unwrap_or(0.0);
    let mut rows = Vec::with_capacity(n_s);
    for (s, st) in market.startups.iter().enumerate() {
        let a = matching.accelerator_of(s);
        let acc = &market.accelerators[a];
        let x = build_pair_covariates(st, acc, &outcome_recipe)?.x;
        let y = intercept
            + x.iter()
                .map(|(k, v)| v * config.alpha_true.get(k).unwrap_or(0.0))
                .sum::<f64>()
            + eta[a * n_s + s];
        let mut values = st.features.clone();
        values.extend(acc.features.iter().map(|(k, v)| (k.clone(), *v)));
        values.extend(x);
        values.insert("y".into(), y);
        for (name, t) in &config.thresholds {
            values.insert(name.clone(), if y > *t { 1.0 } else { 0.0 });
        }
        rows.push(OutcomeRow {
            market_id: market.id.clone(),
            startup_id: st.id.clone(),
            accelerator_id: acc.id.clone(),
            year: st.cohort_year,
            industry: st.industry.clone(),
            values,
        });
    }
    let truth = MarketTruth {
        market_id: market.id.clone(),
        n_accelerators: n_a,
        n_startups: n_s,
        eps,
        eta,
    };
    Ok(MarketDraw {
        observed: MatchedMarket::new(market, matching)?,
        rows,
        truth,
    })
}

/// Draws covariates and shocks, solves each market, and builds outcomes.
/// Market `k` uses only stream `k` of the seed, so results do not depend on
/// the number of worker threads.
pub fn generate(config: &SimConfig) -> Result<SyntheticData> {
    config.validate()?;
    let draws = (0..config.n_markets)
        .into_par_iter()
        .map(|k| generate_market(config, k))
        .collect::<Result<Vec<_>>>()?;
    let mut observed = Vec::with_capacity(draws.len());
    let mut rows = Vec::new();
    let mut truth = Vec::with_capacity(draws.len());
    for d in draws {
        observed.push(d.observed);
        rows.extend(d.rows);
        truth.push(d.truth);
    }
    Ok(SyntheticData {
        observed,
        outcomes: OutcomeTable { rows },
        truth: GroundTruth {
            config: config.clone(),
            markets: truth,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_market;

    fn moments(data: &SyntheticData) -> (f64, f64, f64, usize) {
        let pairs: Vec<(f64, f64)> = data
            .truth
            .markets
            .iter()
            .flat_map(|m| m.eps.iter().copied().zip(m.eta.iter().copied()))
            .collect();
        let n = pairs.len() as f64;
        let me = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let mh = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let cov = pairs.iter().map(|p| (p.0 - me) * (p.1 - mh)).sum::<f64>() / (n - 1.0);
        let ve = pairs.iter().map(|p| (p.0 - me).powi(2)).sum::<f64>() / (n - 1.0);
        let vh = pairs.iter().map(|p| (p.1 - mh).powi(2)).sum::<f64>() / (n - 1.0);
        (cov, ve, vh, pairs.len())
    }

    fn big(rho: f64, sigma: f64, seed: u64) -> SyntheticData {
        generate(&SimConfig {
            n_markets: 1400,
            quota_min: 12,
            quota_max: 24,
            error: ErrorParams { rho, sigma },
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn independent_shocks_are_uncorrelated() {
        let data = big(0.0, 1.0, 1);
        let (cov, ve, vh, n) = moments(&data);
        assert!(n >= 100_000, "{n}");
        let corr = cov / (ve * vh).sqrt();
        assert!(corr.abs() <= 0.01, "{corr}");
    }

    #[test]
    fn covariance_matches_rho_sigma() {
        let data = big(0.7, 2.0, 2);
        let (cov, ve, vh, n) = moments(&data);
        // Var of the product of jointly normal variables is σ_ε²σ_η² + cov².
        let mc_se = ((ve * vh + cov * cov) / n as f64).sqrt();
        assert!((cov - 1.4).abs() <= 3.0 * mc_se, "{cov} ± {mc_se}");
    }

    #[test]
    fn default_scale_is_near_the_target() {
        let data = generate(&SimConfig::default()).unwrap();
        let n_programs: usize = data
            .observed
            .iter()
            .map(|m| m.market.n_accelerators())
            .sum();
        assert_eq!(n_programs, 74);
        let n: usize = data.outcomes.rows.len();
        assert!((600..=880).contains(&n), "{n}");
        for m in &data.observed {
            assert!(validate_market(&m.market).is_empty());
        }
    }

    #[test]
    fn matched_shocks_are_selected_upward() {
        let data = big(0.0, 1.0, 3);
        let mut matched = Vec::new();
        for (m, t) in data.observed.iter().zip(&data.truth.markets) {
            for s in 0..t.n_startups {
                matched.push(t.eps_at(m.matching.accelerator_of(s), s));
            }
        }
        let n = matched.len() as f64;
        let mean = matched.iter().sum::<f64>() / n;
        assert!(mean > 5.0 / n.sqrt(), "{mean}");
        let all: Vec<f64> = data
            .truth
            .markets
            .iter()
            .flat_map(|t| t.eps.iter().copied())
            .collect();
        let mean_all = all.iter().sum::<f64>() / all.len() as f64;
        assert!(
            mean_all.abs() < 4.0 / (all.len() as f64).sqrt(),
            "{mean_all}"
        );
    }

    #[test]
    fn same_seed_same_data() {
        let c = SimConfig {
            n_markets: 5,
            seed: 11,
            ..Default::default()
        };
        assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
        let other = generate(&SimConfig { seed: 12, ..c }).unwrap();
        assert_ne!(
            generate(&SimConfig {
                seed: 11,
                n_markets: 5,
                ..Default::default()
            })
            .unwrap(),
            other
        );
    }

    #[test]
    fn relocation_rate_is_moderate() {
        let data = generate(&SimConfig {
            n_markets: 200,
            ..Default::default()
        })
        .unwrap();
        let rows = &data.outcomes.rows;
        let rate = rows.iter().map(|r| r.values["relocated"]).sum::<f64>() / rows.len() as f64;
        assert!((0.15..=0.40).contains(&rate), "{rate}");
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        for bad in [
            SimConfig {
                quota_min: 0,
                ..Default::default()
            },
            SimConfig {
                quota_min: 9,
                quota_max: 3,
                ..Default::default()
            },
            SimConfig {
                n_markets: 0,
                ..Default::default()
            },
            SimConfig {
                error: ErrorParams {
                    rho: 1.5,
                    sigma: 1.0,
                },
                ..Default::default()
            },
            SimConfig {
                female_prob: 2.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(generate(&bad), Err(Error::Config(_))));
        }
    }
}
