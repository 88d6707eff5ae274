//! Correction terms `E[ε | μ, X]` for matched pairs.
//!
//! Given the fitted coefficients, the posterior of the matched-pair shocks is
//! the standard normal prior reweighted by the conditional probability that
//! the observed matching is stable, `exp g(β, ε)`. Averaging prior draws
//! with those self-normalized weights estimates the conditional mean.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{EpsDraws, PreparedMarket};
use crate::model::{MatchParams, MatchedMarket};

/// Below this effective sample size the importance weights are considered fragile.
pub const ESS_WARNING: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRow {
    pub market_id: String,
    pub startup_id: String,
    pub accelerator_id: String,
    pub eps_hat: f64,
    /// Delta-method standard error of the self-normalized estimate.
    #[serde(skip)]
    pub se: f64,
    pub ess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketDiagnostics {
    pub market_id: String,
    pub n_draws: usize,
    pub ess: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrectionTable {
    pub rows: Vec<CorrectionRow>,
    pub markets: Vec<MarketDiagnostics>,
}

impl CorrectionTable {
    pub fn get(&self, market_id: &str, startup_id: &str) -> Option<&CorrectionRow> {
        self.rows
            .iter()
            .find(|r| r.market_id == market_id && r.startup_id == startup_id)
    }

    pub fn eps_hat(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.eps_hat).collect()
    }
}

/// Weighted conditional means from precomputed draws and log-weights.
pub(crate) fn weighted_means(draws: &EpsDraws, log_w: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::numeric(
            "all importance weights underflow; raise the draw count or improve the coefficients",
        ));
    }
    let w: Vec<f64> = log_w.iter().map(|g| (g - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let ess = total * total / w.iter().map(|v| v * v).sum::<f64>();
    let n_s = draws.n_startups;
    let mut mean = vec![0.0; n_s];
    for (t, wt) in w.iter().enumerate() {
        for (m, e) in mean.iter_mut().zip(draws.draw(t)) {
            *m += wt * e;
        }
    }
    for m in &mut mean {
        *m /= total;
    }
    let mut var = vec![0.0; n_s];
    for (t, wt) in w.iter().enumerate() {
        let wn = wt / total;
        for ((v, e), m) in var.iter_mut().zip(draws.draw(t)).zip(&mean) {
            *v += wn * wn * (e - m).powi(2);
        }
    }
    Ok((mean, var.into_iter().map(f64::sqrt).collect(), ess))
}

/// Importance-sampled `E[ε | μ, X]` for every matched pair of one market,
/// using draw stream `stream` of `seed`.
pub fn impute_correction(
    observed: &MatchedMarket,
    params: &MatchParams,
    n_draws: usize,
    seed: u64,
    stream: u64,
) -> Result<CorrectionTable> {
    params.check_aligned(&observed.market.covariate_names())?;
    if n_draws == 0 {
        return Err(Error::config(
            "number of simulation draws must be at least 1",
        ));
    }
    let names = params.beta.names();
    let draws = EpsDraws::generate(observed.market.n_startups(), n_draws, seed, stream);
    let prepared = PreparedMarket::new(observed, &names, draws)?;
    impute_prepared(observed, &prepared, &params.beta.values())
}

pub(crate) fn impute_prepared(
    observed: &MatchedMarket,
    prepared: &PreparedMarket,
    beta: &[f64],
) -> Result<CorrectionTable> {
    let market = &observed.market;
    let log_w = prepared.log_stability_probs(beta);
    let (mean, se, ess) = weighted_means(prepared.draws(), &log_w)
        .map_err(|e| Error::numeric(format!("market `{}`: {e}", market.id)))?;
    if ess < ESS_WARNING {
        warn!(
            "market `{}`: effective sample size {ess:.1} of {} draws",
            market.id,
            prepared.n_draws()
        );
    }
    let rows = (0..market.n_startups())
        .map(|s| CorrectionRow {
            market_id: market.id.clone(),
            startup_id: market.startups[s].id.clone(),
            accelerator_id: market.accelerators[observed.matching.accelerator_of(s)]
                .id
                .clone(),
            eps_hat: mean[s],
            se: se[s],
            ess,
        })
        .collect();
    Ok(CorrectionTable {
        rows,
        markets: vec![MarketDiagnostics {
            market_id: market.id.clone(),
            n_draws: prepared.n_draws(),
            ess,
        }],
    })
}

/// Corrections for many markets. Market `k` uses stream `k` of `seed`,
/// the same draws the first stage used when run with that seed.
pub fn impute_all(
    markets: &[MatchedMarket],
    params: &MatchParams,
    n_draws: usize,
    seed: u64,
) -> Result<CorrectionTable> {
    let parts = markets
        .par_iter()
        .enumerate()
        .map(|(k, m)| impute_correction(m, params, n_draws, seed, k as u64))
        .collect::<Vec<_>>();
    let mut table = CorrectionTable::default();
    let mut degenerate = Vec::new();
    for part in parts {
        match part {
            Ok(t) => {
                table.rows.extend(t.rows);
                table.markets.extend(t.markets);
            }
            Err(Error::Numeric(msg)) => degenerate.push(msg),
            Err(e) => return Err(e),
        }
    }
    if !degenerate.is_empty() {
        return Err(Error::numeric(degenerate.join("; ")));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::market_with_ubar;
    use crate::model::Matching;

    #[test]
    fn single_accelerator_is_a_plain_mean() {
        let m = market_with_ubar(&[3], &[vec![0.2, -0.4, 1.0]]);
        let obs = MatchedMarket::new(m, Matching::new(vec![0, 0, 0])).unwrap();
        let t = 4000;
        let table =
            impute_correction(&obs, &MatchParams::new([("z", 1.0)]).unwrap(), t, 9, 0).unwrap();
        let draws = EpsDraws::generate(3, t, 9, 0);
        for (s, row) in table.rows.iter().enumerate() {
            let plain = (0..t).map(|i| draws.draw(i)[s]).sum::<f64>() / t as f64;
            assert!((row.eps_hat - plain).abs() < 1e-12);
            assert!(row.eps_hat.abs() <= 3.0 / (t as f64).sqrt());
            assert!((row.ess - t as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn estimates_stay_inside_the_draw_range() {
        let m = market_with_ubar(&[1, 2], &[vec![0.5, -1.0, 2.0], vec![1.0, 0.0, -0.5]]);
        let obs = MatchedMarket::new(m, Matching::new(vec![0, 1, 1])).unwrap();
        let t = 500;
        let table =
            impute_correction(&obs, &MatchParams::new([("z", 1.0)]).unwrap(), t, 2, 0).unwrap();
        let draws = EpsDraws::generate(3, t, 2, 0);
        for (s, row) in table.rows.iter().enumerate() {
            let lo = (0..t)
                .map(|i| draws.draw(i)[s])
                .fold(f64::INFINITY, f64::min);
            let hi = (0..t)
                .map(|i| draws.draw(i)[s])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(row.eps_hat >= lo && row.eps_hat <= hi);
            assert!(row.ess > 0.0 && row.ess <= t as f64);
        }
    }

    #[test]
    fn normalized_weights_sum_to_one() {
        let draws = EpsDraws {
            n_startups: 1,
            n_draws: 3,
            values: vec![1.0, 2.0, 3.0],
        };
        // Weights 1, 1, 2 after normalization are 1/4, 1/4, 1/2.
        let (mean, _, ess) = weighted_means(&draws, &[0.0, 0.0, 2f64.ln()]).unwrap();
        assert!((mean[0] - (0.25 + 0.5 + 1.5)).abs() < 1e-12);
        assert!((ess - 16.0 / 6.0).abs() < 1e-12);
        assert!(weighted_means(&draws, &[f64::NEG_INFINITY; 3]).is_err());
    }

    #[test]
    fn contested_startup_has_a_positive_shock() {
        // s1 is wanted by the top accelerator far less than its rivals, yet
        // ended up there: its shock must have been high.
        let m = market_with_ubar(&[1, 2], &[vec![0.0, 1.5, 1.5], vec![0.0, 0.0, 0.0]]);
        let obs = MatchedMarket::new(m, Matching::new(vec![0, 1, 1])).unwrap();
        let table = impute_correction(&obs, &MatchParams::new([("z", 1.0)]).unwrap(), 20_000, 4, 0)
            .unwrap();
        assert!(table.rows[0].eps_hat > 0.3, "{:?}", table.rows[0]);
    }
}
