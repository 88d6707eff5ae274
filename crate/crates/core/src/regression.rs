//! Second stage: linear probability / linear outcome regressions with the
//! correction term, absorbed fixed effects, bootstrap standard errors, and
//! tests on linear combinations of coefficients.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::CorrectionTable;
use crate::error::{Error, Result};
use crate::estimator::bootstrap_se;
use crate::model::{FeatureMap, NamedVector};
use crate::rng::{derive_seed, stream_rng};

pub const INTERCEPT: &str = "intercept";
/// Name of the coefficient on the imputed `E[ε | μ, X]`.
pub const CORRECTION: &str = "correction";

/// One matched pair with its outcomes and covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub market_id: String,
    pub startup_id: String,
    pub accelerator_id: String,
    pub year: i32,
    pub industry: String,
    pub values: FeatureMap,
}

impl OutcomeRow {
    /// Label of a categorical column; numeric columns are labelled by value.
    pub fn category(&self, column: &str) -> Result<String> {
        match column {
            "year" => Ok(self.year.to_string()),
            "industry" => Ok(self.industry.clone()),
            "market_id" => Ok(self.market_id.clone()),
            "accelerator_id" => Ok(self.accelerator_id.clone()),
            other => self
                .values
                .get(other)
                .map(|v| v.to_string())
                .ok_or_else(|| Error::config(format!("unknown fixed-effect column `{other}`"))),
        }
    }

    pub fn value(&self, column: &str) -> Result<f64> {
        match column {
            "year" => Ok(self.year as f64),
            other => self
                .values
                .get(other)
                .copied()
                .ok_or_else(|| Error::config(format!("unknown column `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutcomeTable {
    pub rows: Vec<OutcomeRow>,
}

/// Sample restriction, evaluated against the full table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleFilter {
    /// Inclusive bounds.
    Range {
        column: String,
        #[serde(default)]
        min: Option<f64>,
        #[serde(default)]
        max: Option<f64>,
    },
    /// Strictly above the full-sample median of the column.
    AboveMedian {
        column: String,
    },
    Equals {
        column: String,
        value: f64,
    },
}

/// A linear combination of coefficients to test against zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboSpec {
    pub names: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleUnit {
    /// Matched pairs, independently.
    #[default]
    Startup,
    /// Whole markets (cluster bootstrap).
    Market,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub outcome: String,
    pub regressors: Vec<String>,
    #[serde(default = "yes")]
    pub include_correction: bool,
    #[serde(default)]
    pub fixed_effects: Vec<String>,
    #[serde(default)]
    pub filters: Vec<SampleFilter>,
    #[serde(default)]
    pub tests: Vec<ComboSpec>,
    #[serde(default)]
    pub resample: ResampleUnit,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboResult {
    pub names: Vec<String>,
    pub weights: Vec<f64>,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SecondStageBootstrap {
    pub se: NamedVector,
    /// One row per successful replication, in the fit's `terms` order.
    pub replicates: Vec<Vec<f64>>,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondStageFit {
    /// Reported terms in order: intercept, regressors, then the correction.
    pub terms: Vec<String>,
    pub alpha_hat: NamedVector,
    pub boot_se: NamedVector,
    pub fixed_effects: NamedVector,
    pub n_obs: usize,
    pub r_squared: f64,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub boot: Option<SecondStageBootstrap>,
    pub tests: Vec<ComboResult>,
}

/// Filtered sample with its design pieces.
struct Sample {
    terms: Vec<String>,
    /// Columns for `terms`, row-indexed.
    core: Vec<Vec<f64>>,
    y: Vec<f64>,
    /// Category label per fixed-effect column, per row.
    fe_labels: Vec<Vec<String>>,
    /// Levels per fixed-effect column, sorted; the first is the omitted base.
    fe_levels: Vec<Vec<String>>,
    markets: Vec<String>,
    warnings: Vec<String>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn apply_filters(table: &OutcomeTable, filters: &[SampleFilter]) -> Result<Vec<usize>> {
    let mut keep: Vec<bool> = vec![true; table.rows.len()];
    for f in filters {
        match f {
            SampleFilter::Range { column, min, max } => {
                for (k, r) in keep.iter_mut().zip(&table.rows) {
                    let v = r.value(column)?;
                    *k &= min.is_none_or(|m| v >= m) && max.is_none_or(|m| v <= m);
                }
            }
            SampleFilter::AboveMedian { column } => {
                let vals = table
                    .rows
                    .iter()
                    .map(|r| r.value(column))
                    .collect::<Result<Vec<_>>>()?;
                if vals.is_empty() {
                    continue;
                }
                let med = median(vals.clone());
                for (k, v) in keep.iter_mut().zip(vals) {
                    *k &= v > med;
                }
            }
            SampleFilter::Equals { column, value } => {
                for (k, r) in keep.iter_mut().zip(&table.rows) {
                    *k &= r.value(column)? == *value;
                }
            }
        }
    }
    Ok(keep
        .iter()
        .enumerate()
        .filter_map(|(i, k)| k.then_some(i))
        .collect())
}

fn build_sample(
    table: &OutcomeTable,
    corrections: Option<&CorrectionTable>,
    spec: &RegressionSpec,
) -> Result<Sample> {
    let idx = apply_filters(table, &spec.filters)?;
    if idx.is_empty() {
        return Err(Error::config("the filtered sample is empty"));
    }
    let lookup: HashMap<(&str, &str), f64> = corrections
        .map(|c| {
            c.rows
                .iter()
                .map(|r| ((r.market_id.as_str(), r.startup_id.as_str()), r.eps_hat))
                .collect()
        })
        .unwrap_or_default();
    if spec.include_correction && corrections.is_none() {
        return Err(Error::config(
            "the specification asks for the correction term but none was supplied",
        ));
    }

    let mut terms = vec![INTERCEPT.to_string()];
    terms.extend(spec.regressors.iter().cloned());
    if spec.include_correction {
        terms.push(CORRECTION.to_string());
    }
    let mut unique = BTreeSet::new();
    for t in &terms {
        if !unique.insert(t) {
            return Err(Error::config(format!("term `{t}` listed twice")));
        }
    }

    let mut core = Vec::with_capacity(idx.len());
    let mut y = Vec::with_capacity(idx.len());
    let mut fe_labels = Vec::with_capacity(idx.len());
    let mut markets = Vec::with_capacity(idx.len());
    for &i in &idx {
        let r = &table.rows[i];
        let mut row = vec![1.0];
        for name in &spec.regressors {
            row.push(r.value(name)?);
        }
        if spec.include_correction {
            let c = lookup
                .get(&(r.market_id.as_str(), r.startup_id.as_str()))
                .ok_or_else(|| {
                    Error::config(format!(
                        "no correction term for startup `{}` in market `{}`",
                        r.startup_id, r.market_id
                    ))
                })?;
            row.push(*c);
        }
        core.push(row);
        y.push(r.value(&spec.outcome)?);
        fe_labels.push(
            spec.fixed_effects
                .iter()
                .map(|c| r.category(c))
                .collect::<Result<Vec<_>>>()?,
        );
        markets.push(r.market_id.clone());
    }

    let mut warnings = Vec::new();
    let mut fe_levels = Vec::new();
    for (j, column) in spec.fixed_effects.iter().enumerate() {
        let present: BTreeSet<String> = fe_labels.iter().map(|l| l[j].clone()).collect();
        let all: BTreeSet<String> = table
            .rows
            .iter()
            .map(|r| r.category(column))
            .collect::<Result<_>>()?;
        let dropped: Vec<&String> = all.difference(&present).collect();
        if !dropped.is_empty() {
            let msg = format!(
                "fixed-effect `{column}` levels {dropped:?} are absent after filtering and were dropped"
            );
            warn!("{msg}");
            warnings.push(msg);
        }
        fe_levels.push(present.into_iter().collect());
    }

    Ok(Sample {
        terms,
        core,
        y,
        fe_labels,
        fe_levels,
        markets,
        warnings,
    })
}

pub(crate) struct OlsFit {
    pub coef: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// Least squares by modified Gram-Schmidt with one reorthogonalization pass.
/// `columns[j]` is the `j`-th regressor.
pub(crate) fn ols(columns: &[Vec<f64>], names: &[String], y: &[f64]) -> Result<OlsFit> {
    let n = y.len();
    let p = columns.len();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut r = vec![vec![0.0; p]; p];
    for (j, col) in columns.iter().enumerate() {
        let norm0 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = col.clone();
        for _ in 0..2 {
            for (i, qi) in q.iter().enumerate() {
                let d: f64 = qi.iter().zip(&v).map(|(a, b)| a * b).sum();
                r[i][j] += d;
                for (vk, qk) in v.iter_mut().zip(qi) {
                    *vk -= d * qk;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm0 == 0.0 || norm <= 1e-10 * norm0 {
            let mut set: Vec<String> = (0..j)
                .filter(|&i| r[i][j].abs() > 1e-8 * norm0.max(1.0))
                .map(|i| names[i].clone())
                .collect();
            set.push(names[j].clone());
            return Err(Error::Collinear(set));
        }
        r[j][j] = norm;
        for x in &mut v {
            *x /= norm;
        }
        q.push(v);
    }
    let qty: Vec<f64> = q
        .iter()
        .map(|qi| qi.iter().zip(y).map(|(a, b)| a * b).sum())
        .collect();
    let mut coef = vec![0.0; p];
    for i in (0..p).rev() {
        let tail: f64 = ((i + 1)..p).map(|k| r[i][k] * coef[k]).sum();
        coef[i] = (qty[i] - tail) / r[i][i];
    }
    let residuals = (0..n)
        .map(|k| {
            y[k] - columns
                .iter()
                .zip(&coef)
                .map(|(c, b)| c[k] * b)
                .sum::<f64>()
        })
        .collect();
    Ok(OlsFit { coef, residuals })
}

struct Estimate {
    core: Vec<f64>,
    fe: Vec<(String, f64)>,
    r_squared: f64,
}

/// Fits on the rows `rows` of `sample` (with repetition allowed). Dummy
/// columns with no observations are dropped.
fn estimate_rows(sample: &Sample, rows: &[usize]) -> Result<Estimate> {
    let k = sample.terms.len();
    let mut names = sample.terms.clone();
    let mut columns: Vec<Vec<f64>> = (0..k)
        .map(|j| rows.iter().map(|&i| sample.core[i][j]).collect())
        .collect();
    let mut fe_names = Vec::new();
    for (c, levels) in sample.fe_levels.iter().enumerate() {
        for level in levels.iter().skip(1) {
            let col: Vec<f64> = rows
                .iter()
                .map(|&i| {
                    if &sample.fe_labels[i][c] == level {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            if col.iter().any(|&v| v != 0.0) {
                let name = format!("fe:{c}={level}");
                names.push(name.clone());
                fe_names.push(name);
                columns.push(col);
            }
        }
    }
    if rows.len() < columns.len() + 2 {
        return Err(Error::config(format!(
            "{} observations for {} coefficients; need at least {}",
            rows.len(),
            columns.len(),
            columns.len() + 2
        )));
    }
    let y: Vec<f64> = rows.iter().map(|&i| sample.y[i]).collect();
    let fit = ols(&columns, &names, &y)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ssr: f64 = fit.residuals.iter().map(|e| e * e).sum();
    let r_squared = if tss > 0.0 {
        (1.0 - ssr / tss).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(Estimate {
        core: fit.coef[..k].to_vec(),
        fe: fe_names
            .into_iter()
            .zip(fit.coef[k..].iter().copied())
            .collect(),
        r_squared,
    })
}

fn fe_display_name(spec: &RegressionSpec, raw: &str) -> String {
    // raw is `fe:<column index>=<level>`
    let body = &raw[3..];
    let (c, level) = body.split_once('=').unwrap_or((body, ""));
    let column = c
        .parse::<usize>()
        .ok()
        .and_then(|i| spec.fixed_effects.get(i))
        .map_or(c, String::as_str);
    format!("{column}={level}")
}

/// OLS point estimates; standard errors are filled by [`bootstrap_second_stage`].
pub fn fit_second_stage(
    table: &OutcomeTable,
    corrections: Option<&CorrectionTable>,
    spec: &RegressionSpec,
) -> Result<SecondStageFit> {
    let sample = build_sample(table, corrections, spec)?;
    let all: Vec<usize> = (0..sample.y.len()).collect();
    let est = estimate_rows(&sample, &all)?;
    Ok(SecondStageFit {
        alpha_hat: NamedVector::new(sample.terms.iter().cloned().zip(est.core.iter().copied())),
        terms: sample.terms,
        boot_se: NamedVector::default(),
        fixed_effects: NamedVector::new(est.fe.iter().map(|(n, v)| (fe_display_name(spec, n), *v))),
        n_obs: all.len(),
        r_squared: est.r_squared,
        warnings: sample.warnings,
        boot: None,
        tests: Vec::new(),
    })
}

/// Resamples observations (or whole markets, per `spec.resample`) with
/// replacement, holding the correction terms fixed. Resamples whose design
/// is degenerate are skipped and counted.
pub fn bootstrap_second_stage(
    table: &OutcomeTable,
    corrections: Option<&CorrectionTable>,
    spec: &RegressionSpec,
    n_boot: usize,
    seed: u64,
) -> Result<SecondStageBootstrap> {
    if n_boot < 2 {
        return Err(Error::config("bootstrap needs at least 2 replications"));
    }
    let sample = build_sample(table, corrections, spec)?;
    let n = sample.y.len();
    let mut by_market: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, m) in sample.markets.iter().enumerate() {
        by_market.entry(m.as_str()).or_default().push(i);
    }
    let clusters: Vec<Vec<usize>> = by_market.into_values().collect();

    let results: Vec<Option<Vec<f64>>> = (0..n_boot)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(derive_seed(seed, r as u64 + 1), 0);
            let rows: Vec<usize> = match spec.resample {
                ResampleUnit::Startup => (0..n).map(|_| rng.random_range(0..n)).collect(),
                ResampleUnit::Market => (0..clusters.len())
                    .flat_map(|_| {
                        clusters[rng.random_range(0..clusters.len())]
                            .iter()
                            .copied()
                    })
                    .collect(),
            };
            estimate_rows(&sample, &rows).ok().map(|e| e.core)
        })
        .collect();
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let replicates: Vec<Vec<f64>> = results.into_iter().flatten().collect();
    if replicates.len() < 2 {
        return Err(Error::numeric(format!(
            "{skipped} of {n_boot} bootstrap resamples were degenerate"
        )));
    }
    if skipped > 0 {
        warn!("{skipped} of {n_boot} second-stage bootstrap resamples were degenerate and skipped");
    }
    Ok(SecondStageBootstrap {
        se: NamedVector::new(sample.terms.iter().cloned().zip(bootstrap_se(&replicates))),
        replicates,
        skipped,
    })
}

/// `Σ w_i α̂_i` and its bootstrap standard error.
pub fn linear_combo_test(
    fit: &SecondStageFit,
    names: &[String],
    weights: &[f64],
) -> Result<(f64, f64)> {
    if names.len() != weights.len() || names.is_empty() {
        return Err(Error::config(
            "a combination needs one weight per coefficient name",
        ));
    }
    let positions = names
        .iter()
        .map(|n| {
            fit.terms
                .iter()
                .position(|t| t == n)
                .ok_or_else(|| Error::config(format!("unknown coefficient `{n}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let estimate = names
        .iter()
        .zip(weights)
        .map(|(n, w)| w * fit.alpha_hat.get(n).unwrap_or(0.0))
        .sum();
    let boot = fit
        .boot
        .as_ref()
        .ok_or_else(|| Error::config("bootstrap replicates are required for combination tests"))?;
    let combos: Vec<Vec<f64>> = boot
        .replicates
        .iter()
        .map(|rep| {
            vec![positions
                .iter()
                .zip(weights)
                .map(|(&p, w)| w * rep[p])
                .sum()]
        })
        .collect();
    Ok((estimate, bootstrap_se(&combos)[0]))
}

/// Point estimates, bootstrap standard errors, and every combination test in `spec`.
pub fn fit_with_bootstrap(
    table: &OutcomeTable,
    corrections: Option<&CorrectionTable>,
    spec: &RegressionSpec,
    n_boot: usize,
    seed: u64,
) -> Result<SecondStageFit> {
    let mut fit = fit_second_stage(table, corrections, spec)?;
    let boot = bootstrap_second_stage(table, corrections, spec, n_boot, seed)?;
    fit.boot_se = boot.se.clone();
    fit.boot = Some(boot);
    fit.tests = spec
        .tests
        .iter()
        .map(|t| {
            let (estimate, se) = linear_combo_test(&fit, &t.names, &t.weights)?;
            Ok(ComboResult {
                names: t.names.clone(),
                weights: t.weights.clone(),
                estimate,
                se,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(fit)
}
