//! Markets, matchings, pair covariates and model parameters.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name-indexed real vector. Ordering is by name, which keeps serialized
/// output deterministic.
pub type FeatureMap = BTreeMap<String, f64>;

/// Name of the pair covariate that flags a startup joining an out-of-state accelerator.
pub const RELOCATED: &str = "relocated";

/// Startup features that must be 0/1 indicators.
pub const STARTUP_INDICATORS: &[&str] = &[
    "female_founder",
    "no_serial_founder",
    "grad_degree",
    "phd_degree",
    "stem_degree",
];

/// Accelerator features that must be 0/1 indicators.
pub const ACCELERATOR_INDICATORS: &[&str] = &["in_hub", "all_men", "has_female_founder"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Startup {
    pub id: String,
    pub home_state: String,
    #[serde(default)]
    pub industry: String,
    #[serde(default)]
    pub cohort_year: i32,
    #[serde(default)]
    pub features: FeatureMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accelerator {
    pub id: String,
    pub quota: usize,
    pub state: String,
    /// Stored for completeness; a fixed split of the match value never changes
    /// either side's ranking of partners.
    pub equity_share: f64,
    #[serde(default)]
    pub features: FeatureMap,
}

/// The covariate vector of one accelerator-startup pair.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairCovariates {
    pub x: FeatureMap,
}

/// Which pair covariates to build. Each term is a startup feature, an
/// accelerator feature, `relocated`, or a product `lhs*rhs` of such terms.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CovariateRecipe {
    pub terms: Vec<String>,
}

impl CovariateRecipe {
    pub fn new<S: Into<String>>(terms: impl IntoIterator<Item = S>) -> Self {
        Self {
            terms: terms.into_iter().map(Into::into).collect(),
        }
    }
}

impl Default for CovariateRecipe {
    fn default() -> Self {
        Self::new(["female_founder", RELOCATED, "log_cohort_size"])
    }
}

fn factor_value(startup: &Startup, acc: &Accelerator, name: &str) -> Result<f64> {
    if name == RELOCATED {
        return Ok(if startup.home_state != acc.state {
            1.0
        } else {
            0.0
        });
    }
    match (startup.features.get(name), acc.features.get(name)) {
        (Some(_), Some(_)) => Err(Error::config(format!(
            "feature `{name}` is defined on both startup `{}` and accelerator `{}`",
            startup.id, acc.id
        ))),
        (Some(v), None) | (None, Some(v)) => Ok(*v),
        (None, None) => Err(Error::config(format!(
            "unknown feature `{name}` for pair ({}, {})",
            acc.id, startup.id
        ))),
    }
}

/// Assembles `x_{as}` for one pair following `recipe`.
pub fn build_pair_covariates(
    startup: &Startup,
    accelerator: &Accelerator,
    recipe: &CovariateRecipe,
) -> Result<PairCovariates> {
    let mut x = FeatureMap::new();
    for term in &recipe.terms {
        let value = term
            .split('*')
            .map(|f| factor_value(startup, accelerator, f.trim()))
            .try_fold(1.0, |acc, v| v.map(|v| acc * v))?;
        if x.insert(term.clone(), value).is_some() {
            return Err(Error::config(format!("duplicate recipe term `{term}`")));
        }
    }
    Ok(PairCovariates { x })
}

/// Explicit value for one covariate of one pair, applied after the recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateOverride {
    pub accelerator: String,
    pub startup: String,
    pub values: FeatureMap,
}

/// One admission cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct Market {
    pub id: String,
    pub accelerators: Vec<Accelerator>,
    pub startups: Vec<Startup>,
    pub recipe: CovariateRecipe,
    /// Row-major `|A| x |S|` table.
    pub pair_covariates: Vec<PairCovariates>,
}

impl Market {
    /// Builds the pair table from `recipe` without validating the market.
    pub fn assemble(
        id: impl Into<String>,
        accelerators: Vec<Accelerator>,
        startups: Vec<Startup>,
        recipe: CovariateRecipe,
    ) -> Result<Self> {
        let mut pair_covariates = Vec::with_capacity(accelerators.len() * startups.len());
        for a in &accelerators {
            for s in &startups {
                pair_covariates.push(build_pair_covariates(s, a, &recipe)?);
            }
        }
        Ok(Self {
            id: id.into(),
            accelerators,
            startups,
            recipe,
            pair_covariates,
        })
    }

    /// Builds and validates; any violation is an error.
    pub fn new(
        id: impl Into<String>,
        accelerators: Vec<Accelerator>,
        startups: Vec<Startup>,
        recipe: CovariateRecipe,
    ) -> Result<Self> {
        let market = Self::assemble(id, accelerators, startups, recipe)?;
        market.ensure_valid()?;
        Ok(market)
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let violations = validate_market(self);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidMarket {
                market: self.id.clone(),
                violations,
            })
        }
    }

    pub fn n_accelerators(&self) -> usize {
        self.accelerators.len()
    }

    pub fn n_startups(&self) -> usize {
        self.startups.len()
    }

    pub fn pair(&self, a: usize, s: usize) -> &PairCovariates {
        &self.pair_covariates[a * self.startups.len() + s]
    }

    pub fn quotas(&self) -> Vec<usize> {
        self.accelerators.iter().map(|a| a.quota).collect()
    }

    /// Covariate names in recipe order.
    pub fn covariate_names(&self) -> Vec<String> {
        self.recipe.terms.clone()
    }

    pub fn accelerator_index(&self, id: &str) -> Option<usize> {
        self.accelerators.iter().position(|a| a.id == id)
    }

    pub fn startup_index(&self, id: &str) -> Option<usize> {
        self.startups.iter().position(|s| s.id == id)
    }

    pub fn from_file_repr(file: MarketFile) -> Result<Self> {
        let recipe = file.covariates.unwrap_or_default();
        let mut market = Self::assemble(file.id, file.accelerators, file.startups, recipe)?;
        for o in &file.overrides {
            let a = market.accelerator_index(&o.accelerator).ok_or_else(|| {
                Error::config(format!(
                    "override names unknown accelerator `{}`",
                    o.accelerator
                ))
            })?;
            let s = market.startup_index(&o.startup).ok_or_else(|| {
                Error::config(format!("override names unknown startup `{}`", o.startup))
            })?;
            let n = market.n_startups();
            let pair = &mut market.pair_covariates[a * n + s];
            for (k, v) in &o.values {
                match pair.x.get_mut(k) {
                    Some(slot) => *slot = *v,
                    None => {
                        return Err(Error::config(format!(
                            "override sets `{k}`, which is not a covariate of market `{}`",
                            market.id
                        )))
                    }
                }
            }
        }
        market.ensure_valid()?;
        Ok(market)
    }

    pub fn to_file_repr(&self) -> MarketFile {
        let mut overrides = Vec::new();
        for (a, acc) in self.accelerators.iter().enumerate() {
            for (s, st) in self.startups.iter().enumerate() {
                let built = build_pair_covariates(st, acc, &self.recipe).ok();
                let stored = self.pair(a, s);
                let values: FeatureMap = stored
                    .x
                    .iter()
                    .filter(|(k, v)| built.as_ref().and_then(|b| b.x.get(*k)) != Some(*v))
                    .map(|(k, v)| (k.clone(), *v))
                    .collect();
                if !values.is_empty() {
                    overrides.push(CovariateOverride {
                        accelerator: acc.id.clone(),
                        startup: st.id.clone(),
                        values,
                    });
                }
            }
        }
        MarketFile {
            id: self.id.clone(),
            accelerators: self.accelerators.clone(),
            startups: self.startups.clone(),
            covariates: Some(self.recipe.clone()),
            overrides,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file_repr(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file_repr())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk layout of a market document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketFile {
    pub id: String,
    pub accelerators: Vec<Accelerator>,
    pub startups: Vec<Startup>,
    /// Recipe for the pair covariates; defaults to the first-stage recipe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<CovariateRecipe>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<CovariateOverride>,
}

/// Total assignment of startups to accelerators, by index into the market's lists.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Matching {
    pub assignment: Vec<usize>,
}

impl Matching {
    pub fn new(assignment: Vec<usize>) -> Self {
        Self { assignment }
    }

    pub fn accelerator_of(&self, s: usize) -> usize {
        self.assignment[s]
    }

    /// Startups assigned to each accelerator, in startup order.
    pub fn members(&self, n_accelerators: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_accelerators];
        for (s, &a) in self.assignment.iter().enumerate() {
            out[a].push(s);
        }
        out
    }

    /// Checks totality and that every quota is filled exactly.
    pub fn check_feasible(&self, market: &Market) -> Result<()> {
        if self.assignment.len() != market.n_startups() {
            return Err(Error::config(format!(
                "matching covers {} startups, market `{}` has {}",
                self.assignment.len(),
                market.id,
                market.n_startups()
            )));
        }
        let mut load = vec![0usize; market.n_accelerators()];
        for &a in &self.assignment {
            if a >= load.len() {
                return Err(Error::config(format!("accelerator index {a} out of range")));
            }
            load[a] += 1;
        }
        for (acc, used) in market.accelerators.iter().zip(&load) {
            if acc.quota != *used {
                return Err(Error::config(format!(
                    "accelerator `{}` has quota {} but {} matched startups",
                    acc.id, acc.quota, used
                )));
            }
        }
        Ok(())
    }

    pub fn to_id_map(&self, market: &Market) -> BTreeMap<String, String> {
        self.assignment
            .iter()
            .enumerate()
            .map(|(s, &a)| {
                (
                    market.startups[s].id.clone(),
                    market.accelerators[a].id.clone(),
                )
            })
            .collect()
    }

    pub fn from_id_map(market: &Market, map: &BTreeMap<String, String>) -> Result<Self> {
        let acc_index: HashMap<&str, usize> = market
            .accelerators
            .iter()
            .enumerate()
            .map(|(i, a)| (a.id.as_str(), i))
            .collect();
        let assignment = market
            .startups
            .iter()
            .map(|s| {
                let acc = map.get(&s.id).ok_or_else(|| {
                    Error::config(format!(
                        "startup `{}` is not assigned in the matching",
                        s.id
                    ))
                })?;
                acc_index.get(acc.as_str()).copied().ok_or_else(|| {
                    Error::config(format!("matching names unknown accelerator `{acc}`"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if map.len() != market.n_startups() {
            return Err(Error::config(format!(
                "matching for market `{}` lists {} startups, market has {}",
                market.id,
                map.len(),
                market.n_startups()
            )));
        }
        let m = Self { assignment };
        m.check_feasible(market)?;
        Ok(m)
    }
}

/// A named real vector with set-based alignment against covariate names.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NamedVector(pub BTreeMap<String, f64>);

impl NamedVector {
    pub fn new<S: Into<String>>(pairs: impl IntoIterator<Item = (S, f64)>) -> Self {
        Self(pairs.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn zeros<S: AsRef<str>>(names: impl IntoIterator<Item = S>) -> Self {
        Self(
            names
                .into_iter()
                .map(|n| (n.as_ref().to_string(), 0.0))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    pub fn names(&self) -> Vec<String> {
        self.0.keys().cloned().collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.values().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Rebuilds from values given in `names()` order.
    pub fn with_values(&self, values: &[f64]) -> Self {
        Self(self.0.keys().cloned().zip(values.iter().copied()).collect())
    }
}

/// Match-value coefficients.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MatchParams {
    pub beta: NamedVector,
}

impl MatchParams {
    pub fn new<S: Into<String>>(pairs: impl IntoIterator<Item = (S, f64)>) -> Result<Self> {
        let beta = NamedVector::new(pairs);
        if let Some((k, v)) = beta.0.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "coefficient `{k}` is not finite ({v})"
            )));
        }
        Ok(Self { beta })
    }

    pub fn zeros<S: AsRef<str>>(names: impl IntoIterator<Item = S>) -> Self {
        Self {
            beta: NamedVector::zeros(names),
        }
    }

    /// Coefficient-name/covariate-name alignment must be a bijection.
    pub fn check_aligned(&self, covariates: &[String]) -> Result<()> {
        let want: BTreeSet<&str> = covariates.iter().map(String::as_str).collect();
        let have: BTreeSet<&str> = self.beta.0.keys().map(String::as_str).collect();
        if want != have || want.len() != covariates.len() {
            return Err(Error::config(format!(
                "coefficients {:?} do not match covariates {:?}",
                have, covariates
            )));
        }
        Ok(())
    }
}

/// Correlation and outcome-error scale of the bivariate normal `(ε, η)`.
/// The selection error has unit variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorParams {
    pub rho: f64,
    pub sigma: f64,
}

impl ErrorParams {
    pub fn new(rho: f64, sigma: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&rho) {
            return Err(Error::config(format!("rho must lie in [-1, 1], got {rho}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::config(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self { rho, sigma })
    }

    /// `Cov(ε, η) = ρσ`.
    pub fn covariance(&self) -> f64 {
        self.rho * self.sigma
    }
}

/// Dense `|A| x |S|` table of reals, row-major by accelerator.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityTable {
    pub n_accelerators: usize,
    pub n_startups: usize,
    pub values: Vec<f64>,
}

impl UtilityTable {
    pub fn new(n_accelerators: usize, n_startups: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_accelerators * n_startups {
            return Err(Error::config(format!(
                "utility table has {} entries, expected {}x{}",
                values.len(),
                n_accelerators,
                n_startups
            )));
        }
        Ok(Self {
            n_accelerators,
            n_startups,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_startups = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_startups) {
            return Err(Error::config("ragged utility rows"));
        }
        Self::new(rows.len(), n_startups, rows.concat())
    }

    #[inline]
    pub fn get(&self, a: usize, s: usize) -> f64 {
        self.values[a * self.n_startups + s]
    }

    #[inline]
    pub fn set(&mut self, a: usize, s: usize, v: f64) {
        self.values[a * self.n_startups + s] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            n_accelerators: self.n_accelerators,
            n_startups: self.n_startups,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn check_shape(&self, market: &Market) -> Result<()> {
        if self.n_accelerators != market.n_accelerators() || self.n_startups != market.n_startups()
        {
            return Err(Error::config(format!(
                "utility table is {}x{}, market `{}` is {}x{}",
                self.n_accelerators,
                self.n_startups,
                market.id,
                market.n_accelerators(),
                market.n_startups()
            )));
        }
        Ok(())
    }
}

/// `Ū[a][s] = x_{as} · β`.
pub fn deterministic_utility(market: &Market, params: &MatchParams) -> Result<UtilityTable> {
    params.check_aligned(&market.covariate_names())?;
    let values =
        market
            .pair_covariates
            .iter()
            .map(|pc| {
                pc.x.iter()
                    .map(|(k, v)| {
                        params.beta.get(k).map(|b| b * v).ok_or_else(|| {
                            Error::config(format!("no coefficient for covariate `{k}`"))
                        })
                    })
                    .sum::<Result<f64>>()
            })
            .collect::<Result<Vec<_>>>()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite deterministic utility in market `{}`",
            market.id
        )));
    }
    UtilityTable::new(market.n_accelerators(), market.n_startups(), values)
}

/// A structural problem found by [`validate_market`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NoAccelerators,
    NoStartups,
    QuotaSum {
        quota_sum: usize,
        startups: usize,
    },
    ZeroQuota {
        accelerator: String,
    },
    EquityShare {
        accelerator: String,
        value: f64,
    },
    DuplicateId {
        id: String,
    },
    MalformedIndicator {
        owner: String,
        feature: String,
        value: f64,
    },
    TeamSize {
        startup: String,
        value: f64,
    },
    StartupAge {
        startup: String,
        value: f64,
    },
    NonFinite {
        owner: String,
        feature: String,
    },
    PairTable {
        expected: usize,
        found: usize,
    },
    MissingCovariate {
        accelerator: String,
        startup: String,
        covariate: String,
    },
    RelocatedMismatch {
        accelerator: String,
        startup: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoAccelerators => write!(f, "market has no accelerators"),
            Violation::NoStartups => write!(f, "market has no startups"),
            Violation::QuotaSum {
                quota_sum,
                startups,
            } => write!(f, "quota sum {quota_sum} ≠ {startups} startups"),
            Violation::ZeroQuota { accelerator } => {
                write!(f, "accelerator `{accelerator}` has quota 0")
            }
            Violation::EquityShare { accelerator, value } => write!(
                f,
                "accelerator `{accelerator}` equity share {value} outside (0, 1)"
            ),
            Violation::DuplicateId { id } => write!(f, "duplicate id `{id}`"),
            Violation::MalformedIndicator {
                owner,
                feature,
                value,
            } => write!(
                f,
                "`{owner}`: indicator `{feature}` = {value}, expected 0 or 1"
            ),
            Violation::TeamSize { startup, value } => {
                write!(f, "startup `{startup}`: team_size {value} < 1")
            }
            Violation::StartupAge { startup, value } => {
                write!(f, "startup `{startup}`: startup_age {value} < 0")
            }
            Violation::NonFinite { owner, feature } => {
                write!(f, "`{owner}`: `{feature}` is not finite")
            }
            Violation::PairTable { expected, found } => {
                write!(f, "pair table has {found} entries, expected {expected}")
            }
            Violation::MissingCovariate {
                accelerator,
                startup,
                covariate,
            } => write!(
                f,
                "pair ({accelerator}, {startup}) is missing covariate `{covariate}`"
            ),
            Violation::RelocatedMismatch {
                accelerator,
                startup,
            } => write!(
                f,
                "pair ({accelerator}, {startup}): relocated disagrees with the state labels"
            ),
        }
    }
}

fn is_indicator(v: f64) -> bool {
    v == 0.0 || v == 1.0
}

/// Reports every structural violation; an empty list means the market is valid.
pub fn validate_market(market: &Market) -> Vec<Violation> {
    let mut out = Vec::new();
    if market.accelerators.is_empty() {
        out.push(Violation::NoAccelerators);
    }
    if market.startups.is_empty() {
        out.push(Violation::NoStartups);
    }
    let quota_sum: usize = market.accelerators.iter().map(|a| a.quota).sum();
    if quota_sum != market.startups.len() {
        out.push(Violation::QuotaSum {
            quota_sum,
            startups: market.startups.len(),
        });
    }

    let mut seen = BTreeSet::new();
    for a in &market.accelerators {
        if !seen.insert(("a", a.id.as_str())) {
            out.push(Violation::DuplicateId { id: a.id.clone() });
        }
        if a.quota == 0 {
            out.push(Violation::ZeroQuota {
                accelerator: a.id.clone(),
            });
        }
        if !(a.equity_share > 0.0 && a.equity_share < 1.0) {
            out.push(Violation::EquityShare {
                accelerator: a.id.clone(),
                value: a.equity_share,
            });
        }
        for (k, &v) in &a.features {
            if !v.is_finite() {
                out.push(Violation::NonFinite {
                    owner: a.id.clone(),
                    feature: k.clone(),
                });
            } else if ACCELERATOR_INDICATORS.contains(&k.as_str()) && !is_indicator(v) {
                out.push(Violation::MalformedIndicator {
                    owner: a.id.clone(),
                    feature: k.clone(),
                    value: v,
                });
            }
        }
    }

    for s in &market.startups {
        if !seen.insert(("s", s.id.as_str())) {
            out.push(Violation::DuplicateId { id: s.id.clone() });
        }
        for (k, &v) in &s.features {
            if !v.is_finite() {
                out.push(Violation::NonFinite {
                    owner: s.id.clone(),
                    feature: k.clone(),
                });
            } else if STARTUP_INDICATORS.contains(&k.as_str()) && !is_indicator(v) {
                out.push(Violation::MalformedIndicator {
                    owner: s.id.clone(),
                    feature: k.clone(),
                    value: v,
                });
            }
        }
        if let Some(&v) = s.features.get("team_size") {
            if v < 1.0 {
                out.push(Violation::TeamSize {
                    startup: s.id.clone(),
                    value: v,
                });
            }
        }
        if let Some(&v) = s.features.get("startup_age") {
            if v < 0.0 {
                out.push(Violation::StartupAge {
                    startup: s.id.clone(),
                    value: v,
                });
            }
        }
    }

    let expected = market.accelerators.len() * market.startups.len();
    if market.pair_covariates.len() != expected {
        out.push(Violation::PairTable {
            expected,
            found: market.pair_covariates.len(),
        });
        return out;
    }
    for (a, acc) in market.accelerators.iter().enumerate() {
        for (s, st) in market.startups.iter().enumerate() {
            let pair = market.pair(a, s);
            for name in &market.recipe.terms {
                match pair.x.get(name) {
                    None => out.push(Violation::MissingCovariate {
                        accelerator: acc.id.clone(),
                        startup: st.id.clone(),
                        covariate: name.clone(),
                    }),
                    Some(v) if !v.is_finite() => out.push(Violation::NonFinite {
                        owner: format!("{}/{}", acc.id, st.id),
                        feature: name.clone(),
                    }),
                    _ => {}
                }
            }
            if let Some(&r) = pair.x.get(RELOCATED) {
                let want = if st.home_state != acc.state { 1.0 } else { 0.0 };
                if r != want {
                    out.push(Violation::RelocatedMismatch {
                        accelerator: acc.id.clone(),
                        startup: st.id.clone(),
                    });
                }
            }
        }
    }
    out
}

/// A market together with its observed matching.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedMarket {
    pub market: Market,
    pub matching: Matching,
}

impl MatchedMarket {
    pub fn new(market: Market, matching: Matching) -> Result<Self> {
        matching.check_feasible(&market)?;
        Ok(Self { market, matching })
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    fn recipe() -> CovariateRecipe {
        CovariateRecipe::new([
            "female_founder",
            "all_men",
            RELOCATED,
            "female_founder*all_men",
            "female_founder*relocated",
        ])
    }

    #[test]
    fn interaction_of_two_indicators() {
        let s = startup("s", "CA", &[("female_founder", 1.0)]);
        let a = accelerator("a", 1, "CA", &[("all_men", 1.0)]);
        let pc = build_pair_covariates(&s, &a, &recipe()).unwrap();
        assert_eq!(pc.x["female_founder*all_men"], 1.0);
    }

    #[test]
    fn same_state_is_not_relocated() {
        let s = startup("s", "CA", &[("female_founder", 0.0)]);
        let a = accelerator("a", 1, "CA", &[("all_men", 0.0)]);
        let pc = build_pair_covariates(&s, &a, &recipe()).unwrap();
        assert_eq!(pc.x[RELOCATED], 0.0);
    }

    #[test]
    fn relocated_female_at_mixed_accelerator() {
        let s = startup("s", "NY", &[("female_founder", 1.0)]);
        let a = accelerator("a", 1, "CA", &[("all_men", 0.0)]);
        let pc = build_pair_covariates(&s, &a, &recipe()).unwrap();
        assert_eq!(pc.x[RELOCATED], 1.0);
        assert_eq!(pc.x["female_founder*all_men"], 0.0);
        assert_eq!(pc.x["female_founder*relocated"], 1.0);
    }

    #[test]
    fn unknown_feature_is_a_config_error() {
        let s = startup("s", "NY", &[]);
        let a = accelerator("a", 1, "CA", &[]);
        let err = build_pair_covariates(&s, &a, &CovariateRecipe::new(["nope"])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zero_beta_gives_zero_utility() {
        let m = market_with_ubar(&[1, 1], &[vec![2.0, 1.5], vec![1.0, 0.5]]);
        let u = deterministic_utility(&m, &MatchParams::zeros(["z"])).unwrap();
        assert!(u.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relocated_coefficient_alone() {
        let accs = vec![accelerator("a", 1, "CA", &[])];
        let sts = vec![startup("s", "NY", &[])];
        let m = Market::new("m", accs, sts, CovariateRecipe::new([RELOCATED])).unwrap();
        let u =
            deterministic_utility(&m, &MatchParams::new([(RELOCATED, -2.692)]).unwrap()).unwrap();
        assert_eq!(u.get(0, 0), -2.692);
    }

    #[test]
    fn two_term_dot_product() {
        let accs = vec![accelerator("a", 1, "CA", &[("log_cohort_size", 1.0)])];
        let sts = vec![startup("s", "CA", &[("female_founder", 1.0)])];
        let m = Market::new(
            "m",
            accs,
            sts,
            CovariateRecipe::new(["female_founder", "log_cohort_size"]),
        )
        .unwrap();
        let p = MatchParams::new([("female_founder", -0.326), ("log_cohort_size", 0.652)]).unwrap();
        let u = deterministic_utility(&m, &p).unwrap();
        let scalar = 1.0 * -0.326 + 1.0 * 0.652;
        assert!((u.get(0, 0) - scalar).abs() < 1e-15);
        assert!((u.get(0, 0) - 0.326).abs() < 1e-12);
    }

    #[test]
    fn misaligned_params_are_rejected() {
        let m = market_with_ubar(&[1], &[vec![0.0]]);
        let err = deterministic_utility(&m, &MatchParams::zeros(["z", "w"])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = deterministic_utility(&m, &MatchParams::zeros(["w"])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn valid_quota_sum() {
        let m = market_with_ubar(&[1, 2], &[vec![0.0; 3], vec![0.0; 3]]);
        assert!(validate_market(&m).is_empty());
    }

    #[test]
    fn quota_sum_mismatch_is_reported() {
        let accs = vec![
            accelerator("a1", 1, "CA", &[]),
            accelerator("a2", 1, "CA", &[]),
        ];
        let sts = (0..3)
            .map(|i| startup(&format!("s{i}"), "CA", &[]))
            .collect();
        let m = Market::assemble("m", accs, sts, CovariateRecipe::new([RELOCATED])).unwrap();
        let v = validate_market(&m);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "quota sum 2 ≠ 3 startups");
    }

    #[test]
    fn zero_team_size_is_reported() {
        let accs = vec![accelerator("a1", 1, "CA", &[])];
        let sts = vec![startup("s", "CA", &[("team_size", 0.0)])];
        let m = Market::assemble("m", accs, sts, CovariateRecipe::new([RELOCATED])).unwrap();
        assert!(matches!(
            validate_market(&m)[..],
            [Violation::TeamSize { .. }]
        ));
    }

    #[test]
    fn malformed_indicator_and_equity_are_reported() {
        let mut acc = accelerator("a1", 1, "CA", &[("all_men", 0.5)]);
        acc.equity_share = 1.2;
        let sts = vec![startup(
            "s",
            "CA",
            &[("female_founder", 2.0), ("startup_age", -1.0)],
        )];
        let m = Market::assemble("m", vec![acc], sts, CovariateRecipe::new([RELOCATED])).unwrap();
        assert_eq!(validate_market(&m).len(), 4);
    }

    #[test]
    fn market_json_round_trip_keeps_overrides() {
        let mut m = market_with_ubar(&[1, 1], &[vec![2.0, 1.5], vec![1.0, 0.5]]);
        m.pair_covariates[3].x.insert("z".into(), 0.25);
        let back = Market::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn matching_id_map_round_trip() {
        let m = market_with_ubar(&[1, 2], &[vec![0.0; 3], vec![0.0; 3]]);
        let mu = Matching::new(vec![1, 0, 1]);
        let ids = mu.to_id_map(&m);
        assert_eq!(Matching::from_id_map(&m, &ids).unwrap(), mu);
        assert!(Matching::new(vec![0, 0, 1]).check_feasible(&m).is_err());
    }

    #[test]
    fn error_params_bounds() {
        assert!(ErrorParams::new(1.0, 2.0).is_ok());
        assert!(ErrorParams::new(1.1, 2.0).is_err());
        assert!(ErrorParams::new(0.0, 0.0).is_err());
        assert_eq!(ErrorParams::new(0.7, 2.0).unwrap().covariance(), 0.7 * 2.0);
    }

    proptest! {
        #[test]
        fn utility_is_linear_in_beta(
            b1 in proptest::collection::vec(-3.0f64..3.0, 3),
            b2 in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let accs = vec![
                accelerator("a1", 1, "CA", &[("log_cohort_size", 2.3)]),
                accelerator("a2", 1, "NY", &[("log_cohort_size", 1.1)]),
            ];
            let sts = vec![
                startup("s1", "CA", &[("female_founder", 1.0)]),
                startup("s2", "TX", &[("female_founder", 0.0)]),
            ];
            let m = Market::new("m", accs, sts, CovariateRecipe::default()).unwrap();
            let names = m.covariate_names();
            let p = |b: &[f64]| MatchParams::new(names.iter().cloned().zip(b.iter().copied())).unwrap();
            let sum: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| x + y).collect();
            let u1 = deterministic_utility(&m, &p(&b1)).unwrap();
            let u2 = deterministic_utility(&m, &p(&b2)).unwrap();
            let u12 = deterministic_utility(&m, &p(&sum)).unwrap();
            for i in 0..4 {
                prop_assert!((u12.values[i] - u1.values[i] - u2.values[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn relocated_depends_only_on_state_equality(
            s_state in 0usize..5, a_state in 0usize..5, shift in 1usize..5,
        ) {
            let label = |i: usize| format!("ST{i}");
            let relabel = |i: usize| format!("ST{}", (i + shift) % 5 + 10);
            let r = |ss: String, aa: String| {
                let pc = build_pair_covariates(
                    &startup("s", &ss, &[]),
                    &accelerator("a", 1, &aa, &[]),
                    &CovariateRecipe::new([RELOCATED]),
                ).unwrap();
                pc.x[RELOCATED]
            };
            let base = r(label(s_state), label(a_state));
            prop_assert_eq!(base, r(relabel(s_state), relabel(a_state)));
            prop_assert_eq!(base == 1.0, s_state != a_state);
        }
    }
}
