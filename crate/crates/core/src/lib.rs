//! Two-stage estimation for one-to-many matching markets in which both sides
//! rank partners by a shared match value.
//!
//! The first stage fits the match-value coefficients by simulated maximum
//! likelihood of the observed (unique) stable matching. The second stage
//! regresses post-match outcomes on covariates plus the imputed conditional
//! mean of the matched pair's shock, which absorbs selection on unobserved
//! match quality.
//!
//! Module map:
//! - [`model`]: markets, matchings, covariates, parameters
//! - [`matcher`]: stable matching and blocking pairs
//! - [`likelihood`]: blocking thresholds and the simulated likelihood
//! - [`estimator`]: first-stage fit, bootstrap, goodness of fit
//! - [`control`]: importance-sampled correction terms
//! - [`regression`]: second-stage OLS with fixed effects and bootstrap tests
//! - [`synth`]: synthetic markets with known ground truth
//! - `oracle` (feature `oracle`): brute-force references

pub mod control;
pub mod error;
pub mod estimator;
pub mod io;
pub mod likelihood;
pub mod matcher;
pub mod model;
pub mod normal;
pub mod optim;
pub mod regression;
pub mod rng;
pub mod synth;

#[cfg(feature = "oracle")]
pub mod oracle;

pub use error::{Error, Result};
pub use model::{
    deterministic_utility, validate_market, Accelerator, CovariateRecipe, ErrorParams, FeatureMap,
    Market, MatchParams, MatchedMarket, Matching, NamedVector, PairCovariates, Startup,
    UtilityTable, Violation,
};
