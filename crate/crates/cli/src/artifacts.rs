//! On-disk documents written by the commands. Every one carries a `run`
//! record with the command and its fully resolved settings.

use std::path::{Path, PathBuf};

use matchest_core::estimator::FirstStageFit;
use matchest_core::io::{attach_matchings, load_markets, read_json, MatchingFile};
use matchest_core::synth::GroundTruth;
use matchest_core::{Error, MatchedMarket, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub command: String,
    pub seed: Option<u64>,
    pub settings: serde_json::Value,
}

impl RunRecord {
    pub fn new(command: &str, seed: Option<u64>, settings: serde_json::Value) -> Self {
        Self {
            tool: format!("matchest {}", env!("CARGO_PKG_VERSION")),
            command: command.into(),
            seed,
            settings,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitDocument {
    pub run: RunRecord,
    pub fit: FirstStageFit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatchingDocument {
    pub run: Option<RunRecord>,
    pub matchings: MatchingFile,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TruthDocument {
    pub run: RunRecord,
    pub truth: GroundTruth,
}

/// `matching.json` beside the market directory unless given explicitly.
pub fn matching_path(markets: &Path, explicit: Option<&PathBuf>) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| {
        markets
            .parent()
            .unwrap_or(Path::new(""))
            .join("matching.json")
    })
}

pub fn load_observed(markets: &Path, matching: Option<&PathBuf>) -> Result<Vec<MatchedMarket>> {
    let doc: MatchingDocument = read_json(&matching_path(markets, matching))?;
    attach_matchings(load_markets(markets)?, &doc.matchings)
}

pub fn load_fit(path: &Path) -> Result<FitDocument> {
    let doc: FitDocument = read_json(path)?;
    if doc.fit.beta_hat.is_empty() {
        return Err(Error::Config(format!(
            "{} has no coefficients",
            path.display()
        )));
    }
    Ok(doc)
}
