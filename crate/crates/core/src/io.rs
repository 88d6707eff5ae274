//! File formats: market JSON documents, matchings, and CSV tables with an
//! optional leading `# ` line carrying the producing configuration.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::control::{CorrectionRow, CorrectionTable, MarketDiagnostics};
use crate::error::{Error, Result};
use crate::model::{Market, MatchedMarket, Matching, UtilityTable};
use crate::regression::{OutcomeRow, OutcomeTable};

/// Matchings keyed by market id, each mapping startup id to accelerator id.
pub type MatchingFile = BTreeMap<String, BTreeMap<String, String>>;

const FIXED_OUTCOME_COLUMNS: [&str; 5] = [
    "market_id",
    "startup_id",
    "accelerator_id",
    "year",
    "industry",
];

/// Writes `bytes` to `path`, refusing to replace an existing file unless `force`.
pub fn write_new(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T, force: bool) -> Result<()> {
    write_new(path, &to_json_bytes(value)?, force)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn header_line<T: Serialize>(config: Option<&T>) -> Result<String> {
    Ok(match config {
        Some(c) => format!("# {}\n", serde_json::to_string(c)?),
        None => String::new(),
    })
}

/// The JSON after a leading `# `, if the file starts with one.
pub fn read_csv_header(path: &Path) -> Result<Option<serde_json::Value>> {
    let mut first = String::new();
    BufReader::new(fs::File::open(path)?).read_line(&mut first)?;
    match first.strip_prefix("# ") {
        Some(rest) => Ok(Some(serde_json::from_str(rest.trim_end())?)),
        None => Ok(None),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(file))
}

fn finish_csv(mut w: csv::Writer<Vec<u8>>, header: String) -> Result<Vec<u8>> {
    w.flush()?;
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let mut out = header.into_bytes();
    out.extend(body);
    Ok(out)
}

fn parse_f64(field: &str, column: &str, path: &Path) -> Result<f64> {
    field.trim().parse().map_err(|_| {
        Error::config(format!(
            "{}: `{field}` in column `{column}` is not a number",
            path.display()
        ))
    })
}

pub fn outcome_table_csv<T: Serialize>(
    table: &OutcomeTable,
    config: Option<&T>,
) -> Result<Vec<u8>> {
    let mut columns: Vec<&str> = table
        .rows
        .iter()
        .flat_map(|r| r.values.keys().map(String::as_str))
        .collect();
    columns.sort_unstable();
    columns.dedup();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(FIXED_OUTCOME_COLUMNS.iter().chain(&columns))?;
    for r in &table.rows {
        let mut rec = vec![
            r.market_id.clone(),
            r.startup_id.clone(),
            r.accelerator_id.clone(),
            r.year.to_string(),
            r.industry.clone(),
        ];
        for c in &columns {
            rec.push(r.values.get(*c).map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    finish_csv(w, header_line(config)?)
}

pub fn read_outcome_table(path: &Path) -> Result<OutcomeTable> {
    let mut r = csv_reader(path)?;
    let headers = r.headers()?.clone();
    for (i, want) in FIXED_OUTCOME_COLUMNS.iter().enumerate() {
        if headers.get(i) != Some(want) {
            return Err(Error::config(format!(
                "{}: column {} must be `{want}`",
                path.display(),
                i + 1
            )));
        }
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut values = BTreeMap::new();
        for (name, field) in headers
            .iter()
            .zip(rec.iter())
            .skip(FIXED_OUTCOME_COLUMNS.len())
        {
            if !field.is_empty() {
                values.insert(name.to_string(), parse_f64(field, name, path)?);
            }
        }
        rows.push(OutcomeRow {
            market_id: rec[0].to_string(),
            startup_id: rec[1].to_string(),
            accelerator_id: rec[2].to_string(),
            year: rec[3].trim().parse().map_err(|_| {
                Error::config(format!("{}: bad year `{}`", path.display(), &rec[3]))
            })?,
            industry: rec[4].to_string(),
            values,
        });
    }
    Ok(OutcomeTable { rows })
}

pub fn correction_table_csv<T: Serialize>(
    table: &CorrectionTable,
    config: Option<&T>,
) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "market_id",
        "startup_id",
        "accelerator_id",
        "eps_hat",
        "ess",
    ])?;
    for r in &table.rows {
        w.write_record([
            r.market_id.as_str(),
            r.startup_id.as_str(),
            r.accelerator_id.as_str(),
            &r.eps_hat.to_string(),
            &r.ess.to_string(),
        ])?;
    }
    finish_csv(w, header_line(config)?)
}

pub fn read_correction_table(path: &Path) -> Result<CorrectionTable> {
    let mut r = csv_reader(path)?;
    let mut table = CorrectionTable::default();
    for rec in r.deserialize() {
        let row: CorrectionRow = rec?;
        if table
            .markets
            .last()
            .map(|m: &MarketDiagnostics| &m.market_id)
            != Some(&row.market_id)
        {
            table.markets.push(MarketDiagnostics {
                market_id: row.market_id.clone(),
                n_draws: 0,
                ess: row.ess,
            });
        }
        table.rows.push(row);
    }
    Ok(table)
}

/// Long-format utilities: one `accelerator_id,startup_id,utility` row per pair.
pub fn read_utilities(path: &Path, market: &Market) -> Result<UtilityTable> {
    let mut r = csv_reader(path)?;
    let (n_a, n_s) = (market.n_accelerators(), market.n_startups());
    let mut values = vec![f64::NAN; n_a * n_s];
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::config(format!(
                "{}: expected accelerator_id,startup_id,utility rows",
                path.display()
            )));
        }
        let a = market
            .accelerator_index(&rec[0])
            .ok_or_else(|| Error::config(format!("unknown accelerator `{}`", &rec[0])))?;
        let s = market
            .startup_index(&rec[1])
            .ok_or_else(|| Error::config(format!("unknown startup `{}`", &rec[1])))?;
        values[a * n_s + s] = parse_f64(&rec[2], "utility", path)?;
    }
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(Error::config(format!(
            "{}: no utility for pair ({}, {})",
            path.display(),
            market.accelerators[i / n_s].id,
            market.startups[i % n_s].id
        )));
    }
    UtilityTable::new(n_a, n_s, values)
}

pub fn utilities_csv(market: &Market, u: &UtilityTable) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["accelerator_id", "startup_id", "utility"])?;
    for (a, acc) in market.accelerators.iter().enumerate() {
        for (s, st) in market.startups.iter().enumerate() {
            w.write_record([acc.id.as_str(), st.id.as_str(), &u.get(a, s).to_string()])?;
        }
    }
    finish_csv(w, String::new())
}

/// Market documents (`*.json`) in a directory, in file-name order.
pub fn market_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::config(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::config(format!(
            "no market files in {}",
            dir.display()
        )));
    }
    Ok(paths)
}

pub fn load_markets(dir: &Path) -> Result<Vec<Market>> {
    market_paths(dir)?.iter().map(Market::load).collect()
}

/// Pairs each market with its matching from `matchings`.
pub fn attach_matchings(
    markets: Vec<Market>,
    matchings: &MatchingFile,
) -> Result<Vec<MatchedMarket>> {
    markets
        .into_iter()
        .map(|m| {
            let map = matchings
                .get(&m.id)
                .ok_or_else(|| Error::config(format!("no matching for market `{}`", m.id)))?;
            let matching = Matching::from_id_map(&m, map)?;
            MatchedMarket::new(m, matching)
        })
        .collect()
}

pub fn matching_file(observed: &[MatchedMarket]) -> MatchingFile {
    observed
        .iter()
        .map(|o| (o.market.id.clone(), o.matching.to_id_map(&o.market)))
        .collect()
}

/// Writes each market to `dir/<id>.json`.
pub fn write_markets(dir: &Path, markets: &[&Market], force: bool) -> Result<()> {
    for m in markets {
        let mut bytes = m.to_json()?.into_bytes();
        bytes.push(b'\n');
        write_new(&dir.join(format!("{}.json", m.id)), &bytes, force)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SimConfig};

    #[test]
    fn outcome_table_round_trips() {
        let data = generate(&SimConfig {
            n_markets: 3,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.csv");
        let cfg = serde_json::json!({"seed": 3});
        write_new(
            &path,
            &outcome_table_csv(&data.outcomes, Some(&cfg)).unwrap(),
            false,
        )
        .unwrap();
        assert_eq!(read_outcome_table(&path).unwrap(), data.outcomes);
        assert_eq!(read_csv_header(&path).unwrap(), Some(cfg));
    }

    #[test]
    fn refuses_to_overwrite_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        write_json(&path, &1, false).unwrap();
        assert!(matches!(
            write_json(&path, &2, false),
            Err(Error::Config(_))
        ));
        write_json(&path, &2, true).unwrap();
        assert_eq!(read_json::<i32>(&path).unwrap(), 2);
    }

    #[test]
    fn markets_and_matchings_round_trip() {
        let data = generate(&SimConfig {
            n_markets: 4,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let markets: Vec<&Market> = data.observed.iter().map(|o| &o.market).collect();
        write_markets(dir.path(), &markets, false).unwrap();
        let back = attach_matchings(
            load_markets(dir.path()).unwrap(),
            &matching_file(&data.observed),
        )
        .unwrap();
        assert_eq!(back, data.observed);
    }

    #[test]
    fn corrections_round_trip_without_the_se_column() {
        let table = CorrectionTable {
            rows: vec![CorrectionRow {
                market_id: "m".into(),
                startup_id: "s".into(),
                accelerator_id: "a".into(),
                eps_hat: 0.1 + 0.2,
                se: 0.5,
                ess: 812.25,
            }],
            markets: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_new(
            &path,
            &correction_table_csv::<()>(&table, None).unwrap(),
            false,
        )
        .unwrap();
        let back = read_correction_table(&path).unwrap();
        assert_eq!(back.rows[0].eps_hat, 0.1 + 0.2);
        assert_eq!(back.rows[0].ess, 812.25);
    }
}
