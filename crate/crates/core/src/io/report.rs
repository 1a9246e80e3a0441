//! CSV and JSON artifacts. Every artifact carries the run seed and the
//! configuration hash; files are written to a temporary name and renamed.

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::SweepReport;
use crate::metrics::Histogram;
use crate::trainer::TrainHistory;

pub const SCHEMA_VERSION: u32 = 1;

/// Identifies the run an artifact came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

/// First 16 hex digits of the SHA-256 of the canonical config text.
pub fn config_hash(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    hex::encode(digest)[..16].to_string()
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes).map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::input(format!("csv encoding: {e}"));
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(&row).map_err(fail)?;
    }
    w.into_inner()
        .map_err(|e| Error::input(format!("csv encoding: {e}")))
}

fn tail(p: &Provenance) -> [String; 2] {
    [p.seed.to_string(), p.config_hash.clone()]
}

/// `epoch, iteration, loss, te_<spec>..., seed, config_hash`.
pub fn history_csv(history: &TrainHistory, prov: &Provenance) -> Result<Vec<u8>> {
    let mut header: Vec<String> = ["epoch", "iteration", "loss"].map(String::from).to_vec();
    header.extend(history.specs.iter().map(|s| format!("te_{}", s.label())));
    header.extend(["seed", "config_hash"].map(String::from));
    let rows = history.records.iter().map(|r| {
        let mut row = vec![
            r.epoch.to_string(),
            r.iteration.to_string(),
            r.loss.to_string(),
        ];
        row.extend(r.errors.iter().map(f64::to_string));
        row.extend(tail(prov));
        row
    });
    csv_bytes(&header, rows)
}

/// `parameter, mean_error, std_error, trials, seed, config_hash`.
pub fn sweep_csv(report: &SweepReport, prov: &Provenance) -> Result<Vec<u8>> {
    let header = [
        "parameter",
        "mean_error",
        "std_error",
        "trials",
        "seed",
        "config_hash",
    ]
    .map(String::from);
    let rows = report.points.iter().map(|p| {
        let mut row = vec![
            p.parameter.to_string(),
            p.mean_error.to_string(),
            p.std_error.to_string(),
            p.trials.to_string(),
        ];
        row.extend(tail(prov));
        row
    });
    csv_bytes(&header, rows)
}

/// `bin_left, bin_right, count, seed, config_hash`.
pub fn histogram_csv(h: &Histogram, prov: &Provenance) -> Result<Vec<u8>> {
    let header = ["bin_left", "bin_right", "count", "seed", "config_hash"].map(String::from);
    let rows = h.counts.iter().enumerate().map(|(i, c)| {
        let mut row = vec![
            h.edges[i].to_string(),
            h.edges[i + 1].to_string(),
            c.to_string(),
        ];
        row.extend(tail(prov));
        row
    });
    csv_bytes(&header, rows)
}

/// JSON document `{schema_version, seed, config_hash, kind, data}`.
pub fn json_report(kind: &str, data: &impl Serialize, prov: &Provenance) -> Result<Vec<u8>> {
    let data =
        serde_json::to_value(data).map_err(|e| Error::input(format!("json encoding: {e}")))?;
    let doc: Value = json!({
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "seed": prov.seed,
        "config_hash": prov.config_hash,
        "data": data,
    });
    let mut out =
        serde_json::to_vec_pretty(&doc).map_err(|e| Error::input(format!("json encoding: {e}")))?;
    out.push(b'\n');
    Ok(out)
}
