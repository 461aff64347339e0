//! Result files: the per-row CSV, per-metric plot series and epoch logs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::sweep::{sort_rows, ResultRow};
use crate::error::{Error, Result};
use crate::fir::Policy;
use crate::model::Mode;
use crate::training::EpochLog;

pub const CSV_HEADER: [&str; 9] = [
    "seed",
    "snr_db",
    "method",
    "mode",
    "budget",
    "rank1",
    "color_acc",
    "type_acc",
    "deep_fades",
];

pub const METRICS: [&str; 3] = ["rank1", "color_acc", "type_acc"];

fn real(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.4}")
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

/// Header plus one line per row, sorted by (seed, mode, method, snr).
pub fn emit_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::contract("no rows to write"));
    }
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in &sorted {
        w.write_record([
            r.seed.to_string(),
            real(r.snr_db),
            r.method.to_string(),
            r.mode.to_string(),
            r.budget.to_string(),
            real(r.rank1),
            real(r.color_acc),
            real(r.type_acc),
            r.deep_fades.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    if header != CSV_HEADER {
        return Err(Error::Parse(format!("unexpected header {header:?}")));
    }
    let parse_f = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| Error::Parse(format!("`{s}`: {e}")))
    };
    let parse_u = |s: &str| {
        s.parse::<u64>()
            .map_err(|e| Error::Parse(format!("`{s}`: {e}")))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        rows.push(ResultRow {
            seed: parse_u(&rec[0])?,
            snr_db: parse_f(&rec[1])?,
            method: rec[2].parse()?,
            mode: rec[3].parse()?,
            budget: parse_u(&rec[4])? as usize,
            rank1: parse_f(&rec[5])?,
            color_acc: parse_f(&rec[6])?,
            type_acc: parse_f(&rec[7])?,
            deep_fades: parse_u(&rec[8])? as usize,
            failure: None,
        });
    }
    Ok(rows)
}

/// Mean over seeds and its standard error for one (mode, method, snr) cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeriesPoint {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

fn mean_stderr(values: &[f64]) -> SeriesPoint {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = if n < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    SeriesPoint { mean, stderr, n }
}

/// Key with the SNR stored as its bit pattern for ordering.
pub type SeriesKey = (Mode, Policy, i64);

fn snr_key(snr: f64) -> i64 {
    // total order matching f64::total_cmp for the finite grid values
    let bits = snr.to_bits() as i64;
    bits ^ (((bits >> 63) as u64) >> 1) as i64
}

/// Seed-aggregated series of one metric; failed (NaN) rows are left out.
pub fn aggregate(
    rows: &[ResultRow],
    metric: &str,
) -> Result<BTreeMap<SeriesKey, (f64, SeriesPoint)>> {
    let mut cells: BTreeMap<SeriesKey, (f64, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let v = r
            .metric(metric)
            .ok_or_else(|| Error::contract(format!("unknown metric `{metric}`")))?;
        let cell = cells
            .entry((r.mode, r.method, snr_key(r.snr_db)))
            .or_insert_with(|| (r.snr_db, Vec::new()));
        if !v.is_nan() {
            cell.1.push(v);
        }
    }
    Ok(cells
        .into_iter()
        .filter(|(_, (_, v))| !v.is_empty())
        .map(|(k, (snr, v))| (k, (snr, mean_stderr(&v))))
        .collect())
}

/// One `<metric>.csv` per task metric with columns
/// `snr_db,method,mode,mean,stderr,n`.
pub fn emit_plot_series(rows: &[ResultRow], dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::contract("no rows to aggregate"));
    }
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for metric in METRICS {
        let path = dir.join(format!("{metric}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(["snr_db", "method", "mode", "mean", "stderr", "n"])
            .map_err(csv_err)?;
        for ((mode, method, _), (snr, p)) in aggregate(rows, metric)? {
            w.write_record([
                real(snr),
                method.to_string(),
                mode.to_string(),
                format!("{:.6}", p.mean),
                format!("{:.6}", p.stderr),
                p.n.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn write_epoch_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut text = String::from(EpochLog::CSV_HEADER);
    text.push('\n');
    for e in log {
        text.push_str(&e.csv_line());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}
