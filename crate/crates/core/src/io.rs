//! CSV import and export.
//!
//! Every writer takes optional comment lines that are emitted first, each
//! prefixed with `# `. Readers skip `#` lines. Floats are written with 17
//! significant digits so that a write/read round trip is exact.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::free_energy::FreeEnergyReport;
use crate::gibbs::WeightedEnsemble;
use crate::model::{Path, TimeGrid};

/// Shortest representation with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_comments<W: Write>(out: &mut W, comments: &[String]) -> Result<()> {
    for line in comments {
        for part in line.lines() {
            writeln!(out, "# {part}")?;
        }
    }
    Ok(())
}

/// Comment lines, header row, then one record per row.
pub fn write_table<W, I, R>(mut out: W, comments: &[String], columns: &[String], rows: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    write_comments(&mut out, comments)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Two-column `x, y` companion file for plotting.
pub fn write_plot_data<W: Write>(out: W, comments: &[String], x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid("plot data columns differ in length"));
    }
    let rows = x.iter().zip(y).map(|(a, b)| [fmt_f64(*a), fmt_f64(*b)]);
    write_table(out, comments, &["x".into(), "y".into()], rows)
}

/// Parsed numeric CSV: header names, comment lines and a row-major body.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub comments: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Read a numeric CSV; every body cell must parse as `f64`.
pub fn read_table<R: Read>(mut input: R) -> Result<Table> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let comments = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .map(|l| l.trim_start_matches('#').trim().to_string())
        .collect();
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let columns: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|cell| {
                cell.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {}: cannot parse {cell:?} as a number", line + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != columns.len() {
            return Err(Error::Parse(format!("row {} has {} fields, expected {}", line + 1, row.len(), columns.len())));
        }
        rows.push(row);
    }
    Ok(Table { comments, columns, rows })
}

/// `t, {prefix}1..{prefix}d`, one row per grid point.
pub fn write_path<W: Write>(out: W, comments: &[String], path: &Path, prefix: &str) -> Result<()> {
    let d = path.dim();
    let mut columns = vec!["t".to_string()];
    columns.extend((1..=d).map(|k| format!("{prefix}{k}")));
    let values = path.values();
    let rows = path.grid().times().iter().enumerate().map(|(i, t)| {
        std::iter::once(fmt_f64(*t)).chain((0..d).map(move |k| fmt_f64(values[(i, k)])))
    });
    write_table(out, comments, &columns, rows)
}

/// Inverse of [`write_path`]. The grid is recovered from the row count and
/// the last time, and every time stamp is checked against it.
pub fn read_path<R: Read>(input: R) -> Result<Path> {
    let table = read_table(input)?;
    if table.columns.first().map(String::as_str) != Some("t") || table.columns.len() < 2 {
        return Err(Error::Parse("path CSV must start with a `t` column and one value column".into()));
    }
    let rows = table.rows.len();
    if rows < 2 || !(rows - 1).is_power_of_two() {
        return Err(Error::Parse(format!("path CSV has {rows} rows, expected 2^n + 1")));
    }
    let level = (rows - 1).trailing_zeros();
    let horizon = table.rows[rows - 1][0];
    let grid = Arc::new(TimeGrid::dyadic(level, horizon)?);
    for (i, (row, t)) in table.rows.iter().zip(grid.times()).enumerate() {
        if (row[0] - t).abs() > 1e-12 * horizon.abs().max(1.0) {
            return Err(Error::Parse(format!("row {i}: time {} is not on the dyadic grid", row[0])));
        }
    }
    let d = table.columns.len() - 1;
    let values = DMatrix::from_fn(rows, d, |i, k| table.rows[i][k + 1]);
    Path::new(grid, values)
}

/// Time-indexed Gaussian marginals, as stored in golden posterior files and
/// moment-track exports.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalTrack {
    pub model_hash: Option<String>,
    pub level: Option<u32>,
    pub times: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

/// `t, mean_1..mean_d, cov_11..cov_dd` (covariance row-major). When both
/// `model_hash` and `level` are set they go in a `model_hash=.. level=..`
/// comment line.
pub fn write_marginal_track<W: Write>(out: W, comments: &[String], track: &MarginalTrack) -> Result<()> {
    let d = track.means.first().map_or(0, |m| m.len());
    if track.means.len() != track.times.len() || track.covs.len() != track.times.len() {
        return Err(Error::invalid("track columns differ in length"));
    }
    let mut all = comments.to_vec();
    if let (Some(h), Some(l)) = (&track.model_hash, track.level) {
        all.push(format!("model_hash={h} level={l}"));
    }
    let mut columns = vec!["t".to_string()];
    columns.extend((1..=d).map(|k| format!("mean_{k}")));
    for r in 1..=d {
        columns.extend((1..=d).map(|c| format!("cov_{r}{c}")));
    }
    let rows = track.times.iter().enumerate().map(|(i, t)| {
        let mut row = vec![fmt_f64(*t)];
        row.extend(track.means[i].iter().map(|v| fmt_f64(*v)));
        for r in 0..d {
            row.extend((0..d).map(|c| fmt_f64(track.covs[i][(r, c)])));
        }
        row
    });
    write_table(out, &all, &columns, rows)
}

pub fn read_marginal_track<R: Read>(input: R) -> Result<MarginalTrack> {
    let table = read_table(input)?;
    let width = table.columns.len();
    let d = (1..=width).find(|d| 1 + d + d * d == width).ok_or_else(|| {
        Error::Parse(format!("{width} columns do not match `t, mean_1..mean_d, cov_11..cov_dd`"))
    })?;
    let mut model_hash = None;
    let mut level = None;
    for line in &table.comments {
        for token in line.split_whitespace() {
            if let Some(h) = token.strip_prefix("model_hash=") {
                model_hash = Some(h.to_string());
            } else if let Some(l) = token.strip_prefix("level=") {
                level = Some(l.parse().map_err(|_| Error::Parse(format!("bad level {l:?}")))?);
            }
        }
    }
    let times = table.rows.iter().map(|r| r[0]).collect();
    let means = table.rows.iter().map(|r| DVector::from_column_slice(&r[1..=d])).collect();
    let covs = table
        .rows
        .iter()
        .map(|r| DMatrix::from_row_slice(d, d, &r[1 + d..]))
        .collect();
    Ok(MarginalTrack {
        model_hash,
        level,
        times,
        means,
        covs,
    })
}

/// `stream_id, log_weight, x_T_1..x_T_d`; the log weights as stored in the
/// ensemble (normalised if [`WeightedEnsemble::normalize`] was called).
pub fn write_ensemble<W: Write>(out: W, comments: &[String], ensemble: &WeightedEnsemble) -> Result<()> {
    let d = ensemble.paths.first().map_or(0, |p| p.dim());
    let mut columns = vec!["stream_id".to_string(), "log_weight".to_string()];
    columns.extend((1..=d).map(|k| format!("x_T_{k}")));
    let rows = ensemble.paths.iter().enumerate().map(|(i, p)| {
        let mut row = vec![ensemble.stream_ids[i].to_string(), fmt_f64(ensemble.log_weights[i])];
        row.extend(p.terminal().iter().map(|v| fmt_f64(*v)));
        row
    });
    write_table(out, comments, &columns, rows)
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "label",
    "kl_to_reference",
    "expected_energy",
    "total",
    "gibbs_gap",
    "gap_predicted",
    "mc_se",
    "gap_se",
    "energy_integrable",
];

pub fn write_reports<W: Write>(out: W, comments: &[String], reports: &[FreeEnergyReport]) -> Result<()> {
    let columns: Vec<String> = REPORT_COLUMNS.iter().map(|s| s.to_string()).collect();
    let rows = reports.iter().map(|r| {
        vec![
            r.label.clone(),
            fmt_f64(r.kl_to_reference),
            fmt_f64(r.expected_energy),
            fmt_f64(r.total),
            fmt_f64(r.gibbs_gap),
            fmt_f64(r.gap_predicted),
            fmt_f64(r.mc_standard_error),
            fmt_f64(r.gap_standard_error),
            r.energy_integrable.to_string(),
        ]
    });
    write_table(out, comments, &columns, rows)
}
