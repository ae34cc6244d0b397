//! Deterministic markdown tables and CSV files from evaluation results.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EvalResult;
use crate::error::{DfrError, Result};

/// Run identity printed above the tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub title: String,
    pub config_hash: String,
    pub backbone_hash: String,
    pub data_hash: String,
    pub notes: Vec<String>,
}

type RowKey = (String, String, String);
type ColKey = (String, String);

fn column_order(task: &str) -> (usize, String) {
    let pos = crate::benchgen::Task::ALL
        .iter()
        .position(|t| t.as_str() == task)
        .unwrap_or(crate::benchgen::Task::ALL.len());
    (pos, task.to_string())
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "n/a".into()
    } else if v.abs() >= 100.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

/// One pivot table per experiment: rows are method/style/split, columns
/// are task/metric. Ordering depends only on the result contents.
pub fn render_markdown(header: &ReportHeader, results: &[EvalResult]) -> String {
    let mut out = format!("# {}\n\n", header.title);
    for (k, v) in [
        ("config", &header.config_hash),
        ("backbone", &header.backbone_hash),
        ("data", &header.data_hash),
    ] {
        if !v.is_empty() {
            out.push_str(&format!("- {k}: `{v}`\n"));
        }
    }
    for n in &header.notes {
        out.push_str(&format!("- {n}\n"));
    }
    let mut by_exp: BTreeMap<&str, Vec<&EvalResult>> = BTreeMap::new();
    for r in results {
        by_exp.entry(&r.experiment).or_default().push(r);
    }
    for (exp, rs) in by_exp {
        out.push_str(&format!("\n## {exp}\n\n"));
        let mut cols: BTreeSet<((usize, String), String)> = BTreeSet::new();
        let mut cells: BTreeMap<RowKey, BTreeMap<ColKey, (f64, usize)>> = BTreeMap::new();
        for r in &rs {
            let ck = (r.task.clone(), r.metric.as_str().to_string());
            cols.insert((column_order(&r.task), ck.1.clone()));
            cells
                .entry((r.method.clone(), r.style.clone(), r.split.clone()))
                .or_default()
                .insert(ck, (r.value, r.count));
        }
        let cols: Vec<ColKey> = cols.into_iter().map(|((_, t), m)| (t, m)).collect();
        out.push_str("| method | style | split |");
        for (t, m) in &cols {
            out.push_str(&format!(" {t} {m} |"));
        }
        out.push_str("\n|---|---|---|");
        out.push_str(&"---|".repeat(cols.len()));
        out.push('\n');
        for ((method, style, split), row) in &cells {
            out.push_str(&format!("| {method} | {style} | {split} |"));
            for c in &cols {
                match row.get(c) {
                    Some(&(v, n)) => out.push_str(&format!(" {} (n={n}) |", fmt_value(v))),
                    None => out.push_str(" / |"),
                }
            }
            out.push('\n');
        }
    }
    out
}

fn csv_err(e: impl std::fmt::Display) -> DfrError {
    DfrError::format("csv", e.to_string())
}

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| DfrError::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// All results as CSV, one row each, in a stable sorted order.
pub fn render_csv(results: &[EvalResult]) -> Result<String> {
    let mut rows: Vec<&EvalResult> = results.iter().collect();
    rows.sort_by(|a, b| {
        (&a.experiment, &a.method, &a.split, &a.style, column_order(&a.task), a.metric.as_str())
            .cmp(&(&b.experiment, &b.method, &b.split, &b.style, column_order(&b.task), b.metric.as_str()))
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(csv_err)?;
    String::from_utf8(bytes).map_err(csv_err)
}

/// Writes `report.md`, `results.csv` and one `plot_<experiment>.csv` per
/// experiment into `dir`. Returns the written paths.
pub fn write_report(dir: &Path, header: &ReportHeader, results: &[EvalResult]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| DfrError::io(dir, e))?;
    let mut written = Vec::new();
    write(dir.join("report.md"), &render_markdown(header, results), &mut written)?;
    write(dir.join("results.csv"), &render_csv(results)?, &mut written)?;
    let experiments: BTreeSet<&str> = results.iter().map(|r| r.experiment.as_str()).collect();
    for exp in experiments {
        let part: Vec<EvalResult> = results.iter().filter(|r| r.experiment == exp).cloned().collect();
        let safe: String = exp.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
        write(dir.join(format!("plot_{safe}.csv")), &render_csv(&part)?, &mut written)?;
    }
    Ok(written)
}
