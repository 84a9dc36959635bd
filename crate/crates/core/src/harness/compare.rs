//! Comparison tables: one base configuration, a list of labelled override
//! rows, each run over its seed sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};

use super::config::{parse_config_str, ExperimentConfig};
use super::run::{run, RunSummary};

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum BaseSpec {
    Path(PathBuf),
    Inline(toml::Table),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RowSpec {
    label: String,
    #[serde(default)]
    set: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    #[serde(default = "default_title")]
    title: String,
    base: BaseSpec,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(rename = "row")]
    rows: Vec<RowSpec>,
}

fn default_title() -> String {
    "comparison".into()
}

/// A parsed comparison: one fully validated configuration per row.
#[derive(Debug, Clone)]
pub struct TableSpec {
    pub title: String,
    pub output_dir: PathBuf,
    pub rows: Vec<(String, ExperimentConfig)>,
}

/// Parses a table spec. Every row config is validated before anything runs.
pub fn parse_table_str(text: &str, base_dir: &Path) -> Result<TableSpec> {
    let file: TableFile = toml::from_str(text).map_err(|e| Error::config("<table>", e.message().trim()))?;
    if file.rows.is_empty() {
        return Err(Error::config("row", "a table needs at least one row"));
    }
    let (base_text, config_dir) = match &file.base {
        BaseSpec::Path(p) => {
            let p = if p.is_relative() { base_dir.join(p) } else { p.clone() };
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            (text, p.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        BaseSpec::Inline(t) => (toml::to_string(t).expect("table serializes"), base_dir.to_path_buf()),
    };
    let output_dir = file.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let output_dir = match std::env::var(super::config::OUTPUT_DIR_ENV) {
        Ok(d) if !d.is_empty() => PathBuf::from(d),
        _ => output_dir,
    };
    let mut rows = Vec::with_capacity(file.rows.len());
    for (i, row) in file.rows.iter().enumerate() {
        let mut cfg = parse_config_str(&base_text, &row.set).map_err(|e| match e {
            Error::Config { path, message } => Error::config(format!("row[{i}].{path}"), message),
            other => other,
        })?;
        cfg.name = format!("{:02}-{}", i, slug(&row.label));
        cfg.output_dir = output_dir.join(slug(&file.title));
        cfg.data.resolve_relative(&config_dir);
        rows.push((row.label.clone(), cfg));
    }
    Ok(TableSpec {
        title: file.title,
        output_dir,
        rows,
    })
}

impl TableSpec {
    /// Redirects every row's artifacts under `dir`.
    pub fn set_output_dir(&mut self, dir: impl Into<PathBuf>) {
        self.output_dir = dir.into();
        let rows_dir = self.output_dir.join(slug(&self.title));
        for (_, cfg) in &mut self.rows {
            cfg.output_dir = rows_dir.clone();
        }
    }
}

pub fn parse_table(path: impl AsRef<Path>) -> Result<TableSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table_str(&text, path.parent().unwrap_or(Path::new(".")))
}

fn slug(s: &str) -> String {
    let out: String = s
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if out.is_empty() {
        "row".into()
    } else {
        out
    }
}

/// Aggregates over one row's seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub scheme: String,
    pub optimizer: String,
    pub seeds: usize,
    pub final_accuracy: Option<f64>,
    /// Mean over seeds that converged, with their count.
    pub convergence_round: Option<(f64, usize)>,
    pub comm_scalars: f64,
}

fn aggregate(label: &str, cfg: &ExperimentConfig, runs: &[RunSummary]) -> ComparisonRow {
    let n = runs.len() as f64;
    let accs: Vec<f64> = runs.iter().filter_map(|r| r.final_accuracy).collect();
    let conv: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.convergence_round)
        .map(|r| r as f64)
        .collect();
    ComparisonRow {
        label: label.to_string(),
        scheme: cfg.scheme.name().into(),
        optimizer: cfg.round.optimizer.name().into(),
        seeds: runs.len(),
        final_accuracy: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
        convergence_round: (!conv.is_empty()).then(|| (conv.iter().sum::<f64>() / conv.len() as f64, conv.len())),
        comm_scalars: runs.iter().map(|r| r.comm_scalars as f64).sum::<f64>() / n,
    }
}

/// Runs every row (rows in parallel, output in configured order).
pub fn compare(spec: &TableSpec) -> Result<Vec<ComparisonRow>> {
    let results: Vec<Result<ComparisonRow>> = spec
        .rows
        .par_iter()
        .map(|(label, cfg)| run(cfg).map(|runs| aggregate(label, cfg, &runs)))
        .collect();
    results.into_iter().collect()
}

/// Plain-text rendering.
pub fn render_text(title: &str, rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{title}\n");
    let _ = writeln!(
        out,
        "{:<width$}  {:<7}  {:<12}  {:>5}  {:>9}  {:>10}  {:>14}",
        "label", "scheme", "optimizer", "seeds", "final_acc", "conv_round", "comm_scalars"
    );
    for r in rows {
        let acc = r.final_accuracy.map_or("-".into(), |a| format!("{a:.4}"));
        let conv = r.convergence_round.map_or("-".into(), |(m, k)| {
            if k == r.seeds {
                format!("{m:.1}")
            } else {
                format!("{m:.1}({k})")
            }
        });
        let _ = writeln!(
            out,
            "{:<width$}  {:<7}  {:<12}  {:>5}  {:>9}  {:>10}  {:>14.0}",
            r.label, r.scheme, r.optimizer, r.seeds, acc, conv, r.comm_scalars
        );
    }
    out
}

/// CSV rendering with a fixed header.
pub fn render_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        "label",
        "scheme",
        "optimizer",
        "seeds",
        "final_accuracy",
        "convergence_round",
        "converged_seeds",
        "comm_scalars",
    ];
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(header).map_err(fmt)?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.scheme.clone(),
            r.optimizer.clone(),
            r.seeds.to_string(),
            r.final_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            r.convergence_round.map(|c| c.0.to_string()).unwrap_or_default(),
            r.convergence_round.map_or(0, |c| c.1).to_string(),
            r.comm_scalars.to_string(),
        ])
        .map_err(fmt)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Runs the table and writes `<title>.compare.txt` and `.csv` next to the row outputs.
pub fn compare_and_write(spec: &TableSpec) -> Result<(Vec<ComparisonRow>, String)> {
    let rows = compare(spec)?;
    let text = render_text(&spec.title, &rows);
    let dir = spec.output_dir.join(slug(&spec.title));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let txt = dir.join("compare.txt");
    fs::write(&txt, &text).map_err(|e| Error::io(&txt, e))?;
    let csv_path = dir.join("compare.csv");
    fs::write(&csv_path, render_csv(&rows)?).map_err(|e| Error::io(&csv_path, e))?;
    Ok((rows, text))
}
