//! Metrics rows, their CSV encoding and the summary statistics computed from them.

use std::io::Write;

use crate::error::Result;
use crate::federation::{Evaluation, RoundReport};

/// Column order of the metrics CSV.
pub const COLUMNS: [&str; 12] = [
    "run_id",
    "seed",
    "scheme",
    "optimizer",
    "round",
    "train_loss",
    "eval_accuracy",
    "comm_scalars_cum",
    "curvature_min",
    "curvature_max",
    "skips",
    "elapsed_ms",
];

/// One evaluation point of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub scheme: String,
    pub optimizer: String,
    pub round: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub comm_scalars_cum: u64,
    pub curvature_min: Option<f64>,
    pub curvature_max: Option<f64>,
    pub skips: usize,
    pub elapsed_ms: f64,
}

/// Labels shared by every row of a run.
#[derive(Debug, Clone)]
pub struct RunLabel {
    pub run_id: String,
    pub seed: u64,
    pub scheme: String,
    pub optimizer: String,
}

impl RunLabel {
    /// Row for the state before round 1.
    pub fn initial_row(&self, ev: &Evaluation) -> MetricsRow {
        MetricsRow {
            run_id: self.run_id.clone(),
            seed: self.seed,
            scheme: self.scheme.clone(),
            optimizer: self.optimizer.clone(),
            round: 0,
            train_loss: ev.train_loss,
            eval_accuracy: ev.accuracy,
            comm_scalars_cum: 0,
            curvature_min: None,
            curvature_max: None,
            skips: 0,
            elapsed_ms: 0.0,
        }
    }

    /// Row for an evaluated round; `None` for rounds without evaluation.
    pub fn row(&self, r: &RoundReport) -> Option<MetricsRow> {
        Some(MetricsRow {
            run_id: self.run_id.clone(),
            seed: self.seed,
            scheme: self.scheme.clone(),
            optimizer: self.optimizer.clone(),
            round: r.round,
            train_loss: r.train_loss,
            eval_accuracy: r.eval_accuracy?,
            comm_scalars_cum: r.comm_scalars_cum,
            curvature_min: r.curvature_min,
            curvature_max: r.curvature_max,
            skips: r.skips,
            elapsed_ms: r.elapsed_ms,
        })
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    fn record(&self) -> [String; 12] {
        [
            self.run_id.clone(),
            self.seed.to_string(),
            self.scheme.clone(),
            self.optimizer.clone(),
            self.round.to_string(),
            self.train_loss.to_string(),
            self.eval_accuracy.to_string(),
            self.comm_scalars_cum.to_string(),
            opt(self.curvature_min),
            opt(self.curvature_max),
            self.skips.to_string(),
            format!("{:.3}", self.elapsed_ms),
        ]
    }
}

/// Streams rows as CSV with a fixed header.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(COLUMNS).map_err(csv_err)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.write_record(row.record()).map_err(csv_err)
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| crate::error::Error::io("<metrics>", e))
    }
}

fn csv_err(e: csv::Error) -> crate::error::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => crate::error::Error::io("<metrics>", io),
        other => crate::error::Error::Format(format!("{other:?}")),
    }
}

/// First round after which accuracy stays at or above `target` for
/// `patience` consecutive evaluations; the streak's first round is returned.
pub fn convergence_round(rows: &[MetricsRow], target: f64, patience: usize) -> Option<usize> {
    let patience = patience.max(1);
    let mut streak = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.eval_accuracy >= target {
            streak += 1;
            if streak == patience {
                return Some(rows[i + 1 - patience].round);
            }
        } else {
            streak = 0;
        }
    }
    None
}

/// Mean accuracy of the last `window` evaluations after round 0.
pub fn final_accuracy(rows: &[MetricsRow], window: usize) -> Option<f64> {
    let evals: Vec<f64> = rows.iter().filter(|r| r.round > 0).map(|r| r.eval_accuracy).collect();
    if evals.is_empty() {
        return None;
    }
    let tail = &evals[evals.len().saturating_sub(window.max(1))..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(acc: &[f64]) -> Vec<MetricsRow> {
        acc.iter()
            .enumerate()
            .map(|(i, &a)| MetricsRow {
                run_id: "r".into(),
                seed: 0,
                scheme: "fedavg".into(),
                optimizer: "fedavg-sgd".into(),
                round: i + 1,
                train_loss: 1.0,
                eval_accuracy: a,
                comm_scalars_cum: 0,
                curvature_min: None,
                curvature_max: None,
                skips: 0,
                elapsed_ms: 0.0,
            })
            .collect()
    }

    #[test]
    fn convergence_examples() {
        assert_eq!(convergence_round(&rows(&[0.1, 0.2, 0.3]), 0.9, 3), None);
        assert_eq!(convergence_round(&rows(&[0.5, 0.9, 0.9, 0.9]), 0.85, 3), Some(2));
        assert_eq!(convergence_round(&rows(&[0.9, 0.5, 0.9, 0.9]), 0.85, 3), None);
        assert_eq!(convergence_round(&rows(&[0.9, 0.5, 0.9]), 0.85, 1), Some(1));
    }

    #[test]
    fn final_accuracy_window() {
        let r = rows(&(0..30).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(final_accuracy(&r, 20), Some((10..30).sum::<i32>() as f64 / 20.0));
        assert_eq!(final_accuracy(&r[..5], 20), Some(2.0));
        assert_eq!(final_accuracy(&[], 20), None);
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        let mut w = MetricsWriter::new(&mut buf).unwrap();
        let mut r = rows(&[0.5]).remove(0);
        r.curvature_min = Some(0.25);
        w.write(&r).unwrap();
        w.finish().unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "r,0,fedavg,fedavg-sgd,1,1,0.5,0,0.25,,0,0.000");
    }
}
