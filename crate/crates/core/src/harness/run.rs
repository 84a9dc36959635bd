//! Executes an [`ExperimentConfig`] seed by seed and writes its artifacts.

use std::fs;
use std::path::PathBuf;

use crate::data::{
    load_csv, load_idx, partition_iid, partition_noniid_l, share_subset, Dataset, PartitionPlan, SyntheticTask,
};
use crate::error::{Error, Result};
use crate::federation::{build_clients, run_experiment, Federation, RoundReport, RunOutcome};
use crate::fedova::run_fedova;
use crate::numerics::streams;

use super::config::{DataSource, ExperimentConfig, PartitionKind, Scheme};
use super::metrics::{convergence_round, final_accuracy, MetricsRow, MetricsWriter, RunLabel};

/// Train and test sets of one run.
#[derive(Debug, Clone)]
pub struct DataPair {
    pub train: Dataset,
    pub test: Dataset,
}

/// Loads (or generates, for `synth`) the data for `seed`.
pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<DataPair> {
    let d = &cfg.data;
    let path = |p: &Option<PathBuf>| p.clone().expect("validated");
    let (train, test) = match d.source {
        DataSource::Synth => {
            let task = SyntheticTask::new(d.input_dim, d.num_classes, d.margin, d.seed.unwrap_or(seed))?;
            (
                task.sample(d.n_train, streams::DATA, "synth-train")?,
                task.sample(d.n_test, streams::TEST_DATA, "synth-test")?,
            )
        }
        DataSource::Idx => (
            load_idx(path(&d.train_images), path(&d.train_labels))?,
            load_idx(path(&d.test_images), path(&d.test_labels))?,
        ),
        DataSource::Csv => (
            load_csv(path(&d.train_csv), &d.label_column)?,
            load_csv(path(&d.test_csv), &d.label_column)?,
        ),
    };
    if train.input_dim() != test.input_dim() {
        return Err(Error::Consistency(format!(
            "train has {} features, test has {}",
            train.input_dim(),
            test.input_dim()
        )));
    }
    if test.num_classes > train.num_classes {
        return Err(Error::Consistency(format!(
            "test labels reach class {} but train only has {} classes",
            test.num_classes - 1,
            train.num_classes
        )));
    }
    let test = Dataset::new(test.features, test.labels, train.num_classes, test.name)?;
    Ok(DataPair { train, test })
}

/// Client partition of the training set for `seed`.
pub fn partition(cfg: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<PartitionPlan> {
    let k = cfg.partition.clients;
    if k > train.len() {
        return Err(Error::config(
            "partition.clients",
            format!("{k} clients exceed {} training samples", train.len()),
        ));
    }
    match cfg.partition.scheme {
        PartitionKind::Iid => partition_iid(train, k, seed),
        PartitionKind::NoniidL => partition_noniid_l(train, k, cfg.partition.l, seed),
    }
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub label: RunLabel,
    pub rows: Vec<MetricsRow>,
    pub outcome: RunOutcome,
}

/// Per-seed summary line.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub final_accuracy: Option<f64>,
    pub convergence_round: Option<usize>,
    pub comm_scalars: u64,
    pub rounds: usize,
}

impl RunSummary {
    pub fn line(&self) -> String {
        let acc = self.final_accuracy.map_or("none".into(), |a| format!("{a:.4}"));
        let conv = self.convergence_round.map_or("none".into(), |r| r.to_string());
        format!(
            "run={} seed={} rounds={} final_accuracy={acc} convergence_round={conv} comm_scalars={}",
            self.run_id, self.seed, self.rounds, self.comm_scalars
        )
    }
}

/// Runs one seed on already loaded data. Rows gathered before a failure are
/// returned alongside the error.
pub fn run_seed(
    cfg: &ExperimentConfig,
    data: &DataPair,
    seed: u64,
) -> std::result::Result<SeedRun, (Error, Vec<MetricsRow>)> {
    let label = RunLabel {
        run_id: format!("{}-s{seed}", cfg.name),
        seed,
        scheme: cfg.scheme.name().into(),
        optimizer: cfg.round.optimizer.name().into(),
    };
    let mut rows = Vec::new();
    let result = (|| {
        let plan = partition(cfg, &data.train, seed)?;
        let shared = match &cfg.sharing {
            Some(s) => {
                let mean = data.train.len() as f64 / plan.num_clients() as f64;
                Some(share_subset(&data.train, s.beta, mean, seed)?)
            }
            None => None,
        };
        let mut fed = Federation {
            train: &data.train,
            test: &data.test,
            clients: build_clients(&plan.assignment, shared.as_deref(), seed),
        };
        let spec = cfg.model.spec(data.train.input_dim(), data.train.num_classes);
        let mut sink = |r: &RoundReport| rows.extend(label.row(r));
        match cfg.scheme {
            Scheme::Fedavg => run_experiment(&mut fed, spec, &cfg.round, seed, &mut sink),
            Scheme::Fedova => run_fedova(&mut fed, spec, &cfg.round, &cfg.fedova, seed, &mut sink),
        }
    })();
    match result {
        Ok(outcome) => {
            rows.insert(0, label.initial_row(&outcome.initial));
            Ok(SeedRun { label, rows, outcome })
        }
        Err(e) => Err((e, rows)),
    }
}

impl SeedRun {
    pub fn summary(&self, cfg: &ExperimentConfig) -> RunSummary {
        RunSummary {
            run_id: self.label.run_id.clone(),
            seed: self.label.seed,
            final_accuracy: final_accuracy(&self.rows, cfg.eval.window),
            convergence_round: cfg
                .eval
                .target_accuracy
                .and_then(|t| convergence_round(&self.rows[1..], t, cfg.eval.patience)),
            comm_scalars: self.outcome.ledger.cumulative(),
            rounds: self.outcome.rounds.len(),
        }
    }
}

/// Paths of a run's artifacts.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub metrics: PathBuf,
    pub effective_config: PathBuf,
    pub summary: PathBuf,
}

impl Artifacts {
    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        let base = |ext: &str| cfg.output_dir.join(format!("{}.{ext}", cfg.name));
        Self {
            metrics: base("metrics.csv"),
            effective_config: base("effective.toml"),
            summary: base("summary.txt"),
        }
    }
}

/// Runs every seed, writing the metrics CSV, the effective config and the
/// summary lines. On failure the rows produced so far are still written.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    let art = Artifacts::for_config(cfg);
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    fs::write(&art.effective_config, cfg.effective_toml()).map_err(|e| Error::io(&art.effective_config, e))?;
    let file = fs::File::create(&art.metrics).map_err(|e| Error::io(&art.metrics, e))?;
    let mut writer = MetricsWriter::new(std::io::BufWriter::new(file))?;

    let mut shared_data = None;
    let mut summaries = Vec::with_capacity(cfg.seeds.len());
    let mut failure = None;
    for &seed in &cfg.seeds {
        let data = match (cfg.data.source, &shared_data) {
            (DataSource::Synth, _) if cfg.data.seed.is_none() => load_data(cfg, seed)?,
            (_, Some(d)) => DataPair::clone(d),
            (_, None) => {
                let d = load_data(cfg, seed)?;
                shared_data = Some(d.clone());
                d
            }
        };
        match run_seed(cfg, &data, seed) {
            Ok(run) => {
                for row in &run.rows {
                    writer.write(row)?;
                }
                summaries.push(run.summary(cfg));
            }
            Err((e, rows)) => {
                for row in &rows {
                    writer.write(row)?;
                }
                failure = Some(e);
                break;
            }
        }
    }
    writer.finish()?;
    let mut text: String = summaries.iter().map(|s| s.line() + "\n").collect();
    if let Some(e) = &failure {
        text.push_str(&format!("aborted: {e}\n"));
    }
    fs::write(&art.summary, text).map_err(|e| Error::io(&art.summary, e))?;
    match failure {
        Some(e) => Err(e),
        None => Ok(summaries),
    }
}
