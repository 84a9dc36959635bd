//! Experiment configuration: TOML with fixed sections, `--set key=value`
//! overrides, unknown-key rejection and an effective-config dump.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::federation::RoundConfig;
use crate::fedova::FedOvaOptions;
use crate::models::{ModelKind, ModelSpec};

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "FEDFIM_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Fedavg,
    Fedova,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Fedavg => "fedavg",
            Scheme::Fedova => "fedova",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synth,
    Idx,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Seed of the synthetic task; the run seed when absent.
    pub seed: Option<u64>,
    pub n_train: usize,
    pub n_test: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub margin: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub label_column: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            seed: None,
            n_train: 2000,
            n_test: 2000,
            input_dim: 20,
            num_classes: 10,
            margin: 5.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_csv: None,
            test_csv: None,
            label_column: "label".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    pub bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::SoftmaxRegression,
            hidden_dim: 32,
            bias: true,
        }
    }
}

impl ModelConfig {
    /// Concrete architecture for data with `input_dim` features and `num_classes` labels.
    pub fn spec(&self, input_dim: usize, num_classes: usize) -> ModelSpec {
        let spec = match self.kind {
            ModelKind::Mlp1 => ModelSpec::mlp1(input_dim, self.hidden_dim, num_classes),
            _ => ModelSpec::softmax_regression(input_dim, num_classes).with_classes(num_classes),
        };
        spec.with_bias(self.bias)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionKind {
    Iid,
    NoniidL,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub clients: usize,
    pub scheme: PartitionKind,
    /// Distinct labels per client for `noniid-l`.
    pub l: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            clients: 100,
            scheme: PartitionKind::Iid,
            l: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharingConfig {
    /// Shared-set size relative to the mean client size.
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Accuracy that defines the convergence round in the summary.
    pub target_accuracy: Option<f64>,
    pub patience: usize,
    /// Number of trailing evaluations averaged into the final accuracy.
    pub window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            target_accuracy: None,
            patience: 3,
            window: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub scheme: Scheme,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub round: RoundConfig,
    pub partition: PartitionConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sharing: Option<SharingConfig>,
    pub fedova: FedOvaOptions,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            scheme: Scheme::Fedavg,
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            round: RoundConfig::default(),
            partition: PartitionConfig::default(),
            sharing: None,
            fedova: FedOvaOptions::default(),
            eval: EvalConfig::default(),
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "name",
    "scheme",
    "seeds",
    "output_dir",
    "data",
    "model",
    "round",
    "partition",
    "sharing",
    "fedova",
    "eval",
];
const DATA_KEYS: &[&str] = &[
    "source",
    "seed",
    "n_train",
    "n_test",
    "input_dim",
    "num_classes",
    "margin",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "train_csv",
    "test_csv",
    "label_column",
];
const MODEL_KEYS: &[&str] = &["kind", "hidden_dim", "bias"];
const ROUND_KEYS: &[&str] = &[
    "participation_fraction",
    "local_epochs",
    "local_batch_size",
    "learning_rate",
    "optimizer",
    "total_rounds",
    "tau",
    "m",
    "cautious_eps",
    "fim_damping",
    "h0_mode",
    "gradient_weighting",
    "fim_weighting",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "eval_every",
    "early_stop",
];
const EARLY_STOP_KEYS: &[&str] = &["target_accuracy", "tolerance", "patience"];
const PARTITION_KEYS: &[&str] = &["clients", "scheme", "l"];
const SHARING_KEYS: &[&str] = &["beta"];
const FEDOVA_KEYS: &[&str] = &["balanced_sampling"];
const EVAL_KEYS: &[&str] = &["target_accuracy", "patience", "window"];

fn section_keys(path: &str) -> Option<&'static [&'static str]> {
    Some(match path {
        "" => TOP_KEYS,
        "data" => DATA_KEYS,
        "model" => MODEL_KEYS,
        "round" => ROUND_KEYS,
        "round.early_stop" => EARLY_STOP_KEYS,
        "partition" => PARTITION_KEYS,
        "sharing" => SHARING_KEYS,
        "fedova" => FEDOVA_KEYS,
        "eval" => EVAL_KEYS,
        _ => return None,
    })
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn closest(key: &str, candidates: &[&'static str]) -> Option<&'static str> {
    candidates
        .iter()
        .map(|c| (strsim::levenshtein(key, c), *c))
        .filter(|(d, c)| *d <= 3.max(c.len() / 3))
        .min()
        .map(|(_, c)| c)
}

fn check_keys(table: &Table, prefix: &str) -> Result<()> {
    let allowed = section_keys(prefix).expect("known section");
    for (key, value) in table {
        let path = join(prefix, key);
        if !allowed.contains(&key.as_str()) {
            let hint = closest(key, allowed)
                .map(|c| format!("; did you mean `{}`?", join(prefix, c)))
                .unwrap_or_default();
            return Err(Error::config(path, format!("unknown key{hint}")));
        }
        match (section_keys(&path), value) {
            (Some(_), Value::Table(inner)) => check_keys(inner, &path)?,
            (Some(_), other) => {
                return Err(Error::config(
                    path,
                    format!("expected a table, found {}", other.type_str()),
                ));
            }
            (None, _) => {}
        }
    }
    Ok(())
}

fn section<T: DeserializeOwned + Default>(table: &Table, key: &str) -> Result<T> {
    match table.get(key) {
        None => Ok(T::default()),
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(key, clean(e))),
    }
}

fn clean(e: toml::de::Error) -> String {
    e.message().trim().to_string()
}

fn scalar<T: DeserializeOwned>(table: &Table, key: &str, default: T) -> Result<T> {
    match table.get(key) {
        None => Ok(default),
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(key, clean(e))),
    }
}

/// Parses a `--set` value as a TOML literal, falling back to a bare string.
fn parse_override_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `key.path=value` overrides to a raw table.
pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::config(item.as_str(), "override must look like key=value"))?;
        let path = path.trim();
        let parts: Vec<&str> = path.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::config(path, "empty key segment"));
        }
        let mut cursor = &mut *table;
        for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
            let entry = cursor
                .entry(part.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            cursor = match entry {
                Value::Table(t) => t,
                _ => return Err(Error::config(parts[..=i].join("."), "not a table")),
            };
        }
        cursor.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
    }
    Ok(())
}

/// Parses, overrides and validates a configuration from TOML text.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<document>", clean(e)))?;
    apply_overrides(&mut table, overrides)?;
    check_keys(&table, "")?;

    let defaults = ExperimentConfig::default();
    let mut cfg = ExperimentConfig {
        name: scalar(&table, "name", defaults.name)?,
        scheme: scalar(&table, "scheme", defaults.scheme)?,
        seeds: scalar(&table, "seeds", defaults.seeds)?,
        output_dir: scalar(&table, "output_dir", defaults.output_dir)?,
        data: section(&table, "data")?,
        model: section(&table, "model")?,
        round: section(&table, "round")?,
        partition: section(&table, "partition")?,
        sharing: match table.get("sharing") {
            None => None,
            Some(v) => Some(
                v.clone()
                    .try_into()
                    .map_err(|e: toml::de::Error| Error::config("sharing", clean(e)))?,
            ),
        },
        fedova: section(&table, "fedova")?,
        eval: section(&table, "eval")?,
    };
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.output_dir = PathBuf::from(dir);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses a configuration file. Relative data paths resolve
/// against the file's directory.
pub fn parse_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config_str(&text, overrides)?;
    if let Some(base) = path.parent() {
        cfg.data.resolve_relative(base);
    }
    Ok(cfg)
}

impl DataConfig {
    pub(crate) fn resolve_relative(&mut self, base: &Path) {
        for p in [
            &mut self.train_images,
            &mut self.train_labels,
            &mut self.test_images,
            &mut self.test_labels,
            &mut self.train_csv,
            &mut self.test_csv,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let need = |field: &Option<PathBuf>, key: &str| {
            field.as_ref().map(|_| ()).ok_or_else(|| {
                Error::config(
                    format!("data.{key}"),
                    format!("required for source `{}`", self.source_name()),
                )
            })
        };
        match self.source {
            DataSource::Synth => {
                if self.n_train == 0 || self.n_test == 0 {
                    return Err(Error::config("data.n_train", "n_train and n_test must be at least 1"));
                }
                if self.input_dim == 0 {
                    return Err(Error::config("data.input_dim", "must be at least 1"));
                }
                if self.num_classes < 2 {
                    return Err(Error::config("data.num_classes", "must be at least 2"));
                }
                if !(self.margin > 0.0) {
                    return Err(Error::config("data.margin", "must be positive"));
                }
            }
            DataSource::Idx => {
                need(&self.train_images, "train_images")?;
                need(&self.train_labels, "train_labels")?;
                need(&self.test_images, "test_images")?;
                need(&self.test_labels, "test_labels")?;
            }
            DataSource::Csv => {
                need(&self.train_csv, "train_csv")?;
                need(&self.test_csv, "test_csv")?;
            }
        }
        Ok(())
    }

    fn source_name(&self) -> &'static str {
        match self.source {
            DataSource::Synth => "synth",
            DataSource::Idx => "idx",
            DataSource::Csv => "csv",
        }
    }
}

impl ExperimentConfig {
    /// Checks every constraint that does not need the data on disk.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a nonempty file-name-safe string"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        self.data.validate()?;
        let k = self.partition.clients;
        if k == 0 {
            return Err(Error::config("partition.clients", "must be at least 1"));
        }
        if self.model.kind == ModelKind::Mlp1 && self.model.hidden_dim == 0 {
            return Err(Error::config("model.hidden_dim", "mlp1 needs a hidden layer"));
        }
        if self.data.source == DataSource::Synth {
            let n = self.data.num_classes;
            if k > self.data.n_train {
                return Err(Error::config(
                    "partition.clients",
                    format!("{k} clients exceed {} training samples", self.data.n_train),
                ));
            }
            if self.partition.scheme == PartitionKind::NoniidL {
                let l = self.partition.l;
                if l == 0 || l > n {
                    return Err(Error::config("partition.l", format!("must satisfy 1 <= l <= {n}")));
                }
                if !(l * k).is_multiple_of(n) {
                    return Err(Error::config(
                        "partition.l",
                        format!(
                            "l * clients must be divisible by num_classes: {l} * {k} = {} is not a multiple of {n}",
                            l * k
                        ),
                    ));
                }
            }
        }
        if let Some(s) = &self.sharing {
            if !(s.beta > 0.0 && s.beta <= 1.0) {
                return Err(Error::config(
                    "sharing.beta",
                    format!("must lie in (0, 1], got {}", s.beta),
                ));
            }
        }
        if self.eval.patience == 0 {
            return Err(Error::config("eval.patience", "must be at least 1"));
        }
        if self.eval.window == 0 {
            return Err(Error::config("eval.window", "must be at least 1"));
        }
        if let Some(t) = self.eval.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("eval.target_accuracy", "must lie in [0, 1]"));
            }
        }
        self.round.validate(k).map_err(|e| match e {
            Error::Config { path, message } if !path.starts_with("round.") => {
                Error::config(format!("round.{path}"), message)
            }
            other => other,
        })
    }

    /// Fully resolved configuration as TOML; parsing it back yields `self`.
    pub fn effective_toml(&self) -> String {
        let body = toml::to_string(self).expect("config serializes");
        format!("# effective configuration, every default filled in\n{body}")
    }
}
