//! The `fedfim` binary end to end: runs, artifacts, exit codes and comparison tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use fedfim::harness::metrics::COLUMNS;
use fedfim::harness::parse_config_str;

fn fedfim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedfim"))
        .args(args)
        .env_remove("FEDFIM_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn without_elapsed(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = r#"
name = "small"
seeds = [4, 5]
[data]
n_train = 300
n_test = 100
[partition]
clients = 10
[round]
total_rounds = 6
participation_fraction = 0.5
learning_rate = 0.5
[eval]
target_accuracy = 0.3
patience = 2
"#;

#[test]
fn smoke_run_is_fast_and_writes_artifacts() {
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().to_str().unwrap();
    let start = Instant::now();
    let o = fedfim(&["run", smoke_config().to_str().unwrap(), "--output-dir", dir]);
    let secs = start.elapsed().as_secs_f64();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(secs < 10.0, "smoke run took {secs:.1}s");
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("run=smoke-s1 seed=1 rounds=5 "), "{stdout}");

    let metrics = fs::read_to_string(out.path().join("smoke.metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), COLUMNS.join(","));
    let rounds: Vec<usize> = lines.map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    assert_eq!(rounds, vec![0, 1, 2, 3, 4, 5]);
    assert!(out.path().join("smoke.effective.toml").exists());
    let summary = fs::read_to_string(out.path().join("smoke.summary.txt")).unwrap();
    assert_eq!(summary.trim(), stdout.trim());
}

#[test]
fn repeated_runs_match_except_timing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.toml", SMALL);
    let mut texts = Vec::new();
    for rep in ["a", "b"] {
        let dir = tmp.path().join(rep);
        let o = fedfim(&["run", cfg.to_str().unwrap(), "--output-dir", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        texts.push(fs::read_to_string(dir.join("small.metrics.csv")).unwrap());
    }
    assert_eq!(without_elapsed(&texts[0]), without_elapsed(&texts[1]));
    assert_eq!(texts[0].lines().count(), 1 + 2 * 7);
}

#[test]
fn config_errors_exit_2_with_the_key_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.toml", SMALL);
    let c = cfg.to_str().unwrap();

    let o = fedfim(&["validate", c, "--set", "round.learning_rat=0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("round.learning_rat") && stderr(&o).contains("round.learning_rate"),
        "{}",
        stderr(&o)
    );

    let o = fedfim(&["validate", c, "--set", "round.total_rounds=\"many\""]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("round"), "{}", stderr(&o));

    // 2 labels * 7 clients does not split evenly over 10 classes
    let o = fedfim(&[
        "run",
        c,
        "--set",
        "partition.scheme=\"noniid-l\"",
        "--set",
        "partition.clients=7",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("partition.l"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_3_and_keeps_partial_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.toml", SMALL);
    let dir = tmp.path().join("out");
    let o = fedfim(&[
        "run",
        cfg.to_str().unwrap(),
        "--set",
        "round.learning_rate=1e308",
        "--output-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let summary = fs::read_to_string(dir.join("small.summary.txt")).unwrap();
    assert!(summary.contains("aborted:"), "{summary}");
    assert!(dir.join("small.metrics.csv").exists());
}

#[test]
fn io_and_format_problems_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fedfim(&["run", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));

    let mut bad = vec![0u8, 0, 8, 4];
    bad.extend([0u8; 12]);
    fs::write(tmp.path().join("img"), &bad).unwrap();
    fs::write(tmp.path().join("lab"), [0u8, 0, 8, 1, 0, 0, 0, 0]).unwrap();
    let cfg = write(
        tmp.path(),
        "idx.toml",
        r#"
name = "idx"
[data]
source = "idx"
train_images = "img"
train_labels = "lab"
test_images = "img"
test_labels = "lab"
[partition]
clients = 1
[round]
participation_fraction = 1.0
"#,
    );
    let o = fedfim(&[
        "run",
        cfg.to_str().unwrap(),
        "--output-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn validate_prints_a_reloadable_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.toml", SMALL);
    let o = fedfim(&["validate", cfg.to_str().unwrap(), "--set", "round.m=7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let reparsed = parse_config_str(&text, &[]).unwrap();
    let direct = parse_config_str(SMALL, &["round.m=7".into()]).unwrap();
    assert_eq!(reparsed.round, direct.round);
    assert_eq!(reparsed.seeds, vec![4, 5]);
}

#[test]
fn csv_source_runs_with_paths_relative_to_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir(&data).unwrap();
    let mut rows = String::from("f1,f2,label\n");
    for i in 0..80 {
        let c = i % 2;
        rows.push_str(&format!(
            "{},{},{}\n",
            c as f64 + 0.01 * i as f64,
            1.0 - c as f64,
            if c == 0 { "no" } else { "yes" }
        ));
    }
    fs::write(data.join("train.csv"), &rows).unwrap();
    fs::write(data.join("test.csv"), &rows).unwrap();
    let cfg = write(
        tmp.path(),
        "csv.toml",
        r#"
name = "csv"
[data]
source = "csv"
train_csv = "data/train.csv"
test_csv = "data/test.csv"
[partition]
clients = 4
[round]
total_rounds = 10
participation_fraction = 1.0
learning_rate = 0.5
"#,
    );
    let out = tmp.path().join("out");
    let o = fedfim(&["run", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("final_accuracy=1.0000"), "{stdout}");
}

#[test]
fn output_dir_env_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "small.toml",
        &SMALL.replace("total_rounds = 6", "total_rounds = 2"),
    );
    let target = tmp.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_fedfim"))
        .args(["run", cfg.to_str().unwrap()])
        .env("FEDFIM_OUTPUT_DIR", &target)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(target.join("small.metrics.csv").exists());
}

#[test]
fn compare_table_keeps_row_order() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "small.toml", SMALL);
    let table = write(
        tmp.path(),
        "table.toml",
        r#"
title = "optimizers"
base = "small.toml"
[[row]]
label = "fim"
set = ["round.optimizer=\"fim-lbfgs\"", "round.learning_rate=1.0"]
[[row]]
label = "sgd"
[[row]]
label = "ova"
set = ["scheme=\"fedova\""]
"#,
    );
    let out = tmp.path().join("cmp");
    let o = fedfim(&[
        "compare",
        table.to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("optimizers/compare.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, vec!["fim", "sgd", "ova"]);
    assert!(csv.lines().nth(1).unwrap().starts_with("fim,fedavg,fim-lbfgs,2,"));
    assert!(csv.lines().nth(3).unwrap().starts_with("ova,fedova,fedavg-sgd,2,"));
    assert!(out.join("optimizers/00-fim.metrics.csv").exists());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("optimizers\n"), "{text}");
}
