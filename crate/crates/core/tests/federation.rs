//! Round engine: FedAvg against centralized descent, the Fisher L-BFGS
//! protocol, ledger totals and reproducibility.

use std::path::PathBuf;

use fedfim::data::{partition_iid, partition_noniid_l, Dataset, SyntheticTask};
use fedfim::federation::{
    build_clients, fedavg_aggregate, run_experiment, server_fedavg_round, server_fim_lbfgs_round, BatchSize, EarlyStop,
    Federation, OptimizerKind, RoundConfig, RoundReport, RunOutcome, ServerState, Weighting,
};
use fedfim::ledger::{comm_cost_fedavg, comm_cost_proposed};
use fedfim::models::{batch_gradient, ModelSpec, ParameterVector};
use fedfim::numerics::{streams, DenseVector, RngSeed};
use fedfim::Error;
use proptest::prelude::*;

fn synth(seed: u64, n: usize) -> (Dataset, Dataset) {
    let task = SyntheticTask::new(20, 10, 5.0, seed).unwrap();
    (
        task.sample(n, streams::DATA, "train").unwrap(),
        task.sample(n / 4, streams::TEST_DATA, "test").unwrap(),
    )
}

fn softmax() -> ModelSpec {
    ModelSpec::softmax_regression(20, 10)
}

fn run(train: &Dataset, test: &Dataset, k: usize, cfg: &RoundConfig, seed: u64) -> fedfim::Result<RunOutcome> {
    let plan = partition_iid(train, k, seed)?;
    let mut fed = Federation {
        train,
        test,
        clients: build_clients(&plan.assignment, None, seed),
    };
    run_experiment(&mut fed, softmax(), cfg, seed, &mut |_| {})
}

fn strip_time(rounds: &[RoundReport]) -> Vec<RoundReport> {
    rounds
        .iter()
        .cloned()
        .map(|mut r| {
            r.elapsed_ms = 0.0;
            r
        })
        .collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let s: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    d / s
}

#[test]
fn fedavg_full_batch_equals_gradient_descent() {
    let (train, test) = synth(1, 240);
    for (k, lr) in [(1, 0.1), (6, 0.5), (24, 2.0)] {
        let cfg = RoundConfig {
            participation_fraction: 1.0,
            local_epochs: 1,
            local_batch_size: BatchSize::FULL,
            learning_rate: lr,
            ..RoundConfig::default()
        };
        let plan = partition_iid(&train, k, 2).unwrap();
        let mut fed = Federation {
            train: &train,
            test: &test,
            clients: build_clients(&plan.assignment, None, 2),
        };
        let init = ParameterVector::init_uniform(softmax(), &mut RngSeed::new(9, streams::INIT).stream());
        let mut state = ServerState::new(init.clone(), &cfg, 2);
        let mut w = init.clone();
        for round in 1..=4 {
            state.ledger.begin_round(round);
            server_fedavg_round(&mut state, &mut fed, &cfg).unwrap();
            state.ledger.end_round();
            let g = batch_gradient(&w, &train.full_batch()).unwrap();
            let mut next = w.values().clone();
            next.axpy(-lr, &g);
            w = w.with_values(next).unwrap();
            let err = rel(state.params.values(), w.values());
            assert!(err < 1e-10, "K={k} round {round}: rel err {err}");
        }
    }
}

#[test]
fn first_fim_round_is_a_gradient_step() {
    let (train, test) = synth(3, 200);
    let cfg = RoundConfig {
        optimizer: OptimizerKind::FimLbfgs,
        participation_fraction: 1.0,
        local_batch_size: BatchSize::FULL,
        learning_rate: 0.7,
        ..RoundConfig::default()
    };
    let plan = partition_iid(&train, 5, 3).unwrap();
    let mut fed = Federation {
        train: &train,
        test: &test,
        clients: build_clients(&plan.assignment, None, 3),
    };
    let init = ParameterVector::init_uniform(softmax(), &mut RngSeed::new(1, streams::INIT).stream());
    let mut state = ServerState::new(init.clone(), &cfg, 3);
    state.ledger.begin_round(1);
    server_fim_lbfgs_round(&mut state, &mut fed, &cfg).unwrap();
    state.ledger.end_round();
    // equal shards, so the n_k/n-weighted mean is the full-batch gradient
    let g = batch_gradient(&init, &train.full_batch()).unwrap();
    let mut expect = init.values().clone();
    expect.axpy(-0.7, &g);
    assert!(rel(state.params.values(), &expect) < 1e-12);
    assert_eq!(state.memory().unwrap().len(), 1);
}

#[test]
fn fim_lbfgs_decreases_loss_monotonically_with_defaults() {
    let (train, test) = synth(0, 2000);
    let cfg = RoundConfig {
        optimizer: OptimizerKind::FimLbfgs,
        total_rounds: 25,
        ..RoundConfig::default()
    };
    let out = run(&train, &test, 100, &cfg, 0).unwrap();
    let loss: Vec<f64> = out.rounds.iter().map(|r| r.train_loss).collect();
    assert_eq!(loss.len(), 25);
    for w in loss[2..].windows(2) {
        assert!(w[1] <= w[0], "loss rose: {loss:?}");
    }
    check_golden("fim_default_25_rounds.txt", &loss);
}

/// Compares against a recorded trajectory; `FEDFIM_BLESS=1` rewrites it.
fn check_golden(name: &str, values: &[f64]) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var("FEDFIM_BLESS").is_ok_and(|v| v == "1") {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let text: String = values.iter().map(|v| format!("{v:e}\n")).collect();
        std::fs::write(&path, text).unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let golden: Vec<f64> = text.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(golden.len(), values.len());
    for (i, (g, v)) in golden.iter().zip(values).enumerate() {
        assert!((g - v).abs() <= 1e-9 * g.abs(), "round {}: {v} vs golden {g}", i + 1);
    }
}

#[test]
fn ledger_matches_closed_forms_every_round() {
    let (train, test) = synth(4, 400);
    let d = softmax().param_count() as u64;
    for (opt, q, tau) in [
        (OptimizerKind::FimLbfgs, 0.3, None),
        (OptimizerKind::FimLbfgs, 1.0, Some(16)),
        (OptimizerKind::FedavgSgd, 0.3, None),
        (OptimizerKind::FedavgAdam, 1.0, None),
    ] {
        let cfg = RoundConfig {
            optimizer: opt,
            participation_fraction: q,
            tau,
            total_rounds: 12,
            m: 4,
            learning_rate: if opt == OptimizerKind::FimLbfgs { 1.0 } else { 0.05 },
            ..RoundConfig::default()
        };
        let out = run(&train, &test, 10, &cfg, 4).unwrap();
        let mut cum = 0;
        for r in &out.rounds {
            let k = r.participants as u64;
            let expect = match opt {
                OptimizerKind::FimLbfgs => comm_cost_proposed(d, tau.map_or(k, |t| t as u64), 4),
                _ => comm_cost_fedavg(d, k),
            };
            cum += expect;
            assert_eq!(r.comm_scalars, expect, "{} round {}", opt.name(), r.round);
            assert_eq!(r.comm_scalars_cum, cum);
        }
        assert_eq!(out.ledger.cumulative(), cum);
    }
}

#[test]
fn zero_rounds_gives_empty_report() {
    let (train, test) = synth(5, 100);
    let cfg = RoundConfig {
        total_rounds: 0,
        ..RoundConfig::default()
    };
    let out = run(&train, &test, 5, &cfg, 5).unwrap();
    assert!(out.rounds.is_empty());
    assert_eq!(out.ledger.cumulative(), 0);
}

#[test]
fn runs_are_reproducible() {
    let (train, test) = synth(6, 300);
    for opt in [
        OptimizerKind::FimLbfgs,
        OptimizerKind::FedavgSgd,
        OptimizerKind::FedavgAdam,
    ] {
        let cfg = RoundConfig {
            optimizer: opt,
            total_rounds: 8,
            participation_fraction: 0.4,
            learning_rate: if opt == OptimizerKind::FedavgAdam { 0.01 } else { 0.3 },
            ..RoundConfig::default()
        };
        let a = run(&train, &test, 10, &cfg, 6).unwrap();
        let b = run(&train, &test, 10, &cfg, 6).unwrap();
        assert_eq!(strip_time(&a.rounds), strip_time(&b.rounds), "{}", opt.name());
        let c = run(&train, &test, 10, &cfg, 7).unwrap();
        assert_ne!(strip_time(&a.rounds), strip_time(&c.rounds));
    }
}

#[test]
fn client_order_does_not_matter() {
    let (train, test) = synth(8, 300);
    let plan = partition_noniid_l(&train, 10, 2, 8).unwrap();
    let cfg = RoundConfig {
        optimizer: OptimizerKind::FimLbfgs,
        total_rounds: 6,
        participation_fraction: 0.5,
        learning_rate: 1.0,
        ..RoundConfig::default()
    };
    let mut outs = Vec::new();
    for reverse in [false, true] {
        let mut clients = build_clients(&plan.assignment, None, 8);
        if reverse {
            clients.reverse();
        }
        let mut fed = Federation {
            train: &train,
            test: &test,
            clients,
        };
        outs.push(run_experiment(&mut fed, softmax(), &cfg, 8, &mut |_| {}).unwrap());
    }
    assert_eq!(strip_time(&outs[0].rounds), strip_time(&outs[1].rounds));
}

#[test]
fn diverging_step_aborts_with_numeric_error() {
    let (train, test) = synth(9, 200);
    for opt in [OptimizerKind::FimLbfgs, OptimizerKind::FedavgSgd] {
        let cfg = RoundConfig {
            optimizer: opt,
            learning_rate: 1e308,
            total_rounds: 20,
            ..RoundConfig::default()
        };
        let err = run(&train, &test, 10, &cfg, 9).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{}: {err}", opt.name());
        assert_eq!(err.exit_code(), 3);
    }
}

#[test]
fn early_stop_ends_run() {
    let (train, test) = synth(10, 400);
    let cfg = RoundConfig {
        optimizer: OptimizerKind::FimLbfgs,
        learning_rate: 1.0,
        participation_fraction: 1.0,
        total_rounds: 200,
        early_stop: Some(EarlyStop {
            target_accuracy: 0.5,
            tolerance: 0.0,
            patience: 2,
        }),
        ..RoundConfig::default()
    };
    let mut seen = 0;
    let plan = partition_iid(&train, 4, 10).unwrap();
    let mut fed = Federation {
        train: &train,
        test: &test,
        clients: build_clients(&plan.assignment, None, 10),
    };
    let out = run_experiment(&mut fed, softmax(), &cfg, 10, &mut |_| seen += 1).unwrap();
    assert!(out.stopped_early);
    assert!(out.rounds.len() < 200);
    assert_eq!(seen, out.rounds.len());
    let tail = &out.rounds[out.rounds.len() - 2..];
    assert!(tail.iter().all(|r| r.eval_accuracy.unwrap() >= 0.5));
}

#[test]
fn invalid_round_config_is_rejected() {
    let (train, test) = synth(11, 100);
    for cfg in [
        RoundConfig {
            participation_fraction: 0.0,
            ..RoundConfig::default()
        },
        RoundConfig {
            local_epochs: 0,
            ..RoundConfig::default()
        },
        RoundConfig {
            learning_rate: -1.0,
            ..RoundConfig::default()
        },
    ] {
        let err = run(&train, &test, 5, &cfg, 11).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Aggregation depends only on the multiset of updates.
    #[test]
    fn aggregation_is_permutation_invariant(
        deltas in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 4), 1usize..50), 1..8),
        rot in 0usize..8,
        uniform in any::<bool>(),
    ) {
        let spec = ModelSpec::binary_logistic(3);
        let params = ParameterVector::new(spec, vec![0.1, -0.2, 0.3, 0.0].into()).unwrap();
        let ups: Vec<(DenseVector, usize)> = deltas.iter().map(|(d, n)| (d.clone().into(), *n)).collect();
        let mut rotated = ups.clone();
        rotated.rotate_left(rot % ups.len());
        rotated.reverse();
        let w = if uniform { Weighting::Uniform } else { Weighting::SampleSize };
        let a = fedavg_aggregate(&ups, &params, w).unwrap();
        let b = fedavg_aggregate(&rotated, &params, w).unwrap();
        for (x, y) in a.values().iter().zip(b.values().iter()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    /// Equal updates aggregate to that update whatever the weights.
    #[test]
    fn identical_updates_are_a_fixed_point(
        delta in prop::collection::vec(-5.0f64..5.0, 4),
        sizes in prop::collection::vec(1usize..100, 1..6),
    ) {
        let spec = ModelSpec::binary_logistic(3);
        let params = ParameterVector::zeros(spec);
        let ups: Vec<(DenseVector, usize)> = sizes.iter().map(|&n| (delta.clone().into(), n)).collect();
        let out = fedavg_aggregate(&ups, &params, Weighting::SampleSize).unwrap();
        for (x, y) in out.values().iter().zip(&delta) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}
