//! FedOVA: one binary classifier per class, trained only by the clients that
//! hold that class, aggregated per classifier and combined by highest confidence.

use std::collections::{BTreeMap, BTreeSet};

use crate::data::{binary_labels, Dataset};
use crate::error::{Error, Result};
use crate::federation::{
    client_update_adam, client_update_fim, client_update_sgd, drive_rounds, fim_lbfgs_step, for_participants,
    sample_clients, Evaluation, Federation, LocalView, OptimizerKind, OptimizerState, RoundConfig, RoundReport,
    RoundStats, RunOutcome,
};
use crate::lbfgs::{FimDiagonal, LbfgsMemory};
use crate::ledger::{ceil_log2, CommunicationLedger};
use crate::models::{self, ModelSpec, ParameterVector};
use crate::numerics::{streams, DenseMatrix, DenseVector, RngSeed, SeededStream};

/// `n` binary components; component `i` scores class `i` against the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct OvaEnsemble {
    pub num_classes: usize,
    pub components: Vec<ParameterVector>,
}

impl OvaEnsemble {
    pub fn new(components: Vec<ParameterVector>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Degenerate("ensemble needs at least one component".into()))?;
        let spec = *first.spec();
        if spec.num_classes != 2 {
            return Err(Error::config("model.kind", "ensemble components must be binary"));
        }
        if components.iter().any(|c| *c.spec() != spec) {
            return Err(Error::dim("ensemble components differ in architecture"));
        }
        Ok(Self {
            num_classes: components.len(),
            components,
        })
    }

    /// `num_classes` binary copies of `spec`, each initialized from `rng`.
    pub fn init(spec: ModelSpec, num_classes: usize, rng: &mut SeededStream) -> Result<Self> {
        let binary = spec.with_classes(2);
        binary.validate()?;
        Self::new(
            (0..num_classes)
                .map(|_| ParameterVector::init_uniform(binary, rng))
                .collect(),
        )
    }

    pub fn component_spec(&self) -> &ModelSpec {
        self.components[0].spec()
    }
}

/// Parameters returned for classifier `classifier_id` by the clients in `members`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGroup {
    pub classifier_id: usize,
    pub members: Vec<usize>,
    pub params: Vec<DenseVector>,
}

/// Copy of `dataset` with label `1` for `class` and `0` for everything else.
pub fn binary_relabel(dataset: &Dataset, class: usize) -> Result<Dataset> {
    if class >= dataset.num_classes {
        return Err(Error::config(
            "fedova.class",
            format!("class {class} outside [0, {})", dataset.num_classes),
        ));
    }
    Dataset::new(
        dataset.features.clone(),
        binary_labels(&dataset.labels, class),
        2,
        format!("{}-ova{class}", dataset.name),
    )
}

/// Classifier ids a client trains: exactly the labels it holds.
pub fn select_components(label_set: &BTreeSet<usize>) -> Result<Vec<usize>> {
    if label_set.is_empty() {
        return Err(Error::Degenerate("client holds no labels".into()));
    }
    Ok(label_set.iter().copied().collect())
}

/// Unweighted mean of each nonempty group; classifiers without a group keep
/// their parameters.
pub fn group_aggregate(ensemble: &OvaEnsemble, groups: &[ClassifierGroup]) -> Result<OvaEnsemble> {
    let mut next = ensemble.clone();
    for g in groups {
        let comp = next
            .components
            .get_mut(g.classifier_id)
            .ok_or_else(|| Error::dim(format!("classifier {} not in ensemble", g.classifier_id)))?;
        if g.params.is_empty() {
            continue;
        }
        let d = comp.len();
        let base = &g.params[0];
        let mut offset = DenseVector::zeros(d);
        for p in &g.params {
            if p.len() != d {
                return Err(Error::dim(format!(
                    "classifier {} expects {d} parameters, got {}",
                    g.classifier_id,
                    p.len()
                )));
            }
            for ((o, a), b) in offset.iter_mut().zip(p.iter()).zip(base.iter()) {
                *o += a - b;
            }
        }
        // mean = base + mean(p - base), exact when every member is equal
        let k = g.params.len() as f64;
        let mean: Vec<f64> = base.iter().zip(offset.iter()).map(|(b, o)| b + o / k).collect();
        *comp = comp.with_values(mean.into())?;
    }
    Ok(next)
}

/// Positive-class probability of every component, one row per input.
pub fn confidences(ensemble: &OvaEnsemble, features: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(features.rows(), ensemble.num_classes);
    for (i, comp) in ensemble.components.iter().enumerate() {
        let probs = models::predict_proba(comp, features)?;
        for r in 0..features.rows() {
            out.set(r, i, probs.get(r, 1));
        }
    }
    Ok(out)
}

/// Most confident component per row; ties go to the lowest class id.
pub fn ensemble_predict(ensemble: &OvaEnsemble, features: &DenseMatrix) -> Result<Vec<usize>> {
    let conf = confidences(ensemble, features)?;
    Ok((0..features.rows()).map(|r| models::argmax(conf.row(r))).collect())
}

pub fn ensemble_accuracy(ensemble: &OvaEnsemble, data: &Dataset) -> Result<f64> {
    let pred = ensemble_predict(ensemble, &data.features)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Extra FedOVA switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedOvaOptions {
    /// Subsample a client's negatives down to its positive count per component.
    pub balanced_sampling: bool,
}

/// Local indices for one component, optionally negative-subsampled.
fn component_indices(view: &LocalView, class: usize, balanced: bool, rng: &mut SeededStream) -> Vec<usize> {
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
        view.indices.iter().partition(|&&i| view.data.labels[i] == class);
    if balanced && !pos.is_empty() && neg.len() > pos.len() {
        rng.shuffle(&mut neg);
        neg.truncate(pos.len());
    }
    pos.append(&mut neg);
    pos.sort_unstable();
    pos
}

enum ClientWork {
    Params(Vec<(usize, DenseVector)>),
    Fisher(Vec<(usize, (FimDiagonal, DenseVector, usize))>),
}

struct OvaServer {
    ensemble: OvaEnsemble,
    memories: Vec<OptimizerState>,
    ledger: CommunicationLedger,
    sampler: SeededStream,
    fim_max_observed: f64,
}

impl OvaServer {
    fn curvature(&self) -> (Option<(f64, f64)>, usize) {
        let mut range: Option<(f64, f64)> = None;
        let mut skips = 0;
        for m in &self.memories {
            if let OptimizerState::Lbfgs(mem) = m {
                skips += mem.skips();
                if let Some((lo, hi)) = mem.curvature_range() {
                    range = Some(match range {
                        None => (lo, hi),
                        Some((a, b)) => (a.min(lo), b.max(hi)),
                    });
                }
            }
        }
        (range, skips)
    }
}

/// Runs the FedOVA scheme. Components are trained by local SGD (or Adam) and
/// averaged per group, or, when `round.optimizer` is `fim-lbfgs`, each group
/// drives its component with one server-side Fisher L-BFGS step per round.
pub fn run_fedova(
    fed: &mut Federation,
    spec: ModelSpec,
    cfg: &RoundConfig,
    options: &FedOvaOptions,
    seed: u64,
    sink: &mut dyn FnMut(&RoundReport),
) -> Result<RunOutcome> {
    train_fedova(fed, spec, cfg, options, seed, sink).map(|(outcome, _)| outcome)
}

/// [`run_fedova`] that also hands back the trained ensemble.
pub fn train_fedova(
    fed: &mut Federation,
    spec: ModelSpec,
    cfg: &RoundConfig,
    options: &FedOvaOptions,
    seed: u64,
    sink: &mut dyn FnMut(&RoundReport),
) -> Result<(RunOutcome, OvaEnsemble)> {
    cfg.validate(fed.clients.len())?;
    let n = fed.train.num_classes;
    if n < 2 {
        return Err(Error::config("data.num_classes", "FedOVA needs at least 2 classes"));
    }
    if spec.input_dim != fed.train.input_dim() {
        return Err(Error::config(
            "model.input_dim",
            format!(
                "model expects {} features, data has {}",
                spec.input_dim,
                fed.train.input_dim()
            ),
        ));
    }
    let mut init_rng = RngSeed::new(seed, streams::INIT).stream();
    let ensemble = OvaEnsemble::init(spec, n, &mut init_rng)?;
    let memories = (0..n)
        .map(|_| match cfg.optimizer {
            OptimizerKind::FimLbfgs => OptimizerState::Lbfgs(LbfgsMemory::new(cfg.m.max(1), cfg.h0_mode)),
            _ => OptimizerState::Averaging,
        })
        .collect();
    let mut server = OvaServer {
        ensemble,
        memories,
        ledger: CommunicationLedger::new(),
        sampler: RngSeed::new(seed, streams::CLIENT_SAMPLING).stream(),
        fim_max_observed: 0.0,
    };

    let train = fed.train;
    let test = fed.test;
    let train_binary: Vec<Vec<usize>> = (0..n).map(|c| binary_labels(&train.labels, c)).collect();
    let opt = cfg.optimizer_config();
    let hp = cfg.local_training();
    let adam = cfg.adam();
    let balanced = options.balanced_sampling;

    let server_cell = std::cell::RefCell::new(&mut server);
    let (initial, rounds, stopped_early) = drive_rounds(
        cfg,
        |round| {
            let mut srv = server_cell.borrow_mut();
            srv.ledger.begin_round(round);
            let ids = fed.client_ids();
            let selected = sample_clients(&ids, cfg.participation_fraction, &mut srv.sampler)?;
            let d_c = srv.ensemble.component_spec().param_count() as u64;
            let ensemble = &srv.ensemble;

            let work = for_participants(&mut fed.clients, &selected, |c| {
                let id = c.id;
                let (view, rng) = c.split(train);
                let comps = select_components(&train.label_set(view.indices))?;
                let mut params_out = Vec::new();
                let mut fisher_out = Vec::new();
                for i in comps {
                    let idx = component_indices(&view, i, balanced, rng);
                    let local = LocalView::new(train, &idx).one_vs_rest(i);
                    let w = &ensemble.components[i];
                    match cfg.optimizer {
                        OptimizerKind::FimLbfgs => {
                            let up = client_update_fim(&local, rng, w, cfg.local_batch_size, opt.fim_damping)?;
                            fisher_out.push((i, up));
                        }
                        OptimizerKind::FedavgAdam => {
                            let (delta, _) = client_update_adam(&local, rng, w, &hp, &adam)?;
                            let mut p = w.values().clone();
                            p.axpy(1.0, &delta);
                            params_out.push((i, p));
                        }
                        OptimizerKind::FedavgSgd => {
                            let (delta, _) = client_update_sgd(&local, rng, w, &hp)?;
                            let mut p = w.values().clone();
                            p.axpy(1.0, &delta);
                            params_out.push((i, p));
                        }
                    }
                }
                Ok((
                    id,
                    match cfg.optimizer {
                        OptimizerKind::FimLbfgs => ClientWork::Fisher(fisher_out),
                        _ => ClientWork::Params(params_out),
                    },
                ))
            })?;

            let mut touched = BTreeSet::new();
            let mut uploads = 0u64;
            match cfg.optimizer {
                OptimizerKind::FimLbfgs => {
                    let mut by_comp: BTreeMap<usize, Vec<(FimDiagonal, DenseVector, usize)>> = BTreeMap::new();
                    for (_, w) in work {
                        if let ClientWork::Fisher(list) = w {
                            for (i, up) in list {
                                by_comp.entry(i).or_default().push(up);
                            }
                        }
                    }
                    let m = opt.m as u64;
                    for (i, ups) in by_comp {
                        let tau = cfg.tau.unwrap_or(ups.len()) as u64;
                        let log = ceil_log2(tau);
                        srv.ledger.broadcast(d_c);
                        srv.ledger.gather(d_c * log);
                        let OvaServer { ensemble, memories, .. } = &mut **srv;
                        let (next, agg) = fim_lbfgs_step(
                            &mut memories[i],
                            &ensemble.components[i],
                            &ups,
                            &opt,
                            cfg.gradient_weighting,
                            cfg.fim_weighting,
                        )?;
                        ensemble.components[i] = next;
                        srv.fim_max_observed = srv.fim_max_observed.max(agg.max_entry());
                        srv.ledger.broadcast(d_c);
                        srv.ledger.gather(d_c * log);
                        srv.ledger.pair_maintenance(m * m + m + m + d_c);
                    }
                }
                _ => {
                    let mut groups: BTreeMap<usize, ClassifierGroup> = BTreeMap::new();
                    for (id, w) in work {
                        if let ClientWork::Params(list) = w {
                            for (i, p) in list {
                                touched.insert(i);
                                uploads += 1;
                                let g = groups.entry(i).or_insert_with(|| ClassifierGroup {
                                    classifier_id: i,
                                    members: Vec::new(),
                                    params: Vec::new(),
                                });
                                g.members.push(id);
                                g.params.push(p);
                            }
                        }
                    }
                    srv.ledger.broadcast(d_c * touched.len() as u64);
                    srv.ledger.gather(d_c * uploads);
                    let groups: Vec<ClassifierGroup> = groups.into_values().collect();
                    srv.ensemble = group_aggregate(&srv.ensemble, &groups)?;
                }
            }
            for (i, c) in srv.ensemble.components.iter().enumerate() {
                if !c.values().is_finite() {
                    return Err(Error::Numeric(format!("round {round}: component {i} diverged")));
                }
            }
            let rec = srv.ledger.end_round();
            let (curvature, skips) = srv.curvature();
            Ok(RoundStats {
                participants: selected.len(),
                comm_scalars: rec.total(),
                comm_scalars_cum: srv.ledger.cumulative(),
                curvature,
                skips,
                fim_max_observed: (cfg.optimizer == OptimizerKind::FimLbfgs).then_some(srv.fim_max_observed),
            })
        },
        || {
            let srv = server_cell.borrow();
            evaluate_ensemble(&srv.ensemble, train, &train_binary, test)
        },
        sink,
    )?;
    Ok((
        RunOutcome {
            initial,
            rounds,
            ledger: server.ledger,
            stopped_early,
        },
        server.ensemble,
    ))
}

/// Mean binary cross-entropy of the components on the training set, and
/// ensemble accuracy on the evaluation set.
fn evaluate_ensemble(
    ensemble: &OvaEnsemble,
    train: &Dataset,
    train_binary: &[Vec<usize>],
    test: &Dataset,
) -> Result<Evaluation> {
    let mut loss = 0.0;
    for (comp, labels) in ensemble.components.iter().zip(train_binary) {
        loss += models::mean_loss(comp, &train.features, labels)?;
    }
    Ok(Evaluation {
        train_loss: loss / ensemble.num_classes as f64,
        accuracy: ensemble_accuracy(ensemble, test)?,
    })
}
