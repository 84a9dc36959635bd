//! Round-based server/client engine: FedAvg (SGD or Adam local solvers) and
//! the server-side Fisher L-BFGS protocol, with an exact communication ledger.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lbfgs::{
    aggregate_fim, fim_diagonal, smooth_y, two_loop_direction, update_memory, FimDiagonal, H0Mode, LbfgsMemory,
    OptimizerConfig,
};
use crate::ledger::{ceil_log2, CommunicationLedger};
use crate::models::{self, ModelSpec, ParameterVector, SampleBatch};
use crate::numerics::{streams, weighted_average, DenseVector, RngSeed, SeededStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    FimLbfgs,
    FedavgSgd,
    FedavgAdam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::FimLbfgs => "fim-lbfgs",
            OptimizerKind::FedavgSgd => "fedavg-sgd",
            OptimizerKind::FedavgAdam => "fedavg-adam",
        }
    }
}

/// How client contributions are weighted in a server-side mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `n_k / n`
    SampleSize,
    /// `1 / K`
    Uniform,
}

/// Local mini-batch size; `full` trains on the whole local set per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchSize {
    Fixed(usize),
    Full(FullBatch),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FullBatch {
    Full,
}

impl BatchSize {
    pub const FULL: BatchSize = BatchSize::Full(FullBatch::Full);

    /// Effective size against a local set of `n` samples.
    pub fn resolve(self, n: usize) -> usize {
        match self {
            BatchSize::Fixed(b) => b.min(n).max(1),
            BatchSize::Full(_) => n.max(1),
        }
    }
}

/// Early stop once accuracy stays at or above `target - tolerance` for
/// `patience` consecutive evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub target_accuracy: f64,
    #[serde(default)]
    pub tolerance: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_patience() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    pub participation_fraction: f64,
    pub local_epochs: usize,
    pub local_batch_size: BatchSize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub total_rounds: usize,
    /// Reduction-tree width of the cost model; `None` uses the participant count.
    pub tau: Option<usize>,
    /// L-BFGS memory size.
    pub m: usize,
    pub cautious_eps: f64,
    pub fim_damping: f64,
    pub h0_mode: H0Mode,
    pub gradient_weighting: Weighting,
    pub fim_weighting: Weighting,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub eval_every: usize,
    pub early_stop: Option<EarlyStop>,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            participation_fraction: 0.2,
            local_epochs: 5,
            local_batch_size: BatchSize::Fixed(15),
            learning_rate: 0.05,
            optimizer: OptimizerKind::FedavgSgd,
            total_rounds: 100,
            tau: None,
            m: 10,
            cautious_eps: 1e-8,
            fim_damping: 1e-6,
            h0_mode: H0Mode::GammaScaled,
            gradient_weighting: Weighting::SampleSize,
            fim_weighting: Weighting::Uniform,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 1,
            early_stop: None,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        let q = self.participation_fraction;
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::config(
                "round.participation_fraction",
                format!("must lie in (0, 1], got {q}"),
            ));
        }
        if q * (num_clients as f64) < 1.0 - 1e-12 {
            return Err(Error::config(
                "round.participation_fraction",
                format!("q * clients = {} selects no client", q * num_clients as f64),
            ));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("round.local_epochs", "must be at least 1"));
        }
        if self.local_batch_size == BatchSize::Fixed(0) {
            return Err(Error::config("round.local_batch_size", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("round.learning_rate", "must be finite and nonnegative"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("round.eval_every", "must be at least 1"));
        }
        if self.tau == Some(0) {
            return Err(Error::config("round.tau", "must be at least 1"));
        }
        if let Some(es) = &self.early_stop {
            if es.patience == 0 {
                return Err(Error::config("round.early_stop.patience", "must be at least 1"));
            }
        }
        if self.optimizer == OptimizerKind::FimLbfgs {
            self.optimizer_config().validate()?;
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            eta: self.learning_rate,
            m: self.m,
            cautious_eps: self.cautious_eps,
            h0_mode: self.h0_mode,
            fim_damping: self.fim_damping,
        }
    }

    pub(crate) fn local_training(&self) -> LocalTraining {
        LocalTraining {
            epochs: self.local_epochs,
            batch_size: self.local_batch_size,
            learning_rate: self.learning_rate,
        }
    }

    pub(crate) fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// A client's slice of the global training set, optionally relabeled
/// one-vs-rest against `positive_class`.
#[derive(Debug, Clone, Copy)]
pub struct LocalView<'a> {
    pub data: &'a Dataset,
    pub indices: &'a [usize],
    pub positive_class: Option<usize>,
}

impl<'a> LocalView<'a> {
    pub fn new(data: &'a Dataset, indices: &'a [usize]) -> Self {
        Self {
            data,
            indices,
            positive_class: None,
        }
    }

    pub fn one_vs_rest(self, class: usize) -> Self {
        Self {
            positive_class: Some(class),
            ..self
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn label(&self, i: usize) -> usize {
        let y = self.data.labels[i];
        match self.positive_class {
            Some(c) => usize::from(y == c),
            None => y,
        }
    }

    /// Batch of the local samples at `positions` (offsets into `indices`).
    pub fn batch(&self, positions: &[usize]) -> SampleBatch {
        let rows: Vec<usize> = positions.iter().map(|&p| self.indices[p]).collect();
        SampleBatch {
            features: self.data.features.select_rows(&rows),
            labels: rows.iter().map(|&i| self.label(i)).collect(),
        }
    }

    pub fn full_batch(&self) -> SampleBatch {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }
}

/// One simulated client: its sample indices and private random stream.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub indices: Vec<usize>,
    rng: SeededStream,
}

impl ClientState {
    pub fn new(id: usize, indices: Vec<usize>, seed: u64) -> Self {
        Self {
            id,
            indices,
            rng: RngSeed::new(seed, streams::CLIENT_BASE + id as u64).stream(),
        }
    }

    pub fn num_samples(&self) -> usize {
        self.indices.len()
    }

    pub fn view<'a>(&'a self, data: &'a Dataset) -> LocalView<'a> {
        LocalView::new(data, &self.indices)
    }

    /// Borrowed view plus the client's stream.
    pub fn split<'a>(&'a mut self, data: &'a Dataset) -> (LocalView<'a>, &'a mut SeededStream) {
        (LocalView::new(data, &self.indices), &mut self.rng)
    }
}

/// Builds one client per plan entry; `shared` indices are appended to every
/// client's local set.
pub fn build_clients(assignment: &[Vec<usize>], shared: Option<&[usize]>, seed: u64) -> Vec<ClientState> {
    assignment
        .iter()
        .enumerate()
        .map(|(k, idx)| {
            let mut local = idx.clone();
            if let Some(extra) = shared {
                local.extend_from_slice(extra);
            }
            ClientState::new(k, local, seed)
        })
        .collect()
}

/// Uniform sample without replacement of `max(1, round(q * K))` client ids, ascending.
pub fn sample_clients(all: &[usize], q: f64, rng: &mut SeededStream) -> Result<Vec<usize>> {
    if all.is_empty() {
        return Err(Error::Degenerate("no clients to sample".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::config(
            "round.participation_fraction",
            format!("must lie in (0, 1], got {q}"),
        ));
    }
    let k = ((q * all.len() as f64).round() as usize).clamp(1, all.len());
    let mut picked: Vec<usize> = if k == all.len() {
        all.to_vec()
    } else {
        rng.sample_indices(all.len(), k).into_iter().map(|i| all[i]).collect()
    };
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: BatchSize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Runs the local solver, visiting shuffled mini-batches for every epoch and
/// handing each batch gradient to `step`.
fn local_passes<F>(
    view: &LocalView,
    rng: &mut SeededStream,
    params: &ParameterVector,
    hp: &LocalTraining,
    mut step: F,
) -> Result<DenseVector>
where
    F: FnMut(&mut DenseVector, &DenseVector),
{
    if view.is_empty() {
        return Err(Error::Degenerate("client holds no samples".into()));
    }
    let b = hp.batch_size.resolve(view.len());
    let mut local = params.clone();
    let mut order: Vec<usize> = (0..view.len()).collect();
    for _ in 0..hp.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(b) {
            let batch = view.batch(chunk);
            let g = models::batch_gradient(&local, &batch)?;
            step(local.values_mut(), &g);
        }
    }
    let delta = local.values().sub(params.values());
    if !delta.is_finite() {
        return Err(Error::Numeric("local update produced non-finite parameters".into()));
    }
    Ok(delta)
}

/// `E` epochs of shuffled mini-batch SGD from `params`; returns `w_local - w`.
pub fn client_update_sgd(
    view: &LocalView,
    rng: &mut SeededStream,
    params: &ParameterVector,
    hp: &LocalTraining,
) -> Result<(DenseVector, usize)> {
    let eta = hp.learning_rate;
    let delta = local_passes(view, rng, params, hp, |w, g| w.axpy(-eta, g))?;
    Ok((delta, view.len()))
}

/// Like [`client_update_sgd`] with Adam steps; moments start at zero every call.
pub fn client_update_adam(
    view: &LocalView,
    rng: &mut SeededStream,
    params: &ParameterVector,
    hp: &LocalTraining,
    adam: &AdamParams,
) -> Result<(DenseVector, usize)> {
    let d = params.len();
    let mut m1 = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    let mut t = 0i32;
    let eta = hp.learning_rate;
    let delta = local_passes(view, rng, params, hp, |w, g| {
        t += 1;
        let c1 = 1.0 - adam.beta1.powi(t);
        let c2 = 1.0 - adam.beta2.powi(t);
        for j in 0..d {
            m1[j] = adam.beta1 * m1[j] + (1.0 - adam.beta1) * g[j];
            m2[j] = adam.beta2 * m2[j] + (1.0 - adam.beta2) * g[j] * g[j];
            let mhat = m1[j] / c1;
            let vhat = m2[j] / c2;
            w[j] -= eta * mhat / (vhat.sqrt() + adam.eps);
        }
    })?;
    Ok((delta, view.len()))
}

/// Draws a batch of `min(B, n_k)` local samples (the whole set, in order, when
/// `B >= n_k`) and returns its Fisher diagonal and mean gradient at `params`.
pub fn client_update_fim(
    view: &LocalView,
    rng: &mut SeededStream,
    params: &ParameterVector,
    batch_size: BatchSize,
    fim_damping: f64,
) -> Result<(FimDiagonal, DenseVector, usize)> {
    if view.is_empty() {
        return Err(Error::Degenerate("client holds no samples".into()));
    }
    let b = batch_size.resolve(view.len());
    let mut positions = if b >= view.len() {
        (0..view.len()).collect()
    } else {
        rng.sample_indices(view.len(), b)
    };
    positions.sort_unstable();
    let batch = view.batch(&positions);
    let psg = models::per_sample_gradients(params, &batch)?;
    let fim = fim_diagonal(&psg, fim_damping)?;
    let mut gradient = DenseVector::zeros(params.len());
    for i in 0..psg.batch_size() {
        gradient.axpy(1.0, psg.grads.row(i));
    }
    gradient.scale(1.0 / psg.batch_size() as f64);
    Ok((fim, gradient, view.len()))
}

/// `w' = w + sum_k (n_k / n) delta_k`; uniform weights on request.
pub fn fedavg_aggregate(
    updates: &[(DenseVector, usize)],
    params: &ParameterVector,
    weighting: Weighting,
) -> Result<ParameterVector> {
    if updates.is_empty() {
        return Err(Error::Degenerate("no client updates to aggregate".into()));
    }
    let deltas: Vec<&DenseVector> = updates.iter().map(|(d, _)| d).collect();
    let weights = weights_for(updates.iter().map(|(_, n)| *n), weighting);
    let mean = weighted_average(&deltas, &weights)?;
    if mean.len() != params.len() {
        return Err(Error::dim("update length differs from model size"));
    }
    let mut next = params.values().clone();
    next.axpy(1.0, &mean);
    params.with_values(next)
}

pub(crate) fn weights_for(sizes: impl Iterator<Item = usize>, weighting: Weighting) -> Vec<f64> {
    sizes
        .map(|n| match weighting {
            Weighting::SampleSize => n as f64,
            Weighting::Uniform => 1.0,
        })
        .collect()
}

/// Server-side state carried between rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub params: ParameterVector,
    pub round: usize,
    pub optimizer: OptimizerState,
    pub ledger: CommunicationLedger,
    sampler: SeededStream,
    /// Largest aggregated Fisher entry seen so far.
    pub fim_max_observed: f64,
}

#[derive(Debug, Clone)]
pub enum OptimizerState {
    Lbfgs(LbfgsMemory),
    /// FedAvg keeps no server-side optimizer state; Adam moments live on clients.
    Averaging,
}

impl ServerState {
    pub fn new(params: ParameterVector, cfg: &RoundConfig, seed: u64) -> Self {
        let optimizer = match cfg.optimizer {
            OptimizerKind::FimLbfgs => OptimizerState::Lbfgs(LbfgsMemory::new(cfg.m.max(1), cfg.h0_mode)),
            _ => OptimizerState::Averaging,
        };
        Self {
            params,
            round: 0,
            optimizer,
            ledger: CommunicationLedger::new(),
            sampler: RngSeed::new(seed, streams::CLIENT_SAMPLING).stream(),
            fim_max_observed: 0.0,
        }
    }

    pub fn memory(&self) -> Option<&LbfgsMemory> {
        match &self.optimizer {
            OptimizerState::Lbfgs(m) => Some(m),
            OptimizerState::Averaging => None,
        }
    }
}

/// Per-round outcome. `eval_accuracy` is present on evaluation rounds only.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub train_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub participants: usize,
    pub comm_scalars: u64,
    pub comm_scalars_cum: u64,
    pub curvature_min: Option<f64>,
    pub curvature_max: Option<f64>,
    pub skips: usize,
    pub fim_max_observed: Option<f64>,
    pub elapsed_ms: f64,
}

/// Loss on the training set and accuracy on the evaluation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub train_loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub initial: Evaluation,
    pub rounds: Vec<RoundReport>,
    pub ledger: CommunicationLedger,
    pub stopped_early: bool,
}

/// Training data, evaluation data and clients of one simulation.
pub struct Federation<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub clients: Vec<ClientState>,
}

impl<'a> Federation<'a> {
    /// Client ids in ascending order, independent of storage order.
    pub fn client_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.clients.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids
    }
}

pub(crate) fn evaluate_model(params: &ParameterVector, train: &Dataset, test: &Dataset) -> Result<Evaluation> {
    let train_loss = models::mean_loss(params, &train.features, &train.labels)?;
    let accuracy = models::accuracy(params, &test.features, &test.labels)?;
    Ok(Evaluation { train_loss, accuracy })
}

fn check_finite_loss(round: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("round {round}: training loss is {loss}")));
    }
    Ok(())
}

/// Runs local work for the selected clients concurrently; results come back in client-id order.
pub(crate) fn for_participants<T, F>(clients: &mut [ClientState], selected: &[usize], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut ClientState) -> Result<T> + Sync + Send,
{
    let mut chosen: Vec<&mut ClientState> = clients
        .iter_mut()
        .filter(|c| selected.binary_search(&c.id).is_ok())
        .collect();
    chosen.sort_by_key(|c| c.id);
    chosen.into_par_iter().map(f).collect()
}

/// One FedAvg round (SGD or Adam local solver).
pub fn server_fedavg_round(state: &mut ServerState, fed: &mut Federation, cfg: &RoundConfig) -> Result<Vec<usize>> {
    let ids = fed.client_ids();
    let selected = sample_clients(&ids, cfg.participation_fraction, &mut state.sampler)?;
    let d = state.params.len() as u64;
    state.ledger.broadcast(d);

    let hp = cfg.local_training();
    let adam = cfg.adam();
    let params = &state.params;
    let train = fed.train;
    let optimizer = cfg.optimizer;
    let updates = for_participants(&mut fed.clients, &selected, |c| {
        let (view, rng) = c.split(train);
        match optimizer {
            OptimizerKind::FedavgAdam => client_update_adam(&view, rng, params, &hp, &adam),
            _ => client_update_sgd(&view, rng, params, &hp),
        }
    })?;
    state.ledger.gather(d * updates.len() as u64);
    state.params = fedavg_aggregate(&updates, &state.params, cfg.gradient_weighting)?;
    Ok(selected)
}

/// One Fisher L-BFGS round: aggregate client gradients, take the two-loop
/// step, smooth the new pair with the mean client Fisher diagonal and offer it
/// to the memory.
pub fn server_fim_lbfgs_round(state: &mut ServerState, fed: &mut Federation, cfg: &RoundConfig) -> Result<Vec<usize>> {
    let ids = fed.client_ids();
    let selected = sample_clients(&ids, cfg.participation_fraction, &mut state.sampler)?;
    let opt = cfg.optimizer_config();
    let d = state.params.len() as u64;
    let tau = cfg.tau.unwrap_or(selected.len()) as u64;
    let log = ceil_log2(tau);

    state.ledger.broadcast(d);
    let params = &state.params;
    let train = fed.train;
    let uploads = for_participants(&mut fed.clients, &selected, |c| {
        let (view, rng) = c.split(train);
        client_update_fim(&view, rng, params, cfg.local_batch_size, opt.fim_damping)
    })?;
    state.ledger.gather(d * log);

    let (step, pair) = fim_lbfgs_step(
        &mut state.optimizer,
        &state.params,
        &uploads,
        &opt,
        cfg.gradient_weighting,
        cfg.fim_weighting,
    )?;
    state.ledger.broadcast(d);
    state.ledger.gather(d * log);
    let m = opt.m as u64;
    state.ledger.pair_maintenance(m * m + m + m + d);

    state.fim_max_observed = state.fim_max_observed.max(pair.max_entry());
    state.params = step;
    Ok(selected)
}

/// Server half of one L-BFGS iteration given the client uploads
/// `(fim, gradient, n_k)`. Returns the new parameters and the aggregated Fisher diagonal.
pub(crate) fn fim_lbfgs_step(
    optimizer: &mut OptimizerState,
    params: &ParameterVector,
    uploads: &[(FimDiagonal, DenseVector, usize)],
    opt: &OptimizerConfig,
    gradient_weighting: Weighting,
    fim_weighting: Weighting,
) -> Result<(ParameterVector, FimDiagonal)> {
    let OptimizerState::Lbfgs(memory) = optimizer else {
        return Err(Error::config(
            "round.optimizer",
            "server state is not an L-BFGS optimizer",
        ));
    };
    let grads: Vec<&DenseVector> = uploads.iter().map(|(_, g, _)| g).collect();
    let g = weighted_average(&grads, &weights_for(uploads.iter().map(|u| u.2), gradient_weighting))?;

    let p = two_loop_direction(memory, &g)?;
    let mut next = params.values().clone();
    next.axpy(opt.eta, &p);
    if !next.is_finite() {
        return Err(Error::Numeric("L-BFGS step produced non-finite parameters".into()));
    }
    let s = next.sub(params.values());

    let parts: Vec<FimDiagonal> = uploads.iter().map(|(f, _, _)| f.clone()).collect();
    let agg = match fim_weighting {
        Weighting::Uniform => aggregate_fim(&parts)?,
        Weighting::SampleSize => {
            let diags: Vec<&DenseVector> = parts.iter().map(|f| &f.diag).collect();
            let w = weights_for(uploads.iter().map(|u| u.2), Weighting::SampleSize);
            FimDiagonal {
                diag: weighted_average(&diags, &w)?,
                batch_size: parts.iter().map(|f| f.batch_size).sum(),
            }
        }
    };
    let y = smooth_y(&agg, &s)?;
    update_memory(memory, s, y, opt.cautious_eps)?;
    Ok((params.with_values(next)?, agg))
}

/// Drives rounds through `step`, evaluating on the configured cadence and
/// honouring early stop. Shared by the FedAvg family and FedOVA.
pub(crate) fn drive_rounds<S, E>(
    cfg: &RoundConfig,
    mut step: S,
    mut evaluate: E,
    sink: &mut dyn FnMut(&RoundReport),
) -> Result<(Evaluation, Vec<RoundReport>, bool)>
where
    S: FnMut(usize) -> Result<RoundStats>,
    E: FnMut() -> Result<Evaluation>,
{
    let initial = evaluate()?;
    check_finite_loss(0, initial.train_loss)?;
    let mut reports = Vec::with_capacity(cfg.total_rounds);
    let mut streak = 0;
    let start = Instant::now();
    for round in 1..=cfg.total_rounds {
        let stats = step(round)?;
        let is_eval = round % cfg.eval_every == 0 || round == cfg.total_rounds;
        let ev = evaluate()?;
        check_finite_loss(round, ev.train_loss)?;
        let report = RoundReport {
            round,
            train_loss: ev.train_loss,
            eval_accuracy: is_eval.then_some(ev.accuracy),
            participants: stats.participants,
            comm_scalars: stats.comm_scalars,
            comm_scalars_cum: stats.comm_scalars_cum,
            curvature_min: stats.curvature.map(|c| c.0),
            curvature_max: stats.curvature.map(|c| c.1),
            skips: stats.skips,
            fim_max_observed: stats.fim_max_observed,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        sink(&report);
        reports.push(report);
        if let (Some(es), true) = (&cfg.early_stop, is_eval) {
            if ev.accuracy >= es.target_accuracy - es.tolerance {
                streak += 1;
            } else {
                streak = 0;
            }
            if streak >= es.patience {
                return Ok((initial, reports, true));
            }
        }
    }
    Ok((initial, reports, false))
}

/// Book-keeping a round hands back to [`drive_rounds`].
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct RoundStats {
    pub participants: usize,
    pub comm_scalars: u64,
    pub comm_scalars_cum: u64,
    pub curvature: Option<(f64, f64)>,
    pub skips: usize,
    pub fim_max_observed: Option<f64>,
}

/// Runs `total_rounds` rounds of the configured optimizer from a seeded
/// initialization, streaming every report to `sink`.
pub fn run_experiment(
    fed: &mut Federation,
    spec: ModelSpec,
    cfg: &RoundConfig,
    seed: u64,
    sink: &mut dyn FnMut(&RoundReport),
) -> Result<RunOutcome> {
    cfg.validate(fed.clients.len())?;
    spec.validate()?;
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
    let params = ParameterVector::init_uniform(spec, &mut init_rng);
    let mut state = ServerState::new(params, cfg, seed);
    let (train, test) = (fed.train, fed.test);

    let state_cell = std::cell::RefCell::new(&mut state);
    let (initial, rounds, stopped_early) = drive_rounds(
        cfg,
        |round| {
            let mut st = state_cell.borrow_mut();
            st.round = round;
            st.ledger.begin_round(round);
            let selected = match cfg.optimizer {
                OptimizerKind::FimLbfgs => server_fim_lbfgs_round(&mut st, fed, cfg)?,
                _ => server_fedavg_round(&mut st, fed, cfg)?,
            };
            let rec = st.ledger.end_round();
            let mem = st.memory();
            Ok(RoundStats {
                participants: selected.len(),
                comm_scalars: rec.total(),
                comm_scalars_cum: st.ledger.cumulative(),
                curvature: mem.and_then(|m| m.curvature_range()),
                skips: mem.map_or(0, |m| m.skips()),
                fim_max_observed: mem.map(|_| st.fim_max_observed),
            })
        },
        || evaluate_model(&state_cell.borrow().params, train, test),
        sink,
    )?;
    Ok(RunOutcome {
        initial,
        rounds,
        ledger: state.ledger.clone(),
        stopped_early,
    })
}
