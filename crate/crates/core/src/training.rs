//! Constrained alternating training of the primal and dual networks.
//!
//! The primal network minimizes the Lagrangian at its last layer subject to
//! per-layer descent constraints on `‖∇ₓL‖`; the dual network maximizes the
//! Lagrangian at `(x_L, λ_L)` subject to per-layer decrease of `‖Ax − b‖`.
//! Both constraint sets are handled with projected meta-dual ascent. Rounds
//! alternate: dual epochs with the primal frozen, a fresh multiplier pool,
//! then primal epochs with the dual frozen.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{
    coupled_forward, draw_dual_start, draw_primal_start, primal_forward, Model, NetParams,
};
use crate::problem::{self, RelaxedQP};
use crate::seed::{rng_from_seed, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient steps.
    #[default]
    Sgd,
    /// Adaptive moments for the network parameters; meta duals always use
    /// plain projected ascent.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Primal descent rate α, shared across layers.
    pub alpha: f64,
    /// Dual descent rate β on ‖Ax − b‖, shared across layers.
    pub beta: f64,
    pub eps_p: f64,
    pub eps_d: f64,
    pub eta_p: f64,
    pub eta_d: f64,
    pub primal_epochs: usize,
    pub dual_epochs: usize,
    pub rounds: usize,
    /// Instances per batch, N.
    pub batch_instances: usize,
    /// Multipliers drawn per instance in a primal batch, M.
    pub batch_multipliers: usize,
    /// `false` trains the unconstrained ablation: μ and ν stay zero.
    pub constraints: bool,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Per-tensor gradient-norm clip; off when `None`.
    pub clip: Option<f64>,
    /// Zero μ and ν at the start of every round.
    pub reset_meta_duals: bool,
    /// Write elapsed wall-clock time into the training log. Off by default
    /// so that reruns produce identical logs.
    pub log_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.98,
            beta: 0.95,
            eps_p: 1e-4,
            eps_d: 7e-4,
            eta_p: 1e-4,
            eta_d: 1e-3,
            primal_epochs: 20,
            dual_epochs: 20,
            rounds: 10,
            batch_instances: 32,
            batch_multipliers: 4,
            constraints: true,
            optimizer: OptimizerKind::Sgd,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip: None,
            reset_meta_duals: false,
            log_wallclock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |f: &str| format!("{prefix}{f}");
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(field(name), format!("must lie in (0, 1], got {v}")));
            }
        }
        for (name, v) in [
            ("eps_p", self.eps_p),
            ("eps_d", self.eps_d),
            ("eta_p", self.eta_p),
            ("eta_d", self.eta_d),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field(name), format!("must be nonnegative, got {v}")));
            }
        }
        if self.batch_instances == 0 {
            return Err(Error::config(field("batch_instances"), "must be at least 1"));
        }
        if self.batch_multipliers == 0 {
            return Err(Error::config(field("batch_multipliers"), "must be at least 1"));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field(name), "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config(field("adam_eps"), "must be positive"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::config(field("clip"), "must be positive"));
            }
        }
        Ok(())
    }
}

/// Multipliers of the constrained training problems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaDuals {
    /// One per primal layer.
    pub mu: Vec<f64>,
    /// One per dual layer.
    pub nu: Vec<f64>,
}

impl MetaDuals {
    pub fn zeros(k: usize, l: usize) -> Self {
        Self {
            mu: vec![0.0; k],
            nu: vec![0.0; l],
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `v ← [v + rate·slack]₊`
fn projected_ascent(v: &mut [f64], slack: &[f64], rate: f64) {
    for (m, s) in v.iter_mut().zip(slack) {
        *m = (*m + rate * s).max(0.0);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: NetParams,
    pub v: NetParams,
    pub t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Dual,
    Primal,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Dual => "dual",
            Phase::Primal => "primal",
        }
    }
}

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: Model,
    pub meta: MetaDuals,
    pub adam_primal: Option<AdamState>,
    pub adam_dual: Option<AdamState>,
    pub phase: Phase,
    /// Completed rounds.
    pub round: usize,
    pub epoch: usize,
    /// Parameter updates taken so far, both phases.
    pub step: u64,
    pub seed: u64,
    pub rng: Rng,
}

impl TrainState {
    /// Fresh identity-initialized networks; `bias_sizes` matters only for
    /// per-node biases.
    pub fn new(dims: &crate::gnn::ArchDims, bias_sizes: (usize, usize), seed: u64) -> Self {
        let mut init_rng = rng_from_seed(crate::seed::derive_seed(seed, &[0x1417]));
        let model = Model::init(&mut init_rng, dims, bias_sizes);
        Self {
            meta: MetaDuals::zeros(dims.k_layers, dims.l_layers),
            model,
            adam_primal: None,
            adam_dual: None,
            phase: Phase::Dual,
            round: 0,
            epoch: 0,
            step: 0,
            seed,
            rng: rng_from_seed(crate::seed::derive_seed(seed, &[0x7a11])),
        }
    }
}

fn clip_grads(grads: &mut NetParams, clip: Option<f64>) {
    let Some(c) = clip else { return };
    for g in grads.tensors_mut() {
        let n = g.norm();
        if n > c {
            *g = g.scale(c / n);
        }
    }
}

fn apply_update(
    params: &mut NetParams,
    grads: &NetParams,
    lr: f64,
    cfg: &TrainConfig,
    adam: &mut Option<AdamState>,
) -> Result<()> {
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            for (p, g) in params.tensors_mut().zip(grads.tensors()) {
                p.axpy(-lr, g)?;
            }
        }
        OptimizerKind::Adam => {
            let st = adam.get_or_insert_with(|| AdamState {
                m: params.zeros_like(),
                v: params.zeros_like(),
                t: 0,
            });
            st.t += 1;
            let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
            let c1 = 1.0 - b1.powi(st.t as i32);
            let c2 = 1.0 - b2.powi(st.t as i32);
            for (((p, g), m), v) in params
                .tensors_mut()
                .zip(grads.tensors())
                .zip(st.m.tensors_mut())
                .zip(st.v.tensors_mut())
            {
                for (((pi, &gi), mi), vi) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    let mhat = *mi / c1;
                    let vhat = *vi / c2;
                    *pi -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
                }
            }
        }
    }
    Ok(())
}

fn sum_params(mut parts: Vec<NetParams>) -> Result<Option<NetParams>> {
    if parts.is_empty() {
        return Ok(None);
    }
    let mut acc = parts.remove(0);
    for p in &parts {
        for (a, b) in acc.tensors_mut().zip(p.tensors()) {
            a.add_assign(b)?;
        }
    }
    Ok(Some(acc))
}

/// Runs `f` over `items`, in parallel when `jobs > 1`, keeping input order.
pub(crate) fn map_ordered<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    if jobs > 1 {
        items.par_iter().map(&f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

/// Multipliers harvested from dual trajectories, grouped by instance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MultiplierPool {
    pub per_instance: Vec<Vec<Vec<f64>>>,
}

impl MultiplierPool {
    pub fn len(&self) -> usize {
        self.per_instance.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(instance index, λ)` pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.per_instance
            .iter()
            .enumerate()
            .flat_map(|(i, v)| v.iter().map(move |l| (i, l.as_slice())))
    }
}

/// Runs the current networks on every instance and keeps `λ_0..λ_L`.
pub fn collect_multiplier_pool(model: &Model, data: &[RelaxedQP], rng: &mut Rng, jobs: usize) -> Result<MultiplierPool> {
    let l_layers = model.dims.l_layers;
    let draws: Vec<(Vec<Vec<f64>>, Vec<f64>)> = data
        .iter()
        .map(|qp| {
            let x0s = (0..=l_layers).map(|_| draw_primal_start(rng, qp.n)).collect();
            (x0s, draw_dual_start(rng, qp.rows()))
        })
        .collect();
    let items: Vec<(&RelaxedQP, &(Vec<Vec<f64>>, Vec<f64>))> = data.iter().zip(&draws).collect();
    let per_instance = map_ordered(jobs, &items, |(qp, (x0s, l0))| {
        Ok(model.forward_with_starts(qp, x0s, l0)?.duals)
    })?;
    Ok(MultiplierPool { per_instance })
}

/// Summary of one parameter update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    /// Mean training loss over the batch (Lagrangian for primal steps,
    /// negated Lagrangian for dual steps).
    pub loss: f64,
    /// Constraint slacks, one per layer.
    pub slacks: Vec<f64>,
}

impl StepMetrics {
    pub fn mean_slack(&self) -> f64 {
        if self.slacks.is_empty() {
            0.0
        } else {
            self.slacks.iter().sum::<f64>() / self.slacks.len() as f64
        }
    }
}

struct PairResult {
    grads: NetParams,
    loss: f64,
    norms: Vec<f64>,
}

/// Gradient of the per-sample primal objective
/// `w·(L(x̃_K, λ) + Σ_k μ_k (‖∇ₓL(x̃_k)‖ − α‖∇ₓL(x̃_{k−1})‖))`.
fn primal_pair(
    model: &Model,
    qp: &RelaxedQP,
    x0: &[f64],
    lambda: &[f64],
    mu: &[f64],
    alpha: f64,
    weight: f64,
) -> Result<PairResult> {
    let mut tape = Tape::new();
    let vars = qp.bind(&mut tape);
    let net = model.primal.bind(&mut tape, true);
    let x = tape.constant(Tensor::column(x0));
    let lam = tape.constant(Tensor::column(lambda));
    let traj = primal_forward(&mut tape, &vars, x, lam, &net)?;

    let mut norms_v = Vec::with_capacity(traj.len());
    for &xk in &traj {
        let g = problem::grad_x_lagrangian(&mut tape, &vars, xk, lam)?;
        norms_v.push(tape.l2norm(g));
    }
    let last = *traj.last().expect("nonempty");
    let loss = problem::lagrangian(&mut tape, &vars, last, lam)?;
    let mut objective = loss;
    for (k, &m) in mu.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let prev = tape.scale(norms_v[k], alpha);
        let diff = tape.sub(norms_v[k + 1], prev)?;
        let term = tape.scale(diff, m);
        objective = tape.add(objective, term)?;
    }
    let objective = tape.scale(objective, weight);
    let mut grads = tape.backward(objective, &net.vars())?;
    Ok(PairResult {
        grads: model.primal.gradients_from(&mut grads, &net),
        loss: tape.value(loss).item(),
        norms: norms_v.iter().map(|&v| tape.value(v).item()).collect(),
    })
}

/// One primal update on the instances `batch` (indices into `data`).
///
/// For every instance, `M` multipliers are drawn uniformly from its pool
/// entries and a fresh `x̃_0` is drawn per pair. θ_D is not touched.
pub fn primal_training_step(
    data: &[RelaxedQP],
    batch: &[usize],
    pool: &MultiplierPool,
    state: &mut TrainState,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<StepMetrics> {
    if pool.is_empty() {
        return Err(Error::config("train", "multiplier pool is empty"));
    }
    let mut pairs: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::with_capacity(batch.len() * cfg.batch_multipliers);
    for &j in batch {
        let entries = pool
            .per_instance
            .get(j)
            .filter(|e| !e.is_empty())
            .ok_or_else(|| Error::config("train", format!("no pooled multipliers for instance {j}")))?;
        for _ in 0..cfg.batch_multipliers {
            let lambda = entries[state.rng.random_range(0..entries.len())].clone();
            let x0 = draw_primal_start(&mut state.rng, data[j].n);
            pairs.push((j, x0, lambda));
        }
    }
    let weight = 1.0 / pairs.len() as f64;
    let mu = if cfg.constraints {
        state.meta.mu.clone()
    } else {
        vec![0.0; state.meta.mu.len()]
    };
    let model = &state.model;
    let results = map_ordered(jobs, &pairs, |(j, x0, lambda)| {
        primal_pair(model, &data[*j], x0, lambda, &mu, cfg.alpha, weight)
    })?;

    let k = state.model.dims.k_layers;
    let mut slacks = vec![0.0; k];
    let mut loss = 0.0;
    for r in &results {
        loss += r.loss * weight;
        for (kk, s) in slacks.iter_mut().enumerate() {
            *s += weight * (r.norms[kk + 1] - cfg.alpha * r.norms[kk]);
        }
    }
    let mut grads = sum_params(results.into_iter().map(|r| r.grads).collect())?.expect("nonempty batch");
    clip_grads(&mut grads, cfg.clip);
    apply_update(&mut state.model.primal, &grads, cfg.eps_p, cfg, &mut state.adam_primal)?;
    if cfg.constraints {
        projected_ascent(&mut state.meta.mu, &slacks, cfg.eta_p);
    }
    state.step += 1;
    Ok(StepMetrics { loss, slacks })
}

/// Gradient of the per-instance dual objective
/// `w·(−L(x_L, λ_L) + Σ_l ν_l (‖f(x_l)‖ − β‖f(x_{l−1})‖))` with θ_P frozen.
fn dual_instance(
    model: &Model,
    qp: &RelaxedQP,
    x0s: &[Vec<f64>],
    lambda0: &[f64],
    nu: &[f64],
    beta: f64,
    weight: f64,
) -> Result<PairResult> {
    let mut tape = Tape::new();
    let vars = qp.bind(&mut tape);
    let primal = model.primal.bind(&mut tape, false);
    let dual = model.dual.bind(&mut tape, true);
    let starts: Vec<Var> = x0s.iter().map(|x| tape.constant(Tensor::column(x))).collect();
    let lam0 = tape.constant(Tensor::column(lambda0));
    let traj = coupled_forward(&mut tape, &vars, &primal, &dual, &starts, lam0)?;

    let mut norms_v = Vec::with_capacity(traj.primal_outer.len());
    for &xl in &traj.primal_outer {
        let f = problem::constraint_values(&mut tape, &vars, xl)?;
        norms_v.push(tape.l2norm(f));
    }
    let lag = problem::lagrangian(&mut tape, &vars, traj.x_final(), traj.lambda_final())?;
    let loss = tape.scale(lag, -1.0);
    let mut objective = loss;
    for (l, &v) in nu.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let prev = tape.scale(norms_v[l], beta);
        let diff = tape.sub(norms_v[l + 1], prev)?;
        let term = tape.scale(diff, v);
        objective = tape.add(objective, term)?;
    }
    let objective = tape.scale(objective, weight);
    let mut grads = tape.backward(objective, &dual.vars())?;
    Ok(PairResult {
        grads: model.dual.gradients_from(&mut grads, &dual),
        loss: tape.value(loss).item(),
        norms: norms_v.iter().map(|&v| tape.value(v).item()).collect(),
    })
}

/// One dual update on the instances `batch`; θ_P is frozen.
pub fn dual_training_step(
    data: &[RelaxedQP],
    batch: &[usize],
    state: &mut TrainState,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::config("train", "empty dual batch"));
    }
    let l_layers = state.model.dims.l_layers;
    let draws: Vec<(usize, Vec<Vec<f64>>, Vec<f64>)> = batch
        .iter()
        .map(|&j| {
            let qp = &data[j];
            let x0s = (0..=l_layers).map(|_| draw_primal_start(&mut state.rng, qp.n)).collect();
            (j, x0s, draw_dual_start(&mut state.rng, qp.rows()))
        })
        .collect();
    let weight = 1.0 / draws.len() as f64;
    let nu = if cfg.constraints {
        state.meta.nu.clone()
    } else {
        vec![0.0; state.meta.nu.len()]
    };
    let model = &state.model;
    let results = map_ordered(jobs, &draws, |(j, x0s, l0)| {
        dual_instance(model, &data[*j], x0s, l0, &nu, cfg.beta, weight)
    })?;

    let mut slacks = vec![0.0; l_layers];
    let mut loss = 0.0;
    for r in &results {
        loss += r.loss * weight;
        for (l, s) in slacks.iter_mut().enumerate() {
            *s += weight * (r.norms[l + 1] - cfg.beta * r.norms[l]);
        }
    }
    let mut grads = sum_params(results.into_iter().map(|r| r.grads).collect())?.expect("nonempty batch");
    clip_grads(&mut grads, cfg.clip);
    apply_update(&mut state.model.dual, &grads, cfg.eps_d, cfg, &mut state.adam_dual)?;
    if cfg.constraints {
        projected_ascent(&mut state.meta.nu, &slacks, cfg.eta_d);
    }
    state.step += 1;
    Ok(StepMetrics { loss, slacks })
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub round: usize,
    pub phase: String,
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub mean_slack: f64,
    pub mu_norm: f64,
    pub nu_norm: f64,
    pub wallclock_ms: u64,
}

/// Receives log rows as they are produced and the state at every round
/// boundary.
pub trait TrainObserver {
    fn on_epoch(&mut self, _row: &LogRow) -> Result<()> {
        Ok(())
    }

    fn on_round_end(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

fn shuffled_batches(rng: &mut Rng, count: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn check_finite(value: f64, phase: Phase, state: &TrainState, detail: &str) -> Result<()> {
    if value.is_finite() {
        return Ok(());
    }
    Err(Error::Divergence {
        phase: phase.as_str().into(),
        round: state.round,
        epoch: state.epoch,
        step: state.step as usize,
        detail: format!("{detail} is {value}"),
    })
}

/// Alternating training from `state.round` up to `cfg.rounds`.
///
/// Each round runs the dual epochs with θ_P frozen, rebuilds the multiplier
/// pool from the updated networks, then runs the primal epochs with θ_D
/// frozen. Returns the log rows emitted.
pub fn alternate_train(
    data: &[RelaxedQP],
    cfg: &TrainConfig,
    state: &mut TrainState,
    jobs: usize,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<LogRow>> {
    cfg.validate("train.")?;
    if data.is_empty() {
        return Err(Error::config("train", "training set is empty"));
    }
    let started = Instant::now();
    let mut log = Vec::new();
    let mut emit = |row: LogRow, observer: &mut dyn TrainObserver| -> Result<()> {
        observer.on_epoch(&row)?;
        log.push(row);
        Ok(())
    };
    let wallclock = |cfg: &TrainConfig| {
        if cfg.log_wallclock {
            started.elapsed().as_millis() as u64
        } else {
            0
        }
    };

    while state.round < cfg.rounds {
        if cfg.reset_meta_duals {
            state.meta.mu.fill(0.0);
            state.meta.nu.fill(0.0);
        }

        state.phase = Phase::Dual;
        for epoch in 0..cfg.dual_epochs {
            state.epoch = epoch;
            let batches = shuffled_batches(&mut state.rng, data.len(), cfg.batch_instances);
            let (mut loss, mut slack) = (0.0, 0.0);
            for b in &batches {
                let m = dual_training_step(data, b, state, cfg, jobs)?;
                check_finite(m.loss, Phase::Dual, state, "dual loss")?;
                if !state.model.dual.is_finite() {
                    check_finite(f64::NAN, Phase::Dual, state, "dual parameter")?;
                }
                loss += m.loss / batches.len() as f64;
                slack += m.mean_slack() / batches.len() as f64;
            }
            let row = LogRow {
                round: state.round,
                phase: Phase::Dual.as_str().into(),
                epoch,
                step: state.step,
                loss,
                mean_slack: slack,
                mu_norm: norm(&state.meta.mu),
                nu_norm: norm(&state.meta.nu),
                wallclock_ms: wallclock(cfg),
            };
            emit(row, observer)?;
        }

        let pool = collect_multiplier_pool(&state.model, data, &mut state.rng, jobs)?;

        state.phase = Phase::Primal;
        for epoch in 0..cfg.primal_epochs {
            state.epoch = epoch;
            let batches = shuffled_batches(&mut state.rng, data.len(), cfg.batch_instances);
            let (mut loss, mut slack) = (0.0, 0.0);
            for b in &batches {
                let m = primal_training_step(data, b, &pool, state, cfg, jobs)?;
                check_finite(m.loss, Phase::Primal, state, "primal loss")?;
                if !state.model.primal.is_finite() {
                    check_finite(f64::NAN, Phase::Primal, state, "primal parameter")?;
                }
                loss += m.loss / batches.len() as f64;
                slack += m.mean_slack() / batches.len() as f64;
            }
            let row = LogRow {
                round: state.round,
                phase: Phase::Primal.as_str().into(),
                epoch,
                step: state.step,
                loss,
                mean_slack: slack,
                mu_norm: norm(&state.meta.mu),
                nu_norm: norm(&state.meta.nu),
                wallclock_ms: wallclock(cfg),
            };
            emit(row, observer)?;
        }

        state.round += 1;
        state.epoch = 0;
        state.phase = Phase::Dual;
        observer.on_round_end(state)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::ArchDims;
    use crate::problem::{generate_instance, relax, InstanceDistributionConfig};

    fn dims() -> ArchDims {
        ArchDims {
            k_layers: 2,
            l_layers: 2,
            t_sub: 1,
            k_hops: 1,
            hidden: 4,
            per_node_bias: false,
        }
    }

    fn data(count: u64) -> Vec<RelaxedQP> {
        (0..count)
            .map(|s| relax(&generate_instance(&InstanceDistributionConfig::with_dims(5, 3, 1), s).unwrap()).unwrap())
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            rounds: 1,
            primal_epochs: 1,
            dual_epochs: 1,
            batch_instances: 2,
            batch_multipliers: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn pool_counts_and_signs() {
        let d = data(3);
        let state = TrainState::new(&dims(), (5, 5), 1);
        let pool = collect_multiplier_pool(&state.model, &d, &mut rng_from_seed(2), 1).unwrap();
        assert_eq!(pool.len(), 9);
        assert!(pool.pairs().all(|(_, l)| l.iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn empty_pool_is_a_config_error() {
        let d = data(2);
        let mut state = TrainState::new(&dims(), (5, 5), 1);
        let r = primal_training_step(&d, &[0], &MultiplierPool::default(), &mut state, &small_cfg(), 1);
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn zero_learning_rate_moves_only_mu() {
        let d = data(2);
        let mut state = TrainState::new(&dims(), (5, 5), 3);
        // give the network a non-trivial readout so slacks are nonzero
        for l in &mut state.model.primal.layers {
            l.w = Tensor::filled(4, 1, 0.3);
        }
        let pool = collect_multiplier_pool(&state.model, &d, &mut rng_from_seed(2), 1).unwrap();
        let cfg = TrainConfig {
            eps_p: 0.0,
            eta_p: 10.0,
            ..small_cfg()
        };
        let before = state.model.clone();
        let m = primal_training_step(&d, &[0, 1], &pool, &mut state, &cfg, 1).unwrap();
        assert_eq!(state.model, before);
        let expect: Vec<f64> = m.slacks.iter().map(|s| (10.0 * s).max(0.0)).collect();
        assert_eq!(state.meta.mu, expect);
        assert!(state.meta.mu.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn negative_slack_shrinks_mu_to_zero() {
        let mut mu = vec![0.5, 0.1];
        projected_ascent(&mut mu, &[-1.0, -0.2], 1.0);
        assert_eq!(mu, vec![0.0, 0.0]);
    }

    #[test]
    fn dual_step_freezes_primal_and_reports_l_slacks() {
        let d = data(3);
        let mut state = TrainState::new(&dims(), (5, 5), 4);
        let before = state.model.primal.clone();
        let m = dual_training_step(&d, &[0, 2], &mut state, &small_cfg(), 1).unwrap();
        assert_eq!(state.model.primal, before);
        assert_eq!(m.slacks.len(), dims().l_layers);
    }

    #[test]
    fn frozen_primal_receives_no_gradient() {
        let d = data(1);
        let state = TrainState::new(&dims(), (5, 5), 4);
        let mut tape = Tape::new();
        let vars = d[0].bind(&mut tape);
        let primal = state.model.primal.bind(&mut tape, false);
        let dual = state.model.dual.bind(&mut tape, true);
        let x0 = tape.constant(Tensor::filled(5, 1, 0.2));
        let l0 = tape.constant(Tensor::filled(5, 1, 0.05));
        let traj = coupled_forward(&mut tape, &vars, &primal, &dual, &[x0, x0, x0], l0).unwrap();
        let loss = problem::lagrangian(&mut tape, &vars, traj.x_final(), traj.lambda_final()).unwrap();
        let pv = primal.vars();
        let grads = tape.backward(loss, &pv).unwrap();
        assert!(pv.iter().all(|&v| grads.get(v).unwrap().max_abs() == 0.0));
    }

    #[test]
    fn unconstrained_run_keeps_meta_duals_at_zero() {
        let d = data(4);
        let mut state = TrainState::new(&dims(), (5, 5), 5);
        let cfg = TrainConfig {
            constraints: false,
            eta_p: 1.0,
            eta_d: 1.0,
            ..small_cfg()
        };
        alternate_train(&d, &cfg, &mut state, 1, &mut NoObserver).unwrap();
        assert!(state.meta.mu.iter().chain(&state.meta.nu).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_rounds_is_a_noop() {
        let d = data(2);
        let mut state = TrainState::new(&dims(), (5, 5), 6);
        let before = state.clone();
        let cfg = TrainConfig {
            rounds: 0,
            ..small_cfg()
        };
        let log = alternate_train(&d, &cfg, &mut state, 1, &mut NoObserver).unwrap();
        assert!(log.is_empty());
        assert_eq!(state, before);
    }

    #[test]
    fn first_phase_is_dual() {
        let d = data(2);
        let mut state = TrainState::new(&dims(), (5, 5), 6);
        let log = alternate_train(&d, &small_cfg(), &mut state, 1, &mut NoObserver).unwrap();
        assert_eq!(log[0].phase, "dual");
        assert_eq!(log.last().unwrap().phase, "primal");
    }

    #[test]
    fn parallel_and_serial_steps_agree() {
        let d = data(4);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Adam,
            ..small_cfg()
        };
        let mut a = TrainState::new(&dims(), (5, 5), 7);
        let mut b = a.clone();
        alternate_train(&d, &cfg, &mut a, 1, &mut NoObserver).unwrap();
        alternate_train(&d, &cfg, &mut b, 4, &mut NoObserver).unwrap();
        assert_eq!(a, b);
    }
}
