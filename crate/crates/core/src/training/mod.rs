//! Behaviour cloning from a shortest-path oracle, multi-exit loss, Adam,
//! the two training stages and threshold calibration.

mod backward;
mod gradcheck;

pub use backward::{backward, BatchStats};
pub use gradcheck::{finite_difference_check, GroupCheck};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{numerical, structural, Result};
use crate::model::{MultiExitModel, Prepared, TrainPhase};
use crate::navsim::{
    observe, region_distances, sample_episodes, step, sweep_tau, Action, AgentState, Decision, GridMap, Metrics, NavConfig,
    Observation, Policy, Pos, SweepTable, EpisodeSpec,
};
use crate::numerics::{Rng, Scalar};

/// Probabilities are clamped here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

pub(crate) fn cross_entropy(p_gt: f64) -> f64 {
    -p_gt.max(PROB_FLOOR).ln()
}

/// One labelled observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub obs: Observation,
    pub action: Action,
}

/// Default exit weights `α_k = 1 − 0.5 (k − 1)/(K − 1)`, from 1.0 at the
/// shallowest head down to 0.5 at the deepest.
pub fn exit_alphas(k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => (0..k).map(|i| 1.0 - 0.5 * i as f64 / (k - 1) as f64).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub exits: Vec<f64>,
    pub final_loss: f64,
}

/// `CE(final) + Σ_k α_k CE(exit_k)` for one sample.
pub fn multi_exit_loss<F: Scalar>(
    exit_probs: &[crate::numerics::ProbVector<F>],
    final_probs: &crate::numerics::ProbVector<F>,
    gt: Action,
    alphas: &[f64],
) -> Result<LossBreakdown> {
    if exit_probs.len() != alphas.len() {
        return Err(structural(format!("{} exit weights for {} exits", alphas.len(), exit_probs.len())));
    }
    let ce = |p: &crate::numerics::ProbVector<F>| -> Result<f64> {
        let v = p
            .as_slice()
            .get(gt.index())
            .ok_or_else(|| structural("label outside the action set"))?;
        Ok(cross_entropy(v.as_f64()))
    };
    let exits = exit_probs.iter().map(ce).collect::<Result<Vec<_>>>()?;
    let final_loss = ce(final_probs)?;
    let total = final_loss + exits.iter().zip(alphas).map(|(l, a)| l * a).sum::<f64>();
    Ok(LossBreakdown { total, exits, final_loss })
}

/// Shortest-path expert: STOP inside the goal region, otherwise the first of
/// FORWARD, LEFT, RIGHT that faces a cell closer to the region; LEFT when
/// only the cell behind is closer.
pub fn oracle_action(map: &GridMap, state: &AgentState, field: &[Option<u32>], radius: usize) -> Action {
    if state.position.chebyshev(state.goal) <= radius {
        return Action::Stop;
    }
    let here = map.distance_at(field, state.position).unwrap_or(u32::MAX);
    let closer = |heading: crate::navsim::Heading| {
        let (dx, dy) = heading.forward();
        state
            .position
            .offset(dx, dy)
            .filter(|&p| map.is_free(p))
            .and_then(|p| map.distance_at(field, p))
            .is_some_and(|d| d < here)
    };
    if closer(state.heading) {
        Action::Forward
    } else if closer(state.heading.turn_left()) {
        Action::Left
    } else if closer(state.heading.turn_right()) {
        Action::Right
    } else {
        Action::Left
    }
}

/// The oracle as a [`Policy`], caching the distance field per goal.
#[derive(Default)]
pub struct OraclePolicy {
    pub success_radius: usize,
    cache: Option<((usize, Pos), Vec<Option<u32>>)>,
}

impl OraclePolicy {
    pub fn new(success_radius: usize) -> Self {
        Self {
            success_radius,
            cache: None,
        }
    }

    fn field(&mut self, map: &GridMap, goal: Pos) -> &[Option<u32>] {
        let key = (std::ptr::from_ref(map) as usize, goal);
        if self.cache.as_ref().map(|(k, _)| *k) != Some(key) {
            self.cache = Some((key, region_distances(map, goal, self.success_radius)));
        }
        &self.cache.as_ref().expect("just filled").1
    }
}

impl Policy for OraclePolicy {
    fn act(&mut self, map: &GridMap, state: &AgentState, _: &Observation) -> Result<Decision> {
        let radius = self.success_radius;
        let field = self.field(map, state.goal);
        Ok(Decision {
            action: oracle_action(map, state, field, radius),
            trace: None,
        })
    }
}

/// Oracle rollouts on random episodes until at least `n_samples` labelled
/// steps exist. With probability `explore_prob` a step executes a random
/// movement action instead of the oracle's, so the data also covers
/// recovery from off-path states; labels are always the oracle's.
pub fn generate_dataset(
    maps: &[GridMap],
    map_ids: &[usize],
    n_samples: usize,
    nav: &NavConfig,
    explore_prob: f64,
    rng: &mut Rng,
) -> Result<Vec<Sample>> {
    if n_samples == 0 {
        return Err(structural("n_samples must be at least 1"));
    }
    if !(0.0..1.0).contains(&explore_prob) {
        return Err(structural("explore_prob must lie in [0, 1)"));
    }
    let mut out = Vec::with_capacity(n_samples + nav.max_steps);
    while out.len() < n_samples {
        let spec = sample_episodes(maps, map_ids, 1, nav.success_radius, rng)?[0];
        let map = &maps[spec.map];
        let field = region_distances(map, spec.goal, nav.success_radius);
        let mut state = AgentState::new(spec.start, spec.heading, spec.goal);
        while state.steps_taken < nav.max_steps {
            let obs = observe(map, &state, nav.window_size)?;
            let label = oracle_action(map, &state, &field, nav.success_radius);
            out.push(Sample { obs, action: label });
            let taken = if label != Action::Stop && rng.next_f64() < explore_prob {
                Action::ALL[rng.below(3)]
            } else {
                label
            };
            state = step(map, &state, taken)?;
            if state.stopped {
                break;
            }
        }
    }
    Ok(out)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<F: Scalar>(&mut self, params: &mut [(String, &mut [F])], grads: &[(String, &[F])]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.1.len() != g.1.len()) {
            return Err(structural("parameter and gradient lists differ"));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, ((_, p), (_, g))) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                let gj = g[j].as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                p[j] = F::of(p[j].as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut [(String, &mut [F])], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = F::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub samples: usize,
    pub val_samples: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub finetune_lr: f64,
    pub clip_norm: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Exit-loss weights; defaults to [`exit_alphas`].
    pub exit_alphas: Option<Vec<f64>>,
    /// Train exit heads jointly with the backbone during pretraining.
    pub pretrain_exit_heads: bool,
    pub explore_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            samples: 2400,
            val_samples: 400,
            batch_size: 32,
            lr: 1e-3,
            finetune_lr: 1e-3,
            clip_norm: 1.0,
            pretrain_epochs: 10,
            finetune_epochs: 5,
            exit_alphas: None,
            pretrain_exit_heads: true,
            explore_prob: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn alphas(&self, exits: usize) -> Result<Vec<f64>> {
        match &self.exit_alphas {
            Some(a) if a.len() != exits => Err(structural(format!("{} exit_alphas for {exits} exit heads", a.len()))),
            Some(a) => Ok(a.clone()),
            None => Ok(exit_alphas(exits)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.samples == 0 {
            return Err(structural("batch_size and samples must be positive"));
        }
        if !(self.lr > 0.0 && self.finetune_lr > 0.0 && self.clip_norm > 0.0) {
            return Err(structural("learning rates and clip_norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Loss and per-head accuracy for one epoch on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub acc_exits: Vec<f64>,
    pub acc_final: f64,
}

impl EpochLog {
    fn from_stats(epoch: usize, split: Split, s: &BatchStats) -> Self {
        let n = s.count.max(1) as f64;
        Self {
            epoch,
            split,
            loss: s.loss_sum / n,
            acc_exits: s.exit_correct.iter().map(|&c| c as f64 / n).collect(),
            acc_final: s.final_correct as f64 / n,
        }
    }
}

/// `epoch,split,loss,acc_exit_<l>…,acc_final` for the given exit layers.
pub fn training_csv(exit_layers: &[usize], logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,split,loss");
    for l in exit_layers {
        let _ = write!(out, ",acc_exit_{l}");
    }
    out.push_str(",acc_final\n");
    for log in logs {
        let _ = write!(out, "{},{},{:.6}", log.epoch, log.split.name(), log.loss);
        for a in &log.acc_exits {
            let _ = write!(out, ",{a:.6}");
        }
        let _ = writeln!(out, ",{:.6}", log.acc_final);
    }
    out
}

/// Forward-only loss and accuracy over a sample set.
pub fn evaluate_dataset<F: Scalar>(model: &MultiExitModel<F>, samples: &[Sample], alphas: &[f64]) -> Result<BatchStats> {
    let prepared = model.prepare()?;
    let mut stats = BatchStats {
        exit_correct: vec![0; model.config.exit_layers.len()],
        ..BatchStats::default()
    };
    for s in samples {
        let out = prepared.forward_full(&s.obs)?;
        let loss = multi_exit_loss(&out.exit_probs, &out.final_probs, s.action, alphas)?;
        stats.loss_sum += loss.total;
        for (e, p) in out.exit_probs.iter().enumerate() {
            if crate::model::argmax_action(p)? == s.action {
                stats.exit_correct[e] += 1;
            }
        }
        if crate::model::argmax_action(&out.final_probs)? == s.action {
            stats.final_correct += 1;
        }
        stats.count += 1;
    }
    Ok(stats)
}

/// Shuffled mini-batch training of the parameters selected by `phase`.
/// Logs one train row (running statistics) and, when `val` is non-empty,
/// one validation row per epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs<F: Scalar>(
    model: &mut MultiExitModel<F>,
    phase: TrainPhase,
    train: &[Sample],
    val: &[Sample],
    epochs: usize,
    lr: f64,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<EpochLog>> {
    model.check_phase(phase)?;
    cfg.validate()?;
    if train.is_empty() {
        return Err(structural("empty training set"));
    }
    let exits = model.config.exit_layers.len();
    let report_alphas = cfg.alphas(exits)?;
    let loss_alphas = match phase {
        TrainPhase::Pretrain { exit_heads: false } => vec![0.0; exits],
        _ => report_alphas.clone(),
    };
    let mut adam = Adam::new(lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::new();
    for epoch in 1..=epochs {
        rng.shuffle(&mut order);
        let mut running = BatchStats::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (mut grads, stats) = backward(model, &batch, &loss_alphas)?;
            if !stats.loss_sum.is_finite() {
                return Err(numerical(format!("non-finite loss in epoch {epoch}")));
            }
            running.merge(&stats);
            let mut g = grads.param_tensors_mut(phase);
            let norm = clip_global_norm(&mut g, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(numerical(format!("non-finite gradient norm in epoch {epoch}")));
            }
            let g: Vec<(String, &[F])> = g.into_iter().map(|(n, t)| (n, &*t)).collect();
            adam.step(&mut model.param_tensors_mut(phase), &g)?;
        }
        logs.push(EpochLog::from_stats(epoch, Split::Train, &running));
        if !val.is_empty() {
            let stats = evaluate_dataset(model, val, &report_alphas)?;
            logs.push(EpochLog::from_stats(epoch, Split::Val, &stats));
        }
    }
    Ok(logs)
}

/// Full-precision behaviour cloning of the whole model.
pub fn pretrain_backbone<F: Scalar>(
    model: &mut MultiExitModel<F>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<EpochLog>> {
    let phase = TrainPhase::Pretrain {
        exit_heads: cfg.pretrain_exit_heads,
    };
    train_epochs(model, phase, train, val, cfg.pretrain_epochs, cfg.lr, cfg, rng)
}

/// Adapter, head and embedder training on top of frozen quantized weights.
pub fn finetune_qlora<F: Scalar>(
    model: &mut MultiExitModel<F>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<EpochLog>> {
    train_epochs(model, TrainPhase::Finetune, train, val, cfg.finetune_epochs, cfg.finetune_lr, cfg, rng)
}

/// Outcome of threshold calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub tau: f64,
    pub score: f64,
    pub full_depth: Metrics,
    pub table: SweepTable,
}

/// Harmonic mean of the latency saving `1 − proxy/proxy_full` and the
/// retained success `SR/SR_full`, each clamped to `[0, 1]`. When the full
/// model never succeeds, success retention counts as complete.
pub fn calibration_score(full: &Metrics, m: &Metrics) -> f64 {
    let lat = (1.0 - m.latency_proxy / full.latency_proxy).clamp(0.0, 1.0);
    let sr = if full.sr > 0.0 { (m.sr / full.sr).clamp(0.0, 1.0) } else { 1.0 };
    if lat + sr == 0.0 {
        0.0
    } else {
        2.0 * lat * sr / (lat + sr)
    }
}

/// Grid point with the best score; ties go to the smaller threshold.
pub fn select_tau(full: &Metrics, table: &SweepTable) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for (tau, m) in &table.rows {
        let s = calibration_score(full, m);
        let better = match best {
            None => true,
            Some((bt, bs)) => s > bs || (s == bs && *tau < bt),
        };
        if better {
            best = Some((*tau, s));
        }
    }
    best.ok_or_else(|| structural("empty threshold grid"))
}

/// Sweeps `grid` on calibration episodes and picks the threshold that best
/// trades compute against success.
pub fn calibrate_tau<F: Scalar>(
    prepared: &Prepared<F>,
    maps: &[GridMap],
    episodes: &[EpisodeSpec],
    grid: &[f64],
    nav: &NavConfig,
) -> Result<Calibration> {
    let full_depth = crate::navsim::evaluate(prepared, maps, episodes, -1.0, nav)?;
    let table = sweep_tau(prepared, maps, episodes, grid, nav)?;
    let (tau, score) = select_tau(&full_depth, &table)?;
    Ok(Calibration {
        tau,
        score,
        full_depth,
        table,
    })
}
