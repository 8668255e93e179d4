//! Training loop: seeded batching, AdamW with decoupled weight decay,
//! global-norm gradient clipping, a stepped learning-rate schedule, and
//! per-step loss instrumentation with two-phase analysis.
//!
//! Determinism contract: given the same corpus, model seed, and config, the
//! run produces bit-identical parameters and curve logs, including across a
//! checkpoint/resume boundary. Every random stream (batch shuffle, per-
//! sample dropout) derives from (seed, structural indices), never from
//! global state, so step `t` is reproducible in isolation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::checkpoint;
use crate::corpus::GroundingSample;
use crate::error::{Error, Result};
use crate::loss::{sample_loss, LossWeights};
use crate::model::{GroundingModel, Mode, ModelConfig, SampleView};
use crate::params::ParamStore;
use crate::rng::stream_seed;
use crate::tensor::{Graph, Tensor};

/// Stream-seed domain tags; distinct per use so streams never alias.
const TAG_SHUFFLE: u64 = 0x5348_5546_464c_4531;
const TAG_DROPOUT: u64 = 0x4452_4f50_4f55_5431;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    /// Step at which the rate drops by `lr_drop_factor`; `None` means 70%
    /// of `total_steps`.
    pub lr_drop_step: Option<usize>,
    pub lr_drop_factor: f64,
    /// Interpolate the rate linearly down to `lr * lr_drop_factor` instead
    /// of a single step drop.
    pub lr_linear_decay: bool,
    pub weights: LossWeights,
    /// Checkpoint cadence in steps for callers that persist progress;
    /// 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_steps: 5000,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 0.1,
            lr_drop_step: None,
            lr_drop_factor: 0.1,
            lr_linear_decay: false,
            weights: LossWeights::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.total_steps == 0 || self.batch_size == 0 {
            return fail("total_steps and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay > 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay {} must be positive", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!("betas ({}, {}) must be in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.grad_clip_norm > 0.0) {
            return fail(format!("grad_clip_norm {} must be positive", self.grad_clip_norm));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return fail(format!("lr_drop_factor {} must be in (0, 1]", self.lr_drop_factor));
        }
        if let Some(drop) = self.lr_drop_step {
            if drop > self.total_steps {
                return fail(format!(
                    "lr_drop_step {drop} exceeds total_steps {}",
                    self.total_steps
                ));
            }
        }
        Ok(())
    }

    pub fn drop_step(&self) -> usize {
        self.lr_drop_step
            .unwrap_or((0.7 * self.total_steps as f64).round() as usize)
    }

    /// Learning rate at `step`: two plateaus by default, a linear slide to
    /// `lr * lr_drop_factor` when `lr_linear_decay` is set.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.lr_linear_decay {
            let frac = step as f64 / self.total_steps as f64;
            self.lr * (1.0 - (1.0 - self.lr_drop_factor) * frac)
        } else if step >= self.drop_step() {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

/// One optimization step's observables. The loss columns are batch means of
/// the last decoder layer's terms; `grad_norm` is the pre-clip global norm
/// (NaN when the step was skipped before clipping).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub l1: f64,
    pub giou: f64,
    pub set_guidance: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

impl StepLog {
    pub fn csv_header() -> &'static str {
        "step,lr,l1,giou,set_guidance,total,grad_norm"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.lr, self.l1, self.giou, self.set_guidance, self.total, self.grad_norm
        )
    }
}

/// First and second moment estimates, one pair per parameter in
/// registration order.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { m, v, t: 0 }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }
}

/// Scales all gradients so the global norm is at most `max_norm`; returns
/// the pre-clip norm. Non-finite norms are left untouched for the caller's
/// skip logic.
pub fn clip_global_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.global_grad_norm();
    if norm.is_finite() && norm > max_norm {
        params.scale_grads(max_norm / norm);
    }
    norm
}

/// One AdamW update from the gradients currently stored in `params`.
/// Returns false (and changes nothing) when any gradient is non-finite.
///
/// Update, decoupled decay included, both terms from the pre-update value:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
pub fn adamw_step(params: &mut ParamStore, state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> bool {
    if params.any_nonfinite_grad() {
        return false;
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, (_, tensor)) in params.iter_mut().enumerate() {
        let grad = tensor.grad.take().unwrap_or_else(|| vec![0.0; tensor.len()]);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = tensor.data_mut();
        for j in 0..data.len() {
            let g = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + cfg.weight_decay * data[j]);
        }
    }
    true
}

/// Everything needed to restart a run exactly where it stopped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub next_step: u64,
    pub adam_t: u64,
    pub loss_nan_streak: u32,
    pub skipped_steps: u64,
}

pub struct Trainer {
    model: GroundingModel,
    cfg: TrainConfig,
    opt: AdamState,
    corpus: Vec<GroundingSample>,
    next_step: usize,
    loss_nan_streak: u32,
    pub skipped_steps: u64,
}

/// Consecutive non-finite losses tolerated before aborting.
const DIVERGENCE_LIMIT: u32 = 10;

impl Trainer {
    pub fn new(model: GroundingModel, corpus: Vec<GroundingSample>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let mc = model.config();
        for s in &corpus {
            if s.k() > mc.max_queries {
                return Err(Error::Config(format!(
                    "sample {} has {} queries, model supports {}",
                    s.sample_id,
                    s.k(),
                    mc.max_queries
                )));
            }
            if s.frames.len() != mc.frame_count * mc.d_in {
                return Err(Error::Config(format!(
                    "sample {} frame shape does not match the model",
                    s.sample_id
                )));
            }
        }
        let opt = AdamState::new(&model.params);
        Ok(Self {
            model,
            cfg,
            opt,
            corpus,
            next_step: 0,
            loss_nan_streak: 0,
            skipped_steps: 0,
        })
    }

    pub fn model(&self) -> &GroundingModel {
        &self.model
    }

    pub fn into_model(self) -> GroundingModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn next_step(&self) -> usize {
        self.next_step
    }

    pub fn is_done(&self) -> bool {
        self.next_step >= self.cfg.total_steps
    }

    /// Rebudgets a resumed run. The schedule re-derives from the new total,
    /// so an extended run keeps any explicit `lr_drop_step` but moves a
    /// fractional one.
    pub fn set_total_steps(&mut self, total: usize) -> Result<()> {
        if total < self.next_step {
            return Err(Error::Config(format!(
                "total_steps {total} is behind the run, already at step {}",
                self.next_step
            )));
        }
        let prev = self.cfg.total_steps;
        self.cfg.total_steps = total;
        self.cfg.validate().inspect_err(|_| {
            self.cfg.total_steps = prev;
        })
    }

    /// Checkpoint cadence in steps; 0 disables. Persistence itself is the
    /// caller's job, this only keeps the stored config honest.
    pub fn set_checkpoint_every(&mut self, every: usize) {
        self.cfg.checkpoint_every = every;
    }

    /// Batch membership for `step`: a contiguous window of the per-epoch
    /// shuffles, so every epoch visits each sample once and any step can be
    /// reconstructed without replaying earlier ones.
    fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.corpus.len();
        let b = self.cfg.batch_size;
        let mut out = Vec::with_capacity(b);
        let mut perm: Vec<usize> = Vec::new();
        let mut perm_epoch = usize::MAX;
        for slot in 0..b {
            let pos = step * b + slot;
            let (epoch, offset) = (pos / n, pos % n);
            if epoch != perm_epoch {
                perm = (0..n).collect();
                let mut rng = ChaCha20Rng::seed_from_u64(stream_seed(&[
                    self.cfg.seed,
                    TAG_SHUFFLE,
                    epoch as u64,
                ]));
                perm.shuffle(&mut rng);
                perm_epoch = epoch;
            }
            out.push(perm[offset]);
        }
        out
    }

    pub fn step(&mut self) -> Result<StepLog> {
        if self.is_done() {
            return Err(Error::Config("training already complete".into()));
        }
        let step = self.next_step;
        let ids = self.batch_indices(step);
        let mut batch: Vec<&GroundingSample> = ids.iter().map(|&i| &self.corpus[i]).collect();
        batch.sort_by_key(|s| s.sample_id);
        let log = step_on(
            &mut self.model,
            &mut self.opt,
            &self.cfg,
            step,
            &batch,
            &mut self.loss_nan_streak,
            &mut self.skipped_steps,
        )?;
        self.next_step += 1;
        Ok(log)
    }

    /// Runs the remaining steps, collecting the full curve log.
    pub fn run_to_end(&mut self) -> Result<Vec<StepLog>> {
        let mut logs = Vec::with_capacity(self.cfg.total_steps - self.next_step);
        while !self.is_done() {
            logs.push(self.step()?);
        }
        Ok(logs)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = TrainCheckpointMeta {
            model: self.model.config().clone(),
            train: self.cfg.clone(),
            next_step: self.next_step as u64,
            adam_t: self.opt.t,
            loss_nan_streak: self.loss_nan_streak,
            skipped_steps: self.skipped_steps,
        };
        let moments: Vec<(String, Tensor)> = self
            .model
            .params
            .iter()
            .enumerate()
            .flat_map(|(i, (name, t))| {
                let (r, c) = t.shape();
                [
                    (
                        format!("opt.m.{name}"),
                        Tensor::from_vec(r, c, self.opt.m[i].clone()).expect("moment shape"),
                    ),
                    (
                        format!("opt.v.{name}"),
                        Tensor::from_vec(r, c, self.opt.v[i].clone()).expect("moment shape"),
                    ),
                ]
            })
            .collect();
        let mut tensors: Vec<(&str, &Tensor)> = self
            .model
            .params
            .iter()
            .map(|(name, t)| (name, t))
            .collect();
        tensors.extend(moments.iter().map(|(n, t)| (n.as_str(), t)));
        checkpoint::save(path, &meta, &tensors)
    }

    /// Rebuilds a trainer mid-run. The caller supplies the same corpus the
    /// original run used; subsequent steps replay exactly.
    pub fn resume(path: &Path, corpus: Vec<GroundingSample>) -> Result<Self> {
        let (meta, model) = load_model(path)?;
        let mut trainer = Trainer::new(model, corpus, meta.train.clone())?;
        let named: std::collections::HashMap<String, Tensor> = {
            let (_, tensors) = checkpoint::load::<TrainCheckpointMeta>(path)?;
            tensors.into_iter().collect()
        };
        for (i, (name, t)) in trainer.model.params.iter().enumerate() {
            for (prefix, dst) in [("opt.m", &mut trainer.opt.m), ("opt.v", &mut trainer.opt.v)] {
                let key = format!("{prefix}.{name}");
                let src = named
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
                if src.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("{key}: shape mismatch")));
                }
                dst[i].copy_from_slice(src.data());
            }
        }
        trainer.opt.t = meta.adam_t;
        trainer.next_step = meta.next_step as usize;
        trainer.loss_nan_streak = meta.loss_nan_streak;
        trainer.skipped_steps = meta.skipped_steps;
        Ok(trainer)
    }
}

/// Loads the model (without optimizer state) from a training checkpoint.
pub fn load_model(path: &Path) -> Result<(TrainCheckpointMeta, GroundingModel)> {
    let (meta, tensors) = checkpoint::load::<TrainCheckpointMeta>(path)?;
    let mut model = GroundingModel::new(meta.model.clone())?;
    checkpoint::load_into(&mut model.params, &tensors)?;
    Ok((meta, model))
}

#[allow(clippy::too_many_arguments)]
fn step_on(
    model: &mut GroundingModel,
    opt: &mut AdamState,
    cfg: &TrainConfig,
    step: usize,
    batch: &[&GroundingSample],
    loss_nan_streak: &mut u32,
    skipped_steps: &mut u64,
) -> Result<StepLog> {
    let lr = cfg.lr_at(step);
    let mut sorted: Vec<&GroundingSample> = batch.to_vec();
    sorted.sort_by_key(|s| s.sample_id);
    let k_pad = sorted.iter().map(|s| s.k()).max().expect("nonempty batch");
    let d_in = model.config().d_in;

    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let mut losses = Vec::with_capacity(sorted.len());
    let mut forward_broke = false;
    let (mut l1, mut giou, mut sg, mut total) = (0.0, 0.0, 0.0, 0.0);
    for s in &sorted {
        // Co-pad to the batch-wide query count; masking keeps the padded
        // slots invisible, so this only aligns shapes across the batch.
        let mut padded;
        let queries: &[f64] = if s.k() < k_pad {
            padded = s.queries.clone();
            padded.resize(k_pad * d_in, 0.0);
            &padded
        } else {
            &s.queries
        };
        let view = SampleView {
            frames: &s.frames,
            queries,
            k_real: s.k(),
            k_padded: k_pad,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(stream_seed(&[
            cfg.seed,
            TAG_DROPOUT,
            step as u64,
            s.sample_id,
        ]));
        let mut mode = Mode::Train { rng: &mut rng };
        let fp = model.forward(&mut g, &bound, &view, &mut mode)?;
        // A non-finite forward cannot be matched or logged; count it
        // against the divergence budget like a non-finite loss.
        let finite = fp.layers.iter().all(|lo| {
            g.value(lo.spans).iter().all(|v| v.is_finite())
                && g.value(lo.corr).iter().all(|v| v.is_finite())
        });
        if !finite {
            forward_broke = true;
            break;
        }
        let sl = sample_loss(&mut g, &fp, &s.spans, &cfg.weights)?;
        l1 += sl.breakdown.l1;
        giou += sl.breakdown.giou;
        sg += sl.breakdown.set_guidance;
        total += sl.breakdown.total;
        losses.push(sl.loss);
    }
    let b = sorted.len() as f64;
    let mut log = StepLog {
        step,
        lr,
        l1: l1 / b,
        giou: giou / b,
        set_guidance: sg / b,
        total: total / b,
        grad_norm: f64::NAN,
        skipped: true,
    };

    let objective = if forward_broke {
        None
    } else {
        let mut sum = losses[0];
        for &l in &losses[1..] {
            sum = g.add(sum, l)?;
        }
        let mean = g.scale(sum, 1.0 / b);
        g.scalar_value(mean).is_finite().then_some(mean)
    };
    let Some(objective) = objective else {
        log.l1 = f64::NAN;
        log.giou = f64::NAN;
        log.set_guidance = f64::NAN;
        log.total = f64::NAN;
        *loss_nan_streak += 1;
        *skipped_steps += 1;
        if *loss_nan_streak >= DIVERGENCE_LIMIT {
            return Err(Error::Diverged(format!(
                "loss non-finite for {DIVERGENCE_LIMIT} consecutive steps, last at step {step}"
            )));
        }
        return Ok(log);
    };
    *loss_nan_streak = 0;

    model.params.zero_grads();
    g.backward(objective)?;
    for ((_, t), &id) in model.params.iter_mut().zip(&bound.leaf_ids) {
        if let Some(grad) = g.grad(id) {
            t.accumulate_grad(grad);
        }
    }
    log.grad_norm = clip_global_norm(&mut model.params, cfg.grad_clip_norm);
    let applied = adamw_step(&mut model.params, opt, lr, cfg);
    if applied {
        log.skipped = false;
    } else {
        *skipped_steps += 1;
    }
    model.params.zero_grads();
    Ok(log)
}

/// Two-phase training analysis over a curve log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    /// Center of the steepest smoothed set-guidance decline.
    pub sg_drop_step: usize,
    /// Relative decline over the 5%-of-steps window at the drop.
    pub sg_drop_fraction: f64,
    /// Whether the combined span terms rose near the drop.
    pub span_rebound: bool,
    /// Largest positive smoothed l1+giou delta over a 2%-of-steps window
    /// within 5% of the drop.
    pub span_rebound_delta: f64,
}

fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for i in 0..series.len() {
        sum += series[i];
        if i >= w {
            sum -= series[i - w];
        }
        out.push(sum / (i.min(w - 1) + 1) as f64);
    }
    out
}

/// Locates the explore-to-match transition: the window of steepest relative
/// set-guidance decline and any transient rise of the span terms around it.
/// `None` when the log is too short to host the windows.
pub fn analyze_phases(logs: &[StepLog]) -> Option<PhaseReport> {
    let len = logs.len();
    let w5 = ((len as f64 * 0.05).round() as usize).max(1);
    let w2 = ((len as f64 * 0.02).round() as usize).max(1);
    if len < w5 + 2 || len < 20 {
        return None;
    }
    let smooth_w = (len / 100).max(1);
    let sg: Vec<f64> = logs.iter().map(|l| l.set_guidance).collect();
    let span: Vec<f64> = logs.iter().map(|l| l.l1 + l.giou).collect();
    let sg_s = moving_average(&sg, smooth_w);
    let span_s = moving_average(&span, smooth_w);

    let mut drop_at = 0;
    let mut drop_frac = f64::NEG_INFINITY;
    for s in 0..len - w5 {
        let frac = (sg_s[s] - sg_s[s + w5]) / sg_s[s].max(1e-12);
        if frac > drop_frac {
            drop_frac = frac;
            drop_at = s;
        }
    }
    let center = drop_at + w5 / 2;

    let lo = center.saturating_sub(w5);
    let hi = (center + w5).min(len - 1);
    let mut rebound = f64::NEG_INFINITY;
    for t in lo..=hi.saturating_sub(w2) {
        rebound = rebound.max(span_s[t + w2] - span_s[t]);
    }
    if !rebound.is_finite() {
        rebound = 0.0;
    }
    Some(PhaseReport {
        sg_drop_step: logs[center].step,
        sg_drop_fraction: drop_frac,
        span_rebound: rebound > 0.0,
        span_rebound_delta: rebound,
    })
}
