//! The optimization procedure: momentum SGD with weight decay and an
//! exponential learning-rate schedule, per-frame gradient gain for the LSTM,
//! and single-frame to multi-frame network expansion.

use crate::data::{Dataset, Split};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec};
use crate::params::ParamSet;
use crate::rng::substream_indexed;
use indexmap::IndexMap;
use rayon::prelude::*;

pub type GradMap = IndexMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplies the learning rate once per decay interval.
    pub lr_decay_factor: f64,
    pub decay_interval_steps: usize,
    /// Scale the learning rate by the frame count for LSTM models.
    pub lstm_lr_scale_by_frames: bool,
}

impl Default for OptimizerConfig {
    /// Full-scale reference values: lr 1e-5, momentum 0.9, weight decay
    /// 0.0005, lr scaled by N frames for the LSTM, decay 0.95 per 1000 steps.
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 1e-5,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_factor: 0.95,
            decay_interval_steps: 1000,
            lstm_lr_scale_by_frames: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Parameter(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Parameter(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Parameter(format!(
                "lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.decay_interval_steps == 0 {
            return Err(Error::Parameter("decay_interval_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub params: ParamSet,
    pub velocity: IndexMap<String, Vec<f64>>,
    /// Base seed; all training randomness is derived per (seed, tag, index),
    /// so resuming from (params, velocity, step) is exact.
    pub seed: u64,
    /// Frame-count factor on the learning rate (1 for non-LSTM models).
    pub lr_frame_scale: f64,
    pub current_lr: f64,
}

impl TrainState {
    pub fn new(params: ParamSet, seed: u64, lr_frame_scale: f64, cfg: &OptimizerConfig) -> TrainState {
        let velocity = params
            .iter()
            .map(|(name, t)| (name.clone(), vec![0.0; t.numel()]))
            .collect();
        let mut state = TrainState {
            step: 0,
            params,
            velocity,
            seed,
            lr_frame_scale,
            current_lr: 0.0,
        };
        state.current_lr = effective_lr(cfg, state.lr_frame_scale, 0);
        state
    }
}

/// base_lr (x N when configured) times factor^floor(step / interval).
pub fn effective_lr(cfg: &OptimizerConfig, frame_scale: f64, step: usize) -> f64 {
    cfg.base_lr
        * frame_scale
        * cfg.lr_decay_factor.powi((step / cfg.decay_interval_steps) as i32)
}

/// Collect accumulated gradients of every trainable parameter; parameters the
/// loss never touched contribute zeros.
pub fn collect_grads(params: &ParamSet) -> GradMap {
    params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(name, t)| {
            let g = t
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            (name.clone(), g)
        })
        .collect()
}

/// One momentum-SGD update: v <- momentum v - lr (g + wd w); w <- w + v.
/// The step counter advances and the learning rate is recomputed.
pub fn sgd_momentum_step(state: &mut TrainState, grads: &GradMap, cfg: &OptimizerConfig) -> Result<()> {
    cfg.validate()?;
    let lr = effective_lr(cfg, state.lr_frame_scale, state.step);
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
        let t = state
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
        if g.len() != t.numel() {
            return Err(Error::Dimension(format!(
                "gradient for {name} has {} values, parameter has {}",
                g.len(),
                t.numel()
            )));
        }
        let v = state.velocity.get_mut(name).expect("velocity mirrors params");
        let w = t.data_mut();
        for i in 0..w.len() {
            v[i] = cfg.momentum * v[i] - lr * (g[i] + cfg.weight_decay * w[i]);
            w[i] += v[i];
        }
    }
    state.step += 1;
    state.current_lr = effective_lr(cfg, state.lr_frame_scale, state.step);
    Ok(())
}

/// Per-frame gradient gain, linearly interpolated from 0 to 1: g_t = t/(T-1),
/// with the T = 1 degenerate case carrying full weight.
pub fn gain_schedule(t: usize) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::Parameter("gain_schedule: T must be >= 1".into()));
    }
    if t == 1 {
        return Ok(vec![1.0]);
    }
    Ok((0..t).map(|i| i as f64 / (t - 1) as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainKind {
    /// Linear 0..1 over frames (the reported best).
    Linear,
    /// g = 1 at every step.
    Constant,
    /// g = 1 only at the last step.
    LastOnly,
}

impl GainKind {
    pub fn schedule(&self, t: usize) -> Result<Vec<f64>> {
        match self {
            GainKind::Linear => gain_schedule(t),
            GainKind::Constant => {
                if t == 0 {
                    return Err(Error::Parameter("gain schedule: T must be >= 1".into()));
                }
                Ok(vec![1.0; t])
            }
            GainKind::LastOnly => {
                if t == 0 {
                    return Err(Error::Parameter("gain schedule: T must be >= 1".into()));
                }
                let mut g = vec![0.0; t];
                g[t - 1] = 1.0;
                Ok(g)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GainKind::Linear => "linear",
            GainKind::Constant => "constant",
            GainKind::LastOnly => "last_only",
        }
    }

    pub fn parse(s: &str) -> Result<GainKind> {
        match s {
            "linear" => Ok(GainKind::Linear),
            "constant" => Ok(GainKind::Constant),
            "last_only" => Ok(GainKind::LastOnly),
            other => Err(Error::Parameter(format!(
                "unknown gain schedule {other:?}; expected linear, constant or last_only"
            ))),
        }
    }
}

/// Initialize a `target_frames` model from a smaller-frame model's
/// parameters. Shared encoder/FC/LSTM parameters copy verbatim (the temporal
/// max carries no parameters). Local Pooling's concat softmax is expanded by
/// tiling the source window blocks across the new windows, rescaled by the
/// window-count ratio so constant-in-time outputs are preserved.
pub fn expand_network(
    src_spec: &ModelSpec,
    src_params: &ParamSet,
    target_frames: usize,
) -> Result<(ModelSpec, ParamSet)> {
    if target_frames == 0 {
        return Err(Error::Parameter("target frame count must be positive".into()));
    }
    let mut target_spec = src_spec.clone();
    target_spec.set_frames(target_frames);
    target_spec.validate()?;

    let mut target = ParamSet::new();
    match (src_spec, &target_spec) {
        (ModelSpec::Pooling(src), ModelSpec::Pooling(dst))
            if src.kind == crate::arch::ArchKind::LocalPooling =>
        {
            let wc_src = src.window_count(src.frames);
            let wc_dst = dst.window_count(dst.frames);
            let block = src_params.get("head.out.w")?.shape()[1] / wc_src;
            for (name, t) in src_params.iter() {
                if name == "head.out.w" {
                    let k = t.shape()[0];
                    let src_w = t.data();
                    let scale = wc_src as f64 / wc_dst as f64;
                    let mut data = vec![0.0; k * wc_dst * block];
                    for row in 0..k {
                        for j in 0..wc_dst {
                            let s = j % wc_src;
                            for e in 0..block {
                                data[row * wc_dst * block + j * block + e] =
                                    src_w[row * wc_src * block + s * block + e] * scale;
                            }
                        }
                    }
                    target.insert(name, crate::tensor::Tensor::new(vec![k, wc_dst * block], data)?);
                } else {
                    target.insert(name, t.clone());
                }
            }
        }
        _ => {
            for (name, t) in src_params.iter() {
                target.insert(name, t.clone());
            }
        }
    }
    Ok((target_spec, target))
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetricRecord {
    Step { step: usize, loss: f64, lr: f64 },
    Eval { step: usize, name: String, value: f64 },
}

impl MetricRecord {
    pub fn to_csv_line(&self) -> String {
        match self {
            MetricRecord::Step { step, loss, lr } => format!("step,{step},{loss},{lr}"),
            MetricRecord::Eval { step, name, value } => format!("eval,{step},{name},{value}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub max_steps: usize,
    /// Stop early once the step loss drops to this value.
    pub target_loss: Option<f64>,
    pub seed: u64,
    /// Keep encoder parameters fixed, training only the layers above.
    pub freeze_encoder: bool,
    pub gain: GainKind,
    /// Run the periodic eval hook every this many steps (0 = never).
    pub eval_every: usize,
}

impl TrainSettings {
    pub fn new(seed: u64, max_steps: usize) -> TrainSettings {
        TrainSettings {
            batch_size: 8,
            max_steps,
            target_loss: None,
            seed,
            freeze_encoder: false,
            gain: GainKind::Linear,
            eval_every: 0,
        }
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricRecord>,
}

/// Fresh-start convenience over [`train_loop_from`].
pub fn train_loop(
    dataset: &Dataset,
    spec: &ModelSpec,
    params: ParamSet,
    optimizer: &OptimizerConfig,
    settings: &TrainSettings,
    eval_hook: Option<&mut dyn FnMut(usize, &ParamSet) -> Vec<(String, f64)>>,
) -> Result<TrainOutcome> {
    let frame_scale = if spec.is_sequential() && optimizer.lstm_lr_scale_by_frames {
        spec.frames() as f64
    } else {
        1.0
    };
    let mut params = params;
    if settings.freeze_encoder {
        params.freeze_prefix("enc.");
    }
    let state = TrainState::new(params, settings.seed, frame_scale, optimizer);
    train_loop_from(dataset, spec, state, optimizer, settings, eval_hook)
}

/// Deterministic training loop: per-epoch seeded shuffle fixes the example
/// order, per-example gradients are computed in parallel but reduced in
/// example order, and dropout streams are derived from (seed, step, slot).
/// Runs from `state.step` up to `settings.max_steps` (an absolute step
/// count), reconstructing the epoch position from the step counter so that
/// resuming from a checkpointed state is exact.
pub fn train_loop_from(
    dataset: &Dataset,
    spec: &ModelSpec,
    mut state: TrainState,
    optimizer: &OptimizerConfig,
    settings: &TrainSettings,
    mut eval_hook: Option<&mut dyn FnMut(usize, &ParamSet) -> Vec<(String, f64)>>,
) -> Result<TrainOutcome> {
    optimizer.validate()?;
    spec.validate()?;
    if settings.batch_size == 0 {
        return Err(Error::Parameter("batch_size must be positive".into()));
    }
    let train_indices = dataset.split_indices(Split::Train);
    if train_indices.is_empty() {
        return Err(Error::Parameter("dataset has no train videos".into()));
    }
    if settings.freeze_encoder {
        state.params.freeze_prefix("enc.");
    }
    let gain = settings.gain.schedule(spec.frames())?;
    let mut metrics = Vec::new();

    let consumed = state.step as u64 * settings.batch_size as u64;
    let mut epoch = consumed / train_indices.len() as u64;
    let mut cursor = (consumed % train_indices.len() as u64) as usize;
    let mut order = dataset.epoch_order(settings.seed, epoch);

    while state.step < settings.max_steps {
        // Assemble the batch, reshuffling at epoch boundaries.
        let mut batch = Vec::with_capacity(settings.batch_size);
        while batch.len() < settings.batch_size {
            if cursor == order.len() {
                epoch += 1;
                order = dataset.epoch_order(settings.seed, epoch);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let step = state.step;
        let spec_ref = spec;
        let params_ref = &state.params;
        let gain_ref = &gain;
        // Forward/backward per example in parallel; the tapes come back in
        // example order so the reduction below is deterministic.
        let results: Vec<Result<(f64, crate::tensor::Tape)>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| {
                let (video, _) = &dataset.videos[idx];
                let trimmed = model::with_frames(video, spec_ref.frames());
                let label = video.labels[0];
                let mut rng = substream_indexed(
                    settings.seed,
                    "dropout",
                    (step as u64) * settings.batch_size as u64 + slot as u64,
                );
                let mut tape = Tape::new();
                let loss = model::example_loss(
                    &mut tape, spec_ref, &trimmed, label, params_ref, Mode::Train, &mut rng,
                    gain_ref,
                )?;
                let loss_value = tape.scalar_value(loss);
                tape.backward(loss)?;
                Ok((loss_value, tape))
            })
            .collect();

        let mut step_loss = 0.0;
        state.params.clear_grads();
        for r in results {
            let (loss_value, tape) = r.map_err(|e| match e {
                Error::Numeric(m) => Error::Training(format!("diverged at step {step}: {m}")),
                other => other,
            })?;
            step_loss += loss_value;
            tape.accumulate_grads_into(&mut state.params)?;
        }
        step_loss /= settings.batch_size as f64;
        if !step_loss.is_finite() {
            return Err(Error::Training(format!("loss diverged at step {step}")));
        }
        state.params.scale_grads(1.0 / settings.batch_size as f64);
        let grads = collect_grads(&state.params);
        sgd_momentum_step(&mut state, &grads, optimizer)?;
        state.params.clear_grads();

        metrics.push(MetricRecord::Step {
            step,
            loss: step_loss,
            lr: effective_lr(optimizer, state.lr_frame_scale, step),
        });
        if settings.eval_every > 0 && (step + 1) % settings.eval_every == 0 {
            if let Some(hook) = eval_hook.as_mut() {
                for (name, value) in hook(state.step, &state.params) {
                    metrics.push(MetricRecord::Eval {
                        step: state.step,
                        name,
                        value,
                    });
                }
            }
        }
        if let Some(target) = settings.target_loss {
            if step_loss <= target {
                break;
            }
        }
    }
    Ok(TrainOutcome { state, metrics })
}

use crate::tensor::Tape;
