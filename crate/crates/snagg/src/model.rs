//! A trainable model is a spec plus a named parameter set: either one of the
//! temporal pooling architectures or the LSTM stack, both over the shared
//! per-frame encoder.

use crate::arch::{self, ArchitectureSpec, ENCODER_PREFIX};
use crate::data::VideoSample;
use crate::encoder::{self, EncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::lstm::{self, StackSpec};
use crate::params::ParamSet;
use crate::tensor::{Tape, Var};
use rand::Rng;

pub const LSTM_PREFIX: &str = "lstm";

#[derive(Debug, Clone, PartialEq)]
pub struct LstmModelSpec {
    pub encoder: EncoderConfig,
    pub stack: StackSpec,
    pub frames: usize,
}

impl LstmModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.stack.validate()?;
        let width = self.encoder.tap_width()?;
        if width != self.stack.input_size {
            return Err(Error::Parameter(format!(
                "lstm input_size {} does not match encoder tap width {width}",
                self.stack.input_size
            )));
        }
        if self.frames == 0 {
            return Err(Error::Parameter("frames must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Pooling(ArchitectureSpec),
    Lstm(LstmModelSpec),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Pooling(s) => s.validate(),
            ModelSpec::Lstm(s) => s.validate(),
        }
    }

    pub fn frames(&self) -> usize {
        match self {
            ModelSpec::Pooling(s) => s.frames,
            ModelSpec::Lstm(s) => s.frames,
        }
    }

    pub fn set_frames(&mut self, t: usize) {
        match self {
            ModelSpec::Pooling(s) => s.frames = t,
            ModelSpec::Lstm(s) => s.frames = t,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::Pooling(s) => s.num_classes,
            ModelSpec::Lstm(s) => s.stack.num_classes,
        }
    }

    pub fn encoder(&self) -> &EncoderConfig {
        match self {
            ModelSpec::Pooling(s) => &s.encoder,
            ModelSpec::Lstm(s) => &s.encoder,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelSpec::Pooling(s) => s.kind.name(),
            ModelSpec::Lstm(_) => "lstm",
        }
    }

    /// Per-frame label backpropagation only applies to the LSTM.
    pub fn is_sequential(&self) -> bool {
        matches!(self, ModelSpec::Lstm(_))
    }
}

/// Fresh parameters for a model, drawn from the `init` sub-stream of `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = crate::rng::substream(seed, "init");
    let mut params = ParamSet::new();
    match spec {
        ModelSpec::Pooling(s) => arch::init_params(s, &mut params, &mut rng)?,
        ModelSpec::Lstm(s) => {
            encoder::init_params(&s.encoder, ENCODER_PREFIX, &mut params, &mut rng)?;
            lstm::init_params(&s.stack, LSTM_PREFIX, &mut params, &mut rng)?;
        }
    }
    Ok(params)
}

/// A copy of `video` trimmed or repeat-padded to exactly `t` frames.
pub fn with_frames(video: &VideoSample, t: usize) -> VideoSample {
    let mut v = video.clone();
    v.frames = video.frames_padded(t);
    v
}

/// Forward pass to logits. Pooling models produce one logits node; the LSTM
/// produces one per frame.
pub fn example_logits(
    tape: &mut Tape,
    spec: &ModelSpec,
    video: &VideoSample,
    params: &ParamSet,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Vec<Var>> {
    match spec {
        ModelSpec::Pooling(s) => {
            let out = arch::forward(tape, video, s, params, mode, rng)?;
            Ok(vec![out.logits])
        }
        ModelSpec::Lstm(s) => {
            let feats =
                encoder::encode_frames(tape, video, &s.encoder, ENCODER_PREFIX, params, mode, rng)?;
            lstm::stack_forward(tape, &feats.per_frame, &s.stack, LSTM_PREFIX, params, None)
        }
    }
}

/// Training loss for one example: plain cross-entropy for pooling models,
/// gain-weighted per-frame cross-entropy for the LSTM.
pub fn example_loss(
    tape: &mut Tape,
    spec: &ModelSpec,
    video: &VideoSample,
    label: usize,
    params: &ParamSet,
    mode: Mode,
    rng: &mut impl Rng,
    gain: &[f64],
) -> Result<Var> {
    let logits = example_logits(tape, spec, video, params, mode, rng)?;
    if spec.is_sequential() {
        lstm::lstm_loss(tape, &logits, label, gain)
    } else {
        tape.softmax_cross_entropy(logits[0], label)
    }
}

/// Plain softmax on logit values.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Inference pass returning per-frame class probabilities (a single row for
/// pooling models).
pub fn predict_probs(
    spec: &ModelSpec,
    video: &VideoSample,
    params: &ParamSet,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let mut rng = crate::rng::substream(0, "infer");
    let trimmed = with_frames(video, spec.frames());
    let logits = example_logits(&mut tape, spec, &trimmed, params, Mode::Infer, &mut rng)?;
    Ok(logits
        .iter()
        .map(|&l| softmax(tape.value(l)))
        .collect())
}
