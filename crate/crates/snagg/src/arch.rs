//! The temporal feature-pooling aggregation architectures: Conv, Late, Slow
//! and Local Pooling, Time-Domain Convolution, and the inception-tap pooling
//! variant. Each maps T per-frame encoder activations to class logits through
//! an elementwise temporal max placed at a different depth.
//!
//! Windowed stages (Slow, Local, and the time-domain conv) lay windows out at
//! `temporal_stride` and append a tail window anchored at T - window when the
//! stride does not divide evenly. Videos shorter than the window are padded
//! by repeating frames from the start.

use crate::data::VideoSample;
use crate::encoder::{self, EncoderConfig, FeatureTap, Mode};
use crate::error::{Error, Result};
use crate::params::{uniform_tensor, ParamSet};
use crate::tensor::{window_starts, Tape, Tensor, Var};
use rand::Rng;

pub const ENCODER_PREFIX: &str = "enc";
pub const HEAD_PREFIX: &str = "head";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    ConvPooling,
    LatePooling,
    SlowPooling,
    LocalPooling,
    TimeDomainConv,
    InceptionTapPooling,
}

impl ArchKind {
    pub const ALL: [ArchKind; 6] = [
        ArchKind::ConvPooling,
        ArchKind::LatePooling,
        ArchKind::SlowPooling,
        ArchKind::LocalPooling,
        ArchKind::TimeDomainConv,
        ArchKind::InceptionTapPooling,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ArchKind::ConvPooling => "conv_pooling",
            ArchKind::LatePooling => "late_pooling",
            ArchKind::SlowPooling => "slow_pooling",
            ArchKind::LocalPooling => "local_pooling",
            ArchKind::TimeDomainConv => "time_domain_conv",
            ArchKind::InceptionTapPooling => "inception_tap_pooling",
        }
    }

    pub fn parse(s: &str) -> Result<ArchKind> {
        ArchKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = ArchKind::ALL.iter().map(|k| k.name()).collect();
                Error::Parameter(format!(
                    "unknown architecture {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    pub encoder: EncoderConfig,
    /// Post-pooling fully connected widths (Late Pooling keeps its shared FC
    /// chain inside the encoder instead).
    pub fc_widths: Vec<usize>,
    pub num_classes: usize,
    /// Frames the network is built for. Only Local Pooling's concat softmax
    /// is structurally tied to it; every other kind accepts any T.
    pub frames: usize,
    pub temporal_window: usize,
    pub temporal_stride: usize,
    /// Output channels of the time-domain convolution (desk-scale default 16,
    /// the full-scale reference uses 256 kernels).
    pub tdc_channels: usize,
}

impl ArchitectureSpec {
    pub fn desk(kind: ArchKind, encoder: EncoderConfig, num_classes: usize, frames: usize) -> Self {
        ArchitectureSpec {
            kind,
            encoder,
            fc_widths: vec![64, 64],
            num_classes,
            frames,
            temporal_window: 10,
            temporal_stride: 5,
            tdc_channels: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Parameter("num_classes must be >= 2".into()));
        }
        if self.frames == 0 {
            return Err(Error::Parameter("frames must be positive".into()));
        }
        match self.kind {
            ArchKind::ConvPooling
            | ArchKind::SlowPooling
            | ArchKind::LocalPooling
            | ArchKind::TimeDomainConv => {
                if self.encoder.feature_tap != FeatureTap::LastConv {
                    return Err(Error::Parameter(format!(
                        "{} requires encoder feature_tap = last_conv",
                        self.kind.name()
                    )));
                }
            }
            ArchKind::LatePooling => {
                if self.encoder.feature_tap != FeatureTap::LastFc || self.encoder.fc_layers.is_empty() {
                    return Err(Error::Parameter(
                        "late_pooling requires encoder feature_tap = last_fc with a shared FC chain"
                            .into(),
                    ));
                }
            }
            ArchKind::InceptionTapPooling => {
                if self.encoder.feature_tap != FeatureTap::LastFc {
                    return Err(Error::Parameter(
                        "inception_tap_pooling requires encoder feature_tap = last_fc".into(),
                    ));
                }
            }
        }
        if self.uses_windows() && (self.temporal_window == 0 || self.temporal_stride == 0) {
            return Err(Error::Parameter(
                "temporal window and stride must be positive".into(),
            ));
        }
        if self.uses_fc_head() && self.fc_widths.is_empty() {
            return Err(Error::Parameter(format!(
                "{} needs at least one fc width",
                self.kind.name()
            )));
        }
        if self.kind == ArchKind::TimeDomainConv {
            if self.tdc_channels == 0 {
                return Err(Error::Parameter("tdc_channels must be positive".into()));
            }
            let (_, h, w) = self.encoder.conv_stack_shape()?;
            if h < 3 || w < 3 {
                return Err(Error::Dimension(format!(
                    "time-domain conv needs a tap of at least 3x3, got {h}x{w}"
                )));
            }
        }
        Ok(())
    }

    fn uses_windows(&self) -> bool {
        matches!(
            self.kind,
            ArchKind::SlowPooling | ArchKind::LocalPooling | ArchKind::TimeDomainConv
        )
    }

    fn uses_fc_head(&self) -> bool {
        !matches!(self.kind, ArchKind::LatePooling)
    }

    /// Frames after the repeat-from-start padding rule for windowed kinds.
    pub fn padded_frames(&self, t: usize) -> usize {
        if self.uses_windows() {
            t.max(self.temporal_window)
        } else {
            t
        }
    }

    /// Number of temporal windows a T-frame video produces.
    pub fn window_count(&self, t: usize) -> usize {
        let t = self.padded_frames(t);
        window_starts(t, self.temporal_window, self.temporal_stride).len()
    }

    fn conv_flat_width(&self) -> Result<usize> {
        let (c, h, w) = self.encoder.conv_stack_shape()?;
        Ok(c * h * w)
    }

    /// Width of the flattened time-domain conv activation after the temporal
    /// max (spatial padding 1 with the 3x3 kernel preserves H and W).
    fn tdc_flat_width(&self) -> Result<usize> {
        let (_, h, w) = self.encoder.conv_stack_shape()?;
        Ok(self.tdc_channels * h * w)
    }
}

/// Elementwise maximum over the frame axis. Gradients route to the earliest
/// frame attaining each element's max.
pub fn temporal_max_pool(tape: &mut Tape, features: &[Var]) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::Parameter("temporal_max_pool: empty feature list".into()));
    }
    tape.max_many(features)
}

/// Create all head parameters under [`HEAD_PREFIX`] and encoder parameters
/// under [`ENCODER_PREFIX`].
pub fn init_params<R: Rng>(spec: &ArchitectureSpec, params: &mut ParamSet, rng: &mut R) -> Result<()> {
    spec.validate()?;
    encoder::init_params(&spec.encoder, ENCODER_PREFIX, params, rng)?;
    let k = spec.num_classes;
    let he = |shape: &[usize], rng: &mut R| -> Tensor {
        let bound = (6.0 / shape[1] as f64).sqrt();
        uniform_tensor(shape, bound, rng)
    };
    let mut fc_chain = |input: usize, params: &mut ParamSet, rng: &mut R| -> usize {
        let mut width = input;
        for (i, &out) in spec.fc_widths.iter().enumerate() {
            params.insert(&format!("{HEAD_PREFIX}.fc{i}.w"), he(&[out, width], rng));
            params.insert(&format!("{HEAD_PREFIX}.fc{i}.b"), Tensor::zeros(&[out]));
            width = out;
        }
        width
    };
    match spec.kind {
        ArchKind::ConvPooling => {
            let width = fc_chain(spec.conv_flat_width()?, params, rng);
            params.insert(&format!("{HEAD_PREFIX}.out.w"), he(&[k, width], rng));
            params.insert(&format!("{HEAD_PREFIX}.out.b"), Tensor::zeros(&[k]));
        }
        ArchKind::LatePooling => {
            let width = spec.encoder.tap_width()?;
            params.insert(&format!("{HEAD_PREFIX}.out.w"), he(&[k, width], rng));
            params.insert(&format!("{HEAD_PREFIX}.out.b"), Tensor::zeros(&[k]));
        }
        ArchKind::SlowPooling => {
            // One shared FC per window, then the second max stage.
            let flat = spec.conv_flat_width()?;
            let width = spec.fc_widths[0];
            params.insert(&format!("{HEAD_PREFIX}.wfc.w"), he(&[width, flat], rng));
            params.insert(&format!("{HEAD_PREFIX}.wfc.b"), Tensor::zeros(&[width]));
            params.insert(&format!("{HEAD_PREFIX}.out.w"), he(&[k, width], rng));
            params.insert(&format!("{HEAD_PREFIX}.out.b"), Tensor::zeros(&[k]));
        }
        ArchKind::LocalPooling => {
            let width = fc_chain(spec.conv_flat_width()?, params, rng);
            let wc = spec.window_count(spec.frames);
            params.insert(&format!("{HEAD_PREFIX}.out.w"), he(&[k, wc * width], rng));
            params.insert(&format!("{HEAD_PREFIX}.out.b"), Tensor::zeros(&[k]));
        }
        ArchKind::TimeDomainConv => {
            let (c, _, _) = spec.encoder.conv_stack_shape()?;
            let fan = c * spec.temporal_window * 9;
            let bound = (6.0 / fan as f64).sqrt();
            params.insert(
                &format!("{HEAD_PREFIX}.tdc.w"),
                uniform_tensor(
                    &[spec.tdc_channels, c, spec.temporal_window, 3, 3],
                    bound,
                    rng,
                ),
            );
            params.insert(&format!("{HEAD_PREFIX}.tdc.b"), Tensor::zeros(&[spec.tdc_channels]));
            let width = fc_chain(spec.tdc_flat_width()?, params, rng);
            params.insert(&format!("{HEAD_PREFIX}.out.w"), he(&[k, width], rng));
            params.insert(&format!("{HEAD_PREFIX}.out.b"), Tensor::zeros(&[k]));
        }
        ArchKind::InceptionTapPooling => {
            let width = fc_chain(spec.encoder.tap_width()?, params, rng);
            params.insert(&format!("{HEAD_PREFIX}.out.w"), he(&[k, width], rng));
            params.insert(&format!("{HEAD_PREFIX}.out.b"), Tensor::zeros(&[k]));
        }
    }
    Ok(())
}

/// Logits plus intermediate activations kept for tests.
#[derive(Debug, Clone)]
pub struct LogitsOutput {
    pub logits: Var,
    /// The activation right after the (final) temporal max, when one exists.
    pub pooled: Option<Var>,
    /// Per-window activations of the windowed kinds.
    pub window_outputs: Vec<Var>,
    /// Raw time-domain convolution output [P, OC, H, W].
    pub tdc_raw: Option<Var>,
}

fn head_param(tape: &mut Tape, params: &ParamSet, name: &str) -> Result<Var> {
    let full = format!("{HEAD_PREFIX}.{name}");
    tape.param(&full, params.get(&full)?)
}

fn fc_head(
    tape: &mut Tape,
    spec: &ArchitectureSpec,
    params: &ParamSet,
    mut x: Var,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    let keep = 1.0 - spec.encoder.dropout_ratio;
    for i in 0..spec.fc_widths.len() {
        let w = head_param(tape, params, &format!("fc{i}.w"))?;
        let b = head_param(tape, params, &format!("fc{i}.b"))?;
        x = tape.affine(w, x, b)?;
        x = tape.relu(x)?;
        x = tape.dropout(x, keep, rng, mode == Mode::Train)?;
    }
    let w = head_param(tape, params, "out.w")?;
    let b = head_param(tape, params, "out.b")?;
    tape.affine(w, x, b)
}

fn encode_padded(
    tape: &mut Tape,
    video: &VideoSample,
    spec: &ArchitectureSpec,
    params: &ParamSet,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Vec<Var>> {
    let needed = spec.padded_frames(video.num_frames());
    let video = if needed > video.num_frames() {
        let mut padded = video.clone();
        padded.frames = video.frames_padded(needed);
        std::borrow::Cow::Owned(padded)
    } else {
        std::borrow::Cow::Borrowed(video)
    };
    let feats = encoder::encode_frames(tape, &video, &spec.encoder, ENCODER_PREFIX, params, mode, rng)?;
    Ok(feats.per_frame)
}

pub fn forward_conv_pooling(
    tape: &mut Tape,
    video: &VideoSample,
    spec: &ArchitectureSpec,
    params: &ParamSet,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<LogitsOutput> {
    let feats = encode_padded(tape, video, spec, params, mode, rng)?;
    let pooled = temporal_max_pool(tape, &feats)?;
    let flat = tape.flatten(pooled)?;
    let logits = fc_head(tape, spec, params, flat, mode, rng)?;
    Ok(LogitsOutput {
        logits,
        pooled: Some(pooled),
        window_outputs: vec![],
        tdc_raw: None,
    })
}

pub fn forward_late_pooling(
    tape: &mut Tape,
    video: &VideoSample,
    spec: &ArchitectureSpec,
    params: &ParamSet,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<LogitsOutput> {
    let feats = encode_padded(tape, video, spec, params, mode, rng)?;
    let pooled = temporal_max_pool(tape, &feats)?;
    let w = head_param(tape, params, "out.w")?;
    let b = head_param(tape, params, "out.b")?;
    let logits = tape.affine(w, pooled, b)?;
    Ok(LogitsOutput {
        logits,
        pooled: Some(pooled),
        window_outputs: vec![],
        tdc_raw: None,
    })
}

fn windowed_maxes(tape: &mut Tape, spec: &ArchitectureSpec, feats: &[Var]) -> Result<Vec<Var>> {
    let starts = window_starts(feats.len(), spec.temporal_window, spec.temporal_stride);
    starts
        .iter()
        .map(|&s| tape.max_many(&feats[s..s + spec.temporal_window]))
        .collect()
}

pub fn forward_slow_pooling(
    tape: &mut Tape,
    video: &VideoSample,
    spec: &ArchitectureSpec,
    params: &ParamSet,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<LogitsOutput> {
    let feats = encode_padded(tape, video, spec, params, mode, rng)?;
    let keep = 1.0 - spec.encoder.dropout_ratio;
    let w = head_param(tape, params, "wfc.w")?;
    let b = head_param(tape, params, "wfc.b")?;
    let mut outs = Vec::new();
    for wmax in windowed_maxes(tape, spec, &feats)? {
        let flat = tape.flatten(wmax)?;
        let a = tape.affine(w, flat, b)?;
        let r = tape.relu(a)?;
        let d = tape.dropout(r, keep, rng, mode == Mode::Train)?;
        outs.push(d);
    }
    let stage2 = temporal_max_pool(tape, &outs)?;
    let ow = head_param(tape, params, "out.w")?;
    let ob = head_param(tape, params, "out.b")?;
    let logits = tape.affine(ow, stage2, ob)?;
    Ok(LogitsOutput {
        logits,
        pooled: Some(stage2),
        window_outputs: outs,
        tdc_raw: None,
    })
}

pub fn forward_local_pooling(
    tape: &mut Tape,
    video: &VideoSample,
    spec: &ArchitectureSpec,
    params: &ParamSet,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<LogitsOutput> {
    let feats = encode_padded(tape, video, spec, params, mode, rng)?;
    let expected = spec.window_count(spec.frames);
    let got = spec.window_count(video.num_frames());
    if got != expected {
        return Err(Error::Contract(format!(
            "local_pooling was built for {expected} windows ({} frames), video yields {got}",
            spec.frames
        )));
    }
    let keep = 1.0 - spec.encoder.dropout_ratio;
    let mut fc_vars = Vec::new();
    for i in 0..spec.fc_widths.len() {
        let w = head_param(tape, params, &format!("fc{i}.w"))?;
        let b = head_param(tape, params, &format!("fc{i}.b"))?;
        fc_vars.push((w, b));
    }
    let mut outs = Vec::new();
    for wmax in windowed_maxes(tape, spec, &feats)? {
        let mut x = tape.flatten(wmax)?;
        for &(w, b) in &fc_vars {
            x = tape.affine(w, x, b)?;
            x = tape.relu(x)?;
            x = tape.dropout(x, keep, rng, mode == Mode::Train)?;
        }
        outs.push(x);
    }
    let cat = tape.concat(&outs)?;
    let ow = head_param(tape, params, "out.w")?;
    let ob = head_param(tape, params, "out.b")?;
    let logits = tape.affine(ow, cat, ob)?;
    Ok(LogitsOutput {
        logits,
        pooled: None,
        window_outputs: outs,
        tdc_raw: None,
    })
}

pub fn forward_time_domain_conv(
    tape: &mut Tape,
    video: &VideoSample,
    spec: &ArchitectureSpec,
    params: &ParamSet,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<LogitsOutput> {
    let feats = encode_padded(tape, video, spec, params, mode, rng)?;
    // Stack T conv maps into one [T, C, H, W] node.
    let shape = tape.shape(feats[0]).to_vec();
    let flats: Vec<Var> = feats
        .iter()
        .map(|&f| tape.flatten(f))
        .collect::<Result<_>>()?;
    let cat = tape.concat(&flats)?;
    let stacked = tape.reshape(cat, vec![feats.len(), shape[0], shape[1], shape[2]])?;
    let kw = head_param(tape, params, "tdc.w")?;
    let kb = head_param(tape, params, "tdc.b")?;
    let tdc = tape.conv3d(stacked, kw, spec.temporal_stride, 1)?;
    let tmax = tape.max_axis0(tdc)?;
    // A per-channel bias commutes with the temporal max, so it is applied once
    // after pooling.
    let biased = tape.bias_channels(tmax, kb)?;
    let act = tape.relu(biased)?;
    let flat = tape.flatten(act)?;
    let logits = fc_head(tape, spec, params, flat, mode, rng)?;
    Ok(LogitsOutput {
        logits,
        pooled: Some(tmax),
        window_outputs: vec![],
        tdc_raw: Some(tdc),
    })
}

pub fn forward_inception_tap_pooling(
    tape: &mut Tape,
    video: &VideoSample,
    spec: &ArchitectureSpec,
    params: &ParamSet,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<LogitsOutput> {
    let feats = encode_padded(tape, video, spec, params, mode, rng)?;
    let pooled = temporal_max_pool(tape, &feats)?;
    let logits = fc_head(tape, spec, params, pooled, mode, rng)?;
    Ok(LogitsOutput {
        logits,
        pooled: Some(pooled),
        window_outputs: vec![],
        tdc_raw: None,
    })
}

/// Dispatch on the architecture kind.
pub fn forward(
    tape: &mut Tape,
    video: &VideoSample,
    spec: &ArchitectureSpec,
    params: &ParamSet,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<LogitsOutput> {
    match spec.kind {
        ArchKind::ConvPooling => forward_conv_pooling(tape, video, spec, params, mode, rng),
        ArchKind::LatePooling => forward_late_pooling(tape, video, spec, params, mode, rng),
        ArchKind::SlowPooling => forward_slow_pooling(tape, video, spec, params, mode, rng),
        ArchKind::LocalPooling => forward_local_pooling(tape, video, spec, params, mode, rng),
        ArchKind::TimeDomainConv => forward_time_domain_conv(tape, video, spec, params, mode, rng),
        ArchKind::InceptionTapPooling => {
            forward_inception_tap_pooling(tape, video, spec, params, mode, rng)
        }
    }
}
