//! Shared-parameter per-frame convolutional feature extractor: the desk-scale
//! stand-in for the full-scale frame towers. One parameter set is registered
//! on the tape once and applied to every frame, so the parameter count is
//! independent of the number of frames.

use crate::data::VideoSample;
use crate::error::{Error, Result};
use crate::params::{uniform_tensor, ParamSet};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;

/// Which activation the aggregation stage consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureTap {
    /// The final conv/pool feature map (spatial layout preserved).
    LastConv,
    /// The flat-vector path: global average pool and/or flatten, then the
    /// shared fully connected chain.
    LastFc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// One conv stage: conv (padding is kernel/2, so odd kernels preserve the
/// spatial extent at stride 1), ReLU, then optional max pooling when
/// pool_k >= 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool_k: usize,
    pub pool_stride: usize,
}

impl ConvLayer {
    pub fn new(out_channels: usize, kernel: usize, stride: usize, pool_k: usize, pool_stride: usize) -> Self {
        ConvLayer {
            out_channels,
            kernel,
            stride,
            pool_k,
            pool_stride,
        }
    }

    fn has_pool(&self) -> bool {
        self.pool_k >= 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// (C, H, W) of every input frame.
    pub input_shape: (usize, usize, usize),
    pub conv_layers: Vec<ConvLayer>,
    /// Mean-pool the final conv map over space before the FC chain.
    pub global_avg_pool: bool,
    pub fc_layers: Vec<usize>,
    /// Fraction dropped (the paper reports the dropped fraction, so ratio 0.6
    /// keeps 40%). Applied after each FC ReLU in train mode.
    pub dropout_ratio: f64,
    pub feature_tap: FeatureTap,
}

impl EncoderConfig {
    /// Krizhevsky-style ladder at desk scale: decreasing square kernels
    /// 5, 3, 3 with 2x2 pooling. On a 3x32x32 input the tap is 32x4x4.
    pub fn tiny_alex() -> EncoderConfig {
        EncoderConfig {
            input_shape: (3, 32, 32),
            conv_layers: vec![
                ConvLayer::new(16, 5, 1, 2, 2),
                ConvLayer::new(24, 3, 1, 2, 2),
                ConvLayer::new(32, 3, 1, 2, 2),
            ],
            global_avg_pool: false,
            fc_layers: vec![],
            dropout_ratio: 0.0,
            feature_tap: FeatureTap::LastConv,
        }
    }

    /// Inception-style tap at desk scale: conv ladder to 64 channels, then a
    /// global average pool exposing a 64-wide flat vector.
    pub fn tiny_inception_tap() -> EncoderConfig {
        EncoderConfig {
            input_shape: (3, 32, 32),
            conv_layers: vec![
                ConvLayer::new(16, 3, 1, 2, 2),
                ConvLayer::new(32, 3, 1, 2, 2),
                ConvLayer::new(64, 3, 1, 2, 2),
            ],
            global_avg_pool: true,
            fc_layers: vec![],
            dropout_ratio: 0.0,
            feature_tap: FeatureTap::LastFc,
        }
    }

    pub fn preset(name: &str) -> Result<EncoderConfig> {
        match name {
            "tiny_alex" => Ok(EncoderConfig::tiny_alex()),
            "tiny_inception_tap" => Ok(EncoderConfig::tiny_inception_tap()),
            other => Err(Error::Parameter(format!(
                "unknown encoder preset {other:?}; available: tiny_alex, tiny_inception_tap"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_ratio) {
            return Err(Error::Parameter(format!(
                "dropout_ratio must be in [0, 1), got {}",
                self.dropout_ratio
            )));
        }
        if self.conv_layers.is_empty() {
            return Err(Error::Parameter("encoder needs at least one conv layer".into()));
        }
        for (i, l) in self.conv_layers.iter().enumerate() {
            if l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(Error::Parameter(format!(
                    "conv layer {i}: channels/kernel/stride must be positive"
                )));
            }
            if l.has_pool() && l.pool_stride == 0 {
                return Err(Error::Parameter(format!(
                    "conv layer {i}: pool stride must be positive"
                )));
            }
        }
        // The ladder must fit the declared input.
        self.conv_stack_shape()?;
        self.tap_shape()?;
        Ok(())
    }

    /// Shape of the final conv/pool feature map.
    pub fn conv_stack_shape(&self) -> Result<(usize, usize, usize)> {
        let (mut c, mut h, mut w) = self.input_shape;
        for (i, l) in self.conv_layers.iter().enumerate() {
            let pad = l.kernel / 2;
            if l.kernel > h + 2 * pad || l.kernel > w + 2 * pad {
                return Err(Error::Dimension(format!(
                    "conv layer {i}: kernel {} does not fit {h}x{w}",
                    l.kernel
                )));
            }
            h = (h + 2 * pad - l.kernel) / l.stride + 1;
            w = (w + 2 * pad - l.kernel) / l.stride + 1;
            c = l.out_channels;
            if l.has_pool() {
                if l.pool_k > h || l.pool_k > w {
                    return Err(Error::Dimension(format!(
                        "conv layer {i}: pool window {} does not fit {h}x{w}",
                        l.pool_k
                    )));
                }
                h = (h - l.pool_k) / l.pool_stride + 1;
                w = (w - l.pool_k) / l.pool_stride + 1;
            }
        }
        Ok((c, h, w))
    }

    /// Shape of the activation exposed at the feature tap.
    pub fn tap_shape(&self) -> Result<Vec<usize>> {
        let (c, h, w) = self.conv_stack_shape()?;
        match self.feature_tap {
            FeatureTap::LastConv => Ok(vec![c, h, w]),
            FeatureTap::LastFc => {
                let mut width = if self.global_avg_pool { c } else { c * h * w };
                if let Some(&last) = self.fc_layers.last() {
                    width = last;
                }
                Ok(vec![width])
            }
        }
    }

    /// Flat width of the tap activation.
    pub fn tap_width(&self) -> Result<usize> {
        Ok(self.tap_shape()?.iter().product())
    }
}

/// Per-frame encoder outputs: T same-shape activations at the feature tap.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    pub per_frame: Vec<Var>,
    pub tap_shape: Vec<usize>,
}

/// Create the encoder parameters under `prefix`. Conv and FC weights use
/// He-uniform init (the stacks are ReLU), biases start at zero.
pub fn init_params<R: Rng>(cfg: &EncoderConfig, prefix: &str, params: &mut ParamSet, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let mut in_c = cfg.input_shape.0;
    for (i, l) in cfg.conv_layers.iter().enumerate() {
        let fan_in = in_c * l.kernel * l.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        params.insert(
            &format!("{prefix}.conv{i}.w"),
            uniform_tensor(&[l.out_channels, in_c, l.kernel, l.kernel], bound, rng),
        );
        params.insert(&format!("{prefix}.conv{i}.b"), Tensor::zeros(&[l.out_channels]));
        in_c = l.out_channels;
    }
    let (c, h, w) = cfg.conv_stack_shape()?;
    let mut width = if cfg.global_avg_pool { c } else { c * h * w };
    for (i, &out) in cfg.fc_layers.iter().enumerate() {
        let bound = (6.0 / width as f64).sqrt();
        params.insert(
            &format!("{prefix}.fc{i}.w"),
            uniform_tensor(&[out, width], bound, rng),
        );
        params.insert(&format!("{prefix}.fc{i}.b"), Tensor::zeros(&[out]));
        width = out;
    }
    Ok(())
}

/// Parameter leaves registered once per tape and shared by every frame.
struct EncoderVars {
    conv: Vec<(Var, Var)>,
    fc: Vec<(Var, Var)>,
}

fn register_vars(tape: &mut Tape, cfg: &EncoderConfig, prefix: &str, params: &ParamSet) -> Result<EncoderVars> {
    let mut conv = Vec::with_capacity(cfg.conv_layers.len());
    for i in 0..cfg.conv_layers.len() {
        let w = tape.param(&format!("{prefix}.conv{i}.w"), params.get(&format!("{prefix}.conv{i}.w"))?)?;
        let b = tape.param(&format!("{prefix}.conv{i}.b"), params.get(&format!("{prefix}.conv{i}.b"))?)?;
        conv.push((w, b));
    }
    let mut fc = Vec::with_capacity(cfg.fc_layers.len());
    for i in 0..cfg.fc_layers.len() {
        let w = tape.param(&format!("{prefix}.fc{i}.w"), params.get(&format!("{prefix}.fc{i}.w"))?)?;
        let b = tape.param(&format!("{prefix}.fc{i}.b"), params.get(&format!("{prefix}.fc{i}.b"))?)?;
        fc.push((w, b));
    }
    Ok(EncoderVars { conv, fc })
}

fn encode_one(
    tape: &mut Tape,
    frame: Var,
    cfg: &EncoderConfig,
    vars: &EncoderVars,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    let mut x = frame;
    for (l, &(w, b)) in cfg.conv_layers.iter().zip(&vars.conv) {
        x = tape.conv2d(x, w, l.stride, l.kernel / 2)?;
        x = tape.bias_channels(x, b)?;
        x = tape.relu(x)?;
        if l.has_pool() {
            x = tape.spatial_max_pool(x, l.pool_k, l.pool_stride)?;
        }
    }
    if cfg.feature_tap == FeatureTap::LastConv {
        return Ok(x);
    }
    let mut v = if cfg.global_avg_pool {
        tape.global_avg_pool(x)?
    } else {
        tape.flatten(x)?
    };
    let keep = 1.0 - cfg.dropout_ratio;
    for &(w, b) in &vars.fc {
        v = tape.affine(w, v, b)?;
        v = tape.relu(v)?;
        v = tape.dropout(v, keep, rng, mode == Mode::Train)?;
    }
    Ok(v)
}

/// Encode every frame of `video` with the one shared parameter set. Dropout
/// masks (train mode) are drawn independently per frame from `rng`.
pub fn encode_frames(
    tape: &mut Tape,
    video: &VideoSample,
    cfg: &EncoderConfig,
    prefix: &str,
    params: &ParamSet,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<FrameFeatures> {
    let want = [cfg.input_shape.0, cfg.input_shape.1, cfg.input_shape.2];
    for (t, f) in video.frames.iter().enumerate() {
        if f.shape() != want {
            return Err(Error::Dimension(format!(
                "frame {t} of video {}: shape {:?} does not match encoder input {want:?}",
                video.video_id,
                f.shape()
            )));
        }
    }
    let vars = register_vars(tape, cfg, prefix, params)?;
    let mut per_frame = Vec::with_capacity(video.frames.len());
    for frame in &video.frames {
        let leaf = tape.leaf(frame)?;
        per_frame.push(encode_one(tape, leaf, cfg, &vars, mode, rng)?);
    }
    let tap_shape = tape.shape(per_frame[0]).to_vec();
    Ok(FrameFeatures { per_frame, tap_shape })
}
