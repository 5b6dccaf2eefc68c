//! Finite-difference verification harness: compares every parameter block's
//! reverse-mode gradient against central differences on micro-scale specs of
//! each architecture. Central differences use step 1e-5 and the relative
//! error metric |g - g_fd| / max(1, |g|, |g_fd|).

use crate::arch::{ArchKind, ArchitectureSpec};
use crate::data::VideoSample;
use crate::encoder::{ConvLayer, EncoderConfig, FeatureTap, Mode};
use crate::error::{Error, Result};
use crate::lstm::StackSpec;
use crate::model::{self, LstmModelSpec, ModelSpec};
use crate::params::ParamSet;
use crate::rng::substream;
use crate::tensor::{Tape, Tensor};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub block: String,
    pub values: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub model: String,
    pub blocks: Vec<BlockReport>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }
}

fn micro_encoder(tap: FeatureTap, fc: Vec<usize>, gap: bool) -> EncoderConfig {
    EncoderConfig {
        input_shape: (1, 8, 8),
        conv_layers: vec![ConvLayer::new(2, 3, 1, 2, 2)],
        global_avg_pool: gap,
        fc_layers: fc,
        dropout_ratio: 0.0,
        feature_tap: tap,
    }
}

/// Micro spec (well under 2k parameters) for one architecture kind.
pub fn micro_arch_spec(kind: ArchKind) -> ModelSpec {
    let encoder = match kind {
        ArchKind::LatePooling => micro_encoder(FeatureTap::LastFc, vec![6, 6], false),
        ArchKind::InceptionTapPooling => micro_encoder(FeatureTap::LastFc, vec![], true),
        _ => micro_encoder(FeatureTap::LastConv, vec![], false),
    };
    ModelSpec::Pooling(ArchitectureSpec {
        kind,
        encoder,
        fc_widths: vec![6, 5],
        num_classes: 3,
        frames: 4,
        temporal_window: 2,
        temporal_stride: 2,
        tdc_channels: 2,
    })
}

/// Micro 2-layer LSTM spec.
pub fn micro_lstm_spec() -> ModelSpec {
    let encoder = micro_encoder(FeatureTap::LastConv, vec![], false);
    ModelSpec::Lstm(LstmModelSpec {
        stack: StackSpec {
            num_layers: 2,
            hidden_size: 4,
            num_classes: 3,
            input_size: 2 * 4 * 4,
        },
        encoder,
        frames: 3,
    })
}

/// Every model the verification command covers: the six pooling-family
/// architectures plus the stacked LSTM.
pub fn standard_specs() -> Vec<ModelSpec> {
    let mut specs: Vec<ModelSpec> = ArchKind::ALL.iter().map(|&k| micro_arch_spec(k)).collect();
    specs.push(micro_lstm_spec());
    specs
}

fn micro_video(spec: &ModelSpec, seed: u64) -> VideoSample {
    let (c, h, w) = spec.encoder().input_shape;
    let mut rng = substream(seed, "gradcheck-video");
    let frames = (0..spec.frames())
        .map(|_| {
            let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::new(vec![c, h, w], data).unwrap()
        })
        .collect();
    VideoSample::new("gradcheck".into(), frames, vec![1]).unwrap()
}

/// Check one model spec. `corrupt` (test hook) perturbs the analytic gradient
/// of the named block before comparison, so the report must fail exactly
/// there.
pub fn check_model(
    spec: &ModelSpec,
    tolerance: f64,
    seed: u64,
    corrupt: Option<&str>,
) -> Result<CheckReport> {
    // Tolerance 0 is allowed and fails every block (floating point).
    if tolerance < 0.0 {
        return Err(Error::Parameter(format!(
            "tolerance must be >= 0, got {tolerance}"
        )));
    }
    spec.validate()?;
    let params = model::init_params(spec, seed)?;
    let video = micro_video(spec, seed);
    let label = 1usize;
    let gain = crate::train::gain_schedule(spec.frames())?;

    let eval_loss = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let mut rng = substream(seed, "gradcheck-drop");
        let loss = model::example_loss(&mut tape, spec, &video, label, p, Mode::Infer, &mut rng, &gain)?;
        Ok(tape.scalar_value(loss))
    };

    let mut tape = Tape::new();
    let mut rng = substream(seed, "gradcheck-drop");
    let loss = model::example_loss(&mut tape, spec, &video, label, &params, Mode::Infer, &mut rng, &gain)?;
    tape.backward(loss)?;
    let mut analytic = params.clone();
    tape.accumulate_grads_into(&mut analytic)?;

    let names: Vec<String> = params.names().cloned().collect();
    let mut blocks = Vec::with_capacity(names.len());
    for name in names {
        let n = params.get(&name)?.numel();
        let mut max_rel = 0.0f64;
        for i in 0..n {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += FD_STEP;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= FD_STEP;
            let fd = (eval_loss(&plus)? - eval_loss(&minus)?) / (2.0 * FD_STEP);
            let mut g = analytic.get(&name)?.grad().map(|g| g[i]).unwrap_or(0.0);
            if corrupt == Some(name.as_str()) {
                g += 0.1;
            }
            let rel = (g - fd).abs() / 1.0f64.max(g.abs()).max(fd.abs());
            max_rel = max_rel.max(rel);
        }
        blocks.push(BlockReport {
            block: name,
            values: n,
            max_rel_err: max_rel,
            passed: max_rel < tolerance,
        });
    }
    Ok(CheckReport {
        model: spec.kind_name().to_string(),
        blocks,
    })
}

/// Check every standard micro spec.
pub fn check_all(tolerance: f64, seed: u64) -> Result<Vec<CheckReport>> {
    standard_specs()
        .iter()
        .map(|spec| check_model(spec, tolerance, seed, None))
        .collect()
}
