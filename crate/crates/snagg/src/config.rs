//! Run configuration: a flat UTF-8 key=value format with dotted section
//! prefixes (for example `optimizer.base_lr=1e-5`). `#` starts a comment.
//! The seed is mandatory; nothing falls back to wall-clock time.

use crate::arch::{ArchKind, ArchitectureSpec};
use crate::data::{Task, TaskConfig};
use crate::encoder::{ConvLayer, EncoderConfig, FeatureTap};
use crate::error::{Error, Result};
use crate::eval::{AugmentGeometry, FusionStrategy};
use crate::lstm::StackSpec;
use crate::model::{LstmModelSpec, ModelSpec};
use crate::train::{GainKind, OptimizerConfig, TrainSettings};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

pub type KvMap = BTreeMap<String, String>;

pub fn parse_kv_text(text: &str) -> Result<KvMap> {
    let mut map = KvMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got {raw:?}",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key {key}",
                lineno + 1
            )));
        }
    }
    Ok(map)
}

pub fn serialize_kv(map: &KvMap) -> String {
    let mut out = String::new();
    for (k, v) in map {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}

/// Typed access over a parsed map that records which keys were consumed, so
/// unknown keys can be reported.
pub struct KvReader<'a> {
    map: &'a KvMap,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl<'a> KvReader<'a> {
    pub fn new(map: &'a KvMap) -> Self {
        KvReader {
            map,
            used: Default::default(),
        }
    }

    pub fn opt(&self, key: &str) -> Option<&'a str> {
        let v = self.map.get(key).map(|s| s.as_str());
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v
    }

    pub fn req(&self, key: &str) -> Result<&'a str> {
        self.opt(key)
            .ok_or_else(|| Error::Config(format!("missing required field `{key}`")))
    }

    pub fn parse_req<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.req(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("field `{key}`: cannot parse {raw:?}")))
    }

    pub fn parse_opt<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.opt(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Config(format!("field `{key}`: cannot parse {raw:?}"))),
        }
    }

    /// Error on any key that was never consumed.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&String> = self.map.keys().filter(|k| !used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown field(s): {}",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

fn parse_usize_list(key: &str, raw: &str) -> Result<Vec<usize>> {
    if raw.is_empty() {
        return Ok(vec![]);
    }
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("field `{key}`: bad integer {p:?}")))
        })
        .collect()
}

fn join_usize_list(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

// ---- encoder ----

pub fn encoder_to_kv(cfg: &EncoderConfig, map: &mut KvMap) {
    let (c, h, w) = cfg.input_shape;
    map.insert("encoder.input_shape".into(), format!("{c}x{h}x{w}"));
    let layers: Vec<String> = cfg
        .conv_layers
        .iter()
        .map(|l| {
            format!(
                "{},{},{},{},{}",
                l.out_channels, l.kernel, l.stride, l.pool_k, l.pool_stride
            )
        })
        .collect();
    map.insert("encoder.conv_layers".into(), layers.join(";"));
    map.insert(
        "encoder.global_avg_pool".into(),
        cfg.global_avg_pool.to_string(),
    );
    map.insert("encoder.fc_layers".into(), join_usize_list(&cfg.fc_layers));
    map.insert(
        "encoder.dropout_ratio".into(),
        cfg.dropout_ratio.to_string(),
    );
    map.insert(
        "encoder.feature_tap".into(),
        match cfg.feature_tap {
            FeatureTap::LastConv => "last_conv".into(),
            FeatureTap::LastFc => "last_fc".into(),
        },
    );
}

pub fn encoder_from_kv(r: &KvReader) -> Result<EncoderConfig> {
    if let Some(preset) = r.opt("encoder.preset") {
        return EncoderConfig::preset(preset).map_err(|e| Error::Config(e.to_string()));
    }
    let shape_raw = r.req("encoder.input_shape")?;
    let dims: Vec<usize> = shape_raw
        .split('x')
        .map(|p| {
            p.parse()
                .map_err(|_| Error::Config(format!("encoder.input_shape: bad extent {p:?}")))
        })
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(Error::Config(format!(
            "encoder.input_shape must be CxHxW, got {shape_raw:?}"
        )));
    }
    let mut conv_layers = Vec::new();
    for part in r.req("encoder.conv_layers")?.split(';') {
        let fields = parse_usize_list("encoder.conv_layers", part)?;
        if fields.len() != 5 {
            return Err(Error::Config(format!(
                "encoder.conv_layers: each layer needs 5 integers, got {part:?}"
            )));
        }
        conv_layers.push(ConvLayer::new(
            fields[0], fields[1], fields[2], fields[3], fields[4],
        ));
    }
    let tap = match r.parse_opt::<String>("encoder.feature_tap", "last_conv".into())?.as_str() {
        "last_conv" => FeatureTap::LastConv,
        "last_fc" => FeatureTap::LastFc,
        other => {
            return Err(Error::Config(format!(
                "encoder.feature_tap: expected last_conv or last_fc, got {other:?}"
            )))
        }
    };
    Ok(EncoderConfig {
        input_shape: (dims[0], dims[1], dims[2]),
        conv_layers,
        global_avg_pool: r.parse_opt("encoder.global_avg_pool", false)?,
        fc_layers: parse_usize_list(
            "encoder.fc_layers",
            r.opt("encoder.fc_layers").unwrap_or(""),
        )?,
        dropout_ratio: r.parse_opt("encoder.dropout_ratio", 0.0)?,
        feature_tap: tap,
    })
}

// ---- model ----

pub fn model_to_kv(spec: &ModelSpec) -> KvMap {
    let mut map = KvMap::new();
    map.insert("model.kind".into(), spec.kind_name().into());
    map.insert("model.frames".into(), spec.frames().to_string());
    map.insert("model.num_classes".into(), spec.num_classes().to_string());
    encoder_to_kv(spec.encoder(), &mut map);
    match spec {
        ModelSpec::Pooling(s) => {
            map.insert("arch.fc_widths".into(), join_usize_list(&s.fc_widths));
            map.insert(
                "arch.temporal_window".into(),
                s.temporal_window.to_string(),
            );
            map.insert(
                "arch.temporal_stride".into(),
                s.temporal_stride.to_string(),
            );
            map.insert("arch.tdc_channels".into(), s.tdc_channels.to_string());
        }
        ModelSpec::Lstm(s) => {
            map.insert("lstm.num_layers".into(), s.stack.num_layers.to_string());
            map.insert("lstm.hidden_size".into(), s.stack.hidden_size.to_string());
        }
    }
    map
}

pub fn model_from_kv(r: &KvReader) -> Result<ModelSpec> {
    let kind_raw: String = r.parse_req("model.kind")?;
    let frames: usize = r.parse_req("model.frames")?;
    let num_classes: usize = r.parse_req("model.num_classes")?;
    let encoder = encoder_from_kv(r)?;
    let spec = if kind_raw == "lstm" {
        let hidden_size = r.parse_opt("lstm.hidden_size", 32)?;
        let num_layers = r.parse_opt("lstm.num_layers", 2)?;
        let input_size = encoder.tap_width().map_err(|e| Error::Config(e.to_string()))?;
        ModelSpec::Lstm(LstmModelSpec {
            encoder,
            stack: StackSpec {
                num_layers,
                hidden_size,
                num_classes,
                input_size,
            },
            frames,
        })
    } else {
        let kind = ArchKind::parse(&kind_raw).map_err(|e| Error::Config(e.to_string()))?;
        ModelSpec::Pooling(ArchitectureSpec {
            kind,
            encoder,
            fc_widths: parse_usize_list("arch.fc_widths", r.opt("arch.fc_widths").unwrap_or("64,64"))?,
            num_classes,
            frames,
            temporal_window: r.parse_opt("arch.temporal_window", 10)?,
            temporal_stride: r.parse_opt("arch.temporal_stride", 5)?,
            tdc_channels: r.parse_opt("arch.tdc_channels", 16)?,
        })
    };
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(spec)
}

// ---- optimizer ----

pub fn optimizer_to_kv(cfg: &OptimizerConfig, map: &mut KvMap) {
    map.insert("optimizer.base_lr".into(), cfg.base_lr.to_string());
    map.insert("optimizer.momentum".into(), cfg.momentum.to_string());
    map.insert(
        "optimizer.weight_decay".into(),
        cfg.weight_decay.to_string(),
    );
    map.insert(
        "optimizer.lr_decay_factor".into(),
        cfg.lr_decay_factor.to_string(),
    );
    map.insert(
        "optimizer.decay_interval_steps".into(),
        cfg.decay_interval_steps.to_string(),
    );
    map.insert(
        "optimizer.lstm_lr_scale_by_frames".into(),
        cfg.lstm_lr_scale_by_frames.to_string(),
    );
}

pub fn optimizer_from_kv(r: &KvReader) -> Result<OptimizerConfig> {
    let d = OptimizerConfig::default();
    let cfg = OptimizerConfig {
        base_lr: r.parse_opt("optimizer.base_lr", d.base_lr)?,
        momentum: r.parse_opt("optimizer.momentum", d.momentum)?,
        weight_decay: r.parse_opt("optimizer.weight_decay", d.weight_decay)?,
        lr_decay_factor: r.parse_opt("optimizer.lr_decay_factor", d.lr_decay_factor)?,
        decay_interval_steps: r.parse_opt("optimizer.decay_interval_steps", d.decay_interval_steps)?,
        lstm_lr_scale_by_frames: r.parse_opt("optimizer.lstm_lr_scale_by_frames", d.lstm_lr_scale_by_frames)?,
    };
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

// ---- dataset ----

pub fn task_from_kv(r: &KvReader, seed: u64) -> Result<TaskConfig> {
    let task = Task::parse(r.req("dataset.task")?).map_err(|e| Error::Config(e.to_string()))?;
    let cfg = TaskConfig {
        task,
        num_classes: r.parse_opt("dataset.num_classes", 8)?,
        frames: r.parse_opt("dataset.frames", 16)?,
        frame_size: r.parse_opt("dataset.frame_size", 32)?,
        channels: r.parse_opt("dataset.channels", 3)?,
        noise_sigma: r.parse_opt("dataset.noise_sigma", 0.05)?,
        seed,
        train_videos: r.parse_opt("dataset.train_videos", 256)?,
        test_videos: r.parse_opt("dataset.test_videos", 64)?,
    };
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

// ---- full run config ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Image,
    Flow,
    TwoStream,
}

impl Stream {
    pub fn parse(s: &str) -> Result<Stream> {
        match s {
            "image" => Ok(Stream::Image),
            "flow" => Ok(Stream::Flow),
            "two_stream" => Ok(Stream::TwoStream),
            other => Err(Error::Config(format!(
                "stream must be image, flow or two_stream, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset_path: PathBuf,
    pub stream: Stream,
    pub task: Option<TaskConfig>,
    pub model: Option<ModelSpec>,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_steps: usize,
    pub target_loss: Option<f64>,
    pub freeze_encoder: bool,
    pub gain: GainKind,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub eval_num_samples: usize,
    pub eval_strategy: FusionStrategy,
    pub eval_geometry: Option<AugmentGeometry>,
    pub fusion_weight: f64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let map = parse_kv_text(text)?;
        let r = KvReader::new(&map);
        let seed: u64 = r.parse_req("seed")?;
        let output_dir = PathBuf::from(r.opt("output_dir").unwrap_or("out"));
        let dataset_path = PathBuf::from(r.req("dataset.path")?);
        let stream = Stream::parse(r.opt("stream").unwrap_or("image"))?;
        let task = if r.opt("dataset.task").is_some() {
            // re-read inside task_from_kv; opt() above marked it used
            Some(task_from_kv(&r, seed)?)
        } else {
            None
        };
        let model = if r.opt("model.kind").is_some() {
            Some(model_from_kv(&r)?)
        } else {
            None
        };
        let optimizer = optimizer_from_kv(&r)?;
        let geometry = match (
            r.opt("eval.resize").map(|s| s.to_string()),
            r.opt("eval.crop").map(|s| s.to_string()),
        ) {
            (None, None) => None,
            (Some(rs), Some(cr)) => {
                let g = AugmentGeometry {
                    resize: rs
                        .parse()
                        .map_err(|_| Error::Config(format!("eval.resize: bad value {rs:?}")))?,
                    crop: cr
                        .parse()
                        .map_err(|_| Error::Config(format!("eval.crop: bad value {cr:?}")))?,
                };
                g.validate().map_err(|e| Error::Config(e.to_string()))?;
                Some(g)
            }
            _ => {
                return Err(Error::Config(
                    "eval.resize and eval.crop must be given together".into(),
                ))
            }
        };
        let gain = GainKind::parse(r.opt("train.gain").unwrap_or("linear"))
            .map_err(|e| Error::Config(e.to_string()))?;
        let eval_strategy = FusionStrategy::parse(r.opt("eval.strategy").unwrap_or("weighted_sum"))
            .map_err(|e| Error::Config(e.to_string()))?;
        let cfg = RunConfig {
            seed,
            output_dir,
            dataset_path,
            stream,
            task,
            model,
            optimizer,
            batch_size: r.parse_opt("train.batch_size", 8)?,
            max_steps: r.parse_opt("train.max_steps", 1000)?,
            target_loss: match r.opt("train.target_loss") {
                None => None,
                Some(raw) => Some(raw.parse().map_err(|_| {
                    Error::Config(format!("train.target_loss: bad value {raw:?}"))
                })?),
            },
            freeze_encoder: r.parse_opt("train.freeze_encoder", false)?,
            gain,
            eval_every: r.parse_opt("train.eval_every", 0)?,
            checkpoint_every: r.parse_opt("train.checkpoint_every", 0)?,
            eval_num_samples: r.parse_opt("eval.num_samples", 0)?,
            eval_strategy,
            eval_geometry: geometry,
            fusion_weight: r.parse_opt("eval.fusion_weight", 0.5)?,
        };
        r.finish()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            target_loss: self.target_loss,
            seed: self.seed,
            freeze_encoder: self.freeze_encoder,
            gain: self.gain,
            eval_every: self.eval_every,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = "\
# sample run
seed=42
output_dir=/tmp/run
dataset.path=/tmp/data
dataset.task=motion_direction
dataset.num_classes=8
dataset.frames=16
dataset.frame_size=16
dataset.noise_sigma=0.1
dataset.train_videos=32
dataset.test_videos=16
stream=image
model.kind=conv_pooling
model.frames=16
model.num_classes=8
encoder.input_shape=3x16x16
encoder.conv_layers=4,3,1,2,2;8,3,1,2,2
encoder.fc_layers=
arch.fc_widths=16,16
optimizer.base_lr=0.01
train.batch_size=4
train.max_steps=100
eval.strategy=max_pool
";

    #[test]
    fn full_config_round_trips() {
        let cfg = RunConfig::parse(FULL).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.batch_size, 4);
        let model = cfg.model.unwrap();
        assert_eq!(model.kind_name(), "conv_pooling");
        assert_eq!(model.frames(), 16);
        // Serialize the model back to kv and re-parse it.
        let kv = model_to_kv(&model);
        let text = serialize_kv(&kv);
        let map = parse_kv_text(&text).unwrap();
        let r = KvReader::new(&map);
        let again = model_from_kv(&r).unwrap();
        assert_eq!(model, again);
    }

    #[test]
    fn lstm_model_round_trips() {
        let spec = crate::gradcheck::micro_lstm_spec();
        let kv = model_to_kv(&spec);
        let map = parse_kv_text(&serialize_kv(&kv)).unwrap();
        let r = KvReader::new(&map);
        assert_eq!(model_from_kv(&r).unwrap(), spec);
    }

    #[test]
    fn missing_seed_names_the_field() {
        let text = "dataset.path=/tmp/x\n";
        match RunConfig::parse(text) {
            Err(Error::Config(m)) => assert!(m.contains("seed"), "{m}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "seed=1\ndataset.path=/tmp/x\nmystery.knob=3\n";
        match RunConfig::parse(text) {
            Err(Error::Config(m)) => assert!(m.contains("mystery.knob"), "{m}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_and_duplicates_are_rejectedted() {
        assert!(matches!(parse_kv_text("justtext\n"), Err(Error::Config(_))));
        assert!(matches!(
            parse_kv_text("a=1\na=2\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn encoder_preset_shortcut_works() {
        let text = "seed=3\ndataset.path=/d\nmodel.kind=conv_pooling\nmodel.frames=4\nmodel.num_classes=8\nencoder.preset=tiny_alex\n";
        let cfg = RunConfig::parse(text).unwrap();
        let model = cfg.model.unwrap();
        assert_eq!(model.encoder().conv_layers.len(), 3);
    }
}
