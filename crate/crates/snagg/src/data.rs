//! Synthetic video-classification tasks and the on-disk dataset format.
//!
//! Three task families are generated deterministically from a seed:
//!
//! * `shape_identity` — a per-class glyph rendered in every frame at a random
//!   (but frame-consistent) position. Solvable from any single frame.
//! * `motion_direction` — a soft-edged textured square, slightly elongated
//!   along its motion axis, translating in one of K directions with toroidal
//!   wrap-around. Because the start phase is uniform on the torus, a single
//!   frame carries almost no class signal (only the weak elongation cue); the
//!   union of frames reveals the motion axis, and frame differences or
//!   optical flow reveal the signed direction.
//! * `order_pair` — class pairs (2j, 2j+1) sharing one oriented sweep path;
//!   odd classes are exact temporal reversals of even-style renders, so any
//!   frame-permutation-invariant classifier is blind to the pair direction.
//!
//! On disk a dataset is a directory with a `manifest.json` (video_id, labels,
//! stream tag, dtype, shape, relative path, CRC32, split) and one raster file
//! per video: magic `SNVID001`, u32 LE T, C, H, W, then the f32 LE raster.

use crate::error::{Error, Result};
use crate::rng::substream_indexed;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

pub const RASTER_MAGIC: &[u8; 8] = b"SNVID001";

/// Augmentation applied to a sample: one start frame, one crop corner, one
/// flip decision, shared by every frame of the sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentDescriptor {
    pub start_frame: usize,
    pub crop_y: usize,
    pub crop_x: usize,
    pub flip: bool,
}

/// An ordered frame sequence with its label set.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub video_id: String,
    /// T frames, each C x H x W in [0, 1].
    pub frames: Vec<Tensor>,
    /// Nonempty, sorted, deduplicated class indices.
    pub labels: Vec<usize>,
    /// Set when the sample came out of `augment_with`.
    pub augment: Option<AugmentDescriptor>,
}

impl VideoSample {
    pub fn new(video_id: String, frames: Vec<Tensor>, mut labels: Vec<usize>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Data(format!("video {video_id}: no frames")));
        }
        let shape = frames[0].shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Data(format!(
                "video {video_id}: frames must be C x H x W, got {shape:?}"
            )));
        }
        for (t, f) in frames.iter().enumerate() {
            if f.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "video {video_id}: frame {t} shape {:?} != {shape:?}",
                    f.shape()
                )));
            }
        }
        if labels.is_empty() {
            return Err(Error::Data(format!("video {video_id}: empty label set")));
        }
        labels.sort_unstable();
        labels.dedup();
        Ok(VideoSample {
            video_id,
            frames,
            labels,
            augment: None,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_shape(&self) -> &[usize] {
        self.frames[0].shape()
    }

    /// First `t` frames with the repeat-from-start padding rule: requesting
    /// more frames than stored repeats frames from the beginning.
    pub fn frames_padded(&self, t: usize) -> Vec<Tensor> {
        (0..t)
            .map(|i| self.frames[i % self.frames.len()].clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ShapeIdentity,
    MotionDirection,
    OrderPair,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "shape_identity" => Ok(Task::ShapeIdentity),
            "motion_direction" => Ok(Task::MotionDirection),
            "order_pair" => Ok(Task::OrderPair),
            other => Err(Error::Parameter(format!(
                "unknown task {other:?}; expected shape_identity, motion_direction or order_pair"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::ShapeIdentity => "shape_identity",
            Task::MotionDirection => "motion_direction",
            Task::OrderPair => "order_pair",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: Task,
    pub num_classes: usize,
    /// Frames per video (the paper-scale analogue stores 300 at 1 fps).
    pub frames: usize,
    /// Square frame edge in pixels.
    pub frame_size: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub train_videos: usize,
    pub test_videos: usize,
}

impl TaskConfig {
    /// Desk-scale defaults: K=8, T=16, 32x32x3, 256 train / 64 test.
    pub fn desk_default(task: Task, seed: u64) -> TaskConfig {
        TaskConfig {
            task,
            num_classes: 8,
            frames: 16,
            frame_size: 32,
            channels: 3,
            noise_sigma: 0.05,
            seed,
            train_videos: 256,
            test_videos: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Parameter("num_classes must be >= 2".into()));
        }
        if self.task == Task::OrderPair && self.num_classes % 2 != 0 {
            return Err(Error::Parameter(
                "order_pair generates classes in reversal pairs; num_classes must be even".into(),
            ));
        }
        if self.frames == 0 || self.frame_size < 8 || self.channels == 0 {
            return Err(Error::Parameter(format!(
                "invalid geometry: frames={} frame_size={} channels={}",
                self.frames, self.frame_size, self.channels
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Parameter("noise_sigma must be >= 0".into()));
        }
        if self.train_videos == 0 || self.test_videos == 0 {
            return Err(Error::Parameter("split sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub labels: Vec<usize>,
    pub stream: String,
    pub dtype: String,
    pub shape: [usize; 4],
    pub path: String,
    pub crc32: u32,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub task: String,
    pub num_classes: usize,
    pub videos: Vec<ManifestEntry>,
}

/// In-memory dataset: all rasters are loaded eagerly (desk scale).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub num_classes: usize,
    pub task: String,
    pub videos: Vec<(VideoSample, Split)>,
}

impl Dataset {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.videos
            .iter()
            .enumerate()
            .filter(|(_, (_, s))| *s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Deterministic per-epoch shuffle of the train split.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order = self.split_indices(Split::Train);
        let mut rng = substream_indexed(seed, "data-shuffle", epoch);
        order.shuffle(&mut rng);
        order
    }
}

// ---- rendering -----------------------------------------------------------

/// Soft-edged box profile: 1 inside, logistic falloff of width `edge` at the
/// border. `u` is the coordinate relative to the box center.
fn soft_box(u: f64, half: f64, edge: f64) -> f64 {
    let d = half - u.abs();
    1.0 / (1.0 + (-d / edge).exp())
}

struct Brush {
    cx: f64,
    cy: f64,
    half_along: f64,
    half_perp: f64,
    angle: f64,
    edge: f64,
    texture_period: f64,
    wrap: bool,
}

impl Brush {
    /// Paint the brush into one frame buffer (all channels), max-compositing.
    fn paint(&self, frame: &mut [f64], channels: usize, size: usize) {
        let reach = self.half_along.max(self.half_perp) + 4.0 * self.edge;
        let (sin_a, cos_a) = self.angle.sin_cos();
        let offsets: &[f64] = if self.wrap {
            &[-(size as f64), 0.0, size as f64]
        } else {
            &[0.0]
        };
        for &oy in offsets {
            for &ox in offsets {
                let cx = self.cx + ox;
                let cy = self.cy + oy;
                let x0 = ((cx - reach).floor().max(0.0)) as usize;
                let x1 = ((cx + reach).ceil().min(size as f64 - 1.0)) as usize;
                let y0 = ((cy - reach).floor().max(0.0)) as usize;
                let y1 = ((cy + reach).ceil().min(size as f64 - 1.0)) as usize;
                if cx + reach < 0.0 || cx - reach > size as f64 || cy + reach < 0.0 {
                    continue;
                }
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let dx = x as f64 - cx;
                        let dy = y as f64 - cy;
                        let along = dx * cos_a + dy * sin_a;
                        let perp = -dx * sin_a + dy * cos_a;
                        let shape = soft_box(along, self.half_along, self.edge)
                            * soft_box(perp, self.half_perp, self.edge);
                        if shape < 1e-4 {
                            continue;
                        }
                        let tex = 0.8 + 0.2 * (2.0 * PI * along / self.texture_period).sin();
                        let v = shape * tex;
                        for c in 0..channels {
                            let idx = (c * size + y) * size + x;
                            if v > frame[idx] {
                                frame[idx] = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn finish_frame(mut buf: Vec<f64>, cfg: &TaskConfig, rng: &mut impl Rng) -> Tensor {
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).unwrap();
        for v in buf.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    // Clamp and quantize to f32 so the on-disk raster round-trips bit-exactly.
    for v in buf.iter_mut() {
        *v = (v.clamp(0.0, 1.0) as f32) as f64;
    }
    Tensor::new(
        vec![cfg.channels, cfg.frame_size, cfg.frame_size],
        buf,
    )
    .unwrap()
}

/// Glyph bit patterns for shape_identity, one 4x4 pattern per class, distinct
/// by construction.
fn class_glyph(cfg: &TaskConfig, class: usize) -> [bool; 16] {
    let mut attempt = 0u64;
    loop {
        let mut rng = substream_indexed(cfg.seed, "glyph", (class as u64) << 16 | attempt);
        let mut bits = [false; 16];
        let mut on = 0;
        for b in bits.iter_mut() {
            *b = rng.gen_bool(0.5);
            on += *b as usize;
        }
        if !(6..=10).contains(&on) {
            attempt += 1;
            continue;
        }
        // Distinct from all earlier classes (which use their own settled attempt).
        let clash = (0..class).any(|c| class_glyph(cfg, c) == bits);
        if clash {
            attempt += 1;
            continue;
        }
        return bits;
    }
}

/// Render the frames for one video. For order_pair the odd class of a pair is
/// produced by rendering the even-style sweep (noise included) and reversing
/// the frame list, so reversal pairs are exact by construction.
pub(crate) fn synthesize_video(
    cfg: &TaskConfig,
    class: usize,
    rng: &mut impl Rng,
) -> Vec<Tensor> {
    let size = cfg.frame_size as f64;
    let t_n = cfg.frames;
    match cfg.task {
        Task::ShapeIdentity => {
            let bits = class_glyph(cfg, class);
            let cell = size * 0.14;
            // Centered with small jitter: the glyph stays recognizable from
            // any single frame without demanding translation invariance.
            let jitter = size * 0.06;
            let gx = size / 2.0 + rng.gen_range(-jitter..jitter);
            let gy = size / 2.0 + rng.gen_range(-jitter..jitter);
            (0..t_n)
                .map(|_| {
                    let mut buf = vec![0.0; cfg.channels * cfg.frame_size * cfg.frame_size];
                    for by in 0..4 {
                        for bx in 0..4 {
                            if !bits[by * 4 + bx] {
                                continue;
                            }
                            Brush {
                                cx: gx + (bx as f64 - 1.5) * cell,
                                cy: gy + (by as f64 - 1.5) * cell,
                                half_along: cell / 2.0,
                                half_perp: cell / 2.0,
                                angle: 0.0,
                                edge: 0.6,
                                texture_period: 1e9,
                                wrap: false,
                            }
                            .paint(&mut buf, cfg.channels, cfg.frame_size);
                        }
                    }
                    finish_frame(buf, cfg, rng)
                })
                .collect()
        }
        Task::MotionDirection => {
            let angle = 2.0 * PI * class as f64 / cfg.num_classes as f64;
            let (dy, dx) = angle.sin_cos();
            // Uniform start phase on the torus: a single frame's position
            // carries no class information.
            let sx = rng.gen_range(0.0..size);
            let sy = rng.gen_range(0.0..size);
            let step = size * 0.09;
            let half = size * 0.11;
            (0..t_n)
                .map(|t| {
                    let mut buf = vec![0.0; cfg.channels * cfg.frame_size * cfg.frame_size];
                    Brush {
                        cx: (sx + dx * step * t as f64).rem_euclid(size),
                        cy: (sy + dy * step * t as f64).rem_euclid(size),
                        // Slight elongation along the motion axis: a weak
                        // single-frame orientation cue that makes single-frame
                        // pre-training useful.
                        half_along: half * 1.7,
                        half_perp: half,
                        angle,
                        edge: 1.2,
                        texture_period: size * 0.45,
                        wrap: true,
                    }
                    .paint(&mut buf, cfg.channels, cfg.frame_size);
                    finish_frame(buf, cfg, rng)
                })
                .collect()
        }
        Task::OrderPair => {
            let pair = class / 2;
            let pairs = cfg.num_classes / 2;
            let theta = PI * pair as f64 / pairs as f64;
            let (dy, dx) = theta.sin_cos();
            let reach = size * 0.33;
            let cx = size / 2.0 + rng.gen_range(-0.06 * size..0.06 * size);
            let cy = size / 2.0 + rng.gen_range(-0.06 * size..0.06 * size);
            let scale = rng.gen_range(0.85..1.0);
            let half = size * 0.10;
            let mut frames: Vec<Tensor> = (0..t_n)
                .map(|t| {
                    let u = if t_n > 1 {
                        2.0 * t as f64 / (t_n - 1) as f64 - 1.0
                    } else {
                        0.0
                    };
                    let mut buf = vec![0.0; cfg.channels * cfg.frame_size * cfg.frame_size];
                    Brush {
                        cx: cx + dx * reach * scale * u,
                        cy: cy + dy * reach * scale * u,
                        half_along: half,
                        half_perp: half,
                        angle: 0.0,
                        edge: 1.0,
                        texture_period: 1e9,
                        wrap: false,
                    }
                    .paint(&mut buf, cfg.channels, cfg.frame_size);
                    finish_frame(buf, cfg, rng)
                })
                .collect();
            if class % 2 == 1 {
                frames.reverse();
            }
            frames
        }
    }
}

// ---- generation ----------------------------------------------------------

fn raster_bytes(frames: &[Tensor]) -> Vec<u8> {
    let shape = frames[0].shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let t = frames.len();
    let mut bytes = Vec::with_capacity(8 + 16 + t * c * h * w * 4);
    bytes.extend_from_slice(RASTER_MAGIC);
    for dim in [t, c, h, w] {
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for f in frames {
        for &v in f.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

fn parse_raster(bytes: &[u8], file: &str) -> Result<Vec<Tensor>> {
    if bytes.len() < 24 || &bytes[..8] != RASTER_MAGIC {
        return Err(Error::Data(format!("{file}: bad magic or truncated header")));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 8 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let [t, c, h, w] = dims;
    let want = 24 + t * c * h * w * 4;
    if bytes.len() != want {
        return Err(Error::Data(format!(
            "{file}: truncated payload: {} bytes, expected {want}",
            bytes.len()
        )));
    }
    let mut frames = Vec::with_capacity(t);
    let mut off = 24;
    for _ in 0..t {
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c * h * w {
            data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
            off += 4;
        }
        frames.push(Tensor::new(vec![c, h, w], data).unwrap());
    }
    Ok(frames)
}

/// Generate a dataset directory. Deterministic: a fixed config produces
/// byte-identical files. Classes are assigned round-robin within each split,
/// so the label histogram is exactly balanced up to the remainder.
pub fn generate(cfg: &TaskConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    let videos_dir = dir.join("videos");
    fs::create_dir_all(&videos_dir)?;
    let mut entries = Vec::new();
    let splits = [
        (Split::Train, cfg.train_videos, "train"),
        (Split::Test, cfg.test_videos, "test"),
    ];
    let mut global_index = 0u64;
    for (split, count, tag) in splits {
        for i in 0..count {
            let class = i % cfg.num_classes;
            let video_id = format!("{tag}-{i:05}");
            let mut rng = substream_indexed(cfg.seed, "video", global_index);
            global_index += 1;
            let frames = synthesize_video(cfg, class, &mut rng);
            let bytes = raster_bytes(&frames);
            let crc = crc32fast::hash(&bytes);
            let rel = format!("videos/{video_id}.bin");
            fs::write(dir.join(&rel), &bytes)?;
            entries.push(ManifestEntry {
                video_id,
                labels: vec![class],
                stream: "image".into(),
                dtype: "f32".into(),
                shape: [
                    cfg.frames,
                    cfg.channels,
                    cfg.frame_size,
                    cfg.frame_size,
                ],
                path: rel,
                crc32: crc,
                split,
            });
        }
    }
    let manifest = Manifest {
        format: "snagg-dataset-v1".into(),
        task: cfg.task.name().into(),
        num_classes: cfg.num_classes,
        videos: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Io(format!("manifest encode: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Write an already-synthesized set of videos (used for flow streams).
pub fn write_dataset(
    dir: &Path,
    task: &str,
    num_classes: usize,
    videos: &[(VideoSample, Split)],
    stream: &str,
) -> Result<()> {
    let videos_dir = dir.join("videos");
    fs::create_dir_all(&videos_dir)?;
    let mut entries = Vec::new();
    for (sample, split) in videos {
        let bytes = raster_bytes(&sample.frames);
        let crc = crc32fast::hash(&bytes);
        let rel = format!("videos/{}.bin", sample.video_id);
        fs::write(dir.join(&rel), &bytes)?;
        let shape = sample.frame_shape();
        entries.push(ManifestEntry {
            video_id: sample.video_id.clone(),
            labels: sample.labels.clone(),
            stream: stream.into(),
            dtype: "f32".into(),
            shape: [sample.num_frames(), shape[0], shape[1], shape[2]],
            path: rel,
            crc32: crc,
            split: *split,
        });
    }
    let manifest = Manifest {
        format: "snagg-dataset-v1".into(),
        task: task.into(),
        num_classes,
        videos: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Io(format!("manifest encode: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a dataset directory, verifying every raster's checksum and shape.
pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let mut text = String::new();
    fs::File::open(&manifest_path)
        .map_err(|e| Error::Io(format!("{}: {e}", manifest_path.display())))?
        .read_to_string(&mut text)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("manifest.json: {e}")))?;
    if manifest.format != "snagg-dataset-v1" {
        return Err(Error::Data(format!(
            "unsupported dataset format {:?}",
            manifest.format
        )));
    }
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let path = dir.join(&entry.path);
        let bytes = fs::read(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let crc = crc32fast::hash(&bytes);
        if crc != entry.crc32 {
            return Err(Error::Data(format!(
                "{}: checksum mismatch (manifest {}, file {crc})",
                entry.path, entry.crc32
            )));
        }
        let frames = parse_raster(&bytes, &entry.path)?;
        let got_shape = [
            frames.len(),
            frames[0].shape()[0],
            frames[0].shape()[1],
            frames[0].shape()[2],
        ];
        if got_shape != entry.shape {
            return Err(Error::Data(format!(
                "{}: shape {got_shape:?} does not match manifest {:?}",
                entry.path, entry.shape
            )));
        }
        for label in &entry.labels {
            if *label >= manifest.num_classes {
                return Err(Error::Data(format!(
                    "{}: label {label} out of range for {} classes",
                    entry.path, manifest.num_classes
                )));
            }
        }
        let sample = VideoSample::new(entry.video_id.clone(), frames, entry.labels.clone())?;
        videos.push((sample, entry.split));
    }
    Ok(Dataset {
        dir: dir.to_path_buf(),
        num_classes: manifest.num_classes,
        task: manifest.task,
        videos,
    })
}

/// Convenience for tests: generate into a directory and load back.
pub fn generate_and_load(cfg: &TaskConfig, dir: &Path) -> Result<Dataset> {
    generate(cfg, dir)?;
    load(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use tempfile::TempDir;

    fn tiny_cfg(task: Task) -> TaskConfig {
        TaskConfig {
            task,
            num_classes: 4,
            frames: 6,
            frame_size: 16,
            channels: 3,
            noise_sigma: 0.05,
            seed: 900,
            train_videos: 8,
            test_videos: 4,
        }
    }

    fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        for entry in walk(dir) {
            let rel = entry.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            out.insert(rel, fs::read(&entry).unwrap());
        }
        out
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut files = Vec::new();
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                files.extend(walk(&p));
            } else {
                files.push(p);
            }
        }
        files
    }

    #[test]
    fn generation_is_byte_identical_for_fixed_config() {
        let cfg = tiny_cfg(Task::ShapeIdentity);
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        generate(&cfg, d1.path()).unwrap();
        generate(&cfg, d2.path()).unwrap();
        assert_eq!(dir_bytes(d1.path()), dir_bytes(d2.path()));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = tiny_cfg(Task::MotionDirection);
        let dir = TempDir::new().unwrap();
        generate(&cfg, dir.path()).unwrap();
        let ds = load(dir.path()).unwrap();
        // Re-synthesize the first train video with the same stream and compare.
        let mut rng = substream_indexed(cfg.seed, "video", 0);
        let frames = synthesize_video(&cfg, 0, &mut rng);
        assert_eq!(ds.videos[0].0.frames, frames);
    }

    #[test]
    fn order_pair_reversal_is_exact_by_construction() {
        let cfg = tiny_cfg(Task::OrderPair);
        // Same sample stream for both classes of the pair: the odd class is
        // the reversed frame list of the even-style render.
        let mut r0 = substream_indexed(cfg.seed, "video", 7);
        let mut r1 = substream_indexed(cfg.seed, "video", 7);
        let fwd = synthesize_video(&cfg, 2, &mut r0);
        let rev = synthesize_video(&cfg, 3, &mut r1);
        let mut flipped = fwd.clone();
        flipped.reverse();
        assert_eq!(rev, flipped);
    }

    #[test]
    fn motion_direction_mean_frame_difference_tracks_direction() {
        let mut cfg = tiny_cfg(Task::MotionDirection);
        cfg.num_classes = 4;
        cfg.frames = 8;
        cfg.frame_size = 24;
        cfg.noise_sigma = 0.0;
        let size = cfg.frame_size as f64;
        for class in 0..cfg.num_classes {
            let mut rng = substream_indexed(cfg.seed, "video", 1000 + class as u64);
            let frames = synthesize_video(&cfg, class, &mut rng);
            // Intensity-weighted circular centroid (phasor mean), well-defined
            // under the toroidal wrap.
            let centroid = |t: &Tensor| -> (f64, f64) {
                let d = t.data();
                let (h, w) = (t.shape()[1], t.shape()[2]);
                let (mut cxs, mut cxc, mut cys, mut cyc) = (0.0, 0.0, 0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let v = d[y * w + x]; // channel 0
                        let px = 2.0 * PI * x as f64 / w as f64;
                        let py = 2.0 * PI * y as f64 / h as f64;
                        cxs += v * px.sin();
                        cxc += v * px.cos();
                        cys += v * py.sin();
                        cyc += v * py.cos();
                    }
                }
                (
                    w as f64 * cxs.atan2(cxc) / (2.0 * PI),
                    h as f64 * cys.atan2(cyc) / (2.0 * PI),
                )
            };
            let (mut mx, mut my) = (0.0, 0.0);
            for t in 1..frames.len() {
                let (x0, y0) = centroid(&frames[t - 1]);
                let (x1, y1) = centroid(&frames[t]);
                let mut dx = x1 - x0;
                let mut dy = y1 - y0;
                if dx > size / 2.0 {
                    dx -= size;
                }
                if dx < -size / 2.0 {
                    dx += size;
                }
                if dy > size / 2.0 {
                    dy -= size;
                }
                if dy < -size / 2.0 {
                    dy += size;
                }
                mx += dx;
                my += dy;
            }
            let angle = my.atan2(mx);
            let want = 2.0 * PI * class as f64 / cfg.num_classes as f64;
            let mut delta = (angle - want).abs();
            if delta > PI {
                delta = 2.0 * PI - delta;
            }
            assert!(
                delta < PI / 4.0,
                "class {class}: angle {angle:.2} vs designated {want:.2}"
            );
        }
    }

    #[test]
    fn padding_repeats_from_start() {
        let frames: Vec<Tensor> = (0..7)
            .map(|i| Tensor::new(vec![1, 1, 1], vec![i as f64]).unwrap())
            .collect();
        let v = VideoSample::new("v".into(), frames, vec![0]).unwrap();
        let padded = v.frames_padded(10);
        let values: Vec<f64> = padded.iter().map(|t| t.data()[0]).collect();
        assert_eq!(values, [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn epoch_shuffle_is_deterministic() {
        let cfg = tiny_cfg(Task::ShapeIdentity);
        let dir = TempDir::new().unwrap();
        let ds = generate_and_load(&cfg, dir.path()).unwrap();
        assert_eq!(ds.epoch_order(5, 0), ds.epoch_order(5, 0));
        assert_ne!(ds.epoch_order(5, 0), ds.epoch_order(5, 1));
    }

    #[test]
    fn label_histogram_is_balanced() {
        let cfg = tiny_cfg(Task::OrderPair);
        let dir = TempDir::new().unwrap();
        let ds = generate_and_load(&cfg, dir.path()).unwrap();
        let mut counts = vec![0usize; cfg.num_classes];
        for idx in ds.split_indices(Split::Train) {
            counts[ds.videos[idx].0.labels[0]] += 1;
        }
        // 8 train videos over 4 classes: exactly 2 each.
        assert_eq!(counts, vec![2, 2, 2, 2]);
    }

    #[test]
    fn checksum_mismatch_is_a_data_error_naming_the_file() {
        let cfg = tiny_cfg(Task::ShapeIdentity);
        let dir = TempDir::new().unwrap();
        generate(&cfg, dir.path()).unwrap();
        let victim = dir.path().join("videos/train-00000.bin");
        let mut bytes = fs::read(&victim).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        fs::write(&victim, bytes).unwrap();
        match load(dir.path()) {
            Err(Error::Data(m)) => assert!(m.contains("train-00000.bin"), "{m}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_a_data_error() {
        let cfg = tiny_cfg(Task::ShapeIdentity);
        let dir = TempDir::new().unwrap();
        generate(&cfg, dir.path()).unwrap();
        let victim = dir.path().join("videos/train-00001.bin");
        let bytes = fs::read(&victim).unwrap();
        let truncated = &bytes[..bytes.len() - 10];
        fs::write(&victim, truncated).unwrap();
        // Fix the manifest checksum so truncation itself is what is detected.
        let manifest_path = dir.path().join("manifest.json");
        let mut manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
        manifest.videos[1].crc32 = crc32fast::hash(truncated);
        fs::write(
            &manifest_path,
            serde_json::to_string_pretty(&manifest).unwrap(),
        )
        .unwrap();
        match load(dir.path()) {
            Err(Error::Data(m)) => assert!(m.contains("truncated"), "{m}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn glyphs_are_distinct_across_classes() {
        let cfg = tiny_cfg(Task::ShapeIdentity);
        for a in 0..cfg.num_classes {
            for b in 0..a {
                assert_ne!(class_glyph(&cfg, a), class_glyph(&cfg, b));
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_cfg(Task::OrderPair);
        cfg.num_classes = 5;
        assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));
        let mut cfg = tiny_cfg(Task::ShapeIdentity);
        cfg.frames = 0;
        assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));
    }
}
