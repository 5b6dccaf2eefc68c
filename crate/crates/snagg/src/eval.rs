//! Video-level prediction and evaluation: fusion of per-frame predictions,
//! data-augmentation sampling with multi-sample averaging, two-stream late
//! fusion, and Hit@k metrics.

use crate::data::{AugmentDescriptor, Dataset, Split, VideoSample};
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::gain_schedule;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    /// The prediction at the last time step.
    LastStep,
    /// Elementwise max over time, renormalized.
    MaxPool,
    /// Elementwise sum over time, renormalized.
    SumThenMax,
    /// Gain-weighted sum over time, renormalized.
    WeightedSum,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::LastStep,
        FusionStrategy::MaxPool,
        FusionStrategy::SumThenMax,
        FusionStrategy::WeightedSum,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionStrategy::LastStep => "last_step",
            FusionStrategy::MaxPool => "max_pool",
            FusionStrategy::SumThenMax => "sum_then_max",
            FusionStrategy::WeightedSum => "weighted_sum",
        }
    }

    pub fn parse(s: &str) -> Result<FusionStrategy> {
        FusionStrategy::ALL
            .iter()
            .find(|f| f.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::Parameter(format!(
                    "unknown fusion strategy {s:?}; expected last_step, max_pool, sum_then_max or weighted_sum"
                ))
            })
    }
}

/// Per-frame class distributions plus their fused video-level distribution.
#[derive(Debug, Clone)]
pub struct PredictionTrace {
    pub per_frame_probs: Vec<Vec<f64>>,
    pub fused: Vec<f64>,
    pub strategy: FusionStrategy,
}

impl PredictionTrace {
    pub fn new(per_frame_probs: Vec<Vec<f64>>, strategy: FusionStrategy, gain: Option<&[f64]>) -> Result<Self> {
        let fused = fuse_predictions(&per_frame_probs, strategy, gain)?;
        Ok(PredictionTrace {
            per_frame_probs,
            fused,
            strategy,
        })
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.fused)
    }
}

pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

fn check_rows(per_frame: &[Vec<f64>]) -> Result<usize> {
    if per_frame.is_empty() {
        return Err(Error::Parameter("fuse_predictions: empty trace".into()));
    }
    let k = per_frame[0].len();
    for (t, row) in per_frame.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Dimension(format!(
                "fuse_predictions: frame {t} has {} classes, expected {k}",
                row.len()
            )));
        }
        if row.iter().any(|&p| p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Parameter(format!(
                "fuse_predictions: frame {t} is not a probability distribution"
            )));
        }
    }
    Ok(k)
}

fn renormalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let z: f64 = v.iter().sum();
    if z <= 0.0 {
        return Err(Error::Parameter(
            "fuse_predictions: fused mass is zero; cannot renormalize".into(),
        ));
    }
    for p in &mut v {
        *p /= z;
    }
    Ok(v)
}

/// Combine per-frame distributions into a single video-level distribution.
/// `gain` is required for [`FusionStrategy::WeightedSum`] and must have one
/// entry per frame; when absent, the linear 0..1 schedule is used.
pub fn fuse_predictions(
    per_frame: &[Vec<f64>],
    strategy: FusionStrategy,
    gain: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let k = check_rows(per_frame)?;
    let t = per_frame.len();
    match strategy {
        FusionStrategy::LastStep => Ok(per_frame[t - 1].clone()),
        FusionStrategy::MaxPool => {
            let mut out = vec![f64::NEG_INFINITY; k];
            for row in per_frame {
                for (o, &p) in out.iter_mut().zip(row) {
                    *o = o.max(p);
                }
            }
            renormalize(out)
        }
        FusionStrategy::SumThenMax => {
            let mut out = vec![0.0; k];
            for row in per_frame {
                for (o, &p) in out.iter_mut().zip(row) {
                    *o += p;
                }
            }
            renormalize(out)
        }
        FusionStrategy::WeightedSum => {
            let schedule;
            let g = match gain {
                Some(g) => g,
                None => {
                    schedule = gain_schedule(t)?;
                    &schedule
                }
            };
            if g.len() != t {
                return Err(Error::Dimension(format!(
                    "fuse_predictions: gain length {} != {t} frames",
                    g.len()
                )));
            }
            let mut out = vec![0.0; k];
            for (row, &gt) in per_frame.iter().zip(g) {
                for (o, &p) in out.iter_mut().zip(row) {
                    *o += gt * p;
                }
            }
            renormalize(out)
        }
    }
}

/// Fraction of samples whose top-k predicted classes intersect the label set.
/// Ties in the top-k cut are broken toward the lower class index.
pub fn hit_at_k(predictions: &[Vec<f64>], labels: &[Vec<usize>], k: usize) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "hit_at_k: {} predictions vs {} label sets",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Parameter("hit_at_k: no samples".into()));
    }
    if k == 0 {
        return Err(Error::Parameter("hit_at_k: k must be >= 1".into()));
    }
    let mut hits = 0usize;
    for (probs, label_set) in predictions.iter().zip(labels) {
        if k > probs.len() {
            return Err(Error::Parameter(format!(
                "hit_at_k: k={k} exceeds {} classes",
                probs.len()
            )));
        }
        if label_set.is_empty() {
            return Err(Error::Parameter("hit_at_k: empty label set".into()));
        }
        let topk = top_k_classes(probs, k);
        if topk.iter().any(|c| label_set.contains(c)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.len() as f64)
}

/// Classes sorted by (probability desc, index asc), truncated to k.
pub fn top_k_classes(probs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Crop geometry for augmentation: frames are bilinearly resized to
/// `resize` x `resize`, then a `crop` x `crop` region is taken. Desk scale is
/// 40 -> 32; the full-scale reference is 256 -> 220.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentGeometry {
    pub resize: usize,
    pub crop: usize,
}

impl AugmentGeometry {
    pub fn desk() -> AugmentGeometry {
        AugmentGeometry { resize: 40, crop: 32 }
    }

    pub fn full_scale() -> AugmentGeometry {
        AugmentGeometry {
            resize: 256,
            crop: 220,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::Parameter(format!(
                "crop {} must be positive and fit the {} resize",
                self.crop, self.resize
            )));
        }
        Ok(())
    }
}

/// Corner-aligned bilinear resize of one C x H x W frame to size x size:
/// source coordinate = dst * (S - 1) / (D - 1).
fn resize_frame(frame: &Tensor, size: usize) -> Tensor {
    let s = frame.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = frame.data();
    let mut out = vec![0.0; c * size * size];
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..size {
            let sy = if size > 1 {
                y as f64 * (h - 1) as f64 / (size - 1) as f64
            } else {
                0.0
            };
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for x in 0..size {
                let sx = if size > 1 {
                    x as f64 * (w - 1) as f64 / (size - 1) as f64
                } else {
                    0.0
                };
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * size + y) * size + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, size, size], out).unwrap()
}

fn crop_frame(frame: &Tensor, y0: usize, x0: usize, size: usize) -> Tensor {
    let s = frame.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    debug_assert!(y0 + size <= h && x0 + size <= w);
    let d = frame.data();
    let mut out = vec![0.0; c * size * size];
    for ch in 0..c {
        for y in 0..size {
            for x in 0..size {
                out[(ch * size + y) * size + x] = d[(ch * h + y0 + y) * w + x0 + x];
            }
        }
    }
    Tensor::new(vec![c, size, size], out).unwrap()
}

fn flip_frame(frame: &Tensor) -> Tensor {
    let s = frame.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = frame.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = d[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

/// Apply one augmentation descriptor to every frame identically: temporal
/// offset (repeat-from-start padding when the request runs past the end),
/// resize, crop, optional horizontal flip.
pub fn augment_with(
    video: &VideoSample,
    desc: &AugmentDescriptor,
    out_frames: usize,
    geometry: &AugmentGeometry,
) -> Result<VideoSample> {
    geometry.validate()?;
    if desc.crop_y + geometry.crop > geometry.resize || desc.crop_x + geometry.crop > geometry.resize {
        return Err(Error::Parameter(format!(
            "crop at ({}, {}) exceeds the {} resize",
            desc.crop_y, desc.crop_x, geometry.resize
        )));
    }
    let stored = video.num_frames();
    let frames: Vec<Tensor> = (0..out_frames)
        .map(|i| {
            let src = &video.frames[(desc.start_frame + i) % stored];
            let resized = resize_frame(src, geometry.resize);
            let cropped = crop_frame(&resized, desc.crop_y, desc.crop_x, geometry.crop);
            if desc.flip {
                flip_frame(&cropped)
            } else {
                cropped
            }
        })
        .collect();
    let mut out = VideoSample::new(video.video_id.clone(), frames, video.labels.clone())?;
    out.augment = Some(*desc);
    Ok(out)
}

/// Draw one start offset, one crop rectangle and one flip decision, then
/// apply them to every frame.
pub fn augment_sample(
    video: &VideoSample,
    out_frames: usize,
    geometry: &AugmentGeometry,
    rng: &mut impl Rng,
) -> Result<VideoSample> {
    geometry.validate()?;
    let stored = video.num_frames();
    let max_start = stored.saturating_sub(out_frames);
    let desc = AugmentDescriptor {
        start_frame: if max_start > 0 {
            rng.gen_range(0..=max_start)
        } else {
            0
        },
        crop_y: rng.gen_range(0..=geometry.resize - geometry.crop),
        crop_x: rng.gen_range(0..=geometry.resize - geometry.crop),
        flip: rng.gen_bool(0.5),
    };
    augment_with(video, &desc, out_frames, geometry)
}

/// Deterministic center-crop pipeline used for single-pass prediction.
pub fn center_descriptor(geometry: &AugmentGeometry) -> AugmentDescriptor {
    AugmentDescriptor {
        start_frame: 0,
        crop_y: (geometry.resize - geometry.crop) / 2,
        crop_x: (geometry.resize - geometry.crop) / 2,
        flip: false,
    }
}

/// Video-level prediction: the mean of fused distributions over
/// `num_samples` random augmentations. `num_samples == 0` is the single-pass
/// whole-video mode (center crop when geometry is supplied, no sampling).
#[allow(clippy::too_many_arguments)]
pub fn video_predict(
    spec: &ModelSpec,
    params: &ParamSet,
    video: &VideoSample,
    num_samples: usize,
    strategy: FusionStrategy,
    geometry: Option<&AugmentGeometry>,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let t = spec.frames();
    if num_samples == 0 {
        let prepared = match geometry {
            Some(g) => augment_with(video, &center_descriptor(g), t, g)?,
            None => model::with_frames(video, t),
        };
        let probs = model::predict_probs(spec, &prepared, params)?;
        return Ok(PredictionTrace::new(probs, strategy, None)?.fused);
    }
    let mut mean = Vec::new();
    for _ in 0..num_samples {
        let prepared = match geometry {
            Some(g) => augment_sample(video, t, g, rng)?,
            None => model::with_frames(video, t),
        };
        let probs = model::predict_probs(spec, &prepared, params)?;
        let fused = PredictionTrace::new(probs, strategy, None)?.fused;
        if mean.is_empty() {
            mean = vec![0.0; fused.len()];
        }
        for (m, p) in mean.iter_mut().zip(&fused) {
            *m += p;
        }
    }
    for m in &mut mean {
        *m /= num_samples as f64;
    }
    Ok(mean)
}

/// Late fusion of the two streams: weight * image + (1 - weight) * flow.
pub fn two_stream_fuse(image_probs: &[f64], flow_probs: &[f64], weight: f64) -> Result<Vec<f64>> {
    if image_probs.len() != flow_probs.len() {
        return Err(Error::Dimension(format!(
            "two_stream_fuse: {} vs {} classes",
            image_probs.len(),
            flow_probs.len()
        )));
    }
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Parameter(format!(
            "two_stream_fuse: weight must be in [0, 1], got {weight}"
        )));
    }
    Ok(image_probs
        .iter()
        .zip(flow_probs)
        .map(|(&a, &b)| weight * a + (1.0 - weight) * b)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub frames: usize,
    pub clip_hit1: f64,
    pub hit1: f64,
    pub hit5: f64,
    /// Per-class video-level accuracy.
    pub per_class: Vec<f64>,
    pub num_samples: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "method,frames,clip_hit1,hit1,hit5";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.method, self.frames, self.clip_hit1, self.hit1, self.hit5
        )
    }
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(EvalReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Evaluation settings for one pass over a dataset split.
#[derive(Debug, Clone)]
pub struct EvalSettings {
    /// Augmentation passes averaged per video (0 = single-pass mode).
    pub num_samples: usize,
    pub strategy: FusionStrategy,
    pub geometry: Option<AugmentGeometry>,
    pub seed: u64,
}

impl EvalSettings {
    pub fn plain(seed: u64) -> EvalSettings {
        EvalSettings {
            num_samples: 0,
            strategy: FusionStrategy::WeightedSum,
            geometry: None,
            seed,
        }
    }
}

/// Evaluate a model (optionally fused with a flow-stream model) over one
/// split. Clip-level numbers come from a single pass; video-level numbers are
/// the multi-sample averages.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ParamSet,
    dataset: &Dataset,
    split: Split,
    settings: &EvalSettings,
    flow: Option<(&ModelSpec, &ParamSet, &Dataset, f64)>,
) -> Result<EvalReport> {
    let indices = dataset.split_indices(split);
    if indices.is_empty() {
        return Err(Error::Parameter("evaluate: empty split".into()));
    }
    let k = dataset.num_classes;
    let hit5_k = k.min(5);
    let mut clip_preds = Vec::with_capacity(indices.len());
    let mut video_preds = Vec::with_capacity(indices.len());
    let mut labels: Vec<Vec<usize>> = Vec::with_capacity(indices.len());
    let mut per_class_hits = vec![0usize; k];
    let mut per_class_total = vec![0usize; k];

    for (slot, &idx) in indices.iter().enumerate() {
        let (video, _) = &dataset.videos[idx];
        let mut rng = crate::rng::substream_indexed(settings.seed, "augment", slot as u64);
        let fuse_with_flow = |probs: Vec<f64>, rng: &mut rand_chacha::ChaCha8Rng, samples: usize| -> Result<Vec<f64>> {
            match &flow {
                None => Ok(probs),
                Some((fspec, fparams, fdataset, weight)) => {
                    let (fvideo, _) = fdataset
                        .videos
                        .iter()
                        .find(|(v, _)| v.video_id == video.video_id)
                        .ok_or_else(|| {
                            Error::Data(format!("flow dataset is missing video {}", video.video_id))
                        })?;
                    let fprobs = video_predict(
                        fspec,
                        fparams,
                        fvideo,
                        samples,
                        settings.strategy,
                        settings.geometry.as_ref(),
                        rng,
                    )?;
                    two_stream_fuse(&probs, &fprobs, *weight)
                }
            }
        };

        let clip = video_predict(spec, params, video, 0, settings.strategy, settings.geometry.as_ref(), &mut rng)?;
        let clip = fuse_with_flow(clip, &mut rng, 0)?;
        let vid = if settings.num_samples == 0 {
            clip.clone()
        } else {
            let v = video_predict(
                spec,
                params,
                video,
                settings.num_samples,
                settings.strategy,
                settings.geometry.as_ref(),
                &mut rng,
            )?;
            fuse_with_flow(v, &mut rng, settings.num_samples)?
        };

        let label_set = video.labels.clone();
        let predicted = argmax(&vid);
        for &l in &label_set {
            per_class_total[l] += 1;
        }
        if label_set.contains(&predicted) {
            per_class_hits[predicted] += 1;
        }
        clip_preds.push(clip);
        video_preds.push(vid);
        labels.push(label_set);
    }

    let report = EvalReport {
        method: spec.kind_name().to_string(),
        frames: spec.frames(),
        clip_hit1: hit_at_k(&clip_preds, &labels, 1)?,
        hit1: hit_at_k(&video_preds, &labels, 1)?,
        hit5: hit_at_k(&video_preds, &labels, hit5_k)?,
        per_class: per_class_hits
            .iter()
            .zip(&per_class_total)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect(),
        num_samples: indices.len(),
    };
    debug_assert!(report.hit1 <= report.hit5 + 1e-12);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn rand_dist(k: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut v: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let z: f64 = v.iter().sum();
        for p in &mut v {
            *p /= z;
        }
        v
    }

    #[test]
    fn single_frame_trace_is_fixed_point_of_every_strategy() {
        let mut rng = substream(1, "fuse");
        let row = rand_dist(5, &mut rng);
        for strategy in FusionStrategy::ALL {
            let fused = fuse_predictions(&[row.clone()], strategy, None).unwrap();
            for (a, b) in fused.iter().zip(&row) {
                assert!((a - b).abs() < 1e-12, "{}", strategy.name());
            }
        }
    }

    #[test]
    fn identical_rows_are_a_fixed_point_of_every_strategy() {
        let mut rng = substream(2, "fuse");
        let row = rand_dist(4, &mut rng);
        let trace = vec![row.clone(); 6];
        for strategy in FusionStrategy::ALL {
            let fused = fuse_predictions(&trace, strategy, None).unwrap();
            for (a, b) in fused.iter().zip(&row) {
                assert!((a - b).abs() < 1e-12, "{}", strategy.name());
            }
        }
    }

    #[test]
    fn strategies_match_loop_oracles() {
        let mut rng = substream(3, "fuse");
        let trace: Vec<Vec<f64>> = (0..6).map(|_| rand_dist(4, &mut rng)).collect();
        let gain = gain_schedule(6).unwrap();

        let last = fuse_predictions(&trace, FusionStrategy::LastStep, None).unwrap();
        assert_eq!(last, trace[5]);

        let maxed = fuse_predictions(&trace, FusionStrategy::MaxPool, None).unwrap();
        let mut oracle: Vec<f64> = (0..4)
            .map(|k| trace.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let z: f64 = oracle.iter().sum();
        for p in &mut oracle {
            *p /= z;
        }
        for (a, b) in maxed.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }

        let summed = fuse_predictions(&trace, FusionStrategy::SumThenMax, None).unwrap();
        let mut oracle: Vec<f64> = (0..4).map(|k| trace.iter().map(|r| r[k]).sum()).collect();
        let z: f64 = oracle.iter().sum();
        for p in &mut oracle {
            *p /= z;
        }
        for (a, b) in summed.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }

        let weighted = fuse_predictions(&trace, FusionStrategy::WeightedSum, Some(&gain)).unwrap();
        let mut oracle: Vec<f64> = (0..4)
            .map(|k| trace.iter().zip(&gain).map(|(r, g)| g * r[k]).sum())
            .collect();
        let z: f64 = oracle.iter().sum();
        for p in &mut oracle {
            *p /= z;
        }
        for (a, b) in weighted.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_then_max_argmax_ignores_common_positive_scaling() {
        // Scaling all frames' probabilities by one positive constant before
        // renormalization cannot change the argmax.
        let mut rng = substream(4, "fuse");
        let trace: Vec<Vec<f64>> = (0..5).map(|_| rand_dist(6, &mut rng)).collect();
        let fused = fuse_predictions(&trace, FusionStrategy::SumThenMax, None).unwrap();
        // Unnormalized scaled sum.
        let c = 3.7;
        let scaled: Vec<f64> = (0..6)
            .map(|k| trace.iter().map(|r| c * r[k]).sum::<f64>())
            .collect();
        assert_eq!(argmax(&fused), argmax(&scaled));
    }

    #[test]
    fn empty_trace_is_a_parameter_error() {
        assert!(matches!(
            fuse_predictions(&[], FusionStrategy::MaxPool, None),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn fused_outputs_are_distributions() {
        let mut rng = substream(5, "fuse");
        for _ in 0..50 {
            let t = rng.gen_range(1..8);
            let trace: Vec<Vec<f64>> = (0..t).map(|_| rand_dist(5, &mut rng)).collect();
            for strategy in FusionStrategy::ALL {
                let fused = fuse_predictions(&trace, strategy, None).unwrap();
                assert!(fused.iter().all(|&p| p >= 0.0));
                assert!((fused.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn hit_at_full_k_is_always_one() {
        let mut rng = substream(6, "hit");
        let preds: Vec<Vec<f64>> = (0..20).map(|_| rand_dist(7, &mut rng)).collect();
        let labels: Vec<Vec<usize>> = (0..20).map(|_| vec![rng.gen_range(0..7)]).collect();
        assert_eq!(hit_at_k(&preds, &labels, 7).unwrap(), 1.0);
    }

    #[test]
    fn label_ranked_exactly_kth_counts_for_k_not_k_minus_one() {
        let probs = vec![0.4, 0.3, 0.2, 0.1];
        let labels = vec![vec![2usize]]; // ranked third
        let preds = vec![probs];
        assert_eq!(hit_at_k(&preds, &labels, 3).unwrap(), 1.0);
        assert_eq!(hit_at_k(&preds, &labels, 2).unwrap(), 0.0);
    }

    #[test]
    fn hit_at_k_matches_brute_force_oracle() {
        let mut rng = substream(7, "hit");
        let preds: Vec<Vec<f64>> = (0..100).map(|_| rand_dist(9, &mut rng)).collect();
        let labels: Vec<Vec<usize>> = (0..100)
            .map(|_| {
                let n = rng.gen_range(1..3);
                (0..n).map(|_| rng.gen_range(0..9)).collect()
            })
            .collect();
        for k in 1..=9 {
            let got = hit_at_k(&preds, &labels, k).unwrap();
            // Brute force: sort (prob, -index) descending and check the cut.
            let mut hits = 0;
            for (p, ls) in preds.iter().zip(&labels) {
                let mut order: Vec<usize> = (0..9).collect();
                order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
                if order[..k].iter().any(|c| ls.contains(c)) {
                    hits += 1;
                }
            }
            assert_eq!(got, hits as f64 / 100.0, "k={k}");
        }
    }

    #[test]
    fn hit_at_k_is_monotone_in_k() {
        let mut rng = substream(8, "hit");
        let preds: Vec<Vec<f64>> = (0..40).map(|_| rand_dist(6, &mut rng)).collect();
        let labels: Vec<Vec<usize>> = (0..40).map(|_| vec![rng.gen_range(0..6)]).collect();
        let mut prev = 0.0;
        for k in 1..=6 {
            let h = hit_at_k(&preds, &labels, k).unwrap();
            assert!(h >= prev);
            prev = h;
        }
    }

    #[test]
    fn hit_at_k_rejects_k_beyond_class_count() {
        let preds = vec![vec![0.5, 0.5]];
        let labels = vec![vec![0usize]];
        assert!(matches!(
            hit_at_k(&preds, &labels, 3),
            Err(Error::Parameter(_))
        ));
    }

    fn marker_video(t: usize, size: usize) -> VideoSample {
        // Frame i carries a distinctive diagonal ramp offset by i.
        let frames: Vec<Tensor> = (0..t)
            .map(|i| {
                let mut data = vec![0.0; 3 * size * size];
                for c in 0..3 {
                    for y in 0..size {
                        for x in 0..size {
                            data[(c * size + y) * size + x] =
                                ((x + y * 2 + i * 3 + c) % 17) as f64 / 17.0;
                        }
                    }
                }
                Tensor::new(vec![3, size, size], data).unwrap()
            })
            .collect();
        VideoSample::new("marker".into(), frames, vec![0]).unwrap()
    }

    #[test]
    fn center_crop_no_flip_is_deterministic() {
        let video = marker_video(4, 20);
        let geometry = AugmentGeometry { resize: 16, crop: 12 };
        let desc = center_descriptor(&geometry);
        assert_eq!(desc.crop_y, 2);
        assert_eq!(desc.crop_x, 2);
        assert!(!desc.flip);
        let a = augment_with(&video, &desc, 4, &geometry).unwrap();
        let b = augment_with(&video, &desc, 4, &geometry).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.augment, Some(desc));
    }

    #[test]
    fn equal_frames_stay_equal_after_augmentation() {
        let one = marker_video(1, 20);
        let mut video = one.clone();
        video.frames = vec![one.frames[0].clone(); 5];
        let geometry = AugmentGeometry { resize: 16, crop: 12 };
        let mut rng = substream(9, "aug");
        let out = augment_sample(&video, 5, &geometry, &mut rng).unwrap();
        for f in &out.frames[1..] {
            assert_eq!(f, &out.frames[0]);
        }
    }

    #[test]
    fn augmentation_descriptor_is_shared_across_frames() {
        // Applying the drawn descriptor frame-by-frame reproduces the sample.
        let video = marker_video(6, 20);
        let geometry = AugmentGeometry { resize: 16, crop: 12 };
        let mut rng = substream(10, "aug");
        let out = augment_sample(&video, 4, &geometry, &mut rng).unwrap();
        let desc = out.augment.unwrap();
        for (i, frame) in out.frames.iter().enumerate() {
            let src_idx = (desc.start_frame + i) % video.num_frames();
            let solo = VideoSample::new(
                "f".into(),
                vec![video.frames[src_idx].clone()],
                vec![0],
            )
            .unwrap();
            let single = augment_with(
                &solo,
                &AugmentDescriptor {
                    start_frame: 0,
                    ..desc
                },
                1,
                &geometry,
            )
            .unwrap();
            assert_eq!(frame, &single.frames[0], "frame {i}");
        }
    }

    #[test]
    fn double_flip_restores_the_crop() {
        let video = marker_video(3, 20);
        let geometry = AugmentGeometry { resize: 16, crop: 12 };
        let desc = AugmentDescriptor {
            start_frame: 0,
            crop_y: 1,
            crop_x: 3,
            flip: false,
        };
        let plain = augment_with(&video, &desc, 3, &geometry).unwrap();
        let flipped = augment_with(&video, &AugmentDescriptor { flip: true, ..desc }, 3, &geometry).unwrap();
        for (p, f) in plain.frames.iter().zip(&flipped.frames) {
            assert_eq!(p, &flip_frame(f));
        }
    }

    #[test]
    fn two_stream_weight_endpoints() {
        let img = vec![0.7, 0.2, 0.1];
        let flow = vec![0.1, 0.1, 0.8];
        assert_eq!(two_stream_fuse(&img, &flow, 1.0).unwrap(), img);
        assert_eq!(two_stream_fuse(&img, &flow, 0.0).unwrap(), flow);
        let uniform = vec![0.25; 4];
        for w in [0.0, 0.3, 0.5, 1.0] {
            assert_eq!(
                two_stream_fuse(&uniform, &uniform, w).unwrap(),
                uniform,
                "weight {w}"
            );
        }
        assert!(matches!(
            two_stream_fuse(&img, &[0.5, 0.5], 0.5),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn two_stream_argmax_follows_the_saturated_stream() {
        let img = vec![0.7, 0.2, 0.1];
        let flow = vec![0.1, 0.1, 0.8];
        assert_eq!(argmax(&two_stream_fuse(&img, &flow, 1.0).unwrap()), 0);
        assert_eq!(argmax(&two_stream_fuse(&img, &flow, 0.0).unwrap()), 2);
    }

    // video_predict behaviors need a live model.
    fn micro_model() -> (ModelSpec, ParamSet) {
        use crate::arch::{ArchKind, ArchitectureSpec};
        use crate::encoder::{ConvLayer, EncoderConfig, FeatureTap};
        let spec = ModelSpec::Pooling(ArchitectureSpec {
            kind: ArchKind::ConvPooling,
            encoder: EncoderConfig {
                input_shape: (3, 12, 12),
                conv_layers: vec![ConvLayer::new(2, 3, 1, 2, 2)],
                global_avg_pool: false,
                fc_layers: vec![],
                dropout_ratio: 0.0,
                feature_tap: FeatureTap::LastConv,
            },
            fc_widths: vec![6],
            num_classes: 4,
            frames: 3,
            temporal_window: 2,
            temporal_stride: 2,
            tdc_channels: 2,
        });
        let params = model::init_params(&spec, 15).unwrap();
        (spec, params)
    }

    #[test]
    fn single_sample_with_fixed_descriptor_equals_single_pass() {
        let (spec, params) = micro_model();
        let video = marker_video(3, 20);
        let geometry = AugmentGeometry { resize: 16, crop: 12 };
        // num_samples = 0 uses the deterministic center pipeline.
        let single = video_predict(
            &spec,
            &params,
            &video,
            0,
            FusionStrategy::WeightedSum,
            Some(&geometry),
            &mut substream(20, "aug"),
        )
        .unwrap();
        let prepared = augment_with(&video, &center_descriptor(&geometry), 3, &geometry).unwrap();
        let probs = model::predict_probs(&spec, &prepared, &params).unwrap();
        let want = PredictionTrace::new(probs, FusionStrategy::WeightedSum, None)
            .unwrap()
            .fused;
        assert_eq!(single, want);
    }

    #[test]
    fn multi_sample_average_matches_external_loop() {
        let (spec, params) = micro_model();
        let video = marker_video(6, 20);
        let geometry = AugmentGeometry { resize: 16, crop: 12 };
        let got = video_predict(
            &spec,
            &params,
            &video,
            8,
            FusionStrategy::MaxPool,
            Some(&geometry),
            &mut substream(21, "aug"),
        )
        .unwrap();
        // External loop over the same generator stream.
        let mut rng = substream(21, "aug");
        let mut mean = vec![0.0; 4];
        for _ in 0..8 {
            let s = augment_sample(&video, 3, &geometry, &mut rng).unwrap();
            let probs = model::predict_probs(&spec, &s, &params).unwrap();
            let fused = PredictionTrace::new(probs, FusionStrategy::MaxPool, None)
                .unwrap()
                .fused;
            for (m, p) in mean.iter_mut().zip(&fused) {
                *m += p;
            }
        }
        for m in &mut mean {
            *m /= 8.0;
        }
        assert_eq!(got, mean);
    }

    #[test]
    fn averaging_identical_distributions_is_identity() {
        let (spec, params) = micro_model();
        let one = marker_video(1, 12);
        let mut video = one.clone();
        video.frames = vec![one.frames[0].clone(); 3];
        // No geometry: every sample sees the same frames, so the average
        // equals the single prediction.
        let a = video_predict(
            &spec,
            &params,
            &video,
            5,
            FusionStrategy::SumThenMax,
            None,
            &mut substream(22, "aug"),
        )
        .unwrap();
        let b = video_predict(
            &spec,
            &params,
            &video,
            0,
            FusionStrategy::SumThenMax,
            None,
            &mut substream(23, "aug"),
        )
        .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
