//! Comparison harness: trains every feature-pooling variant on one dataset
//! under an identical budget and emits a table of clip-level and video-level
//! hit rates for side-by-side reading.

use crate::arch::{ArchKind, ArchitectureSpec};
use crate::data::{Dataset, Split};
use crate::encoder::{EncoderConfig, FeatureTap};
use crate::error::Result;
use crate::eval::{self, EvalReport, EvalSettings};
use crate::model::{self, ModelSpec};
use crate::train::{train_loop, OptimizerConfig, TrainSettings};

/// The five max-pooling placements of the comparison table.
pub const COMPARED_KINDS: [ArchKind; 5] = [
    ArchKind::ConvPooling,
    ArchKind::LatePooling,
    ArchKind::SlowPooling,
    ArchKind::LocalPooling,
    ArchKind::TimeDomainConv,
];

#[derive(Debug, Clone)]
pub struct ComparisonSettings {
    /// Encoder template with feature_tap = last_conv; the Late Pooling run
    /// derives its shared-FC variant from it.
    pub encoder: EncoderConfig,
    pub fc_widths: Vec<usize>,
    pub frames: usize,
    pub temporal_window: usize,
    pub temporal_stride: usize,
    pub tdc_channels: usize,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Per-kind architecture spec sharing the comparison's common budget.
pub fn spec_for_kind(settings: &ComparisonSettings, kind: ArchKind, num_classes: usize) -> ModelSpec {
    let mut encoder = settings.encoder.clone();
    if kind == ArchKind::LatePooling {
        encoder.feature_tap = FeatureTap::LastFc;
        encoder.fc_layers = settings.fc_widths.clone();
    }
    ModelSpec::Pooling(ArchitectureSpec {
        kind,
        encoder,
        fc_widths: settings.fc_widths.clone(),
        num_classes,
        frames: settings.frames,
        temporal_window: settings.temporal_window,
        temporal_stride: settings.temporal_stride,
        tdc_channels: settings.tdc_channels,
    })
}

/// Train and evaluate every compared kind; rows come back in
/// [`COMPARED_KINDS`] order.
pub fn compare_pooling_architectures(
    dataset: &Dataset,
    settings: &ComparisonSettings,
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::with_capacity(COMPARED_KINDS.len());
    for kind in COMPARED_KINDS {
        let spec = spec_for_kind(settings, kind, dataset.num_classes);
        let params = model::init_params(&spec, settings.seed)?;
        let train_settings = TrainSettings {
            batch_size: settings.batch_size,
            ..TrainSettings::new(settings.seed, settings.steps)
        };
        let outcome = train_loop(dataset, &spec, params, &settings.optimizer, &train_settings, None)?;
        let report = eval::evaluate(
            &spec,
            &outcome.state.params,
            dataset,
            Split::Test,
            &EvalSettings::plain(settings.seed),
            None,
        )?;
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ConvLayer;

    #[test]
    fn per_kind_specs_validate_and_share_the_budget() {
        let settings = ComparisonSettings {
            encoder: EncoderConfig {
                input_shape: (3, 12, 12),
                conv_layers: vec![ConvLayer::new(4, 3, 1, 2, 2)],
                global_avg_pool: false,
                fc_layers: vec![],
                dropout_ratio: 0.0,
                feature_tap: FeatureTap::LastConv,
            },
            fc_widths: vec![8, 8],
            frames: 4,
            temporal_window: 2,
            temporal_stride: 2,
            tdc_channels: 2,
            optimizer: OptimizerConfig::default(),
            steps: 1,
            batch_size: 2,
            seed: 0,
        };
        for kind in COMPARED_KINDS {
            let spec = spec_for_kind(&settings, kind, 4);
            spec.validate().unwrap();
            assert_eq!(spec.frames(), 4);
        }
    }
}
