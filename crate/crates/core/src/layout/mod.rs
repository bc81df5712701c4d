//! Page layout: a small encoder–decoder predicts baseline, height and region
//! maps, which are decoded deterministically into text-line geometry.

mod decode;
mod net;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::raster::Raster;

pub use decode::{connected_components, decode_baselines, simplify_polyline, Component, MAX_VERTICES, SIMPLIFY_TOLERANCE};
pub use net::{
    predict_maps, processing_scale, rasterize_targets, train_layout_net, LayoutNet, LayoutTargets, LayoutTrainConfig, LayoutTrainOutcome,
    HEADS, WIDTHS,
};

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("empty image")]
    EmptyImage,
    #[error("target maps are {got:?}, expected {expected:?}")]
    Misaligned { expected: (usize, usize), got: (usize, usize) },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("invalid layout network: {0}")]
    Network(String),
    #[error("invalid decoder configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Network outputs at map resolution. Heights are in map pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMaps {
    pub baseline: Raster,
    pub ascender: Raster,
    pub descender: Raster,
    pub region: Raster,
    /// Map pixel size in processed-image pixels.
    pub downsample: usize,
    /// Processed-image pixels per original-image pixel (≤ 1 when the page was
    /// shrunk to the megapixel budget).
    pub scale: f64,
    /// Size of the original page image.
    pub image_width: usize,
    pub image_height: usize,
}

impl ProbabilityMaps {
    /// Maps of the given size filled with constants, for a page of
    /// `width·downsample × height·downsample` pixels.
    pub fn constant(width: usize, height: usize, downsample: usize, baseline: f32, ascender: f32, descender: f32, region: f32) -> Self {
        Self {
            baseline: Raster::new(width, height, baseline),
            ascender: Raster::new(width, height, ascender),
            descender: Raster::new(width, height, descender),
            region: Raster::new(width, height, region),
            downsample,
            scale: 1.0,
            image_width: width * downsample,
            image_height: height * downsample,
        }
    }

    pub fn width(&self) -> usize {
        self.baseline.width()
    }

    pub fn height(&self) -> usize {
        self.baseline.height()
    }

    /// Original-image pixels per map pixel.
    pub fn map_to_image(&self) -> f64 {
        self.downsample as f64 / self.scale
    }

    pub fn validate(&self) -> Result<(), LayoutError> {
        let dims = (self.width(), self.height());
        for m in [&self.ascender, &self.descender, &self.region] {
            if (m.width(), m.height()) != dims {
                return Err(LayoutError::Misaligned { expected: dims, got: (m.width(), m.height()) });
            }
        }
        if self.downsample == 0 || !(self.scale > 0.0) {
            return Err(LayoutError::Config("downsample and scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutDecoderConfig {
    pub detection_threshold: f64,
    /// Components this many map rows apart (or closer) with overlapping
    /// x-intervals are joined into one line.
    pub vertical_connection_range: usize,
    /// Line-end columns whose mean baseline probability is below
    /// `line_end_weight · detection_threshold` are trimmed.
    pub line_end_weight: f64,
    /// Join collinear fragments separated by a short horizontal gap.
    pub merge_lines: bool,
    /// 3-tap moving average over the per-column baseline positions.
    pub smooth_predictions: bool,
    pub max_megapixels: f64,
    pub detect_regions: bool,
    /// Use the page-wide median heights for every line.
    pub adjust_heights: bool,
}

impl Default for LayoutDecoderConfig {
    fn default() -> Self {
        Self {
            detection_threshold: 0.2,
            vertical_connection_range: 3,
            line_end_weight: 1.0,
            merge_lines: false,
            smooth_predictions: false,
            max_megapixels: 5.0,
            detect_regions: true,
            adjust_heights: false,
        }
    }
}

impl LayoutDecoderConfig {
    pub fn validate(&self) -> Result<(), LayoutError> {
        if !(self.detection_threshold > 0.0 && self.detection_threshold < 1.0) {
            return Err(LayoutError::Config(format!("detection threshold {} is outside (0, 1)", self.detection_threshold)));
        }
        if !(self.line_end_weight >= 0.0 && self.max_megapixels > 0.0) {
            return Err(LayoutError::Config("line_end_weight must be non-negative and max_megapixels positive".into()));
        }
        Ok(())
    }
}
