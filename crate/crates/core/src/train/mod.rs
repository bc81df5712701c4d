//! OCR training: augmentation, sharpness-aware optimization, cosine schedule,
//! periodic validation and checkpointing.

mod morph;
mod sam;
mod trainer;

use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::ocrnet::OcrError;

pub use morph::{augment_calls, dilate, erode, morph_augment};
pub use sam::{sam_step, BaseOptimizer, HasParams, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use trainer::{evaluate, prepare_samples, resume_training, train_loop, LineSample, LogRow, PreparedSample, RunFiles, TrainOutcome, LOG_HEADER};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("divergence: non-finite loss or gradient")]
    Divergence,
    #[error("divergence at iteration {iteration}: non-finite loss or gradient (state saved to {state})")]
    DivergedAt { iteration: u64, state: String },
    #[error("characters not in the model charset: {}", describe_unseen(.0))]
    UnseenChars(Vec<(char, Vec<String>)>),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("no resumable state at {0}")]
    NoState(PathBuf),
    #[error(transparent)]
    Ocr(#[from] OcrError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn describe_unseen(items: &[(char, Vec<String>)]) -> String {
    items
        .iter()
        .map(|(c, ids)| {
            let more = if ids.len() > 3 { format!(" and {} more", ids.len() - 3) } else { String::new() };
            format!("{c:?} (in {}{more})", ids.iter().take(3).cloned().collect::<Vec<_>>().join(", "))
        })
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" | "adamw" => Ok(Self::Adam),
            _ => Err(format!("unknown optimizer {s:?} (expected sgd or adam)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub train_batch: usize,
    pub val_batch: usize,
    /// Decoupled decay coefficient; the per-step shrink factor is `lr · weight_decay`.
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub attn_mask_ratio: f64,
    pub max_span: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub projection: usize,
    pub morph_max_kernel: usize,
    pub morph_iterations: usize,
    /// Probability that a training sample is augmented.
    pub sample_prob: f64,
    /// Multiplier on the CTC loss.
    pub alpha: f64,
    pub total_iterations: u64,
    pub sam_rho: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Uniform random rotation in `±max_rotation` degrees; 0 disables it.
    pub max_rotation: f64,
    /// Halt after this many completed iterations without changing the
    /// schedule, leaving resumable state behind.
    pub stop_at: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 1e-3,
            train_batch: 64,
            val_batch: 8,
            weight_decay: 0.5,
            mask_ratio: 0.4,
            attn_mask_ratio: 0.1,
            max_span: 8,
            image_width: 512,
            image_height: 64,
            projection: 8,
            morph_max_kernel: 2,
            morph_iterations: 1,
            sample_prob: 0.5,
            alpha: 1.0,
            total_iterations: 100_000,
            sam_rho: 0.05,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            max_rotation: 0.0,
            stop_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, v) in [("mask_ratio", self.mask_ratio), ("attn_mask_ratio", self.attn_mask_ratio)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} = {v} is outside [0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.sample_prob) {
            return bad(format!("sample_prob = {} is outside [0, 1]", self.sample_prob));
        }
        if self.train_batch == 0 || self.val_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.max_span == 0 || self.morph_max_kernel == 0 || self.projection == 0 {
            return bad("max_span, morph_max_kernel and projection must be at least 1".into());
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return bad(format!("max_lr = {} must be positive", self.max_lr));
        }
        if !(self.sam_rho > 0.0 && self.sam_rho.is_finite()) {
            return bad(format!("sam_rho = {} must be positive", self.sam_rho));
        }
        if !(self.weight_decay >= 0.0 && self.alpha > 0.0 && self.max_rotation >= 0.0) {
            return bad("weight_decay and max_rotation must be non-negative, alpha positive".into());
        }
        Ok(())
    }

    pub fn masking(&self) -> crate::ocrnet::MaskingConfig {
        crate::ocrnet::MaskingConfig { mask_ratio: self.mask_ratio, max_span: self.max_span, attn_mask_ratio: self.attn_mask_ratio }
    }

    /// Iterations between validation passes.
    pub fn validation_interval(&self) -> u64 {
        validation_interval(self.total_iterations)
    }
}

/// `max(100, total / 200)`.
pub fn validation_interval(total: u64) -> u64 {
    (total / 200).max(100)
}

/// Cosine decay from `max_lr` at iteration 0 to `max_lr / 100` at `total`.
pub fn cosine_lr(iteration: u64, total: u64, max_lr: f64) -> f64 {
    if total == 0 {
        return max_lr;
    }
    let min = max_lr / 100.0;
    let progress = iteration.min(total) as f64 / total as f64;
    min + (max_lr - min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.image_width, c.image_height, c.max_span, c.total_iterations), (512, 64, 8, 100_000));
        assert_eq!(c.validation_interval(), 500);
        assert_eq!(validation_interval(2000), 100);
        let bad = TrainConfig { mask_ratio: 1.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { train_batch: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn cosine_endpoints_are_exact() {
        for total in [1, 7, 2000, 100_000] {
            assert_eq!(cosine_lr(0, total, 1e-3), 1e-3);
            assert_eq!(cosine_lr(total, total, 1e-3), 1e-3 / 100.0);
        }
        let mid = cosine_lr(50, 100, 1.0);
        assert!((mid - 0.505).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let lr = cosine_lr(i, 100, 1.0);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn unseen_message_names_characters_and_samples() {
        let e = TrainError::UnseenChars(vec![('x', vec!["a.png".into(), "b.png".into()])]);
        assert_eq!(e.to_string(), "characters not in the model charset: 'x' (in a.png, b.png)");
    }
}
