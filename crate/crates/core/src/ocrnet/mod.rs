//! Line recognizer: a convolutional tokenizer followed by a transformer
//! encoder without class token, trained with span masking and CTC.

mod charset;
mod input;
mod mask;
mod model;

use thiserror::Error;

use crate::ctc::CtcError;

pub use charset::Charset;
pub use input::{prepare_line, standardize_and_pad, PreparedLine, STANDARDIZE_EPS};
pub use mask::{sample_span_mask, SpanMask, MAX_ATTEMPTS};
pub use model::{
    apply_mask, format_extractor, log_softmax, parse_extractor, sinusoidal_positions, ConvSpec, ExtractorPreset, ForwardPlan,
    Logits, MaskingConfig, OcrConfig, OcrModel,
};

#[derive(Debug, Error, PartialEq)]
pub enum OcrError {
    #[error("empty image")]
    EmptyImage,
    #[error("token dimension {0} is odd")]
    OddDimension(usize),
    #[error("non-finite values in tokens")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("charset: {0}")]
    Charset(String),
    #[error("characters not in charset: {}", .0.iter().map(|c| format!("{c:?}")).collect::<Vec<_>>().join(", "))]
    UnknownChars(Vec<char>),
    #[error("span mask: {0}")]
    Mask(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Ctc(#[from] CtcError),
}
