use std::path::PathBuf;

use crate::layout::LayoutDecoderConfig;
use crate::ocrnet::{ExtractorPreset, OcrConfig};
use crate::train::{OptimizerKind, TrainConfig};

use super::FormatError;

/// Which pipeline stages run.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineFlags {
    pub run_layout: bool,
    pub run_cropper: bool,
    pub run_ocr: bool,
    /// Accepted for compatibility; no decoding stage exists.
    pub run_decoder: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutConfig {
    pub method: String,
    pub detect_lines: bool,
    pub model_path: PathBuf,
    /// Accepted for compatibility; inference always runs on the CPU.
    pub use_cpu: bool,
    pub downsample: usize,
    pub decoder: LayoutDecoderConfig,
    pub sorter: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropperConfig {
    pub interp: usize,
    pub line_scale: f64,
    pub line_height: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcrSection {
    pub ocr_json: PathBuf,
    pub use_cpu: bool,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub token_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub extractor: ExtractorPreset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub flags: PipelineFlags,
    pub layout: LayoutConfig,
    pub cropper: CropperConfig,
    pub ocr: OcrSection,
    pub train: TrainConfig,
    pub model: ModelSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let ocr = OcrConfig::default();
        Self {
            flags: PipelineFlags { run_layout: true, run_cropper: true, run_ocr: true, run_decoder: false },
            layout: LayoutConfig {
                method: "LAYOUT_CNN".into(),
                detect_lines: true,
                model_path: "./ParseNet_296000.pt".into(),
                use_cpu: false,
                downsample: 5,
                decoder: LayoutDecoderConfig::default(),
                sorter: "REGION_SORTER_SMART".into(),
            },
            cropper: CropperConfig { interp: 2, line_scale: 1.0, line_height: 50 },
            ocr: OcrSection { ocr_json: "./ocr_engine.json".into(), use_cpu: false, checkpoint: "./OCR_350000.pt".into() },
            train: TrainConfig::default(),
            model: ModelSection {
                token_dim: ocr.token_dim,
                blocks: ocr.blocks,
                heads: ocr.heads,
                ff_mult: ocr.ff_mult,
                extractor: ExtractorPreset::Standard,
            },
        }
    }
}

/// Parsed configuration plus notes about ignored content.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigOutcome {
    pub config: PipelineConfig,
    pub warnings: Vec<String>,
}

/// Upper case with every run of other characters collapsed to one `_`.
fn normalize(s: &str) -> String {
    let mut out = String::new();
    for c in s.trim().chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_uppercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "yes" | "true" | "on" | "1" => Some(true),
        "no" | "false" | "off" | "0" => Some(false),
        _ => None,
    }
}

/// `512 x 64` (width × height).
fn parse_size(v: &str) -> Option<(usize, usize)> {
    let (w, h) = v.split_once(['x', 'X', '×'])?;
    Some((w.trim().parse().ok()?, h.trim().parse().ok()?))
}

fn train_key(key: &str) -> &str {
    match key {
        "MAXIMUM_LEARNING_RATE" | "LEARNING_RATE" | "LR" => "MAX_LR",
        "TRAINING_BATCH_SIZE" | "BATCH_SIZE" => "TRAIN_BATCH",
        "VALIDATION_BATCH_SIZE" => "VAL_BATCH",
        "WEIGHT_DECAY_FACTOR" => "WEIGHT_DECAY",
        "MASK_RATIO_FOR_THE_INPUT" => "MASK_RATIO",
        "ATTENTION_MASK_RATIO" => "ATTN_MASK_RATIO",
        "MAXIMUM_SPAN_LENGTH_FOR_ATTENTION" | "MAXIMUM_SPAN_LENGTH" => "MAX_SPAN",
        "IMAGE_SIZE_FOR_INPUT" => "IMAGE_SIZE",
        "PROJECTION_SIZE" => "PROJECTION",
        "MAXIMUM_KERNEL_SIZE_FOR_DILATION_EROSION" => "MORPH_MAX_KERNEL",
        "NUMBER_OF_ITERATIONS_FOR_DILATION_EROSION" => "MORPH_ITERATIONS",
        "PROBABILITY_FACTOR_FOR_RANDOM_SAMPLING" => "SAMPLE_PROB",
        "ALPHA_PARAMETER" => "ALPHA",
        "TOTAL_NUMBER_OF_ITERATIONS" => "TOTAL_ITERATIONS",
        other => other,
    }
}

impl PipelineConfig {
    /// Sets one value. Section and key are matched case-insensitively with
    /// punctuation and spaces treated alike. Returns `Ok(false)` for keys
    /// this configuration does not know.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<bool, FormatError> {
        let section = normalize(section);
        let key = normalize(key);
        let value = value.trim().trim_matches('"');
        let err = |message: &str| FormatError::Config { section: section.clone(), key: key.clone(), message: format!("{message}, got {value:?}") };
        let boolean = || parse_bool(value).ok_or_else(|| err("expected yes or no"));
        let real = || value.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err("expected a number"));
        let count = || value.parse::<usize>().map_err(|_| err("expected a non-negative integer"));
        match (section.as_str(), key.as_str()) {
            ("PAGE_PARSER", "RUN_LAYOUT_PARSER") => self.flags.run_layout = boolean()?,
            ("PAGE_PARSER", "RUN_LINE_CROPPER") => self.flags.run_cropper = boolean()?,
            ("PAGE_PARSER", "RUN_OCR") => self.flags.run_ocr = boolean()?,
            ("PAGE_PARSER", "RUN_DECODER") => self.flags.run_decoder = boolean()?,
            ("LAYOUT_PARSER_1", "METHOD") => self.layout.method = value.to_string(),
            ("LAYOUT_PARSER_1", "DETECT_LINES") => self.layout.detect_lines = boolean()?,
            ("LAYOUT_PARSER_1", "DETECT_REGIONS") => self.layout.decoder.detect_regions = boolean()?,
            ("LAYOUT_PARSER_1", "MERGE_LINES") => self.layout.decoder.merge_lines = boolean()?,
            ("LAYOUT_PARSER_1", "ADJUST_HEIGHTS") => self.layout.decoder.adjust_heights = boolean()?,
            ("LAYOUT_PARSER_1", "MODEL_PATH") => self.layout.model_path = value.into(),
            ("LAYOUT_PARSER_1", "MAX_MEGAPIXELS") => self.layout.decoder.max_megapixels = real()?,
            ("LAYOUT_PARSER_1", "USE_CPU") => self.layout.use_cpu = boolean()?,
            ("LAYOUT_PARSER_1", "DOWNSAMPLE") => self.layout.downsample = count()?,
            ("LAYOUT_PARSER_1", "DETECTION_THRESHOLD") => self.layout.decoder.detection_threshold = real()?,
            ("LAYOUT_PARSER_1", "LINE_END_WEIGHT") => self.layout.decoder.line_end_weight = real()?,
            ("LAYOUT_PARSER_1", "VERTICAL_LINE_CONNECTION_RANGE") => self.layout.decoder.vertical_connection_range = count()?,
            ("LAYOUT_PARSER_1", "SMOOTH_LINE_PREDICTIONS") => self.layout.decoder.smooth_predictions = boolean()?,
            ("LAYOUT_PARSER_2", "METHOD") => self.layout.sorter = value.to_string(),
            ("LINE_CROPPER", "INTERP") => self.cropper.interp = count()?,
            ("LINE_CROPPER", "LINE_SCALE") => self.cropper.line_scale = real()?,
            ("LINE_CROPPER", "LINE_HEIGHT") => self.cropper.line_height = count()?,
            ("OCR", "OCR_JSON") => self.ocr.ocr_json = value.into(),
            ("OCR", "USE_CPU") => self.ocr.use_cpu = boolean()?,
            ("OCR", "CHECKPOINT") => self.ocr.checkpoint = value.into(),
            ("TRAIN", k) => match train_key(k) {
                "MAX_LR" => self.train.max_lr = real()?,
                "TRAIN_BATCH" => self.train.train_batch = count()?,
                "VAL_BATCH" => self.train.val_batch = count()?,
                "WEIGHT_DECAY" => self.train.weight_decay = real()?,
                "MASK_RATIO" => self.train.mask_ratio = real()?,
                "ATTN_MASK_RATIO" => self.train.attn_mask_ratio = real()?,
                "MAX_SPAN" => self.train.max_span = count()?,
                "IMAGE_SIZE" => {
                    let (w, h) = parse_size(value).ok_or_else(|| err("expected WIDTH x HEIGHT"))?;
                    self.train.image_width = w;
                    self.train.image_height = h;
                }
                "IMAGE_WIDTH" => self.train.image_width = count()?,
                "IMAGE_HEIGHT" => self.train.image_height = count()?,
                "PROJECTION" => self.train.projection = count()?,
                "MORPH_MAX_KERNEL" => self.train.morph_max_kernel = count()?,
                "MORPH_ITERATIONS" => self.train.morph_iterations = count()?,
                "SAMPLE_PROB" => self.train.sample_prob = real()?,
                "ALPHA" => self.train.alpha = real()?,
                "TOTAL_ITERATIONS" => self.train.total_iterations = value.parse().map_err(|_| err("expected a non-negative integer"))?,
                "SAM_RHO" => self.train.sam_rho = real()?,
                "SEED" => self.train.seed = value.parse().map_err(|_| err("expected a non-negative integer"))?,
                "OPTIMIZER" => self.train.optimizer = value.parse::<OptimizerKind>().map_err(|e| err(&e))?,
                "MAX_ROTATION" => self.train.max_rotation = real()?,
                _ => return Ok(false),
            },
            ("MODEL", "TOKEN_DIM") => self.model.token_dim = count()?,
            ("MODEL", "BLOCKS") => self.model.blocks = count()?,
            ("MODEL", "HEADS") => self.model.heads = count()?,
            ("MODEL", "FF_MULT") => self.model.ff_mult = count()?,
            ("MODEL", "EXTRACTOR") => self.model.extractor = value.parse::<ExtractorPreset>().map_err(|e| err(&e))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// OCR architecture from the `[MODEL]` section and the `[TRAIN]` input size.
    pub fn ocr_config(&self) -> OcrConfig {
        let m = &self.model;
        OcrConfig {
            input_height: self.train.image_height,
            input_width: self.train.image_width,
            projection: self.train.projection,
            token_dim: m.token_dim,
            blocks: m.blocks,
            heads: m.heads,
            ff_mult: m.ff_mult,
            extractor: m.extractor.layers(self.train.image_height, m.token_dim),
        }
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        let fail = |section: &str, key: &str, message: String| Err(FormatError::Config { section: section.into(), key: key.into(), message });
        if self.layout.method.to_ascii_uppercase() != "LAYOUT_CNN" {
            return fail("LAYOUT_PARSER_1", "METHOD", format!("only LAYOUT_CNN is available, got {:?}", self.layout.method));
        }
        if self.layout.sorter.to_ascii_uppercase() != "REGION_SORTER_SMART" {
            return fail("LAYOUT_PARSER_2", "METHOD", format!("only REGION_SORTER_SMART is available, got {:?}", self.layout.sorter));
        }
        if self.layout.downsample == 0 {
            return fail("LAYOUT_PARSER_1", "DOWNSAMPLE", "must be at least 1".into());
        }
        if let Err(e) = self.layout.decoder.validate() {
            return fail("LAYOUT_PARSER_1", "", e.to_string());
        }
        if self.cropper.interp > 3 {
            return fail("LINE_CROPPER", "INTERP", format!("order {} is not supported (0..=3)", self.cropper.interp));
        }
        if self.cropper.line_height < 8 {
            return fail("LINE_CROPPER", "LINE_HEIGHT", format!("{} is below the minimum of 8", self.cropper.line_height));
        }
        if !(self.cropper.line_scale > 0.0) {
            return fail("LINE_CROPPER", "LINE_SCALE", "must be positive".into());
        }
        if let Err(e) = self.train.validate() {
            return fail("TRAIN", "", e.to_string());
        }
        Ok(())
    }
}

/// Parses INI text over the defaults. Keys and section names are
/// case-insensitive, `;` and `#` start comment lines, and unknown sections or
/// keys produce warnings rather than errors.
pub fn parse_config(text: &str) -> Result<ConfigOutcome, FormatError> {
    let mut config = PipelineConfig::default();
    let mut warnings = Vec::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.trim_start_matches('\u{feff}').lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with(';') || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or(FormatError::Ini { line: i + 1, message: format!("unterminated section header {line:?}") })?;
            section = Some(name.trim().to_string());
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(FormatError::Ini { line: i + 1, message: format!("expected KEY = VALUE, got {line:?}") })?;
        let Some(sec) = &section else {
            warnings.push(format!("line {}: key {} outside any section ignored", i + 1, key.trim()));
            continue;
        };
        if !config.set(sec, key, value)? {
            warnings.push(format!("line {}: unknown key [{}] {} ignored", i + 1, sec, key.trim()));
        }
    }
    config.validate()?;
    Ok(ConfigOutcome { config, warnings })
}
