//! Page pipeline: layout → line crops → OCR → PAGE XML, Markdown and TXT.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fpthd::checkpoint::{write_atomic, Checkpoint, OCR_MAGIC};
use fpthd::formats::{
    emit_markdown, emit_page_xml, emit_txt, page_id_from_path, parse_page_xml, quantize_layout, LineImageRef, PipelineConfig, TranscribedPage,
};
use fpthd::geometry::{rectify_and_crop, PageLayout};
use fpthd::layout::{decode_baselines, predict_maps, LayoutNet};
use fpthd::ocrnet::{prepare_line, OcrModel};
use fpthd::raster::Raster;
use log::warn;
use rayon::prelude::*;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Networks needed by the enabled stages.
pub struct Models {
    pub layout: Option<LayoutNet>,
    pub ocr: Option<OcrModel>,
}

pub fn load_ocr_model(path: &Path) -> Result<OcrModel> {
    let ck = Checkpoint::load(path, OCR_MAGIC).with_context(|| format!("loading OCR model {}", path.display()))?;
    OcrModel::from_checkpoint(&ck).with_context(|| format!("loading OCR model {}", path.display()))
}

impl Models {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let layout = if cfg.flags.run_layout {
            let path = &cfg.layout.model_path;
            Some(LayoutNet::load(path).with_context(|| format!("loading layout model {}", path.display()))?)
        } else {
            None
        };
        let ocr = if cfg.flags.run_ocr { Some(load_ocr_model(&cfg.ocr.checkpoint)?) } else { None };
        let models = Self { layout, ocr };
        models.check(cfg)?;
        Ok(models)
    }

    /// Fails when an enabled stage has no network or the layout network was
    /// trained at another downsampling factor.
    pub fn check(&self, cfg: &PipelineConfig) -> Result<()> {
        if cfg.flags.run_layout {
            match &self.layout {
                None => bail!("the layout stage is enabled but no layout model is loaded"),
                Some(net) if net.downsample != cfg.layout.downsample => {
                    bail!("layout model works at downsample {} but DOWNSAMPLE is {}", net.downsample, cfg.layout.downsample)
                }
                _ => {}
            }
        }
        if cfg.flags.run_ocr && self.ocr.is_none() {
            bail!("the OCR stage is enabled but no OCR model is loaded");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOptions {
    pub config: PipelineConfig,
    pub out_dir: PathBuf,
    /// PAGE XML read when the layout stage is off (default: `out_dir`).
    pub layout_dir: Option<PathBuf>,
    /// Crops read when the cropper is off (default: `out_dir/crops`).
    pub crops_dir: Option<PathBuf>,
    /// Write crops to `out_dir/crops`.
    pub keep_crops: bool,
    /// Write `<page>.xml`, `.md` and `.txt`.
    pub write_documents: bool,
    /// Pages processed concurrently; 0 uses every core.
    pub jobs: usize,
}

impl PipelineOptions {
    pub fn new(config: PipelineConfig, out_dir: impl Into<PathBuf>) -> Self {
        Self { config, out_dir: out_dir.into(), layout_dir: None, crops_dir: None, keep_crops: true, write_documents: true, jobs: 0 }
    }

    fn layout_dir(&self) -> &Path {
        self.layout_dir.as_deref().unwrap_or(&self.out_dir)
    }

    fn crops_dir(&self) -> PathBuf {
        self.crops_dir.clone().unwrap_or_else(|| self.out_dir.join("crops"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PageOutcome {
    pub image: PathBuf,
    pub page: TranscribedPage,
    /// Files written for this page.
    pub written: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PageFailure {
    pub image: PathBuf,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub pages: Vec<PageOutcome>,
    pub failures: Vec<PageFailure>,
}

impl RunReport {
    /// 0 when every page succeeded, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        u8::from(!self.failures.is_empty())
    }
}

fn is_image(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Expands directories to the images directly inside them, sorted by name.
/// Other paths are kept as given so unreadable files surface as page errors.
pub fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .with_context(|| format!("listing {}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image(p))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(input.clone());
        }
    }
    Ok(out)
}

/// Intensity an 8-bit file would store.
fn quantize_value(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn line_refs(layout: &PageLayout) -> Vec<(LineImageRef, usize, usize)> {
    let mut out = Vec::new();
    for (ri, region) in layout.regions.iter().enumerate() {
        for li in 0..region.lines.len() {
            out.push((LineImageRef::new(layout.page_id.clone(), ri, li), ri, li));
        }
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Runs the enabled stages on one page image.
pub fn process_page(image_path: &Path, models: &Models, opts: &PipelineOptions) -> Result<PageOutcome> {
    let cfg = &opts.config;
    let page_id = page_id_from_path(image_path);
    let image = Raster::load(image_path)?;
    let filename = image_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();

    let mut page = if cfg.flags.run_layout {
        let net = models.layout.as_ref().context("no layout model loaded")?;
        let maps = predict_maps(&image, net, cfg.layout.downsample, cfg.layout.decoder.max_megapixels)?;
        let mut layout = decode_baselines(&maps, &cfg.layout.decoder, &page_id)?;
        if !cfg.layout.detect_lines {
            layout.regions.iter_mut().for_each(|r| r.lines.clear());
        }
        // crop from exactly the geometry the PAGE file will hold
        TranscribedPage::new(quantize_layout(&layout), filename)
    } else {
        let xml_path = opts.layout_dir().join(format!("{page_id}.xml"));
        let doc = fs::read_to_string(&xml_path).with_context(|| format!("reading layout {}", xml_path.display()))?;
        let parsed = parse_page_xml(&doc).with_context(|| format!("parsing {}", xml_path.display()))?;
        for w in &parsed.warnings {
            warn!("{}: {w}", xml_path.display());
        }
        let mut page = parsed.page;
        if (page.layout.width, page.layout.height) != (image.width(), image.height()) {
            warn!("{}: layout is {}x{} but the image is {}x{}", xml_path.display(), page.layout.width, page.layout.height, image.width(), image.height());
        }
        page.layout.page_id = page_id.clone();
        page.image_filename = filename;
        page
    };

    let refs = line_refs(&page.layout);
    let background = quantize_value(image.border_median());
    let mut written = Vec::new();
    let crops: Option<Vec<Option<Raster>>> = if cfg.flags.run_cropper {
        let c = &cfg.cropper;
        let crops: Vec<Option<Raster>> = refs
            .par_iter()
            .map(|(r, ri, li)| {
                let line = &page.layout.regions[*ri].lines[*li];
                match rectify_and_crop(&image, line, c.line_height, c.line_scale, c.interp) {
                    Ok(crop) => Some(crop.raster.quantized()),
                    Err(e) => {
                        warn!("{}: line {} not cropped: {e}", r.file_name(), line.id);
                        None
                    }
                }
            })
            .collect();
        if opts.keep_crops {
            let dir = opts.out_dir.join("crops");
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for ((r, _, _), crop) in refs.iter().zip(&crops) {
                if let Some(crop) = crop {
                    let path = dir.join(r.file_name());
                    write_file(&path, &crop.encode_png()?)?;
                    written.push(path);
                }
            }
        }
        Some(crops)
    } else if cfg.flags.run_ocr {
        let dir = opts.crops_dir();
        let crops = refs
            .iter()
            .map(|(r, _, _)| {
                let path = dir.join(r.file_name());
                Raster::load(&path).map(Some).with_context(|| format!("loading crop {}", path.display()))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(crops)
    } else {
        None
    };

    if cfg.flags.run_ocr {
        let model = models.ocr.as_ref().context("no OCR model loaded")?;
        let crops = crops.as_ref().expect("crops exist when OCR runs");
        let oc = model.config();
        let texts: Vec<Option<String>> = refs
            .par_iter()
            .zip(crops.par_iter())
            .with_min_len(cfg.train.val_batch.max(1))
            .map(|(_, crop)| {
                let Some(crop) = crop else { return Ok(None) };
                let line = prepare_line(crop, background, oc.input_height, oc.input_width, oc.projection)?;
                Ok(Some(model.transcribe(&line)?))
            })
            .collect::<Result<_>>()?;
        page.texts.clear();
        page.confidences.clear();
        for ((_, ri, li), text) in refs.iter().zip(texts) {
            if let Some(text) = text {
                page.texts.insert(page.layout.regions[*ri].lines[*li].id.clone(), text);
            }
        }
    }

    if opts.write_documents {
        fs::create_dir_all(&opts.out_dir).with_context(|| format!("creating {}", opts.out_dir.display()))?;
        let outputs = [
            (format!("{page_id}.xml"), emit_page_xml(&page)?),
            (format!("{page_id}.md"), emit_markdown(&page)),
            (format!("{page_id}.txt"), emit_txt(&page)),
        ];
        for (name, body) in outputs {
            let path = opts.out_dir.join(name);
            write_file(&path, body.as_bytes())?;
            written.push(path);
        }
    }
    Ok(PageOutcome { image: image_path.to_path_buf(), page, written })
}

/// Processes every page, isolating failures per page.
pub fn run_pages(inputs: &[PathBuf], models: &Models, opts: &PipelineOptions) -> Result<RunReport> {
    models.check(&opts.config)?;
    let images = collect_images(inputs)?;
    let mut seen = HashSet::new();
    let duplicate: Vec<bool> = images.iter().map(|p| !seen.insert(page_id_from_path(p))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.jobs).build().context("starting worker pool")?;
    let results: Vec<Result<PageOutcome>> = pool.install(|| {
        images
            .par_iter()
            .zip(duplicate.par_iter())
            .map(|(path, &dup)| {
                if dup {
                    bail!("page id {} is already used by another input", page_id_from_path(path));
                }
                process_page(path, models, opts)
            })
            .collect()
    });
    let mut report = RunReport::default();
    for (path, result) in images.iter().zip(results) {
        match result {
            Ok(outcome) => report.pages.push(outcome),
            Err(e) => report.failures.push(PageFailure { image: path.clone(), message: format!("{e:#}") }),
        }
    }
    Ok(report)
}

/// TXT output of every successful page keyed by page id.
pub fn page_texts(report: &RunReport) -> BTreeMap<String, String> {
    report.pages.iter().map(|p| (p.page.layout.page_id.clone(), emit_txt(&p.page))).collect()
}
