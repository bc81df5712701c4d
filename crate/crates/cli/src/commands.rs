//! Training, evaluation and data-generation commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fpthd::checkpoint::write_atomic;
use fpthd::formats::{emit_page_xml, emit_txt, page_id_from_path, parse_page_xml, PipelineConfig, TranscribedPage};
use fpthd::layout::{rasterize_targets, train_layout_net, LayoutNet, LayoutTrainConfig};
use fpthd::metrics::{evaluate_pages, EvalReport, PageText};
use fpthd::ocrnet::OcrModel;
use fpthd::raster::Raster;
use fpthd::synth::{line_samples, render_page, PageStyle};
use fpthd::train::{resume_training, train_loop, RunFiles, TrainConfig, TrainOutcome};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::manifest::load_manifest;
use crate::pipeline::collect_images;

pub struct TrainRequest {
    pub train: PathBuf,
    pub val: PathBuf,
    pub checkpoint: PathBuf,
    /// Defaults to the checkpoint path with a `.csv` extension.
    pub log: Option<PathBuf>,
    pub resume: bool,
}

/// Trains (or resumes) an OCR model on two manifests. The architecture comes
/// from the `[MODEL]` section, the schedule from `[TRAIN]`.
pub fn train_ocr(cfg: &PipelineConfig, train_cfg: &TrainConfig, req: &TrainRequest) -> Result<TrainOutcome> {
    let train_m = load_manifest(&req.train).with_context(|| format!("loading {}", req.train.display()))?;
    let val_m = load_manifest(&req.val).with_context(|| format!("loading {}", req.val.display()))?;
    let unseen = val_m.unseen_chars(&train_m.charset);
    if !unseen.is_empty() {
        let items: Vec<String> = unseen
            .iter()
            .map(|(c, paths)| format!("{c:?} in {}", paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")))
            .collect();
        bail!("validation texts use characters absent from the training texts: {}", items.join("; "));
    }
    let train = train_m.load_samples()?;
    let val = val_m.load_samples()?;
    info!("{} training and {} validation lines, {} characters", train.len(), val.len(), train_m.charset.chars().len());
    let files = RunFiles { checkpoint: req.checkpoint.clone(), log: req.log.clone().unwrap_or_else(|| req.checkpoint.with_extension("csv")) };
    let outcome = if req.resume {
        resume_training(&train, &val, train_cfg, &files)?
    } else {
        let model = OcrModel::new(cfg.ocr_config(), train_m.charset.clone(), train_cfg.seed)?;
        train_loop(model, &train, &val, train_cfg, Some(&files))?
    };
    Ok(outcome)
}

fn read_texts(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "txt") {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            out.insert(stem, text);
        }
    }
    Ok(out)
}

/// Scores every `<stem>.txt` in `hyp_dir` against the same stem in `ref_dir`.
pub fn evaluate_dirs(hyp_dir: &Path, ref_dir: &Path) -> Result<EvalReport> {
    let hyps = read_texts(hyp_dir)?;
    let refs = read_texts(ref_dir)?;
    let no_hyp: Vec<&str> = refs.keys().filter(|k| !hyps.contains_key(*k)).map(String::as_str).collect();
    let no_ref: Vec<&str> = hyps.keys().filter(|k| !refs.contains_key(*k)).map(String::as_str).collect();
    if !no_hyp.is_empty() || !no_ref.is_empty() {
        bail!("unmatched pages: without hypothesis [{}], without reference [{}]", no_hyp.join(", "), no_ref.join(", "));
    }
    if refs.is_empty() {
        bail!("no .txt files in {}", ref_dir.display());
    }
    let page = |(id, text): (&String, &String)| PageText { id: id.clone(), text: text.clone() };
    let r: Vec<PageText> = refs.iter().map(page).collect();
    let h: Vec<PageText> = hyps.iter().map(page).collect();
    Ok(evaluate_pages(&r, &h)?)
}

/// Trains the layout network on page images with same-stem PAGE XML files.
pub fn train_layout(data_dir: &Path, cfg: &LayoutTrainConfig, out: &Path) -> Result<Vec<f64>> {
    let images = collect_images(&[data_dir.to_path_buf()])?;
    let mut corpus = Vec::with_capacity(images.len());
    for image_path in &images {
        let xml = image_path.with_extension("xml");
        let doc = fs::read_to_string(&xml).with_context(|| format!("reading {}", xml.display()))?;
        let layout = parse_page_xml(&doc).with_context(|| format!("parsing {}", xml.display()))?.page.layout;
        let image = Raster::load(image_path)?;
        let targets = rasterize_targets(&layout, image.width().div_ceil(cfg.downsample), image.height().div_ceil(cfg.downsample), cfg.downsample);
        corpus.push((image, targets));
    }
    info!("{} pages", corpus.len());
    let outcome = train_layout_net(&corpus, cfg, LayoutNet::new(cfg.seed, cfg.downsample))?;
    outcome.net.save(out)?;
    Ok(outcome.losses)
}

pub struct SynthRequest {
    pub out: PathBuf,
    pub pages: usize,
    pub lines: usize,
    pub seed: u64,
    pub cell: f64,
    pub line_height: usize,
}

/// Writes synthetic two-column pages (`pages/<id>.png` with ground-truth
/// `.xml` and `.txt`) and line crops (`lines/*.png` listed in
/// `lines/manifest.tsv`).
pub fn synthesize(req: &SynthRequest) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let style = PageStyle { cell: req.cell, ..PageStyle::default() };
    if req.pages > 0 {
        let dir = req.out.join("pages");
        fs::create_dir_all(&dir)?;
        for i in 0..req.pages {
            let name = format!("page-{:03}.png", i);
            let id = page_id_from_path(Path::new(&name));
            let synth = render_page(&id, &style, &mut rng);
            write_atomic(&dir.join(&name), &synth.image.encode_png()?)?;
            let mut page = TranscribedPage::new(synth.layout.clone(), name);
            page.texts = synth.texts.iter().cloned().collect();
            write_atomic(&dir.join(format!("{id}.xml")), emit_page_xml(&page)?.as_bytes())?;
            write_atomic(&dir.join(format!("{id}.txt")), emit_txt(&page).as_bytes())?;
        }
    }
    if req.lines > 0 {
        let dir = req.out.join("lines");
        fs::create_dir_all(&dir)?;
        let mut tsv = String::new();
        for (i, sample) in line_samples(req.lines, req.cell, req.line_height, &mut rng)?.into_iter().enumerate() {
            let name = format!("line-{i:05}.png");
            write_atomic(&dir.join(&name), &sample.image.encode_png()?)?;
            tsv.push_str(&format!("{name}\t{}\n", sample.text));
        }
        write_atomic(&dir.join("manifest.tsv"), tsv.as_bytes())?;
    }
    Ok(())
}
