use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, OCR_MAGIC};
use crate::ctc::CtcError;
use crate::metrics::EvalReport;
use crate::nn::Tensor;
use crate::ocrnet::{prepare_line, ForwardPlan, OcrError, OcrModel, PreparedLine};
use crate::raster::Raster;

use super::morph::morph_augment;
use super::sam::{sam_step, BaseOptimizer};
use super::{cosine_lr, OptimizerKind, TrainConfig, TrainError};

pub const LOG_HEADER: &str = "iteration,train_loss,val_cer,val_wer,lr";

/// A line image with its transcription.
#[derive(Clone, Debug, PartialEq)]
pub struct LineSample {
    pub id: String,
    pub image: Raster,
    pub background: f32,
    pub text: String,
}

/// A line already resized and standardized for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub line: PreparedLine,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    /// Mean alpha-scaled batch loss since the previous row.
    pub train_loss: f64,
    pub val_cer: f64,
    pub val_wer: f64,
    /// Learning rate at `iteration` on the schedule.
    pub lr: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.iteration, self.train_loss, self.val_cer, self.val_wer, self.lr)
    }
}

/// Where a run keeps its outputs. The best checkpoint goes to `checkpoint`,
/// the resumable last state next to it with a `.state` extension.
#[derive(Clone, Debug, PartialEq)]
pub struct RunFiles {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl RunFiles {
    pub fn state(&self) -> PathBuf {
        self.checkpoint.with_extension("state")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last completed iteration.
    pub model: OcrModel,
    pub iteration: u64,
    /// Lowest validation CER seen so far (infinite before any validation).
    pub best_cer: f64,
    /// Rows logged by this call.
    pub log: Vec<LogRow>,
}

pub fn prepare_samples(samples: &[LineSample], height: usize, width: usize, projection: usize) -> Result<Vec<PreparedSample>, TrainError> {
    samples
        .par_iter()
        .map(|s| {
            Ok(PreparedSample {
                id: s.id.clone(),
                line: prepare_line(&s.image, s.background, height, width, projection)?,
                text: s.text.clone(),
            })
        })
        .collect()
}

/// Greedy transcription of every sample, masking off, scored against its text.
pub fn evaluate(model: &OcrModel, samples: &[PreparedSample], batch: usize) -> Result<EvalReport, TrainError> {
    let hyps: Vec<String> = samples
        .par_iter()
        .with_min_len(batch.max(1))
        .map(|s| model.transcribe(&s.line))
        .collect::<Result<_, _>>()?;
    Ok(EvalReport::from_pairs(samples.iter().zip(&hyps).map(|(s, h)| (s.id.as_str(), s.text.as_str(), h.as_str()))))
}

struct RunState {
    model: OcrModel,
    optimizer: BaseOptimizer<f32>,
    iteration: u64,
    best_cer: f64,
    loss_sum: f64,
    loss_count: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

/// Trains `model` from scratch. With `files`, writes the CSV log, keeps the
/// best-validation checkpoint (initially the untrained model) and leaves a
/// resumable state file behind.
pub fn train_loop(
    model: OcrModel,
    train: &[LineSample],
    val: &[LineSample],
    cfg: &TrainConfig,
    files: Option<&RunFiles>,
) -> Result<TrainOutcome, TrainError> {
    check_inputs(&model, train, val, cfg)?;
    let optimizer = match cfg.optimizer {
        OptimizerKind::Sgd => BaseOptimizer::Sgd,
        OptimizerKind::Adam => BaseOptimizer::adam(model.params()),
    };
    if let Some(f) = files {
        for path in [&f.checkpoint, &f.log] {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
        }
        fs::write(&f.log, format!("{LOG_HEADER}\n")).map_err(io_err(&f.log))?;
        model.to_checkpoint(0, None, &[]).save(&f.checkpoint)?;
    }
    let state = RunState { model, optimizer, iteration: 0, best_cer: f64::INFINITY, loss_sum: 0.0, loss_count: 0 };
    run(state, train, val, cfg, files)
}

/// Continues the run whose state file lives next to `files.checkpoint`. With
/// the same data and configuration the result is bit-identical to an
/// uninterrupted run.
pub fn resume_training(train: &[LineSample], val: &[LineSample], cfg: &TrainConfig, files: &RunFiles) -> Result<TrainOutcome, TrainError> {
    let path = files.state();
    if !path.exists() {
        return Err(TrainError::NoState(path));
    }
    let ck = Checkpoint::load(&path, OCR_MAGIC)?;
    let model = OcrModel::from_checkpoint(&ck)?;
    check_inputs(&model, train, val, cfg)?;
    let seed: u64 = ck.meta_parse("state.seed")?;
    let total: u64 = ck.meta_parse("state.total_iterations")?;
    if seed != cfg.seed || total != cfg.total_iterations {
        return Err(TrainError::Config(format!(
            "state was written with seed {seed} and {total} total iterations, not {} and {}",
            cfg.seed, cfg.total_iterations
        )));
    }
    let bits = |k: &str| -> Result<f64, TrainError> {
        let hex = ck.meta_value(k).ok_or_else(|| TrainError::Config(format!("state lacks {k}")))?;
        u64::from_str_radix(hex, 16).map(f64::from_bits).map_err(|_| TrainError::Config(format!("bad {k} {hex:?}")))
    };
    let optimizer = BaseOptimizer::from_state(ck.optimizer.as_ref());
    if matches!(optimizer, BaseOptimizer::Sgd) != (cfg.optimizer == OptimizerKind::Sgd) {
        return Err(TrainError::Config("state optimizer differs from configuration".into()));
    }
    let state = RunState {
        model,
        optimizer,
        iteration: ck.iteration,
        best_cer: bits("state.best_cer")?,
        loss_sum: bits("state.loss_sum")?,
        loss_count: ck.meta_parse("state.loss_count")?,
    };
    run(state, train, val, cfg, Some(files))
}

fn check_inputs(model: &OcrModel, train: &[LineSample], val: &[LineSample], cfg: &TrainConfig) -> Result<(), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    let mc = model.config();
    if (mc.input_width, mc.input_height, mc.projection) != (cfg.image_width, cfg.image_height, cfg.projection) {
        return Err(TrainError::Config(format!(
            "model expects {}x{} with projection {}, configuration says {}x{} with projection {}",
            mc.input_width, mc.input_height, mc.projection, cfg.image_width, cfg.image_height, cfg.projection
        )));
    }
    let mut unseen: BTreeMap<char, Vec<String>> = BTreeMap::new();
    for s in train.iter().chain(val) {
        for c in model.charset().unknown_chars(&s.text) {
            unseen.entry(c).or_default().push(s.id.clone());
        }
    }
    if !unseen.is_empty() {
        return Err(TrainError::UnseenChars(unseen.into_iter().collect()));
    }
    Ok(())
}

fn save_state(st: &RunState, cfg: &TrainConfig, files: &RunFiles) -> Result<(), TrainError> {
    let meta: Vec<(String, String)> = [
        ("state.seed", cfg.seed.to_string()),
        ("state.total_iterations", cfg.total_iterations.to_string()),
        ("state.best_cer", format!("{:016x}", st.best_cer.to_bits())),
        ("state.loss_sum", format!("{:016x}", st.loss_sum.to_bits())),
        ("state.loss_count", st.loss_count.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    st.model.to_checkpoint(st.iteration, st.optimizer.to_state(), &meta).save(&files.state())?;
    Ok(())
}

struct Example {
    line: PreparedLine,
    target: Vec<usize>,
    plan: ForwardPlan,
}

fn draw_batch(model: &OcrModel, train: &[LineSample], targets: &[Vec<usize>], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Example>, TrainError> {
    let mut batch = Vec::with_capacity(cfg.train_batch);
    for _ in 0..cfg.train_batch {
        let i = rng.gen_range(0..train.len());
        let s = &train[i];
        let mut image = s.image.clone();
        if cfg.max_rotation > 0.0 {
            image = image.rotate(rng.gen_range(-cfg.max_rotation..=cfg.max_rotation), s.background);
        }
        let image = morph_augment(&image, cfg.morph_max_kernel, cfg.morph_iterations, cfg.sample_prob, rng);
        let line = prepare_line(&image, s.background, cfg.image_height, cfg.image_width, cfg.projection)?;
        let plan = model.plan(&line, Some(cfg.masking()), rng)?;
        batch.push(Example { line, target: targets[i].clone(), plan });
    }
    Ok(batch)
}

/// Alpha-scaled mean CTC loss over the alignable examples and its gradient.
/// Examples whose target cannot fit the valid frames contribute nothing.
fn batch_gradient(model: &OcrModel, batch: &[Example], alpha: f64) -> Result<(f64, Vec<Tensor<f32>>), TrainError> {
    let results = batch
        .par_iter()
        .map(|e| model.loss_and_grads(&e.line, &e.target, &e.plan))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| match e {
            OcrError::NonFinite | OcrError::Ctc(CtcError::NotNormalized { .. }) => TrainError::Divergence,
            other => other.into(),
        })?;
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut grads: Vec<Tensor<f32>> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    for (loss, g) in results.into_iter().flatten() {
        sum += loss;
        count += 1;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    if count == 0 {
        return Ok((0.0, grads));
    }
    let scale = alpha / count as f64;
    for g in &mut grads {
        g.scale_assign(scale as f32);
    }
    Ok((sum * scale, grads))
}

fn run(mut st: RunState, train: &[LineSample], val: &[LineSample], cfg: &TrainConfig, files: Option<&RunFiles>) -> Result<TrainOutcome, TrainError> {
    let total = cfg.total_iterations;
    let end = cfg.stop_at.map_or(total, |s| s.min(total));
    let interval = cfg.validation_interval();
    let targets: Vec<Vec<usize>> = train.iter().map(|s| st.model.charset().encode(&s.text)).collect::<Result<_, _>>()?;
    let val_prepared = prepare_samples(val, cfg.image_height, cfg.image_width, cfg.projection)?;
    let mut rows = Vec::new();

    while st.iteration < end {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(st.iteration + 1);
        let batch = draw_batch(&st.model, train, &targets, cfg, &mut rng)?;
        let lr = cosine_lr(st.iteration, total, cfg.max_lr);
        let step = sam_step(&mut st.model, |m: &OcrModel| batch_gradient(m, &batch, cfg.alpha), lr, cfg.sam_rho, cfg.weight_decay, &mut st.optimizer);
        let loss = match step {
            Ok(loss) => loss,
            Err(TrainError::Divergence) => {
                let state = match files {
                    Some(f) => {
                        save_state(&st, cfg, f)?;
                        f.state().display().to_string()
                    }
                    None => "nowhere".into(),
                };
                return Err(TrainError::DivergedAt { iteration: st.iteration, state });
            }
            Err(e) => return Err(e),
        };
        st.loss_sum += loss;
        st.loss_count += 1;
        st.iteration += 1;

        if st.iteration % interval == 0 || st.iteration == total {
            let report = evaluate(&st.model, &val_prepared, cfg.val_batch)?;
            let row = LogRow {
                iteration: st.iteration,
                train_loss: st.loss_sum / st.loss_count as f64,
                val_cer: report.cer,
                val_wer: report.wer,
                lr: cosine_lr(st.iteration, total, cfg.max_lr),
            };
            info!("iteration {} loss {:.4} val cer {:.4} wer {:.4}", row.iteration, row.train_loss, row.val_cer, row.val_wer);
            st.loss_sum = 0.0;
            st.loss_count = 0;
            let improved = row.val_cer < st.best_cer;
            if improved {
                st.best_cer = row.val_cer;
            }
            if let Some(f) = files {
                let mut log = OpenOptions::new().append(true).open(&f.log).map_err(io_err(&f.log))?;
                writeln!(log, "{}", row.to_csv()).map_err(io_err(&f.log))?;
                if improved {
                    let meta = [("val_cer".to_string(), row.val_cer.to_string())];
                    st.model.to_checkpoint(st.iteration, None, &meta).save(&f.checkpoint)?;
                }
                save_state(&st, cfg, f)?;
            }
            rows.push(row);
        }
    }
    if let Some(f) = files {
        save_state(&st, cfg, f)?;
    }
    Ok(TrainOutcome { model: st.model, iteration: st.iteration, best_cer: st.best_cer, log: rows })
}
