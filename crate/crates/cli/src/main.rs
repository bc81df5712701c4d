use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fpthd::checkpoint::write_atomic;
use fpthd::formats::{parse_config, PipelineConfig};
use fpthd::layout::LayoutTrainConfig;
use fpthd_cli::commands::{evaluate_dirs, synthesize, train_layout, train_ocr, SynthRequest, TrainRequest};
use fpthd_cli::pipeline::{run_pages, Models, PipelineOptions, RunReport};
use log::warn;

#[derive(Parser)]
#[command(name = "fpthd", version, about = "Full-page transcription of historical documents")]
struct Cli {
    /// INI configuration file
    #[arg(long, global = true, env = "FPTHD_CONFIG")]
    config: Option<PathBuf>,
    /// Override one configuration value (repeatable)
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Layout, line cropping and OCR; writes <page>.xml, .md and .txt
    Transcribe(TranscribeArgs),
    /// Layout analysis only; writes PAGE XML without text
    Layout(LayoutArgs),
    /// Crop line images for pages that already have PAGE XML
    Crop(CropArgs),
    /// Train the line recognizer
    Train(TrainArgs),
    /// CER/WER of hypothesis TXT files against references
    Evaluate(EvaluateArgs),
    /// Train the layout network on pages with PAGE XML ground truth
    TrainLayout(TrainLayoutArgs),
    /// Render synthetic pages and line images
    Synth(SynthArgs),
}

#[derive(Args)]
struct PageArgs {
    /// Page images or directories of page images
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output directory
    #[arg(short, long)]
    out: PathBuf,
    /// Pages processed concurrently (default: all cores)
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct TranscribeArgs {
    #[command(flatten)]
    pages: PageArgs,
    /// Layout checkpoint (LAYOUT_PARSER_1.MODEL_PATH)
    #[arg(long)]
    layout_model: Option<PathBuf>,
    /// OCR checkpoint (OCR.CHECKPOINT)
    #[arg(long)]
    ocr_model: Option<PathBuf>,
    /// Directory with existing <page>.xml layouts; implies skipping layout
    #[arg(long)]
    page_xml: Option<PathBuf>,
    /// Directory with existing crops, read when cropping is skipped
    #[arg(long)]
    crops: Option<PathBuf>,
    /// PAGE_PARSER.RUN_LAYOUT_PARSER = no
    #[arg(long)]
    skip_layout: bool,
    /// PAGE_PARSER.RUN_LINE_CROPPER = no
    #[arg(long)]
    skip_crop: bool,
    /// Do not write line crops to <out>/crops
    #[arg(long)]
    no_keep_crops: bool,
}

#[derive(Args)]
struct LayoutArgs {
    #[command(flatten)]
    pages: PageArgs,
    #[arg(long)]
    layout_model: Option<PathBuf>,
}

#[derive(Args)]
struct CropArgs {
    #[command(flatten)]
    pages: PageArgs,
    /// Directory with <page>.xml layouts (default: the output directory)
    #[arg(long)]
    page_xml: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest: TSV file or directory of images with .txt files
    #[arg(long)]
    train: PathBuf,
    /// Validation manifest
    #[arg(long)]
    val: PathBuf,
    /// Best checkpoint path
    #[arg(short, long)]
    out: PathBuf,
    /// Metrics CSV (default: checkpoint path with .csv extension)
    #[arg(long)]
    log: Option<PathBuf>,
    /// TRAIN.TOTAL_ITERATIONS
    #[arg(long)]
    iterations: Option<u64>,
    /// Continue from the state file next to the checkpoint
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of hypothesis .txt files
    #[arg(long)]
    hyp: PathBuf,
    /// Directory of reference .txt files with the same stems
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Per-page CSV report
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainLayoutArgs {
    /// Directory of page images with same-stem PAGE XML
    #[arg(long)]
    data: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Square patch side in map pixels
    #[arg(long, default_value_t = 64)]
    patch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pages: usize,
    #[arg(long, default_value_t = 0)]
    lines: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Glyph cell size in pixels
    #[arg(long, default_value_t = 3.0)]
    cell: f64,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let outcome = parse_config(&text).with_context(|| format!("in {}", path.display()))?;
            for w in &outcome.warnings {
                warn!("{}: {w}", path.display());
            }
            outcome.config
        }
        None => PipelineConfig::default(),
    };
    for item in &cli.set {
        let (lhs, value) = item.split_once('=').with_context(|| format!("--set {item:?}: expected SECTION.KEY=VALUE"))?;
        let (section, key) = lhs.split_once('.').with_context(|| format!("--set {item:?}: expected SECTION.KEY=VALUE"))?;
        if !cfg.set(section, key, value)? {
            bail!("--set {item:?}: unknown configuration key");
        }
    }
    Ok(cfg)
}

fn report(run: &RunReport) -> u8 {
    for page in &run.pages {
        println!("{}: {} lines", page.image.display(), page.page.layout.line_count());
    }
    for failure in &run.failures {
        eprintln!("error: {}: {}", failure.image.display(), failure.message);
    }
    if !run.failures.is_empty() {
        eprintln!("{} of {} pages failed", run.failures.len(), run.failures.len() + run.pages.len());
    }
    run.exit_code()
}

fn options(cfg: PipelineConfig, pages: &PageArgs) -> PipelineOptions {
    PipelineOptions { jobs: pages.jobs, ..PipelineOptions::new(cfg, &pages.out) }
}

fn run(cli: &Cli) -> Result<u8> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Transcribe(a) => {
            if let Some(p) = &a.layout_model {
                cfg.layout.model_path = p.clone();
            }
            if let Some(p) = &a.ocr_model {
                cfg.ocr.checkpoint = p.clone();
            }
            if a.skip_layout || a.page_xml.is_some() {
                cfg.flags.run_layout = false;
            }
            if a.skip_crop {
                cfg.flags.run_cropper = false;
            }
            cfg.validate()?;
            let models = Models::load(&cfg)?;
            let mut opts = options(cfg, &a.pages);
            opts.layout_dir = a.page_xml.clone();
            opts.crops_dir = a.crops.clone();
            opts.keep_crops = !a.no_keep_crops;
            Ok(report(&run_pages(&a.pages.inputs, &models, &opts)?))
        }
        Command::Layout(a) => {
            if let Some(p) = &a.layout_model {
                cfg.layout.model_path = p.clone();
            }
            cfg.flags.run_layout = true;
            cfg.flags.run_cropper = false;
            cfg.flags.run_ocr = false;
            cfg.validate()?;
            let models = Models::load(&cfg)?;
            Ok(report(&run_pages(&a.pages.inputs, &models, &options(cfg, &a.pages))?))
        }
        Command::Crop(a) => {
            cfg.flags.run_layout = false;
            cfg.flags.run_cropper = true;
            cfg.flags.run_ocr = false;
            cfg.validate()?;
            let models = Models { layout: None, ocr: None };
            let mut opts = options(cfg, &a.pages);
            opts.layout_dir = a.page_xml.clone();
            opts.write_documents = false;
            Ok(report(&run_pages(&a.pages.inputs, &models, &opts)?))
        }
        Command::Train(a) => {
            let mut train_cfg = cfg.train.clone();
            if let Some(n) = a.iterations {
                train_cfg.total_iterations = n;
            }
            cfg.validate()?;
            let req = TrainRequest { train: a.train.clone(), val: a.val.clone(), checkpoint: a.out.clone(), log: a.log.clone(), resume: a.resume };
            let outcome = train_ocr(&cfg, &train_cfg, &req)?;
            println!("iteration {}, best validation CER {:.4}", outcome.iteration, outcome.best_cer);
            Ok(0)
        }
        Command::Evaluate(a) => {
            let report = evaluate_dirs(&a.hyp, &a.reference)?;
            for line in &report.per_line {
                println!("{}: CER {:.4} WER {:.4}", line.id, line.cer, line.wer);
            }
            print!("{}", report.summary());
            if let Some(csv) = &a.csv {
                write_atomic(csv, report.to_csv().as_bytes()).with_context(|| format!("writing {}", csv.display()))?;
            }
            Ok(0)
        }
        Command::TrainLayout(a) => {
            cfg.validate()?;
            let lcfg = LayoutTrainConfig {
                iterations: a.iterations,
                lr: a.lr,
                batch: a.batch,
                patch: a.patch,
                downsample: cfg.layout.downsample,
                seed: a.seed,
                ..LayoutTrainConfig::default()
            };
            let losses = train_layout(&a.data, &lcfg, &a.out)?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                println!("loss {first:.4} -> {last:.4}");
            }
            Ok(0)
        }
        Command::Synth(a) => {
            let req = SynthRequest { out: a.out.clone(), pages: a.pages, lines: a.lines, seed: a.seed, cell: a.cell, line_height: cfg.cropper.line_height };
            synthesize(&req)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
