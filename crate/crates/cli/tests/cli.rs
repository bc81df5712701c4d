use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use fpthd::checkpoint::{Checkpoint, OCR_MAGIC};
use fpthd::formats::{parse_page_xml, PipelineConfig};
use fpthd::layout::LayoutTrainConfig;
use fpthd::ocrnet::{Charset, OcrConfig, OcrModel};
use fpthd::raster::Raster;
use fpthd::synth::ALPHABET;
use fpthd_cli::commands::{synthesize, train_layout, SynthRequest};
use fpthd_cli::manifest::{load_manifest, load_tree, load_tsv, ManifestError};
use fpthd_cli::pipeline::{run_pages, Models, PipelineOptions};
use tempfile::TempDir;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn pages(&self) -> PathBuf {
        self.dir.path().join("synth/pages")
    }
    fn layout_model(&self) -> PathBuf {
        self.dir.path().join("layout.ckpt")
    }
    fn ocr_model(&self) -> PathBuf {
        self.dir.path().join("ocr.ckpt")
    }
}

/// Three synthetic pages, a briefly trained layout network and an untrained
/// toy recognizer.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        synthesize(&SynthRequest { out: dir.path().join("synth"), pages: 3, lines: 0, seed: 11, cell: 3.0, line_height: 50 }).unwrap();
        let f = Fixture { dir };
        let cfg = LayoutTrainConfig { iterations: 150, ..LayoutTrainConfig::default() };
        train_layout(&f.pages(), &cfg, &f.layout_model()).unwrap();
        let charset = Charset::new(ALPHABET.chars().collect::<std::collections::BTreeSet<_>>().into_iter().collect()).unwrap();
        OcrModel::new(OcrConfig::toy(), charset, 3).unwrap().to_checkpoint(0, None, &[]).save(&f.ocr_model()).unwrap();
        f
    })
}

fn fpthd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpthd")).args(args).env_remove("FPTHD_CONFIG").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn transcribe(out: &Path, extra: &[&str]) -> Output {
    let f = fixture();
    let (pages, layout, ocr) = (f.pages(), f.layout_model(), f.ocr_model());
    let mut args = vec!["transcribe", s(&pages), "--out", s(out), "--layout-model", s(&layout), "--ocr-model", s(&ocr)];
    args.extend_from_slice(extra);
    fpthd(&args)
}

/// Every file under `dir` with its bytes, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn only(map: &BTreeMap<PathBuf, Vec<u8>>, pred: impl Fn(&Path) -> bool) -> BTreeMap<PathBuf, Vec<u8>> {
    map.iter().filter(|(k, _)| pred(k)).map(|(k, v)| (k.clone(), v.clone())).collect()
}

fn write_line_png(path: &Path) {
    Raster::new(12, 8, 0.9).save_png(path).unwrap();
}

#[test]
fn three_row_tsv_gives_three_entries_and_their_charset() {
    let dir = tempfile::tempdir().unwrap();
    for n in ["a.png", "b.png", "c.png"] {
        write_line_png(&dir.path().join(n));
    }
    let tsv = dir.path().join("m.tsv");
    fs::write(&tsv, "c.png\tsin\nb.png\tno\u{303}s\n\na.png\tde mi\n").unwrap();
    let m = load_manifest(&tsv).unwrap();
    assert_eq!(m.entries.len(), 3);
    assert_eq!(m.entries.iter().map(|e| e.text.as_str()).collect::<Vec<_>>(), ["de mi", "nõs", "sin"]);
    assert_eq!(m.charset.chars(), &[' ', 'd', 'e', 'i', 'm', 'n', 's', 'õ']);
    assert!(m.entries.windows(2).all(|w| w[0].image < w[1].image));
}

#[test]
fn missing_image_names_its_row() {
    let dir = tempfile::tempdir().unwrap();
    write_line_png(&dir.path().join("a.png"));
    let tsv = dir.path().join("m.tsv");
    fs::write(&tsv, "a.png\tone\nmissing.png\ttwo\n").unwrap();
    match load_tsv(&tsv) {
        Err(ManifestError::MissingImage { row, path }) => {
            assert_eq!(row, 2);
            assert!(path.ends_with("missing.png"));
        }
        other => panic!("{other:?}"),
    }
    fs::write(&tsv, b"a.png\tone\na.png\t\xff\xfe\n").unwrap();
    assert!(matches!(load_tsv(&tsv), Err(ManifestError::Utf8 { row: 2 })));
    fs::write(&tsv, "a.png one\n").unwrap();
    assert!(matches!(load_tsv(&tsv), Err(ManifestError::Malformed { row: 1 })));
}

#[test]
fn tree_and_tsv_loaders_agree() {
    let dir = tempfile::tempdir().unwrap();
    let texts = [("l1.png", "mano"), ("l0.png", "nin\u{303}o"), ("sub/l2.png", "dedo")];
    fs::create_dir(dir.path().join("sub")).unwrap();
    let mut tsv = String::new();
    for (name, text) in texts {
        let p = dir.path().join(name);
        write_line_png(&p);
        fs::write(p.with_extension("txt"), format!("{text}\n")).unwrap();
        tsv.push_str(&format!("{name}\t{text}\n"));
    }
    fs::write(dir.path().join("manifest.tsv"), tsv).unwrap();
    let from_tree = load_tree(dir.path()).unwrap();
    let from_tsv = load_tsv(&dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(from_tree, from_tsv);
    assert_eq!(from_tree.entries[0].text, "niño");
    fs::remove_file(dir.path().join("l1.txt")).unwrap();
    assert!(matches!(load_tree(dir.path()), Err(ManifestError::MissingText(_))));
}

#[test]
fn blank_page_gives_empty_outputs_and_success() {
    let dir = tempfile::tempdir().unwrap();
    let page = dir.path().join("blank.png");
    Raster::new(400, 300, 1.0).save_png(&page).unwrap();
    let f = fixture();
    let out = dir.path().join("out");
    let o = fpthd(&["transcribe", s(&page), "--out", s(&out), "--layout-model", s(&f.layout_model()), "--ocr-model", s(&f.ocr_model())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let xml = fs::read_to_string(out.join("blank.xml")).unwrap();
    let parsed = parse_page_xml(&xml).unwrap();
    assert_eq!(parsed.page.layout.line_count(), 0);
    assert_eq!((parsed.page.layout.width, parsed.page.layout.height), (400, 300));
    assert_eq!(fs::read(out.join("blank.txt")).unwrap().len(), 0);
    assert_eq!(fs::read_to_string(out.join("blank.md")).unwrap(), "# blank\n");
}

#[test]
fn unreadable_page_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let pages = dir.path().join("pages");
    fs::create_dir(&pages).unwrap();
    for name in ["page-000.png", "page-001.png"] {
        fs::copy(fixture().pages().join(name), pages.join(name)).unwrap();
    }
    fs::write(pages.join("page-002.png"), b"not an image").unwrap();
    let f = fixture();
    let out = dir.path().join("out");
    let o = fpthd(&["transcribe", s(&pages), "--out", s(&out), "--layout-model", s(&f.layout_model()), "--ocr-model", s(&f.ocr_model())]);
    assert_eq!(o.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("page-002.png") && !stderr.contains("page-000.png"), "{stderr}");
    for stem in ["page-000", "page-001"] {
        for ext in ["xml", "md", "txt"] {
            assert!(out.join(format!("{stem}.{ext}")).is_file());
        }
    }
    assert!(!out.join("page-002.xml").exists());
}

#[test]
fn corrupt_checkpoint_and_bad_config_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    let mut bytes = fs::read(fixture().ocr_model()).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0xff;
    fs::write(&bad, bytes).unwrap();
    let out = dir.path().join("out");
    let f = fixture();
    let o = fpthd(&["transcribe", s(&f.pages()), "--out", s(&out), "--layout-model", s(&f.layout_model()), "--ocr-model", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
    let ini = dir.path().join("bad.ini");
    fs::write(&ini, "[LAYOUT_PARSER_1]\nDOWNSAMPLE = abc\n").unwrap();
    let o = fpthd(&["--config", s(&ini), "transcribe", s(&f.pages()), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("LAYOUT_PARSER_1") && stderr.contains("DOWNSAMPLE"), "{stderr}");
    assert!(!out.exists());
}

#[test]
fn config_from_environment_and_set_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let ini = dir.path().join("c.ini");
    fs::write(&ini, "[LINE_CROPPER]\nLINE_HEIGHT = 32\n").unwrap();
    let f = fixture();
    let out = dir.path().join("out");
    let page = f.pages().join("page-000.png");
    let status = Command::new(env!("CARGO_BIN_EXE_fpthd"))
        .args(["transcribe", s(&page), "--out", s(&out), "--layout-model", s(&f.layout_model()), "--ocr-model", s(&f.ocr_model())])
        .env("FPTHD_CONFIG", &ini)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let crop = out.join("crops/page-000-r000-l000.png");
    assert_eq!(Raster::load(&crop).unwrap().height(), 32);
    let out2 = dir.path().join("out2");
    let o = transcribe(&out2, &["--set", "LINE_CROPPER.LINE_HEIGHT=40"]);
    assert!(o.status.success());
    assert_eq!(Raster::load(&out2.join("crops/page-000-r000-l000.png")).unwrap().height(), 40);
    assert_eq!(fpthd(&["--set", "NOPE.X=1", "synth", "--out", s(&out2)]).status.code(), Some(2));
}

#[test]
fn full_runs_are_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(transcribe(&a, &["--jobs", "1"]).status.success());
    assert!(transcribe(&b, &[]).status.success());
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert_eq!(sa, sb);
    assert_eq!(sa.keys().filter(|k| k.extension().is_some_and(|e| e == "xml")).count(), 3);
    assert!(sa.keys().any(|k| k.starts_with("crops")));
}

#[test]
fn skipping_layout_reproduces_the_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    assert!(transcribe(&full, &[]).status.success());
    let skipped = dir.path().join("skipped");
    let f = fixture();
    let o = fpthd(&["transcribe", s(&f.pages()), "--out", s(&skipped), "--page-xml", s(&full), "--ocr-model", s(&f.ocr_model())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let docs = |p: &Path| p.extension().is_some_and(|e| e == "txt" || e == "xml" || e == "md") || p.starts_with("crops");
    let (a, b) = (only(&snapshot(&full), docs), only(&snapshot(&skipped), docs));
    assert!(a.len() > 9);
    assert_eq!(a, b);

    // OCR alone on the crops the first run kept
    let ocr_only = dir.path().join("ocr_only");
    let o = fpthd(&[
        "transcribe", s(&f.pages()), "--out", s(&ocr_only), "--page-xml", s(&full), "--skip-crop", "--crops", s(&full.join("crops")), "--ocr-model", s(&f.ocr_model()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let texts = |p: &Path| p.extension().is_some_and(|e| e == "txt" || e == "xml");
    assert_eq!(only(&snapshot(&full), texts), only(&snapshot(&ocr_only), texts));
}

#[test]
fn layout_and_crop_subcommands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture();
    let out = dir.path().join("out");
    let o = fpthd(&["layout", s(&f.pages()), "--out", s(&out), "--layout-model", s(&f.layout_model())]);
    assert!(o.status.success());
    let xml = fs::read_to_string(out.join("page-001.xml")).unwrap();
    let page = parse_page_xml(&xml).unwrap().page;
    assert!(page.layout.line_count() > 0 && page.texts.is_empty());
    assert!(!out.join("crops").exists());
    let o = fpthd(&["crop", s(&f.pages()), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let crops = fs::read_dir(out.join("crops")).unwrap().filter(|e| e.as_ref().unwrap().path().to_string_lossy().contains("page-001-")).count();
    assert_eq!(crops, page.layout.line_count());
    assert_eq!(fs::read_to_string(out.join("page-001.xml")).unwrap(), xml);
}

#[test]
fn no_keep_crops_leaves_no_crop_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert!(transcribe(&out, &["--no-keep-crops"]).status.success());
    assert!(!out.join("crops").exists());
    assert!(out.join("page-000.txt").is_file());
    assert!(fs::read_dir(&out).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().contains(".tmp")));
}

#[test]
fn library_pipeline_matches_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture();
    let mut cfg = PipelineConfig::default();
    cfg.layout.model_path = f.layout_model();
    cfg.ocr.checkpoint = f.ocr_model();
    let models = Models::load(&cfg).unwrap();
    let lib_out = dir.path().join("lib");
    let report = run_pages(&[f.pages()], &models, &PipelineOptions::new(cfg, &lib_out)).unwrap();
    assert_eq!((report.pages.len(), report.exit_code()), (3, 0));
    let bin_out = dir.path().join("bin");
    assert!(transcribe(&bin_out, &[]).status.success());
    assert_eq!(snapshot(&lib_out), snapshot(&bin_out));
}

fn toy_train_args<'a>(train: &'a str, val: &'a str, out: &'a str, iterations: &'a str) -> Vec<&'a str> {
    vec![
        "--set", "MODEL.TOKEN_DIM=32", "--set", "MODEL.BLOCKS=1", "--set", "MODEL.EXTRACTOR=narrow", "--set", "TRAIN.TRAIN_BATCH=4",
        "--set", "TRAIN.VAL_BATCH=4", "train", "--train", train, "--val", val, "--out", out, "--iterations", iterations,
    ]
}

#[test]
fn train_writes_checkpoint_and_one_csv_row_per_validation() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = (dir.path().join("train"), dir.path().join("val"));
    assert!(fpthd(&["synth", "--out", s(&train), "--lines", "24", "--seed", "1"]).status.success());
    assert!(fpthd(&["synth", "--out", s(&val), "--lines", "6", "--seed", "2"]).status.success());
    let (tm, vm) = (train.join("lines/manifest.tsv"), val.join("lines/manifest.tsv"));
    let ckpt = dir.path().join("ocr.ckpt");
    let o = fpthd(&toy_train_args(s(&tm), s(&vm), s(&ckpt), "200"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(ckpt.with_extension("csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "iteration,train_loss,val_cer,val_wer,lr");
    assert_eq!(rows.len(), 1 + 2);
    assert!(rows[1].starts_with("100,") && rows[2].starts_with("200,"));
    assert!(Checkpoint::load(&ckpt, OCR_MAGIC).is_ok());
}

#[test]
fn zero_iterations_save_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = (dir.path().join("train"), dir.path().join("val"));
    assert!(fpthd(&["synth", "--out", s(&train), "--lines", "8", "--seed", "1"]).status.success());
    assert!(fpthd(&["synth", "--out", s(&val), "--lines", "2", "--seed", "2"]).status.success());
    let tm = train.join("lines/manifest.tsv");
    let ckpt = dir.path().join("ocr.ckpt");
    let o = fpthd(&toy_train_args(s(&tm), s(&val.join("lines/manifest.tsv")), s(&ckpt), "0"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let saved = OcrModel::from_checkpoint(&Checkpoint::load(&ckpt, OCR_MAGIC).unwrap()).unwrap();
    let mut cfg = PipelineConfig::default();
    for (section, key, value) in [("MODEL", "TOKEN_DIM", "32"), ("MODEL", "BLOCKS", "1"), ("MODEL", "EXTRACTOR", "narrow")] {
        cfg.set(section, key, value).unwrap();
    }
    let charset = load_manifest(&tm).unwrap().charset;
    let fresh = OcrModel::new(cfg.ocr_config(), charset, cfg.train.seed).unwrap();
    assert_eq!(saved.params(), fresh.params());
    assert_eq!(saved.charset(), fresh.charset());
}

#[test]
fn unseen_validation_character_is_a_startup_error() {
    let dir = tempfile::tempdir().unwrap();
    for n in ["t.png", "v.png"] {
        write_line_png(&dir.path().join(n));
    }
    fs::write(dir.path().join("train.tsv"), "t.png\tmesa\n").unwrap();
    fs::write(dir.path().join("val.tsv"), "v.png\tmesa\u{e7}\n").unwrap();
    let o = fpthd(&["train", "--train", s(&dir.path().join("train.tsv")), "--val", s(&dir.path().join("val.tsv")), "--out", s(&dir.path().join("x.ckpt"))]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("'ç'") && stderr.contains("v.png"), "{stderr}");
    assert!(!dir.path().join("x.ckpt").exists());
}

#[test]
fn evaluate_reports_corpus_rates() {
    let dir = tempfile::tempdir().unwrap();
    let (hyp, reference) = (dir.path().join("hyp"), dir.path().join("ref"));
    fs::create_dir(&hyp).unwrap();
    fs::create_dir(&reference).unwrap();
    let text: String = "abcdefghij".repeat(5);
    let edited: String = text.replacen('c', "x", 1).replacen('h', "", 1);
    fs::write(reference.join("p1.txt"), &text).unwrap();
    fs::write(reference.join("p2.txt"), &text).unwrap();
    fs::write(hyp.join("p1.txt"), &edited).unwrap();
    fs::write(hyp.join("p2.txt"), &text).unwrap();
    let csv = dir.path().join("eval.csv");
    let o = fpthd(&["evaluate", "--hyp", s(&hyp), "--ref", s(&reference), "--csv", s(&csv)]);
    assert!(o.status.success());
    let report = fs::read_to_string(&csv).unwrap();
    assert!(report.lines().last().unwrap().starts_with("TOTAL,0.020000,"), "{report}");

    let o = fpthd(&["evaluate", "--hyp", s(&reference), "--ref", s(&reference)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("CER 0.00%"));

    fs::write(hyp.join("p3.txt"), "x").unwrap();
    fs::remove_file(hyp.join("p1.txt")).unwrap();
    let o = fpthd(&["evaluate", "--hyp", s(&hyp), "--ref", s(&reference)]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("p1") && stderr.contains("p3"), "{stderr}");
}
