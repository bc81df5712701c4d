//! Page and configuration fixtures shared by several test targets.
#![allow(dead_code)]

use std::path::PathBuf;

use fpthd::formats::TranscribedPage;
use fpthd::geometry::{Baseline, PageLayout, Point, Region, TextLineGeom};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn pts(v: &[(i32, i32)]) -> Vec<Point> {
    v.iter().map(|&(x, y)| Point::new(x as f64, y as f64)).collect()
}

pub fn line(id: &str, baseline: &[(i32, i32)], asc: f64, desc: f64, polygon: &[(i32, i32)]) -> TextLineGeom {
    TextLineGeom { id: id.into(), baseline: Baseline::new(pts(baseline)).unwrap(), ascender_height: asc, descender_height: desc, polygon: pts(polygon) }
}

pub fn one_line_page() -> TranscribedPage {
    let region = Region {
        id: "r0".into(),
        polygon: pts(&[(0, 60), (20, 60), (20, 110), (0, 110)]),
        lines: vec![line("r0_l0", &[(0, 95), (10, 95)], 30.0, 10.0, &[(0, 65), (10, 65), (10, 105), (0, 105)])],
    };
    let mut page = TranscribedPage::new(PageLayout { page_id: "folio1".into(), width: 120, height: 160, regions: vec![region] }, "folio1.png");
    page.texts.insert("r0_l0".into(), "dñi".into());
    page.confidences.insert("r0_l0".into(), 0.75);
    page
}

pub fn two_region_page() -> TranscribedPage {
    let r0 = Region {
        id: "r0".into(),
        polygon: pts(&[(10, 10), (190, 10), (190, 140), (10, 140)]),
        lines: vec![
            line("r0_l0", &[(20, 50), (100, 52), (180, 50)], 20.0, 8.0, &[(20, 30), (180, 30), (180, 58), (20, 58)]),
            line("r0_l1", &[(20, 100), (170, 100)], 20.5, 7.25, &[(20, 80), (170, 80), (170, 108), (20, 108)]),
        ],
    };
    let r1 = Region {
        id: "r1".into(),
        polygon: pts(&[(210, 10), (390, 10), (390, 140), (210, 140)]),
        lines: vec![
            line("r1_l0", &[(220, 50), (380, 50)], 20.0, 8.0, &[(220, 30), (380, 30), (380, 58), (220, 58)]),
            line("r1_l1", &[(220, 100), (300, 100)], 20.0, 8.0, &[(220, 80), (300, 80), (300, 108), (220, 108)]),
        ],
    };
    let layout = PageLayout { page_id: "two_col".into(), width: 400, height: 300, regions: vec![r0, r1] };
    let mut page = TranscribedPage::new(layout, "scans/two col & notes.png");
    page.texts.insert("r0_l0".into(), "amen dico".into());
    page.texts.insert("r0_l1".into(), "# nomen *sanctum* <&>".into());
    page.texts.insert("r1_l0".into(), "misión".into());
    page.confidences.insert("r1_l0".into(), 1.0);
    page
}

pub const TEXT_CHARS: &[char] = &['a', 'd', 'e', 'ñ', 'ó', ' ', '<', '>', '&', '"', '\'', '*', '#', '1', '.', '\u{0303}'];

/// A random page that is already on the integer grid PAGE stores.
pub fn random_page(seed: u64) -> TranscribedPage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = rng.gen_range(50..3000);
    let height = rng.gen_range(50..3000);
    let mut layout = PageLayout::empty(format!("p{seed}-x.y_z"), width, height);
    let mut page_texts = Vec::new();
    for ri in 0..rng.gen_range(0..4) {
        let mut region = Region { id: format!("r{ri}"), polygon: Vec::new(), lines: Vec::new() };
        region.polygon = (0..rng.gen_range(3..7)).map(|_| Point::new(rng.gen_range(-5..width as i32) as f64, rng.gen_range(-5..height as i32) as f64)).collect();
        for li in 0..rng.gen_range(0..4) {
            let mut x = rng.gen_range(-10..200);
            let baseline: Vec<Point> = (0..rng.gen_range(2..6))
                .map(|_| {
                    x += rng.gen_range(1..300);
                    Point::new(x as f64, rng.gen_range(0..height as i32) as f64)
                })
                .collect();
            let polygon = (0..rng.gen_range(0..9)).map(|_| Point::new(rng.gen_range(0..3000) as f64, rng.gen_range(0..3000) as f64)).collect();
            let id = format!("r{ri}_l{li}");
            let asc = rng.gen_range(1..400) as f64 / 4.0;
            let desc = rng.gen_range(0..400) as f64 / 4.0;
            if rng.gen_bool(0.7) {
                let n = rng.gen_range(0..20);
                page_texts.push((id.clone(), (0..n).map(|_| *TEXT_CHARS.choose(&mut rng).unwrap()).collect::<String>(), rng.gen_bool(0.5).then(|| rng.gen::<f64>())));
            }
            region.lines.push(TextLineGeom { id, baseline: Baseline::new(baseline).unwrap(), ascender_height: asc, descender_height: desc, polygon });
        }
        layout.regions.push(region);
    }
    let mut page = TranscribedPage::new(layout, format!("dir/{seed} & <scan>.png"));
    for (id, text, conf) in page_texts {
        if let Some(c) = conf {
            page.confidences.insert(id.clone(), c);
        }
        page.texts.insert(id, text);
    }
    page
}

/// The deployed pipeline settings, verbatim.
pub const DEPLOYED_CONFIG: &str = "
[PAGE_PARSER]
RUN_LAYOUT_PARSER = yes
RUN_LINE_CROPPER = yes
RUN_OCR = yes
RUN_DECODER = no

[LAYOUT_PARSER_1]
METHOD = LAYOUT_CNN
DETECT_LINES = yes
DETECT_REGIONS = yes
MERGE_LINES = no
ADJUST_HEIGHTS = no
MODEL_PATH = ./ParseNet_296000.pt
MAX_MEGAPIXELS = 5
USE_CPU = no
DOWNSAMPLE = 5
DETECTION_THRESHOLD = 0.2
LINE_END_WEIGHT = 1.0
VERTICAL_LINE_CONNECTION_RANGE = 3
SMOOTH_LINE_PREDICTIONS = no

[LAYOUT_PARSER_2]
METHOD = REGION_SORTER_SMART

[LINE_CROPPER]
INTERP = 2
LINE_SCALE = 1.0
LINE_HEIGHT = 50

[OCR]
OCR_JSON = ./ocr_engine.json
USE_CPU = no
";

/// The training hyperparameters under their descriptive names.
pub const TRAINING_CONFIG: &str = "
[TRAIN]
Maximum learning rate = 1e-3
Training batch size = 64
Validation batch size = 8
Weight decay factor = 0.5
Mask ratio for the input = 0.4
Attention mask ratio = 0.1
Maximum span length for attention = 8
Image size for input = 512 x 64
Projection size = 8
Maximum kernel size for dilation erosion = 2
Number of iterations for dilation erosion = 1
Probability factor for random sampling = 0.5
Alpha parameter = 1
Total number of iterations = 100000
";
