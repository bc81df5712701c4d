//! Synthetic pages and line images drawn with a small bitmap font, used for
//! smoke training and end-to-end checks.

use rand::Rng;

use crate::geometry::{rectify_and_crop, Baseline, GeometryError, PageLayout, Point, Region, TextLineGeom};
use crate::raster::Raster;
use crate::train::LineSample;

/// Every character the font can draw.
pub const ALPHABET: &str = "adeimnosñ ";

/// Glyph rows above the baseline; the top four are the ascender zone.
const GLYPH_ROWS: usize = 9;
/// Ascender and descender extents in font cells.
pub const ASCENDER_CELLS: f64 = 10.0;
pub const DESCENDER_CELLS: f64 = 3.0;

fn glyph(c: char) -> Option<[&'static str; GLYPH_ROWS]> {
    let g = match c {
        'a' => ["", "", "", "", ".###.", "....#", ".####", "#...#", ".####"],
        'd' => ["....#", "....#", "....#", "....#", ".####", "#...#", "#...#", "#...#", ".####"],
        'e' => ["", "", "", "", ".###.", "#...#", "#####", "#....", ".###."],
        'i' => ["", "", ".#.", "", "##.", ".#.", ".#.", ".#.", "###"],
        'm' => ["", "", "", "", "###.##.", "#..#..#", "#..#..#", "#..#..#", "#..#..#"],
        'n' => ["", "", "", "", "####.", "#...#", "#...#", "#...#", "#...#"],
        'o' => ["", "", "", "", ".###.", "#...#", "#...#", "#...#", ".###."],
        's' => ["", "", "", "", ".####", "#....", ".###.", "....#", "####."],
        'ñ' => ["", ".##.#", "#..#.", "", "####.", "#...#", "#...#", "#...#", "#...#"],
        ' ' => ["...", "", "", "", "", "", "", "", ""],
        _ => return None,
    };
    Some(g)
}

fn glyph_width(rows: &[&str]) -> usize {
    rows.iter().map(|r| r.len()).max().unwrap_or(0)
}

/// Horizontal advance of `text` in pixels at the given cell size.
pub fn text_width(text: &str, cell: f64) -> f64 {
    text.chars().filter_map(glyph).map(|g| (glyph_width(&g) + 1) as f64 * cell).sum()
}

/// Adds the ink coverage of the axis-aligned box `[x0, x1) × [y0, y1)`.
fn cover(cov: &mut [f32], width: usize, height: usize, x0: f64, y0: f64, x1: f64, y1: f64) {
    let px0 = x0.floor().max(0.0) as usize;
    let py0 = y0.floor().max(0.0) as usize;
    let px1 = (x1.ceil().max(0.0) as usize).min(width);
    let py1 = (y1.ceil().max(0.0) as usize).min(height);
    for py in py0..py1 {
        let oy = (y1.min(py as f64 + 1.0) - y0.max(py as f64)).max(0.0);
        for px in px0..px1 {
            let ox = (x1.min(px as f64 + 1.0) - x0.max(px as f64)).max(0.0);
            cov[py * width + px] += (ox * oy) as f32;
        }
    }
}

/// Draws `text` starting at `x` with its baseline at `baseline_y`, returning
/// the advance. Pixels are darkened towards `ink` by their exact coverage.
/// `jitter` shifts each glyph vertically by up to that many cells.
pub fn draw_text(canvas: &mut Raster, text: &str, x: f64, baseline_y: f64, cell: f64, ink: f32, jitter: f64, rng: &mut impl Rng) -> f64 {
    let (w, h) = (canvas.width(), canvas.height());
    let mut cov = vec![0f32; w * h];
    let mut pen = x;
    for c in text.chars() {
        let Some(g) = glyph(c) else { continue };
        let dy = if jitter > 0.0 { rng.gen_range(-jitter..=jitter) * cell } else { 0.0 };
        let top = baseline_y - GLYPH_ROWS as f64 * cell + dy;
        for (r, row) in g.iter().enumerate() {
            for (k, ch) in row.chars().enumerate() {
                if ch == '#' {
                    let (x0, y0) = (pen + k as f64 * cell, top + r as f64 * cell);
                    cover(&mut cov, w, h, x0, y0, x0 + cell, y0 + cell);
                }
            }
        }
        pen += (glyph_width(&g) + 1) as f64 * cell;
    }
    for (v, &c) in canvas.data_mut().iter_mut().zip(&cov) {
        let c = c.min(1.0);
        *v = *v * (1.0 - c) + ink * c;
    }
    pen - x
}

fn add_noise(r: &mut Raster, amount: f32, rng: &mut impl Rng) {
    if amount > 0.0 {
        for v in r.data_mut() {
            *v = (*v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0);
        }
    }
}

/// Random words over the font's letters joined by single spaces; between
/// `min_len` and `max_len` characters with no leading or trailing space.
pub fn random_text(rng: &mut impl Rng, min_len: usize, max_len: usize) -> String {
    let letters: Vec<char> = ALPHABET.chars().filter(|&c| c != ' ').collect();
    let target = rng.gen_range(min_len.max(1)..=max_len.max(min_len.max(1)));
    let mut s = String::new();
    let mut word = 0;
    while s.chars().count() < target {
        let room = target - s.chars().count();
        if word >= 2 && room >= 2 && rng.gen_bool(0.25) {
            s.push(' ');
            word = 0;
        } else {
            s.push(letters[rng.gen_range(0..letters.len())]);
            word += 1;
        }
    }
    s
}

/// Layout parameters of a synthetic two-column page.
#[derive(Clone, Debug, PartialEq)]
pub struct PageStyle {
    pub width: usize,
    pub height: usize,
    /// Left and right edges of each column.
    pub columns: Vec<(f64, f64)>,
    pub lines_per_column: usize,
    pub first_baseline: f64,
    pub line_pitch: f64,
    pub cell: f64,
    pub min_chars: usize,
    pub max_chars: usize,
    pub noise: f32,
}

impl Default for PageStyle {
    fn default() -> Self {
        Self {
            width: 900,
            height: 620,
            columns: vec![(40.0, 420.0), (480.0, 860.0)],
            lines_per_column: 10,
            first_baseline: 80.0,
            line_pitch: 50.0,
            cell: 3.0,
            min_chars: 6,
            max_chars: 14,
            noise: 0.05,
        }
    }
}

/// A rendered page, its ground-truth layout and the text of every line in
/// reading order.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPage {
    pub image: Raster,
    pub layout: PageLayout,
    pub texts: Vec<(String, String)>,
}

impl SynthPage {
    /// Ground-truth page text: one line per text line in reading order.
    pub fn text(&self) -> String {
        self.texts.iter().map(|(_, t)| t.as_str()).collect::<Vec<_>>().join("\n")
    }
}

pub fn render_page(page_id: &str, style: &PageStyle, rng: &mut impl Rng) -> SynthPage {
    let mut image = Raster::new(style.width, style.height, 0.92);
    let (asc, desc) = (ASCENDER_CELLS * style.cell, DESCENDER_CELLS * style.cell);
    let mut regions = Vec::new();
    let mut texts = Vec::new();
    for (ri, &(left, right)) in style.columns.iter().enumerate() {
        let mut lines = Vec::new();
        for li in 0..style.lines_per_column {
            let text = random_text(rng, style.min_chars, style.max_chars);
            let x0 = left + rng.gen_range(0.0..12.0);
            let y = style.first_baseline + li as f64 * style.line_pitch + rng.gen_range(-2.0..2.0);
            let advance = draw_text(&mut image, &text, x0, y, style.cell, 0.1, 0.1, rng);
            let x1 = (x0 + advance - style.cell).min(right);
            let baseline = Baseline::new(vec![Point::new(x0, y), Point::new(x1, y)]).expect("increasing x");
            let id = format!("r{ri}_l{li}");
            lines.push(TextLineGeom::from_baseline(&id, baseline, asc, desc).expect("valid line"));
            texts.push((id, text));
        }
        let top = style.first_baseline - asc - 8.0;
        let bottom = style.first_baseline + (style.lines_per_column - 1) as f64 * style.line_pitch + desc + 8.0;
        let x0 = lines.iter().map(|l| l.baseline.min_x()).fold(right, f64::min) - 8.0;
        let x1 = lines.iter().map(|l| l.baseline.max_x()).fold(left, f64::max) + 8.0;
        let polygon = vec![
            Point::new(x0, top),
            Point::new(x1, top),
            Point::new(x1, bottom),
            Point::new(x0, bottom),
        ];
        regions.push(Region { id: format!("r{ri}"), polygon, lines });
    }
    add_noise(&mut image, style.noise, rng);
    SynthPage { image, layout: PageLayout { page_id: page_id.into(), width: style.width, height: style.height, regions }, texts }
}

/// Line images cropped from single-line strips with the page pipeline's
/// rectifier. The crop geometry is perturbed (baseline offset up to
/// `±0.5` cell, heights up to `±10%`) the way a detector would.
pub fn line_samples(n: usize, cell: f64, target_height: usize, rng: &mut impl Rng) -> Result<Vec<LineSample>, GeometryError> {
    let (asc, desc) = (ASCENDER_CELLS * cell, DESCENDER_CELLS * cell);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let text = random_text(rng, 4, 14);
        let width = (text_width(&text, cell) + 40.0).ceil() as usize;
        let height = (asc + desc + 30.0).ceil() as usize;
        let mut strip = Raster::new(width, height, 0.92);
        let (x0, y) = (20.0 + rng.gen_range(-2.0..2.0), 15.0 + asc);
        let advance = draw_text(&mut strip, &text, x0, y, cell, 0.1, 0.1, rng);
        add_noise(&mut strip, 0.05, rng);
        let dy = rng.gen_range(-0.5..=0.5) * cell;
        let baseline = Baseline::new(vec![Point::new(x0, y + dy), Point::new(x0 + advance - cell, y + dy)])?;
        let line = TextLineGeom::from_baseline(
            format!("synth-{i:04}"),
            baseline,
            asc * rng.gen_range(0.9..=1.1),
            desc * rng.gen_range(0.9..=1.1),
        )?;
        let crop = rectify_and_crop(&strip, &line, target_height, 1.0, 2)?;
        out.push(LineSample { id: line.id, image: crop.raster, background: crop.background, text });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alphabet_has_ten_drawable_characters() {
        assert_eq!(ALPHABET.chars().count(), 10);
        assert!(ALPHABET.chars().all(|c| glyph(c).is_some()));
        assert!(ALPHABET.contains('ñ'));
        let shapes: Vec<_> = ALPHABET.chars().map(|c| glyph(c).unwrap()).collect();
        for i in 0..shapes.len() {
            for j in i + 1..shapes.len() {
                assert_ne!(shapes[i], shapes[j]);
            }
        }
    }

    #[test]
    fn coverage_is_exact_for_aligned_and_offset_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut r = Raster::new(20, 20, 1.0);
        draw_text(&mut r, "i", 2.0, 15.0, 2.0, 0.0, 0.0, &mut rng);
        let ink: f32 = r.data().iter().map(|v| 1.0 - v).sum();
        // 'i' has 9 ink cells of 2×2 pixels
        assert!((ink - 36.0).abs() < 1e-4);
        let mut s = Raster::new(20, 20, 1.0);
        draw_text(&mut s, "i", 2.5, 15.25, 2.0, 0.0, 0.0, &mut rng);
        let ink: f32 = s.data().iter().map(|v| 1.0 - v).sum();
        assert!((ink - 36.0).abs() < 1e-4);
    }

    #[test]
    fn random_text_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let t = random_text(&mut rng, 4, 14);
            let n = t.chars().count();
            assert!((4..=14).contains(&n), "{t:?}");
            assert!(!t.starts_with(' ') && !t.ends_with(' ') && !t.contains("  "));
            assert!(t.chars().all(|c| ALPHABET.contains(c)));
        }
    }

    #[test]
    fn page_layout_matches_rendered_text() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let page = render_page("p", &PageStyle::default(), &mut rng);
        assert_eq!(page.layout.regions.len(), 2);
        assert_eq!(page.layout.line_count(), 20);
        assert_eq!(page.texts.len(), 20);
        for l in page.layout.lines() {
            let b = l.baseline.points();
            assert!(b[0].x >= 40.0 && b[1].x <= 860.0);
            // ink just above the baseline, paper well below it
            let y = b[0].y.round() as usize;
            let row_above: f32 = (b[0].x as usize..b[1].x as usize).map(|x| page.image.get(x, y - 2)).sum::<f32>();
            let row_below: f32 = (b[0].x as usize..b[1].x as usize).map(|x| page.image.get(x, y + 6)).sum::<f32>();
            assert!(row_above < row_below);
        }
    }

    #[test]
    fn line_samples_have_target_height() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = line_samples(5, 3.0, 50, &mut rng).unwrap();
        assert_eq!(samples.len(), 5);
        for s in samples {
            assert_eq!(s.image.height(), 50);
            assert!(s.image.width() > 50);
            assert!((s.background - 0.92).abs() < 0.1);
        }
    }
}
