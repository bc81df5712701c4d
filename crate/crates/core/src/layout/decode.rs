use crate::geometry::{sort_reading_order, Baseline, PageLayout, Point, Region, TextLineGeom};
use crate::raster::{median, Raster};

use super::{LayoutDecoderConfig, LayoutError, ProbabilityMaps};

/// Vertex budget per baseline.
pub const MAX_VERTICES: usize = 32;
/// Maximum deviation, in map pixels, allowed when simplifying a baseline.
pub const SIMPLIFY_TOLERANCE: f64 = 0.5;

/// An 8-connected set of map pixels above threshold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    /// `(x, y)` pixels in row-major order.
    pub pixels: Vec<(usize, usize)>,
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl Component {
    fn from_pixels(mut pixels: Vec<(usize, usize)>) -> Self {
        pixels.sort_by_key(|&(x, y)| (y, x));
        let x0 = pixels.iter().map(|p| p.0).min().unwrap_or(0);
        let x1 = pixels.iter().map(|p| p.0).max().unwrap_or(0);
        let y0 = pixels.iter().map(|p| p.1).min().unwrap_or(0);
        let y1 = pixels.iter().map(|p| p.1).max().unwrap_or(0);
        Self { pixels, x0, x1, y0, y1 }
    }

    fn row_gap(&self, other: &Component) -> usize {
        (self.y0.max(other.y0) as isize - self.y1.min(other.y1) as isize - 1).max(0) as usize
    }

    fn col_gap(&self, other: &Component) -> usize {
        (self.x0.max(other.x0) as isize - self.x1.min(other.x1) as isize - 1).max(0) as usize
    }

    fn x_overlap(&self, other: &Component) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1
    }
}

/// 8-connected components of the pixels strictly above `threshold`, ordered
/// by their first pixel in row-major order.
pub fn connected_components(map: &Raster, threshold: f64) -> Vec<Component> {
    let (w, h) = (map.width(), map.height());
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if seen[y * w + x] || (map.get(x, y) as f64) <= threshold {
                continue;
            }
            seen[y * w + x] = true;
            let mut stack = vec![(x, y)];
            let mut pixels = Vec::new();
            while let Some((cx, cy)) = stack.pop() {
                pixels.push((cx, cy));
                for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                        let i = ny * w + nx;
                        if !seen[i] && (map.get(nx, ny) as f64) > threshold {
                            seen[i] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            out.push(Component::from_pixels(pixels));
        }
    }
    out
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Groups components that belong to one text line.
fn group_components(comps: Vec<Component>, cfg: &LayoutDecoderConfig) -> Vec<Component> {
    let n = comps.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let range = cfg.vertical_connection_range;
    let merge_gap = 2 * (range + 1);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&comps[i], &comps[j]);
            let stacked = a.row_gap(b) <= range && a.x_overlap(b);
            let collinear = cfg.merge_lines && a.row_gap(b) <= range && a.col_gap(b) <= merge_gap;
            if stacked || collinear {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (i, c) in comps.into_iter().enumerate() {
        let r = find(&mut parent, i);
        groups[r].extend(c.pixels);
    }
    groups.into_iter().filter(|g| !g.is_empty()).map(Component::from_pixels).collect()
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0) };
    ((p.x - a.x - t * dx).powi(2) + (p.y - a.y - t * dy).powi(2)).sqrt()
}

/// Maximum-deviation polyline reduction: keeps the endpoints and every
/// vertex needed to stay within `tolerance` of the original.
pub fn simplify_polyline(points: &[Point], tolerance: f64) -> Vec<Point> {
    if points.len() <= 2 {
        return points.to_vec();
    }
    let mut keep = vec![false; points.len()];
    keep[0] = true;
    keep[points.len() - 1] = true;
    let mut stack = vec![(0, points.len() - 1)];
    while let Some((a, b)) = stack.pop() {
        let mut worst = (0.0, a);
        for i in a + 1..b {
            let d = point_segment_distance(points[i], points[a], points[b]);
            if d > worst.0 {
                worst = (d, i);
            }
        }
        if worst.0 > tolerance {
            keep[worst.1] = true;
            stack.push((a, worst.1));
            stack.push((worst.1, b));
        }
    }
    points.iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| *p).collect()
}

struct DecodedLine {
    /// Baseline in map coordinates (pixel centers at `+0.5`).
    points: Vec<Point>,
    ascender: Vec<f32>,
    descender: Vec<f32>,
}

fn fit_line(c: &Component, maps: &ProbabilityMaps, cfg: &LayoutDecoderConfig) -> Option<DecodedLine> {
    let width = c.x1 - c.x0 + 1;
    let mut mass = vec![0.0f64; width];
    let mut moment = vec![0.0f64; width];
    let mut count = vec![0usize; width];
    for &(x, y) in &c.pixels {
        let p = maps.baseline.get(x, y) as f64;
        mass[x - c.x0] += p;
        moment[x - c.x0] += p * (y as f64 + 0.5);
        count[x - c.x0] += 1;
    }
    let floor = cfg.line_end_weight * cfg.detection_threshold;
    let strong = |i: usize| count[i] > 0 && mass[i] / count[i] as f64 >= floor;
    let first = (0..width).find(|&i| strong(i))?;
    let last = (0..width).rev().find(|&i| strong(i))?;
    let cols: Vec<usize> = (first..=last).filter(|&i| count[i] > 0).collect();
    if cols.len() < 2 {
        return None;
    }
    let mut ys: Vec<f64> = cols.iter().map(|&i| moment[i] / mass[i]).collect();
    if cfg.smooth_predictions && ys.len() >= 3 {
        let raw = ys.clone();
        for k in 0..ys.len() {
            let lo = k.saturating_sub(1);
            let hi = (k + 1).min(raw.len() - 1);
            ys[k] = raw[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
        }
    }
    let points: Vec<Point> = cols.iter().zip(&ys).map(|(&i, &y)| Point::new((c.x0 + i) as f64 + 0.5, y)).collect();
    let sample = |m: &Raster| -> Vec<f32> {
        points
            .iter()
            .map(|p| m.get((p.x as usize).min(m.width() - 1), (p.y.max(0.0) as usize).min(m.height() - 1)))
            .collect()
    };
    let ascender = sample(&maps.ascender);
    let descender = sample(&maps.descender);
    let mut tolerance = SIMPLIFY_TOLERANCE;
    let mut simple = simplify_polyline(&points, tolerance);
    while simple.len() > MAX_VERTICES {
        tolerance *= 2.0;
        simple = simplify_polyline(&points, tolerance);
    }
    Some(DecodedLine { points: simple, ascender, descender })
}

fn point_at_half_length(points: &[Point]) -> Point {
    let total: f64 = points.windows(2).map(|w| ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt()).sum();
    let mut left = total / 2.0;
    for w in points.windows(2) {
        let len = ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt();
        if left <= len && len > 0.0 {
            let t = left / len;
            return Point::new(w[0].x + t * (w[1].x - w[0].x), w[0].y + t * (w[1].y - w[0].y));
        }
        left -= len;
    }
    points[points.len() - 1]
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Point> {
    vec![Point::new(x0, y0), Point::new(x1, y0), Point::new(x1, y1), Point::new(x0, y1)]
}

fn bounding_rect(points: &[Point]) -> Vec<Point> {
    let x0 = points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let x1 = points.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let y0 = points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let y1 = points.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    rect(x0, y0, x1, y1)
}

/// Turns probability maps into a page layout in reading order. Region and
/// line ids are assigned after sorting: `r<i>` and `r<i>_l<j>`.
pub fn decode_baselines(maps: &ProbabilityMaps, cfg: &LayoutDecoderConfig, page_id: &str) -> Result<PageLayout, LayoutError> {
    maps.validate()?;
    cfg.validate()?;
    let mut layout = PageLayout::empty(page_id, maps.image_width, maps.image_height);
    if maps.width() == 0 || maps.height() == 0 {
        return Ok(layout);
    }
    let comps = group_components(connected_components(&maps.baseline, cfg.detection_threshold), cfg);
    let decoded: Vec<DecodedLine> = comps.iter().filter_map(|c| fit_line(c, maps, cfg)).collect();
    let k = maps.map_to_image();
    let global = |pick: fn(&DecodedLine) -> &Vec<f32>| {
        let mut all: Vec<f32> = decoded.iter().flat_map(|d| pick(d).iter().copied()).collect();
        if all.is_empty() {
            0.0
        } else {
            median(&mut all)
        }
    };
    let (global_asc, global_desc) = (global(|d| &d.ascender), global(|d| &d.descender));

    let regions_map = if cfg.detect_regions { connected_components(&maps.region, cfg.detection_threshold) } else { Vec::new() };
    let mut owner = vec![usize::MAX; maps.width() * maps.height()];
    for (ri, r) in regions_map.iter().enumerate() {
        for &(x, y) in &r.pixels {
            owner[y * maps.width() + x] = ri;
        }
    }
    let mut region_lines: Vec<Vec<TextLineGeom>> = vec![Vec::new(); regions_map.len()];
    let mut singles: Vec<Region> = Vec::new();
    for (i, d) in decoded.iter().enumerate() {
        let (asc, desc) = if cfg.adjust_heights {
            (global_asc, global_desc)
        } else {
            (median(&mut d.ascender.clone()), median(&mut d.descender.clone()))
        };
        let asc = (asc as f64 * k).max(1.0);
        let desc = (desc as f64 * k).max(0.0);
        let pts: Vec<Point> = d.points.iter().map(|p| Point::new(p.x * k, p.y * k)).collect();
        let Ok(baseline) = Baseline::new(pts) else { continue };
        let Ok(line) = TextLineGeom::from_baseline(format!("line{i}"), baseline, asc, desc) else { continue };
        let mid = point_at_half_length(&d.points);
        let (mx, my) = ((mid.x as usize).min(maps.width() - 1), (mid.y.max(0.0) as usize).min(maps.height() - 1));
        match owner[my * maps.width() + mx] {
            usize::MAX => singles.push(Region { id: String::new(), polygon: bounding_rect(&line.polygon), lines: vec![line] }),
            ri => region_lines[ri].push(line),
        }
    }
    for (r, lines) in regions_map.iter().zip(region_lines) {
        if !lines.is_empty() {
            let polygon = rect(r.x0 as f64 * k, r.y0 as f64 * k, (r.x1 + 1) as f64 * k, (r.y1 + 1) as f64 * k);
            layout.regions.push(Region { id: String::new(), polygon, lines });
        }
    }
    layout.regions.extend(singles);
    layout.clamp_to_bounds();
    let mut layout = sort_reading_order(&layout);
    for (ri, region) in layout.regions.iter_mut().enumerate() {
        region.id = format!("r{ri}");
        for (li, line) in region.lines.iter_mut().enumerate() {
            line.id = format!("r{ri}_l{li}");
        }
    }
    Ok(layout)
}
