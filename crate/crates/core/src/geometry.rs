//! Page geometry: baselines, text-line polygons, line rectification and
//! reading order.
//!
//! Coordinates are continuous image coordinates with `y` growing downward;
//! pixel `(i, j)` covers `[i, i+1) × [j, j+1)` and its centre is at
//! `(i + 0.5, j + 0.5)`.

use std::cmp::Ordering;

use thiserror::Error;

use crate::interp::{Interpolator, MAX_ORDER};
use crate::raster::Raster;

/// Maximum distance a coordinate may sit outside the page and still be
/// silently clamped.
pub const CLAMP_TOLERANCE: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate line")]
    DegenerateLine,
    #[error("zero extent")]
    ZeroExtent,
    #[error("invalid baseline: {0}")]
    InvalidBaseline(String),
    #[error("target height {0} is below the minimum of 8")]
    TargetTooSmall(usize),
    #[error("interpolation order {0} is not supported (0..=3)")]
    InterpolationOrder(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn dist(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

/// Left-to-right polyline on which a text line sits.
#[derive(Clone, Debug, PartialEq)]
pub struct Baseline {
    points: Vec<Point>,
}

impl Baseline {
    pub fn new(points: Vec<Point>) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::InvalidBaseline(format!("{} points, need at least 2", points.len())));
        }
        if let Some(p) = points.iter().find(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::InvalidBaseline(format!("non-finite point {p:?}")));
        }
        if let Some(w) = points.windows(2).find(|w| w[1].x <= w[0].x) {
            return Err(GeometryError::InvalidBaseline(format!(
                "x must increase strictly ({} then {})",
                w[0].x, w[1].x
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    pub fn mean_y(&self) -> f64 {
        self.points.iter().map(|p| p.y).sum::<f64>() / self.points.len() as f64
    }

    pub fn min_x(&self) -> f64 {
        self.points[0].x
    }

    pub fn max_x(&self) -> f64 {
        self.points[self.points.len() - 1].x
    }

    /// Upward unit normal of each segment.
    fn segment_normals(&self) -> Vec<(f64, f64)> {
        self.points
            .windows(2)
            .map(|w| {
                let (dx, dy) = (w[1].x - w[0].x, w[1].y - w[0].y);
                let len = dx.hypot(dy);
                (dy / len, -dx / len)
            })
            .collect()
    }

    /// Upward unit normal at each vertex: the bisector of the adjacent
    /// segment normals (the segment normal itself at the ends).
    pub fn vertex_normals(&self) -> Vec<(f64, f64)> {
        let seg = self.segment_normals();
        let n = self.points.len();
        (0..n)
            .map(|i| {
                if i == 0 {
                    seg[0]
                } else if i == n - 1 {
                    seg[n - 2]
                } else {
                    let (ax, ay) = seg[i - 1];
                    let (bx, by) = seg[i];
                    let (sx, sy) = (ax + bx, ay + by);
                    let len = sx.hypot(sy);
                    if len < 1e-12 {
                        seg[i - 1]
                    } else {
                        (sx / len, sy / len)
                    }
                }
            })
            .collect()
    }

    /// Point and interpolated upward unit normal at arc length `s`.
    pub fn frame_at(&self, s: f64, normals: &[(f64, f64)]) -> (Point, (f64, f64)) {
        let mut rest = s.max(0.0);
        let last = self.points.len() - 2;
        for (i, w) in self.points.windows(2).enumerate() {
            let len = w[0].dist(w[1]);
            if rest <= len || i == last {
                let f = if len > 0.0 { (rest / len).min(1.0) } else { 0.0 };
                let p = Point::new(w[0].x + f * (w[1].x - w[0].x), w[0].y + f * (w[1].y - w[0].y));
                let (nx, ny) = (
                    normals[i].0 * (1.0 - f) + normals[i + 1].0 * f,
                    normals[i].1 * (1.0 - f) + normals[i + 1].1 * f,
                );
                let nl = nx.hypot(ny);
                return (p, if nl > 1e-12 { (nx / nl, ny / nl) } else { normals[i] });
            }
            rest -= len;
        }
        unreachable!("baseline has at least one segment")
    }

    fn translated(&self, dx: f64, dy: f64) -> Baseline {
        Baseline { points: self.points.iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextLineGeom {
    pub id: String,
    pub baseline: Baseline,
    pub ascender_height: f64,
    pub descender_height: f64,
    pub polygon: Vec<Point>,
}

impl TextLineGeom {
    /// Builds a line whose polygon is derived from the baseline and heights.
    pub fn from_baseline(id: impl Into<String>, baseline: Baseline, ascender: f64, descender: f64) -> Result<Self, GeometryError> {
        let polygon = polygon_from_baseline(&baseline, ascender, descender)?;
        Ok(Self { id: id.into(), baseline, ascender_height: ascender, descender_height: descender, polygon })
    }

    pub fn translated(&self, dx: f64, dy: f64) -> TextLineGeom {
        TextLineGeom {
            id: self.id.clone(),
            baseline: self.baseline.translated(dx, dy),
            ascender_height: self.ascender_height,
            descender_height: self.descender_height,
            polygon: self.polygon.iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub id: String,
    pub polygon: Vec<Point>,
    pub lines: Vec<TextLineGeom>,
}

impl Region {
    /// Horizontal extent and topmost `y` over the region polygon and its lines.
    fn extent(&self) -> (f64, f64, f64) {
        let pts = self.polygon.iter().chain(self.lines.iter().flat_map(|l| l.polygon.iter().chain(l.baseline.points())));
        let (mut lo, mut hi, mut top) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY);
        for p in pts {
            lo = lo.min(p.x);
            hi = hi.max(p.x);
            top = top.min(p.y);
        }
        if lo > hi {
            (0.0, 0.0, 0.0)
        } else {
            (lo, hi, top)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PageLayout {
    pub page_id: String,
    pub width: usize,
    pub height: usize,
    pub regions: Vec<Region>,
}

impl PageLayout {
    pub fn empty(page_id: impl Into<String>, width: usize, height: usize) -> Self {
        Self { page_id: page_id.into(), width, height, regions: Vec::new() }
    }

    pub fn lines(&self) -> impl Iterator<Item = &TextLineGeom> {
        self.regions.iter().flat_map(|r| r.lines.iter())
    }

    pub fn line_count(&self) -> usize {
        self.regions.iter().map(|r| r.lines.len()).sum()
    }

    /// Clamps every coordinate into `[0, width] × [0, height]`. Returns the
    /// number of points that were further than [`CLAMP_TOLERANCE`] outside.
    /// Baseline points that collapse onto their neighbour are dropped; lines
    /// left with fewer than two baseline points are removed.
    pub fn clamp_to_bounds(&mut self) -> usize {
        let (w, h) = (self.width as f64, self.height as f64);
        let mut far = 0;
        let mut clamp = |p: &mut Point| {
            let (cx, cy) = (p.x.clamp(0.0, w), p.y.clamp(0.0, h));
            if (cx - p.x).abs() > CLAMP_TOLERANCE || (cy - p.y).abs() > CLAMP_TOLERANCE {
                far += 1;
            }
            p.x = cx;
            p.y = cy;
        };
        for region in &mut self.regions {
            region.polygon.iter_mut().for_each(&mut clamp);
            for line in &mut region.lines {
                line.polygon.iter_mut().for_each(&mut clamp);
                let mut pts = line.baseline.points.clone();
                pts.iter_mut().for_each(&mut clamp);
                pts.dedup_by(|b, a| b.x <= a.x);
                line.baseline.points = pts;
            }
            region.lines.retain(|l| l.baseline.points.len() >= 2);
        }
        far
    }
}

/// Closed polygon around a baseline: the baseline offset upward by the
/// ascender height and downward by the descender height along the vertex
/// normals. Top edge left→right followed by bottom edge right→left.
pub fn polygon_from_baseline(baseline: &Baseline, ascender: f64, descender: f64) -> Result<Vec<Point>, GeometryError> {
    if baseline.arc_length() < 1e-9 {
        return Err(GeometryError::DegenerateLine);
    }
    if !(ascender + descender > 0.0) {
        return Err(GeometryError::ZeroExtent);
    }
    let normals = baseline.vertex_normals();
    let pts = baseline.points();
    let mut poly = Vec::with_capacity(2 * pts.len());
    for (p, n) in pts.iter().zip(&normals) {
        poly.push(Point::new(p.x + ascender * n.0, p.y + ascender * n.1));
    }
    for (p, n) in pts.iter().zip(&normals).rev() {
        poly.push(Point::new(p.x - descender * n.0, p.y - descender * n.1));
    }
    Ok(poly)
}

/// Point-in-polygon by ray casting; points on an edge count as inside.
pub fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        // on-segment test
        let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        let scale = (b.x - a.x).abs() + (b.y - a.y).abs() + 1.0;
        if cross.abs() <= 1e-9 * scale
            && p.x >= a.x.min(b.x) - 1e-9
            && p.x <= a.x.max(b.x) + 1e-9
            && p.y >= a.y.min(b.y) - 1e-9
            && p.y <= a.y.max(b.y) + 1e-9
        {
            return true;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let xi = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < xi {
                inside = !inside;
            }
        }
    }
    inside
}

/// A rectified text-line image and the layout element it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct LineImage {
    pub raster: Raster,
    pub line_id: String,
    /// Intensity used for samples that fell outside the page.
    pub background: f32,
}

/// Resamples the band around a (possibly curved) baseline into a straight
/// line image of exactly `target_height` rows.
///
/// Each output column corresponds to an arc-length position along the
/// baseline; its pixels are sampled along the baseline normal from
/// `line_scale · ascender` above to `line_scale · descender` below.
pub fn rectify_and_crop(
    image: &Raster,
    line: &TextLineGeom,
    target_height: usize,
    line_scale: f64,
    interp_order: usize,
) -> Result<LineImage, GeometryError> {
    if target_height < 8 {
        return Err(GeometryError::TargetTooSmall(target_height));
    }
    if interp_order > MAX_ORDER {
        return Err(GeometryError::InterpolationOrder(interp_order));
    }
    let length = line.baseline.arc_length();
    if length < 1.0 {
        return Err(GeometryError::DegenerateLine);
    }
    let above = line_scale * line.ascender_height;
    let below = line_scale * line.descender_height;
    let extent = above + below;
    if !(extent > 0.0) {
        return Err(GeometryError::ZeroExtent);
    }
    let width = ((length * target_height as f64 / extent).round() as usize).max(1);
    let background = image.border_median();
    let normals = line.baseline.vertex_normals();
    let row_step = extent / target_height as f64;
    let col_step = length / width as f64;

    // sample positions in continuous coordinates
    let mut coords = Vec::with_capacity(width * target_height);
    for j in 0..width {
        let (p, n) = line.baseline.frame_at((j as f64 + 0.5) * col_step, &normals);
        for i in 0..target_height {
            let u = above - (i as f64 + 0.5) * row_step;
            coords.push((p.x + u * n.0, p.y + u * n.1));
        }
    }

    let mut out = Raster::new(width, target_height, background);
    let (iw, ih) = (image.width() as f64, image.height() as f64);
    let inside = |&(x, y): &(f64, f64)| x >= 0.0 && x <= iw && y >= 0.0 && y <= ih;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in coords.iter().filter(|c| inside(c)) {
        x0 = x0.min(c.0);
        y0 = y0.min(c.1);
        x1 = x1.max(c.0);
        y1 = y1.max(c.1);
    }
    if x0 > x1 || image.is_empty() {
        return Ok(LineImage { raster: out, line_id: line.id.clone(), background });
    }
    // prefilter only a window around the band; the spline prefilter's
    // influence decays below 1e-9 within this margin
    let margin = if interp_order >= 2 { 16.0 } else { 2.0 };
    let wx0 = ((x0 - margin).floor().max(0.0)) as usize;
    let wy0 = ((y0 - margin).floor().max(0.0)) as usize;
    let wx1 = ((x1 + margin).ceil() as usize).min(image.width());
    let wy1 = ((y1 + margin).ceil() as usize).min(image.height());
    let window = image.window(wx0, wy0, wx1 - wx0, wy1 - wy0);
    let interp = Interpolator::new(&window, interp_order);
    for j in 0..width {
        for i in 0..target_height {
            let c = coords[j * target_height + i];
            if inside(&c) {
                let v = interp.sample(c.0 - 0.5 - wx0 as f64, c.1 - 0.5 - wy0 as f64);
                out.set(j, i, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(LineImage { raster: out, line_id: line.id.clone(), background })
}

fn id_cmp(a: &str, b: &str) -> Ordering {
    a.cmp(b)
}

/// Reorders regions column-major and lines top-to-bottom.
///
/// Regions whose horizontal extents overlap by at least half the narrower
/// width belong to the same column (transitively). Columns run left to
/// right; regions within a column run top to bottom. Lines within a region
/// are sorted by mean baseline `y`. Ties fall back to leftmost `x`, then id.
pub fn sort_reading_order(layout: &PageLayout) -> PageLayout {
    let mut out = layout.clone();
    for region in &mut out.regions {
        region.lines.sort_by(|a, b| {
            a.baseline
                .mean_y()
                .total_cmp(&b.baseline.mean_y())
                .then(a.baseline.min_x().total_cmp(&b.baseline.min_x()))
                .then_with(|| id_cmp(&a.id, &b.id))
        });
    }
    let extents: Vec<(f64, f64, f64)> = out.regions.iter().map(Region::extent).collect();
    let column = column_labels(&extents);

    // column key: leftmost x over its members, then topmost y, then smallest id
    let n_cols = column.iter().copied().max().map_or(0, |m| m + 1);
    let mut col_key = vec![(f64::INFINITY, f64::INFINITY, String::new()); n_cols];
    for (i, &c) in column.iter().enumerate() {
        let k = &mut col_key[c];
        let id = &out.regions[i].id;
        if k.2.is_empty() || id < &k.2 {
            k.2 = id.clone();
        }
        k.0 = k.0.min(extents[i].0);
        k.1 = k.1.min(extents[i].2);
    }
    let mut order: Vec<usize> = (0..out.regions.len()).collect();
    order.sort_by(|&a, &b| {
        let (ka, kb) = (&col_key[column[a]], &col_key[column[b]]);
        ka.0.total_cmp(&kb.0)
            .then(ka.1.total_cmp(&kb.1))
            .then_with(|| ka.2.cmp(&kb.2))
            .then(extents[a].2.total_cmp(&extents[b].2))
            .then(extents[a].0.total_cmp(&extents[b].0))
            .then_with(|| id_cmp(&out.regions[a].id, &out.regions[b].id))
    });
    let regions = std::mem::take(&mut out.regions);
    let mut slots: Vec<Option<Region>> = regions.into_iter().map(Some).collect();
    out.regions = order.into_iter().map(|i| slots[i].take().expect("permutation")).collect();
    out
}

/// Whether two horizontal extents fall in the same column.
pub fn same_column(a: (f64, f64), b: (f64, f64)) -> bool {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if lo > hi {
        return false;
    }
    let narrower = (a.1 - a.0).min(b.1 - b.0);
    hi - lo >= 0.5 * narrower
}

/// Connected components of the `same_column` relation, labelled 0..k.
fn column_labels(extents: &[(f64, f64, f64)]) -> Vec<usize> {
    let n = extents.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if same_column((extents[i].0, extents[i].1), (extents[j].0, extents[j].1)) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut labels = vec![usize::MAX; n];
    let mut next = 0;
    let mut out = vec![0; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if labels[r] == usize::MAX {
            labels[r] = next;
            next += 1;
        }
        out[i] = labels[r];
    }
    out
}
