use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, LAYOUT_MAGIC};
use crate::geometry::{point_in_polygon, Baseline, PageLayout, Point};
use crate::nn::graph::{sigmoid, softplus};
use crate::nn::params::{he_bound, uniform};
use crate::nn::{ConvGeom, Graph, Params, Real, Tensor, Var};
use crate::raster::{median, Raster};
use crate::train::BaseOptimizer;

use super::{LayoutError, ProbabilityMaps};

/// Encoder channel widths, finest level first.
pub const WIDTHS: [usize; 5] = [16, 32, 64, 64, 64];
/// Output channels: baseline logit, ascender, descender, region logit.
pub const HEADS: usize = 4;

const SAME: ConvGeom = ConvGeom { stride: (1, 1), pad: (1, 1) };
const DOWN: ConvGeom = ConvGeom { stride: (2, 2), pad: (1, 1) };
const POINT: ConvGeom = ConvGeom { stride: (1, 1), pad: (0, 0) };

/// Four-level convolutional encoder–decoder with additive skip connections.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutNet<R: Real = f32> {
    params: Params<R>,
    /// Downsample factor the network was trained with.
    pub downsample: usize,
}

fn layer_shapes() -> Vec<(String, [usize; 4])> {
    let mut out = Vec::new();
    let mut c_in = 1;
    for (i, &w) in WIDTHS.iter().enumerate() {
        out.push((format!("enc{i}"), [w, c_in, 3, 3]));
        c_in = w;
    }
    for i in (0..WIDTHS.len() - 1).rev() {
        out.push((format!("dec{i}"), [WIDTHS[i], WIDTHS[i + 1], 3, 3]));
    }
    out.push(("head".into(), [HEADS, WIDTHS[0], 1, 1]));
    out
}

impl<R: Real> LayoutNet<R> {
    /// He-uniform weights, zero biases.
    pub fn new(seed: u64, downsample: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for (name, shape) in layer_shapes() {
            let fan_in = shape[1] * shape[2] * shape[3];
            params.push(format!("{name}.weight"), uniform(&mut rng, &shape, he_bound(fan_in)), true);
            params.push(format!("{name}.bias"), Tensor::zeros(&[shape[0]]), false);
        }
        Self { params, downsample }
    }

    pub fn zeros(downsample: usize) -> Self {
        let mut net = Self::new(0, downsample);
        for p in net.params.iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        net
    }

    pub fn params(&self) -> &Params<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<R> {
        &mut self.params
    }

    fn conv(&self, g: &mut Graph<R>, x: Var, layer: &str, geom: ConvGeom) -> Var {
        let wi = self.params.index_of(&format!("{layer}.weight")).expect("layer weight");
        let w = g.param(wi, &self.params.get(wi).value);
        let b = g.param(wi + 1, &self.params.get(wi + 1).value);
        g.conv2d(x, w, b, geom)
    }

    /// Raw head outputs `[HEADS, H, W]` for a standardized `[1, H, W]` input.
    pub fn forward(&self, g: &mut Graph<R>, x: Var) -> Var {
        let mut skips = Vec::with_capacity(WIDTHS.len());
        let mut h = x;
        for i in 0..WIDTHS.len() {
            let c = self.conv(g, h, &format!("enc{i}"), if i == 0 { SAME } else { DOWN });
            h = g.relu(c);
            skips.push(h);
        }
        for i in (0..WIDTHS.len() - 1).rev() {
            let (_, sh, sw) = g.value(skips[i]).dims3();
            let up = g.upsample2x(h, sh, sw);
            let c = self.conv(g, up, &format!("dec{i}"), SAME);
            let c = g.relu(c);
            h = g.add(c, skips[i]);
        }
        self.conv(g, h, "head", POINT)
    }
}

impl LayoutNet<f32> {
    pub fn to_checkpoint(&self, iteration: u64) -> Checkpoint {
        let widths: Vec<String> = WIDTHS.iter().map(|w| w.to_string()).collect();
        Checkpoint {
            magic: *LAYOUT_MAGIC,
            meta: vec![("widths".into(), widths.join(",")), ("downsample".into(), self.downsample.to_string())],
            iteration,
            charset: Vec::new(),
            params: self.params.clone(),
            optimizer: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, LayoutError> {
        let downsample: usize = ck.meta_parse("downsample")?;
        let template = Self::new(0, downsample.max(1));
        let matches = ck.params.len() == template.params.len()
            && ck.params.iter().zip(template.params.iter()).all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !matches || downsample == 0 {
            return Err(LayoutError::Network("layer table does not match the layout architecture".into()));
        }
        if !ck.params.all_finite() {
            return Err(LayoutError::Network("non-finite weights".into()));
        }
        Ok(Self { params: ck.params.clone(), downsample })
    }

    pub fn save(&self, path: &Path) -> Result<(), LayoutError> {
        Ok(self.to_checkpoint(0).save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, LayoutError> {
        Self::from_checkpoint(&Checkpoint::load(path, LAYOUT_MAGIC)?)
    }
}

/// Factor applied to a `width × height` page so it fits the megapixel budget.
pub fn processing_scale(width: usize, height: usize, max_megapixels: f64) -> f64 {
    let pixels = (width * height) as f64;
    let budget = max_megapixels * 1e6;
    if pixels > budget {
        (budget / pixels).sqrt()
    } else {
        1.0
    }
}

/// Ink-positive normalization: the median background level maps to 0, which matches the
/// convolutions' zero padding, and values are divided by the deviation.
fn standardize(r: &Raster) -> Tensor<f32> {
    let n = r.data().len().max(1) as f64;
    let bg = median(&mut r.data().to_vec()) as f64;
    let var = r.data().iter().map(|&v| (v as f64 - bg).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-6);
    Tensor::from_vec(&[1, r.height(), r.width()], r.data().iter().map(|&v| ((bg - v as f64) / sd) as f32).collect())
}

/// Network input at map resolution.
fn network_input(image: &Raster, downsample: usize) -> Tensor<f32> {
    standardize(&image.downsample_area(downsample))
}

/// Runs the network on a page. Pages above the megapixel budget are resized
/// first; the maps record the scale so decoding returns original-image
/// coordinates.
pub fn predict_maps(image: &Raster, net: &LayoutNet<f32>, downsample: usize, max_megapixels: f64) -> Result<ProbabilityMaps, LayoutError> {
    if image.is_empty() {
        return Err(LayoutError::EmptyImage);
    }
    if downsample == 0 || !(max_megapixels > 0.0) {
        return Err(LayoutError::Config("downsample and max_megapixels must be positive".into()));
    }
    let s = processing_scale(image.width(), image.height(), max_megapixels);
    let (processed, scale) = if s < 1.0 {
        let w = ((image.width() as f64 * s).round() as usize).max(1);
        let h = ((image.height() as f64 * s).round() as usize).max(1);
        (image.resize(w, h), w as f64 / image.width() as f64)
    } else {
        (image.clone(), 1.0)
    };
    let mut g = Graph::new();
    let x = g.input(network_input(&processed, downsample));
    let out = net.forward(&mut g, x);
    let (_, h, w) = g.value(out).dims3();
    let plane = |c: usize, f: fn(f32) -> f32| {
        Raster::from_vec(w, h, g.value(out).data()[c * h * w..(c + 1) * h * w].iter().map(|&v| f(v)).collect())
    };
    Ok(ProbabilityMaps {
        baseline: plane(0, sigmoid),
        ascender: plane(1, softplus),
        descender: plane(2, softplus),
        region: plane(3, sigmoid),
        downsample,
        scale,
        image_width: image.width(),
        image_height: image.height(),
    })
}

/// Training targets at map resolution. Height targets are in map pixels and
/// only count where `baseline` is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutTargets {
    pub baseline: Raster,
    pub ascender: Raster,
    pub descender: Raster,
    pub region: Raster,
}

impl LayoutTargets {
    pub fn width(&self) -> usize {
        self.baseline.width()
    }

    pub fn height(&self) -> usize {
        self.baseline.height()
    }
}

fn baseline_y_at(b: &Baseline, x: f64) -> Option<f64> {
    b.points().windows(2).find(|w| w[0].x.min(w[1].x) <= x && x <= w[0].x.max(w[1].x)).map(|w| {
        let dx = w[1].x - w[0].x;
        if dx == 0.0 {
            w[0].y
        } else {
            w[0].y + (x - w[0].x) / dx * (w[1].y - w[0].y)
        }
    })
}

/// Paints a layout into map-resolution targets. Each baseline marks the map
/// cell containing it in every column whose center it spans, and the height
/// maps carry that line's heights at the same cells. Region targets cover map
/// cells whose center lies inside a region polygon.
pub fn rasterize_targets(layout: &PageLayout, map_width: usize, map_height: usize, downsample: usize) -> LayoutTargets {
    let k = downsample.max(1) as f64;
    let mut t = LayoutTargets {
        baseline: Raster::new(map_width, map_height, 0.0),
        ascender: Raster::new(map_width, map_height, 0.0),
        descender: Raster::new(map_width, map_height, 0.0),
        region: Raster::new(map_width, map_height, 0.0),
    };
    for region in &layout.regions {
        for y in 0..map_height {
            for x in 0..map_width {
                if point_in_polygon(Point::new((x as f64 + 0.5) * k, (y as f64 + 0.5) * k), &region.polygon) {
                    t.region.set(x, y, 1.0);
                }
            }
        }
        for line in &region.lines {
            for x in 0..map_width {
                let Some(y) = baseline_y_at(&line.baseline, (x as f64 + 0.5) * k) else { continue };
                let row = (y / k).floor();
                if row >= 0.0 && (row as usize) < map_height {
                    let row = row as usize;
                    t.baseline.set(x, row, 1.0);
                    t.ascender.set(x, row, (line.ascender_height / k) as f32);
                    t.descender.set(x, row, (line.descender_height / k) as f32);
                }
            }
        }
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutTrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch: usize,
    /// Side of the square map-resolution patches sampled per step.
    pub patch: usize,
    pub downsample: usize,
    /// Weight on positive baseline pixels in the cross-entropy.
    pub pos_weight: f64,
    pub seed: u64,
}

impl Default for LayoutTrainConfig {
    fn default() -> Self {
        Self { iterations: 500, lr: 2e-3, batch: 4, patch: 64, downsample: 5, pos_weight: 4.0, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayoutTrainOutcome {
    pub net: LayoutNet<f32>,
    /// Mean batch loss of every iteration.
    pub losses: Vec<f64>,
}

fn patch_loss(net: &LayoutNet<f32>, input: &Tensor<f32>, t: &LayoutTargets, x0: usize, y0: usize, side: usize, pos_weight: f64) -> (f64, Vec<Tensor<f32>>) {
    let (pw, ph) = (side.min(t.width()), side.min(t.height()));
    let window = |r: &Raster| Tensor::from_vec(&[1, ph, pw], r.window(x0, y0, pw, ph).data().to_vec());
    let full_w = t.width();
    let mut data = Vec::with_capacity(pw * ph);
    for y in y0..y0 + ph {
        data.extend_from_slice(&input.data()[y * full_w + x0..y * full_w + x0 + pw]);
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(&[1, ph, pw], data));
    let out = net.forward(&mut g, x);
    let base = window(&t.baseline);
    let logits = g.channels(out, 0, 1);
    let l_base = g.bce_with_logits(logits, &base, pos_weight as f32);
    let region = g.channels(out, 3, 4);
    let l_region = g.bce_with_logits(region, &window(&t.region), 1.0);
    let asc = g.channels(out, 1, 2);
    let asc = g.softplus(asc);
    let l_asc = g.weighted_l1(asc, &window(&t.ascender), &base);
    let desc = g.channels(out, 2, 3);
    let desc = g.softplus(desc);
    let l_desc = g.weighted_l1(desc, &window(&t.descender), &base);
    let a = g.add(l_base, l_region);
    let b = g.add(l_asc, l_desc);
    let loss = g.add(a, b);
    let value = g.value(loss).data()[0] as f64;
    let grads = g
        .backward(loss, net.params().len())
        .into_iter()
        .zip(net.params().iter())
        .map(|(gr, p)| gr.unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    (value, grads)
}

/// Patch origin drawn from a range extended by half a patch on both sides
/// and clamped, so page borders are seen often.
fn edge_biased_origin(rng: &mut impl Rng, extent: usize, patch: usize) -> usize {
    let room = extent.saturating_sub(patch) as i64;
    let half = (patch / 2) as i64;
    rng.gen_range(-half..=room + half).clamp(0, room) as usize
}

/// Adam on random map-resolution patches. Images are used at native scale;
/// `corpus[i].0` must area-downsample to exactly the target dimensions.
pub fn train_layout_net(corpus: &[(Raster, LayoutTargets)], cfg: &LayoutTrainConfig, init: LayoutNet<f32>) -> Result<LayoutTrainOutcome, LayoutError> {
    if corpus.is_empty() {
        return Err(LayoutError::EmptyCorpus);
    }
    if cfg.downsample == 0 || cfg.batch == 0 || cfg.patch == 0 || !(cfg.lr > 0.0) {
        return Err(LayoutError::Config("downsample, batch, patch and lr must be positive".into()));
    }
    let mut inputs = Vec::with_capacity(corpus.len());
    for (image, t) in corpus {
        let expected = (image.width().div_ceil(cfg.downsample), image.height().div_ceil(cfg.downsample));
        for m in [&t.baseline, &t.ascender, &t.descender, &t.region] {
            if (m.width(), m.height()) != expected {
                return Err(LayoutError::Misaligned { expected, got: (m.width(), m.height()) });
            }
        }
        if image.is_empty() {
            return Err(LayoutError::EmptyImage);
        }
        inputs.push(network_input(image, cfg.downsample));
    }
    let mut net = LayoutNet { params: init.params, downsample: cfg.downsample };
    let mut opt = BaseOptimizer::adam(&net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let picks: Vec<(usize, usize, usize)> = (0..cfg.batch)
            .map(|_| {
                let i = rng.gen_range(0..corpus.len());
                let t = &corpus[i].1;
                let x0 = edge_biased_origin(&mut rng, t.width(), cfg.patch);
                let y0 = edge_biased_origin(&mut rng, t.height(), cfg.patch);
                (i, x0, y0)
            })
            .collect();
        let results: Vec<(f64, Vec<Tensor<f32>>)> = picks
            .par_iter()
            .map(|&(i, x0, y0)| patch_loss(&net, &inputs[i], &corpus[i].1, x0, y0, cfg.patch, cfg.pos_weight))
            .collect();
        let n = results.len() as f32;
        let mut total = 0.0;
        let mut grads: Vec<Tensor<f32>> = net.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        for (loss, gs) in &results {
            total += loss;
            for (acc, g) in grads.iter_mut().zip(gs) {
                for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v / n;
                }
            }
        }
        let mean = total / results.len() as f64;
        if !mean.is_finite() {
            return Err(LayoutError::Network("training loss became non-finite".into()));
        }
        losses.push(mean);
        opt.apply(&mut net.params, &grads, cfg.lr, 0.0);
    }
    Ok(LayoutTrainOutcome { net, losses })
}
