//! Grey-level dilation and erosion of ink.
//!
//! Images store paper as 1.0 and ink as 0.0, so growing ink is a minimum
//! filter on intensities and shrinking it is a maximum filter. The `k×k`
//! structuring element is anchored at its top-left cell: dilation spreads ink
//! right and down, erosion pulls it back, so an erosion followed by a
//! dilation with the same `k` restores rectangles at least `k` wide.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::raster::Raster;

/// Ink dilation: `out(x, y) = min_{0≤dx,dy<k} in(x−dx, y−dy)`.
pub fn dilate(image: &Raster, k: usize) -> Raster {
    filter(image, k, -1, f32::min)
}

/// Ink erosion: `out(x, y) = max_{0≤dx,dy<k} in(x+dx, y+dy)`.
pub fn erode(image: &Raster, k: usize) -> Raster {
    filter(image, k, 1, f32::max)
}

fn filter(image: &Raster, k: usize, dir: isize, op: fn(f32, f32) -> f32) -> Raster {
    if k <= 1 {
        return image.clone();
    }
    let (w, h) = (image.width() as isize, image.height() as isize);
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = image.get(x as usize, y as usize);
            for dy in 0..k as isize {
                for dx in 0..k as isize {
                    let (sx, sy) = (x + dir * dx, y + dir * dy);
                    if sx >= 0 && sx < w && sy >= 0 && sy < h {
                        acc = op(acc, image.get(sx as usize, sy as usize));
                    }
                }
            }
            out.set(x as usize, y as usize, acc);
        }
    }
    out
}

static CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of `morph_augment` calls made by this process.
pub fn augment_calls() -> u64 {
    CALLS.load(Ordering::Relaxed)
}

/// With probability `sample_prob`, dilates or erodes (fair coin) the ink with
/// a `k×k` element, `k ~ Uniform{1..max_kernel}`, `iterations` times.
/// Otherwise returns the input unchanged.
pub fn morph_augment(image: &Raster, max_kernel: usize, iterations: usize, sample_prob: f64, rng: &mut impl Rng) -> Raster {
    CALLS.fetch_add(1, Ordering::Relaxed);
    if max_kernel == 0 || !rng.gen_bool(sample_prob.clamp(0.0, 1.0)) {
        return image.clone();
    }
    let grow = rng.gen_bool(0.5);
    let k = rng.gen_range(1..=max_kernel);
    let mut out = image.clone();
    for _ in 0..iterations {
        out = if grow { dilate(&out, k) } else { erode(&out, k) };
    }
    out
}
