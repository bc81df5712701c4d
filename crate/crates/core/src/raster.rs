//! Single-channel floating point images.
//!
//! Intensities are in `[0, 1]` with `1.0` = white paper and `0.0` = black ink.

use std::path::Path;

use image::{GrayImage, ImageReader, Luma};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("cannot read image {path}: {source}")]
    Read { path: String, source: image::ImageError },
    #[error("cannot write image {path}: {source}")]
    Write { path: String, source: image::ImageError },
    #[error("image is empty")]
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, fill: f32) -> Self {
        Self { width, height, data: vec![fill; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "raster buffer size");
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[f32] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Sub-image `[x0, x0+w) × [y0, y0+h)`; the window must lie inside.
    pub fn window(&self, x0: usize, y0: usize, w: usize, h: usize) -> Raster {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "window out of bounds");
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Raster::from_vec(w, h, data)
    }

    /// Median intensity of the outermost pixel ring.
    pub fn border_median(&self) -> f32 {
        if self.is_empty() {
            return 1.0;
        }
        let mut ring = Vec::with_capacity(2 * (self.width + self.height));
        for x in 0..self.width {
            ring.push(self.get(x, 0));
            if self.height > 1 {
                ring.push(self.get(x, self.height - 1));
            }
        }
        for y in 1..self.height.saturating_sub(1) {
            ring.push(self.get(0, y));
            if self.width > 1 {
                ring.push(self.get(self.width - 1, y));
            }
        }
        median(&mut ring)
    }

    /// Bilinear resize to exactly `width × height` (pixel-center aligned).
    pub fn resize(&self, width: usize, height: usize) -> Raster {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Raster::new(width, height, 0.0);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = (fx - x0 as f64) as f32;
                let top = self.get(x0, y0) * (1.0 - wx) + self.get(x1, y0) * wx;
                let bot = self.get(x0, y1) * (1.0 - wx) + self.get(x1, y1) * wx;
                out.set(x, y, top * (1.0 - wy) + bot * wy);
            }
        }
        out
    }

    /// Rotation by `degrees` (counter-clockwise) about the image center with
    /// bilinear sampling; uncovered pixels take `fill`.
    pub fn rotate(&self, degrees: f64, fill: f32) -> Raster {
        let (sin, cos) = degrees.to_radians().sin_cos();
        let (cx, cy) = (self.width as f64 / 2.0, self.height as f64 / 2.0);
        let mut out = Raster::new(self.width, self.height, fill);
        for y in 0..self.height {
            for x in 0..self.width {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let sx = cos * dx - sin * dy + cx - 0.5;
                let sy = sin * dx + cos * dy + cy - 0.5;
                if sx < 0.0 || sy < 0.0 || sx > (self.width - 1) as f64 || sy > (self.height - 1) as f64 {
                    continue;
                }
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
                let (wx, wy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
                let top = self.get(x0, y0) * (1.0 - wx) + self.get(x1, y0) * wx;
                let bot = self.get(x0, y1) * (1.0 - wx) + self.get(x1, y1) * wx;
                out.set(x, y, top * (1.0 - wy) + bot * wy);
            }
        }
        out
    }

    /// Box-filter downsampling by an integer factor; partial blocks at the
    /// right/bottom edges average the pixels they contain.
    pub fn downsample_area(&self, factor: usize) -> Raster {
        assert!(factor >= 1);
        if factor == 1 {
            return self.clone();
        }
        let w = self.width.div_ceil(factor);
        let h = self.height.div_ceil(factor);
        let mut out = Raster::new(w, h, 0.0);
        for by in 0..h {
            for bx in 0..w {
                let (mut s, mut n) = (0.0f32, 0usize);
                for y in by * factor..((by + 1) * factor).min(self.height) {
                    for x in bx * factor..((bx + 1) * factor).min(self.width) {
                        s += self.get(x, y);
                        n += 1;
                    }
                }
                out.set(bx, by, s / n as f32);
            }
        }
        out
    }

    pub fn from_gray8(img: &GrayImage) -> Raster {
        let (w, h) = img.dimensions();
        Raster::from_vec(w as usize, h as usize, img.pixels().map(|p| p.0[0] as f32 / 255.0).collect())
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([(self.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }

    /// Loads PNG/JPEG; colour images are converted to luminance.
    pub fn load(path: &Path) -> Result<Raster, RasterError> {
        let err = |source| RasterError::Read { path: path.display().to_string(), source };
        let img = ImageReader::open(path)
            .map_err(|e| err(image::ImageError::IoError(e)))?
            .with_guessed_format()
            .map_err(|e| err(image::ImageError::IoError(e)))?
            .decode()
            .map_err(err)?;
        let r = Raster::from_gray8(&img.to_luma8());
        if r.is_empty() {
            return Err(RasterError::Empty);
        }
        Ok(r)
    }

    /// 8-bit grayscale PNG bytes.
    pub fn encode_png(&self) -> Result<Vec<u8>, RasterError> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_gray8()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|source| RasterError::Write { path: "<memory>".into(), source })?;
        Ok(out.into_inner())
    }

    /// The raster as it reads back from an 8-bit file.
    pub fn quantized(&self) -> Raster {
        Raster::from_gray8(&self.to_gray8())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        self.to_gray8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| RasterError::Write { path: path.display().to_string(), source })
    }
}

/// Median of a non-empty slice (lower middle for even lengths is averaged with
/// the upper one).
pub fn median(values: &mut [f32]) -> f32 {
    assert!(!values.is_empty());
    values.sort_by(f32::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
