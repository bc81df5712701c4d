use crate::nn::Tensor;
use crate::raster::Raster;

use super::OcrError;

pub const STANDARDIZE_EPS: f32 = 1e-6;

/// A line image resized to the network height, standardized and padded on
/// the right to a fixed canvas width.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedLine {
    /// `[1, height, width]`.
    pub pixels: Tensor<f32>,
    /// Width of the resized content before padding.
    pub content_width: usize,
    /// Tokens that overlap real content; CTC only sees these.
    pub valid_tokens: usize,
}

/// Resizes `raster` to `height` rows preserving aspect ratio (squeezing to
/// `width` if it would be wider), standardizes it with statistics of the
/// content only, and pads the right side with the standardized `background`.
pub fn prepare_line(raster: &Raster, background: f32, height: usize, width: usize, projection: usize) -> Result<PreparedLine, OcrError> {
    if raster.is_empty() {
        return Err(OcrError::EmptyImage);
    }
    let scaled = (raster.width() as f64 * height as f64 / raster.height() as f64).round() as usize;
    let w = scaled.clamp(1, width);
    let resized = raster.resize(w, height);
    Ok(standardize_and_pad(&resized, background, width, projection))
}

/// Standardizes an already-resized line and pads it to `width` columns.
pub fn standardize_and_pad(line: &Raster, background: f32, width: usize, projection: usize) -> PreparedLine {
    let (w, h) = (line.width(), line.height());
    assert!(w <= width, "content wider than canvas");
    let n = line.data().len() as f64;
    let mean = line.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = line.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let (mean, std) = (mean as f32, var.sqrt() as f32);
    let norm = |v: f32| (v - mean) / (std + STANDARDIZE_EPS);
    let pad = norm(background);
    let mut data = vec![pad; h * width];
    for y in 0..h {
        for (x, &v) in line.row(y).iter().enumerate() {
            data[y * width + x] = norm(v);
        }
    }
    PreparedLine {
        pixels: Tensor::from_vec(&[1, h, width], data),
        content_width: w,
        valid_tokens: w.div_ceil(projection).min(width / projection).max(1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_width_line_reports_half_the_tokens() {
        let line = Raster::new(256, 64, 0.5);
        let p = prepare_line(&line, 1.0, 64, 512, 8).unwrap();
        assert_eq!(p.pixels.shape(), &[1, 64, 512]);
        assert_eq!(p.valid_tokens, 32);
        let p = prepare_line(&Raster::new(1000, 50, 0.5), 1.0, 64, 512, 8).unwrap();
        assert_eq!((p.content_width, p.valid_tokens), (512, 64));
        let p = prepare_line(&Raster::new(100, 50, 0.5), 1.0, 64, 512, 8).unwrap();
        assert_eq!((p.content_width, p.valid_tokens), (128, 16));
    }

    #[test]
    fn content_is_standardized() {
        let mut line = Raster::new(64, 64, 1.0);
        for x in 0..32 {
            for y in 0..64 {
                line.set(x, y, 0.0);
            }
        }
        let p = prepare_line(&line, 1.0, 64, 128, 8).unwrap();
        let content: Vec<f32> = (0..64).flat_map(|y| p.pixels.data()[y * 128..y * 128 + 64].to_vec()).collect();
        let mean: f32 = content.iter().sum::<f32>() / content.len() as f32;
        assert!(mean.abs() < 1e-5);
        assert!((p.pixels.data()[127] - 1.0).abs() < 1e-5);
        assert_eq!(prepare_line(&Raster::new(0, 0, 1.0), 1.0, 64, 512, 8), Err(OcrError::EmptyImage));
    }
}
