//! B-spline image interpolation of order 0–3 with mirror boundaries.
//!
//! Orders 2 and 3 are interpolating splines: the image is first converted to
//! spline coefficients with a recursive prefilter so that sampling exactly on
//! the pixel grid reproduces the input.

use crate::raster::Raster;

/// Largest supported interpolation order.
pub const MAX_ORDER: usize = 3;

fn pole(order: usize) -> Option<f64> {
    match order {
        2 => Some(8f64.sqrt() - 3.0),
        3 => Some(3f64.sqrt() - 2.0),
        _ => None,
    }
}

#[inline]
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// In-place conversion of a 1-D signal to B-spline coefficients (single pole).
fn prefilter_line(c: &mut [f64], z: f64) {
    let n = c.len();
    if n < 2 {
        return;
    }
    let gain = (1.0 - z) * (1.0 - 1.0 / z);
    for v in c.iter_mut() {
        *v *= gain;
    }
    // causal initialization: the mirrored signal is periodic, so the
    // infinite sum closes over one period
    let period = 2 * n - 2;
    let mut sum = 0.0;
    let mut zk = 1.0;
    for k in 0..period {
        sum += zk * c[mirror(k as isize, n)];
        zk *= z;
    }
    sum /= 1.0 - zk;
    c[0] = sum;
    for k in 1..n {
        c[k] += z * c[k - 1];
    }
    c[n - 1] = (z / (z * z - 1.0)) * (c[n - 1] + z * c[n - 2]);
    for k in (0..n - 1).rev() {
        c[k] = z * (c[k + 1] - c[k]);
    }
}

/// Interpolator over a raster for a fixed spline order.
pub struct Interpolator {
    order: usize,
    width: usize,
    height: usize,
    coeffs: Vec<f64>,
}

impl Interpolator {
    pub fn new(image: &Raster, order: usize) -> Self {
        assert!(order <= MAX_ORDER, "interpolation order {order} unsupported");
        let (w, h) = (image.width(), image.height());
        let mut coeffs: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
        if let Some(z) = pole(order) {
            let mut buf = vec![0.0; h];
            for y in 0..h {
                prefilter_line(&mut coeffs[y * w..(y + 1) * w], z);
            }
            for x in 0..w {
                for y in 0..h {
                    buf[y] = coeffs[y * w + x];
                }
                prefilter_line(&mut buf, z);
                for y in 0..h {
                    coeffs[y * w + x] = buf[y];
                }
            }
        }
        Self { order, width: w, height: h, coeffs }
    }

    #[inline]
    fn c(&self, x: isize, y: isize) -> f64 {
        self.coeffs[mirror(y, self.height) * self.width + mirror(x, self.width)]
    }

    /// Value at continuous pixel-index coordinates (pixel `k` sits at `k`).
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        match self.order {
            0 => self.c(x.round() as isize, y.round() as isize),
            1 => {
                let (x0, y0) = (x.floor(), y.floor());
                let (fx, fy) = (x - x0, y - y0);
                let (xi, yi) = (x0 as isize, y0 as isize);
                let top = self.c(xi, yi) * (1.0 - fx) + self.c(xi + 1, yi) * fx;
                let bot = self.c(xi, yi + 1) * (1.0 - fx) + self.c(xi + 1, yi + 1) * fx;
                top * (1.0 - fy) + bot * fy
            }
            2 => {
                let (xs, wx) = weights2(x);
                let (ys, wy) = weights2(y);
                let mut acc = 0.0;
                for (j, wyj) in wy.iter().enumerate() {
                    let mut row = 0.0;
                    for (i, wxi) in wx.iter().enumerate() {
                        row += wxi * self.c(xs + i as isize, ys + j as isize);
                    }
                    acc += wyj * row;
                }
                acc
            }
            _ => {
                let (xs, wx) = weights3(x);
                let (ys, wy) = weights3(y);
                let mut acc = 0.0;
                for (j, wyj) in wy.iter().enumerate() {
                    let mut row = 0.0;
                    for (i, wxi) in wx.iter().enumerate() {
                        row += wxi * self.c(xs + i as isize, ys + j as isize);
                    }
                    acc += wyj * row;
                }
                acc
            }
        }
    }
}

/// Quadratic B-spline taps: first index and three weights.
#[inline]
fn weights2(x: f64) -> (isize, [f64; 3]) {
    let c = x.round();
    let t = x - c;
    (c as isize - 1, [0.5 * (0.5 - t) * (0.5 - t), 0.75 - t * t, 0.5 * (0.5 + t) * (0.5 + t)])
}

/// Cubic B-spline taps: first index and four weights.
#[inline]
fn weights3(x: f64) -> (isize, [f64; 4]) {
    let f = x.floor();
    let t = x - f;
    let w0 = (1.0 - t).powi(3) / 6.0;
    let w1 = 2.0 / 3.0 - t * t + t * t * t / 2.0;
    let w2 = 2.0 / 3.0 - (1.0 - t) * (1.0 - t) + (1.0 - t).powi(3) / 2.0;
    let w3 = t * t * t / 6.0;
    (f as isize - 1, [w0, w1, w2, w3])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image() -> Raster {
        Raster::from_vec(6, 5, (0..30).map(|i| ((i * 7919) % 31) as f32 / 31.0).collect())
    }

    #[test]
    fn every_order_interpolates_on_the_grid() {
        let img = test_image();
        for order in 0..=MAX_ORDER {
            let it = Interpolator::new(&img, order);
            for y in 0..5 {
                for x in 0..6 {
                    let v = it.sample(x as f64, y as f64);
                    assert!((v - img.get(x, y) as f64).abs() < 1e-9, "order {order} at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn spline_weights_partition_unity() {
        for &x in &[0.0, 0.3, 0.5, 0.77, -1.2] {
            assert!((weights2(x).1.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!((weights3(x).1.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_is_midpoint_average() {
        let img = Raster::from_vec(2, 1, vec![0.0, 1.0]);
        let it = Interpolator::new(&img, 1);
        assert!((it.sample(0.5, 0.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn quadratic_reproduces_linear_ramp() {
        let img = Raster::from_vec(16, 3, (0..48).map(|i| (i % 16) as f32 / 16.0).collect());
        let it = Interpolator::new(&img, 2);
        let v = it.sample(7.25, 1.0);
        assert!((v - 7.25 / 16.0).abs() < 1e-6, "{v}");
    }
}
