use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type for tensors. Implemented for `f32` (training and
/// inference) and `f64` (gradient checking).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` over raw strided views.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds `m×k`, `k×n` and `m×n`
    /// matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided read-only matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub struct MatRef<'a, R> {
    pub data: &'a [R],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, R: Real> MatRef<'a, R> {
    /// Row-major `rows×cols` view of the whole buffer.
    pub fn new(data: &'a [R], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer size");
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    /// Transposed view (no copy).
    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    /// Column block `[c0, c0 + width)`.
    pub fn cols(self, c0: usize, width: usize) -> Self {
        assert!(c0 + width <= self.cols);
        Self { offset: self.offset + c0 * self.cs, cols: width, ..self }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Strided mutable matrix view.
pub struct MatMut<'a, R> {
    pub data: &'a mut [R],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, R: Real> MatMut<'a, R> {
    pub fn new(data: &'a mut [R], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer size");
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn cols(self, c0: usize, width: usize) -> Self {
        assert!(c0 + width <= self.cols);
        Self { offset: self.offset + c0 * self.cs, cols: width, ..self }
    }
}

/// `c = alpha * a·b + beta * c`.
pub fn gemm<R: Real>(alpha: R, a: MatRef<'_, R>, b: MatRef<'_, R>, beta: R, c: MatMut<'_, R>) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!(a.rows, c.rows, "output rows");
    assert_eq!(b.cols, c.cols, "output cols");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        let last = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
        assert!(last < c.data.len(), "output view out of bounds");
    }
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above and `c` is a unique borrow.
    unsafe {
        R::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Debug for Tensor<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<R: Real> Tensor<R> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![R::zero(); n] }
    }

    pub fn full(shape: &[usize], value: R) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<R>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: R) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape size");
        self.shape = shape.to_vec();
        self
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    /// Channels, height, width of a 3-D tensor.
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected CHW, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn at2(&self, r: usize, c: usize) -> R {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[R] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn as_mat(&self) -> MatRef<'_, R> {
        let (r, c) = self.dims2();
        MatRef::new(&self.data, r, c)
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(R, R) -> R) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: R) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum(&self) -> R {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> R {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Self) -> Self {
        let (m, _) = self.dims2();
        let (_, n) = other.dims2();
        let mut out = Self::zeros(&[m, n]);
        gemm(R::one(), self.as_mat(), other.as_mat(), R::zero(), MatMut::new(&mut out.data, m, n));
        out
    }

    pub fn transpose2(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self { shape: vec![c, r], data: out }
    }

    /// Element type conversion.
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| S::of(v.as_f64())).collect() }
    }
}
