//! Dense row-major tensors and the numeric kernels the autodiff tape is built on.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating point element type usable by the tape. Training runs in `f32`;
/// gradient checks run the same code paths in `f64`.
pub trait Scalar:
    Float + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` over raw strided buffers.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping matrices of
    /// the stated sizes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
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

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn raw_gemm(
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn raw_gemm(
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major matrix product `c (+)= op(a) · op(b)` where `op(a)` is `m×k`
/// and `op(b)` is `k×n`. A transposed operand is stored in its untransposed
/// layout (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds asserted above, slices cannot alias (one is &mut).
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank-2 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Geometry of a square-kernel 2-D convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (Ho·Wo)` patch matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back into an image, accumulating.
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `y[n] = W · im2col(x[n]) (+ b)`; `x` is `N×C×H×W`, `w` is `O×C×k×k`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (o, wc, k, k2) = w.dims4();
    assert_eq!(c, wc, "conv channel mismatch");
    assert_eq!(k, k2, "square kernels only");
    let g = ConvGeom { in_channels: c, in_h: h, in_w: wd, kernel: k, stride, pad };
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); n * o * oh * ow];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * g.col_cols()] };
    for b in 0..n {
        let xb = &x.data()[b * c * h * wd..(b + 1) * c * h * wd];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut col);
            &col
        };
        let yb = &mut out[b * o * oh * ow..(b + 1) * o * oh * ow];
        gemm(o, g.col_rows(), oh * ow, w.data(), false, src, false, yb, false);
        if let Some(bias) = bias {
            for (oc, chunk) in yb.chunks_mut(oh * ow).enumerate() {
                let bv = bias.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out)
}

/// Gradient of a convolution with respect to its input: `col2im(Wᵀ · dy)`.
/// Also the forward of a transposed convolution.
pub fn conv2d_input_grad<T: Scalar>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    in_shape: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c, h, wd) = in_shape;
    let (o, _, k, _) = w.dims4();
    let g = ConvGeom { in_channels: c, in_h: h, in_w: wd, kernel: k, stride, pad };
    let (oh, ow) = (g.out_h(), g.out_w());
    assert_eq!(dy.shape(), &[n, o, oh, ow], "conv output gradient shape");
    let mut dx = vec![T::zero(); n * c * h * wd];
    let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
    for b in 0..n {
        let dyb = &dy.data()[b * o * oh * ow..(b + 1) * o * oh * ow];
        let dxb = &mut dx[b * c * h * wd..(b + 1) * c * h * wd];
        if g.is_pointwise() {
            gemm(c, o, oh * ow, w.data(), true, dyb, false, dxb, true);
        } else {
            gemm(g.col_rows(), o, oh * ow, w.data(), true, dyb, false, &mut col, false);
            col2im(&col, &g, dxb);
        }
    }
    Tensor::new(vec![n, c, h, wd], dx)
}

/// Gradient of a convolution with respect to its kernel: `Σ_n dy[n] · im2col(x[n])ᵀ`.
pub fn conv2d_weight_grad<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let o = dy.shape()[1];
    let g = ConvGeom { in_channels: c, in_h: h, in_w: wd, kernel, stride, pad };
    let (oh, ow) = (g.out_h(), g.out_w());
    assert_eq!(dy.shape(), &[n, o, oh, ow], "conv output gradient shape");
    let mut dw = vec![T::zero(); o * g.col_rows()];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * g.col_cols()] };
    for b in 0..n {
        let xb = &x.data()[b * c * h * wd..(b + 1) * c * h * wd];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut col);
            &col
        };
        let dyb = &dy.data()[b * o * oh * ow..(b + 1) * o * oh * ow];
        gemm(o, oh * ow, g.col_rows(), dyb, false, src, true, &mut dw, true);
    }
    Tensor::new(vec![o, c, kernel, kernel], dw)
}
