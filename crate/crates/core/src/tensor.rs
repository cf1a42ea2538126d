//! Dense row-major tensors and the numeric kernels the models are built from.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};
use crate::flops;

/// Floating point element type. Implemented for `f32` (training and
/// inference) and `f64` (oracle and gradient checks).
pub trait Real: Float + FromPrimitive + Sum + Default + Debug + Send + Sync + 'static {
    fn c(x: f64) -> Self;

    /// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
    ///
    /// # Safety
    /// Strides and dimensions must describe valid regions of the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
}

impl Real for f32 {
    #[inline]
    fn c(x: f64) -> Self {
        x as f32
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    #[inline]
    fn c(x: f64) -> Self {
        x
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Matrix layout flag for [`gemm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Stored as given (`rows x cols`, row-major).
    Normal,
    /// Use the transpose of the stored row-major matrix.
    Transposed,
}

/// `out (m x n) = op(a) (m x k) * op(b) (k x n)`, accumulating into `out` when
/// `accumulate` is set. `a` and `b` are row-major in their stored shapes.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    out: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(out.len(), m * n, "gemm: output size");
    flops::add(2 * (m * k * n) as u64);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: sizes asserted above; strides describe row-major storage.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Owned dense tensor, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Size of dimension `i`; panics when out of range.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v = *v * s);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |m, d| if d > m { d } else { m })
    }

    /// Byte size of the element buffer.
    pub fn nbytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }
}

/// Geometry of a square-kernel 2-D convolution with edge-replicating padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn cols_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    #[inline]
    fn src(&self, o: usize, k: usize, size: usize) -> usize {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        p.clamp(0, size as isize - 1) as usize
    }
}

/// Unfolds `x` (`C x H x W`) into a `(C*k*k) x (Ho*Wo)` column matrix.
/// Out-of-bounds taps read the nearest edge pixel.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut cols = vec![T::zero(); g.cols_rows() * ho * wo];
    let plane = g.height * g.width;
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &x[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let sy = g.src(oy, ky, g.height);
                    let xrow = &xc[sy * g.width..(sy + 1) * g.width];
                    for ox in 0..wo {
                        dst[oy * wo + ox] = xrow[g.src(ox, kx, g.width)];
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = g.height * g.width;
    let mut row = 0;
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let sy = g.src(oy, ky, g.height);
                    for ox in 0..wo {
                        let sx = g.src(ox, kx, g.width);
                        dxc[sy * g.width + sx] = dxc[sy * g.width + sx] + src[oy * wo + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Upper bound, in elements, on the unfolded-column buffer used by the
/// forward convolution; larger outputs are processed in pixel chunks.
pub const CONV_WORKSPACE: usize = 32768;

/// Unfolds output pixels `p0..p1` (row-major over `Ho x Wo`) into `cols`,
/// laid out `(C*k*k) x (p1 - p0)`.
fn im2col_range<T: Real>(x: &[T], g: &ConvGeom, p0: usize, p1: usize, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let len = p1 - p0;
    let plane = g.height * g.width;
    // Source row offsets and column indices per kernel tap.
    let sy: Vec<usize> = (0..g.kernel).flat_map(|k| (0..ho).map(move |o| g.src(o, k, g.height) * g.width)).collect();
    let sx: Vec<usize> = (0..g.kernel).flat_map(|k| (0..wo).map(move |o| g.src(o, k, g.width))).collect();
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &x[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel {
            let rows = &sy[ky * ho..(ky + 1) * ho];
            for kx in 0..g.kernel {
                let colx = &sx[kx * wo..(kx + 1) * wo];
                let dst = &mut cols[row * len..(row + 1) * len];
                let (mut oy, mut ox) = (p0 / wo, p0 % wo);
                for d in dst.iter_mut() {
                    *d = xc[rows[oy] + colx[ox]];
                    ox += 1;
                    if ox == wo {
                        ox = 0;
                        oy += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Convolution forward: `weight` is `O x C x k x k`, `bias` is `O`. Working
/// memory beyond the output stays within [`CONV_WORKSPACE`] elements (plus
/// one matching output chunk).
pub fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let out_ch = bias.len();
    let n = g.out_height() * g.out_width();
    let mut out = vec![T::zero(); out_ch * n];
    for (o, b) in bias.iter().enumerate() {
        out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = *b);
    }
    flops::add((out_ch * n) as u64);
    let kk = g.cols_rows();
    if g.is_pointwise() {
        gemm(out_ch, kk, n, weight, Layout::Normal, x, Layout::Normal, &mut out, true);
        return out;
    }
    let chunk = (CONV_WORKSPACE / kk).clamp(1, n);
    if chunk == n {
        let mut cols = vec![T::zero(); kk * n];
        im2col_range(x, g, 0, n, &mut cols);
        gemm(out_ch, kk, n, weight, Layout::Normal, &cols, Layout::Normal, &mut out, true);
        return out;
    }
    let mut cols = vec![T::zero(); kk * chunk];
    let mut part = vec![T::zero(); out_ch * chunk];
    for p0 in (0..n).step_by(chunk) {
        let p1 = (p0 + chunk).min(n);
        let len = p1 - p0;
        im2col_range(x, g, p0, p1, &mut cols[..kk * len]);
        gemm(out_ch, kk, len, weight, Layout::Normal, &cols[..kk * len], Layout::Normal, &mut part[..out_ch * len], false);
        for o in 0..out_ch {
            let dst = &mut out[o * n + p0..o * n + p1];
            for (d, v) in dst.iter_mut().zip(&part[o * len..(o + 1) * len]) {
                *d = *d + *v;
            }
        }
    }
    out
}

/// Convolution backward. Returns `(dx, dweight, dbias)`, each only when requested.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    out_ch: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let n = g.out_height() * g.out_width();
    let kk = g.cols_rows();
    let db: Vec<T> = (0..out_ch).map(|o| dout[o * n..(o + 1) * n].iter().copied().sum()).collect();
    let owned_cols;
    let cols: &[T] = if g.is_pointwise() {
        x
    } else if need_dw {
        owned_cols = im2col(x, g);
        &owned_cols
    } else {
        &[]
    };
    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); out_ch * kk];
        gemm(out_ch, n, kk, dout, Layout::Normal, cols, Layout::Transposed, &mut dw, false);
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); kk * n];
        gemm(kk, out_ch, n, weight, Layout::Transposed, dout, Layout::Normal, &mut dcols, false);
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![T::zero(); g.in_channels * g.height * g.width];
            col2im(&dcols, g, &mut dx);
            dx
        }
    });
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-centred bilinear taps (the `align_corners = false` convention).
fn bilinear_taps(in_size: usize, out_size: usize) -> Vec<Tap> {
    let ratio = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_size - 1);
            let hi = (lo + 1).min(in_size - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

/// Bilinear resize of a `C x H x W` buffer to `C x oh x ow`.
pub fn resize_bilinear<T: Real>(x: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    flops::add((c * oh * ow * 8) as u64);
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, ry) in ty.iter().enumerate() {
            let fy = T::c(ry.frac);
            for (ox, rx) in tx.iter().enumerate() {
                let fx = T::c(rx.frac);
                let top = src[ry.lo * w + rx.lo] * (T::one() - fx) + src[ry.lo * w + rx.hi] * fx;
                let bot = src[ry.hi * w + rx.lo] * (T::one() - fx) + src[ry.hi * w + rx.hi] * fx;
                dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward<T: Real>(
    dout: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let g = &dout[ch * oh * ow..(ch + 1) * oh * ow];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            let fy = T::c(ry.frac);
            for (ox, rx) in tx.iter().enumerate() {
                let fx = T::c(rx.frac);
                let v = g[oy * ow + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                d[ry.lo * w + rx.lo] = d[ry.lo * w + rx.lo] + top * (T::one() - fx);
                d[ry.lo * w + rx.hi] = d[ry.lo * w + rx.hi] + top * fx;
                d[ry.hi * w + rx.lo] = d[ry.hi * w + rx.lo] + bot * (T::one() - fx);
                d[ry.hi * w + rx.hi] = d[ry.hi * w + rx.hi] + bot * fx;
            }
        }
    }
    dx
}

/// Numerically stable in-place softmax over each row of a `rows x cols` buffer.
pub fn softmax_rows<T: Real>(x: &mut [T], rows: usize, cols: usize) {
    flops::add((rows * cols * 3) as u64);
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        let inv = T::one() / total;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}
