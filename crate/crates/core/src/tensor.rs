//! Dense tensors, matrix product and 2-D convolution.
//!
//! Convolution follows the cross-correlation convention used by deep-learning
//! frameworks: the kernel is not flipped, and
//! `y[b, o, i, j] = sum_{c, u, v} x[b, c, i*stride + u - pad, j*stride + v - pad] * w[o, c, u, v]`
//! with zero padding outside the input.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major `(n, c, h, w)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("all dims must be >= 1, got {dims:?}"),
            ));
        }
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {len} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "all dims must be >= 1");
        Tensor4 {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut t = Self::zeros(dims);
        let [n, c, h, w] = dims;
        let mut idx = 0;
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t.data[idx] = f([a, b, y, x]);
                        idx += 1;
                    }
                }
            }
        }
        t
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    pub fn n(&self) -> usize {
        self.dims[0]
    }
    pub fn c(&self) -> usize {
        self.dims[1]
    }
    pub fn h(&self) -> usize {
        self.dims[2]
    }
    pub fn w(&self) -> usize {
        self.dims[3]
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
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, [a, b, y, x]: [usize; 4]) -> usize {
        ((a * self.dims[1] + b) * self.dims[2] + y) * self.dims[3] + x
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Same data, new dims with equal element count.
    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn frobenius_norm(&self) -> T {
        frobenius(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `||self - other|| / max(||other||, tiny)`.
    pub fn rel_error(&self, other: &Self) -> T {
        assert_eq!(self.dims, other.dims, "rel_error on mismatched dims");
        let diff: T = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt();
        diff / other.frobenius_norm().max(T::min_positive_value())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Channels `[start, start + len)` of every sample.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "narrow_channels",
                format!("range {start}..{} outside {c} channels", start + len),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for a in 0..n {
            let base = (a * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Self::new([n, len, h, w], data)
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no tensors"))?;
        let [n, _, h, w] = first.dims;
        if parts.iter().any(|p| p.n() != n || p.h() != h || p.w() != w) {
            return Err(Error::shape(
                "concat_channels",
                "batch or spatial dims differ",
            ));
        }
        let c_total: usize = parts.iter().map(|p| p.c()).sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c_total * plane);
        for a in 0..n {
            for p in parts {
                let chunk = p.c() * plane;
                data.extend_from_slice(&p.data[a * chunk..(a + 1) * chunk]);
            }
        }
        Self::new([n, c_total, h, w], data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| U::of(v.to_f64_lossy())).collect(),
        }
    }
}

impl<T: Scalar> Index<[usize; 4]> for Tensor4<T> {
    type Output = T;
    fn index(&self, idx: [usize; 4]) -> &T {
        &self.data[self.offset(idx)]
    }
}

impl<T: Scalar> IndexMut<[usize; 4]> for Tensor4<T> {
    fn index_mut(&mut self, idx: [usize; 4]) -> &mut T {
        let o = self.offset(idx);
        &mut self.data[o]
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix",
                format!(
                    "{rows}x{cols} needs {} elements, got {}",
                    rows * cols,
                    data.len()
                ),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Outer product `a bᵀ`.
    pub fn outer(a: &[T], b: &[T]) -> Self {
        Self::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    pub fn frobenius_norm(&self) -> T {
        frobenius(&self.data)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn scale(&self, k: T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * k).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Columns `[start, start + len)`.
    pub fn column_block(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.cols {
            return Err(Error::shape(
                "column_block",
                format!("columns {start}..{} outside {}", start + len, self.cols),
            ));
        }
        Ok(Self::from_fn(self.rows, len, |i, j| self.get(i, start + j)))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn hcat(parts: &[Self]) -> Result<Self> {
        let rows = parts
            .first()
            .map(|p| p.rows)
            .ok_or_else(|| Error::shape("hcat", "no matrices"))?;
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::shape(
                "hcat",
                format!("row counts {rows} vs {}", bad.rows),
            ));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::of(v.to_f64_lossy())).collect(),
        }
    }
}

pub(crate) fn frobenius<T: Scalar>(data: &[T]) -> T {
    data.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// `out += a · b` on raw row-major slices, `a` is `m × k`, `b` is `k × n`.
///
/// Loop order is fixed (i, k, j), so results do not depend on scheduling.
/// `macs` counts one per executed multiply-add.
fn gemm_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    macs: &mut u64,
) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
            *macs += n as u64;
        }
    }
}

pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let mut macs = 0;
    gemm_acc(
        &a.data,
        &b.data,
        &mut out.data,
        a.rows,
        a.cols,
        b.cols,
        &mut macs,
    );
    Ok(out)
}

/// Output spatial extent of a convolution, `None` when it would be empty.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn check<T: Scalar>(
        x: &Tensor4<T>,
        weight: &Tensor4<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if weight.c() != x.c() {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight expects {} input channels, input has {}",
                    weight.c(),
                    x.c()
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        let (kh, kw) = (weight.h(), weight.w());
        let oh = conv_output_len(x.h(), kh, stride, pad);
        let ow = conv_output_len(x.w(), kw, stride, pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(ConvGeom {
                c: x.c(),
                h: x.h(),
                w: x.w(),
                kh,
                kw,
                oh,
                ow,
                stride,
                pad,
            }),
            _ => Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} with pad {pad} does not fit input {}x{}",
                    x.h(),
                    x.w()
                ),
            )),
        }
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// Unroll one sample (`c·h·w` slice) into a `(c·kh·kw) × (oh·ow)` matrix.
    fn im2col<T: Scalar>(&self, sample: &[T], col: &mut [T]) {
        let ohw = self.out_len();
        for ch in 0..self.c {
            for u in 0..self.kh {
                for v in 0..self.kw {
                    let row = (ch * self.kh + u) * self.kw + v;
                    let dst = &mut col[row * ohw..(row + 1) * ohw];
                    for i in 0..self.oh {
                        let y = (i * self.stride + u) as isize - self.pad as isize;
                        for j in 0..self.ow {
                            let x = (j * self.stride + v) as isize - self.pad as isize;
                            dst[i * self.ow + j] = if y >= 0
                                && (y as usize) < self.h
                                && x >= 0
                                && (x as usize) < self.w
                            {
                                sample[(ch * self.h + y as usize) * self.w + x as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatter-add columns back into a sample.
    fn col2im<T: Scalar>(&self, col: &[T], sample: &mut [T]) {
        let ohw = self.out_len();
        for ch in 0..self.c {
            for u in 0..self.kh {
                for v in 0..self.kw {
                    let row = (ch * self.kh + u) * self.kw + v;
                    let src = &col[row * ohw..(row + 1) * ohw];
                    for i in 0..self.oh {
                        let y = (i * self.stride + u) as isize - self.pad as isize;
                        if y < 0 || y as usize >= self.h {
                            continue;
                        }
                        for j in 0..self.ow {
                            let x = (j * self.stride + v) as isize - self.pad as isize;
                            if x < 0 || x as usize >= self.w {
                                continue;
                            }
                            sample[(ch * self.h + y as usize) * self.w + x as usize] +=
                                src[i * self.ow + j];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding (im2col + matrix product).
///
/// `x` is `(batch, c, h, w)`, `weight` is `(n, c, kh, kw)`; the result is
/// `(batch, n, oh, ow)` with `oh = (h + 2·pad − kh) / stride + 1`.
pub fn conv2d<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor4<T>> {
    let mut macs = 0;
    conv2d_counted(x, weight, stride, pad, &mut macs)
}

/// [`conv2d`] that also counts the multiply-adds executed by its inner loop.
pub fn conv2d_counted<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    stride: usize,
    pad: usize,
    macs: &mut u64,
) -> Result<Tensor4<T>> {
    let g = ConvGeom::check(x, weight, stride, pad)?;
    let (batch, n) = (x.n(), weight.n());
    let (k, ohw) = (g.patch_len(), g.out_len());
    let in_len = g.c * g.h * g.w;
    let mut out = Tensor4::zeros([batch, n, g.oh, g.ow]);
    let mut col = vec![T::zero(); k * ohw];
    for b in 0..batch {
        g.im2col(&x.data[b * in_len..(b + 1) * in_len], &mut col);
        let dst = &mut out.data[b * n * ohw..(b + 1) * n * ohw];
        gemm_acc(&weight.data, &col, dst, n, k, ohw, macs);
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input and weight.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let g = ConvGeom::check(x, weight, stride, pad)?;
    let (batch, n) = (x.n(), weight.n());
    if grad_out.dims() != [batch, n, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out {:?} does not match output {:?}",
                grad_out.dims(),
                [batch, n, g.oh, g.ow]
            ),
        ));
    }
    let (k, ohw) = (g.patch_len(), g.out_len());
    let in_len = g.c * g.h * g.w;
    let mut grad_x = Tensor4::zeros(x.dims());
    let mut grad_w = Tensor4::zeros(weight.dims());
    let weight_t = Matrix::new(n, k, weight.data.clone())?.transpose();
    let mut col = vec![T::zero(); k * ohw];
    let mut dcol = vec![T::zero(); k * ohw];
    let mut sink = 0;
    for b in 0..batch {
        let dy = &grad_out.data[b * n * ohw..(b + 1) * n * ohw];
        g.im2col(&x.data[b * in_len..(b + 1) * in_len], &mut col);
        // dW += dY · colᵀ
        for o in 0..n {
            let dy_row = &dy[o * ohw..(o + 1) * ohw];
            for r in 0..k {
                let c_row = &col[r * ohw..(r + 1) * ohw];
                let acc: T = dy_row.iter().zip(c_row).map(|(&a, &b)| a * b).sum();
                grad_w.data[o * k + r] += acc;
            }
        }
        // dcol = Wᵀ · dY, then scatter back.
        dcol.iter_mut().for_each(|v| *v = T::zero());
        gemm_acc(&weight_t.data, dy, &mut dcol, k, n, ohw, &mut sink);
        g.col2im(&dcol, &mut grad_x.data[b * in_len..(b + 1) * in_len]);
    }
    Ok((grad_x, grad_w))
}
