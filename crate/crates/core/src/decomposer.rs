//! Split-matrix layout, basis fitting and weight reconstruction.
//!
//! A weight `(n, c, h, w)` with `s` splits of depth `p` becomes a
//! `(p·h·w) × (n·s)` matrix. Column `g·n + i` holds split `g` of filter `i`,
//! vectorized channel-major, then row, then column:
//! row `r = ch·h·w + y·w + x` reads `W[i, g·p + ch, y, x]`.
//!
//! Fitting returns `B = U·Σ` (`(p·h·w) × m`) and `A = Vᵀ` (`m × (n·s)`) from
//! the truncated SVD, so `B·A` is the best rank-`m` approximation.

use crate::error::{Error, Result};
use crate::planner::LayerShape;
use crate::scalar::Scalar;
use crate::svd::truncated_svd;
use crate::tensor::{Matrix, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct SplitMatrix<T> {
    pub mat: Matrix<T>,
    pub shape: LayerShape,
    pub s: usize,
}

impl<T: Scalar> SplitMatrix<T> {
    pub fn p(&self) -> usize {
        self.shape.c / self.s
    }
}

/// `m` basis filters of shape `(p, h, w)`, stored as columns of a
/// `(p·h·w) × m` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet<T> {
    pub mat: Matrix<T>,
    pub p: usize,
    pub h: usize,
    pub w: usize,
}

impl<T: Scalar> BasisSet<T> {
    pub fn new(mat: Matrix<T>, p: usize, h: usize, w: usize) -> Result<Self> {
        if mat.rows() != p * h * w || mat.cols() == 0 {
            return Err(Error::shape(
                "basis",
                format!(
                    "{}x{} matrix is not a basis of ({p}, {h}, {w}) filters",
                    mat.rows(),
                    mat.cols()
                ),
            ));
        }
        Ok(BasisSet { mat, p, h, w })
    }

    /// Number of basis filters.
    pub fn m(&self) -> usize {
        self.mat.cols()
    }

    pub fn filter_len(&self) -> usize {
        self.p * self.h * self.w
    }

    /// The basis as a convolution weight `(m, p, h, w)`.
    pub fn filters(&self) -> Tensor4<T> {
        Tensor4::new(
            [self.m(), self.p, self.h, self.w],
            self.mat.transpose().into_data(),
        )
        .expect("basis dims are consistent")
    }

    pub fn from_filters(filters: &Tensor4<T>) -> Self {
        let [m, p, h, w] = filters.dims();
        let mat = Matrix::new(m, p * h * w, filters.data().to_vec())
            .expect("filter dims are consistent")
            .transpose();
        BasisSet { mat, p, h, w }
    }

    pub fn column_norms(&self) -> Vec<T> {
        (0..self.m())
            .map(|j| {
                (0..self.mat.rows())
                    .map(|i| self.mat.get(i, j).powi(2))
                    .sum::<T>()
                    .sqrt()
            })
            .collect()
    }
}

/// Coefficients `α[j, g·n + i]` of basis `j` in split `g` of filter `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet<T> {
    pub mat: Matrix<T>,
    pub n: usize,
    pub s: usize,
}

impl<T: Scalar> CoefficientSet<T> {
    pub fn new(mat: Matrix<T>, n: usize, s: usize) -> Result<Self> {
        if mat.cols() != n * s {
            return Err(Error::shape(
                "coefficients",
                format!("{} columns, expected n·s = {n}·{s}", mat.cols()),
            ));
        }
        Ok(CoefficientSet { mat, n, s })
    }

    pub fn m(&self) -> usize {
        self.mat.rows()
    }

    #[inline]
    pub fn alpha(&self, j: usize, i: usize, g: usize) -> T {
        self.mat.get(j, g * self.n + i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitWarning {
    /// Input was identically zero; basis and coefficients are zero.
    ZeroWeights,
    /// Fewer than `m` non-zero singular values; some basis columns are zero.
    RankDeficient { rank: usize },
}

#[derive(Debug, Clone)]
pub struct Fit<T> {
    pub basis: BasisSet<T>,
    pub coeffs: CoefficientSet<T>,
    /// `‖M − B·A‖_F`.
    pub residual: T,
    pub warning: Option<FitWarning>,
}

#[derive(Debug, Clone)]
pub struct SharedFit<T> {
    pub basis: BasisSet<T>,
    pub coeffs: Vec<CoefficientSet<T>>,
    /// Frobenius residual over all members together.
    pub residual: T,
    pub warning: Option<FitWarning>,
}

pub fn split_and_flatten<T: Scalar>(weight: &Tensor4<T>, s: usize) -> Result<SplitMatrix<T>> {
    let [n, c, h, w] = weight.dims();
    let shape = LayerShape::new(n, c, h, w)?;
    let p = shape.split_depth(s)?;
    let plane = h * w;
    let rows = p * plane;
    let cols = n * s;
    let mut data = vec![T::zero(); rows * cols];
    let src = weight.data();
    for i in 0..n {
        for g in 0..s {
            let col = g * n + i;
            let base = (i * c + g * p) * plane;
            for r in 0..rows {
                data[r * cols + col] = src[base + r];
            }
        }
    }
    Ok(SplitMatrix {
        mat: Matrix::new(rows, cols, data)?,
        shape,
        s,
    })
}

pub fn unflatten<T: Scalar>(sm: &SplitMatrix<T>) -> Result<Tensor4<T>> {
    let LayerShape { n, c, h, w } = sm.shape;
    let p = sm.shape.split_depth(sm.s)?;
    let plane = h * w;
    let (rows, cols) = (p * plane, n * sm.s);
    if sm.mat.rows() != rows || sm.mat.cols() != cols {
        return Err(Error::shape(
            "unflatten",
            format!(
                "{}x{} matrix for layer {:?} with s = {}",
                sm.mat.rows(),
                sm.mat.cols(),
                sm.shape,
                sm.s
            ),
        ));
    }
    let mut data = vec![T::zero(); n * c * plane];
    let src = sm.mat.data();
    for i in 0..n {
        for g in 0..sm.s {
            let col = g * n + i;
            let base = (i * c + g * p) * plane;
            for r in 0..rows {
                data[base + r] = src[r * cols + col];
            }
        }
    }
    Tensor4::new([n, c, h, w], data)
}

fn fit_matrix<T: Scalar>(
    mat: &Matrix<T>,
    m: usize,
) -> Result<(Matrix<T>, Matrix<T>, Option<FitWarning>)> {
    let max_m = mat.rows().min(mat.cols());
    if m == 0 || m > max_m {
        return Err(Error::InvalidArgument(format!(
            "basis size {m} outside 1..={max_m} for a {}x{} split matrix",
            mat.rows(),
            mat.cols()
        )));
    }
    if mat.data().iter().all(|v| v.is_zero()) {
        log::warn!("fitting an all-zero weight; returning a zero basis");
        return Ok((
            Matrix::zeros(mat.rows(), m),
            Matrix::zeros(m, mat.cols()),
            Some(FitWarning::ZeroWeights),
        ));
    }
    let svd = truncated_svd(mat, m)?;
    let b = Matrix::from_fn(mat.rows(), m, |i, j| svd.u.get(i, j) * svd.sigma[j]);
    let rank = svd.sigma.iter().filter(|s| **s > T::zero()).count();
    let warning = (rank < m).then_some(FitWarning::RankDeficient { rank });
    Ok((b, svd.vt, warning))
}

/// Best rank-`m` basis and coefficients for one split matrix.
pub fn fit<T: Scalar>(sm: &SplitMatrix<T>, m: usize) -> Result<Fit<T>> {
    let (b, a, warning) = fit_matrix(&sm.mat, m)?;
    let residual = sm.mat.sub(&b.matmul(&a)?)?.frobenius_norm();
    Ok(Fit {
        basis: BasisSet::new(b, sm.p(), sm.shape.h, sm.shape.w)?,
        coeffs: CoefficientSet::new(a, sm.shape.n, sm.s)?,
        residual,
        warning,
    })
}

fn check_group<T: Scalar>(group: &[SplitMatrix<T>]) -> Result<&SplitMatrix<T>> {
    let first = group
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty sharing group".into()))?;
    for sm in group {
        if sm.mat.rows() != first.mat.rows()
            || sm.shape.h != first.shape.h
            || sm.shape.w != first.shape.w
        {
            return Err(Error::shape(
                "fit_shared",
                format!(
                    "members need identical basis filters: ({}, {}, {}) vs ({}, {}, {})",
                    first.p(),
                    first.shape.h,
                    first.shape.w,
                    sm.p(),
                    sm.shape.h,
                    sm.shape.w
                ),
            ));
        }
    }
    Ok(first)
}

/// One basis for every member, fitted on the column-wise concatenation.
pub fn fit_shared<T: Scalar>(group: &[SplitMatrix<T>], m: usize) -> Result<SharedFit<T>> {
    let first = check_group(group)?;
    let parts: Vec<Matrix<T>> = group.iter().map(|g| g.mat.clone()).collect();
    let joined = Matrix::hcat(&parts)?;
    let (b, a, warning) = fit_matrix(&joined, m)?;
    let residual = joined.sub(&b.matmul(&a)?)?.frobenius_norm();
    let mut coeffs = Vec::with_capacity(group.len());
    let mut start = 0;
    for sm in group {
        let cols = sm.mat.cols();
        coeffs.push(CoefficientSet::new(
            a.column_block(start, cols)?,
            sm.shape.n,
            sm.s,
        )?);
        start += cols;
    }
    Ok(SharedFit {
        basis: BasisSet::new(b, first.p(), first.shape.h, first.shape.w)?,
        coeffs,
        residual,
        warning,
    })
}

/// Shared basis where member `l` reads only the first `slices[l]` filters.
///
/// The basis is fitted on the concatenation; each member's coefficients are
/// the least-squares projection onto its prefix.
pub fn fit_sliced<T: Scalar>(
    group: &[SplitMatrix<T>],
    m: usize,
    slices: &[usize],
) -> Result<SharedFit<T>> {
    if slices.len() != group.len() {
        return Err(Error::InvalidArgument(format!(
            "{} slice widths for {} members",
            slices.len(),
            group.len()
        )));
    }
    if let Some(&bad) = slices.iter().find(|&&k| k == 0 || k > m) {
        return Err(Error::InvalidArgument(format!(
            "slice width {bad} outside 1..={m}"
        )));
    }
    let shared = fit_shared(group, m)?;
    let b = &shared.basis.mat;
    let norms_sq: Vec<T> = shared
        .basis
        .column_norms()
        .iter()
        .map(|v| *v * *v)
        .collect();
    let mut coeffs = Vec::with_capacity(group.len());
    let mut resid_sq = T::zero();
    for (sm, &k) in group.iter().zip(slices) {
        // Columns of B are orthogonal, so the projection decouples per column.
        let bk = b.column_block(0, k)?;
        let proj = bk.transpose().matmul(&sm.mat)?;
        let a = Matrix::from_fn(k, sm.mat.cols(), |j, col| {
            if norms_sq[j] > T::zero() {
                proj.get(j, col) / norms_sq[j]
            } else {
                T::zero()
            }
        });
        let r = sm.mat.sub(&bk.matmul(&a)?)?.frobenius_norm();
        resid_sq += r * r;
        coeffs.push(CoefficientSet::new(a, sm.shape.n, sm.s)?);
    }
    Ok(SharedFit {
        basis: shared.basis,
        coeffs,
        residual: resid_sq.sqrt(),
        warning: shared.warning,
    })
}

/// The first `k` basis filters, in order.
pub fn slice_basis<T: Scalar>(shared: &BasisSet<T>, k: usize) -> Result<BasisSet<T>> {
    if k == 0 || k > shared.m() {
        return Err(Error::InvalidArgument(format!(
            "slice width {k} outside 1..={}",
            shared.m()
        )));
    }
    BasisSet::new(shared.mat.column_block(0, k)?, shared.p, shared.h, shared.w)
}

/// Full weight `unflatten(B·A)` for a layer of the given shape.
pub fn reconstruct<T: Scalar>(
    b: &BasisSet<T>,
    a: &CoefficientSet<T>,
    shape: LayerShape,
    s: usize,
) -> Result<Tensor4<T>> {
    let p = shape.split_depth(s)?;
    if b.p != p || b.h != shape.h || b.w != shape.w || b.m() != a.m() || a.n != shape.n || a.s != s
    {
        return Err(Error::shape(
            "reconstruct",
            format!(
                "basis ({}, {}, {}, {}) and coefficients {}x{} do not fit layer {shape:?} with s = {s}",
                b.m(),
                b.p,
                b.h,
                b.w,
                a.mat.rows(),
                a.mat.cols()
            ),
        ));
    }
    unflatten(&SplitMatrix {
        mat: b.mat.matmul(&a.mat)?,
        shape,
        s,
    })
}
