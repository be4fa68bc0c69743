//! Truncated singular value decomposition.
//!
//! Small problems (min dimension up to [`SvdConfig::jacobi_max_dim`]) use
//! one-sided Jacobi rotations, which diagonalize `MᵀM` implicitly, applied to
//! the triangular factor of a Householder QR. Larger problems use randomized
//! subspace iteration with a fixed seed and finish with the same Jacobi
//! kernel on the projected matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// `m ≈ u · diag(sigma) · vt` with `sigma` non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult<T> {
    pub u: Matrix<T>,
    pub sigma: Vec<T>,
    pub vt: Matrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix<T> {
        let us = Matrix::from_fn(self.u.rows(), self.rank(), |i, j| {
            self.u.get(i, j) * self.sigma[j]
        });
        us.matmul(&self.vt).expect("svd factors are conformant")
    }
}

#[derive(Debug, Clone)]
pub struct SvdConfig {
    /// Largest min(rows, cols) handled by dense Jacobi.
    pub jacobi_max_dim: usize,
    pub max_sweeps: usize,
    pub seed: u64,
    pub power_iters: usize,
    pub oversample: usize,
}

impl Default for SvdConfig {
    fn default() -> Self {
        SvdConfig {
            jacobi_max_dim: 512,
            max_sweeps: 80,
            seed: 0x5eed_5bd0,
            power_iters: 2,
            oversample: 8,
        }
    }
}

/// Best rank-`k` approximation of `m` in the Frobenius norm.
pub fn truncated_svd<T: Scalar>(m: &Matrix<T>, k: usize) -> Result<SvdResult<T>> {
    truncated_svd_with(m, k, &SvdConfig::default())
}

pub fn truncated_svd_with<T: Scalar>(
    m: &Matrix<T>,
    k: usize,
    cfg: &SvdConfig,
) -> Result<SvdResult<T>> {
    let min_dim = m.rows().min(m.cols());
    if k == 0 || k > min_dim {
        return Err(Error::InvalidArgument(format!(
            "svd rank {k} outside 1..={min_dim} for a {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::InvalidArgument(
            "svd input contains non-finite values".into(),
        ));
    }
    if min_dim <= cfg.jacobi_max_dim {
        let full = jacobi_svd(m, cfg.max_sweeps)?;
        Ok(truncate(full, k))
    } else {
        randomized_svd(m, k, cfg)
    }
}

fn truncate<T: Scalar>(full: SvdResult<T>, k: usize) -> SvdResult<T> {
    if full.rank() == k {
        return full;
    }
    let u = full.u.column_block(0, k).expect("k <= rank");
    let vt = Matrix::new(
        k,
        full.vt.cols(),
        full.vt.data()[..k * full.vt.cols()].to_vec(),
    )
    .expect("k <= rank");
    SvdResult {
        u,
        sigma: full.sigma[..k].to_vec(),
        vt,
    }
}

/// Column-major working storage.
type Cols<T> = Vec<Vec<T>>;

fn to_cols<T: Scalar>(m: &Matrix<T>) -> Cols<T> {
    (0..m.cols()).map(|j| m.column(j)).collect()
}

fn from_cols<T: Scalar>(rows: usize, cols: &Cols<T>) -> Matrix<T> {
    Matrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Thin Householder QR of a tall matrix given by columns: returns `(Q, R)`
/// with `Q` as `rows × cols` columns and `R` as `cols × cols` columns.
fn householder_qr<T: Scalar>(mut a: Cols<T>, rows: usize) -> (Cols<T>, Cols<T>) {
    let cols = a.len();
    debug_assert!(rows >= cols);
    let two = T::of(2.0);
    let mut reflectors: Vec<Option<Vec<T>>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let x = &a[j][j..];
        let norm = dot(x, x).sqrt();
        if norm == T::zero() {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] > T::zero() { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vnorm = dot(&v, &v).sqrt();
        if vnorm == T::zero() {
            reflectors.push(None);
            continue;
        }
        v.iter_mut().for_each(|e| *e /= vnorm);
        for col in a.iter_mut().skip(j) {
            let tail = &mut col[j..];
            let proj = two * dot(&v, tail);
            tail.iter_mut().zip(&v).for_each(|(t, &vi)| *t -= proj * vi);
        }
        reflectors.push(Some(v));
    }
    let r: Cols<T> = (0..cols)
        .map(|j| {
            (0..cols)
                .map(|i| if i <= j { a[j][i] } else { T::zero() })
                .collect()
        })
        .collect();
    let mut q: Cols<T> = (0..cols)
        .map(|j| {
            let mut e = vec![T::zero(); rows];
            e[j] = T::one();
            e
        })
        .collect();
    for (j, refl) in reflectors.iter().enumerate().rev() {
        if let Some(v) = refl {
            for col in q.iter_mut() {
                let tail = &mut col[j..];
                let proj = two * dot(v, tail);
                tail.iter_mut().zip(v).for_each(|(t, &vi)| *t -= proj * vi);
            }
        }
    }
    (q, r)
}

/// Complete SVD via one-sided Jacobi (`rank == min(rows, cols)`).
fn jacobi_svd<T: Scalar>(m: &Matrix<T>, max_sweeps: usize) -> Result<SvdResult<T>> {
    if m.rows() < m.cols() {
        let t = jacobi_svd(&m.transpose(), max_sweeps)?;
        return Ok(SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        });
    }
    let (rows, cols) = (m.rows(), m.cols());
    let (q, mut g) = householder_qr(to_cols(m), rows);
    let mut v: Cols<T> = (0..cols)
        .map(|j| {
            let mut e = vec![T::zero(); cols];
            e[j] = T::one();
            e
        })
        .collect();

    let tol = T::epsilon() * T::of(cols as f64).sqrt();
    // Columns below this norm are numerically zero.
    let negligible = m.frobenius_norm() * T::epsilon();
    let negligible_sq = negligible * negligible;
    let mut converged = cols < 2;
    let mut off = 0.0f64;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        off = 0.0;
        for i in 0..cols {
            for j in i + 1..cols {
                let alpha = dot(&g[i], &g[i]);
                let beta = dot(&g[j], &g[j]);
                if alpha <= negligible_sq || beta <= negligible_sq {
                    continue;
                }
                let gamma = dot(&g[i], &g[j]);
                let scaled = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                off = off.max(scaled.to_f64_lossy());
                if scaled <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            sweeps: max_sweeps,
            residual: off,
        });
    }

    let norms: Vec<T> = g
        .iter()
        .map(|col| {
            let n = dot(col, col).sqrt();
            if n <= negligible {
                T::zero()
            } else {
                n
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));

    let mut sigma = Vec::with_capacity(cols);
    let mut ur: Cols<T> = Vec::with_capacity(cols);
    let mut vt_rows: Vec<T> = Vec::with_capacity(cols * cols);
    for &j in &order {
        let s = norms[j];
        sigma.push(s);
        ur.push(if s > T::zero() {
            g[j].iter().map(|&e| e / s).collect()
        } else {
            vec![T::zero(); cols]
        });
        vt_rows.extend_from_slice(&v[j]);
    }
    // Left vectors: U = Q · U_R, then fill any null directions.
    let mut u: Cols<T> = ur
        .iter()
        .map(|col| {
            let mut out = vec![T::zero(); rows];
            for (k, &coef) in col.iter().enumerate() {
                if coef != T::zero() {
                    out.iter_mut()
                        .zip(&q[k])
                        .for_each(|(o, &qk)| *o += coef * qk);
                }
            }
            out
        })
        .collect();
    complete_orthonormal(&mut u, &sigma, rows);

    Ok(SvdResult {
        u: from_cols(rows, &u),
        sigma,
        vt: Matrix::new(cols, cols, vt_rows)?,
    })
}

#[inline]
fn rotate<T: Scalar>(cols: &mut Cols<T>, i: usize, j: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(j);
    for (a, b) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Replace the columns belonging to zero singular values with unit vectors
/// orthogonal to all others (Gram–Schmidt against the standard basis).
fn complete_orthonormal<T: Scalar>(u: &mut Cols<T>, sigma: &[T], rows: usize) {
    let mut candidate = 0;
    for j in 0..u.len() {
        if sigma[j] > T::zero() {
            continue;
        }
        while candidate < rows {
            let mut e = vec![T::zero(); rows];
            e[candidate] = T::one();
            candidate += 1;
            for _ in 0..2 {
                for (k, col) in u.iter().enumerate() {
                    if k == j || (sigma[k] == T::zero() && k > j) {
                        continue;
                    }
                    let p = dot(col, &e);
                    e.iter_mut().zip(col).for_each(|(x, &c)| *x -= p * c);
                }
            }
            let n = dot(&e, &e).sqrt();
            if n > T::of(1e-3) {
                e.iter_mut().for_each(|x| *x /= n);
                u[j] = e;
                break;
            }
        }
    }
}

fn orthonormalize<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let (q, _) = householder_qr(to_cols(m), m.rows());
    from_cols(m.rows(), &q)
}

fn randomized_svd<T: Scalar>(m: &Matrix<T>, k: usize, cfg: &SvdConfig) -> Result<SvdResult<T>> {
    let min_dim = m.rows().min(m.cols());
    let l = (k + cfg.oversample).min(min_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let omega = Matrix::from_fn(m.cols(), l, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        T::of(z)
    });
    let mt = m.transpose();
    let mut q = orthonormalize(&m.matmul(&omega)?);
    for _ in 0..cfg.power_iters {
        let z = orthonormalize(&mt.matmul(&q)?);
        q = orthonormalize(&m.matmul(&z)?);
    }
    let small = q.transpose().matmul(m)?;
    let inner = jacobi_svd(&small, cfg.max_sweeps)?;
    let u = q.matmul(&inner.u)?;
    Ok(truncate(
        SvdResult {
            u,
            sigma: inner.sigma,
            vt: inner.vt,
        },
        k,
    ))
}
