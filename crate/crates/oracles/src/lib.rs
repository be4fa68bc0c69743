//! Reference implementations for tests.
//!
//! Everything here is written for clarity over speed and shares no code
//! paths with the library under test beyond the plain data containers.

use filterbasis::{Matrix, Tensor4};

/// Direct six-loop cross-correlation with zero padding.
pub fn conv2d_loop(x: &Tensor4<f64>, w: &Tensor4<f64>, stride: usize, pad: usize) -> Tensor4<f64> {
    let [nb, c, h, wd] = x.dims();
    let [n, wc, kh, kw] = w.dims();
    assert_eq!(c, wc, "channel mismatch");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor4::zeros([nb, n, oh, ow]);
    for b in 0..nb {
        for o in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[[b, ch, iy as usize, ix as usize]] * w[[o, ch, ky, kx]];
                            }
                        }
                    }
                    out[[b, o, y, xx]] = acc;
                }
            }
        }
    }
    out
}

pub fn matmul_loop(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
    assert_eq!(a.cols(), b.rows());
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
    })
}

/// Entry `(row, col)` of the split matrix of `w` with `s` splits, by index
/// arithmetic alone.
pub fn split_entry(w: &Tensor4<f64>, s: usize, row: usize, col: usize) -> f64 {
    let [n, c, h, wd] = w.dims();
    let p = c / s;
    let (g, i) = (col / n, col % n);
    let ch = row / (h * wd);
    let y = (row / wd) % h;
    let x = row % wd;
    w[[i, g * p + ch, y, x]]
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations,
/// sorted descending.
pub fn symmetric_eigenvalues(a: &Matrix<f64>) -> Vec<f64> {
    let n = a.rows();
    assert_eq!(n, a.cols());
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| a.get(i, j)).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| m[i][i] * m[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in m.iter_mut() {
                    let (mkp, mkq) = (row[p], row[q]);
                    row[p] = c * mkp - s * mkq;
                    row[q] = s * mkp + c * mkq;
                }
                #[allow(clippy::needless_range_loop)]
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Singular values from the eigenvalues of the smaller Gram matrix.
pub fn singular_values(a: &Matrix<f64>) -> Vec<f64> {
    let at = a.transpose();
    let gram = if a.rows() <= a.cols() {
        matmul_loop(a, &at)
    } else {
        matmul_loop(&at, a)
    };
    symmetric_eigenvalues(&gram)
        .into_iter()
        .map(|v| v.max(0.0).sqrt())
        .collect()
}

/// `√(Σ_{i>k} σ_i²)`: the best achievable rank-`k` Frobenius error.
pub fn svd_tail_norm(a: &Matrix<f64>, k: usize) -> f64 {
    singular_values(a)[k..]
        .iter()
        .map(|s| s * s)
        .sum::<f64>()
        .sqrt()
}

/// Central difference `(f(θ+h·e_i) − f(θ−h·e_i)) / 2h`.
pub fn central_difference(
    theta: &[f64],
    i: usize,
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut t = theta.to_vec();
    t[i] = theta[i] + h;
    let up = f(&t);
    t[i] = theta[i] - h;
    let down = f(&t);
    (up - down) / (2.0 * h)
}

/// Relative error used by gradient checks: `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compressed parameters `m·p·h·w + m·n·s` of a split choice.
pub fn split_params(n: usize, c: usize, area: usize, m: usize, p: usize) -> u64 {
    let s = c / p;
    (m * p * area + m * n * s) as u64
}

/// Divisor `p` of `c` with the fewest compressed parameters, scanning every
/// divisor; ties go to the smaller `p`.
pub fn best_split_exhaustive(n: usize, c: usize, area: usize, m: usize) -> (usize, usize) {
    let mut best: Option<(u64, usize)> = None;
    for p in 1..=c {
        if !c.is_multiple_of(p) {
            continue;
        }
        let cost = split_params(n, c, area, m, p);
        if best.is_none_or(|(b, _)| cost < b) {
            best = Some((cost, p));
        }
    }
    let p = best.expect("c >= 1").1;
    (c / p, p)
}

/// Frobenius norm of `a − b` computed elementwise.
pub fn frobenius_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_of_diagonal_and_rotation() {
        let a = Matrix::new(3, 3, vec![2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0]).unwrap();
        let ev = symmetric_eigenvalues(&a);
        assert!(
            (ev[0] - 5.0).abs() < 1e-12
                && (ev[1] - 3.0).abs() < 1e-12
                && (ev[2] - 1.0).abs() < 1e-12
        );
    }

    #[test]
    fn singular_values_of_known_matrix() {
        // [[3, 0], [4, 5]] has singular values √45 and √5.
        let a = Matrix::new(2, 2, vec![3.0, 0.0, 4.0, 5.0]).unwrap();
        let sv = singular_values(&a);
        assert!((sv[0] - 45f64.sqrt()).abs() < 1e-12);
        assert!((sv[1] - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn loop_conv_sum_kernel() {
        let x = Tensor4::from_fn([1, 1, 3, 3], |_| 1.0);
        let w = Tensor4::from_fn([1, 1, 3, 3], |_| 1.0);
        assert_eq!(conv2d_loop(&x, &w, 1, 0).data(), &[9.0]);
        assert_eq!(conv2d_loop(&x, &w, 1, 1)[[0, 0, 0, 0]], 4.0);
    }

    #[test]
    fn exhaustive_split_small() {
        // n = c = 256, 3×3: p = 64 beats p = 128.
        assert_eq!(best_split_exhaustive(256, 256, 9, 32), (4, 64));
        assert_eq!(best_split_exhaustive(8, 8, 1, 2), (1, 8));
    }

    #[test]
    fn central_difference_of_cubic() {
        let d = central_difference(&[2.0], 0, 1e-4, |t| t[0].powi(3));
        assert!((d - 12.0).abs() < 1e-6);
    }
}
