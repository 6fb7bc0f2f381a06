//! Thin helpers over `faer` shared by the numerical modules.

use faer::linalg::solvers::Solve;
use faer::{Mat, MatRef, Side};

use crate::error::{Error, Result};

pub struct Svd {
    pub u: Mat<f64>,
    pub s: Vec<f64>,
    pub v: Mat<f64>,
}

/// Thin SVD with singular values in non-increasing order.
pub fn svd(a: MatRef<'_, f64>) -> Result<Svd> {
    let dec = a
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("svd did not converge: {e:?}")))?;
    Ok(Svd {
        u: dec.U().to_owned(),
        s: dec.S().column_vector().iter().copied().collect(),
        v: dec.V().to_owned(),
    })
}

pub fn singular_values(a: MatRef<'_, f64>) -> Result<Vec<f64>> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(Vec::new());
    }
    a.singular_values()
        .map_err(|e| Error::Numerical(format!("svd did not converge: {e:?}")))
}

/// Ratio of the extreme singular values; infinite for singular input.
pub fn condition_number(a: MatRef<'_, f64>) -> Result<f64> {
    let s = singular_values(a)?;
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => Ok(hi / lo),
        (Some(_), Some(_)) => Ok(f64::INFINITY),
        _ => Ok(1.0),
    }
}

/// Moore-Penrose pseudoinverse with a relative singular-value cutoff.
pub fn pinv(a: MatRef<'_, f64>, rel_cutoff: f64) -> Result<Mat<f64>> {
    let Svd { u, s, v } = svd(a)?;
    let cutoff = s.first().copied().unwrap_or(0.0) * rel_cutoff;
    let mut out = Mat::<f64>::zeros(a.ncols(), a.nrows());
    for (k, &sk) in s.iter().enumerate() {
        if sk <= cutoff || sk == 0.0 {
            continue;
        }
        let inv = 1.0 / sk;
        for i in 0..a.ncols() {
            let vik = v[(i, k)] * inv;
            if vik == 0.0 {
                continue;
            }
            for j in 0..a.nrows() {
                out[(i, j)] += vik * u[(j, k)];
            }
        }
    }
    Ok(out)
}

/// Symmetric eigendecomposition; eigenvalues ascending.
pub fn sym_eigen(a: MatRef<'_, f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let sym = symmetrize(a);
    let dec = sym
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Numerical(format!("eigendecomposition failed: {e:?}")))?;
    Ok((
        dec.S().column_vector().iter().copied().collect(),
        dec.U().to_owned(),
    ))
}

pub fn min_eigenvalue(a: MatRef<'_, f64>) -> Result<f64> {
    let (vals, _) = sym_eigen(a)?;
    Ok(vals.first().copied().unwrap_or(f64::INFINITY))
}

pub fn symmetrize(a: MatRef<'_, f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

/// Lower Cholesky factor, or `None` when the matrix is not numerically PD.
pub fn cholesky_lower(a: MatRef<'_, f64>) -> Option<Mat<f64>> {
    let sym = symmetrize(a);
    let llt = sym.llt(Side::Lower).ok()?;
    let l = llt.L();
    Some(Mat::from_fn(l.nrows(), l.ncols(), |i, j| {
        if j <= i {
            l[(i, j)]
        } else {
            0.0
        }
    }))
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(a: MatRef<'_, f64>) -> Option<Mat<f64>> {
    let sym = symmetrize(a);
    let llt = sym.llt(Side::Lower).ok()?;
    let inv = llt.solve(Mat::<f64>::identity(a.nrows(), a.nrows()));
    Some(symmetrize(inv.as_ref()))
}

/// Solves `a x = b` for square `a`, rejecting blocks whose condition exceeds `max_condition`.
pub fn solve_checked(
    a: MatRef<'_, f64>,
    b: MatRef<'_, f64>,
    what: &str,
    max_condition: f64,
) -> Result<Mat<f64>> {
    let cond = condition_number(a)?;
    if !cond.is_finite() || cond > max_condition {
        return Err(Error::Singular {
            what: what.to_string(),
            condition: cond,
        });
    }
    Ok(a.partial_piv_lu().solve(b))
}

pub fn matvec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.ncols(), x.len());
    let mut out = vec![0.0; a.nrows()];
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = a.col(j);
        for (o, &aij) in out.iter_mut().zip(col.iter()) {
            *o += aij * xj;
        }
    }
    out
}

pub fn matvec_t(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.nrows(), x.len());
    (0..a.ncols())
        .map(|j| a.col(j).iter().zip(x).map(|(p, q)| p * q).sum())
        .collect()
}

pub fn column(a: MatRef<'_, f64>, j: usize) -> Vec<f64> {
    a.col(j).iter().copied().collect()
}

pub fn from_columns(nrows: usize, cols: &[Vec<f64>]) -> Mat<f64> {
    Mat::from_fn(nrows, cols.len(), |i, j| cols[j][i])
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn logsumexp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = logsumexp(z);
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = logsumexp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// Flips columns so each has a positive first entry whose magnitude exceeds `1e-12`
/// of the column norm.
pub fn apply_sign_convention(u: &mut Mat<f64>) {
    for j in 0..u.ncols() {
        let norm = u.col(j).norm_l2();
        let tol = 1e-12 * norm.max(f64::MIN_POSITIVE);
        let lead = u.col(j).iter().copied().find(|x| x.abs() > tol);
        if matches!(lead, Some(x) if x < 0.0) {
            for i in 0..u.nrows() {
                u[(i, j)] = -u[(i, j)];
            }
        }
    }
}

/// Frobenius norm of the principal logarithm of an orthogonal matrix, from the
/// rotation angles of its eigenvalues.
pub fn orthogonal_log_norm(r: MatRef<'_, f64>) -> Result<f64> {
    if r.nrows() == 0 {
        return Ok(0.0);
    }
    let eig = r
        .to_owned()
        .eigenvalues()
        .map_err(|e| Error::Numerical(format!("eigenvalues failed: {e:?}")))?;
    Ok(eig
        .iter()
        .map(|z| {
            let theta = z.im.atan2(z.re);
            theta * theta
        })
        .sum::<f64>()
        .sqrt())
}

/// Orthogonal matrix with orthonormal columns spanning the column space of a
/// Gaussian draw (QR of the draw, signs fixed by R's diagonal).
pub fn orthonormal_columns(gauss: MatRef<'_, f64>) -> Mat<f64> {
    let qr = gauss.qr();
    let q = qr.compute_thin_Q();
    let r = qr.thin_R();
    let mut out = q.to_owned();
    for j in 0..out.ncols() {
        if r[(j, j)] < 0.0 {
            for i in 0..out.nrows() {
                out[(i, j)] = -out[(i, j)];
            }
        }
    }
    out
}

pub fn max_abs_diff(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    m
}
