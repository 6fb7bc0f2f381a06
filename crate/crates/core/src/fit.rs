//! Quadric and ellipsoid fitting in `R^d`, plus conversions between the
//! quadric, center and affine parameterizations of an ellipsoid.
//!
//! The design matrix uses symmetric-vector coordinates: the quadratic part of
//! a row is `(y_1^2, sqrt2 y_1 y_2, ..., y_d^2)` so that Euclidean geometry on
//! the unknowns coincides with the Frobenius geometry on `Q`.

use std::time::Instant;

use faer::linalg::solvers::{Solve, SolveLstsq};
use faer::{Col, Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

const SQRT2: f64 = std::f64::consts::SQRT_2;
const RANK_TOL: f64 = 1e-11;
const REL_STOP: f64 = 1e-12;

/// Surface `(x - origin)^T Q (x - origin) + P^T (x - origin) = 1`.
///
/// With `origin = 0` this is the plain algebraic form. A nonzero origin lets
/// the same "= 1" normalization describe surfaces that pass through zero.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadricForm {
    pub q: Mat<f64>,
    pub p: Vec<f64>,
    pub origin: Vec<f64>,
}

impl QuadricForm {
    pub fn new(q: Mat<f64>, p: Vec<f64>) -> Result<Self> {
        let d = p.len();
        Self::with_origin(q, p, vec![0.0; d])
    }

    pub fn with_origin(q: Mat<f64>, p: Vec<f64>, origin: Vec<f64>) -> Result<Self> {
        let d = p.len();
        if q.nrows() != d || q.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: q.nrows(),
            });
        }
        if origin.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: origin.len(),
            });
        }
        Ok(Self {
            q: linalg::symmetrize(q.as_ref()),
            p,
            origin,
        })
    }

    pub fn dim(&self) -> usize {
        self.p.len()
    }

    /// Left-hand side minus one; zero on the surface.
    pub fn residual(&self, x: &[f64]) -> f64 {
        let u: Vec<f64> = x.iter().zip(&self.origin).map(|(a, o)| a - o).collect();
        let qu = linalg::matvec(self.q.as_ref(), &u);
        linalg::dot(&u, &qu) + linalg::dot(&self.p, &u) - 1.0
    }

    /// The same surface expressed around another origin. Fails when the
    /// surface passes through `origin`, which the "= 1" form cannot express.
    pub fn rebased(&self, origin: &[f64]) -> Result<Self> {
        let delta: Vec<f64> = self.origin.iter().zip(origin).map(|(a, b)| a - b).collect();
        let qd = linalg::matvec(self.q.as_ref(), &delta);
        let k = linalg::dot(&delta, &qd) - linalg::dot(&self.p, &delta);
        let rhs = 1.0 - k;
        let scale = self.q.norm_l2().max(linalg::norm2(&self.p)).max(1.0);
        if rhs.abs() <= 1e-14 * scale {
            return Err(Error::Domain("surface passes through the requested origin".into()));
        }
        let q = Mat::from_fn(self.dim(), self.dim(), |i, j| self.q[(i, j)] / rhs);
        let p = self.p.iter().zip(&qd).map(|(p, qd)| (p - 2.0 * qd) / rhs).collect();
        Self::with_origin(q, p, origin.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidForm {
    pub e: Mat<f64>,
    pub b: Vec<f64>,
}

impl EllipsoidForm {
    pub fn residual(&self, x: &[f64]) -> f64 {
        let u: Vec<f64> = x.iter().zip(&self.b).map(|(a, b)| a - b).collect();
        linalg::dot(&u, &linalg::matvec(self.e.as_ref(), &u)) - 1.0
    }
}

/// `x = U diag(sigma) z + b` with `||z|| = 1` on the surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineForm {
    /// Column-major `d x d`.
    #[serde(with = "mat_serde")]
    pub u: Mat<f64>,
    pub sigma: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffineForm {
    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    /// `diag(sigma)^-1 U^T (x - b)`.
    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        let u: Vec<f64> = x.iter().zip(&self.b).map(|(a, b)| a - b).collect();
        linalg::matvec_t(self.u.as_ref(), &u)
            .into_iter()
            .zip(&self.sigma)
            .map(|(v, s)| v / s)
            .collect()
    }

    pub fn from_unit(&self, z: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = z.iter().zip(&self.sigma).map(|(a, s)| a * s).collect();
        linalg::matvec(self.u.as_ref(), &scaled)
            .into_iter()
            .zip(&self.b)
            .map(|(a, b)| a + b)
            .collect()
    }

    /// `(U diag sigma)(U diag sigma)^T = E^-1`.
    pub fn shape_inverse(&self) -> Mat<f64> {
        let d = self.dim();
        Mat::from_fn(d, d, |i, j| {
            (0..d)
                .map(|k| self.u[(i, k)] * self.u[(j, k)] * self.sigma[k] * self.sigma[k])
                .sum()
        })
    }
}

pub(crate) mod mat_serde {
    use faer::Mat;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Dense {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &Mat<f64>, s: S) -> Result<S::Ok, S::Error> {
        let data = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)])
            .collect();
        Dense {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat<f64>, D::Error> {
        let dense = Dense::deserialize(d)?;
        if dense.data.len() != dense.rows * dense.cols {
            return Err(serde::de::Error::custom("matrix data length mismatch"));
        }
        Ok(Mat::from_fn(dense.rows, dense.cols, |i, j| {
            dense.data[i * dense.cols + j]
        }))
    }
}

/// A fitted quadric together with solver diagnostics.
#[derive(Debug, Clone)]
pub struct QuadricFit {
    pub form: QuadricForm,
    /// Root-mean-square of the surface residual over the input points.
    pub residual_rms: f64,
    /// Half the squared residual norm, in normalized coordinates.
    pub objective: f64,
    pub iterations: usize,
    /// Margin enforced on `Q`'s eigenvalues (original coordinates); zero for plain fits.
    pub delta: f64,
    pub constraint_active: bool,
}

pub fn n_unknowns(d: usize) -> usize {
    d * (d + 3) / 2
}

fn svec_pairs(d: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            pairs.push((i, j));
        }
    }
    pairs
}

fn q_from_svec(theta: &[f64], pairs: &[(usize, usize)], d: usize) -> Mat<f64> {
    let mut q = Mat::zeros(d, d);
    for (k, &(i, j)) in pairs.iter().enumerate() {
        if i == j {
            q[(i, i)] = theta[k];
        } else {
            q[(i, j)] = theta[k] / SQRT2;
            q[(j, i)] = theta[k] / SQRT2;
        }
    }
    q
}

fn svec_from_q(q: MatRef<'_, f64>, pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs
        .iter()
        .map(|&(i, j)| if i == j { q[(i, i)] } else { SQRT2 * q[(i, j)] })
        .collect()
}

/// Points centered on their centroid and scaled to unit RMS radius.
struct Normalized {
    y: Mat<f64>,
    origin: Vec<f64>,
    scale: f64,
}

fn normalize_points(points: MatRef<'_, f64>) -> Result<Normalized> {
    let (n, d) = (points.nrows(), points.ncols());
    if points.col_iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(Error::Precondition("points contain non-finite values".into()));
    }
    let origin: Vec<f64> = (0..d)
        .map(|j| points.col(j).iter().sum::<f64>() / n as f64)
        .collect();
    let mut sq = 0.0;
    for j in 0..d {
        for i in 0..n {
            let c = points[(i, j)] - origin[j];
            sq += c * c;
        }
    }
    let scale = (sq / n as f64).sqrt();
    if !(scale > 0.0) {
        return Err(Error::Underdetermined {
            needed: n_unknowns(d),
            achieved: 0,
        });
    }
    let y = Mat::from_fn(n, d, |i, j| (points[(i, j)] - origin[j]) / scale);
    Ok(Normalized { y, origin, scale })
}

fn design_matrix(y: MatRef<'_, f64>, pairs: &[(usize, usize)]) -> Mat<f64> {
    let (n, d) = (y.nrows(), y.ncols());
    let nq = pairs.len();
    Mat::from_fn(n, nq + d, |r, k| {
        if k < nq {
            let (i, j) = pairs[k];
            let v = y[(r, i)] * y[(r, j)];
            if i == j {
                v
            } else {
                SQRT2 * v
            }
        } else {
            y[(r, k - nq)]
        }
    })
}

/// Least-squares problem reduced to its triangular factor:
/// `||D theta - 1||^2 = ||R theta - c||^2 + const`.
struct Reduced {
    r: Mat<f64>,
    c: Vec<f64>,
    theta_lsq: Vec<f64>,
}

fn reduce(y: MatRef<'_, f64>, pairs: &[(usize, usize)]) -> Result<Reduced> {
    let (n, d) = (y.nrows(), y.ncols());
    let m = n_unknowns(d);
    if n < m {
        return Err(Error::TooFewSamples { needed: m, got: n });
    }
    let design = design_matrix(y, pairs);
    let qr = design.qr();
    let r = qr.thin_R().to_owned();
    drop(design);
    let diag_max = (0..m).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let achieved = (0..m)
        .filter(|&i| r[(i, i)].abs() > RANK_TOL * diag_max)
        .count();
    if achieved < m {
        return Err(Error::Underdetermined { needed: m, achieved });
    }
    let ones = Col::<f64>::from_fn(n, |_| 1.0);
    let theta = qr.solve_lstsq(&ones);
    let theta_lsq: Vec<f64> = theta.iter().copied().collect();
    let c = linalg::matvec(r.as_ref(), &theta_lsq);
    Ok(Reduced { r, c, theta_lsq })
}

fn to_original(theta: &[f64], pairs: &[(usize, usize)], norm: &Normalized) -> QuadricForm {
    let d = norm.origin.len();
    let nq = pairs.len();
    let s = norm.scale;
    let q = q_from_svec(&theta[..nq], pairs, d);
    let q = Mat::from_fn(d, d, |i, j| q[(i, j)] / (s * s));
    let p = theta[nq..].iter().map(|v| v / s).collect();
    QuadricForm {
        q,
        p,
        origin: norm.origin.clone(),
    }
}

fn residual_rms(form: &QuadricForm, points: MatRef<'_, f64>) -> f64 {
    let n = points.nrows();
    let mut row = vec![0.0; points.ncols()];
    let mut acc = 0.0;
    for i in 0..n {
        for (j, r) in row.iter_mut().enumerate() {
            *r = points[(i, j)];
        }
        let e = form.residual(&row);
        acc += e * e;
    }
    (acc / n as f64).sqrt()
}

fn half_sq_residual(r: MatRef<'_, f64>, c: &[f64], theta: &[f64]) -> f64 {
    let rt = linalg::matvec(r, theta);
    0.5 * rt.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// Unconstrained least-squares quadric through the points (rows of `points`).
pub fn fit_quadric_lsq(points: MatRef<'_, f64>) -> Result<QuadricFit> {
    let d = points.ncols();
    if d == 0 {
        return Err(Error::Precondition("points must have at least one coordinate".into()));
    }
    if points.nrows() < n_unknowns(d) {
        return Err(Error::TooFewSamples {
            needed: n_unknowns(d),
            got: points.nrows(),
        });
    }
    let pairs = svec_pairs(d);
    let norm = normalize_points(points)?;
    let red = reduce(norm.y.as_ref(), &pairs)?;
    let form = to_original(&red.theta_lsq, &pairs, &norm);
    Ok(QuadricFit {
        residual_rms: residual_rms(&form, points),
        objective: half_sq_residual(red.r.as_ref(), &red.c, &red.theta_lsq),
        form,
        iterations: 0,
        delta: 0.0,
        constraint_active: false,
    })
}

pub fn is_ellipsoid(q: &QuadricForm) -> bool {
    matches!(linalg::min_eigenvalue(q.q.as_ref()), Ok(l) if l > 0.0)
}

/// Least-squares quadric constrained to `Q >= delta I`. `delta = None` picks
/// `1e-8 * trace(Q_lsq) / d`.
pub fn fit_ellipsoid_specific(points: MatRef<'_, f64>, delta: Option<f64>) -> Result<QuadricFit> {
    if let Some(dl) = delta {
        if !(dl > 0.0 && dl.is_finite()) {
            return Err(Error::Precondition(format!("delta must be positive, got {dl}")));
        }
    }
    let d = points.ncols();
    if d == 0 {
        return Err(Error::Precondition("points must have at least one coordinate".into()));
    }
    if points.nrows() < n_unknowns(d) {
        return Err(Error::TooFewSamples {
            needed: n_unknowns(d),
            got: points.nrows(),
        });
    }
    let pairs = svec_pairs(d);
    let nq = pairs.len();
    let norm = normalize_points(points)?;
    let red = reduce(norm.y.as_ref(), &pairs)?;
    let s2 = norm.scale * norm.scale;

    let q_lsq = q_from_svec(&red.theta_lsq[..nq], &pairs, d);
    let (eig, _) = linalg::sym_eigen(q_lsq.as_ref())?;
    let delta_orig = match delta {
        Some(dl) => dl,
        None => {
            let tr: f64 = eig.iter().sum::<f64>() / s2;
            let mag: f64 = eig.iter().map(|v| v.abs()).sum::<f64>() / s2;
            let base = if tr > 0.0 { tr } else { mag };
            (1e-8 * base / d as f64).max(f64::MIN_POSITIVE)
        }
    };
    let margin = delta_orig * s2;
    let finish = |theta: &[f64], iterations: usize, active: bool| {
        let form = to_original(theta, &pairs, &norm);
        QuadricFit {
            residual_rms: residual_rms(&form, points),
            objective: half_sq_residual(red.r.as_ref(), &red.c, theta),
            form,
            iterations,
            delta: delta_orig,
            constraint_active: active,
        }
    };

    if eig[0] >= margin {
        return Ok(finish(&red.theta_lsq, 0, false));
    }

    let proj = |theta: &mut [f64]| -> Result<()> { project_psd(theta, &pairs, d, margin) };
    let max_iter = 10 * n_unknowns(d);
    match fista(&red, &proj, max_iter) {
        Ok((theta, it)) => Ok(finish(&theta, it, true)),
        Err((theta_best, it)) => match barrier_newton(&red, &pairs, d, margin) {
            Ok((theta, it2)) => Ok(finish(&theta, it + it2, true)),
            Err(_) => {
                let best = finish(&theta_best, it, true);
                Err(Error::NoConvergence {
                    iterations: it,
                    objective: best.objective,
                    best: Some(Box::new(best.form)),
                })
            }
        },
    }
}

/// Eigenvalue clipping of the quadratic block: the Frobenius projection onto `Q >= margin I`.
fn project_psd(theta: &mut [f64], pairs: &[(usize, usize)], d: usize, margin: f64) -> Result<()> {
    let nq = pairs.len();
    let q = q_from_svec(&theta[..nq], pairs, d);
    let (vals, vecs) = linalg::sym_eigen(q.as_ref())?;
    if vals[0] >= margin {
        return Ok(());
    }
    let clipped: Vec<f64> = vals.iter().map(|v| v.max(margin)).collect();
    let qc = Mat::from_fn(d, d, |i, j| {
        (0..d).map(|k| vecs[(i, k)] * clipped[k] * vecs[(j, k)]).sum()
    });
    theta[..nq].copy_from_slice(&svec_from_q(qc.as_ref(), pairs));
    Ok(())
}

/// Accelerated projected gradient with backtracking and adaptive restart on
/// `0.5 ||R theta - c||^2`. Returns the best iterate on failure.
fn fista(
    red: &Reduced,
    proj: &dyn Fn(&mut [f64]) -> Result<()>,
    max_iter: usize,
) -> std::result::Result<(Vec<f64>, usize), (Vec<f64>, usize)> {
    let r = red.r.as_ref();
    let m = r.ncols();
    let h = r.transpose() * r;
    let rtc = linalg::matvec_t(r, &red.c);
    let f = |t: &[f64]| half_sq_residual(r, &red.c, t);
    let grad = |t: &[f64]| -> Vec<f64> {
        linalg::matvec(h.as_ref(), t)
            .into_iter()
            .zip(&rtc)
            .map(|(a, b)| a - b)
            .collect()
    };
    let mut lip = power_lipschitz(h.as_ref());
    let mut x = red.theta_lsq.clone();
    if proj(&mut x).is_err() {
        return Err((x, 0));
    }
    let mut y = x.clone();
    let mut tk = 1.0f64;
    let mut fx = f(&x);
    let mut best = (x.clone(), fx);
    for it in 1..=max_iter {
        let g = grad(&y);
        let fy = f(&y);
        let mut x_new;
        loop {
            x_new = y.iter().zip(&g).map(|(a, b)| a - b / lip).collect::<Vec<_>>();
            if proj(&mut x_new).is_err() {
                return Err((best.0, it));
            }
            let diff: Vec<f64> = x_new.iter().zip(&y).map(|(a, b)| a - b).collect();
            let bound = fy + linalg::dot(&g, &diff) + 0.5 * lip * linalg::dot(&diff, &diff);
            if f(&x_new) <= bound * (1.0 + 1e-14) + 1e-300 {
                break;
            }
            lip *= 2.0;
        }
        let f_new = f(&x_new);
        if f_new < best.1 {
            best = (x_new.clone(), f_new);
        }
        let step: f64 = linalg::norm2(&x_new.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>());
        let rel_obj = (fx - f_new).abs() / fx.abs().max(f64::MIN_POSITIVE);
        if it > 1 && rel_obj < REL_STOP && step <= 1e-8 * (1.0 + linalg::norm2(&x_new)) {
            return Ok((best.0, it));
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        let restart = f_new > fx;
        if restart {
            tk = 1.0;
            y = x_new.clone();
        } else {
            let mom = (tk - 1.0) / t_new;
            y = x_new
                .iter()
                .zip(&x)
                .map(|(a, b)| a + mom * (a - b))
                .collect();
            tk = t_new;
        }
        x = x_new;
        fx = f_new;
        if m == 0 {
            break;
        }
    }
    Err((best.0, max_iter))
}

fn power_lipschitz(h: MatRef<'_, f64>) -> f64 {
    let m = h.nrows();
    let mut v: Vec<f64> = (0..m).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
    let mut lam = 0.0;
    for _ in 0..60 {
        let w = linalg::matvec(h, &v);
        let nw = linalg::norm2(&w);
        if nw == 0.0 {
            return 1.0;
        }
        lam = nw / linalg::norm2(&v);
        v = w.into_iter().map(|x| x / nw).collect();
    }
    lam.max(f64::MIN_POSITIVE)
}

/// Log-det barrier Newton method for `min 0.5||R theta - c||^2 s.t. Q - margin I > 0`.
fn barrier_newton(
    red: &Reduced,
    pairs: &[(usize, usize)],
    d: usize,
    margin: f64,
) -> Result<(Vec<f64>, usize)> {
    let r = red.r.as_ref();
    let m = r.ncols();
    let nq = pairs.len();
    let h = r.transpose() * r;
    let rtc = linalg::matvec_t(r, &red.c);
    let f = |t: &[f64]| half_sq_residual(r, &red.c, t);

    let slack = |theta: &[f64]| -> Mat<f64> {
        let mut s = q_from_svec(&theta[..nq], pairs, d);
        for i in 0..d {
            s[(i, i)] -= margin;
        }
        s
    };
    let logdet = |s: &Mat<f64>| -> Option<f64> {
        let l = linalg::cholesky_lower(s.as_ref())?;
        Some((0..d).map(|i| 2.0 * l[(i, i)].ln()).sum())
    };

    let mut theta = red.theta_lsq.clone();
    let scale = linalg::sym_eigen(q_from_svec(&theta[..nq], pairs, d).as_ref())?
        .0
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(margin);
    project_psd(&mut theta, pairs, d, margin + 1e-3 * scale)?;

    let mut t = 1.0 / f(&theta).max(1e-300);
    let mut iters = 0;
    for _outer in 0..60 {
        for _inner in 0..60 {
            iters += 1;
            let s = slack(&theta);
            let tinv = linalg::spd_inverse(s.as_ref())
                .ok_or_else(|| Error::Numerical("barrier iterate left the cone".into()))?;
            let mut grad: Vec<f64> = linalg::matvec(h.as_ref(), &theta)
                .into_iter()
                .zip(&rtc)
                .map(|(a, b)| t * (a - b))
                .collect();
            let tsv = svec_from_q(tinv.as_ref(), pairs);
            for k in 0..nq {
                grad[k] -= tsv[k];
            }
            let hess = Mat::from_fn(m, m, |k, l| {
                let mut v = t * h[(k, l)];
                if k < nq && l < nq {
                    v += barrier_hessian_entry(tinv.as_ref(), pairs[k], pairs[l]);
                }
                v
            });
            let step = match linalg::cholesky_lower(hess.as_ref()) {
                Some(_) => {
                    let g = Mat::from_fn(m, 1, |i, _| -grad[i]);
                    let sol = linalg::symmetrize(hess.as_ref())
                        .llt(faer::Side::Lower)
                        .map_err(|_| Error::Numerical("barrier hessian not PD".into()))?
                        .solve(g);
                    (0..m).map(|i| sol[(i, 0)]).collect::<Vec<_>>()
                }
                None => return Err(Error::Numerical("barrier hessian not PD".into())),
            };
            let dec = -linalg::dot(&grad, &step);
            if dec < 1e-14 {
                break;
            }
            let phi = |th: &[f64]| -> Option<f64> { Some(t * f(th) - logdet(&slack(th))?) };
            let phi0 = phi(&theta).ok_or_else(|| Error::Numerical("infeasible iterate".into()))?;
            let mut alpha = 1.0;
            loop {
                let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, b)| a + alpha * b).collect();
                if let Some(v) = phi(&cand) {
                    if v <= phi0 - 0.25 * alpha * dec {
                        theta = cand;
                        break;
                    }
                }
                alpha *= 0.5;
                if alpha < 1e-12 {
                    break;
                }
            }
            if alpha < 1e-12 {
                break;
            }
        }
        if (d as f64) / t <= REL_STOP * f(&theta).max(1e-300) {
            return Ok((theta, iters));
        }
        t *= 10.0;
    }
    Ok((theta, iters))
}

fn barrier_hessian_entry(t: MatRef<'_, f64>, a: (usize, usize), b: (usize, usize)) -> f64 {
    let terms = |(i, j): (usize, usize)| -> (f64, Vec<(usize, usize)>) {
        if i == j {
            (1.0, vec![(i, i)])
        } else {
            (1.0 / SQRT2, vec![(i, j), (j, i)])
        }
    };
    let (sa, ta) = terms(a);
    let (sb, tb) = terms(b);
    let mut acc = 0.0;
    for &(p, q) in &ta {
        for &(r, s) in &tb {
            acc += t[(s, p)] * t[(q, r)];
        }
    }
    sa * sb * acc
}

/// Runs [`fit_ellipsoid_specific`] and reports wall-clock seconds.
pub fn timed_fit(points: MatRef<'_, f64>, delta: Option<f64>) -> (Result<QuadricFit>, f64) {
    let start = Instant::now();
    let out = fit_ellipsoid_specific(points, delta);
    (out, start.elapsed().as_secs_f64())
}

/// `b = origin - Q^-1 P / 2`, `E = Q / (1 + P^T Q^-1 P / 4)`.
pub fn quadric_to_center(q: &QuadricForm) -> Result<EllipsoidForm> {
    let qinv = linalg::spd_inverse(q.q.as_ref()).ok_or_else(|| {
        Error::NotEllipsoid("Q is not positive definite; use the ellipsoid-specific fit".into())
    })?;
    if !is_ellipsoid(q) {
        return Err(Error::NotEllipsoid(
            "Q is not positive definite; use the ellipsoid-specific fit".into(),
        ));
    }
    let qp = linalg::matvec(qinv.as_ref(), &q.p);
    let k = 1.0 + 0.25 * linalg::dot(&q.p, &qp);
    let d = q.dim();
    let b = q.origin.iter().zip(&qp).map(|(o, v)| o - 0.5 * v).collect();
    let e = Mat::from_fn(d, d, |i, j| q.q[(i, j)] / k);
    Ok(EllipsoidForm { e, b })
}

/// `U, Sigma = svd(cholesky(E^-1))` with descending `Sigma` and the sign convention on `U`.
pub fn center_to_affine(e: &EllipsoidForm) -> Result<AffineForm> {
    let d = e.b.len();
    let not_pd = || {
        Error::NotEllipsoid(
            "E is not numerically positive definite; refit with the ellipsoid-specific solver".into(),
        )
    };
    if linalg::cholesky_lower(e.e.as_ref()).is_none() {
        return Err(not_pd());
    }
    let einv = linalg::spd_inverse(e.e.as_ref()).ok_or_else(not_pd)?;
    let l = linalg::cholesky_lower(einv.as_ref()).ok_or_else(not_pd)?;
    let dec = linalg::svd(l.as_ref())?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| dec.s[b].total_cmp(&dec.s[a]));
    let mut u = Mat::from_fn(d, d, |i, j| dec.u[(i, order[j])]);
    let sigma: Vec<f64> = order.iter().map(|&k| dec.s[k]).collect();
    if sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(not_pd());
    }
    linalg::apply_sign_convention(&mut u);
    Ok(AffineForm {
        u,
        sigma,
        b: e.b.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle_points(n: usize, a: f64, b: f64, cx: f64, cy: f64) -> Mat<f64> {
        Mat::from_fn(n, 2, |i, j| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64 + 0.1;
            if j == 0 {
                cx + a * t.cos()
            } else {
                cy + b * t.sin()
            }
        })
    }

    fn plain(q: &QuadricForm) -> QuadricForm {
        q.rebased(&vec![0.0; q.dim()]).unwrap()
    }

    #[test]
    fn unit_circle_gives_identity() {
        let fit = fit_quadric_lsq(circle_points(12, 1.0, 1.0, 0.0, 0.0).as_ref()).unwrap();
        let q = plain(&fit.form);
        assert!(linalg::max_abs_diff(q.q.as_ref(), Mat::<f64>::identity(2, 2).as_ref()) < 1e-10);
        assert!(q.p.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn five_points_on_an_axis_aligned_ellipse() {
        let fit = fit_quadric_lsq(circle_points(5, 2.0, 1.0, 0.0, 0.0).as_ref()).unwrap();
        assert!(fit.residual_rms < 1e-10);
        let q = plain(&fit.form);
        assert!((q.q[(0, 0)] - 0.25).abs() < 1e-10);
        assert!((q.q[(1, 1)] - 1.0).abs() < 1e-10);
        assert!(q.q[(0, 1)].abs() < 1e-10);
    }

    #[test]
    fn too_few_points_is_rejected() {
        let pts = circle_points(4, 2.0, 1.0, 0.0, 0.0);
        assert!(matches!(
            fit_quadric_lsq(pts.as_ref()),
            Err(Error::TooFewSamples { needed: 5, got: 4 })
        ));
    }

    #[test]
    fn collinear_points_report_rank() {
        let pts = Mat::from_fn(8, 2, |i, j| if j == 0 { i as f64 } else { 2.0 * i as f64 });
        assert!(matches!(
            fit_quadric_lsq(pts.as_ref()),
            Err(Error::Underdetermined { needed: 5, .. })
        ));
    }

    #[test]
    fn ellipsoid_predicate() {
        let id = QuadricForm::new(Mat::identity(2, 2), vec![0.0; 2]).unwrap();
        assert!(is_ellipsoid(&id));
        let hyp = QuadricForm::new(
            Mat::from_fn(2, 2, |i, j| if i != j { 0.0 } else if i == 0 { 1.0 } else { -1.0 }),
            vec![0.0; 2],
        )
        .unwrap();
        assert!(!is_ellipsoid(&hyp));
        assert!(quadric_to_center(&hyp).is_err());
    }

    #[test]
    fn shifted_circle_round_trips_through_center_form() {
        // x^2 + y^2 - 2x = 0 passes through 0, so express it around (1, 0.5).
        let shifted = QuadricForm::with_origin(Mat::identity(2, 2), vec![0.0, 1.0], vec![1.0, 0.5])
            .unwrap();
        let e = quadric_to_center(&shifted).unwrap();
        for i in 0..16 {
            let t = i as f64 * 0.4;
            let x = [e.b[0] + t.cos() * (1.0 / e.e[(0, 0)]).sqrt(), e.b[1] + t.sin() * (1.0 / e.e[(1, 1)]).sqrt()];
            assert!(shifted.residual(&x).abs() < 1e-12);
        }
        let pts = circle_points(20, 1.0, 1.0, 1.0, 0.0);
        let fit = fit_quadric_lsq(pts.as_ref()).unwrap();
        let e = quadric_to_center(&fit.form).unwrap();
        assert!((e.b[0] - 1.0).abs() < 1e-10 && e.b[1].abs() < 1e-10);
        for i in 0..20 {
            assert!(e.residual(&[pts[(i, 0)], pts[(i, 1)]]).abs() < 1e-9);
        }
        assert!(fit.form.rebased(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn affine_conversion_examples() {
        let id = EllipsoidForm {
            e: Mat::identity(3, 3),
            b: vec![0.0; 3],
        };
        let a = center_to_affine(&id).unwrap();
        assert!(a.sigma.iter().all(|s| (s - 1.0).abs() < 1e-14));

        let e = EllipsoidForm {
            e: Mat::from_fn(2, 2, |i, j| if i != j { 0.0 } else if i == 0 { 4.0 } else { 1.0 }),
            b: vec![0.0; 2],
        };
        let a = center_to_affine(&e).unwrap();
        assert!((a.sigma[0] - 1.0).abs() < 1e-14 && (a.sigma[1] - 0.5).abs() < 1e-14);
        assert!((a.u[(1, 0)].abs() - 1.0).abs() < 1e-14 && a.u[(1, 0)] > 0.0);
        assert!((a.u[(0, 1)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sphere_fit_with_inactive_constraint() {
        let mut rows = Vec::new();
        for i in 0..40 {
            let t = i as f64 * 0.37;
            let p = i as f64 * 0.91;
            rows.push([t.sin() * p.cos(), t.sin() * p.sin(), t.cos()]);
        }
        let pts = Mat::from_fn(40, 3, |i, j| rows[i][j]);
        let fit = fit_ellipsoid_specific(pts.as_ref(), None).unwrap();
        assert!(!fit.constraint_active);
        let q = plain(&fit.form);
        assert!(linalg::max_abs_diff(q.q.as_ref(), Mat::<f64>::identity(3, 3).as_ref()) < 1e-8);
        assert!(fit_ellipsoid_specific(pts.as_ref(), Some(0.0)).is_err());
        assert!(fit_ellipsoid_specific(pts.as_ref(), Some(-1.0)).is_err());
    }

    #[test]
    fn barrier_hessian_matches_finite_difference() {
        let d = 3;
        let pairs = svec_pairs(d);
        let s = Mat::from_fn(d, d, |i, j| if i == j { 2.0 + i as f64 } else { 0.3 });
        let tinv = linalg::spd_inverse(s.as_ref()).unwrap();
        let base = svec_from_q(s.as_ref(), &pairs);
        let h = 1e-6;
        for l in 0..pairs.len() {
            let mut plus = base.clone();
            plus[l] += h;
            let mut minus = base.clone();
            minus[l] -= h;
            let gp = svec_from_q(linalg::spd_inverse(q_from_svec(&plus, &pairs, d).as_ref()).unwrap().as_ref(), &pairs);
            let gm = svec_from_q(linalg::spd_inverse(q_from_svec(&minus, &pairs, d).as_ref()).unwrap().as_ref(), &pairs);
            for k in 0..pairs.len() {
                let fd = -(gp[k] - gm[k]) / (2.0 * h);
                let an = barrier_hessian_entry(tinv.as_ref(), pairs[k], pairs[l]);
                assert!((fd - an).abs() < 1e-6, "{k},{l}: {fd} vs {an}");
            }
        }
    }
}
