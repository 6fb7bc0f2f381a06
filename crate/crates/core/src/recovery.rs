//! End-to-end extraction of the output-layer ellipse from logprobs, and
//! scoring against a known model.

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{self, mat_serde, AffineForm};
use crate::linalg;
use crate::logits::{self, ProjectionPair, RankEstimate, DEFAULT_RANK_TOL, MAX_ANCHOR_CONDITION};
use crate::synth::{normalize, FinalLayerParams, HiddenState, LogprobMatrix, NormKind};

/// Singular values closer than this (relative) make column pairing ill-defined.
pub const DEGENERATE_GAP: f64 = 1e-6;
/// Largest relative distance from the fitted hyperplane tolerated for layer-norm outputs.
const PLANE_TOL: f64 = 1e-6;

/// Re-entry map for layer-norm ellipses: `y = base + Y t` for `t` in `R^{d-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lift {
    /// `d x (d-1)`.
    #[serde(with = "mat_serde")]
    pub y: Mat<f64>,
    pub base: Vec<f64>,
    /// Down-projected outputs whose differences to `base` define `Y`.
    pub columns: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageNote {
    pub stage: String,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveredParams {
    pub pair: ProjectionPair,
    /// Ellipse in `R^ellipse_dim`; for layer norm its center is `b_2`.
    pub affine: AffineForm,
    pub lift: Option<Lift>,
    pub norm: NormKind,
    pub ellipse_dim: usize,
    /// Ellipse center in the down-projected space `R^d`.
    pub bias: Vec<f64>,
    pub n_samples: usize,
    pub fit_iterations: usize,
    pub fit_residual_rms: f64,
    pub provenance: Vec<StageNote>,
}

impl RecoveredParams {
    pub fn d(&self) -> usize {
        self.pair.d
    }

    /// Ellipse-frame coordinates `Sigma^-1 U^T (...)` of a logprob vector,
    /// plus the relative distance of `C l` from the recovered column space.
    pub fn unit_coords(&self, l: &[f64]) -> Result<(Vec<f64>, f64)> {
        let y = self.pair.down_project(l)?;
        let residual = self.pair.relative_residual(l)?;
        let t = match &self.lift {
            None => y,
            Some(lift) => y
                .iter()
                .zip(&lift.base)
                .take(self.ellipse_dim)
                .map(|(a, b)| a - b)
                .collect(),
        };
        Ok((self.affine.to_unit(&t), residual))
    }

    /// Down-projected point on the recovered ellipse for unit coordinates `z`.
    pub fn ellipse_point(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.ellipse_dim {
            return Err(Error::DimensionMismatch {
                expected: self.ellipse_dim,
                got: z.len(),
            });
        }
        let t = self.affine.from_unit(z);
        Ok(match &self.lift {
            None => t,
            Some(lift) => linalg::matvec(lift.y.as_ref(), &t)
                .into_iter()
                .zip(&lift.base)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Logprobs produced by the recovered model at unit coordinates `z`.
    pub fn logprobs_at(&self, z: &[f64]) -> Result<Vec<f64>> {
        let y = self.ellipse_point(z)?;
        Ok(linalg::log_softmax(&self.pair.up_project(&y)?))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RecoveryOptions {
    /// Hidden width; estimated from the data when `None`.
    pub d: Option<usize>,
    /// Eigenvalue margin for the ellipsoid-specific fit; scale-aware default when `None`.
    pub delta: Option<f64>,
    pub rank_tol: f64,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        Self {
            d: None,
            delta: None,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

fn note(notes: &mut Vec<StageNote>, stage: &str, detail: String) {
    notes.push(StageNote {
        stage: stage.to_string(),
        detail,
    });
}

struct Projected {
    pair: ProjectionPair,
    points: Vec<Vec<f64>>,
    notes: Vec<StageNote>,
}

fn project_all(m: &LogprobMatrix, opts: &RecoveryOptions) -> Result<Projected> {
    let mut notes = Vec::new();
    let d = match opts.d {
        Some(d) => {
            note(&mut notes, "rank", format!("declared d = {d}"));
            d
        }
        None => {
            let est: RankEstimate =
                logits::estimate_rank(m, opts.rank_tol).map_err(Error::at("rank"))?;
            note(
                &mut notes,
                "rank",
                est.diagnostic()
                    .unwrap_or_else(|| format!("d = {} (gap ratio {:.3e})", est.rank, est.gap_ratio)),
            );
            est.rank
        }
    };
    if d == 0 {
        return Err(Error::at("rank")(Error::Precondition(
            "observations have rank zero after centering".into(),
        )));
    }
    let pair = logits::build_projections(m, d).map_err(Error::at("projection"))?;
    note(
        &mut notes,
        "projection",
        format!(
            "rows {:?}..., anchor condition {:.3e}",
            &pair.rows[..pair.rows.len().min(4)],
            pair.block_condition
        ),
    );
    let points = (0..m.n())
        .map(|j| pair.down_project(&m.column(j)))
        .collect::<Result<Vec<_>>>()
        .map_err(Error::at("down-projection"))?;
    Ok(Projected { pair, points, notes })
}

fn fit_affine(
    points: &[Vec<f64>],
    dim: usize,
    delta: Option<f64>,
    notes: &mut Vec<StageNote>,
) -> Result<(AffineForm, usize, f64)> {
    let mat = Mat::from_fn(points.len(), dim, |i, j| points[i][j]);
    let fitted = fit::fit_ellipsoid_specific(mat.as_ref(), delta).map_err(Error::at("ellipsoid fit"))?;
    note(
        notes,
        "ellipsoid fit",
        format!(
            "{} iterations, residual rms {:.3e}, constraint {}",
            fitted.iterations,
            fitted.residual_rms,
            if fitted.constraint_active { "active" } else { "inactive" }
        ),
    );
    let center = fit::quadric_to_center(&fitted.form).map_err(Error::at("center form"))?;
    let affine = fit::center_to_affine(&center).map_err(Error::at("affine form"))?;
    Ok((affine, fitted.iterations, fitted.residual_rms))
}

pub fn recover_rms(m: &LogprobMatrix) -> Result<RecoveredParams> {
    recover_rms_with(m, &RecoveryOptions::default())
}

pub fn recover_rms_with(m: &LogprobMatrix, opts: &RecoveryOptions) -> Result<RecoveredParams> {
    let Projected { pair, points, mut notes } = project_all(m, opts)?;
    let d = pair.d;
    let needed = fit::n_unknowns(d);
    if m.n() < needed {
        return Err(Error::at("sample count")(Error::TooFewSamples { needed, got: m.n() }));
    }
    let (affine, iterations, residual) = fit_affine(&points, d, opts.delta, &mut notes)?;
    Ok(RecoveredParams {
        bias: affine.b.clone(),
        pair,
        affine,
        lift: None,
        norm: NormKind::ScaledRms,
        ellipse_dim: d,
        n_samples: m.n(),
        fit_iterations: iterations,
        fit_residual_rms: residual,
        provenance: notes,
    })
}

pub fn recover_layernorm(m: &LogprobMatrix) -> Result<RecoveredParams> {
    recover_layernorm_with(m, &RecoveryOptions::default())
}

pub fn recover_layernorm_with(m: &LogprobMatrix, opts: &RecoveryOptions) -> Result<RecoveredParams> {
    let Projected { pair, points, mut notes } = project_all(m, opts)?;
    let d = pair.d;
    if d < 2 {
        return Err(Error::at("lift")(Error::Precondition(
            "layer-norm recovery needs d >= 2".into(),
        )));
    }
    let k = d - 1;
    let needed = fit::n_unknowns(k) + 1;
    if m.n() < needed {
        return Err(Error::at("sample count")(Error::TooFewSamples { needed, got: m.n() }));
    }
    let base = points[0].clone();
    let diffs: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&base).map(|(a, b)| a - b).collect())
        .collect();
    let (y, columns) = solve_lift(&diffs, d).map_err(Error::at("lift"))?;
    note(&mut notes, "lift", format!("Y from outputs {:?}...", &columns[..columns.len().min(4)]));

    let mut worst = 0.0f64;
    for u in &diffs {
        let back = linalg::matvec(y.as_ref(), &u[..k]);
        let err = linalg::norm2(&back.iter().zip(u).map(|(a, b)| a - b).collect::<Vec<_>>());
        let scale = linalg::norm2(u);
        if scale > 0.0 {
            worst = worst.max(err / scale);
        }
    }
    if worst > PLANE_TOL {
        return Err(Error::at("lift")(Error::Precondition(format!(
            "outputs leave the hyperplane of the first d-1 differences (relative residual {worst:.3e}); \
             the model does not look layer-normalized"
        ))));
    }

    let reduced: Vec<Vec<f64>> = diffs.iter().map(|u| u[..k].to_vec()).collect();
    let (affine, iterations, residual) = fit_affine(&reduced, k, opts.delta, &mut notes)?;
    let lifted = linalg::matvec(y.as_ref(), &affine.b);
    let bias = base.iter().zip(&lifted).map(|(a, b)| a + b).collect();
    Ok(RecoveredParams {
        bias,
        pair,
        affine,
        lift: Some(Lift { y, base, columns }),
        norm: NormKind::LayerNorm,
        ellipse_dim: k,
        n_samples: m.n(),
        fit_iterations: iterations,
        fit_residual_rms: residual,
        provenance: notes,
    })
}

/// `Y = D (Z D)^-1` with `D` the differences of `d-1` outputs to the first.
fn solve_lift(diffs: &[Vec<f64>], d: usize) -> Result<(Mat<f64>, Vec<usize>)> {
    let k = d - 1;
    let attempt = |cols: &[usize]| -> Result<Mat<f64>> {
        let dm = Mat::from_fn(d, k, |i, j| diffs[cols[j]][i]);
        let zd = dm.as_ref().submatrix(0, 0, k, k).to_owned();
        let yt = linalg::solve_checked(zd.transpose(), dm.transpose(), "lift block", MAX_ANCHOR_CONDITION)?;
        Ok(yt.transpose().to_owned())
    };
    let default: Vec<usize> = (1..d).collect();
    if default.len() <= diffs.len().saturating_sub(1) {
        match attempt(&default) {
            Ok(y) => return Ok((y, default)),
            Err(Error::Singular { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let n = diffs.len();
    let tall = Mat::from_fn(k, n, |i, j| diffs[j][i]);
    let picks: Vec<usize> = tall.col_piv_qr().P().arrays().0[..k].to_vec();
    attempt(&picks).map(|y| (y, picks))
}

/// Rank-based guess of the norm family. Never applied automatically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormGuess {
    pub rank: usize,
    pub affine_rank: usize,
    pub layernorm_like: bool,
}

pub fn detect_norm(m: &LogprobMatrix, rel_tol: f64) -> Result<NormGuess> {
    let rank = logits::estimate_rank(m, rel_tol)?.rank;
    let affine_rank = logits::affine_rank(m, rel_tol)?.rank;
    Ok(NormGuess {
        rank,
        affine_rank,
        layernorm_like: affine_rank + 1 == rank,
    })
}

/// Orthogonal reflection taking `(1, ..., 1)` to `(sqrt d, 0, ..., 0)`.
pub fn householder_isometry(d: usize) -> Result<Mat<f64>> {
    if d < 2 {
        return Err(Error::Precondition(format!("need d >= 2, got {d}")));
    }
    let sd = (d as f64).sqrt();
    let w: Vec<f64> = (0..d).map(|i| if i == 0 { 1.0 - sd } else { 1.0 }).collect();
    let ww = linalg::dot(&w, &w);
    Ok(Mat::from_fn(d, d, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - 2.0 * w[i] * w[j] / ww
    }))
}

/// `A C W` restricted to the rows of `pair`.
fn acw(truth: &FinalLayerParams, rows: &[usize]) -> Mat<f64> {
    let cw = truth.centered_unembedding();
    Mat::from_fn(rows.len(), truth.d, |i, j| cw[(rows[i], j)])
}

/// The true ellipse in the same coordinates as `rec.affine`, with the same
/// sign convention. For layer norm the center is expressed relative to the
/// recovered base point.
pub fn truth_affine(rec: &RecoveredParams, truth: &FinalLayerParams) -> Result<AffineForm> {
    if rec.pair.v != truth.v || rec.pair.d != truth.d {
        return Err(Error::DimensionMismatch {
            expected: truth.d,
            got: rec.pair.d,
        });
    }
    if truth.ellipse_dim() != rec.ellipse_dim {
        return Err(Error::DimensionMismatch {
            expected: truth.ellipse_dim(),
            got: rec.ellipse_dim,
        });
    }
    let d = truth.d;
    let a = acw(truth, &rec.pair.rows);
    let r = truth.radius();
    let scaled = Mat::from_fn(d, d, |i, j| a[(i, j)] * truth.gamma[j] * r);
    let bstar = linalg::matvec(a.as_ref(), &truth.beta);
    let (m, b) = match (&rec.lift, truth.norm) {
        (None, NormKind::ScaledRms | NormKind::Rms) => (scaled, bstar),
        (Some(lift), NormKind::LayerNorm) => {
            let k = d - 1;
            let h = householder_isometry(d)?;
            // centered unit sphere = H[:, 1..] w, |w| = 1, scaled by the radius above
            let tail = h.as_ref().submatrix(0, 1, d, k).to_owned();
            let full = &scaled * &tail;
            let m = full.as_ref().submatrix(0, 0, k, k).to_owned();
            let b: Vec<f64> = bstar.iter().zip(&lift.base).take(k).map(|(a, b)| a - b).collect();
            (m, b)
        }
        _ => {
            return Err(Error::Precondition(format!(
                "recovered {} parameters cannot be scored against a {} model",
                rec.norm.as_str(),
                truth.norm.as_str()
            )))
        }
    };
    let dec = linalg::svd(m.as_ref())?;
    let mut u = dec.u;
    linalg::apply_sign_convention(&mut u);
    Ok(AffineForm { u, sigma: dec.s, b })
}

/// Ellipse center `A C W beta` in the down-projected space.
pub fn truth_bias(rec: &RecoveredParams, truth: &FinalLayerParams) -> Vec<f64> {
    linalg::matvec(acw(truth, &rec.pair.rows).as_ref(), &truth.beta)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryScore {
    pub bias_mse: f64,
    pub stretch_mse: f64,
    /// `trace(U^T U*)`; equals the ellipse dimension at a perfect match.
    pub rotation_trace: f64,
    /// Frobenius norm of the principal logarithm of `U^T U*`.
    pub rotation_geodesic: f64,
    pub n_samples: usize,
    /// Indices `k` where `sigma*_k` and `sigma*_{k+1}` nearly coincide.
    pub degenerate_pairs: Vec<usize>,
    /// Per-column angles (radians) between matching columns of `U` and `U*`.
    pub column_angles: Vec<f64>,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn score_affine(rec: &AffineForm, truth: &AffineForm, bias: (&[f64], &[f64]), n: usize) -> Result<RecoveryScore> {
    let k = rec.dim();
    if truth.dim() != k {
        return Err(Error::DimensionMismatch {
            expected: truth.dim(),
            got: k,
        });
    }
    let cross = rec.u.transpose() * &truth.u;
    let rotation_trace = (0..k).map(|i| cross[(i, i)]).sum();
    let rotation_geodesic = linalg::orthogonal_log_norm(cross.as_ref())?;
    let degenerate_pairs = (0..k.saturating_sub(1))
        .filter(|&i| (truth.sigma[i] - truth.sigma[i + 1]).abs() < DEGENERATE_GAP * truth.sigma[i])
        .collect();
    let column_angles = (0..k).map(|i| cross[(i, i)].clamp(-1.0, 1.0).acos()).collect();
    Ok(RecoveryScore {
        bias_mse: mse(bias.0, bias.1),
        stretch_mse: mse(&rec.sigma, &truth.sigma),
        rotation_trace,
        rotation_geodesic,
        n_samples: n,
        degenerate_pairs,
        column_angles,
    })
}

pub fn score_recovery(rec: &RecoveredParams, truth: &FinalLayerParams) -> Result<RecoveryScore> {
    let t = truth_affine(rec, truth)?;
    let b_true = truth_bias(rec, truth);
    score_affine(&rec.affine, &t, (&rec.bias, &b_true), rec.n_samples)
}

/// The reparameterized form `softmax(A^- U Sigma V^T xhat + b)` of a model.
/// Fields are public so tests can corrupt them.
#[derive(Debug, Clone)]
pub struct Reparameterization {
    pub a_inv: Mat<f64>,
    pub u: Mat<f64>,
    pub sigma: Vec<f64>,
    pub vt: Mat<f64>,
    /// `C W beta`, length `v`.
    pub b: Vec<f64>,
}

impl Reparameterization {
    /// Builds the form using the coordinate rows `rows` as the down-projection.
    pub fn from_truth(truth: &FinalLayerParams, rows: &[usize]) -> Result<Self> {
        let d = truth.d;
        if rows.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: rows.len(),
            });
        }
        let cw = truth.centered_unembedding();
        let a = acw(truth, rows);
        let ainv_t = linalg::solve_checked(a.transpose(), cw.transpose(), "A C W", 1e12)?;
        let scaled = Mat::from_fn(d, d, |i, j| a[(i, j)] * truth.gamma[j]);
        let dec = linalg::svd(scaled.as_ref())?;
        Ok(Self {
            a_inv: ainv_t.transpose().to_owned(),
            u: dec.u,
            sigma: dec.s,
            vt: dec.v.transpose().to_owned(),
            b: linalg::matvec(cw.as_ref(), &truth.beta),
        })
    }

    /// Rows chosen by column-pivoted QR of `(C W)^T` for a well-conditioned `A C W`.
    pub fn pivoted(truth: &FinalLayerParams) -> Result<Self> {
        let cw = truth.centered_unembedding();
        let rows: Vec<usize> = cw.transpose().to_owned().col_piv_qr().P().arrays().0[..truth.d].to_vec();
        Self::from_truth(truth, &rows)
    }

    pub fn logits(&self, xhat: &[f64]) -> Vec<f64> {
        let vx = linalg::matvec(self.vt.as_ref(), xhat);
        let svx: Vec<f64> = vx.iter().zip(&self.sigma).map(|(a, s)| a * s).collect();
        let usvx = linalg::matvec(self.u.as_ref(), &svx);
        linalg::matvec(self.a_inv.as_ref(), &usvx)
            .into_iter()
            .zip(&self.b)
            .map(|(a, b)| a + b)
            .collect()
    }
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Largest total-variation gap between the model's softmax output and its
/// reparameterized form over `trials` random normalized inputs.
pub fn reparam_equivalence_check(
    truth: &FinalLayerParams,
    rep: &Reparameterization,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if truth.eps != 0.0 {
        return Err(Error::Precondition("equivalence check needs eps = 0".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < trials {
        let x = HiddenState::gaussian(&mut rng, truth.d);
        let Ok(xhat) = normalize(&x, truth.norm, truth.eps) else { continue };
        let p = linalg::softmax(&truth.logits_from_normalized(&xhat));
        let q = linalg::softmax(&rep.logits(&xhat));
        worst = worst.max(total_variation(&p, &q));
        done += 1;
    }
    Ok(worst)
}

/// Max total variation between held-out outputs and the recovered model's
/// regeneration of them from their own ellipse coordinates.
pub fn regeneration_gap(rec: &RecoveredParams, held_out: &LogprobMatrix) -> Result<f64> {
    let mut worst = 0.0f64;
    for j in 0..held_out.n() {
        let l = held_out.column(j);
        let (z, _) = rec.unit_coords(&l)?;
        let regen = rec.logprobs_at(&z)?;
        let p: Vec<f64> = l.iter().map(|v| v.exp()).collect();
        let q: Vec<f64> = regen.iter().map(|v| v.exp()).collect();
        worst = worst.max(total_variation(&p, &q));
    }
    Ok(worst)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{sample_outputs, synth_model};
    use faer::MatRef;

    fn mat_ref_rows(m: MatRef<'_, f64>) -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
    }

    #[test]
    fn householder_examples() {
        let h2 = householder_isometry(2).unwrap();
        let v = linalg::matvec(h2.as_ref(), &[1.0, 1.0]);
        assert!((v[0] - 2f64.sqrt()).abs() < 1e-12 && v[1].abs() < 1e-12);
        let h4 = householder_isometry(4).unwrap();
        let v = linalg::matvec(h4.as_ref(), &[1.0; 4]);
        assert!((v[0] - 2.0).abs() < 1e-12 && v[1..].iter().all(|x| x.abs() < 1e-12));
        for d in 2..=64 {
            let h = householder_isometry(d).unwrap();
            let hth = h.transpose() * &h;
            assert!(linalg::max_abs_diff(hth.as_ref(), Mat::<f64>::identity(d, d).as_ref()) < 1e-12);
        }
        assert!(householder_isometry(1).is_err());
    }

    #[test]
    fn exact_rms_recovery() {
        let truth = synth_model(256, 16, NormKind::ScaledRms, 0.0, 1).unwrap();
        let m = sample_outputs(&truth, 200, 2).unwrap();
        let rec = recover_rms(&m).unwrap();
        assert_eq!(rec.ellipse_dim, 16);
        let s = score_recovery(&rec, &truth).unwrap();
        assert!(s.bias_mse <= 1e-16, "{s:?}");
        assert!(s.stretch_mse <= 1e-16, "{s:?}");
        assert!(s.rotation_geodesic <= 1e-7, "{s:?}");
        let t = truth_affine(&rec, &truth).unwrap();
        for (a, b) in rec.affine.sigma.iter().zip(&t.sigma) {
            assert!((a - b).abs() <= 1e-9 * b.max(1.0));
        }
        let fresh = sample_outputs(&truth, 20, 77).unwrap();
        assert!(regeneration_gap(&rec, &fresh).unwrap() < 1e-8);
    }

    #[test]
    fn smoothing_underestimates_stretch() {
        let truth = synth_model(256, 16, NormKind::ScaledRms, 1e-5, 1).unwrap();
        let m = sample_outputs(&truth, 400, 2).unwrap();
        let rec = recover_rms(&m).unwrap();
        let t = truth_affine(&rec, &truth).unwrap();
        let under = rec.affine.sigma.iter().zip(&t.sigma).filter(|(a, b)| a <= b).count();
        assert!(under >= 15, "{:?} vs {:?}", rec.affine.sigma, t.sigma);
    }

    #[test]
    fn too_few_samples_fail_with_stage() {
        let truth = synth_model(256, 16, NormKind::ScaledRms, 0.0, 1).unwrap();
        let m = sample_outputs(&truth, 100, 2).unwrap();
        let err = recover_rms(&m).unwrap_err();
        assert!(matches!(&err, Error::Stage { stage: "sample count", .. }), "{err}");
    }

    #[test]
    fn exact_layernorm_recovery() {
        let truth = synth_model(256, 16, NormKind::LayerNorm, 0.0, 5).unwrap();
        let m = sample_outputs(&truth, 200, 6).unwrap();
        let rec = recover_layernorm(&m).unwrap();
        assert_eq!(rec.ellipse_dim, 15);
        let bstar = truth_bias(&rec, &truth);
        assert!(rec.bias.iter().zip(&bstar).all(|(a, b)| (a - b).abs() < 1e-8));
        let s = score_recovery(&rec, &truth).unwrap();
        assert!(s.bias_mse <= 1e-16 && s.stretch_mse <= 1e-16 && s.rotation_geodesic <= 1e-7, "{s:?}");
        let fresh = sample_outputs(&truth, 20, 78).unwrap();
        assert!(regeneration_gap(&rec, &fresh).unwrap() < 1e-8);
    }

    #[test]
    fn layernorm_toy_is_a_tilted_circle() {
        let truth = synth_model(16, 3, NormKind::LayerNorm, 0.0, 9).unwrap();
        let m = sample_outputs(&truth, 12, 1).unwrap();
        let rec = recover_layernorm(&m).unwrap();
        assert_eq!(rec.ellipse_dim, 2);
        assert!(score_recovery(&rec, &truth).unwrap().bias_mse < 1e-16);
    }

    #[test]
    fn layernorm_pipeline_rejects_rms_outputs() {
        let truth = synth_model(256, 8, NormKind::ScaledRms, 0.0, 3).unwrap();
        let m = sample_outputs(&truth, 80, 2).unwrap();
        let err = recover_layernorm(&m).unwrap_err();
        assert!(matches!(&err, Error::Stage { stage: "lift", .. }), "{err}");
        let guess = detect_norm(&m, DEFAULT_RANK_TOL).unwrap();
        assert!(!guess.layernorm_like);
        let ln = synth_model(256, 8, NormKind::LayerNorm, 0.0, 3).unwrap();
        let guess = detect_norm(&sample_outputs(&ln, 80, 2).unwrap(), DEFAULT_RANK_TOL).unwrap();
        assert!(guess.layernorm_like);
    }

    #[test]
    fn scoring_truth_against_itself() {
        let truth = synth_model(128, 8, NormKind::ScaledRms, 0.0, 2).unwrap();
        let m = sample_outputs(&truth, 60, 2).unwrap();
        let rec = recover_rms(&m).unwrap();
        let t = truth_affine(&rec, &truth).unwrap();
        let b = truth_bias(&rec, &truth);
        let s = score_affine(&t, &t, (&b, &b), 0).unwrap();
        assert_eq!(s.bias_mse, 0.0);
        assert_eq!(s.stretch_mse, 0.0);
        assert!((s.rotation_trace - 8.0).abs() < 1e-12);
        assert!(s.rotation_geodesic < 1e-7);
    }

    #[test]
    fn reparameterization_is_equivalent() {
        for seed in 0..5 {
            for norm in [NormKind::ScaledRms, NormKind::Rms, NormKind::LayerNorm] {
                let truth = synth_model(64, 8, norm, 0.0, seed).unwrap();
                let rep = Reparameterization::pivoted(&truth).unwrap();
                assert!(reparam_equivalence_check(&truth, &rep, 50, seed).unwrap() <= 1e-12);
            }
        }
        let mut truth = synth_model(64, 8, NormKind::ScaledRms, 0.0, 1).unwrap();
        truth.gamma.iter_mut().for_each(|g| *g *= 2.0);
        let rep = Reparameterization::pivoted(&truth).unwrap();
        assert!(reparam_equivalence_check(&truth, &rep, 50, 3).unwrap() <= 1e-12);
        let mut bad = rep.clone();
        bad.b.iter_mut().enumerate().for_each(|(i, b)| *b += if i % 2 == 0 { 1.0 } else { -1.0 });
        assert!(reparam_equivalence_check(&truth, &bad, 50, 3).unwrap() > 1e-3);
    }

    #[test]
    fn params_serialize_round_trip() {
        let truth = synth_model(64, 4, NormKind::LayerNorm, 0.0, 2).unwrap();
        let m = sample_outputs(&truth, 30, 2).unwrap();
        let rec = recover_layernorm(&m).unwrap();
        let json = serde_json::to_string(&rec).unwrap();
        let back: RecoveredParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back.affine, rec.affine);
        assert_eq!(back.lift, rec.lift);
        assert_eq!(mat_ref_rows(back.pair.a_inv.as_ref()), mat_ref_rows(rec.pair.a_inv.as_ref()));
    }
}
