//! Ellipse-membership checks and attribution of logprobs to candidate models.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::logits::center;
use crate::recovery::RecoveredParams;
use crate::synth::{hidden_norm_histogram, sample_outputs, FinalLayerParams, LogprobMatrix};

/// Tolerance for keys of unsmoothed models.
pub const DEFAULT_TAU: f64 = 1e-4;
/// Largest relative distance of `C l` from a key's column space that still counts as inside.
pub const SUBSPACE_TOL: f64 = 1e-7;
/// Attribution margins below this many decades are reported as ambiguous.
pub const AMBIGUOUS_DECADES: f64 = 0.5;
const PINV_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone)]
pub enum KeyMaterial {
    /// Known final layer, with the pseudoinverse of `C W` cached.
    Exact {
        params: Box<FinalLayerParams>,
        cw: Mat<f64>,
        cw_pinv: Mat<f64>,
    },
    Recovered(Box<RecoveredParams>),
}

#[derive(Debug, Clone)]
pub struct EllipseKey {
    pub id: String,
    pub material: KeyMaterial,
    pub tau: f64,
}

impl EllipseKey {
    /// Key from known parameters, with `tau` defaulted from the smoothing level.
    pub fn exact(id: impl Into<String>, params: FinalLayerParams) -> Result<Self> {
        let tau = default_tau(&params)?;
        Self::exact_with_tau(id, params, tau)
    }

    pub fn exact_with_tau(id: impl Into<String>, params: FinalLayerParams, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        let cw = params.centered_unembedding();
        let cw_pinv = linalg::pinv(cw.as_ref(), PINV_CUTOFF)?;
        Ok(Self {
            id: id.into(),
            material: KeyMaterial::Exact {
                params: Box::new(params),
                cw,
                cw_pinv,
            },
            tau,
        })
    }

    pub fn recovered(id: impl Into<String>, params: RecoveredParams, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self {
            id: id.into(),
            material: KeyMaterial::Recovered(Box::new(params)),
            tau,
        })
    }

    pub fn v(&self) -> usize {
        match &self.material {
            KeyMaterial::Exact { params, .. } => params.v,
            KeyMaterial::Recovered(r) => r.pair.v,
        }
    }

    pub fn d(&self) -> usize {
        match &self.material {
            KeyMaterial::Exact { params, .. } => params.d,
            KeyMaterial::Recovered(r) => r.pair.d,
        }
    }

    /// `v x d` basis of the key's centered logit space.
    pub fn logit_basis(&self) -> Mat<f64> {
        match &self.material {
            KeyMaterial::Exact { cw, .. } => cw.clone(),
            KeyMaterial::Recovered(r) => r.pair.a_inv.clone(),
        }
    }

    /// Normalized-state coordinates of `l` (unit norm on the ellipse) and the
    /// relative residual of `C l` outside the key's column space.
    pub fn unit_coords(&self, l: &[f64]) -> Result<(Vec<f64>, f64)> {
        if l.len() != self.v() {
            return Err(Error::DimensionMismatch {
                expected: self.v(),
                got: l.len(),
            });
        }
        match &self.material {
            KeyMaterial::Exact { params, cw, cw_pinv } => {
                let c = center(l);
                let h = linalg::matvec(cw_pinv.as_ref(), &c);
                let back = linalg::matvec(cw.as_ref(), &h);
                let resid = relative_gap(&back, &c);
                let r = params.radius();
                let x: Vec<f64> = h
                    .iter()
                    .zip(&params.beta)
                    .zip(&params.gamma)
                    .map(|((h, b), g)| (h - b) / (g * r))
                    .collect();
                Ok((x, resid))
            }
            KeyMaterial::Recovered(rec) => rec.unit_coords(l),
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Precondition(format!("tau must be positive, got {tau}")))
    }
}

fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let num = linalg::norm2(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
    let den = linalg::norm2(b);
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

/// `1e-4` without smoothing; otherwise ten times the mean interior offset
/// `1 - E||xhat|| / radius` of normalized random states.
pub fn default_tau(params: &FinalLayerParams) -> Result<f64> {
    if params.eps == 0.0 {
        return Ok(DEFAULT_TAU);
    }
    let hist = hidden_norm_histogram(params, 4000, 1, 0x7a0)?;
    Ok((10.0 * (1.0 - hist.mean)).max(DEFAULT_TAU))
}

/// `| ||z|| - 1 |` for the key's inverse affine image `z` of `l`.
pub fn distance_to_ellipse(l: &[f64], key: &EllipseKey) -> Result<f64> {
    let (z, _) = key.unit_coords(l)?;
    Ok((linalg::norm2(&z) - 1.0).abs())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub candidate_id: String,
    pub distance: f64,
    /// Relative distance of the centered logprobs from the key's column space.
    pub subspace_residual: f64,
    pub tau: f64,
    pub passed: bool,
    /// `log10(second best / best)` over attribution scores.
    pub margin_log10: Option<f64>,
    pub ambiguous: bool,
}

/// Distance check plus column-space membership against a single key.
pub fn verify(l: &[f64], key: &EllipseKey) -> Result<VerificationReport> {
    let (z, resid) = key.unit_coords(l)?;
    let distance = (linalg::norm2(&z) - 1.0).abs();
    Ok(VerificationReport {
        candidate_id: key.id.clone(),
        distance,
        subspace_residual: resid,
        tau: key.tau,
        passed: distance <= key.tau && resid <= SUBSPACE_TOL,
        margin_log10: None,
        ambiguous: false,
    })
}

fn score(r: &VerificationReport) -> f64 {
    r.distance.max(r.subspace_residual)
}

fn rank_reports(mut reports: Vec<VerificationReport>) -> Result<VerificationReport> {
    if reports.len() < 2 {
        return Err(Error::Precondition("attribution needs at least two candidates".into()));
    }
    let order = {
        let mut idx: Vec<usize> = (0..reports.len()).collect();
        idx.sort_by(|&a, &b| score(&reports[a]).total_cmp(&score(&reports[b])));
        idx
    };
    let best = score(&reports[order[0]]);
    let second = score(&reports[order[1]]);
    let margin = if best > 0.0 {
        (second / best).log10()
    } else if second > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let mut out = reports.swap_remove(order[0]);
    out.margin_log10 = Some(margin);
    out.ambiguous = margin < AMBIGUOUS_DECADES;
    Ok(out)
}

/// Candidate whose ellipse is closest to `l`. The ranking score is the larger
/// of the ellipse distance and the column-space residual.
pub fn attribute(l: &[f64], candidates: &[EllipseKey]) -> Result<VerificationReport> {
    let reports = candidates
        .iter()
        .map(|k| verify(l, k))
        .collect::<Result<Vec<_>>>()?;
    rank_reports(reports)
}

/// Attribution after first moving `l` into each candidate's column space, so
/// that only the ellipse (not the linear signature) can separate candidates.
pub fn attribute_projected(l: &[f64], candidates: &[EllipseKey], shared: &[usize]) -> Result<VerificationReport> {
    let reports = candidates
        .iter()
        .map(|k| {
            let (proj, _) = project_column(l, &k.logit_basis(), shared)?;
            verify(&proj, k)
        })
        .collect::<Result<Vec<_>>>()?;
    rank_reports(reports)
}

pub const PROJECT_MAX_ITER: usize = 200;
pub const PROJECT_GRAD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionDiagnostic {
    pub iterations: usize,
    pub grad_norm: f64,
    pub cross_entropy: f64,
    pub converged: bool,
}

/// Moves each column of `m` into `target`'s centered logit space by
/// minimizing the cross-entropy over the `shared` token indices.
pub fn cross_space_project(
    m: &LogprobMatrix,
    target: &EllipseKey,
    shared: &[usize],
) -> Result<(LogprobMatrix, Vec<ProjectionDiagnostic>)> {
    let basis = target.logit_basis();
    let mut cols = Vec::with_capacity(m.n());
    let mut diags = Vec::with_capacity(m.n());
    for j in 0..m.n() {
        let (col, diag) = project_column(&m.column(j), &basis, shared)?;
        cols.push(col);
        diags.push(diag);
    }
    let token_ids = (0..basis.nrows() as u32).collect();
    Ok((LogprobMatrix::from_columns(&cols, token_ids)?, diags))
}

fn validate_shared(shared: &[usize], v_src: usize, v_dst: usize, d: usize) -> Result<()> {
    if shared.len() < d {
        return Err(Error::Precondition(format!(
            "{} shared tokens cannot determine {d} coordinates",
            shared.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for &t in shared {
        if t >= v_src || t >= v_dst {
            return Err(Error::Precondition(format!("shared token {t} outside a vocabulary")));
        }
        if !seen.insert(t) {
            return Err(Error::Precondition(format!("shared token {t} listed twice")));
        }
    }
    Ok(())
}

/// Damped Newton on `c -> CE(softmax(l_S), softmax((B c)_S))`, started from
/// the least-squares match of centered logits.
pub fn project_column(l: &[f64], basis: &Mat<f64>, shared: &[usize]) -> Result<(Vec<f64>, ProjectionDiagnostic)> {
    let (v, d) = (basis.nrows(), basis.ncols());
    validate_shared(shared, l.len(), v, d)?;
    let s = shared.len();
    let bs = Mat::from_fn(s, d, |i, j| basis[(shared[i], j)]);
    let target: Vec<f64> = shared.iter().map(|&t| l[t]).collect();
    let p = linalg::softmax(&target);

    let bs_centered = {
        let mut c = bs.clone();
        for j in 0..d {
            let mean = c.col(j).iter().sum::<f64>() / s as f64;
            for i in 0..s {
                c[(i, j)] -= mean;
            }
        }
        c
    };
    let pinv = linalg::pinv(bs_centered.as_ref(), 1e-12)?;
    let mut c = linalg::matvec(pinv.as_ref(), &center(&target));

    let ce = |c: &[f64]| -> (f64, Vec<f64>) {
        let z = linalg::matvec(bs.as_ref(), c);
        let lq = linalg::log_softmax(&z);
        let val = -p.iter().zip(&lq).map(|(a, b)| a * b).sum::<f64>();
        (val, lq.iter().map(|x| x.exp()).collect())
    };
    let (mut f, mut q) = ce(&c);
    let mut lambda = 1e-6;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    while iterations < PROJECT_MAX_ITER {
        let diff: Vec<f64> = q.iter().zip(&p).map(|(a, b)| a - b).collect();
        let g = linalg::matvec_t(bs.as_ref(), &diff);
        grad_norm = linalg::norm2(&g);
        if grad_norm <= PROJECT_GRAD_TOL {
            break;
        }
        iterations += 1;
        let bq = linalg::matvec_t(bs.as_ref(), &q);
        let mut h = Mat::from_fn(d, d, |a, b| {
            let mut acc = 0.0;
            for i in 0..s {
                acc += bs[(i, a)] * q[i] * bs[(i, b)];
            }
            acc - bq[a] * bq[b]
        });
        let scale = (0..d).map(|i| h[(i, i)]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut accepted = false;
        for _ in 0..30 {
            for i in 0..d {
                h[(i, i)] += lambda * scale;
            }
            let step = linalg::cholesky_lower(h.as_ref()).map(|_| {
                let rhs = Mat::from_fn(d, 1, |i, _| -g[i]);
                let sol = linalg::spd_inverse(h.as_ref()).map(|inv| &inv * &rhs);
                sol.map(|m| (0..d).map(|i| m[(i, 0)]).collect::<Vec<_>>())
            });
            for i in 0..d {
                h[(i, i)] -= lambda * scale;
            }
            if let Some(Some(step)) = step {
                let cand: Vec<f64> = c.iter().zip(&step).map(|(a, b)| a + b).collect();
                let (fc, qc) = ce(&cand);
                if fc <= f + 1e-15 * f.abs() {
                    c = cand;
                    f = fc;
                    q = qc;
                    lambda = (lambda * 0.1).max(1e-14);
                    accepted = true;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    let projected = linalg::log_softmax(&linalg::matvec(basis.as_ref(), &c));
    Ok((
        projected,
        ProjectionDiagnostic {
            iterations,
            grad_norm,
            cross_entropy: f,
            converged: grad_norm <= PROJECT_GRAD_TOL * 1e3,
        },
    ))
}

/// Cross-entropy of `softmax(a_S)` against `softmax(b_S)` over shared tokens.
pub fn shared_cross_entropy(a: &[f64], b: &[f64], shared: &[usize]) -> f64 {
    let pa = linalg::softmax(&shared.iter().map(|&t| a[t]).collect::<Vec<_>>());
    let lb = linalg::log_softmax(&shared.iter().map(|&t| b[t]).collect::<Vec<_>>());
    -pa.iter().zip(&lb).map(|(x, y)| x * y).sum::<f64>()
}

/// One row of a source-by-target distance table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossDistanceRow {
    pub source_model: String,
    pub target_model: String,
    pub mean_distance: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Mean ellipse distance of every model's outputs, projected into every
/// candidate's column space, to that candidate's ellipse.
pub fn cross_distance_table(
    models: &[(String, FinalLayerParams)],
    n: usize,
    seed: u64,
) -> Result<Vec<CrossDistanceRow>> {
    let keys = models
        .iter()
        .map(|(id, p)| EllipseKey::exact(id.clone(), p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let v = models.iter().map(|(_, p)| p.v).min().unwrap_or(0);
    let shared: Vec<usize> = (0..v).collect();
    let mut rows = Vec::new();
    for (si, (sid, sp)) in models.iter().enumerate() {
        let outputs = sample_outputs(sp, n, seed.wrapping_add(si as u64))?;
        for key in &keys {
            let (proj, _) = cross_space_project(&outputs, key, &shared)?;
            let ds = (0..proj.n())
                .map(|j| distance_to_ellipse(&proj.column(j), key))
                .collect::<Result<Vec<_>>>()?;
            let mean = ds.iter().sum::<f64>() / ds.len() as f64;
            let var = ds.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (ds.len().max(2) - 1) as f64;
            rows.push(CrossDistanceRow {
                source_model: sid.clone(),
                target_model: key.id.clone(),
                mean_distance: mean,
                stderr: (var / ds.len() as f64).sqrt(),
                n: ds.len(),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recovery::recover_rms;
    use crate::synth::{synth_model, NormKind};
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn key(seed: u64, d: usize, norm: NormKind) -> (FinalLayerParams, EllipseKey) {
        let p = synth_model(256, d, norm, 0.0, seed).unwrap();
        let k = EllipseKey::exact(format!("m{seed}"), p.clone()).unwrap();
        (p, k)
    }

    #[test]
    fn genuine_outputs_sit_on_the_ellipse() {
        for norm in [NormKind::ScaledRms, NormKind::Rms, NormKind::LayerNorm] {
            let (p, k) = key(1, 16, norm);
            let m = sample_outputs(&p, 20, 3).unwrap();
            for j in 0..m.n() {
                let r = verify(&m.column(j), &k).unwrap();
                assert!(r.distance <= 1e-9 && r.passed, "{norm:?} {r:?}");
            }
        }
    }

    #[test]
    fn shift_invariance() {
        let (p, k) = key(2, 16, NormKind::ScaledRms);
        let l = sample_outputs(&p, 1, 1).unwrap().column(0);
        let shifted: Vec<f64> = l.iter().map(|x| x + 3.7).collect();
        let a = distance_to_ellipse(&l, &k).unwrap();
        let b = distance_to_ellipse(&shifted, &k).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn noise_and_foreign_outputs_fail() {
        let (p, k) = key(3, 16, NormKind::ScaledRms);
        let (q, _) = key(4, 16, NormKind::ScaledRms);
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 1e-3).unwrap();
        let genuine = sample_outputs(&p, 10, 1).unwrap();
        let foreign = sample_outputs(&q, 10, 1).unwrap();
        for j in 0..10 {
            let noisy: Vec<f64> = genuine.column(j).iter().map(|x| x + noise.sample(&mut rng)).collect();
            assert!(!verify(&noisy, &k).unwrap().passed);
            assert!(!verify(&foreign.column(j), &k).unwrap().passed);
        }
    }

    #[test]
    fn attribution_among_four_models() {
        let keys: Vec<_> = (10..14).map(|s| key(s, 16, NormKind::ScaledRms)).collect();
        let cands: Vec<EllipseKey> = keys.iter().map(|(_, k)| k.clone()).collect();
        let out = sample_outputs(&keys[2].0, 5, 9).unwrap();
        let shared: Vec<usize> = (0..256).collect();
        for j in 0..5 {
            let r = attribute_projected(&out.column(j), &cands, &shared).unwrap();
            assert_eq!(r.candidate_id, "m12");
            assert!(r.margin_log10.unwrap() >= 3.0, "{r:?}");
        }
        let twice = vec![cands[0].clone(), cands[0].clone()];
        let r = attribute(&sample_outputs(&keys[0].0, 1, 1).unwrap().column(0), &twice).unwrap();
        assert!(r.ambiguous);
        assert!(attribute(&out.column(0), &cands[..1]).is_err());
    }

    #[test]
    fn perturbed_checkpoint_is_still_separated() {
        let (p, k) = key(20, 16, NormKind::ScaledRms);
        let mut q = p.clone();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 1e-3).unwrap();
        for j in 0..q.d {
            for i in 0..q.v {
                q.w[(i, j)] += n.sample(&mut rng);
            }
        }
        let kq = EllipseKey::exact("step", q.clone()).unwrap();
        let shared: Vec<usize> = (0..256).collect();
        let out = sample_outputs(&q, 5, 2).unwrap();
        for j in 0..5 {
            let r = attribute_projected(&out.column(j), &[k.clone(), kq.clone()], &shared).unwrap();
            assert_eq!(r.candidate_id, "step");
            assert!(!r.ambiguous);
        }
    }

    #[test]
    fn cross_projection_identity_and_forgery() {
        let (p, k) = key(30, 16, NormKind::ScaledRms);
        let (q, _) = key(31, 16, NormKind::ScaledRms);
        let shared: Vec<usize> = (0..256).collect();
        let own = sample_outputs(&p, 4, 1).unwrap();
        let (proj, diags) = cross_space_project(&own, &k, &shared).unwrap();
        for j in 0..4 {
            let ce0 = shared_cross_entropy(&own.column(j), &own.column(j), &shared);
            let ce1 = shared_cross_entropy(&own.column(j), &proj.column(j), &shared);
            assert!((ce1 - ce0).abs() < 1e-6);
            assert!(diags[j].converged);
        }
        let genuine = (0..4)
            .map(|j| distance_to_ellipse(&own.column(j), &k).unwrap())
            .fold(1e-12, f64::max);
        let foreign = sample_outputs(&q, 8, 1).unwrap();
        let (forged, _) = cross_space_project(&foreign, &k, &shared).unwrap();
        for j in 0..8 {
            let r = verify(&forged.column(j), &k).unwrap();
            assert!(r.subspace_residual < 1e-9, "{r:?}");
            assert!(r.distance >= 1e3 * genuine && !r.passed, "{r:?}");
        }
        assert!(cross_space_project(&foreign, &k, &shared[..8]).is_err());
    }

    #[test]
    fn exact_and_recovered_paths_agree() {
        let (p, k) = key(40, 16, NormKind::ScaledRms);
        let rec = recover_rms(&sample_outputs(&p, 200, 2).unwrap()).unwrap();
        let kr = EllipseKey::recovered("rec", rec, DEFAULT_TAU).unwrap();
        let test = sample_outputs(&p, 10, 50).unwrap();
        let (q, _) = key(41, 16, NormKind::ScaledRms);
        let (forged, _) = cross_space_project(&sample_outputs(&q, 10, 1).unwrap(), &k, &(0..256).collect::<Vec<_>>()).unwrap();
        for j in 0..10 {
            for l in [test.column(j), forged.column(j)] {
                let a = distance_to_ellipse(&l, &k).unwrap();
                let b = distance_to_ellipse(&l, &kr).unwrap();
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn smoothed_keys_get_a_wider_tolerance() {
        let p = synth_model(256, 16, NormKind::ScaledRms, 1e-5, 1).unwrap();
        let tau = default_tau(&p).unwrap();
        assert!(tau >= DEFAULT_TAU);
        let k = EllipseKey::exact("s", p.clone()).unwrap();
        let m = sample_outputs(&p, 20, 1).unwrap();
        assert!((0..20).all(|j| verify(&m.column(j), &k).unwrap().passed));
    }
}
