//! Synthetic final-layer language models: normalization, unembedding and the
//! logprob outputs they produce. Every other module uses these as ground truth.

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative singular-value floor below which a draw of `W` counts as rank deficient.
const RANK_FLOOR: f64 = 1e-10;
const MAX_REDRAWS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// `x / sqrt(d (eps + E[x^2]))`; unit magnitude at `eps = 0`.
    ScaledRms,
    /// `x / sqrt(eps + E[x^2])`; magnitude `sqrt(d)` at `eps = 0`.
    Rms,
    /// `(x - E[x]) / sqrt(eps + Var[x])`; centered, magnitude `sqrt(d)` at `eps = 0`.
    #[serde(rename = "layernorm")]
    LayerNorm,
}

impl NormKind {
    /// Magnitude of a normalized vector when `eps = 0`.
    pub fn radius(self, d: usize) -> f64 {
        match self {
            NormKind::ScaledRms => 1.0,
            NormKind::Rms | NormKind::LayerNorm => (d as f64).sqrt(),
        }
    }

    /// Dimension of the ellipsoid traced by outputs of a width-`d` model.
    pub fn ellipse_dim(self, d: usize) -> usize {
        match self {
            NormKind::LayerNorm => d.saturating_sub(1),
            _ => d,
        }
    }

    pub fn is_rms_family(self) -> bool {
        !matches!(self, NormKind::LayerNorm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::ScaledRms => "scaled_rms",
            NormKind::Rms => "rms",
            NormKind::LayerNorm => "layernorm",
        }
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled_rms" => Ok(NormKind::ScaledRms),
            "rms" => Ok(NormKind::Rms),
            "layernorm" | "layer_norm" => Ok(NormKind::LayerNorm),
            other => Err(Error::Precondition(format!("unknown norm kind `{other}`"))),
        }
    }
}

/// Ground-truth final layer: `log_softmax(W (gamma * normalize(x) + beta))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalLayerParams {
    pub v: usize,
    pub d: usize,
    /// `v x d` unembedding.
    pub w: Mat<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub norm: NormKind,
    pub eps: f64,
    pub seed: u64,
    /// Number of rank-deficient draws that were discarded before this one.
    pub redraws: u32,
}

impl FinalLayerParams {
    /// Assembles parameters without the full-rank check (used for keys and
    /// degenerate fixtures).
    pub fn from_parts(
        w: Mat<f64>,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        norm: NormKind,
        eps: f64,
    ) -> Result<Self> {
        let (v, d) = (w.nrows(), w.ncols());
        if d == 0 || d >= v {
            return Err(Error::Precondition(format!(
                "need 0 < d < v, got d={d}, v={v}"
            )));
        }
        if gamma.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: gamma.len(),
            });
        }
        if beta.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: beta.len(),
            });
        }
        if gamma.iter().any(|g| *g == 0.0 || !g.is_finite()) {
            return Err(Error::Precondition("gamma must be finite and nonzero".into()));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::Precondition(format!("eps must be >= 0, got {eps}")));
        }
        Ok(Self {
            v,
            d,
            w,
            gamma,
            beta,
            norm,
            eps,
            seed: 0,
            redraws: 0,
        })
    }

    /// Logits for an already-normalized hidden state.
    pub fn logits_from_normalized(&self, xhat: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = xhat
            .iter()
            .zip(&self.gamma)
            .zip(&self.beta)
            .map(|((x, g), b)| g * x + b)
            .collect();
        linalg::matvec(self.w.as_ref(), &h)
    }

    /// `C W`: the unembedding with every column mean-subtracted.
    pub fn centered_unembedding(&self) -> Mat<f64> {
        let mut cw = self.w.clone();
        for j in 0..self.d {
            let mean = cw.col(j).iter().sum::<f64>() / self.v as f64;
            for i in 0..self.v {
                cw[(i, j)] -= mean;
            }
        }
        cw
    }

    pub fn radius(&self) -> f64 {
        self.norm.radius(self.d)
    }

    pub fn ellipse_dim(&self) -> usize {
        self.norm.ellipse_dim(self.d)
    }
}

/// Pre-normalization activation.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState(Vec<f64>);

impl HiddenState {
    pub fn new(x: Vec<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Precondition("hidden state must be non-empty".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("hidden state has non-finite entries".into()));
        }
        if x.iter().all(|v| *v == 0.0) {
            return Err(Error::Domain("hidden state is the zero vector".into()));
        }
        Ok(Self(x))
    }

    pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Self {
        loop {
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            if let Ok(h) = Self::new(x) {
                return h;
            }
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// `v x n` matrix whose columns are logprob vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LogprobMatrix {
    pub data: Mat<f64>,
    pub token_ids: Vec<u32>,
}

impl LogprobMatrix {
    pub const LSE_TOL: f64 = 1e-9;

    pub fn new(data: Mat<f64>, token_ids: Vec<u32>) -> Result<Self> {
        if token_ids.len() != data.nrows() {
            return Err(Error::DimensionMismatch {
                expected: data.nrows(),
                got: token_ids.len(),
            });
        }
        for j in 0..data.ncols() {
            let col = linalg::column(data.as_ref(), j);
            let lse = linalg::logsumexp(&col);
            if !(lse.abs() <= Self::LSE_TOL) {
                return Err(Error::Domain(format!(
                    "column {j} is not a logprob vector (logsumexp = {lse:e})"
                )));
            }
        }
        Ok(Self { data, token_ids })
    }

    pub fn from_columns(columns: &[Vec<f64>], token_ids: Vec<u32>) -> Result<Self> {
        let v = token_ids.len();
        if let Some(bad) = columns.iter().find(|c| c.len() != v) {
            return Err(Error::DimensionMismatch {
                expected: v,
                got: bad.len(),
            });
        }
        Self::new(linalg::from_columns(v, columns), token_ids)
    }

    pub fn v(&self) -> usize {
        self.data.nrows()
    }

    pub fn n(&self) -> usize {
        self.data.ncols()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        linalg::column(self.data.as_ref(), j)
    }

    pub fn select(&self, cols: &[usize]) -> Self {
        Self {
            data: Mat::from_fn(self.v(), cols.len(), |i, j| self.data[(i, cols[j])]),
            token_ids: self.token_ids.clone(),
        }
    }

    pub fn first(&self, n: usize) -> Self {
        let cols: Vec<usize> = (0..n.min(self.n())).collect();
        self.select(&cols)
    }
}

fn rng_for(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Draws a random final layer. `W ~ N(0, 1/d)`, `gamma ~ LogNormal(0, 0.25^2)`,
/// `beta ~ N(0, 1)`; rank-deficient draws are retried with `seed + 1`.
pub fn synth_model(v: usize, d: usize, norm: NormKind, eps: f64, seed: u64) -> Result<FinalLayerParams> {
    if d == 0 || d >= v {
        return Err(Error::Precondition(format!(
            "need 0 < d < v, got d={d}, v={v}"
        )));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Precondition(format!("eps must be >= 0, got {eps}")));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let gamma_dist = LogNormal::new(0.0, 0.25).expect("valid lognormal");
    for redraw in 0..MAX_REDRAWS {
        let mut rng = rng_for(seed.wrapping_add(redraw as u64));
        let w = Mat::from_fn(v, d, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        });
        let gamma: Vec<f64> = (0..d).map(|_| gamma_dist.sample(&mut rng)).collect();
        let beta: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let s = linalg::singular_values(w.as_ref())?;
        let full_rank = s.len() == d && s[d - 1] > RANK_FLOOR * s[0];
        if full_rank && gamma.iter().all(|g| *g != 0.0) {
            let mut params = FinalLayerParams::from_parts(w, gamma, beta, norm, eps)?;
            params.seed = seed;
            params.redraws = redraw;
            return Ok(params);
        }
    }
    Err(Error::Numerical(format!(
        "no full-rank unembedding after {MAX_REDRAWS} draws"
    )))
}

pub fn normalize(x: &HiddenState, norm: NormKind, eps: f64) -> Result<Vec<f64>> {
    let x = x.as_slice();
    let d = x.len() as f64;
    let (shift, denom) = match norm {
        NormKind::ScaledRms => {
            let ms = x.iter().map(|v| v * v).sum::<f64>() / d;
            (0.0, (d * (eps + ms)).sqrt())
        }
        NormKind::Rms => {
            let ms = x.iter().map(|v| v * v).sum::<f64>() / d;
            (0.0, (eps + ms).sqrt())
        }
        NormKind::LayerNorm => {
            let mean = x.iter().sum::<f64>() / d;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            (mean, (eps + var).sqrt())
        }
    };
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::Domain(format!(
            "{} normalization of a vector with zero scale",
            norm.as_str()
        )));
    }
    Ok(x.iter().map(|v| (v - shift) / denom).collect())
}

pub fn forward(params: &FinalLayerParams, x: &HiddenState) -> Result<Vec<f64>> {
    if x.dim() != params.d {
        return Err(Error::DimensionMismatch {
            expected: params.d,
            got: x.dim(),
        });
    }
    let xhat = normalize(x, params.norm, params.eps)?;
    Ok(linalg::log_softmax(&params.logits_from_normalized(&xhat)))
}

/// `n` outputs from i.i.d. standard-normal hidden states.
pub fn sample_outputs(params: &FinalLayerParams, n: usize, seed: u64) -> Result<LogprobMatrix> {
    if n == 0 {
        return Err(Error::Precondition("sample count must be at least 1".into()));
    }
    let mut rng = rng_for(seed);
    let mut columns = Vec::with_capacity(n);
    while columns.len() < n {
        let x = HiddenState::gaussian(&mut rng, params.d);
        match forward(params, &x) {
            Ok(col) => columns.push(col),
            Err(Error::Domain(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let token_ids = (0..params.v as u32).collect();
    LogprobMatrix::from_columns(&columns, token_ids)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Distribution of `||normalize(x)|| / radius` over random hidden states.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormHistogram {
    pub d: usize,
    pub eps: f64,
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub bins: Vec<HistogramBin>,
}

pub fn hidden_norm_histogram(
    params: &FinalLayerParams,
    n: usize,
    bins: usize,
    seed: u64,
) -> Result<NormHistogram> {
    if n == 0 || bins == 0 {
        return Err(Error::Precondition("need n >= 1 and bins >= 1".into()));
    }
    let mut rng = rng_for(seed);
    let radius = params.radius();
    let mut norms = Vec::with_capacity(n);
    while norms.len() < n {
        let x = HiddenState::gaussian(&mut rng, params.d);
        match normalize(&x, params.norm, params.eps) {
            Ok(xhat) => norms.push(linalg::norm2(&xhat) / radius),
            Err(Error::Domain(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let max = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = norms.iter().sum::<f64>() / n as f64;
    let width = (max - min) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|k| HistogramBin {
            lo: min + width * k as f64,
            hi: if k + 1 == bins { max } else { min + width * (k + 1) as f64 },
            count: 0,
        })
        .collect();
    for x in &norms {
        let k = if width > 0.0 {
            (((x - min) / width) as usize).min(bins - 1)
        } else {
            bins - 1
        };
        out[k].count += 1;
    }
    Ok(NormHistogram {
        d: params.d,
        eps: params.eps,
        n,
        mean,
        min,
        max,
        bins: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_full_rank_and_deterministic() {
        let a = synth_model(256, 16, NormKind::ScaledRms, 0.0, 7).unwrap();
        let b = synth_model(256, 16, NormKind::ScaledRms, 0.0, 7).unwrap();
        assert_eq!(a, b);
        let s = linalg::singular_values(a.w.as_ref()).unwrap();
        assert_eq!(s.len(), 16);
        assert!(s[15] > 1e-6 * s[0]);
        assert!(a.gamma.iter().all(|g| *g > 0.0));
    }

    #[test]
    fn synth_mirrors_small_layernorm_model() {
        let p = synth_model(2048, 64, NormKind::LayerNorm, 1e-5, 1).unwrap();
        assert_eq!((p.v, p.d, p.eps), (2048, 64, 1e-5));
        assert_eq!(p.ellipse_dim(), 63);
    }

    #[test]
    fn synth_rejects_square_model() {
        assert!(matches!(
            synth_model(16, 16, NormKind::ScaledRms, 0.0, 0),
            Err(Error::Precondition(_))
        ));
        assert!(synth_model(16, 4, NormKind::ScaledRms, -1.0, 0).is_err());
    }

    #[test]
    fn scaled_rms_keeps_direction_at_unit_length() {
        let x = HiddenState::new(vec![3.0, 4.0]).unwrap();
        let y = normalize(&x, NormKind::ScaledRms, 0.0).unwrap();
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn layernorm_of_constant_vector_is_domain_error() {
        let x = HiddenState::new(vec![1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            normalize(&x, NormKind::LayerNorm, 0.0),
            Err(Error::Domain(_))
        ));
        assert!(HiddenState::new(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn normalization_magnitudes() {
        let mut rng = rng_for(3);
        let x = HiddenState::gaussian(&mut rng, 64);
        let rms = normalize(&x, NormKind::Rms, 0.0).unwrap();
        assert!((linalg::norm2(&rms) - 8.0).abs() < 1e-12);
        let smoothed = normalize(&x, NormKind::Rms, 1e-5).unwrap();
        assert!(linalg::norm2(&smoothed) < 8.0);
        let ln = normalize(&x, NormKind::LayerNorm, 0.0).unwrap();
        assert!(ln.iter().sum::<f64>().abs() < 1e-12);
        assert!((linalg::norm2(&ln) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn zero_unembedding_gives_uniform_logprobs() {
        let p = FinalLayerParams::from_parts(
            Mat::zeros(8, 2),
            vec![1.0, 1.0],
            vec![0.5, -0.5],
            NormKind::ScaledRms,
            0.0,
        )
        .unwrap();
        let out = forward(&p, &HiddenState::new(vec![1.0, 2.0]).unwrap()).unwrap();
        for v in out {
            assert!((v + (8f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_scale_invariant_at_zero_eps() {
        let p = synth_model(64, 8, NormKind::ScaledRms, 0.0, 11).unwrap();
        let mut rng = rng_for(5);
        let x = HiddenState::gaussian(&mut rng, 8);
        let x2 = HiddenState::new(x.as_slice().iter().map(|v| 2.0 * v).collect()).unwrap();
        let a = forward(&p, &x).unwrap();
        let b = forward(&p, &x2).unwrap();
        for (u, w) in a.iter().zip(&b) {
            assert!((u - w).abs() < 1e-13);
        }
    }

    #[test]
    fn sample_outputs_edge_cases() {
        let p = synth_model(256, 16, NormKind::ScaledRms, 0.0, 2).unwrap();
        assert_eq!(sample_outputs(&p, 1, 0).unwrap().n(), 1);
        assert!(sample_outputs(&p, 0, 0).is_err());
        let a = sample_outputs(&p, 5, 9).unwrap();
        let b = sample_outputs(&p, 5, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn histogram_point_mass_without_smoothing() {
        let p = synth_model(64, 16, NormKind::ScaledRms, 0.0, 2).unwrap();
        let h = hidden_norm_histogram(&p, 500, 10, 1).unwrap();
        assert!((h.min - 1.0).abs() < 1e-14 && (h.max - 1.0).abs() < 1e-14);
        assert_eq!(h.bins.iter().map(|b| b.count).sum::<usize>(), 500);
    }

    #[test]
    fn histogram_mass_sits_just_inside_unit_norm() {
        let p = synth_model(128, 64, NormKind::LayerNorm, 1e-5, 2).unwrap();
        let h = hidden_norm_histogram(&p, 2000, 20, 1).unwrap();
        assert!(h.max < 1.0);
        assert!(h.min > 0.999);
        assert!(h.mean > 0.99999 && h.mean < 1.0);
    }

    #[test]
    fn wider_models_cluster_closer_to_one() {
        let small = synth_model(512, 16, NormKind::ScaledRms, 1e-5, 4).unwrap();
        let large = synth_model(512, 256, NormKind::ScaledRms, 1e-5, 4).unwrap();
        let hs = hidden_norm_histogram(&small, 4000, 20, 8).unwrap();
        let hl = hidden_norm_histogram(&large, 4000, 20, 8).unwrap();
        assert!(1.0 - hl.mean < 1.0 - hs.mean);
        assert!(hl.max - hl.min < hs.max - hs.min);
    }
}
