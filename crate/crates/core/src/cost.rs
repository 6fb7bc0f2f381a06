//! Sample-count and query-cost projections for ellipse extraction, and
//! fit-time benchmarks with polynomial extrapolation.

use std::str::FromStr;

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{self, n_unknowns};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Counts unknowns of a `(d-1)`-dimensional ellipsoid.
    Table1,
    /// Counts unknowns of a `d`-dimensional ellipsoid.
    Text,
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Convention::Table1),
            "text" => Ok(Convention::Text),
            other => Err(Error::Precondition(format!(
                "unknown convention {other:?} (expected table1 or text)"
            ))),
        }
    }
}

/// `n(n+3)/2` with `n = d - 1` (table1) or `n = d` (text).
pub fn required_samples(d: u64, convention: Convention) -> Result<u64> {
    if d < 2 {
        return Err(Error::Precondition(format!("need d >= 2, got {d}")));
    }
    let n = match convention {
        Convention::Table1 => d - 1,
        Convention::Text => d,
    };
    Ok(n * (n + 3) / 2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostEstimate {
    pub d: u64,
    pub v: u64,
    pub top_k: u64,
    pub convention: Convention,
    pub samples: u64,
    /// Queries spent on the initial `d` full logprob vectors.
    pub discovery_queries: u64,
    pub queries_per_sample: u64,
    pub queries: u64,
    pub tokens_per_prompt: u64,
    pub prompt_tokens: u64,
    pub price_per_1k_tokens: f64,
    pub spend: f64,
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Smallest `t >= 1` with `v^t >= n`.
pub fn prefix_length(n: u64, v: u64) -> u64 {
    let mut t = 1u64;
    let mut cap = v as u128;
    while cap < n as u128 {
        cap = cap.saturating_mul(v as u128);
        t += 1;
    }
    t
}

/// Query and token projection for harvesting enough samples from an API
/// returning `top_k` logprobs per query.
pub fn estimate_cost(
    d: u64,
    v: u64,
    top_k: u64,
    price_per_1k_tokens: f64,
    convention: Convention,
) -> Result<CostEstimate> {
    if top_k < 2 || d >= v || !(price_per_1k_tokens >= 0.0) {
        return Err(Error::Precondition(format!(
            "need top_k >= 2, d < v and a non-negative price (top_k={top_k}, d={d}, v={v})"
        )));
    }
    let samples = required_samples(d, convention)?;
    let batch = top_k - 1;
    let discovery_queries = d * ceil_div(v, batch);
    let queries_per_sample = if top_k >= v { 1 } else { ceil_div(d, batch) };
    let queries = samples * queries_per_sample + discovery_queries;
    let tokens_per_prompt = prefix_length(samples, v);
    let prompt_tokens = samples * queries_per_sample * tokens_per_prompt + discovery_queries;
    Ok(CostEstimate {
        d,
        v,
        top_k,
        convention,
        samples,
        discovery_queries,
        queries_per_sample,
        queries,
        tokens_per_prompt,
        prompt_tokens,
        price_per_1k_tokens,
        spend: prompt_tokens as f64 * price_per_1k_tokens / 1000.0,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub d: usize,
    pub n: usize,
    pub median_seconds: f64,
    pub seconds: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Extrapolation {
    pub d: usize,
    pub seconds: f64,
    /// Always `"extrapolation"`: these numbers are model output, not measurements.
    pub kind: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Coefficients `c_0..c_6` of `seconds = sum c_k (d / d_scale)^k`, all non-negative.
    pub coefficients: Vec<f64>,
    pub d_scale: f64,
    pub extrapolations: Vec<Extrapolation>,
    pub threads: usize,
}

impl BenchReport {
    pub fn predict(&self, d: usize) -> f64 {
        poly_eval(&self.coefficients, d as f64 / self.d_scale)
    }

    /// Log-log slope of the median times between two benchmarked widths.
    pub fn slope(&self, d_lo: usize, d_hi: usize) -> Option<f64> {
        let lo = self.rows.iter().find(|r| r.d == d_lo)?;
        let hi = self.rows.iter().find(|r| r.d == d_hi)?;
        Some((hi.median_seconds / lo.median_seconds).ln() / (d_hi as f64 / d_lo as f64).ln())
    }
}

pub const MAX_BENCH_DIM: usize = 512;
pub const POLY_DEGREE: usize = 6;

fn poly_eval(c: &[f64], t: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, ci| acc * t + ci)
}

/// Points on a random ellipsoid in `R^d`.
pub fn ellipsoid_cloud(d: usize, n: usize, seed: u64) -> Mat<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let g = Mat::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let u = linalg::orthonormal_columns(g.as_ref());
    let s: Vec<f64> = (0..d).map(|k| 1.0 + k as f64 / d as f64).collect();
    let b: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut pts = Mat::zeros(n, d);
    for i in 0..n {
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let nz = linalg::norm2(&z);
        for r in 0..d {
            pts[(i, r)] = b[r] + (0..d).map(|k| u[(r, k)] * s[k] * z[k] / nz).sum::<f64>();
        }
    }
    pts
}

/// Times `fit_ellipsoid_specific` at each width on `ceil(oversample * d(d+3)/2)`
/// points, fits a non-negative degree-6 polynomial to the median times, and
/// evaluates it at `extrapolate_to`.
pub fn bench_fit(
    dims: &[usize],
    oversample: f64,
    repeats: usize,
    extrapolate_to: &[usize],
    seed: u64,
) -> Result<BenchReport> {
    if dims.is_empty() || repeats == 0 || !(oversample >= 1.0) {
        return Err(Error::Precondition(
            "need at least one width, one repeat and oversample >= 1".into(),
        ));
    }
    if dims.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Precondition("widths must be strictly ascending".into()));
    }
    if let Some(&big) = dims.iter().find(|&&d| !(2..=MAX_BENCH_DIM).contains(&d)) {
        return Err(Error::Precondition(format!(
            "width {big} outside the benchmark range 2..={MAX_BENCH_DIM}"
        )));
    }
    let mut rows = Vec::with_capacity(dims.len());
    for (k, &d) in dims.iter().enumerate() {
        let n = (oversample * n_unknowns(d) as f64).ceil() as usize;
        let pts = ellipsoid_cloud(d, n, seed.wrapping_add(k as u64));
        let mut seconds = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let (res, secs) = fit::timed_fit(pts.as_ref(), None);
            res?;
            seconds.push(secs);
        }
        let mut sorted = seconds.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if repeats % 2 == 1 {
            sorted[repeats / 2]
        } else {
            0.5 * (sorted[repeats / 2 - 1] + sorted[repeats / 2])
        };
        rows.push(BenchRow {
            d,
            n,
            median_seconds: median,
            seconds,
        });
    }
    let d_scale = *dims.last().expect("non-empty") as f64;
    let a = Mat::from_fn(rows.len(), POLY_DEGREE + 1, |i, k| {
        (rows[i].d as f64 / d_scale).powi(k as i32)
    });
    let y: Vec<f64> = rows.iter().map(|r| r.median_seconds).collect();
    let coefficients = nnls(&a, &y)?;
    let extrapolations = extrapolate_to
        .iter()
        .map(|&d| Extrapolation {
            d,
            seconds: poly_eval(&coefficients, d as f64 / d_scale),
            kind: "extrapolation".into(),
        })
        .collect();
    Ok(BenchReport {
        rows,
        coefficients,
        d_scale,
        extrapolations,
        threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    })
}

/// Lawson-Hanson non-negative least squares `min ||A x - y||, x >= 0`.
pub fn nnls(a: &Mat<f64>, y: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = (a.nrows(), a.ncols());
    if y.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: y.len() });
    }
    let mut x = vec![0.0; n];
    let mut passive = vec![false; n];
    let tol = 1e-12 * a.norm_l2().max(1.0) * linalg::norm2(y).max(1.0);
    let residual = |x: &[f64]| -> Vec<f64> {
        linalg::matvec(a.as_ref(), x)
            .iter()
            .zip(y)
            .map(|(ax, yi)| yi - ax)
            .collect()
    };
    let solve_passive = |passive: &[bool]| -> Result<Vec<f64>> {
        let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let sub = Mat::from_fn(m, idx.len(), |i, k| a[(i, idx[k])]);
        let p = linalg::pinv(sub.as_ref(), 1e-14)?;
        let z = linalg::matvec(p.as_ref(), y);
        let mut full = vec![0.0; n];
        for (k, &j) in idx.iter().enumerate() {
            full[j] = z[k];
        }
        Ok(full)
    };
    for _ in 0..(3 * n + 10) {
        let w = linalg::matvec_t(a.as_ref(), &residual(&x));
        let cand = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = cand else { break };
        passive[j] = true;
        loop {
            let z = solve_passive(&passive)?;
            if (0..n).filter(|&k| passive[k]).all(|k| z[k] > 0.0) {
                x = z;
                break;
            }
            let mut alpha = f64::INFINITY;
            for k in (0..n).filter(|&k| passive[k] && z[k] <= 0.0) {
                alpha = alpha.min(x[k] / (x[k] - z[k]));
            }
            for k in 0..n {
                x[k] += alpha * (z[k] - x[k]);
                if passive[k] && x[k] <= 1e-300 {
                    passive[k] = false;
                    x[k] = 0.0;
                }
            }
        }
    }
    Ok(x)
}
