//! From raw logprobs to centered logits, the hidden width, and the
//! down/up-projection pair between `R^v` and `R^d`.

use std::collections::HashSet;

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::synth::LogprobMatrix;

pub const DEFAULT_RANK_TOL: f64 = 1e-6;
/// Minimum ratio between the singular values straddling the cutoff.
pub const MIN_RANK_GAP: f64 = 10.0;
/// Anchor blocks worse than this trigger pivoted selection.
pub const MAX_ANCHOR_CONDITION: f64 = 1e8;

/// `C = I - 11^T / v`, applied as mean subtraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CenteringOp {
    pub v: usize,
}

impl CenteringOp {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.v {
            return Err(Error::DimensionMismatch {
                expected: self.v,
                got: x.len(),
            });
        }
        Ok(center(x))
    }
}

pub fn center(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

pub fn center_columns(m: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = m.to_owned();
    let v = m.nrows() as f64;
    for j in 0..m.ncols() {
        let mean = m.col(j).iter().sum::<f64>() / v;
        for i in 0..m.nrows() {
            out[(i, j)] -= mean;
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankEstimate {
    pub rank: usize,
    pub rel_tol: f64,
    /// `s[rank-1] / s[rank]`; infinite when nothing sits below the cutoff.
    pub gap_ratio: f64,
    pub singular_values: Vec<f64>,
}

impl RankEstimate {
    pub fn is_ambiguous(&self) -> bool {
        self.gap_ratio < MIN_RANK_GAP
    }

    pub fn diagnostic(&self) -> Option<String> {
        self.is_ambiguous().then(|| {
            format!(
                "ambiguous rank {}: singular-value gap {:.2} around cutoff {:e} is below {MIN_RANK_GAP}",
                self.rank, self.gap_ratio, self.rel_tol
            )
        })
    }

    pub(crate) fn from_singular_values(s: Vec<f64>, rel_tol: f64) -> Self {
        let top = s.first().copied().unwrap_or(0.0);
        let cutoff = rel_tol * top;
        let rank = if top > 0.0 {
            s.iter().take_while(|x| **x > cutoff).count()
        } else {
            0
        };
        let gap_ratio = match (rank.checked_sub(1).map(|k| s[k]), s.get(rank)) {
            (Some(above), Some(&below)) if below > 0.0 => above / below,
            _ => f64::INFINITY,
        };
        Self {
            rank,
            rel_tol,
            gap_ratio,
            singular_values: s,
        }
    }
}

/// Numerical rank of the centered observation matrix.
pub fn estimate_rank(m: &LogprobMatrix, rel_tol: f64) -> Result<RankEstimate> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::Precondition(format!(
            "rel_tol must be in (0, 1), got {rel_tol}"
        )));
    }
    let cm = center_columns(m.data.as_ref());
    Ok(RankEstimate::from_singular_values(
        linalg::singular_values(cm.as_ref())?,
        rel_tol,
    ))
}

/// Rank of the centered observations after subtracting the first one: the
/// dimension of their affine hull. Layer-norm outputs report `d - 1` here.
pub fn affine_rank(m: &LogprobMatrix, rel_tol: f64) -> Result<RankEstimate> {
    if m.n() < 2 {
        return Err(Error::Precondition("affine rank needs two columns".into()));
    }
    let cm = center_columns(m.data.as_ref());
    let diffs = Mat::from_fn(m.v(), m.n() - 1, |i, j| cm[(i, j + 1)] - cm[(i, 0)]);
    Ok(RankEstimate::from_singular_values(
        linalg::singular_values(diffs.as_ref())?,
        rel_tol,
    ))
}

/// Down-projection `A` (a row selection of the centered vector) and its
/// up-projection `A^-` solved from `d` anchor observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPair {
    pub v: usize,
    pub d: usize,
    /// Coordinates kept by `A`; `0..d` unless pivoting was needed.
    pub rows: Vec<usize>,
    /// `v x d` up-projection.
    #[serde(with = "crate::fit::mat_serde")]
    pub a_inv: Mat<f64>,
    pub anchor_cols: Vec<usize>,
    pub block_condition: f64,
}

impl ProjectionPair {
    /// Builds the pair from explicit coordinate rows and anchor columns.
    pub fn from_anchors(m: &LogprobMatrix, rows: Vec<usize>, anchor_cols: Vec<usize>) -> Result<Self> {
        let cm = center_columns(m.data.as_ref());
        Self::from_centered(cm.as_ref(), rows, anchor_cols)
    }

    fn from_centered(cm: MatRef<'_, f64>, rows: Vec<usize>, anchor_cols: Vec<usize>) -> Result<Self> {
        let (v, n) = (cm.nrows(), cm.ncols());
        let d = rows.len();
        if anchor_cols.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: anchor_cols.len(),
            });
        }
        check_distinct(&rows, v, "coordinate row")?;
        check_distinct(&anchor_cols, n, "anchor column")?;
        let block = Mat::from_fn(d, d, |i, j| cm[(rows[i], anchor_cols[j])]);
        let anchors = Mat::from_fn(v, d, |i, j| cm[(i, anchor_cols[j])]);
        let (a_inv, block_condition) = if d == 0 {
            (Mat::zeros(v, 0), 1.0)
        } else {
            let cond = linalg::condition_number(block.as_ref())?;
            let at = linalg::solve_checked(
                block.transpose(),
                anchors.transpose(),
                "anchor block",
                MAX_ANCHOR_CONDITION,
            )?;
            (at.transpose().to_owned(), cond)
        };
        Ok(Self {
            v,
            d,
            rows,
            a_inv,
            anchor_cols,
            block_condition,
        })
    }

    /// `A C l`.
    pub fn down_project(&self, l: &[f64]) -> Result<Vec<f64>> {
        if l.len() != self.v {
            return Err(Error::DimensionMismatch {
                expected: self.v,
                got: l.len(),
            });
        }
        let c = center(l);
        Ok(self.rows.iter().map(|&r| c[r]).collect())
    }

    /// `A^- y`.
    pub fn up_project(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: y.len(),
            });
        }
        Ok(linalg::matvec(self.a_inv.as_ref(), y))
    }

    /// `||A^- A C l - C l|| / ||C l||`: how far `l` sits from the recovered column space.
    pub fn relative_residual(&self, l: &[f64]) -> Result<f64> {
        let c = center(l);
        let back = self.up_project(&self.down_project(l)?)?;
        let num = linalg::norm2(&back.iter().zip(&c).map(|(a, b)| a - b).collect::<Vec<_>>());
        let den = linalg::norm2(&c);
        Ok(if den > 0.0 { num / den } else { num })
    }
}

fn check_distinct(idx: &[usize], bound: usize, what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(idx.len());
    for &i in idx {
        if i >= bound {
            return Err(Error::Precondition(format!("{what} {i} out of range (< {bound})")));
        }
        if !seen.insert(i) {
            return Err(Error::Precondition(format!("duplicate {what} {i}")));
        }
    }
    Ok(())
}

/// Leading `d` coordinates and anchor columns; falls back to column-pivoted
/// selection of both when that block is ill-conditioned.
pub fn build_projections(m: &LogprobMatrix, d: usize) -> Result<ProjectionPair> {
    let (v, n) = (m.v(), m.n());
    if d > v || d > n {
        return Err(Error::Precondition(format!(
            "need d <= min(v, n), got d={d}, v={v}, n={n}"
        )));
    }
    let cm = center_columns(m.data.as_ref());
    match ProjectionPair::from_centered(cm.as_ref(), (0..d).collect(), (0..d).collect()) {
        Ok(pair) => return Ok(pair),
        Err(Error::Singular { .. }) => {}
        Err(e) => return Err(e),
    }
    let (anchor_cols, rows) = pivoted_selection(cm.as_ref(), d);
    ProjectionPair::from_centered(cm.as_ref(), rows, anchor_cols)
}

fn pivoted_selection(cm: MatRef<'_, f64>, d: usize) -> (Vec<usize>, Vec<usize>) {
    let col_qr = cm.col_piv_qr();
    let anchors: Vec<usize> = col_qr.P().arrays().0[..d].to_vec();
    let picked = Mat::from_fn(d, cm.nrows(), |i, j| cm[(j, anchors[i])]);
    let row_qr = picked.col_piv_qr();
    let rows: Vec<usize> = row_qr.P().arrays().0[..d].to_vec();
    (anchors, rows)
}

pub fn down_project(pair: &ProjectionPair, l: &[f64]) -> Result<Vec<f64>> {
    pair.down_project(l)
}
