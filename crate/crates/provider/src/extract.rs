//! Turning top-k responses into full logprob vectors.
//!
//! Every response shares one unknown normalizer, so the difference between
//! two returned values (after removing their biases) is a logit difference.
//! Holding one anchor token fixed across queries stitches these differences
//! into a full centered logit vector.

use std::collections::BTreeMap;

use ellsig_core::linalg::{self, logsumexp};
use ellsig_core::Error as CoreError;
use faer::{Mat, MatRef};

use crate::client::ApiClient;
use crate::error::{ProviderError, Result};

/// Additive boost for batched tokens, in natural-log units.
pub const DEFAULT_BOOST: f64 = 30.0;
/// Bias that removes already-seen tokens from the top-k when paging.
pub const MASK_BIAS: f64 = -1.0e4;
/// Largest condition number accepted for a row-restricted basis.
pub const MAX_SUBSET_CONDITION: f64 = 1e10;

/// Full length-`v` logprob vector for `prompt`.
///
/// With `boost > 0` tokens are surfaced `K-1` at a time by biasing them
/// upward next to an unbiased anchor. With `boost == 0` the top-k is paged by
/// masking tokens already seen.
pub async fn extract_full_logprobs(client: &ApiClient, prompt: &[u32], boost: f64) -> Result<Vec<f64>> {
    if !(boost.is_finite() && boost >= 0.0) {
        return Err(ProviderError::Config(format!("boost must be finite and >= 0, got {boost}")));
    }
    let rel = if boost > 0.0 {
        boosted(client, prompt, boost).await?
    } else {
        paged(client, prompt).await?
    };
    client.note_vector(true);
    let lse = logsumexp(&rel);
    Ok(rel.iter().map(|r| r - lse).collect())
}

fn pending(rel: &[Option<f64>]) -> Vec<u32> {
    rel.iter()
        .enumerate()
        .filter(|(_, r)| r.is_none())
        .map(|(i, _)| i as u32)
        .collect()
}

fn unwrap_all(rel: Vec<Option<f64>>) -> Vec<f64> {
    rel.into_iter().map(|r| r.expect("every token resolved")).collect()
}

async fn boosted(client: &ApiClient, prompt: &[u32], boost: f64) -> Result<Vec<f64>> {
    let (v, k) = (client.vocab, client.top_k);
    let mut rel: Vec<Option<f64>> = vec![None; v];
    let mut anchor: Option<u32> = None;
    let mut batch_size = k - 1;
    loop {
        let todo = pending(&rel);
        if todo.is_empty() {
            break;
        }
        let bias: BTreeMap<u32, f64> = todo.iter().take(batch_size).map(|&t| (t, boost)).collect();
        let resp = client.complete(prompt, k, &bias).await?;
        let a = match anchor {
            Some(a) => a,
            None => {
                let top = resp
                    .iter()
                    .find(|e| !bias.contains_key(&e.token_id))
                    .ok_or_else(|| ProviderError::Extraction("no unbiased token in first response".into()))?;
                top.token_id
            }
        };
        let Some(a_val) = resp.iter().find(|e| e.token_id == a).map(|e| e.value) else {
            if batch_size == 1 {
                return Err(ProviderError::Extraction(format!(
                    "anchor token {a} evicted even with a single boosted token"
                )));
            }
            batch_size = (batch_size / 2).max(1);
            continue;
        };
        let mut progress = false;
        for e in &resp {
            let slot = &mut rel[e.token_id as usize];
            if slot.is_none() {
                *slot = Some(e.value - bias.get(&e.token_id).copied().unwrap_or(0.0) - a_val);
                progress = true;
            }
        }
        if anchor.is_none() {
            // Unseen tokens all sit below the best unbiased one, so the largest
            // resolved logit is the global maximum and stays in every top-k.
            let (best, &shift) = rel
                .iter()
                .enumerate()
                .filter_map(|(i, r)| r.as_ref().map(|r| (i, r)))
                .max_by(|x, y| x.1.total_cmp(y.1))
                .expect("first response resolves tokens");
            for r in rel.iter_mut().flatten() {
                *r -= shift;
            }
            anchor = Some(best as u32);
        }
        if !progress {
            if batch_size == 1 {
                return Err(ProviderError::Extraction(format!(
                    "boost {boost} too small to surface token {}",
                    todo[0]
                )));
            }
            batch_size = (batch_size / 2).max(1);
        }
    }
    Ok(unwrap_all(rel))
}

async fn paged(client: &ApiClient, prompt: &[u32]) -> Result<Vec<f64>> {
    let (v, k) = (client.vocab, client.top_k);
    let mut rel: Vec<Option<f64>> = vec![None; v];
    let mut anchor: Option<u32> = None;
    while !pending(&rel).is_empty() {
        let bias: BTreeMap<u32, f64> = rel
            .iter()
            .enumerate()
            .filter(|(i, r)| r.is_some() && Some(*i as u32) != anchor)
            .map(|(i, _)| (i as u32, MASK_BIAS))
            .collect();
        let resp = client.complete(prompt, k, &bias).await?;
        let a = *anchor.get_or_insert(resp[0].token_id);
        let a_val = resp
            .iter()
            .find(|e| e.token_id == a)
            .map(|e| e.value)
            .ok_or_else(|| ProviderError::Extraction(format!("anchor token {a} left the top-k while paging")))?;
        let mut progress = false;
        for e in resp.iter().filter(|e| !bias.contains_key(&e.token_id)) {
            let slot = &mut rel[e.token_id as usize];
            if slot.is_none() {
                *slot = Some(e.value - a_val);
                progress = true;
            }
        }
        if !progress {
            return Err(ProviderError::Extraction("paging made no progress".into()));
        }
    }
    Ok(unwrap_all(rel))
}

/// Token outside `rows` that best conditions the `(d+1)`-token subset
/// `rows ∪ {anchor}` for [`reconstruct_from_subset`].
pub fn subset_anchor(basis: MatRef<'_, f64>, rows: &[usize]) -> Result<usize> {
    let (v, r) = (basis.nrows(), basis.ncols());
    (0..v)
        .filter(|i| !rows.contains(i))
        .map(|i| {
            let s: f64 = (0..r).map(|j| basis[(i, j)]).sum();
            (i, (1.0_f64 - s).abs())
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| ProviderError::Config("no token left to serve as anchor".into()))
}

/// Anchor-relative logprobs of `rows ∪ {anchor}` from boosted queries.
pub async fn harvest_subset(
    client: &ApiClient,
    prompt: &[u32],
    rows: &[usize],
    anchor: usize,
    boost: f64,
) -> Result<Vec<(usize, f64)>> {
    if !(boost.is_finite() && boost > 0.0) {
        return Err(ProviderError::Config("subset harvesting needs a positive boost".into()));
    }
    let k = client.top_k;
    let mut out = vec![(anchor, 0.0)];
    let mut todo: Vec<usize> = rows.to_vec();
    let mut batch_size = k - 1;
    while !todo.is_empty() {
        let batch: Vec<usize> = todo.iter().take(batch_size).copied().collect();
        let mut bias: BTreeMap<u32, f64> = batch.iter().map(|&t| (t as u32, boost)).collect();
        bias.insert(anchor as u32, boost);
        let resp = client.complete(prompt, k, &bias).await?;
        let a_val = resp.iter().find(|e| e.token_id as usize == anchor).map(|e| e.value);
        let mut got = Vec::new();
        if let Some(a_val) = a_val {
            for e in resp.iter().filter(|e| batch.contains(&(e.token_id as usize))) {
                got.push((e.token_id as usize, e.value - a_val));
            }
        }
        if got.is_empty() {
            if batch_size == 1 {
                return Err(ProviderError::Extraction(format!(
                    "boost {boost} cannot keep anchor {anchor} and token {} in the top-k",
                    batch[0]
                )));
            }
            batch_size = (batch_size / 2).max(1);
            continue;
        }
        todo.retain(|t| !got.iter().any(|(g, _)| g == t));
        out.extend(got);
    }
    Ok(out)
}

/// Fills in a full logprob vector from a few observed entries and a basis of
/// the centered column space (`v x r`).
///
/// With `|S| >= r + 1` the observations may carry an unknown common shift
/// (anchor-relative values work); the coefficients and shift come from one
/// linear solve. With `|S| == r` they must be true logprobs, and the shift is
/// the root of `logsumexp(p(t)) = 0`.
pub fn reconstruct_from_subset(observed: &[(usize, f64)], basis: MatRef<'_, f64>) -> Result<Vec<f64>> {
    let (v, r) = (basis.nrows(), basis.ncols());
    let mut seen = vec![false; v];
    for &(t, val) in observed {
        if t >= v {
            return Err(CoreError::Precondition(format!("token {t} outside vocabulary of {v}")).into());
        }
        if std::mem::replace(&mut seen[t], true) {
            return Err(CoreError::Precondition(format!("token {t} observed twice")).into());
        }
        if !val.is_finite() {
            return Err(CoreError::Domain(format!("observed value for token {t} is not finite")).into());
        }
    }
    let m = observed.len();
    if m < r {
        return Err(CoreError::Underdetermined { needed: r, achieved: m }.into());
    }
    let obs: Vec<f64> = observed.iter().map(|o| o.1).collect();
    let p = if m > r {
        let design = Mat::from_fn(m, r + 1, |i, j| if j < r { basis[(observed[i].0, j)] } else { 1.0 });
        check_subset(design.as_ref())?;
        let x = linalg::matvec(linalg::pinv(design.as_ref(), 1e-14)?.as_ref(), &obs);
        linalg::matvec(basis, &x[..r])
    } else {
        root_normalized(observed, basis, &obs)?
    };
    let lse = logsumexp(&p);
    Ok(p.iter().map(|x| x - lse).collect())
}

fn check_subset(design: MatRef<'_, f64>) -> Result<()> {
    let cond = linalg::condition_number(design)?;
    if !(cond <= MAX_SUBSET_CONDITION) {
        return Err(CoreError::Singular {
            what: "row-restricted basis; choose a different token subset".into(),
            condition: cond,
        }
        .into());
    }
    Ok(())
}

fn root_normalized(observed: &[(usize, f64)], basis: MatRef<'_, f64>, obs: &[f64]) -> Result<Vec<f64>> {
    let r = basis.ncols();
    let bs = Mat::from_fn(r, r, |i, j| basis[(observed[i].0, j)]);
    let rhs = Mat::from_fn(r, 2, |i, j| if j == 0 { obs[i] } else { 1.0 });
    let sol = linalg::solve_checked(bs.as_ref(), rhs.as_ref(), "row-restricted basis; choose a different token subset",
        MAX_SUBSET_CONDITION)?;
    let a = linalg::matvec(basis, &linalg::column(sol.as_ref(), 0));
    let bg = linalg::matvec(basis, &linalg::column(sol.as_ref(), 1));
    let g: Vec<f64> = bg.iter().map(|x| 1.0 - x).collect();
    let f = |t: f64| logsumexp(&a.iter().zip(&g).map(|(a, g)| a + t * g).collect::<Vec<_>>());
    let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-12 * scale.max(1.0);
    let rising = g.iter().all(|&x| x >= -tol);
    let falling = g.iter().all(|&x| x <= tol);
    if rising == falling {
        return Err(CoreError::Underdetermined { needed: r + 1, achieved: r }.into());
    }
    let dir = if rising { 1.0 } else { -1.0 };
    // h(s) = f(dir * s) is nondecreasing; bracket its zero and bisect.
    let h = |s: f64| f(dir * s);
    let (mut lo, mut hi) = (-1.0, 1.0);
    let mut grow = 0;
    while h(lo) > 0.0 || h(hi) < 0.0 {
        if h(lo) > 0.0 {
            lo *= 2.0;
        }
        if h(hi) < 0.0 {
            hi *= 2.0;
        }
        grow += 1;
        if grow > 200 {
            return Err(CoreError::NoConvergence {
                iterations: grow,
                objective: h(hi),
                best: None,
            }
            .into());
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = dir * 0.5 * (lo + hi);
    Ok(a.iter().zip(&g).map(|(a, g)| a + t * g).collect())
}
