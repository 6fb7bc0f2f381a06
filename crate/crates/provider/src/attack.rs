//! Two-phase harvesting: a handful of full vectors pin down the output
//! subspace, after which every further sample needs only `d + 1` tokens.

use ellsig_core::cost::{required_samples, Convention};
use ellsig_core::logits::{build_projections, estimate_rank, ProjectionPair, DEFAULT_RANK_TOL};
use ellsig_core::synth::LogprobMatrix;
use futures::stream::{self, StreamExt, TryStreamExt};

use crate::client::{ApiClient, AttackLedger};
use crate::error::{ProviderError, Result};
use crate::extract::{extract_full_logprobs, harvest_subset, reconstruct_from_subset, subset_anchor, DEFAULT_BOOST};

#[derive(Debug, Clone)]
pub struct AttackOptions {
    pub n_samples: usize,
    pub boost: f64,
    /// Hidden size if already known; otherwise discovered from the rank of
    /// the full vectors (costing one extra full vector).
    pub d: Option<usize>,
    pub rank_tol: f64,
    /// Samples harvested concurrently in the subset phase.
    pub concurrency: usize,
}

impl AttackOptions {
    pub fn new(n_samples: usize) -> Self {
        Self {
            n_samples,
            boost: DEFAULT_BOOST,
            d: None,
            rank_tol: DEFAULT_RANK_TOL,
            concurrency: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub samples: LogprobMatrix,
    pub ledger: AttackLedger,
    pub pair: ProjectionPair,
    pub d: usize,
    pub anchor: usize,
    pub full_vectors: usize,
    pub warnings: Vec<String>,
}

/// Distinct prompt for the `index`-th sample: `index + 1` written in
/// bijective base `v`, so lengths grow like `log_v(index)`.
pub fn prefix_for(index: u64, v: usize) -> Vec<u32> {
    let v = v as u64;
    let mut n = index + 1;
    let mut digits = Vec::new();
    while n > 0 {
        n -= 1;
        digits.push((n % v) as u32);
        n /= v;
    }
    digits.reverse();
    digits
}

fn vocab_ids(v: usize) -> Vec<u32> {
    (0..v as u32).collect()
}

pub async fn run_attack(client: &ApiClient, opts: &AttackOptions) -> Result<AttackResult> {
    let v = client.vocab;
    if opts.concurrency == 0 {
        return Err(ProviderError::Config("concurrency must be at least 1".into()));
    }
    if let Some(d) = opts.d {
        if d == 0 || d >= v {
            return Err(ProviderError::Config(format!("d must lie in [1, v), got {d}")));
        }
    }

    let mut full: Vec<Vec<f64>> = Vec::new();
    let d = loop {
        let prompt = prefix_for(full.len() as u64, v);
        full.push(extract_full_logprobs(client, &prompt, opts.boost).await?);
        match opts.d {
            Some(d) if full.len() >= d => break d,
            Some(_) => {}
            None if full.len() >= 2 => {
                let m = LogprobMatrix::from_columns(&full, vocab_ids(v))?;
                let rank = estimate_rank(&m, opts.rank_tol)?.rank;
                if rank < full.len() {
                    break rank;
                }
                if full.len() >= v {
                    return Err(ProviderError::Extraction("output rank never saturated".into()));
                }
            }
            None => {}
        }
    };
    tracing::info!(d, full_vectors = full.len(), "output subspace located");

    let phase1 = LogprobMatrix::from_columns(&full, vocab_ids(v))?;
    let pair = build_projections(&phase1, d)?;
    let anchor = subset_anchor(pair.a_inv.as_ref(), &pair.rows)?;

    let mut warnings = Vec::new();
    if d >= 2 {
        let needed = required_samples(d as u64, Convention::Text)?;
        if (opts.n_samples as u64) < needed {
            warnings.push(format!(
                "{} samples is below the {needed} an RMS-norm fit at d={d} needs",
                opts.n_samples
            ));
        }
    }

    let start = full.len();
    let pair_ref = &pair;
    let subset: Vec<Vec<f64>> = stream::iter(start..opts.n_samples.max(start))
        .map(|i| async move {
            let prompt = prefix_for(i as u64, v);
            let obs = harvest_subset(client, &prompt, &pair_ref.rows, anchor, opts.boost).await?;
            let l = reconstruct_from_subset(&obs, pair_ref.a_inv.as_ref())?;
            client.note_vector(false);
            Ok::<_, ProviderError>(l)
        })
        .buffered(opts.concurrency)
        .try_collect()
        .await?;

    let full_vectors = full.len();
    full.extend(subset);
    let samples = LogprobMatrix::from_columns(&full, vocab_ids(v))?;
    Ok(AttackResult {
        samples,
        ledger: client.ledger(),
        pair,
        d,
        anchor,
        full_vectors,
        warnings,
    })
}
