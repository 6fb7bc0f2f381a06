//! A message-authentication scheme whose secret key is a model ellipse and
//! whose tag is the position of a logprob vector.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg;
use crate::synth::{forward, FinalLayerParams, HiddenState, NormKind};
use crate::verify::{self, EllipseKey, VerificationReport, DEFAULT_TAU};

pub type Digest32 = [u8; 32];

#[derive(Debug, Clone)]
pub struct MacKey {
    pub key_id: String,
    pub params: FinalLayerParams,
    /// Unix seconds; informational only.
    pub created_at: u64,
    pub tau: f64,
    ellipse: EllipseKey,
}

impl MacKey {
    pub fn from_params(params: FinalLayerParams, created_at: u64, tau: f64) -> Result<Self> {
        let key_id = key_fingerprint(&params);
        let ellipse = EllipseKey::exact_with_tau(key_id.clone(), params.clone(), tau)?;
        Ok(Self {
            key_id,
            params,
            created_at,
            tau,
            ellipse,
        })
    }

    pub fn ellipse(&self) -> &EllipseKey {
        &self.ellipse
    }
}

/// First 16 bytes (hex) of SHA-256 over the shape, seed and parameters.
pub fn key_fingerprint(p: &FinalLayerParams) -> String {
    let mut h = Sha256::new();
    h.update((p.v as u64).to_le_bytes());
    h.update((p.d as u64).to_le_bytes());
    h.update(p.seed.to_le_bytes());
    for j in 0..p.d {
        for i in 0..p.v {
            h.update(p.w[(i, j)].to_le_bytes());
        }
    }
    for x in p.gamma.iter().chain(&p.beta) {
        h.update(x.to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

/// Random ellipse key: `W = Q diag(s) U^T` with orthonormal `Q` (`v x d`),
/// orthogonal `U`, log-normal `s`, unit `gamma` and Gaussian `beta`.
pub fn keygen(v: usize, d: usize, seed: u64) -> Result<MacKey> {
    if d == 0 || d >= v {
        return Err(Error::Precondition(format!("need 0 < d < v, got d={d}, v={v}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6d61_635f_6b65_7900);
    let gauss = |rng: &mut ChaCha20Rng, r: usize, c: usize| {
        Mat::from_fn(r, c, |_, _| StandardNormal.sample(&mut *rng))
    };
    let q = linalg::orthonormal_columns(gauss(&mut rng, v, d).as_ref());
    let u = linalg::orthonormal_columns(gauss(&mut rng, d, d).as_ref());
    let lognormal = LogNormal::new(0.0, 0.5).map_err(|e| Error::Numerical(e.to_string()))?;
    let s: Vec<f64> = (0..d).map(|_| lognormal.sample(&mut rng)).collect();
    let w = Mat::from_fn(v, d, |i, j| (0..d).map(|k| q[(i, k)] * s[k] * u[(j, k)]).sum());
    let beta: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut params = FinalLayerParams::from_parts(w, vec![1.0; d], beta, NormKind::ScaledRms, 0.0)?;
    params.seed = seed;
    let created_at = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|t| t.as_secs())
        .unwrap_or(0);
    MacKey::from_params(params, created_at, DEFAULT_TAU)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedMessage {
    pub logprob: Vec<f64>,
    pub key_id: String,
    pub sequence_index: u64,
}

/// `d` standard normals from SHA-256 of the message, extended in counter
/// mode and passed through Box-Muller.
pub fn message_state(message: &[u8], d: usize) -> HiddenState {
    let digest = Sha256::digest(message);
    let mut uniforms = Vec::with_capacity(d + 1);
    let mut counter = 0u32;
    while uniforms.len() < d + (d % 2) {
        let mut h = Sha256::new();
        h.update(digest);
        h.update(counter.to_le_bytes());
        counter += 1;
        for chunk in h.finalize().chunks_exact(8) {
            let bits = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            // 53-bit mantissa, shifted off zero
            uniforms.push(((bits >> 11) as f64 + 0.5) / (1u64 << 53) as f64);
        }
    }
    let mut x = Vec::with_capacity(d);
    for pair in uniforms.chunks_exact(2) {
        let r = (-2.0 * pair[0].ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * pair[1];
        x.push(r * t.cos());
        x.push(r * t.sin());
        if x.len() >= d {
            break;
        }
    }
    x.truncate(d);
    HiddenState::new(x).expect("Box-Muller output is finite")
}

pub fn sign(key: &MacKey, message: &[u8]) -> Result<SignedMessage> {
    sign_at(key, message, 0)
}

pub fn sign_at(key: &MacKey, message: &[u8], sequence_index: u64) -> Result<SignedMessage> {
    let x = message_state(message, key.params.d);
    Ok(SignedMessage {
        logprob: forward(&key.params, &x)?,
        key_id: key.key_id.clone(),
        sequence_index,
    })
}

/// SHA-256 over the vector length and each entry rounded to 12 significant
/// digits, little-endian.
pub fn canonical_digest(logprob: &[f64]) -> Digest32 {
    let mut h = Sha256::new();
    h.update((logprob.len() as u64).to_le_bytes());
    for &x in logprob {
        let rounded: f64 = format!("{x:.11e}").parse().unwrap_or(x);
        let rounded = if rounded == 0.0 { 0.0 } else { rounded };
        h.update(rounded.to_le_bytes());
    }
    h.finalize().into()
}

/// Set of digests of every accepted output, optionally backed by an
/// append-only file of raw 32-byte records.
#[derive(Debug, Default)]
pub struct ReplayStore {
    inner: Mutex<StoreInner>,
}

#[derive(Debug, Default)]
struct StoreInner {
    seen: HashSet<Digest32>,
    file: Option<File>,
    path: Option<PathBuf>,
}

impl ReplayStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut seen = HashSet::new();
        if path.exists() {
            let mut buf = Vec::new();
            File::open(&path)?.read_to_end(&mut buf)?;
            if buf.len() % 32 != 0 {
                return Err(Error::Format(format!(
                    "replay store {} has a truncated record",
                    path.display()
                )));
            }
            for rec in buf.chunks_exact(32) {
                seen.insert(rec.try_into().expect("32-byte record"));
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            inner: Mutex::new(StoreInner {
                seen,
                file: Some(file),
                path: Some(path),
            }),
        })
    }

    pub fn contains(&self, digest: &Digest32) -> bool {
        self.lock().seen.contains(digest)
    }

    /// Returns `true` when the digest was new.
    pub fn insert(&self, digest: Digest32) -> Result<bool> {
        let mut inner = self.lock();
        if !inner.seen.insert(digest) {
            return Ok(false);
        }
        if let Some(f) = inner.file.as_mut() {
            f.write_all(&digest)?;
            f.flush()?;
        }
        Ok(true)
    }

    /// Atomically inserts and reports whether the digest had been seen.
    fn check_and_record(&self, digest: Digest32, record: bool) -> Result<bool> {
        let mut inner = self.lock();
        let seen = inner.seen.contains(&digest);
        if record && !seen {
            inner.seen.insert(digest);
            if let Some(f) = inner.file.as_mut() {
                f.write_all(&digest)?;
                f.flush()?;
            }
        }
        Ok(seen)
    }

    pub fn len(&self) -> usize {
        self.lock().seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.lock().path.clone()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, StoreInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MacReport {
    #[serde(flatten)]
    pub report: VerificationReport,
    pub key_id_matches: bool,
    pub normalized: bool,
    pub replayed: bool,
    pub sequence_index: u64,
}

impl MacReport {
    /// Genuine and not seen before.
    pub fn accepted(&self) -> bool {
        self.report.passed && !self.replayed
    }
}

pub fn verify(key: &MacKey, msg: &SignedMessage, store: &ReplayStore, record: bool) -> Result<MacReport> {
    let key_id_matches = msg.key_id == key.key_id;
    let normalized = linalg::logsumexp(&msg.logprob).abs() <= 1e-9;
    let mut report = verify::verify(&msg.logprob, key.ellipse())?;
    report.passed = report.passed && key_id_matches && normalized;
    let replayed = store.check_and_record(canonical_digest(&msg.logprob), record)?;
    Ok(MacReport {
        report,
        key_id_matches,
        normalized,
        replayed,
        sequence_index: msg.sequence_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::{attribute, distance_to_ellipse};

    #[test]
    fn keygen_is_deterministic_and_checks_shape() {
        let a = keygen(128, 8, 1).unwrap();
        let b = keygen(128, 8, 1).unwrap();
        assert_eq!(a.key_id, b.key_id);
        assert_eq!(a.params, b.params);
        assert_ne!(keygen(128, 8, 2).unwrap().key_id, a.key_id);
        assert!(keygen(8, 8, 1).is_err());
    }

    #[test]
    fn different_keys_are_separated() {
        let a = keygen(128, 8, 1).unwrap();
        let b = keygen(128, 8, 2).unwrap();
        let keys = [a.ellipse().clone(), b.ellipse().clone()];
        for (k, msg) in [(&a, b"alpha".as_slice()), (&b, b"beta".as_slice())] {
            let s = sign(k, msg).unwrap();
            let r = attribute(&s.logprob, &keys).unwrap();
            assert_eq!(r.candidate_id, k.key_id);
            assert!(r.margin_log10.unwrap() >= 3.0);
        }
    }

    #[test]
    fn sign_and_verify() {
        let a = keygen(128, 8, 3).unwrap();
        let b = keygen(128, 8, 4).unwrap();
        let store = ReplayStore::in_memory();
        let s = sign(&a, b"hello").unwrap();
        assert_eq!(s, sign(&a, b"hello").unwrap());
        assert!(distance_to_ellipse(&s.logprob, a.ellipse()).unwrap() <= 1e-9);
        let first = verify(&a, &s, &store, true).unwrap();
        assert!(first.accepted());
        let again = verify(&a, &s, &store, true).unwrap();
        assert!(again.report.passed && again.replayed && !again.accepted());
        let mut cross = s.clone();
        cross.key_id = b.key_id.clone();
        assert!(!verify(&b, &cross, &store, false).unwrap().report.passed);
        let mut bumped = sign(&a, b"other").unwrap();
        bumped.logprob[5] += 1e-3;
        let lse = linalg::logsumexp(&bumped.logprob);
        bumped.logprob.iter_mut().for_each(|x| *x -= lse);
        assert!(!verify(&a, &bumped, &store, false).unwrap().report.passed);
    }

    #[test]
    fn store_persists_and_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.bin");
        let digest = canonical_digest(&[0.1, -0.2]);
        {
            let store = ReplayStore::open(&path).unwrap();
            assert!(store.insert(digest).unwrap());
            assert!(!store.insert(digest).unwrap());
        }
        let store = ReplayStore::open(&path).unwrap();
        assert!(store.contains(&digest));
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 32);
        std::fs::write(&path, [0u8; 33]).unwrap();
        assert!(ReplayStore::open(&path).is_err());
    }

    #[test]
    fn canonical_digest_ignores_tiny_float_noise() {
        let a = [-1.234567890123456, -0.5];
        let b = [-1.234567890123457, -0.5];
        assert_eq!(canonical_digest(&a), canonical_digest(&b));
        assert_ne!(canonical_digest(&a), canonical_digest(&[-1.2346, -0.5]));
        assert_eq!(canonical_digest(&[0.0]), canonical_digest(&[-0.0]));
    }

    #[test]
    fn message_state_is_gaussian_ish() {
        let x = message_state(b"stats", 4000);
        let s = x.as_slice();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s.len() as f64;
        assert!(mean.abs() < 0.1 && (var - 1.0).abs() < 0.1);
        assert_eq!(message_state(b"odd", 7).dim(), 7);
    }
}
