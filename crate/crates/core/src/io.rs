//! On-disk formats: a binary dense-matrix container plus JSON headers for
//! models and logprob matrices. Sidecar paths are resolved relative to the
//! header's directory.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{FinalLayerParams, LogprobMatrix, NormKind};

pub const MATRIX_MAGIC: &[u8; 8] = b"ELSIGMAT";

/// Magic, `u32` rows, `u32` cols, then row-major little-endian `f64`.
pub fn write_matrix(path: impl AsRef<Path>, m: &Mat<f64>) -> Result<()> {
    let rows = u32::try_from(m.nrows()).map_err(|_| Error::Format("too many rows".into()))?;
    let cols = u32::try_from(m.ncols()).map_err(|_| Error::Format("too many columns".into()))?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Mat<f64>> {
    let path = path.as_ref();
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format(format!("{}: truncated matrix header", path.display())))?;
    if &head[..8] != MATRIX_MAGIC {
        return Err(Error::Format(format!("{}: bad matrix magic", path.display())));
    }
    let rows = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(head[12..16].try_into().expect("4 bytes")) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != rows * cols * 8 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes of data for {rows}x{cols}, found {}",
            path.display(),
            rows * cols * 8,
            body.len()
        )));
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Mat::from_fn(rows, cols, |i, j| vals[i * cols + j]))
}

fn resolve(header: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        header.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn sidecar_name(header: &Path, suffix: &str) -> String {
    let stem = header
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "matrix".into());
    format!("{stem}.{suffix}.bin")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelHeader {
    pub v: usize,
    pub d: usize,
    pub norm: NormKind,
    pub eps: f64,
    pub seed: u64,
    #[serde(default)]
    pub redraws: u32,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    #[serde(rename = "W")]
    pub w: String,
}

/// Writes `path` (JSON) and a sidecar `<stem>.W.bin` next to it.
pub fn save_model(path: impl AsRef<Path>, p: &FinalLayerParams) -> Result<()> {
    let path = path.as_ref();
    let w_name = sidecar_name(path, "W");
    write_matrix(resolve(path, &w_name), &p.w)?;
    let header = ModelHeader {
        v: p.v,
        d: p.d,
        norm: p.norm,
        eps: p.eps,
        seed: p.seed,
        redraws: p.redraws,
        gamma: p.gamma.clone(),
        beta: p.beta.clone(),
        w: w_name,
    };
    fs::write(path, serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FinalLayerParams> {
    let path = path.as_ref();
    let header: ModelHeader = serde_json::from_str(&fs::read_to_string(path)?)?;
    let w = read_matrix(resolve(path, &header.w))?;
    if w.nrows() != header.v || w.ncols() != header.d {
        return Err(Error::Format(format!(
            "W is {}x{}, header says {}x{}",
            w.nrows(),
            w.ncols(),
            header.v,
            header.d
        )));
    }
    let mut p = FinalLayerParams::from_parts(w, header.gamma, header.beta, header.norm, header.eps)?;
    p.seed = header.seed;
    p.redraws = header.redraws;
    Ok(p)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogprobHeader {
    pub v: usize,
    pub n: usize,
    pub token_ids: Vec<u32>,
    pub data: String,
}

/// Writes the JSON header at `path` and the `v x n` matrix as `<stem>.data.bin`.
pub fn save_logprobs(path: impl AsRef<Path>, m: &LogprobMatrix) -> Result<()> {
    let path = path.as_ref();
    let name = sidecar_name(path, "data");
    write_matrix(resolve(path, &name), &m.data)?;
    let header = LogprobHeader {
        v: m.v(),
        n: m.n(),
        token_ids: m.token_ids.clone(),
        data: name,
    };
    fs::write(path, serde_json::to_string(&header)?)?;
    Ok(())
}

pub fn load_logprobs(path: impl AsRef<Path>) -> Result<LogprobMatrix> {
    let path = path.as_ref();
    let header: LogprobHeader = serde_json::from_str(&fs::read_to_string(path)?)?;
    let data = read_matrix(resolve(path, &header.data))?;
    if data.nrows() != header.v || data.ncols() != header.n {
        return Err(Error::Format(format!(
            "logprob data is {}x{}, header says {}x{}",
            data.nrows(),
            data.ncols(),
            header.v,
            header.n
        )));
    }
    LogprobMatrix::new(data, header.token_ids)
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
