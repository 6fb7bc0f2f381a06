//! Output path conventions and the MAC key file.

use std::fs;
use std::path::{Path, PathBuf};

use ellsig_core::io::{load_model, save_model};
use ellsig_core::mac::MacKey;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

/// `dir/stem.json` -> `dir/stem.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn ensure_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p),
        _ => Ok(()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct KeyFile {
    key_id: String,
    created_at: u64,
    tau: f64,
    /// Model header holding the secret parameters, relative to the key file.
    model: String,
}

/// Writes `path` plus `<stem>.model.json` and its weight sidecar; returns every file written.
pub fn save_key(path: &Path, key: &MacKey) -> Result<Vec<PathBuf>, Failure> {
    let model_path = sibling(path, "model.json");
    save_model(&model_path, &key.params)?;
    let file = KeyFile {
        key_id: key.key_id.clone(),
        created_at: key.created_at,
        tau: key.tau,
        model: model_path
            .file_name()
            .expect("sibling has a file name")
            .to_string_lossy()
            .into_owned(),
    };
    fs::write(path, serde_json::to_string_pretty(&file).map_err(ellsig_core::Error::from)?)?;
    Ok(vec![path.to_path_buf(), model_path.clone(), sibling(&model_path, "W.bin")])
}

pub fn load_key(path: &Path) -> Result<MacKey, Failure> {
    let file: KeyFile = ellsig_core::io::load_json(path)?;
    let model_path = path.parent().unwrap_or(Path::new(".")).join(&file.model);
    let key = MacKey::from_params(load_model(&model_path)?, file.created_at, file.tau)?;
    if key.key_id != file.key_id {
        return Err(ellsig_core::Error::Format(format!(
            "key file says {}, parameters fingerprint to {}",
            file.key_id, key.key_id
        ))
        .into());
    }
    Ok(key)
}
