//! Run directories, manifests, and artifact files.
//!
//! Layout: `<out>/{config.json, checkpoint.json, train_log.csv, report.json,
//! manifest.json}`. Run ids are short hashes of the resolved inputs, so a
//! replay with identical inputs lands in the same directory and reproduces
//! identical artifact bytes (the manifest records wall-clock time and is the
//! one file allowed to differ).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MopdError, Result};
use crate::jsonio;
use crate::trainer::StepRecord;

/// A file the run consumed or produced, pinned by content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

impl FileRef {
    pub fn capture(path: &Path) -> Result<Self> {
        Ok(FileRef {
            path: path.display().to_string(),
            sha256: jsonio::file_sha256(path)?,
        })
    }
}

/// Provenance record for one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub resolved_config: serde_json::Value,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    pub duration_ms: u128,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        jsonio::write_json(&dir.join("manifest.json"), self)
    }
}

/// Deterministic short id from the resolved config plus input hashes.
pub fn run_id(command: &str, resolved_config: &serde_json::Value, input_hashes: &[&str]) -> Result<String> {
    let mut material = String::new();
    material.push_str(command);
    material.push('\n');
    material.push_str(&jsonio::to_json_string(resolved_config)?);
    for h in input_hashes {
        material.push('\n');
        material.push_str(h);
    }
    Ok(jsonio::sha256_hex(material.as_bytes())[..12].to_string())
}

/// Create the run directory; refuse to overwrite existing artifacts unless
/// forced.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(MopdError::invalid(format!(
                "output directory {} already has contents (use --force to overwrite)",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Default output root: `$MOPD_OUT` if set, otherwise `./runs`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os("MOPD_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Write the per-step training log: epoch, step, components, total, mean
/// gate entropy.
pub fn write_train_log(path: &Path, history: &[StepRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["epoch", "step", "ce", "mpd", "mps", "total", "gate_entropy"])?;
    for rec in history {
        writer.write_record([
            rec.epoch.to_string(),
            rec.step.to_string(),
            format!("{:.17e}", rec.breakdown.ce),
            format!("{:.17e}", rec.breakdown.mpd),
            format!("{:.17e}", rec.breakdown.mps),
            format!("{:.17e}", rec.breakdown.total),
            format!("{:.17e}", rec.gate_entropy),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_is_deterministic_and_input_sensitive() {
        let cfg = serde_json::json!({"alpha": 0.8});
        let a = run_id("train", &cfg, &["abc"]).unwrap();
        let b = run_id("train", &cfg, &["abc"]).unwrap();
        let c = run_id("train", &cfg, &["abd"]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 12);
    }

    #[test]
    fn prepare_dir_respects_force() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("run");
        prepare_dir(&target, false).unwrap();
        std::fs::write(target.join("x"), "1").unwrap();
        assert!(prepare_dir(&target, false).is_err());
        prepare_dir(&target, true).unwrap();
    }
}
