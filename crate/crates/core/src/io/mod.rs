//! Persistence formats and configuration: the binary tensor container, the
//! dataset directory layout, the checkpoint file, and the TOML configuration
//! every command consumes. All writes go through a temp file renamed into
//! place.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod tensorfile;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::KrcConfig;
pub use dataset::{load_dataset, save_dataset, LoadedDataset};
pub use tensorfile::{load_tensor, save_tensor, Dtype};

use crate::error::Result;
use sha2::{Digest, Sha256};
use std::path::Path;

/// Write via a sibling temp file and an atomic rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Content hash identifying a run: configuration snapshot, seed, and command.
pub fn run_hash(config_snapshot: &str, seed: u64, command: &str) -> String {
    let mut h = Sha256::new();
    h.update(config_snapshot.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(command.as_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Minimal CSV writer: fixed column order, `Display` formatting (which
/// round-trips f64 exactly), no quoting (fields never contain separators).
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}
