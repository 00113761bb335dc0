//! Artifact plumbing: atomic file writes, the run hash, and the
//! structured log line. Logs go to stderr so stdout stays parseable.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Write via a temporary sibling and rename, so a crash never leaves a
/// half-written artifact at the final path.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".into());
    let tmp = path.with_file_name(format!("{name}.tmp"));
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} into place", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Short content hash identifying a run's exact configuration.
pub fn run_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// One structured line per run: command, config hash, seed, version,
/// thread count. Everything needed to reproduce the run, nothing that
/// varies between identical runs.
pub fn log_run(command: &str, hash: &str, seed: u64, threads: usize) {
    eprintln!(
        "resonet {command}: config_hash={hash} seed={seed} version={} threads={threads}",
        env!("CARGO_PKG_VERSION"),
    );
}
