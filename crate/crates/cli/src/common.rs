//! Small helpers shared by the commands.

use std::path::Path;

use patchlab_core::io::load_checkpoint;
use patchlab_core::Checkpoint;
use patchlab_sweep::emit::{self, OutputMeta};
use serde::Serialize;
use serde_json::Value;

use crate::config::require_file;
use crate::error::{CliError, Result};

pub fn open_checkpoint(path: &Path) -> Result<Checkpoint> {
    require_file(path, "checkpoint")?;
    Ok(load_checkpoint(path)?)
}

pub fn meta(config: &Value, checkpoint_digest: &str, seed: u64) -> OutputMeta {
    OutputMeta::new(config, checkpoint_digest, seed)
}

/// Provenance for binary outputs that carry a string map.
pub fn notes(meta: &OutputMeta) -> std::collections::BTreeMap<String, String> {
    [
        ("tool", meta.tool.clone()),
        ("tool_version", meta.tool_version.clone()),
        ("config_digest", meta.config_digest.clone()),
        ("checkpoint_digest", meta.checkpoint_digest.clone()),
        ("seed", meta.seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    emit::write_atomic(path, text.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn write_json<T: Serialize>(
    path: &Path,
    meta: &OutputMeta,
    config: &Value,
    result: &T,
) -> Result<()> {
    write_text(path, &emit::to_json(meta, config, result)?)
}

pub fn write_csv(
    path: &Path,
    meta: &OutputMeta,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    write_text(path, &emit::csv_table(meta, header, rows)?)
}

pub fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// `"a:b"` as a half-open range.
pub fn parse_range(s: &str) -> Result<std::ops::Range<usize>> {
    let bad = || CliError::Config(format!("range {s:?} should look like 4:8"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let r = a.trim().parse().map_err(|_| bad())?..b.trim().parse().map_err(|_| bad())?;
    if r.is_empty() {
        return Err(bad());
    }
    Ok(r)
}

/// Set up logging and the rayon pool. `PATCHLAB_THREADS` overrides the
/// thread count.
pub fn init_runtime(verbose: u8) -> Result<()> {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    if let Ok(v) = std::env::var("PATCHLAB_THREADS") {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::Config(format!("PATCHLAB_THREADS={v:?} is not a positive integer"))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}
