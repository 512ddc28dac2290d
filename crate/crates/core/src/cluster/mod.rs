//! Sharding, the observation log and snapshots.
//!
//! On disk each model owns `{data-dir}/{model}/` holding `log.bin`,
//! `snap-{version}.bin` files and an `ACTIVE` pointer naming the live version.

mod codec;
pub mod log;
pub mod shard;
pub mod snapshot;

use std::path::{Path, PathBuf};

pub use self::log::{read_log, FlushPolicy, LogOptions, LogRecord, ObservationLog};
pub use shard::ShardMap;
pub use snapshot::{
    decode_version, encode_version, list_snapshots, load_snapshot, read_active, save_snapshot, snapshot_path,
    write_active,
};

pub const DATA_DIR_ENV: &str = "MODELSERVE_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data";

/// `MODELSERVE_DATA_DIR` if set, else the configured directory, else `data`.
pub fn resolve_data_dir(configured: Option<&Path>) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => configured.map_or_else(|| PathBuf::from(DEFAULT_DATA_DIR), Path::to_path_buf),
    }
}

pub fn model_dir(data_dir: &Path, model: &str) -> PathBuf {
    data_dir.join(model)
}

pub fn log_path(data_dir: &Path, model: &str) -> PathBuf {
    model_dir(data_dir, model).join("log.bin")
}
