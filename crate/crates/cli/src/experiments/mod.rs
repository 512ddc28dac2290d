//! Desk-scale experiments. Each is deterministic given its seed, apart from
//! wall-clock latency columns.

pub mod bandit;
pub mod drift;
pub mod hybrid;
pub mod latency;
pub mod zipf;

use modelserve_core::serving::{Server, ServerConfig};

/// A server rooted in a fresh temporary directory.
pub(crate) fn scratch_server(configure: impl FnOnce(&mut ServerConfig)) -> crate::Result<(tempfile::TempDir, Server)> {
    let dir = tempfile::tempdir()?;
    let mut cfg = ServerConfig::new(dir.path());
    configure(&mut cfg);
    let server = Server::new(cfg)?;
    Ok((dir, server))
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Nearest-rank percentile, `q` in `[0, 1]`.
pub(crate) fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}
