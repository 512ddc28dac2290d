//! `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors so that typos do not silently fall back to defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cluster::{resolve_data_dir, FlushPolicy};
use crate::lifecycle::ErrorSource;
use crate::serving::ServerConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for {key}: {reason}")]
    Value {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

/// Server settings plus the schema defaults used for models created by the CLI.
#[derive(Clone, Debug)]
pub struct Config {
    pub server: ServerConfig,
    pub listen: String,
    pub dimension: usize,
    pub lambda: f64,
    pub alpha: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            server: ServerConfig::new(resolve_data_dir(None)),
            listen: "127.0.0.1:8080".into(),
            dimension: 10,
            lambda: 0.1,
            alpha: 0.0,
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        line,
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn invalid(line: usize, key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::Value {
        line,
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

/// `every_record`, `every_n:N` or `interval_ms:T`.
fn parse_flush(line: usize, key: &str, value: &str) -> Result<FlushPolicy, ConfigError> {
    match value.split_once(':') {
        None if value == "every_record" => Ok(FlushPolicy::EveryRecord),
        Some(("every_n", n)) => Ok(FlushPolicy::EveryN(parse(line, key, n)?)),
        Some(("interval_ms", t)) => Ok(FlushPolicy::IntervalMs(parse(line, key, t)?)),
        _ => Err(invalid(line, key, value, "expected every_record, every_n:N or interval_ms:T")),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut c = Config::default();
        let mut data_dir: Option<PathBuf> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            let s = &mut c.server;
            match key {
                "data_dir" => data_dir = Some(PathBuf::from(value)),
                "listen" => c.listen = value.to_string(),
                "shards" => {
                    s.shards = parse(line, key, value)?;
                    if s.shards == 0 {
                        return Err(invalid(line, key, value, "must be positive"));
                    }
                }
                "queue_capacity" => s.queue_capacity = parse(line, key, value)?,
                "retain" => s.retain = parse(line, key, value)?,
                "warm_start" => s.warm_start = parse(line, key, value)?,
                "cache.enabled" => s.cache.enabled = parse(line, key, value)?,
                "cache.prediction_capacity" => s.cache.prediction_capacity = parse(line, key, value)?,
                "cache.feature_capacity" => s.cache.feature_capacity = parse(line, key, value)?,
                "log.flush" => s.log.flush = parse_flush(line, key, value)?,
                "log.fsync" => s.log.fsync = parse(line, key, value)?,
                "staleness.window" => s.staleness.window = parse(line, key, value)?,
                "staleness.min_window" => s.staleness.min_window = parse(line, key, value)?,
                "staleness.threshold" => s.staleness.threshold_slope = parse(line, key, value)?,
                "staleness.auto_retrain" => s.staleness.auto_retrain = parse(line, key, value)?,
                "staleness.source" => {
                    s.staleness.source = match value {
                        "all" => ErrorSource::All,
                        "exploratory" => ErrorSource::Exploratory,
                        _ => return Err(invalid(line, key, value, "expected all or exploratory")),
                    }
                }
                "als.iterations" => s.als.max_iterations = parse(line, key, value)?,
                "als.tolerance" => s.als.tolerance = parse(line, key, value)?,
                "als.seed" => s.als.seed = parse(line, key, value)?,
                "dimension" => c.dimension = parse(line, key, value)?,
                "lambda" => c.lambda = parse(line, key, value)?,
                "alpha" => c.alpha = parse(line, key, value)?,
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
            }
        }
        if c.server.cache.prediction_capacity == 0 || c.server.cache.feature_capacity == 0 {
            return Err(invalid(0, "cache", "0", "capacities must be positive"));
        }
        if c.server.staleness.window == 0 {
            return Err(invalid(0, "staleness.window", "0", "must be positive"));
        }
        c.server.data_dir = resolve_data_dir(data_dir.as_deref());
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        Config::parse(&std::fs::read_to_string(path)?)
    }
}
