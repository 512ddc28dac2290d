//! MovieLens rating files.
//!
//! `dat` files hold `uid::item::rating::timestamp` lines. `csv` files have a
//! header row followed by `uid,item,rating,timestamp` records. Timestamps are
//! seconds since the epoch.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use modelserve_core::model::Observation;

pub const MIN_RATING: f64 = 0.5;
pub const MAX_RATING: f64 = 5.0;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("reading {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn parse_error(line: u64, message: impl Into<String>) -> IngestError {
    IngestError::Parse {
        line,
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Dat,
    Csv,
}

impl Format {
    /// Guess from the file extension.
    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()? {
            "dat" => Some(Format::Dat),
            "csv" => Some(Format::Csv),
            _ => None,
        }
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dat" => Ok(Format::Dat),
            "csv" => Ok(Format::Csv),
            _ => Err(format!("unknown format {s:?}, expected dat or csv")),
        }
    }
}

fn field<T: FromStr>(value: Option<&str>, name: &str, line: u64) -> Result<T, IngestError> {
    let value = value.ok_or_else(|| parse_error(line, format!("missing {name}")))?;
    value
        .trim()
        .parse()
        .map_err(|_| parse_error(line, format!("invalid {name} {value:?}")))
}

fn record<'a>(mut fields: impl Iterator<Item = &'a str>, line: u64) -> Result<Observation, IngestError> {
    let uid: u64 = field(fields.next(), "user id", line)?;
    let item: u64 = field(fields.next(), "item id", line)?;
    let rating: f64 = field(fields.next(), "rating", line)?;
    let seconds: u64 = field(fields.next(), "timestamp", line)?;
    if fields.next().is_some() {
        return Err(parse_error(line, "too many fields"));
    }
    if !(MIN_RATING..=MAX_RATING).contains(&rating) {
        return Err(parse_error(line, format!("rating {rating} outside [{MIN_RATING}, {MAX_RATING}]")));
    }
    let mut obs = Observation::new(uid, item, rating);
    obs.timestamp_ms = seconds.saturating_mul(1000);
    Ok(obs)
}

/// Parse one `dat` line; `line` is its 1-based number, used in errors.
pub fn parse_dat_line(text: &str, line: u64) -> Result<Observation, IngestError> {
    record(text.split("::"), line)
}

pub fn parse_dat(reader: impl BufRead) -> Result<Vec<Observation>, IngestError> {
    let mut out = Vec::new();
    for (i, text) in reader.lines().enumerate() {
        let line = i as u64 + 1;
        let text = text.map_err(|e| parse_error(line, e.to_string()))?;
        if text.trim().is_empty() {
            continue;
        }
        out.push(parse_dat_line(&text, line)?);
    }
    Ok(out)
}

pub fn parse_csv(reader: impl Read) -> Result<Vec<Observation>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for result in rdr.records() {
        let rec = result.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push(record(rec.iter(), line)?);
    }
    Ok(out)
}

pub fn parse(reader: impl Read, format: Format) -> Result<Vec<Observation>, IngestError> {
    match format {
        Format::Dat => parse_dat(BufReader::new(reader)),
        Format::Csv => parse_csv(reader),
    }
}

pub fn load(path: &Path, format: Format) -> Result<Vec<Observation>, IngestError> {
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse(file, format)
}

/// Default location written by `scripts/fetch_movielens.sh`, overridable with
/// `MODELSERVE_MOVIELENS`.
pub fn default_path() -> PathBuf {
    if let Some(p) = std::env::var_os("MODELSERVE_MOVIELENS") {
        return PathBuf::from(p);
    }
    let workspace = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    workspace.join("data/ml-100k/ratings.csv")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetStats {
    pub ratings: usize,
    pub users: usize,
    pub items: usize,
}

pub fn stats(observations: &[Observation]) -> DatasetStats {
    let users: HashSet<u64> = observations.iter().map(|o| o.uid).collect();
    let items: HashSet<u64> = observations.iter().filter_map(|o| o.item.id()).collect();
    DatasetStats {
        ratings: observations.len(),
        users: users.len(),
        items: items.len(),
    }
}
