//! Versioned model snapshots: one CRC-framed binary image per version.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::codec::{frame_bytes, unframe, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::learner::UserLearnerState;
use crate::model::{FactorTable, FeatureParams, ModelSchema, ModelVersion, RbfBasis, WeightVector};

const MAGIC: &[u8; 8] = b"MSNAP\0\0\x01";
const TAG_MATERIALIZED: u8 = 0;
const TAG_COMPUTED: u8 = 1;

pub fn snapshot_path(model_dir: &Path, version: u64) -> PathBuf {
    model_dir.join(format!("snap-{version}.bin"))
}

/// Versions with a snapshot file in `model_dir`, ascending.
pub fn list_snapshots(model_dir: &Path) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(model_dir) {
        Ok(entries) => entries,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    for entry in entries {
        let name = entry?.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(v) = name.strip_prefix("snap-").and_then(|s| s.strip_suffix(".bin")) {
            if let Ok(v) = v.parse() {
                out.push(v);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

pub fn encode_version(v: &ModelVersion) -> Vec<u8> {
    let d = v.schema.dimension;
    let users = v.weights.len() + v.learners.len();
    let mut e = Encoder::with_capacity(64 + users * (d * d + 2 * d + 4) * 8);
    for &b in MAGIC {
        e.u8(b);
    }
    e.str(&v.schema.name);
    e.len(v.schema.dimension);
    e.f64(v.schema.lambda);
    e.f64(v.schema.alpha);
    e.u64(v.version);
    e.u64(v.log_seq);
    match v.params.as_ref() {
        FeatureParams::Materialized(table) => {
            e.u8(TAG_MATERIALIZED);
            e.len(table.dim());
            let rows = table.sorted_rows();
            e.len(rows.len());
            for (id, row) in rows {
                e.u64(id);
                e.f64s(row);
            }
        }
        FeatureParams::Computed(rbf) => {
            e.u8(TAG_COMPUTED);
            e.len(rbf.input_dim());
            e.f64s(&rbf.coefficients());
        }
    }
    e.len(v.weights.len());
    for (uid, w) in &v.weights {
        e.u64(*uid);
        e.f64s(w.as_slice());
    }
    e.len(v.learners.len());
    for (uid, s) in &v.learners {
        e.u64(*uid);
        e.len(s.dim());
        e.f64(s.lambda());
        e.u64(s.count());
        e.f64s(s.a_inv());
        e.f64s(s.b());
    }
    e.into_bytes()
}

pub fn decode_version(payload: &[u8]) -> Result<ModelVersion> {
    let mut d = Decoder::new(payload, "snapshot");
    for &b in MAGIC {
        if d.u8()? != b {
            return Err(Error::corrupt("snapshot", "bad magic"));
        }
    }
    let name = d.str()?;
    let dimension = d.len(0)?;
    let lambda = d.f64()?;
    let alpha = d.f64()?;
    let schema = ModelSchema {
        name,
        dimension,
        lambda,
        alpha,
    };
    let version = d.u64()?;
    let log_seq = d.u64()?;
    let params = match d.u8()? {
        TAG_MATERIALIZED => {
            let dim = d.len(0)?;
            let n = d.len(16)?;
            let mut table = FactorTable::new(dim);
            for _ in 0..n {
                let id = d.u64()?;
                table.insert(id, d.f64s()?)?;
            }
            FeatureParams::Materialized(table)
        }
        TAG_COMPUTED => {
            let input_dim = d.len(0)?;
            FeatureParams::Computed(RbfBasis::from_coefficients(input_dim, &d.f64s()?)?)
        }
        tag => return Err(Error::corrupt("snapshot", format!("unknown feature tag {tag}"))),
    };
    let mut weights = std::collections::BTreeMap::new();
    for _ in 0..d.len(16)? {
        let uid = d.u64()?;
        weights.insert(uid, WeightVector::new(d.f64s()?)?);
    }
    let mut learners = std::collections::BTreeMap::new();
    for _ in 0..d.len(40)? {
        let uid = d.u64()?;
        let dim = d.len(0)?;
        let lambda = d.f64()?;
        let count = d.u64()?;
        let a_inv = d.f64s()?;
        let b = d.f64s()?;
        learners.insert(uid, UserLearnerState::from_parts(dim, lambda, a_inv, b, count)?);
    }
    d.finish()?;
    let v = ModelVersion {
        schema,
        params: Arc::new(params),
        weights,
        learners,
        version,
        log_seq,
    };
    v.validate()?;
    Ok(v)
}

/// Write `snap-{version}.bin` atomically (temp file, sync, rename).
pub fn save_snapshot(model_dir: &Path, v: &ModelVersion) -> Result<PathBuf> {
    fs::create_dir_all(model_dir)?;
    let path = snapshot_path(model_dir, v.version);
    let tmp = path.with_extension("bin.tmp");
    let bytes = frame_bytes(&encode_version(v));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &path)?;
    sync_dir(model_dir);
    Ok(path)
}

pub fn load_snapshot(path: &Path) -> Result<ModelVersion> {
    let bytes = fs::read(path)?;
    decode_version(unframe(&bytes, "snapshot")?)
}

const ACTIVE_FILE: &str = "ACTIVE";

/// Record which version is live, atomically.
pub fn write_active(model_dir: &Path, version: u64) -> Result<()> {
    let path = model_dir.join(ACTIVE_FILE);
    let tmp = model_dir.join("ACTIVE.tmp");
    {
        let mut f = File::create(&tmp)?;
        writeln!(f, "{version}")?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &path)?;
    sync_dir(model_dir);
    Ok(())
}

pub fn read_active(model_dir: &Path) -> Result<Option<u64>> {
    match fs::read_to_string(model_dir.join(ACTIVE_FILE)) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::corrupt("ACTIVE file", format!("{s:?} is not a version number"))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn sync_dir(dir: &Path) {
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}
