//! CSV emission: a header row, then one record per configuration point.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::Result;

pub fn write_rows<T: Serialize>(writer: impl Write, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Write to `path`, or to stdout when no path is given.
pub fn write_csv<T: Serialize>(path: Option<&Path>, rows: &[T]) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_rows(std::fs::File::create(p)?, rows)
        }
        None => write_rows(std::io::stdout().lock(), rows),
    }
}
