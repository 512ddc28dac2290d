//! Append-only observation log.
//!
//! Each record is one frame holding
//! `seq, timestamp_ms, model, uid, item, label, flags`. Sequence numbers start
//! at 1 and are gap-free. Opening a log truncates a torn final record left by
//! a crash.

use std::fs::{File, OpenOptions};
use std::io::{self, Cursor, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;

use super::codec::{read_frame, write_frame, Decoder, Encoder, FrameRead};
use crate::error::{Error, Result};
use crate::model::Observation;

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub seq: u64,
    pub model: String,
    pub observation: Observation,
}

/// When buffered records are handed to the operating system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum FlushPolicy {
    EveryRecord,
    EveryN(u32),
    IntervalMs(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LogOptions {
    pub flush: FlushPolicy,
    /// Also `fsync` on every flush.
    pub fsync: bool,
}

impl Default for LogOptions {
    fn default() -> Self {
        LogOptions {
            flush: FlushPolicy::EveryRecord,
            fsync: false,
        }
    }
}

const FLAG_EXPLORATORY: u8 = 1;

fn encode_record(seq: u64, model: &str, obs: &Observation) -> Vec<u8> {
    let mut e = Encoder::with_capacity(64 + model.len());
    e.u64(seq);
    e.u64(obs.timestamp_ms);
    e.str(model);
    e.u64(obs.uid);
    e.item(&obs.item);
    e.f64(obs.label);
    e.u8(if obs.exploratory { FLAG_EXPLORATORY } else { 0 });
    e.into_bytes()
}

fn decode_record(payload: &[u8]) -> Result<LogRecord> {
    let mut d = Decoder::new(payload, "log record");
    let seq = d.u64()?;
    let timestamp_ms = d.u64()?;
    let model = d.str()?;
    let uid = d.u64()?;
    let item = d.item()?;
    let label = d.f64()?;
    let flags = d.u8()?;
    d.finish()?;
    Ok(LogRecord {
        seq,
        model,
        observation: Observation {
            uid,
            item,
            label,
            timestamp_ms,
            exploratory: flags & FLAG_EXPLORATORY != 0,
        },
    })
}

/// Outcome of scanning a log image.
struct Scan {
    records: Vec<LogRecord>,
    /// Byte length of the valid prefix.
    valid_len: u64,
    torn: bool,
}

fn scan(bytes: &[u8]) -> Result<Scan> {
    let mut cursor = Cursor::new(bytes);
    let mut records = Vec::new();
    let mut valid_len = 0u64;
    loop {
        match read_frame(&mut cursor)? {
            FrameRead::Frame(payload) => {
                let rec = decode_record(&payload)?;
                let expected = records.last().map_or(1, |r: &LogRecord| r.seq + 1);
                if rec.seq != expected {
                    return Err(Error::corrupt("observation log", format!("sequence {} where {expected} expected", rec.seq)));
                }
                records.push(rec);
                valid_len = cursor.position();
            }
            FrameRead::End => return Ok(Scan { records, valid_len, torn: false }),
            FrameRead::Torn => return Ok(Scan { records, valid_len, torn: true }),
            // A bad final frame is a torn write; a bad frame followed by more
            // data is corruption.
            FrameRead::BadChecksum { stored, computed } => {
                if cursor.position() as usize == bytes.len() {
                    return Ok(Scan { records, valid_len, torn: true });
                }
                return Err(Error::ChecksumMismatch {
                    what: "observation log",
                    stored,
                    computed,
                });
            }
        }
    }
}

/// Read every complete record. A partially written final record is ignored.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    match std::fs::read(path) {
        Ok(bytes) => Ok(scan(&bytes)?.records),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

pub struct ObservationLog {
    path: PathBuf,
    model: String,
    file: File,
    options: LogOptions,
    pending: Vec<u8>,
    pending_records: u32,
    /// Bytes and last sequence number known to be written to the file.
    committed_len: u64,
    committed_seq: u64,
    next_seq: u64,
    last_flush: Instant,
    poisoned: bool,
}

impl ObservationLog {
    /// Open or create the log, returning it with the records it holds.
    pub fn open(path: &Path, model: &str, options: LogOptions) -> Result<(Self, Vec<LogRecord>)> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let bytes = std::fs::read(path)?;
        let scan = scan(&bytes)?;
        if scan.torn {
            log::warn!(
                "{}: truncating torn tail ({} bytes)",
                path.display(),
                bytes.len() as u64 - scan.valid_len
            );
            file.set_len(scan.valid_len)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        if let Some(r) = scan.records.iter().find(|r| r.model != model) {
            return Err(Error::corrupt("observation log", format!("record {} belongs to model {:?}", r.seq, r.model)));
        }
        let last = scan.records.last().map_or(0, |r| r.seq);
        let log = ObservationLog {
            path: path.to_path_buf(),
            model: model.to_string(),
            file,
            options,
            pending: Vec::new(),
            pending_records: 0,
            committed_len: scan.valid_len,
            committed_seq: last,
            next_seq: last + 1,
            last_flush: Instant::now(),
            poisoned: false,
        };
        Ok((log, scan.records))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Sequence number of the last appended record (0 when empty).
    pub fn last_seq(&self) -> u64 {
        self.next_seq - 1
    }

    /// Append one observation and return its sequence number. The record is
    /// handed to the operating system according to the flush policy before
    /// this returns. On error nothing is appended.
    pub fn append(&mut self, obs: &Observation) -> Result<u64> {
        if self.poisoned {
            return Err(Error::LogAppend(io::Error::other("log is poisoned by an earlier write failure")));
        }
        let seq = self.next_seq;
        let payload = encode_record(seq, &self.model, obs);
        write_frame(&mut self.pending, &payload).map_err(Error::LogAppend)?;
        self.pending_records += 1;
        self.next_seq += 1;
        let due = match self.options.flush {
            FlushPolicy::EveryRecord => true,
            FlushPolicy::EveryN(n) => self.pending_records >= n.max(1),
            FlushPolicy::IntervalMs(ms) => self.last_flush.elapsed() >= Duration::from_millis(ms),
        };
        if due {
            self.flush().map_err(|e| match e {
                Error::Io(io) => Error::LogAppend(io),
                other => other,
            })?;
        }
        Ok(seq)
    }

    /// Write buffered records to the file (and sync if configured).
    pub fn flush(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let result = self.file.write_all(&self.pending).and_then(|_| {
            if self.options.fsync {
                self.file.sync_data()
            } else {
                Ok(())
            }
        });
        match result {
            Ok(()) => {
                self.committed_len += self.pending.len() as u64;
                self.committed_seq = self.next_seq - 1;
                self.pending.clear();
                self.pending_records = 0;
                self.last_flush = Instant::now();
                Ok(())
            }
            Err(e) => {
                // Roll back to the committed prefix. Only a single pending
                // record can be dropped without losing acknowledged data.
                let single = self.pending_records == 1;
                let restored = self.file.set_len(self.committed_len).is_ok();
                self.pending.clear();
                self.pending_records = 0;
                self.next_seq = self.committed_seq + 1;
                if !(single && restored) {
                    self.poisoned = true;
                }
                Err(Error::Io(e))
            }
        }
    }
}

impl Drop for ObservationLog {
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            log::error!("{}: flush on close failed: {e}", self.path.display());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Item;

    fn obs(i: u64) -> Observation {
        Observation {
            uid: i % 7,
            item: if i % 3 == 0 { Item::raw(vec![i as f64, 0.5]) } else { Item::Id(i) },
            label: i as f64 * 0.25,
            timestamp_ms: 1_000 + i,
            exploratory: i % 2 == 0,
        }
    }

    #[test]
    fn append_assigns_gap_free_sequence_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m/log.bin");
        let (mut log, existing) = ObservationLog::open(&path, "m", LogOptions::default()).unwrap();
        assert!(existing.is_empty());
        assert_eq!(log.append(&obs(1)).unwrap(), 1);
        assert_eq!(log.append(&obs(2)).unwrap(), 2);
        let back = read_log(&path).unwrap();
        assert_eq!(back.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(back[0].observation, obs(1));
        assert_eq!(back[1].observation, obs(2));
        drop(log);

        let (mut log, existing) = ObservationLog::open(&path, "m", LogOptions::default()).unwrap();
        assert_eq!(existing.len(), 2);
        assert_eq!(log.append(&obs(3)).unwrap(), 3);
    }

    #[test]
    fn buffered_records_are_lost_only_up_to_the_policy() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.bin");
        let opts = LogOptions {
            flush: FlushPolicy::EveryN(10),
            fsync: false,
        };
        let (mut log, _) = ObservationLog::open(&path, "m", opts).unwrap();
        for i in 1..=1005 {
            log.append(&obs(i)).unwrap();
        }
        // Simulate a crash: skip the flush in Drop.
        std::mem::forget(log);
        let (log, records) = ObservationLog::open(&path, "m", opts).unwrap();
        assert_eq!(records.len(), 1000);
        assert_eq!(log.last_seq(), 1000);
    }

    #[test]
    fn torn_tail_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.bin");
        let (mut log, _) = ObservationLog::open(&path, "m", LogOptions::default()).unwrap();
        for i in 1..=5 {
            log.append(&obs(i)).unwrap();
        }
        drop(log);
        let full = std::fs::read(&path).unwrap();
        let good_len = full.len();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        // The first 30 bytes of a record: a valid length prefix, no checksum.
        f.write_all(&full[..30]).unwrap();
        drop(f);

        let (mut log, records) = ObservationLog::open(&path, "m", LogOptions::default()).unwrap();
        assert_eq!(records.len(), 5);
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, good_len);
        assert_eq!(log.append(&obs(6)).unwrap(), 6);
    }

    #[test]
    fn corruption_before_the_tail_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.bin");
        let (mut log, _) = ObservationLog::open(&path, "m", LogOptions::default()).unwrap();
        for i in 1..=3 {
            log.append(&obs(i)).unwrap();
        }
        drop(log);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[10] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ObservationLog::open(&path, "m", LogOptions::default()),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn foreign_records_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.bin");
        let (mut log, _) = ObservationLog::open(&path, "a", LogOptions::default()).unwrap();
        log.append(&obs(1)).unwrap();
        drop(log);
        assert!(ObservationLog::open(&path, "b", LogOptions::default()).is_err());
    }
}
