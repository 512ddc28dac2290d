//! Little-endian field encoding and CRC-32 framing shared by the observation
//! log and snapshots.
//!
//! A frame is `[len: u32][payload; len][crc32(len ‖ payload): u32]`.

use std::io::{self, Read, Write};

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::{Item, RawInput};

pub(crate) const FRAME_OVERHEAD: usize = 8;

#[derive(Default)]
pub(crate) struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn with_capacity(n: usize) -> Self {
        Encoder {
            buf: Vec::with_capacity(n),
        }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.write_u64::<LittleEndian>(v).unwrap();
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.write_f64::<LittleEndian>(v).unwrap();
    }

    pub fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.len(vs.len());
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.len(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn item(&mut self, item: &Item) {
        match item {
            Item::Id(id) => {
                self.u8(0);
                self.u64(*id);
            }
            Item::Raw(RawInput(xs)) => {
                self.u8(1);
                self.f64s(xs);
            }
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Decoder { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| Error::corrupt(self.what, format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }

    /// A length prefix, bounded by the bytes left so corrupt input cannot
    /// request a huge allocation.
    pub fn len(&mut self, elem_size: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(elem_size.max(1) as u64) > left {
            return Err(Error::corrupt(self.what, format!("length {n} exceeds remaining {left} bytes")));
        }
        Ok(n as usize)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        let bytes = self.take(n * 8)?;
        let mut out = vec![0.0; n];
        LittleEndian::read_f64_into(bytes, &mut out);
        Ok(out)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::corrupt(self.what, "invalid utf-8"))
    }

    pub fn item(&mut self) -> Result<Item> {
        match self.u8()? {
            0 => Ok(Item::Id(self.u64()?)),
            1 => Ok(Item::Raw(RawInput(self.f64s()?))),
            tag => Err(Error::corrupt(self.what, format!("unknown item tag {tag}"))),
        }
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::corrupt(self.what, format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

fn frame_crc(len_bytes: &[u8; 4], payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(len_bytes);
    h.update(payload);
    h.finalize()
}

pub(crate) fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    let len_bytes = len.to_le_bytes();
    w.write_all(&len_bytes)?;
    w.write_all(payload)?;
    w.write_u32::<LittleEndian>(frame_crc(&len_bytes, payload))
}

pub(crate) fn frame_bytes(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + FRAME_OVERHEAD);
    write_frame(&mut out, payload).expect("writing to a Vec cannot fail");
    out
}

#[derive(Debug)]
pub(crate) enum FrameRead {
    Frame(Vec<u8>),
    /// Clean end of input at a frame boundary.
    End,
    /// End of input inside a frame.
    Torn,
    /// A complete frame whose checksum does not match.
    BadChecksum { stored: u32, computed: u32 },
}

pub(crate) fn read_frame<R: Read>(r: &mut R) -> io::Result<FrameRead> {
    let mut len_bytes = [0u8; 4];
    match read_full(r, &mut len_bytes)? {
        0 => return Ok(FrameRead::End),
        4 => {}
        _ => return Ok(FrameRead::Torn),
    }
    let len = u32::from_le_bytes(len_bytes) as usize;
    let mut payload = Vec::new();
    let got = r.by_ref().take(len as u64).read_to_end(&mut payload)?;
    if got < len {
        return Ok(FrameRead::Torn);
    }
    let mut crc = [0u8; 4];
    if read_full(r, &mut crc)? < 4 {
        return Ok(FrameRead::Torn);
    }
    let stored = u32::from_le_bytes(crc);
    let computed = frame_crc(&len_bytes, &payload);
    if stored != computed {
        return Ok(FrameRead::BadChecksum { stored, computed });
    }
    Ok(FrameRead::Frame(payload))
}

/// Verify and unwrap a buffer holding exactly one frame. The checksum is
/// checked before the length field is trusted.
pub(crate) fn unframe<'a>(bytes: &'a [u8], what: &'static str) -> Result<&'a [u8]> {
    if bytes.len() < FRAME_OVERHEAD {
        return Err(Error::corrupt(what, format!("{} bytes is shorter than a frame", bytes.len())));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = LittleEndian::read_u32(&bytes[bytes.len() - 4..]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { what, stored, computed });
    }
    let len = LittleEndian::read_u32(&body[..4]) as usize;
    if len != body.len() - 4 {
        return Err(Error::corrupt(what, format!("frame length {len} but {} payload bytes", body.len() - 4)));
    }
    Ok(&body[4..])
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}
