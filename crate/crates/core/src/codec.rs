//! Event file codecs.
//!
//! Binary layout (little endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `CCEV`                   |
//! | 4      | 2    | version, currently 1           |
//! | 6      | 2    | flags, must be 0               |
//! | 8      | 8    | event count (u64)              |
//! | 16     | 8    | layer gap, mm (f64)            |
//! | 24     | 16n  | records of f32 `dx dy e1 e2`   |
//!
//! The CSV form carries the header `dx_mm,dy_mm,e1_keV,e2_keV`; the gap is
//! supplied by the caller.

use std::fmt;

use thiserror::Error;

use crate::events::{EventList, FarFieldEvent};

pub const EVENT_MAGIC: &[u8; 4] = b"CCEV";
pub const EVENT_VERSION: u16 = 1;
pub const CSV_HEADER: [&str; 4] = ["dx_mm", "dy_mm", "e1_keV", "e2_keV"];
const HEADER_LEN: usize = 24;
const RECORD_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub enum FormatErrorKind {
    BadMagic,
    UnsupportedVersion(u16),
    UnsupportedFlags(u16),
    Truncated { needed: usize, available: usize },
    TrailingBytes(usize),
    NonFinite(&'static str),
    InvalidGap(f64),
    Csv(String),
}

impl fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadMagic => write!(f, "bad magic"),
            Self::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            Self::UnsupportedFlags(v) => write!(f, "unsupported flags {v:#06x}"),
            Self::Truncated { needed, available } => {
                write!(f, "truncated payload (needed {needed} bytes, {available} available)")
            }
            Self::TrailingBytes(n) => write!(f, "{n} trailing bytes"),
            Self::NonFinite(field) => write!(f, "non-finite value in field {field}"),
            Self::InvalidGap(g) => write!(f, "layer gap must be positive, got {g}"),
            Self::Csv(msg) => write!(f, "{msg}"),
        }
    }
}

/// Decoding failure. `offset` is a byte offset for binary input and a
/// 1-based line number for CSV input.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("format error at offset {offset}: {kind}")]
pub struct FormatError {
    pub offset: usize,
    pub kind: FormatErrorKind,
}

impl FormatError {
    pub fn new(offset: usize, kind: FormatErrorKind) -> Self {
        Self { offset, kind }
    }
}

/// Little-endian cursor that reports the failing offset.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(FormatError::new(self.pos, FormatErrorKind::Truncated { needed: n, available }));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<(), FormatError> {
        let rest = self.bytes.len() - self.pos;
        if rest != 0 {
            return Err(FormatError::new(self.pos, FormatErrorKind::TrailingBytes(rest)));
        }
        Ok(())
    }
}

/// Serializes to the binary layout. Event fields are narrowed to f32.
pub fn encode_events(list: &EventList) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * list.len());
    out.extend_from_slice(EVENT_MAGIC);
    out.extend_from_slice(&EVENT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(list.len() as u64).to_le_bytes());
    out.extend_from_slice(&list.gap_mm.to_le_bytes());
    for ev in &list.events {
        for v in [ev.dx, ev.dy, ev.e1, ev.e2] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_events(bytes: &[u8]) -> Result<EventList, FormatError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != EVENT_MAGIC {
        return Err(FormatError::new(0, FormatErrorKind::BadMagic));
    }
    let version = r.u16()?;
    if version != EVENT_VERSION {
        return Err(FormatError::new(4, FormatErrorKind::UnsupportedVersion(version)));
    }
    let flags = r.u16()?;
    if flags != 0 {
        return Err(FormatError::new(6, FormatErrorKind::UnsupportedFlags(flags)));
    }
    let count = r.u64()? as usize;
    let gap_mm = r.f64()?;
    if !(gap_mm > 0.0 && gap_mm.is_finite()) {
        return Err(FormatError::new(16, FormatErrorKind::InvalidGap(gap_mm)));
    }
    let available = bytes.len() - HEADER_LEN;
    match count.checked_mul(RECORD_LEN) {
        Some(needed) if needed <= available => {}
        _ => {
            return Err(FormatError::new(
                HEADER_LEN,
                FormatErrorKind::Truncated {
                    needed: count.saturating_mul(RECORD_LEN),
                    available,
                },
            ))
        }
    }
    let mut events = Vec::with_capacity(count);
    for _ in 0..count {
        let mut vals = [0f64; 4];
        for (k, name) in CSV_HEADER.iter().enumerate() {
            let at = r.pos();
            let v = r.f32()?;
            if !v.is_finite() {
                return Err(FormatError::new(at, FormatErrorKind::NonFinite(name)));
            }
            vals[k] = v as f64;
        }
        events.push(FarFieldEvent::new(vals[0], vals[1], vals[2], vals[3]));
    }
    r.finish()?;
    Ok(EventList::new(events, gap_mm))
}

/// CSV text with f32 values in shortest round-trip form.
pub fn write_csv(list: &EventList) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for ev in &list.events {
        let rec = [ev.dx, ev.dy, ev.e1, ev.e2].map(|v| (v as f32).to_string());
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

pub fn read_csv(text: &str, gap_mm: f64) -> Result<EventList, FormatError> {
    if !(gap_mm > 0.0 && gap_mm.is_finite()) {
        return Err(FormatError::new(0, FormatErrorKind::InvalidGap(gap_mm)));
    }
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(|e| FormatError::new(1, FormatErrorKind::Csv(e.to_string())))?;
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(FormatError::new(
            1,
            FormatErrorKind::Csv(format!("expected header {}", CSV_HEADER.join(","))),
        ));
    }
    let mut events = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| FormatError::new(line, FormatErrorKind::Csv(e.to_string())))?;
        if rec.len() != 4 {
            return Err(FormatError::new(
                line,
                FormatErrorKind::Csv(format!("expected 4 fields, found {}", rec.len())),
            ));
        }
        let mut vals = [0f64; 4];
        for (k, field) in rec.iter().enumerate() {
            let v: f32 = field.parse().map_err(|_| {
                FormatError::new(line, FormatErrorKind::Csv(format!("cannot parse {:?} as a number", field)))
            })?;
            if !v.is_finite() {
                return Err(FormatError::new(line, FormatErrorKind::NonFinite(CSV_HEADER[k])));
            }
            vals[k] = v as f64;
        }
        events.push(FarFieldEvent::new(vals[0], vals[1], vals[2], vals[3]));
    }
    Ok(EventList::new(events, gap_mm))
}
