//! Record framing for the warehouse log.
//!
//! ```text
//! ┌──────────┬──────────┬──────┬─────────────────────┐
//! │ body_len │  crc32   │ kind │       payload       │
//! └──────────┴──────────┴──────┴─────────────────────┘
//!     u32 LE     u32 LE    u8    body_len - 1 bytes
//! ```
//!
//! The checksum covers `kind` and `payload`. A record that is short or fails
//! its checksum marks the end of the valid log.

use std::fs::File;
use std::io::{self, BufReader, Read, Seek, SeekFrom};

use crate::grid::{Scale, SceneId, ThemeId, TileAddress};

pub(crate) const HEADER_LEN: u64 = 9;
/// Tile-insert payload bytes preceding the blob.
pub(crate) const INSERT_FIXED: u64 = 43;

pub(crate) const KIND_INSERT: u8 = 1;
pub(crate) const KIND_HIDE: u8 = 2;
pub(crate) const KIND_EVENT: u8 = 3;

/// Upper bound on a single record; anything larger is treated as a torn header.
const MAX_BODY: u32 = 256 << 20;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct InsertHeader {
    pub seq: u64,
    pub addr: TileAddress,
    pub orig_meta_tag: u64,
    pub blank_count: u32,
    /// Sequence of the record this one replaces, if any.
    pub replaces: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HideRecord {
    pub addr: TileAddress,
    pub hidden_seq: u64,
    pub by_seq: u64,
}

#[derive(Debug)]
pub(crate) enum Body {
    Insert { header: InsertHeader, blob_offset: u64, blob_len: u32 },
    Hide(HideRecord),
    Event(Vec<u8>),
}

#[derive(Debug)]
pub(crate) struct Frame {
    pub offset: u64,
    pub body: Body,
}

fn put_addr(buf: &mut Vec<u8>, a: &TileAddress) {
    buf.extend_from_slice(&a.theme.0.to_le_bytes());
    buf.push(a.scale.level());
    buf.extend_from_slice(&a.scene.0.to_le_bytes());
    buf.extend_from_slice(&a.x.to_le_bytes());
    buf.extend_from_slice(&a.y.to_le_bytes());
}

fn get_addr(b: &[u8]) -> Option<TileAddress> {
    Some(TileAddress {
        theme: ThemeId(u16::from_le_bytes(b[0..2].try_into().ok()?)),
        scale: Scale::new(b[2] as i32).ok()?,
        scene: SceneId(u32::from_le_bytes(b[3..7].try_into().ok()?)),
        x: u32::from_le_bytes(b[7..11].try_into().ok()?),
        y: u32::from_le_bytes(b[11..15].try_into().ok()?),
    })
}

fn frame(kind: u8, payload: &[u8]) -> Vec<u8> {
    let mut h = crc32fast::Hasher::new();
    h.update(&[kind]);
    h.update(payload);
    let crc = h.finalize();
    let mut out = Vec::with_capacity(HEADER_LEN as usize + payload.len());
    out.extend_from_slice(&(payload.len() as u32 + 1).to_le_bytes());
    out.extend_from_slice(&crc.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(payload);
    out
}

pub(crate) fn encode_insert(h: &InsertHeader, blob: &[u8]) -> Vec<u8> {
    let mut p = Vec::with_capacity(INSERT_FIXED as usize + blob.len());
    p.extend_from_slice(&h.seq.to_le_bytes());
    put_addr(&mut p, &h.addr);
    p.extend_from_slice(&h.orig_meta_tag.to_le_bytes());
    p.extend_from_slice(&h.blank_count.to_le_bytes());
    p.extend_from_slice(&h.replaces.unwrap_or(0).to_le_bytes());
    debug_assert_eq!(p.len() as u64, INSERT_FIXED);
    p.extend_from_slice(blob);
    frame(KIND_INSERT, &p)
}

pub(crate) fn encode_hide(r: &HideRecord) -> Vec<u8> {
    let mut p = Vec::with_capacity(31);
    put_addr(&mut p, &r.addr);
    p.extend_from_slice(&r.hidden_seq.to_le_bytes());
    p.extend_from_slice(&r.by_seq.to_le_bytes());
    frame(KIND_HIDE, &p)
}

pub(crate) fn encode_event(json: &[u8]) -> Vec<u8> {
    frame(KIND_EVENT, json)
}

/// Sequential reader over complete, checksummed frames.
pub(crate) struct LogReader {
    inner: BufReader<File>,
    pos: u64,
    end: u64,
}

impl LogReader {
    pub fn open(file: &File, from: u64) -> io::Result<Self> {
        let mut f = file.try_clone()?;
        let end = f.metadata()?.len();
        f.seek(SeekFrom::Start(from))?;
        Ok(LogReader { inner: BufReader::with_capacity(1 << 16, f), pos: from, end })
    }

    /// Offset just past the last complete frame returned.
    pub fn position(&self) -> u64 {
        self.pos
    }

    /// True if bytes remain after the last valid frame (a torn tail).
    pub fn has_trailing_bytes(&self) -> bool {
        self.pos < self.end
    }

    pub fn next_frame(&mut self) -> io::Result<Option<Frame>> {
        if self.end - self.pos < HEADER_LEN {
            return Ok(None);
        }
        let mut hdr = [0u8; HEADER_LEN as usize];
        self.inner.read_exact(&mut hdr)?;
        let body_len = u32::from_le_bytes(hdr[0..4].try_into().unwrap());
        let crc = u32::from_le_bytes(hdr[4..8].try_into().unwrap());
        let kind = hdr[8];
        if body_len == 0 || body_len > MAX_BODY || self.pos + HEADER_LEN - 1 + body_len as u64 > self.end {
            self.rewind()?;
            return Ok(None);
        }
        let mut payload = vec![0u8; body_len as usize - 1];
        self.inner.read_exact(&mut payload)?;
        let mut h = crc32fast::Hasher::new();
        h.update(&[kind]);
        h.update(&payload);
        if h.finalize() != crc {
            self.rewind_by(HEADER_LEN + payload.len() as u64)?;
            return Ok(None);
        }
        let offset = self.pos;
        let len = HEADER_LEN - 1 + body_len as u64;
        let body = match kind {
            KIND_INSERT if payload.len() as u64 >= INSERT_FIXED => {
                let p = &payload;
                let seq = u64::from_le_bytes(p[0..8].try_into().unwrap());
                let addr = get_addr(&p[8..23]);
                let orig_meta_tag = u64::from_le_bytes(p[23..31].try_into().unwrap());
                let blank_count = u32::from_le_bytes(p[31..35].try_into().unwrap());
                let replaces = u64::from_le_bytes(p[35..43].try_into().unwrap());
                let Some(addr) = addr else {
                    self.rewind_by(len)?;
                    return Ok(None);
                };
                Body::Insert {
                    header: InsertHeader {
                        seq,
                        addr,
                        orig_meta_tag,
                        blank_count,
                        replaces: (replaces != 0).then_some(replaces),
                    },
                    blob_offset: offset + HEADER_LEN + INSERT_FIXED,
                    blob_len: (payload.len() as u64 - INSERT_FIXED) as u32,
                }
            }
            KIND_HIDE if payload.len() == 31 => match get_addr(&payload[0..15]) {
                Some(addr) => Body::Hide(HideRecord {
                    addr,
                    hidden_seq: u64::from_le_bytes(payload[15..23].try_into().unwrap()),
                    by_seq: u64::from_le_bytes(payload[23..31].try_into().unwrap()),
                }),
                None => {
                    self.rewind_by(len)?;
                    return Ok(None);
                }
            },
            KIND_EVENT => Body::Event(payload),
            _ => {
                self.rewind_by(len)?;
                return Ok(None);
            }
        };
        self.pos += len;
        Ok(Some(Frame { offset, body }))
    }

    fn rewind(&mut self) -> io::Result<()> {
        self.rewind_by(HEADER_LEN)
    }

    fn rewind_by(&mut self, n: u64) -> io::Result<()> {
        self.inner.seek_relative(-(n as i64))
    }
}
