//! VFEA container: little-endian tensors with a trailing CRC32.
//!
//! ```text
//! "VFEA" | version u32 = 1 | kind u8 | count u32
//! per entry:
//!     id u32
//!     (kind 2 only) name_len u32, name bytes (UTF-8)
//!     rank u8, extents u32 × rank, payload f32 × product(extents)
//! crc32 u32 over every byte between the header and the checksum
//! ```
//!
//! Kind 0 holds a feature stack: visual layer `l` uses id `l`, depth layer
//! `l` uses `l | DEPTH_FLAG`. Kind 1 holds text embeddings, one rank-1 entry
//! per class id. Kind 2 holds named tensors (checkpoints, attention dumps).

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VFEA";
pub const VERSION: u32 = 1;
pub const DEPTH_FLAG: u32 = 0x8000_0000;
const HEADER_LEN: usize = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    FeatureStack = 0,
    TextBank = 1,
    Parameters = 2,
}

impl TryFrom<u8> for Kind {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Kind::FeatureStack),
            1 => Ok(Kind::TextBank),
            2 => Ok(Kind::Parameters),
            other => Err(Error::Format(format!("unknown VFEA kind {other}"))),
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::FeatureStack => "feature-stack",
            Kind::TextBank => "text-bank",
            Kind::Parameters => "parameters",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub id: u32,
    pub name: Option<String>,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Entry {
    pub fn new(id: u32, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            id,
            name: None,
            shape,
            data,
        }
    }

    pub fn named(id: u32, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            id,
            name: Some(name.into()),
            shape,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VfeaFile {
    pub kind: Kind,
    pub entries: Vec<Entry>,
}

impl VfeaFile {
    pub fn new(kind: Kind) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let numel: usize = e.shape.iter().product();
            if numel != e.data.len() {
                return Err(Error::dim(format!(
                    "entry {} has shape {:?} but {} values",
                    e.id,
                    e.shape,
                    e.data.len()
                )));
            }
            if e.shape.len() > u8::MAX as usize {
                return Err(Error::dim(format!("entry {} has rank {}", e.id, e.shape.len())));
            }
            out.extend_from_slice(&e.id.to_le_bytes());
            if self.kind == Kind::Parameters {
                let name = e.name.as_deref().unwrap_or("");
                out.extend_from_slice(&(name.len() as u32).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
            }
            out.push(e.shape.len() as u8);
            for &x in &e.shape {
                out.extend_from_slice(&(x as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[HEADER_LEN..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, expected \"VFEA\"".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Length(format!("header truncated at {} bytes", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version(format!("VFEA version {version} unsupported (expected {VERSION})")));
        }
        let kind = Kind::try_from(bytes[8])?;
        let count = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;

        let mut r = Reader {
            buf: bytes,
            pos: HEADER_LEN,
        };
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let id = r.u32()?;
            let name = if kind == Kind::Parameters {
                let n = r.u32()? as usize;
                let raw = r.take(n)?;
                Some(
                    String::from_utf8(raw.to_vec())
                        .map_err(|_| Error::Format(format!("entry {id}: name is not UTF-8")))?,
                )
            } else {
                None
            };
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &x| acc.checked_mul(x))
                .ok_or_else(|| Error::Length(format!("entry {id}: extents {shape:?} overflow")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Length("payload overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(Entry { id, name, shape, data });
        }
        let payload_end = r.pos;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(Error::Length(format!(
                "{} trailing bytes after checksum",
                bytes.len() - r.pos
            )));
        }
        let actual = crc32fast::hash(&bytes[HEADER_LEN..payload_end]);
        if stored != actual {
            return Err(Error::Format(format!(
                "crc mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        Ok(Self { kind, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// One-line-per-entry description used by `inspect-vfea`.
    pub fn summary(&self) -> String {
        let mut s = format!("kind={} entries={}\n", self.kind, self.entries.len());
        for e in &self.entries {
            let label = match (&e.name, self.kind) {
                (Some(n), _) => n.clone(),
                (None, Kind::FeatureStack) if e.id & DEPTH_FLAG != 0 => format!("depth[{}]", e.id & !DEPTH_FLAG),
                (None, Kind::FeatureStack) => format!("visual[{}]", e.id),
                (None, _) => format!("id {}", e.id),
            };
            s.push_str(&format!("  {label}: {:?}\n", e.shape));
        }
        s
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Length(format!(
                    "needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
