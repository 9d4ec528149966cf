//! Binary checkpoint container.
//!
//! Layout, all integers little-endian: magic `APB2`, u32 version, u32 entry
//! count, then per entry: u16 name length, UTF-8 name, u8 rank, rank × u32
//! dims, u8 dtype tag, raw data. Tag 0 is f32; tag 1 is raw bytes and holds
//! the reserved `meta.*` entries (config echo, counters).

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"APB2";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_BYTES: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn push_f32(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<f32>) {
        self.entries.push(Entry {
            name: name.into(),
            dims: dims.to_vec(),
            payload: Payload::F32(data),
        });
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, data: Vec<u8>) {
        self.entries.push(Entry {
            name: name.into(),
            dims: vec![data.len()],
            payload: Payload::Bytes(data),
        });
    }

    pub fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| bad(format!("missing entry {name:?}")))
    }

    pub fn f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let e = self.entry(name)?;
        match &e.payload {
            Payload::F32(d) => Ok((&e.dims, d)),
            Payload::Bytes(_) => Err(bad(format!("entry {name:?} is not f32"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.entry(name)?.payload {
            Payload::Bytes(d) => Ok(d),
            Payload::F32(_) => Err(bad(format!("entry {name:?} is not a byte entry"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        let b = self.bytes(name)?;
        Ok(u64::from_le_bytes(b.try_into().map_err(|_| bad(format!("entry {name:?} is not a u64")))?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {}", e.name)))?;
            let rank = u8::try_from(e.dims.len()).map_err(|_| bad(format!("rank too large: {}", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(rank);
            for &d in &e.dims {
                let d = u32::try_from(d).map_err(|_| bad(format!("dim too large: {}", e.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            let count: usize = e.dims.iter().product();
            match &e.payload {
                Payload::F32(data) => {
                    if data.len() != count {
                        return Err(bad(format!("entry {} holds {} values for dims {:?}", e.name, data.len(), e.dims)));
                    }
                    out.push(DTYPE_F32);
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Payload::Bytes(data) => {
                    if data.len() != count {
                        return Err(bad(format!("entry {} holds {} bytes for dims {:?}", e.name, data.len(), e.dims)));
                    }
                    out.push(DTYPE_BYTES);
                    out.extend_from_slice(data);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).map_err(|_| bad("not a checkpoint (bad magic)"))? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| bad("entry name is not UTF-8"))?.to_string();
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad(format!("entry {name:?} is too large")))?;
            let payload = match r.u8()? {
                DTYPE_F32 => {
                    let raw = r.take(count.checked_mul(4).ok_or_else(|| bad("entry too large"))?)?;
                    Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                }
                DTYPE_BYTES => Payload::Bytes(r.take(count)?.to_vec()),
                t => return Err(bad(format!("entry {name:?} has unknown dtype tag {t}"))),
            };
            entries.push(Entry { name, dims, payload });
        }
        if r.pos != buf.len() {
            return Err(bad("trailing bytes after the last entry"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }
}
