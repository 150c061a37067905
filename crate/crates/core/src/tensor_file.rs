//! `PET1` binary tensor files.
//!
//! Each record is the 4-byte magic `PET1`, a `u8` dtype tag (f32 = 1,
//! u8 = 2), a `u8` rank, `rank` little-endian `u64` extents and the raw
//! little-endian payload. A file may hold several records back to back.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PET1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::U8(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorRecord {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        TensorRecord {
            shape,
            data: TensorData::F32(data),
        }
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        TensorRecord {
            shape,
            data: TensorData::U8(data),
        }
    }

    pub fn into_f32(self) -> Option<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Some(v),
            TensorData::U8(_) => None,
        }
    }

    pub fn into_u8(self) -> Option<Vec<u8>> {
        match self.data {
            TensorData::U8(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }
}

pub fn encode(rec: &TensorRecord, out: &mut Vec<u8>) -> Result<()> {
    let n: usize = rec.shape.iter().product();
    if n != rec.data.len() || rec.shape.len() > u8::MAX as usize {
        return Err(Error::shape(format!(
            "record shape {:?} does not match {} values",
            rec.shape,
            rec.data.len()
        )));
    }
    out.extend_from_slice(MAGIC);
    out.push(rec.data.tag());
    out.push(rec.shape.len() as u8);
    for &e in &rec.shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match &rec.data {
        TensorData::F32(v) => {
            out.reserve(v.len() * 4);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::U8(v) => out.extend_from_slice(v),
    }
    Ok(())
}

/// Decodes every record in `bytes`.
pub fn decode_all(bytes: &[u8], path: &Path) -> Result<Vec<TensorRecord>> {
    let mut cur = bytes;
    let mut records = vec![];
    while !cur.is_empty() {
        records.push(decode_one(&mut cur, path)?);
    }
    Ok(records)
}

fn take<'a>(cur: &mut &'a [u8], n: usize, path: &Path) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(Error::format(path, "truncated tensor record"));
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}

fn decode_one(cur: &mut &[u8], path: &Path) -> Result<TensorRecord> {
    if take(cur, 4, path)? != MAGIC {
        return Err(Error::format(path, "bad magic, expected PET1"));
    }
    let tag = take(cur, 1, path)?[0];
    let rank = take(cur, 1, path)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b: [u8; 8] = take(cur, 8, path)?.try_into().expect("8 bytes");
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let data = match tag {
        1 => {
            let raw = take(cur, n * 4, path)?;
            TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            )
        }
        2 => TensorData::U8(take(cur, n, path)?.to_vec()),
        t => return Err(Error::format(path, format!("unknown dtype tag {t}"))),
    };
    Ok(TensorRecord { shape, data })
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save(path: &Path, records: &[TensorRecord]) -> Result<()> {
    let mut buf = vec![];
    for r in records {
        encode(r, &mut buf)?;
    }
    write_atomic(path, &buf)
}

pub fn load(path: &Path) -> Result<Vec<TensorRecord>> {
    let mut bytes = vec![];
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_all(&bytes, path)
}
