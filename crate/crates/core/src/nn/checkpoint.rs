//! Tensor container files.
//!
//! Layout (little endian): the 8-byte magic `CWCLTNS1`, a `u32` tensor count,
//! then per tensor a `u32`-prefixed UTF-8 name, a dtype byte (0 = f32,
//! 1 = f64), a `u32` rank, `u64` dims and the raw values. A SHA-256 digest of
//! everything before it closes the file.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::tensor::{StateDict, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CWCLTNS1";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn from_state(state: &StateDict) -> Vec<NamedTensor> {
        state
            .entries
            .iter()
            .map(|(n, t)| NamedTensor {
                name: n.clone(),
                shape: t.shape.clone(),
                data: TensorData::F32(t.data.clone()),
            })
            .collect()
    }

    pub fn into_state(tensors: Vec<NamedTensor>) -> Result<StateDict> {
        let entries = tensors
            .into_iter()
            .map(|t| match t.data {
                TensorData::F32(data) => Ok((t.name, Tensor { shape: t.shape, data })),
                TensorData::F64(_) => Err(Error::Checkpoint(format!("tensor {} is f64, expected f32", t.name))),
            })
            .collect::<Result<_>>()?;
        Ok(StateDict { entries })
    }
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(tensors.len() as u32).unwrap();
    for t in tensors {
        buf.write_u32::<LittleEndian>(t.name.len() as u32).unwrap();
        buf.extend_from_slice(t.name.as_bytes());
        buf.write_u8(matches!(t.data, TensorData::F64(_)) as u8).unwrap();
        buf.write_u32::<LittleEndian>(t.shape.len() as u32).unwrap();
        for &d in &t.shape {
            buf.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        match &t.data {
            TensorData::F32(v) => v.iter().for_each(|&x| buf.write_f32::<LittleEndian>(x).unwrap()),
            TensorData::F64(v) => v.iter().for_each(|&x| buf.write_f64::<LittleEndian>(x).unwrap()),
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let corrupt = |m: &str| Error::Checkpoint(format!("corrupt tensor file: {m}"));
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic or truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut cur = Cursor::new(&body[8..]);
    let io = |_| corrupt("truncated record");
    let count = cur.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let dtype = cur.read_u8().map_err(io)?;
        let rank = cur.read_u32::<LittleEndian>().map_err(io)? as usize;
        let shape = (0..rank)
            .map(|_| cur.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let len: usize = shape.iter().product();
        let data = match dtype {
            0 => {
                let mut v = vec![0.0f32; len];
                cur.read_f32_into::<LittleEndian>(&mut v).map_err(io)?;
                TensorData::F32(v)
            }
            1 => {
                let mut v = vec![0.0f64; len];
                cur.read_f64_into::<LittleEndian>(&mut v).map_err(io)?;
                TensorData::F64(v)
            }
            _ => return Err(corrupt("unknown dtype")),
        };
        debug_assert_eq!(data.len(), len);
        out.push(NamedTensor { name, shape, data });
    }
    if (cur.position() as usize) != body.len() - 8 {
        return Err(corrupt("trailing bytes"));
    }
    Ok(out)
}

/// Writes via a temporary file and rename, so readers never see a partial file.
pub fn write_file(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
    f.write_all(&encode(tensors))
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming {}", tmp.display()), e))
}

pub fn read_file(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}
