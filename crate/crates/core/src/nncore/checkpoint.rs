//! Weight checkpoints: named f32 tensors plus a JSON metadata blob.
//!
//! Layout (little endian):
//! `"BCKP" | version u16 | tensor count u32`, then one chunk per tensor and a
//! final metadata chunk. A chunk is `len u32 | crc32 u32 | payload`. Tensor
//! payloads are `name_len u16 | name | ndim u8 | dims u32* | f32*`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde_json::Value;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BCKP";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: Value,
}

fn write_chunk<W: Write>(w: &mut W, payload: &[u8]) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(payload.len() as u32)?;
    w.write_u32::<LittleEndian>(crc32fast::hash(payload))?;
    w.write_all(payload)
}

fn read_chunk<R: Read>(r: &mut R, chunk: u64) -> Result<Vec<u8>> {
    let len = r.read_u32::<LittleEndian>().map_err(|e| truncated(chunk, e))? as usize;
    let crc = r.read_u32::<LittleEndian>().map_err(|e| truncated(chunk, e))?;
    let mut payload = vec![0; len];
    r.read_exact(&mut payload).map_err(|e| truncated(chunk, e))?;
    if crc32fast::hash(&payload) != crc {
        return Err(Error::Checksum { chunk });
    }
    Ok(payload)
}

fn truncated(chunk: u64, e: std::io::Error) -> Error {
    Error::Corrupt(format!("checkpoint chunk {chunk} truncated: {e}"))
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u16::<LittleEndian>(VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(ckpt.tensors.len() as u32).map_err(io)?;
    for (name, t) in &ckpt.tensors {
        let mut p = Vec::with_capacity(t.len() * 4 + name.len() + 16);
        p.write_u16::<LittleEndian>(name.len() as u16).map_err(io)?;
        p.extend_from_slice(name.as_bytes());
        p.write_u8(t.shape().len() as u8).map_err(io)?;
        for &d in t.shape() {
            p.write_u32::<LittleEndian>(d as u32).map_err(io)?;
        }
        for &v in t.data() {
            p.write_f32::<LittleEndian>(v).map_err(io)?;
        }
        write_chunk(&mut w, &p).map_err(io)?;
    }
    let meta = serde_json::to_vec(&ckpt.meta).map_err(|e| Error::Invalid(e.to_string()))?;
    write_chunk(&mut w, &meta).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Corrupt(format!("{}: not a checkpoint", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Corrupt(format!("{}: not a checkpoint", path.display())));
    }
    let version = r.read_u16::<LittleEndian>().map_err(|e| truncated(0, e))?;
    if version != VERSION {
        return Err(Error::Corrupt(format!("unsupported checkpoint version {version}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(|e| truncated(0, e))? as u64;
    let mut tensors = Vec::with_capacity(count as usize);
    for chunk in 0..count {
        let payload = read_chunk(&mut r, chunk)?;
        tensors.push(parse_tensor(&payload, chunk)?);
    }
    let meta_bytes = read_chunk(&mut r, count)?;
    let meta = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Corrupt(format!("checkpoint metadata: {e}")))?;
    Ok(Checkpoint { tensors, meta })
}

fn parse_tensor(payload: &[u8], chunk: u64) -> Result<(String, Tensor<f32>)> {
    let bad = |what: &str| Error::Corrupt(format!("checkpoint chunk {chunk}: {what}"));
    let mut c = Cursor::new(payload);
    let name_len = c.read_u16::<LittleEndian>().map_err(|_| bad("name length"))? as usize;
    let mut name = vec![0; name_len];
    c.read_exact(&mut name).map_err(|_| bad("name"))?;
    let name = String::from_utf8(name).map_err(|_| bad("name is not utf-8"))?;
    let ndim = c.read_u8().map_err(|_| bad("rank"))? as usize;
    let shape = (0..ndim)
        .map(|_| c.read_u32::<LittleEndian>().map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|_| bad("shape"))?;
    let n: usize = shape.iter().product();
    let remaining = payload.len() - c.position() as usize;
    if remaining != n * 4 {
        return Err(bad("value count does not match shape"));
    }
    let mut data = vec![0f32; n];
    c.read_f32_into::<LittleEndian>(&mut data).map_err(|_| bad("values"))?;
    Ok((name, Tensor::from_vec(&shape, data)?))
}
