//! Little-endian binary containers shared by range-image caches, embedding
//! files and checkpoints.
//!
//! Tensor block (`RIMG`): magic, u32 rows, u32 cols, rows·cols f32 row-major.
//! Embedding file (`EMBD`): magic, u32 count, u32 dim, then per row a u32
//! byte length, the UTF-8 key and `dim` f32 values.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"RIMG";
pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMBD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";

fn io_err(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("unexpected end of data".into())
    } else {
        Error::io("<stream>", e)
    }
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    if &b != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&b),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub(crate) fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes).map_err(io_err)
}

pub(crate) fn read_bytes<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf).map_err(io_err)?;
    if buf.len() != len {
        return Err(Error::Format(format!(
            "expected {len} bytes, found {}",
            buf.len()
        )));
    }
    Ok(buf)
}

fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(w, &buf)
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let bytes = read_bytes(r, n * 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn dim_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

pub fn write_tensor_block<W: Write>(w: &mut W, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    if data.len() != rows * cols {
        return Err(Error::Shape(format!(
            "tensor block {rows}×{cols} given {} values",
            data.len()
        )));
    }
    write_bytes(w, TENSOR_MAGIC)?;
    write_u32(w, dim_u32(rows, "rows")?)?;
    write_u32(w, dim_u32(cols, "cols")?)?;
    write_f32s(w, data)
}

pub fn read_tensor_block<R: Read>(r: &mut R) -> Result<(usize, usize, Vec<f32>)> {
    expect_magic(r, TENSOR_MAGIC)?;
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let data = read_f32s(r, n)?;
    Ok((rows, cols, data))
}

/// One row of an embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub key: String,
    pub values: Vec<f32>,
}

pub fn write_embedding_file<W: Write>(w: &mut W, dim: usize, rows: &[EmbeddingRecord]) -> Result<()> {
    write_bytes(w, EMBEDDING_MAGIC)?;
    write_u32(w, dim_u32(rows.len(), "count")?)?;
    write_u32(w, dim_u32(dim, "dim")?)?;
    for row in rows {
        if row.values.len() != dim {
            return Err(Error::Shape(format!(
                "embedding {} has {} values, file dim is {dim}",
                row.key,
                row.values.len()
            )));
        }
        write_u32(w, dim_u32(row.key.len(), "key length")?)?;
        write_bytes(w, row.key.as_bytes())?;
        write_f32s(w, &row.values)?;
    }
    Ok(())
}

/// Returns `(dim, rows)`.
pub fn read_embedding_file<R: Read>(r: &mut R) -> Result<(usize, Vec<EmbeddingRecord>)> {
    expect_magic(r, EMBEDDING_MAGIC)?;
    let count = read_u32(r)? as usize;
    let dim = read_u32(r)? as usize;
    let mut rows = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let key = String::from_utf8(read_bytes(r, len)?)
            .map_err(|e| Error::Format(format!("embedding key is not UTF-8: {e}")))?;
        let values = read_f32s(r, dim)?;
        rows.push(EmbeddingRecord { key, values });
    }
    Ok((dim, rows))
}
