//! Binary embedding and index files, and labels CSV.
//!
//! `MIDXEMB1`: magic, `u32 n`, `u32 d`, then `n·d` little-endian `f32`, row-major.
//!
//! `MIDXIDX1`: magic, `u8 kind`, `u32 N`, `u32 D`, `u32 K`, both codebooks as
//! little-endian `f64` (row-major), then both assignment vectors as `u32`.
//! Residuals and cells are recomputed from the catalog on load.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{EmbeddingMatrix, Matrix};
use crate::quantization::{Codebook, MultiIndex, QuantizerKind};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"MIDXEMB1";
pub const INDEX_MAGIC: &[u8; 8] = b"MIDXIDX1";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format_err("file is truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| format_err("size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| format_err("size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(format_err(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )))
        }
    }
}

fn to_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| format_err(format!("{what} = {x} does not fit in u32")))
}

/// Serialize a matrix as `MIDXEMB1`; values are stored as `f32`.
pub fn encode_embeddings(m: &Matrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * m.as_slice().len());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&to_u32(m.rows(), "n")?.to_le_bytes());
    out.extend_from_slice(&to_u32(m.cols(), "d")?.to_le_bytes());
    for &x in m.as_slice() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parse `MIDXEMB1` bytes into a matrix of any shape, rejecting non-finite values.
pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8).map_err(|_| format_err("not an embedding file"))? != EMBEDDING_MAGIC {
        return Err(format_err("bad magic, expected MIDXEMB1"));
    }
    let n = c.u32()? as usize;
    let d = c.u32()? as usize;
    let len = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| format_err("size overflow"))?;
    if bytes.len() - c.pos != len {
        return Err(format_err(format!(
            "payload is {} bytes, header says {n}x{d} floats ({len} bytes)",
            bytes.len() - c.pos
        )));
    }
    let data: Vec<f64> = c
        .take(len)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(format_err(format!(
            "non-finite value at row {}, column {}",
            i / d.max(1),
            i % d.max(1)
        )));
    }
    Matrix::new(n, d, data)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let m = decode_matrix(bytes)?;
    EmbeddingMatrix::new(m).map_err(|e| format_err(e.to_string()))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_bytes(path, &encode_embeddings(m)?)
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    decode_matrix(&read_bytes(path)?)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    decode_embeddings(&read_bytes(path)?)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    Ok(buf)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Serialize an index as `MIDXIDX1`.
pub fn encode_index(index: &MultiIndex) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(INDEX_MAGIC);
    out.push(index.kind().tag());
    out.extend_from_slice(&to_u32(index.n_classes(), "N")?.to_le_bytes());
    out.extend_from_slice(&to_u32(index.dim(), "D")?.to_le_bytes());
    out.extend_from_slice(&to_u32(index.k(), "K")?.to_le_bytes());
    for book in index.codebooks() {
        for &x in book.matrix().as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for level in 0..2 {
        for &a in index.assignments(level) {
            out.extend_from_slice(&a.to_le_bytes());
        }
    }
    Ok(out)
}

/// Rebuild an index from `MIDXIDX1` bytes and the catalog it was built on.
pub fn decode_index(bytes: &[u8], emb: &EmbeddingMatrix) -> Result<MultiIndex> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8).map_err(|_| format_err("not an index file"))? != INDEX_MAGIC {
        return Err(format_err("bad magic, expected MIDXIDX1"));
    }
    let kind = QuantizerKind::from_tag(c.u8()?).map_err(|e| format_err(e.to_string()))?;
    let n = c.u32()? as usize;
    let d = c.u32()? as usize;
    let k = c.u32()? as usize;
    if n != emb.n_classes() || d != emb.dim() {
        return Err(format_err(format!(
            "index covers {n}x{d}, embeddings are {}x{}",
            emb.n_classes(),
            emb.dim()
        )));
    }
    kind.check_dim(d).map_err(|e| format_err(e.to_string()))?;
    let cw = kind.codeword_dim(d);
    let kc = k
        .checked_mul(cw)
        .ok_or_else(|| format_err("size overflow"))?;
    let b1 = Matrix::new(k, cw, c.f64s(kc)?)?;
    let b2 = Matrix::new(k, cw, c.f64s(kc)?)?;
    let a1 = c.u32s(n)?;
    let a2 = c.u32s(n)?;
    c.finish()?;
    let books = [
        Codebook::new(b1).map_err(|e| format_err(e.to_string()))?,
        Codebook::new(b2).map_err(|e| format_err(e.to_string()))?,
    ];
    MultiIndex::from_parts(emb, kind, books, a1, a2).map_err(|e| format_err(e.to_string()))
}

pub fn write_index(path: &Path, index: &MultiIndex) -> Result<()> {
    write_bytes(path, &encode_index(index)?)
}

pub fn read_index(path: &Path, emb: &EmbeddingMatrix) -> Result<MultiIndex> {
    decode_index(&read_bytes(path)?, emb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub query_id: usize,
    pub class_id: usize,
}

/// `query_id,class_id` CSV for a label vector.
pub fn encode_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (query_id, &class_id) in labels.iter().enumerate() {
        w.serialize(LabelRow { query_id, class_id })
            .map_err(|e| format_err(e.to_string()))?;
    }
    w.into_inner().map_err(|e| format_err(e.to_string()))
}

/// Parse a labels CSV; query ids must run `0, 1, 2, …` in order.
pub fn decode_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers().map_err(|e| format_err(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["query_id", "class_id"] {
        return Err(format_err("labels header must be `query_id,class_id`"));
    }
    let mut out = Vec::new();
    for row in r.deserialize::<LabelRow>() {
        let row = row.map_err(|e| format_err(e.to_string()))?;
        if row.query_id != out.len() {
            return Err(format_err(format!(
                "expected query_id {}, found {}",
                out.len(),
                row.query_id
            )));
        }
        out.push(row.class_id);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    write_bytes(path, &encode_labels(labels)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    decode_labels(&read_bytes(path)?)
}

/// Round every entry through `f32`, the precision stored on disk.
pub fn round_to_f32(m: &Matrix) -> Matrix {
    let data = m.as_slice().iter().map(|&x| x as f32 as f64).collect();
    Matrix::new(m.rows(), m.cols(), data).expect("same shape")
}
