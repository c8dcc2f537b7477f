use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::weights::decode_f32s;
use crate::error::{Error, Result};

pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"CRE1";

/// Token id -> embedding vector. Row `i` is the embedding of token id `i`.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    rows: Vec<f32>,
    inv_norms: Vec<f64>,
    surfaces: Option<Vec<String>>,
}

impl PartialEq for EmbeddingTable {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.rows == other.rows && self.surfaces == other.surfaces
    }
}

impl EmbeddingTable {
    pub fn new(dim: usize, rows: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("embedding dimension must be >= 1".into()));
        }
        if !rows.len().is_multiple_of(dim) {
            return Err(Error::Dimension(format!(
                "{} embedding values is not a multiple of dimension {dim}",
                rows.len()
            )));
        }
        let mut inv_norms = Vec::with_capacity(rows.len() / dim);
        for (id, row) in rows.chunks_exact(dim).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "token {id}: non-finite embedding value"
                )));
            }
            let norm = row
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(Error::Validation(format!("token {id}: zero embedding vector")));
            }
            inv_norms.push(1.0 / norm);
        }
        Ok(Self {
            dim,
            rows,
            inv_norms,
            surfaces: None,
        })
    }

    /// Attaches token surfaces (one per row).
    pub fn with_surfaces(mut self, surfaces: Vec<String>) -> Result<Self> {
        if surfaces.len() != self.vocab_size() {
            return Err(Error::Dimension(format!(
                "vocabulary has {} entries, embedding table has {} rows",
                surfaces.len(),
                self.vocab_size()
            )));
        }
        self.surfaces = Some(surfaces);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.inv_norms.len()
    }

    pub fn contains(&self, token_id: u32) -> bool {
        (token_id as usize) < self.vocab_size()
    }

    pub fn get(&self, token_id: u32) -> Result<&[f32]> {
        if !self.contains(token_id) {
            return Err(Error::TokenNotFound(token_id));
        }
        let start = token_id as usize * self.dim;
        Ok(&self.rows[start..start + self.dim])
    }

    /// Appends the unit-normalized embedding of `token_id` to `out`.
    pub fn push_unit(&self, token_id: u32, out: &mut Vec<f64>) -> Result<()> {
        let row = self.get(token_id)?;
        let inv = self.inv_norms[token_id as usize];
        out.extend(row.iter().map(|&v| f64::from(v) * inv));
        Ok(())
    }

    pub fn unit(&self, token_id: u32) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(self.dim);
        self.push_unit(token_id, &mut v)?;
        Ok(v)
    }

    pub fn surfaces(&self) -> Option<&[String]> {
        self.surfaces.as_deref()
    }

    pub fn surface(&self, token_id: u32) -> Option<&str> {
        self.surfaces
            .as_ref()
            .and_then(|s| s.get(token_id as usize))
            .map(String::as_str)
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Reads the `CRE1` format: magic, u32 vocabulary size, u32 dimension, then
/// row-major little-endian `f32` rows.
pub fn read_embeddings<R: Read>(mut r: R) -> Result<EmbeddingTable> {
    let mut header = [0u8; 12];
    r.read_exact(&mut header)
        .map_err(|_| Error::Dimension("embeddings file shorter than its 12-byte header".into()))?;
    if &header[..4] != EMBEDDINGS_MAGIC {
        return Err(Error::Validation(format!(
            "bad embeddings magic {:?}",
            String::from_utf8_lossy(&header[..4])
        )));
    }
    let vocab = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)
        .map_err(|e| Error::io("<embeddings>", e))?;
    if body.len() != vocab * dim * 4 {
        return Err(Error::Dimension(format!(
            "embeddings body has {} bytes, header ({vocab},{dim}) requires {}",
            body.len(),
            vocab * dim * 4
        )));
    }
    EmbeddingTable::new(dim, decode_f32s(&body))
}

pub(crate) fn encode_embeddings(buf: &mut Vec<u8>, t: &EmbeddingTable) {
    buf.reserve(12 + 4 * t.rows.len());
    buf.extend_from_slice(EMBEDDINGS_MAGIC);
    buf.extend_from_slice(&(t.vocab_size() as u32).to_le_bytes());
    buf.extend_from_slice(&(t.dim as u32).to_le_bytes());
    for v in &t.rows {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_embeddings(path: &Path, t: &EmbeddingTable) -> Result<()> {
    let mut buf = Vec::new();
    encode_embeddings(&mut buf, t);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&buf).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    id: u32,
    t: String,
}

/// Reads the companion vocabulary JSONL. Ids absent from the file get an
/// empty surface.
pub fn read_vocab(path: &Path, vocab_size: usize) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<Option<String>> = vec![None; vocab_size];
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: VocabRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let slot = out.get_mut(rec.id as usize).ok_or_else(|| {
            Error::Validation(format!(
                "{}:{}: token id {} outside vocabulary of {vocab_size}",
                path.display(),
                i + 1,
                rec.id
            ))
        })?;
        if slot.replace(rec.t).is_some() {
            return Err(Error::Validation(format!(
                "{}:{}: token id {} listed twice",
                path.display(),
                i + 1,
                rec.id
            )));
        }
    }
    Ok(out.into_iter().map(Option::unwrap_or_default).collect())
}

pub(crate) fn encode_vocab<W: Write>(mut w: W, t: &EmbeddingTable) -> Result<()> {
    if let Some(surfaces) = &t.surfaces {
        for (id, s) in surfaces.iter().enumerate() {
            serde_json::to_writer(
                &mut w,
                &VocabRecord {
                    id: id as u32,
                    t: s.clone(),
                },
            )?;
            w.write_all(b"\n").map_err(|e| Error::io("<vocab>", e))?;
        }
    }
    Ok(())
}

pub fn write_vocab(path: &Path, t: &EmbeddingTable) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_vocab(&mut w, t)?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes(vocab: u32, dim: u32, values: &[f32]) -> Vec<u8> {
        let mut b = EMBEDDINGS_MAGIC.to_vec();
        b.extend_from_slice(&vocab.to_le_bytes());
        b.extend_from_slice(&dim.to_le_bytes());
        for v in values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn two_rows_of_three() {
        let t = read_embeddings(&bytes(2, 3, &[1., 2., 3., 4., 5., 6.])[..]).unwrap();
        assert_eq!(t.vocab_size(), 2);
        assert_eq!(t.get(1).unwrap(), &[4., 5., 6.]);
    }

    #[test]
    fn zero_row_names_token() {
        let err = read_embeddings(&bytes(2, 2, &[1., 0., 0., 0.])[..]).unwrap_err();
        assert!(err.to_string().contains("token 1"), "{err}");
    }

    #[test]
    fn absent_token_not_found() {
        let t = EmbeddingTable::new(2, vec![1., 0.]).unwrap();
        assert!(matches!(t.get(5), Err(Error::TokenNotFound(5))));
    }

    #[test]
    fn unit_rows_have_unit_norm() {
        let t = EmbeddingTable::new(2, vec![3., 4.]).unwrap();
        let u = t.unit(0).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn vocab_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = EmbeddingTable::new(1, vec![1., 2.])
            .unwrap()
            .with_surfaces(vec![" the".into(), "\n".into()])
            .unwrap();
        let p = dir.path().join("vocab.jsonl");
        write_vocab(&p, &t).unwrap();
        assert_eq!(read_vocab(&p, 2).unwrap(), vec![" the".to_string(), "\n".to_string()]);
    }
}
