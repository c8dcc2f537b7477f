use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CRW1";

/// Dense connection weights from one layer into the next.
///
/// Row `i` of the matrix holds target neuron `i`'s incoming weights, one per
/// source neuron. Values are kept as `f32`, the on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    source_layer: u32,
    target_size: usize,
    source_size: usize,
    matrix: Vec<f32>,
    bias: Vec<f32>,
}

impl LayerWeights {
    pub fn new(
        source_layer: u32,
        target_size: usize,
        source_size: usize,
        matrix: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if matrix.len() != target_size * source_size {
            return Err(Error::Dimension(format!(
                "weight matrix has {} values, expected {target_size}x{source_size}",
                matrix.len()
            )));
        }
        if bias.len() != target_size {
            return Err(Error::Dimension(format!(
                "bias has {} values, expected {target_size}",
                bias.len()
            )));
        }
        if let Some(pos) = matrix.iter().position(|w| !w.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite weight at target {}, source {}",
                pos / source_size.max(1),
                pos % source_size.max(1)
            )));
        }
        if let Some(pos) = bias.iter().position(|b| !b.is_finite()) {
            return Err(Error::Validation(format!("non-finite bias at target {pos}")));
        }
        Ok(Self {
            source_layer,
            target_size,
            source_size,
            matrix,
            bias,
        })
    }

    pub fn source_layer(&self) -> u32 {
        self.source_layer
    }

    pub fn target_layer(&self) -> u32 {
        self.source_layer + 1
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    pub fn source_size(&self) -> usize {
        self.source_size
    }

    /// Incoming weights of target neuron `target`.
    pub fn row(&self, target: usize) -> &[f32] {
        &self.matrix[target * self.source_size..(target + 1) * self.source_size]
    }

    pub fn bias(&self, target: usize) -> f32 {
        self.bias[target]
    }

    pub fn biases(&self) -> &[f32] {
        &self.bias
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }
}

pub fn load_weights(path: &Path, source_layer: u32) -> Result<LayerWeights> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_weights(BufReader::new(file), source_layer).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Reads the `CRW1` format: magic, u32 target size, u32 source size, then
/// row-major weights and the bias vector, all little-endian `f32`.
pub fn read_weights<R: Read>(mut r: R, source_layer: u32) -> Result<LayerWeights> {
    let mut header = [0u8; 12];
    r.read_exact(&mut header)
        .map_err(|_| Error::Dimension("weights file shorter than its 12-byte header".into()))?;
    if &header[..4] != WEIGHTS_MAGIC {
        return Err(Error::Validation(format!(
            "bad weights magic {:?}",
            String::from_utf8_lossy(&header[..4])
        )));
    }
    let target = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let source = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)
        .map_err(|e| Error::io("<weights>", e))?;
    let expected = (target * source + target) * 4;
    if body.len() != expected {
        return Err(Error::Dimension(format!(
            "weights body has {} bytes, header ({target},{source}) requires {expected}",
            body.len()
        )));
    }
    let values = decode_f32s(&body);
    let (matrix, bias) = values.split_at(target * source);
    LayerWeights::new(source_layer, target, source, matrix.to_vec(), bias.to_vec())
}

pub(crate) fn decode_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub(crate) fn encode_weights(buf: &mut Vec<u8>, w: &LayerWeights) {
    buf.reserve(12 + 4 * (w.matrix.len() + w.bias.len()));
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&(w.target_size as u32).to_le_bytes());
    buf.extend_from_slice(&(w.source_size as u32).to_le_bytes());
    for v in w.matrix.iter().chain(&w.bias) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_weights(path: &Path, w: &LayerWeights) -> Result<()> {
    let mut buf = Vec::new();
    encode_weights(&mut buf, w);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&buf).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}
