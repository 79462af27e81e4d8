//! Trained-model file: character table, encoder weights and loss settings.
//!
//! ```text
//! magic "EJM1" | version u32 | header length u32 | header JSON
//! f32 arrays:  table rows sorted by code point, fallback row,
//!              per layer W_z U_z b_z W_r U_r b_r W_h U_h b_h
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::encoder::{embed, normalize, EmbeddingVector, EncoderParams};
use crate::encoding::{encode_str, CharEmbeddingTable, NameEncoding};
use crate::error::{Error, Result};
use crate::loss::LossParams;

pub const MODEL_MAGIC: [u8; 4] = *b"EJM1";
pub const MODEL_VERSION: u32 = 1;

/// Largest header accepted when loading.
const MAX_HEADER: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub layer_dims: Vec<usize>,
    pub char_dim: usize,
    pub max_tokens: usize,
    pub loss: LossParams,
    /// Characters of the table, in code-point order.
    pub chars: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    table: CharEmbeddingTable,
    params: EncoderParams,
    loss: LossParams,
    max_tokens: usize,
}

fn round_to_f32(params: &mut EncoderParams) {
    params.for_each_mut(|x| *x = f64::from(*x as f32));
}

impl ModelFile {
    /// Weights are rounded to `f32` so that saving and loading is lossless.
    pub fn new(table: CharEmbeddingTable, mut params: EncoderParams, loss: LossParams, max_tokens: usize) -> Result<Self> {
        if params.input_dim() != table.dim() {
            return Err(Error::DimensionMismatch {
                expected: table.dim(),
                got: params.input_dim(),
            });
        }
        if max_tokens == 0 {
            return Err(Error::InvalidConfig("max_tokens must be at least 1".into()));
        }
        loss.validate()?;
        round_to_f32(&mut params);
        if !params.all_finite() {
            return Err(Error::InvalidConfig("weights must be finite in f32".into()));
        }
        Ok(ModelFile {
            table,
            params,
            loss,
            max_tokens,
        })
    }

    pub fn table(&self) -> &CharEmbeddingTable {
        &self.table
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn loss(&self) -> &LossParams {
        &self.loss
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn header(&self) -> ModelHeader {
        ModelHeader {
            layer_dims: self.params.layer_dims(),
            char_dim: self.table.dim(),
            max_tokens: self.max_tokens,
            loss: self.loss,
            chars: self.table.entries().map(|(c, _)| c).collect(),
        }
    }

    pub fn encode(&self, name: &str) -> Result<NameEncoding> {
        encode_str(name, &self.table, self.max_tokens)
    }

    /// Embedding of one name, normalized when the loss trains on unit vectors.
    pub fn embed(&self, name: &str) -> Result<EmbeddingVector> {
        let e = embed(&self.encode(name)?, &self.params)?;
        if self.loss.normalize_inputs {
            normalize(&e)
        } else {
            Ok(e)
        }
    }
}

pub fn save_model<W: Write>(model: &ModelFile, mut sink: W) -> Result<()> {
    let header = serde_json::to_vec(&model.header())?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let mut put = |v: f32| buf.extend_from_slice(&v.to_le_bytes());
    for (_, row) in model.table.entries() {
        row.iter().copied().for_each(&mut put);
    }
    model.table.fallback().iter().copied().for_each(&mut put);
    for x in model.params.iter() {
        put(*x as f32);
    }
    sink.write_all(&buf)?;
    Ok(())
}

pub fn load_model<R: Read>(mut source: R) -> Result<ModelFile> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    parse_model(&bytes)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format("model file is truncated"))?;
    let out = &bytes[*pos..end];
    *pos = end;
    Ok(out)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().expect("4 bytes")))
}

/// Parses and validates a model held in memory. Never panics on malformed input.
pub fn parse_model(bytes: &[u8]) -> Result<ModelFile> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != MODEL_MAGIC {
        return Err(Error::format("bad magic bytes"));
    }
    let version = read_u32(bytes, &mut pos)?;
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let header_len = read_u32(bytes, &mut pos)? as usize;
    if header_len > MAX_HEADER {
        return Err(Error::format("header too large"));
    }
    let header: ModelHeader = serde_json::from_slice(take(bytes, &mut pos, header_len)?)
        .map_err(|e| Error::format(format!("bad header: {e}")))?;

    if header.char_dim == 0 || header.max_tokens == 0 || header.layer_dims.is_empty() || header.layer_dims.contains(&0) {
        return Err(Error::format("dimensions must be non-zero"));
    }
    header.loss.validate().map_err(|e| Error::format(e.to_string()))?;
    let chars: Vec<char> = header.chars.chars().collect();
    if chars.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::format("table characters must be strictly increasing"));
    }

    // count every float before allocating anything sized by the header
    let overflow = || Error::format("dimensions overflow");
    let mut n_floats = (chars.len() + 1).checked_mul(header.char_dim).ok_or_else(overflow)?;
    let mut prev = header.char_dim;
    for &h in &header.layer_dims {
        let per_gate = h
            .checked_mul(prev)
            .and_then(|w| w.checked_add(h.checked_mul(h)?))
            .and_then(|wu| wu.checked_add(h))
            .ok_or_else(overflow)?;
        n_floats = per_gate
            .checked_mul(3)
            .and_then(|l| n_floats.checked_add(l))
            .ok_or_else(overflow)?;
        prev = h;
    }
    let remaining = bytes.len() - pos;
    if n_floats.checked_mul(4) != Some(remaining) {
        return Err(Error::format(format!(
            "expected {n_floats} weights, found {remaining} bytes"
        )));
    }
    let floats: Vec<f32> = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if floats.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("non-finite weight"));
    }

    let d = header.char_dim;
    let mut rows = floats.chunks_exact(d);
    let entries: BTreeMap<char, Vec<f32>> = chars
        .iter()
        .map(|&c| (c, rows.next().expect("counted").to_vec()))
        .collect();
    let fallback = rows.next().expect("counted").to_vec();
    let table = CharEmbeddingTable::new(d, entries, fallback).map_err(|e| Error::format(e.to_string()))?;

    let mut params = EncoderParams::zeros(&header.layer_dims, d).map_err(|e| Error::format(e.to_string()))?;
    let mut weights = floats[(chars.len() + 1) * d..].iter();
    params.for_each_mut(|x| *x = f64::from(*weights.next().expect("counted")));

    ModelFile::new(table, params, header.loss, header.max_tokens).map_err(|e| Error::format(e.to_string()))
}
