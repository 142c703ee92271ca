// SPDX-License-Identifier: MIT OR Apache-2.0

//! FXB1 weight-bundle file format.
//!
//! Layout:
//!
//! ```text
//! "FXB1"                     4 bytes magic
//! header_len                 u32 little-endian
//! header                     UTF-8 JSON: ModelConfig fields + "tensors" directory
//! zero padding               up to the next 64-byte boundary
//! payload_0 .. payload_n     row-major little-endian, each starting 64-byte aligned
//! ```
//!
//! Directory entries are `{name, dtype, shape}` with dtype `f32` or `f16`;
//! payloads appear in directory order. `f16` data is widened to `f32` on load.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::weights::{Tensor, WeightBundle};
use crate::error::{FixlabError, Result};

/// File magic.
pub const MAGIC: &[u8; 4] = b"FXB1";
/// Payload alignment in bytes.
pub const ALIGN: usize = 64;

/// On-disk element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
}

impl DType {
    fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F16 => 2,
        }
    }
}

/// One directory entry of the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Write `bundle` to `path`, storing every tensor as `dtype`.
pub fn save_weights(bundle: &WeightBundle, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| FixlabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_weights(bundle, &mut w, dtype).map_err(|e| match e {
        FixlabError::Io { source, .. } => FixlabError::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| FixlabError::io(path, e))
}

/// Serialize `bundle` into any writer.
pub fn write_weights(bundle: &WeightBundle, w: &mut impl Write, dtype: DType) -> Result<()> {
    let named = bundle.named_tensors();
    let header = Header {
        config: bundle.config.clone(),
        tensors: named
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                dtype,
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len()).map_err(|_| FixlabError::Header("header exceeds 4 GiB".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&header_len.to_le_bytes())?;
    w.write_all(&json)?;
    let mut pos = 8 + json.len();
    let zeros = [0u8; ALIGN];
    for (_, t) in &named {
        let pad = align_up(pos) - pos;
        w.write_all(&zeros[..pad])?;
        pos += pad;
        let mut buf = Vec::with_capacity(t.len() * dtype.size());
        match dtype {
            DType::F32 => t.data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            DType::F16 => t
                .data
                .iter()
                .for_each(|v| buf.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
        }
        w.write_all(&buf)?;
        pos += buf.len();
    }
    Ok(())
}

/// Read and fully validate an FXB1 file.
pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightBundle> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| FixlabError::io(path, e))?;
    let len = file.metadata().map_err(|e| FixlabError::io(path, e))?.len() as usize;
    read_weights(BufReader::new(file), len)
}

/// Parse an FXB1 stream of known total length.
pub fn read_weights(mut r: impl Read, total_len: usize) -> Result<WeightBundle> {
    let mut magic = [0u8; 4];
    read_or_header(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(FixlabError::Header(format!("bad magic {magic:?}")));
    }
    let mut len_bytes = [0u8; 4];
    read_or_header(&mut r, &mut len_bytes, "header length")?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    if 8 + header_len > total_len {
        return Err(FixlabError::Header(format!(
            "header length {header_len} exceeds file size {total_len}"
        )));
    }
    let mut json = vec![0u8; header_len];
    read_or_header(&mut r, &mut json, "header")?;
    let text = std::str::from_utf8(&json).map_err(|e| FixlabError::Header(format!("header is not UTF-8: {e}")))?;
    let header: Header = serde_json::from_str(text).map_err(|e| FixlabError::Header(e.to_string()))?;
    header.config.validate()?;

    let mut pos = 8 + header_len;
    let mut named = BTreeMap::new();
    let mut scratch = Vec::new();
    for entry in &header.tensors {
        if named.contains_key(&entry.name) {
            return Err(FixlabError::Header(format!("duplicate tensor `{}`", entry.name)));
        }
        let start = align_up(pos);
        let count: usize = entry.shape.iter().product();
        let needed = count * entry.dtype.size();
        if start > total_len || start + needed > total_len {
            return Err(FixlabError::Truncated {
                name: entry.name.clone(),
                needed,
                available: total_len.saturating_sub(start),
            });
        }
        skip(&mut r, start - pos)?;
        scratch.resize(needed, 0);
        r.read_exact(&mut scratch).map_err(|_| FixlabError::Truncated {
            name: entry.name.clone(),
            needed,
            available: total_len.saturating_sub(start),
        })?;
        let data: Vec<f32> = match entry.dtype {
            DType::F32 => scratch
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            DType::F16 => scratch
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        };
        named.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data));
        pos = start + needed;
    }
    WeightBundle::from_named(header.config, named)
}

fn read_or_header(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| FixlabError::Header(format!("file ends inside {what}")))
}

fn skip(r: &mut impl Read, n: usize) -> Result<()> {
    let mut pad = [0u8; ALIGN];
    r.read_exact(&mut pad[..n]).map_err(FixlabError::from)
}
