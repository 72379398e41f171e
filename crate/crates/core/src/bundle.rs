//! Versioned, checksummed model file shared by the CLI and the browser client.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "S2SB" | u32 header_len | header JSON (header_len bytes) | payload | u32 CRC32
//! ```
//!
//! The header names every tensor with its shape and byte offset into the
//! payload. The payload is the tensors back to back as row-major `f32`. The
//! CRC (IEEE) covers every byte before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Hyper, LstmParams, ModelParams, PARAM_NAMES};
use crate::tensor::Tensor2;
use crate::text::Vocab;

pub const MAGIC: &[u8; 4] = b"S2SB";
pub const FORMAT_VERSION: u32 = 1;
pub const GATE_ORDER: &str = "ifgo";
pub const LAYOUT: &str = "row-major";
pub const DTYPE: &str = "f32-le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset from the start of the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub format_version: u32,
    #[serde(rename = "V")]
    pub vocab_size: usize,
    pub d: usize,
    pub h: usize,
    pub max_seq_len: usize,
    pub gate_order: String,
    pub layout: String,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub vocab: Vec<String>,
}

impl BundleHeader {
    pub fn payload_len(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| t.rows.saturating_mul(t.cols).saturating_mul(4))
            .fold(0, usize::saturating_add)
    }
}

fn header_for(model: &ModelParams, vocab: &Vocab) -> BundleHeader {
    let mut offset = 0;
    let tensors = PARAM_NAMES
        .iter()
        .zip(model.tensors())
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
                offset,
            };
            offset += t.len() * 4;
            entry
        })
        .collect();
    BundleHeader {
        format_version: FORMAT_VERSION,
        vocab_size: model.hyper.vocab_size,
        d: model.hyper.embed_dim,
        h: model.hyper.hidden_dim,
        max_seq_len: model.hyper.max_seq_len,
        gate_order: GATE_ORDER.into(),
        layout: LAYOUT.into(),
        dtype: DTYPE.into(),
        tensors,
        vocab: vocab.tokens().to_vec(),
    }
}

pub fn to_bytes(model: &ModelParams, vocab: &Vocab) -> Result<Vec<u8>> {
    model.validate()?;
    if vocab.len() != model.hyper.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model.hyper.vocab_size
        )));
    }
    let header = header_for(model, vocab);
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + header.payload_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Write the bundle atomically (temp file in the same directory, then rename).
pub fn export_model(model: &ModelParams, vocab: &Vocab, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model, vocab)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn import_model(path: impl AsRef<Path>) -> Result<(ModelParams, Vocab)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parse and verify only the header, after checking magic and CRC.
pub fn read_header(bytes: &[u8]) -> Result<BundleHeader> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not a model bundle".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Corruption("file truncated".into()));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32_at(bytes, bytes.len() - 4);
    if crc32fast::hash(body) != stored {
        return Err(Error::Corruption("CRC32 mismatch".into()));
    }
    let header_len = u32_at(bytes, 4) as usize;
    let json = body
        .get(8..8 + header_len)
        .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
    let value: serde_json::Value = serde_json::from_slice(json)
        .map_err(|e| Error::Format(format!("header is not JSON: {e}")))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(Error::Format(format!("unsupported version {v}"))),
        None => return Err(Error::Format("header lacks format_version".into())),
    }
    let header: BundleHeader = serde_json::from_value(value)
        .map_err(|e| Error::Format(format!("malformed header: {e}")))?;
    if header.gate_order != GATE_ORDER || header.layout != LAYOUT || header.dtype != DTYPE {
        return Err(Error::Format(format!(
            "unsupported conventions: gate_order={} layout={} dtype={}",
            header.gate_order, header.layout, header.dtype
        )));
    }
    let payload_len = body.len() - 8 - header_len;
    if header.payload_len() != payload_len {
        return Err(Error::Format(format!(
            "manifest describes {} payload bytes but file holds {payload_len}",
            header.payload_len()
        )));
    }
    Ok(header)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, Vocab)> {
    let header = read_header(bytes)?;
    let payload_start = 8 + u32_at(bytes, 4) as usize;
    let payload = &bytes[payload_start..bytes.len() - 4];

    let hyper = Hyper {
        vocab_size: header.vocab_size,
        embed_dim: header.d,
        hidden_dim: header.h,
        max_seq_len: header.max_seq_len,
    };
    let vocab = Vocab::from_tokens(header.vocab.clone())?;
    if vocab.len() != hyper.vocab_size {
        return Err(Error::Format(format!(
            "header V={} but vocabulary lists {} tokens",
            hyper.vocab_size,
            vocab.len()
        )));
    }

    let (v, d, h) = (hyper.vocab_size, hyper.embed_dim, hyper.hidden_dim);
    let h4 = h.saturating_mul(4);
    let expected_shapes = [
        (v, d),
        (h4, d),
        (h4, h),
        (h4, 1),
        (h4, d),
        (h4, h),
        (h4, 1),
        (v, h),
        (v, 1),
    ];
    if header.tensors.len() != PARAM_NAMES.len() {
        return Err(Error::Format("manifest must list exactly the nine model tensors".into()));
    }
    let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
    let mut expected_offset = 0;
    for (slot, name) in PARAM_NAMES.iter().enumerate() {
        let entry = &header.tensors[slot];
        // fixed order, contiguous offsets
        if entry.name != *name || entry.offset != expected_offset {
            return Err(Error::Format(format!("tensor {name} missing, out of order or misplaced")));
        }
        if (entry.rows, entry.cols) != expected_shapes[slot] {
            return Err(Error::Format(format!(
                "tensor {name} is {:?} but V/d/h imply {:?}",
                (entry.rows, entry.cols),
                expected_shapes[slot]
            )));
        }
        let n = entry.rows * entry.cols;
        expected_offset += n * 4;
        let data: Vec<f32> = payload[entry.offset..entry.offset + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor2::from_vec(entry.rows, entry.cols, data)?);
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("nine tensors");
    let model = ModelParams {
        hyper,
        embedding: next(),
        encoder: LstmParams { w: next(), u: next(), b: next() },
        decoder: LstmParams { w: next(), u: next(), b: next() },
        w_out: next(),
        b_out: next(),
    };
    model.validate()?;
    Ok((model, vocab))
}
