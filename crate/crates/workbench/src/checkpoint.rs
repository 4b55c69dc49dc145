//! Single-file checkpoints.
//!
//! Layout: `RKLDCKPT` magic, u32 format version, u32 header length, UTF-8
//! JSON header, little-endian payload, then a CRC-32 of header and payload.
//! All integers are little-endian. Model weights are stored as f32; optimizer
//! moments (f64 in memory) are stored as f64 so a resumed run is exact.

use std::fs;
use std::path::Path;

use rkld::lm::{LanguageModel, LmConfig};
use rkld::ndgrad::Tensor;
use rkld::train::OptState;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"RKLDCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Where a checkpoint came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub seed: u64,
    pub method: Option<String>,
    pub epoch: Option<usize>,
    /// Checksum of the checkpoint this one was derived from.
    pub parent_checksum: Option<u32>,
    /// CRC-32 of the settings that produced this file.
    pub settings_digest: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: LmConfig,
    dtype: Dtype,
    /// Adam step counter; present for optimizer-state files.
    step: Option<u64>,
    tensors: Vec<TensorEntry>,
    provenance: Provenance,
}

/// A loaded model checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: LanguageModel,
    pub provenance: Provenance,
    pub checksum: u32,
}

fn encode(header: &Header, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header is plain data");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out[16..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn decode<'a>(path: &Path, bytes: &'a [u8]) -> Result<(Header, &'a [u8], u32)> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing RKLDCKPT magic"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = u32_at(8);
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u32_at(12) as usize;
    let body_end = bytes.len() - 4;
    if 16 + header_len > body_end {
        return Err(corrupt("file is truncated"));
    }
    let stored = u32_at(body_end);
    let checksum = crc32fast::hash(&bytes[16..body_end]);
    if stored != checksum {
        return Err(corrupt("checksum mismatch"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let payload = &bytes[16 + header_len..body_end];
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum::<usize>()
        * header.dtype.width();
    if payload.len() != expected {
        return Err(corrupt("payload size does not match the tensor directory"));
    }
    Ok((header, payload, checksum))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Serializes a model to bytes.
pub fn encode_model(model: &LanguageModel, provenance: &Provenance) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::with_capacity(model.n_params() * 4);
    let mut offset = 0;
    for (name, p) in model.names().iter().zip(model.params()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.shape().to_vec(),
            offset,
        });
        offset += p.numel();
        for x in p.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = Header {
        kind: "model".into(),
        config: model.config().clone(),
        dtype: Dtype::F32,
        step: None,
        tensors,
        provenance: provenance.clone(),
    };
    encode(&header, &payload)
}

/// Writes a model checkpoint and returns its checksum.
pub fn save_checkpoint(path: &Path, model: &LanguageModel, provenance: &Provenance) -> Result<u32> {
    let bytes = encode_model(model, provenance);
    write_file(path, &bytes)?;
    Ok(trailing_checksum(&bytes))
}

fn trailing_checksum(bytes: &[u8]) -> u32 {
    u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_model(path, &bytes)
}

pub fn decode_model(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload, checksum) = decode(path, bytes)?;
    if header.kind != "model" || header.dtype != Dtype::F32 {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("expected an f32 model file, found `{}`", header.kind),
        });
    }
    let mut named = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let data = payload[t.offset * 4..(t.offset + n) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        named.push((
            t.name.clone(),
            Tensor::new(t.shape.clone(), data).map_err(rkld::Error::from)?,
        ));
    }
    let mut model = LanguageModel::from_params(header.config, named)?;
    model.set_trainable(false);
    Ok(Checkpoint {
        model,
        provenance: header.provenance,
        checksum,
    })
}

/// Writes Adam moments for `model`'s parameters; returns the checksum.
pub fn save_opt_state(
    path: &Path,
    model: &LanguageModel,
    state: &OptState,
    provenance: &Provenance,
) -> Result<u32> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    for (kind, moments) in [("m", &state.m), ("v", &state.v)] {
        for ((name, p), mom) in model.names().iter().zip(model.params()).zip(moments) {
            tensors.push(TensorEntry {
                name: format!("{kind}/{name}"),
                shape: p.shape().to_vec(),
                offset,
            });
            offset += mom.len();
            for x in mom {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let header = Header {
        kind: "adam".into(),
        config: model.config().clone(),
        dtype: Dtype::F64,
        step: Some(state.step),
        tensors,
        provenance: provenance.clone(),
    };
    let bytes = encode(&header, &payload);
    write_file(path, &bytes)?;
    Ok(trailing_checksum(&bytes))
}

/// Reads Adam moments and checks them against `model`'s parameter layout.
pub fn load_opt_state(path: &Path, model: &LanguageModel) -> Result<OptState> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (header, payload, _) = decode(path, &bytes)?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if header.kind != "adam" || header.dtype != Dtype::F64 {
        return Err(corrupt(format!(
            "expected an optimizer file, found `{}`",
            header.kind
        )));
    }
    if &header.config != model.config() {
        return Err(corrupt(
            "optimizer state belongs to a different model shape".into(),
        ));
    }
    let n = model.params().len();
    if header.tensors.len() != 2 * n {
        return Err(corrupt(
            "optimizer tensor count does not match the model".into(),
        ));
    }
    let read = |t: &TensorEntry| -> Vec<f64> {
        let n: usize = t.shape.iter().product();
        payload[t.offset * 8..(t.offset + n) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    let mut state = OptState::new(model);
    for (i, (name, p)) in model.names().iter().zip(model.params()).enumerate() {
        let (m, v) = (&header.tensors[i], &header.tensors[n + i]);
        if m.name != format!("m/{name}") || v.name != format!("v/{name}") || m.shape != p.shape() {
            return Err(corrupt(format!(
                "optimizer entry for `{name}` is missing or misshapen"
            )));
        }
        state.m[i] = read(m);
        state.v[i] = read(v);
    }
    state.step = header.step.unwrap_or(0);
    Ok(state)
}

/// Reads only the provenance and checksum of a checkpoint, validating the
/// checksum but not building the model.
pub fn peek(path: &Path) -> Result<(Provenance, u32)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (header, _, checksum) = decode(path, &bytes)?;
    Ok((header.provenance, checksum))
}
