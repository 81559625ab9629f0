//! The `LDAP1` single-file model container and parameter accounting.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LDAP1"            5 bytes
//! header length      u64
//! header             UTF-8 JSON (layer specs, tensor offsets/shapes, aux sections)
//! blob               f32 tensor values, then f64 aux values
//! ```
//!
//! Offsets in the header are byte offsets from the start of the blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AuxSection, Layer, LayerSpec, ModelDescriptor};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"LDAP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    aux: Vec<AuxEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
    blob_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AuxEntry {
    kind: String,
    meta: serde_json::Value,
    offset: u64,
    count: u64,
}

pub fn to_bytes(model: &ModelDescriptor) -> Result<Vec<u8>> {
    model.validate()?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        if let Some((w, b)) = layer.params() {
            tensors.push(TensorEntry {
                name: format!("layers.{i}.weight"),
                shape: w.shape().to_vec(),
                offset: blob.len() as u64,
            });
            w.data().iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
            tensors.push(TensorEntry {
                name: format!("layers.{i}.bias"),
                shape: vec![b.len()],
                offset: blob.len() as u64,
            });
            b.iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
        }
    }
    let mut aux = Vec::new();
    for section in &model.aux {
        aux.push(AuxEntry {
            kind: section.kind.clone(),
            meta: section.meta.clone(),
            offset: blob.len() as u64,
            count: section.values.len() as u64,
        });
        section.values.iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
    }
    let header = Header {
        version: FORMAT_VERSION,
        input_shape: model.input_shape,
        layers: model.specs(),
        tensors,
        aux,
        provenance: model.provenance.clone(),
        blob_bytes: blob.len() as u64,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Header(e.to_string()))?;

    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelDescriptor> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 8 {
        return Err(Error::Truncated("header length field".into()));
    }
    let header_len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < header_len {
        return Err(Error::Truncated(format!(
            "header declares {header_len} bytes, {} present",
            rest.len()
        )));
    }
    let header: Header =
        serde_json::from_slice(&rest[..header_len]).map_err(|e| Error::Header(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Header(format!("unsupported format version {}", header.version)));
    }
    let blob = &rest[header_len..];
    if (blob.len() as u64) < header.blob_bytes {
        return Err(Error::Truncated(format!(
            "blob declares {} bytes, {} present",
            header.blob_bytes,
            blob.len()
        )));
    }

    let mut entries = header.tensors.iter();
    let mut layers = Vec::with_capacity(header.layers.len());
    for (i, &spec) in header.layers.iter().enumerate() {
        let mut layer = Layer::from_spec(spec)?;
        if let Some((w, b)) = layer.params_mut() {
            let we = entries
                .next()
                .ok_or_else(|| Error::Header(format!("missing weight tensor for layer {i}")))?;
            let be = entries
                .next()
                .ok_or_else(|| Error::Header(format!("missing bias tensor for layer {i}")))?;
            if we.shape != w.shape() {
                return Err(Error::Header(format!(
                    "{} has shape {:?}, layer {i} declares {:?}",
                    we.name,
                    we.shape,
                    w.shape()
                )));
            }
            if be.shape != [b.len()] {
                return Err(Error::Header(format!(
                    "{} has shape {:?}, layer {i} declares [{}]",
                    be.name,
                    be.shape,
                    b.len()
                )));
            }
            let n = w.len();
            *w = Tensor::new(we.shape.clone(), read_f32s(blob, header.blob_bytes, we.offset, n)?)?;
            *b = read_f32s(blob, header.blob_bytes, be.offset, b.len())?;
        }
        layers.push(layer);
    }
    if entries.next().is_some() {
        return Err(Error::Header("more tensors than parameterized layers".into()));
    }
    let aux = header
        .aux
        .into_iter()
        .map(|e| {
            Ok(AuxSection {
                values: read_f64s(blob, header.blob_bytes, e.offset, e.count as usize)?,
                kind: e.kind,
                meta: e.meta,
            })
        })
        .collect::<Result<_>>()?;

    let model = ModelDescriptor {
        input_shape: header.input_shape,
        layers,
        provenance: header.provenance,
        aux,
    };
    model.validate()?;
    Ok(model)
}

fn blob_range(limit: u64, offset: u64, bytes: usize) -> Result<std::ops::Range<usize>> {
    let end = offset
        .checked_add(bytes as u64)
        .filter(|&e| e <= limit)
        .ok_or_else(|| Error::Truncated(format!("entry at offset {offset} runs past the blob")))?;
    Ok(offset as usize..end as usize)
}

fn read_f32s(blob: &[u8], limit: u64, offset: u64, n: usize) -> Result<Vec<f32>> {
    let r = blob_range(limit, offset, n * 4)?;
    Ok(blob[r]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

fn read_f64s(blob: &[u8], limit: u64, offset: u64, n: usize) -> Result<Vec<f64>> {
    let r = blob_range(limit, offset, n * 8)?;
    Ok(blob[r]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn save_model(model: &ModelDescriptor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelDescriptor> {
    from_bytes(&std::fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCount {
    pub conv: usize,
    /// Everything after the last conv layer.
    pub fc: usize,
    pub total: usize,
}

pub fn model_param_count(model: &ModelDescriptor) -> ParamCount {
    let last_conv = model.last_conv_index();
    let mut count = ParamCount::default();
    for (i, layer) in model.layers.iter().enumerate() {
        let n = layer.param_count();
        if layer.is_conv() || last_conv.is_some_and(|lc| i < lc) {
            count.conv += n;
        } else {
            count.fc += n;
        }
        count.total += n;
    }
    count
}
