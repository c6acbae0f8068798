//! NWF v1 container codec.
//!
//! ```text
//! bytes 0..4    magic "3ASW"
//! bytes 4..8    version, u32 little-endian (= 1)
//! bytes 8..16   header_len, u64 little-endian
//! header_len    UTF-8 JSON {"layers": [...], "metadata": {...}}
//! remainder     payload: raw f32 little-endian, row-major tensors
//! ```
//!
//! The payload must end exactly where the last tensor ends, so any truncated
//! file is rejected.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canon;
use crate::network::{LayerKind, LayerRecord, NetworkError, NetworkWeights};

pub const MAGIC: [u8; 4] = *b"3ASW";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("not an NWF file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported NWF version {0}")]
    VersionUnsupported(u32),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("layer `{layer}` contains a NaN or infinite weight")]
    NonFiniteWeight { layer: String },
    #[error("layer `{layer}` uses dtype `{dtype}`; only f32 is supported")]
    UnsupportedDtype { layer: String, dtype: String },
    #[error("invalid network: {0}")]
    Invalid(NetworkError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    layers: Vec<HeaderLayer>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLayer {
    name: String,
    kind: LayerKind,
    shape: Vec<usize>,
    byte_offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coupling_group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    follows: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pool: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    groups: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spatial_multiplier: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dtype: Option<String>,
}

impl From<&LayerRecord> for HeaderLayer {
    fn from(l: &LayerRecord) -> Self {
        HeaderLayer {
            name: l.name.clone(),
            kind: l.kind,
            shape: l.shape.clone(),
            byte_offset: l.byte_offset,
            coupling_group: l.coupling_group.clone(),
            follows: l.follows.clone(),
            bias_offset: l.bias_offset,
            stride: l.stride,
            padding: l.padding,
            pool: l.pool,
            groups: l.groups,
            spatial_multiplier: l.spatial_multiplier,
            dtype: None,
        }
    }
}

impl From<HeaderLayer> for LayerRecord {
    fn from(h: HeaderLayer) -> Self {
        LayerRecord {
            name: h.name,
            kind: h.kind,
            shape: h.shape,
            byte_offset: h.byte_offset,
            coupling_group: h.coupling_group,
            follows: h.follows,
            bias_offset: h.bias_offset,
            stride: h.stride,
            padding: h.padding,
            pool: h.pool,
            groups: h.groups,
            spatial_multiplier: h.spatial_multiplier,
        }
    }
}

fn header_json(net: &NetworkWeights) -> String {
    let header = Header {
        layers: net.layers().iter().map(HeaderLayer::from).collect(),
        metadata: net.metadata().clone(),
    };
    canon::to_string(&header).expect("header serialization is infallible")
}

/// Serializes a network into NWF v1 bytes. Equal networks encode to equal bytes.
pub fn encode(net: &NetworkWeights) -> Vec<u8> {
    let header = header_json(net);
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + net.payload().len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(net.payload());
    out
}

fn corrupt(msg: impl Into<String>) -> FormatError {
    FormatError::CorruptHeader(msg.into())
}

/// Parses and fully validates NWF v1 bytes.
pub fn decode(bytes: &[u8]) -> Result<NetworkWeights, FormatError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(corrupt("file ends inside the preamble"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(FormatError::VersionUnsupported(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| corrupt("header length exceeds file size"))? as usize;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| corrupt(format!("header JSON: {e}")))?;
    let payload = &bytes[header_end..];

    let mut extent: u64 = 0;
    for layer in &header.layers {
        if let Some(dtype) = &layer.dtype {
            if dtype != "f32" {
                return Err(FormatError::UnsupportedDtype {
                    layer: layer.name.clone(),
                    dtype: dtype.clone(),
                });
            }
        }
        let numel = layer
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| corrupt(format!("layer `{}`: shape overflows", layer.name)))?;
        let weight_end = numel
            .checked_mul(4)
            .and_then(|b| b.checked_add(layer.byte_offset))
            .ok_or_else(|| corrupt(format!("layer `{}`: offset overflows", layer.name)))?;
        extent = extent.max(weight_end);
        if let Some(off) = layer.bias_offset {
            let rows = match layer.kind {
                LayerKind::BatchNorm => layer.shape.get(1),
                _ => layer.shape.first(),
            }
            .copied()
            .unwrap_or(0) as u64;
            let bias_end = rows
                .checked_mul(4)
                .and_then(|b| b.checked_add(off))
                .ok_or_else(|| corrupt(format!("layer `{}`: bias offset overflows", layer.name)))?;
            extent = extent.max(bias_end);
        }
    }
    if extent != payload.len() as u64 {
        return Err(corrupt(format!(
            "payload holds {} bytes but tensors span {extent}",
            payload.len()
        )));
    }

    let layers = header.layers.into_iter().map(LayerRecord::from).collect();
    NetworkWeights::new(layers, payload.to_vec(), header.metadata).map_err(|e| match e {
        NetworkError::NonFinite { layer } => FormatError::NonFiniteWeight { layer },
        NetworkError::OutOfBounds { layer } => corrupt(format!("layer `{layer}` exceeds payload")),
        other => FormatError::Invalid(other),
    })
}

/// SHA-256 of the canonical encoding, as lowercase hex.
pub fn fingerprint(net: &NetworkWeights) -> String {
    let digest = Sha256::digest(encode(net));
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// First 16 bytes of an NWF file, for tests and tooling.
pub fn preamble(header_len: u64) -> [u8; PREAMBLE] {
    let mut out = [0u8; PREAMBLE];
    out[..4].copy_from_slice(&MAGIC);
    out[4..8].copy_from_slice(&VERSION.to_le_bytes());
    out[8..].copy_from_slice(&header_len.to_le_bytes());
    out
}

impl FormatError {
    pub fn layer(&self) -> Option<String> {
        match self {
            FormatError::NonFiniteWeight { layer } | FormatError::UnsupportedDtype { layer, .. } => {
                Some(layer.to_string())
            }
            _ => None,
        }
    }
}
