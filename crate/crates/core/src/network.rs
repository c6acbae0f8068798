//! In-memory network weights: layer records over a little-endian f32 payload.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Kind of a stored layer.
///
/// * `Conv2d` weights are `(out_filters, in_channels, kh, kw)`.
/// * `BatchNorm` stores `(4, channels)`: rows are gamma, beta, running mean
///   and running variance.
/// * `Linear` weights are `(out_features, in_features)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d,
    #[serde(rename = "batchnorm")]
    BatchNorm,
    Linear,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Linear => "linear",
        }
    }
}

/// One named tensor in a [`NetworkWeights`] container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    /// Offset of the weight tensor in the payload, in bytes.
    pub byte_offset: u64,
    /// Layers tagged with the same group are summed downstream and must keep
    /// identical filter sets.
    pub coupling_group: Option<String>,
    /// Name of the earlier layer whose output channels this layer consumes.
    pub follows: Option<String>,
    /// Offset of a bias vector of length `shape[0]` (conv and linear only).
    pub bias_offset: Option<u64>,
    pub stride: Option<usize>,
    pub padding: Option<usize>,
    /// Spatial downsampling factor applied to this layer's output before any
    /// consumer sees it.
    pub pool: Option<usize>,
    pub groups: Option<usize>,
    /// Input features contributed by each upstream channel (flattened spatial
    /// connectivity). Defaults to 1, i.e. global average pooling.
    pub spatial_multiplier: Option<usize>,
}

impl LayerRecord {
    pub fn new(name: impl Into<String>, kind: LayerKind, shape: Vec<usize>) -> Self {
        LayerRecord {
            name: name.into(),
            kind,
            shape,
            byte_offset: 0,
            coupling_group: None,
            follows: None,
            bias_offset: None,
            stride: None,
            padding: None,
            pool: None,
            groups: None,
            spatial_multiplier: None,
        }
    }

    pub fn conv(name: impl Into<String>, out: usize, input: usize, k: usize) -> Self {
        Self::new(name, LayerKind::Conv2d, alloc::vec![out, input, k, k])
    }

    pub fn batch_norm(name: impl Into<String>, channels: usize) -> Self {
        Self::new(name, LayerKind::BatchNorm, alloc::vec![4, channels])
    }

    pub fn linear(name: impl Into<String>, out: usize, input: usize) -> Self {
        Self::new(name, LayerKind::Linear, alloc::vec![out, input])
    }

    pub fn following(mut self, producer: impl Into<String>) -> Self {
        self.follows = Some(producer.into());
        self
    }

    pub fn in_group(mut self, group: impl Into<String>) -> Self {
        self.coupling_group = Some(group.into());
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = Some(stride);
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = Some(padding);
        self
    }

    pub fn with_pool(mut self, pool: usize) -> Self {
        self.pool = Some(pool);
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = Some(groups);
        self
    }

    pub fn with_spatial_multiplier(mut self, multiplier: usize) -> Self {
        self.spatial_multiplier = Some(multiplier);
        self
    }

    /// Number of f32 values in the weight tensor (saturating).
    pub fn numel(&self) -> usize {
        self.shape.iter().fold(1usize, |acc, &d| acc.saturating_mul(d))
    }

    /// Leading dimension: filters for conv, features for linear, channels for BN.
    pub fn out_channels(&self) -> usize {
        match self.kind {
            LayerKind::BatchNorm => self.shape.get(1).copied().unwrap_or(0),
            _ => self.shape.first().copied().unwrap_or(0),
        }
    }

    pub fn in_channels(&self) -> usize {
        match self.kind {
            LayerKind::BatchNorm => self.shape.get(1).copied().unwrap_or(0),
            _ => self.shape.get(1).copied().unwrap_or(0),
        }
    }

    pub fn is_conv(&self) -> bool {
        self.kind == LayerKind::Conv2d
    }
}

/// A dense row-major f32 tensor copied out of a payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Tensor { shape, data }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetworkError {
    #[error("duplicate layer name `{0}`")]
    DuplicateName(String),
    #[error("layer `{layer}` follows `{target}`, which is not an earlier layer")]
    UnknownFollows { layer: String, target: String },
    #[error("layer `{layer}` has an invalid shape: {reason}")]
    BadShape { layer: String, reason: String },
    #[error("layer `{layer}` has an invalid attribute: {reason}")]
    BadAttribute { layer: String, reason: String },
    #[error("layer `{layer}` extends past the end of the payload")]
    OutOfBounds { layer: String },
    #[error("layer `{layer}` contains a non-finite value")]
    NonFinite { layer: String },
}

/// Validated network container. Layer order is topological.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkWeights {
    layers: Vec<LayerRecord>,
    payload: Vec<u8>,
    metadata: BTreeMap<String, String>,
}

impl NetworkWeights {
    pub fn new(
        layers: Vec<LayerRecord>,
        payload: Vec<u8>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self, NetworkError> {
        validate(&layers, &payload)?;
        Ok(NetworkWeights {
            layers,
            payload,
            metadata,
        })
    }

    pub fn layers(&self) -> &[LayerRecord] {
        &self.layers
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn layer(&self, name: &str) -> Option<&LayerRecord> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &LayerRecord)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.is_conv())
    }

    /// Raw little-endian bytes of a layer's weight tensor.
    pub fn weight_bytes(&self, index: usize) -> &[u8] {
        let layer = &self.layers[index];
        let start = layer.byte_offset as usize;
        &self.payload[start..start + 4 * layer.numel()]
    }

    pub fn bias_bytes(&self, index: usize) -> Option<&[u8]> {
        let layer = &self.layers[index];
        layer.bias_offset.map(|off| {
            let start = off as usize;
            &self.payload[start..start + 4 * layer.out_channels()]
        })
    }

    pub fn tensor(&self, index: usize) -> Tensor {
        Tensor::new(
            self.layers[index].shape.clone(),
            decode_f32(self.weight_bytes(index)),
        )
    }

    pub fn bias(&self, index: usize) -> Option<Vec<f32>> {
        self.bias_bytes(index).map(decode_f32)
    }

    /// The batch-norm layer attached to `conv`, if any.
    pub fn batch_norm_for(&self, conv: &str) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| l.kind == LayerKind::BatchNorm && l.follows.as_deref() == Some(conv))
    }

    /// Gamma row of a batch-norm layer.
    pub fn bn_gamma(&self, index: usize) -> Vec<f32> {
        let layer = &self.layers[index];
        let channels = layer.out_channels();
        decode_f32(&self.weight_bytes(index)[..4 * channels])
    }

    /// Total number of stored f32 values (weights plus biases).
    pub fn value_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.numel() + if l.bias_offset.is_some() { l.out_channels() } else { 0 })
            .sum()
    }
}

pub(crate) fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn check_range(layer: &LayerRecord, offset: u64, values: usize, payload: &[u8]) -> Result<(), NetworkError> {
    let end = (values as u64)
        .checked_mul(4)
        .and_then(|b| b.checked_add(offset));
    match end {
        Some(end) if end <= payload.len() as u64 => Ok(()),
        _ => Err(NetworkError::OutOfBounds {
            layer: layer.name.clone(),
        }),
    }
}

fn bad_shape(layer: &LayerRecord, reason: &str) -> NetworkError {
    NetworkError::BadShape {
        layer: layer.name.clone(),
        reason: reason.to_string(),
    }
}

fn bad_attr(layer: &LayerRecord, reason: &str) -> NetworkError {
    NetworkError::BadAttribute {
        layer: layer.name.clone(),
        reason: reason.to_string(),
    }
}

fn validate(layers: &[LayerRecord], payload: &[u8]) -> Result<(), NetworkError> {
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for layer in layers {
        if let Some(target) = &layer.follows {
            if !seen.contains(target.as_str()) {
                return Err(NetworkError::UnknownFollows {
                    layer: layer.name.clone(),
                    target: target.clone(),
                });
            }
        }
        if !seen.insert(layer.name.as_str()) {
            return Err(NetworkError::DuplicateName(layer.name.clone()));
        }
        if layer.shape.contains(&0) {
            return Err(bad_shape(layer, "dimensions must be positive"));
        }
        let rank = layer.shape.len();
        match layer.kind {
            LayerKind::Conv2d if rank != 4 => {
                return Err(bad_shape(layer, &format!("conv2d needs rank 4, got {rank}")))
            }
            LayerKind::Linear if rank != 2 => {
                return Err(bad_shape(layer, &format!("linear needs rank 2, got {rank}")))
            }
            LayerKind::BatchNorm if rank != 2 || layer.shape[0] != 4 => {
                return Err(bad_shape(layer, "batchnorm needs shape (4, channels)"))
            }
            _ => {}
        }
        for (field, value) in [
            ("stride", layer.stride),
            ("pool", layer.pool),
            ("groups", layer.groups),
            ("spatial_multiplier", layer.spatial_multiplier),
        ] {
            if value == Some(0) {
                return Err(bad_attr(layer, &format!("{field} must be positive")));
            }
        }
        if layer.kind != LayerKind::Conv2d
            && (layer.stride.is_some() || layer.padding.is_some() || layer.groups.is_some())
        {
            return Err(bad_attr(layer, "stride, padding and groups apply to conv2d only"));
        }
        if layer.kind != LayerKind::Linear && layer.spatial_multiplier.is_some() {
            return Err(bad_attr(layer, "spatial_multiplier applies to linear only"));
        }
        if layer.kind == LayerKind::BatchNorm && layer.bias_offset.is_some() {
            return Err(bad_attr(layer, "batchnorm carries its shift in row 1, not a bias"));
        }

        check_range(layer, layer.byte_offset, layer.numel(), payload)?;
        let start = layer.byte_offset as usize;
        let mut finite = payload[start..start + 4 * layer.numel()]
            .chunks_exact(4)
            .all(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]).is_finite());
        if let Some(off) = layer.bias_offset {
            check_range(layer, off, layer.out_channels(), payload)?;
            let start = off as usize;
            finite &= payload[start..start + 4 * layer.out_channels()]
                .chunks_exact(4)
                .all(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]).is_finite());
        }
        if !finite {
            return Err(NetworkError::NonFinite {
                layer: layer.name.clone(),
            });
        }
    }
    Ok(())
}

/// Appends tensors back to back and assigns offsets.
#[derive(Debug, Default)]
pub struct NetworkBuilder {
    layers: Vec<LayerRecord>,
    payload: Vec<u8>,
    metadata: BTreeMap<String, String>,
    mismatch: Option<NetworkError>,
}

impl NetworkBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    fn check_lengths(&mut self, record: &LayerRecord, weights: usize, bias: Option<usize>) {
        if self.mismatch.is_some() {
            return;
        }
        if weights != record.numel() || bias.is_some_and(|b| b != record.out_channels()) {
            self.mismatch = Some(NetworkError::OutOfBounds {
                layer: record.name.clone(),
            });
        }
    }

    /// Appends a layer. `weights.len()` must match the record's shape; a
    /// mismatch is reported by [`build`](Self::build).
    pub fn push(&mut self, record: LayerRecord, weights: &[f32], bias: Option<&[f32]>) -> &mut Self {
        self.check_lengths(&record, weights.len(), bias.map(<[f32]>::len));
        let mut record = record;
        record.byte_offset = self.payload.len() as u64;
        for v in weights {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        record.bias_offset = bias.map(|b| {
            let off = self.payload.len() as u64;
            for v in b {
                self.payload.extend_from_slice(&v.to_le_bytes());
            }
            off
        });
        self.layers.push(record);
        self
    }

    /// Like [`push`](Self::push) but copies already-encoded little-endian bytes.
    pub fn push_bytes(&mut self, record: LayerRecord, weights: &[u8], bias: Option<&[u8]>) -> &mut Self {
        self.check_lengths(&record, weights.len() / 4, bias.map(|b| b.len() / 4));
        let mut record = record;
        record.byte_offset = self.payload.len() as u64;
        self.payload.extend_from_slice(weights);
        record.bias_offset = bias.map(|b| {
            let off = self.payload.len() as u64;
            self.payload.extend_from_slice(b);
            off
        });
        self.layers.push(record);
        self
    }

    pub fn build(self) -> Result<NetworkWeights, NetworkError> {
        if let Some(err) = self.mismatch {
            return Err(err);
        }
        NetworkWeights::new(self.layers, self.payload, self.metadata)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn builder_assigns_sequential_offsets() {
        let mut b = NetworkBuilder::new();
        b.push(LayerRecord::conv("c1", 2, 1, 1), &[1.0, 2.0], Some(&[0.5, 0.25]));
        b.push(LayerRecord::batch_norm("bn1", 2).following("c1"), &[1.0; 8], None);
        let net = b.build().unwrap();
        assert_eq!(net.layers()[0].byte_offset, 0);
        assert_eq!(net.layers()[0].bias_offset, Some(8));
        assert_eq!(net.layers()[1].byte_offset, 16);
        assert_eq!(net.bias(0).unwrap(), vec![0.5, 0.25]);
        assert_eq!(net.batch_norm_for("c1"), Some(1));
        assert_eq!(net.value_count(), 12);
    }

    #[test]
    fn rejects_duplicate_names() {
        let mut b = NetworkBuilder::new();
        b.push(LayerRecord::conv("c", 1, 1, 1), &[1.0], None);
        b.push(LayerRecord::conv("c", 1, 1, 1), &[1.0], None);
        assert_eq!(b.build(), Err(NetworkError::DuplicateName("c".into())));
    }

    #[test]
    fn rejects_forward_follows() {
        let mut b = NetworkBuilder::new();
        b.push(LayerRecord::conv("a", 1, 1, 1).following("b"), &[1.0], None);
        b.push(LayerRecord::conv("b", 1, 1, 1), &[1.0], None);
        assert!(matches!(b.build(), Err(NetworkError::UnknownFollows { .. })));
    }

    #[test]
    fn rejects_self_follows() {
        let mut b = NetworkBuilder::new();
        b.push(LayerRecord::conv("a", 1, 1, 1).following("a"), &[1.0], None);
        assert!(matches!(b.build(), Err(NetworkError::UnknownFollows { .. })));
    }

    #[test]
    fn rejects_short_payload() {
        let mut b = NetworkBuilder::new();
        b.push(LayerRecord::conv("a", 2, 1, 1), &[1.0], None);
        assert!(matches!(b.build(), Err(NetworkError::OutOfBounds { .. })));
    }

    #[test]
    fn rejects_non_finite() {
        let mut b = NetworkBuilder::new();
        b.push(LayerRecord::conv("a", 2, 1, 1), &[1.0, f32::NAN], None);
        assert_eq!(b.build(), Err(NetworkError::NonFinite { layer: "a".into() }));
        let mut b = NetworkBuilder::new();
        b.push(LayerRecord::linear("fc", 1, 1), &[1.0], Some(&[f32::INFINITY]));
        assert_eq!(b.build(), Err(NetworkError::NonFinite { layer: "fc".into() }));
    }

    #[test]
    fn rejects_wrong_rank() {
        let mut b = NetworkBuilder::new();
        b.push(LayerRecord::new("a", LayerKind::Conv2d, vec![2, 2]), &[0.0; 4], None);
        assert!(matches!(b.build(), Err(NetworkError::BadShape { .. })));
        let mut b = NetworkBuilder::new();
        b.push(LayerRecord::new("bn", LayerKind::BatchNorm, vec![3, 2]), &[0.0; 6], None);
        assert!(matches!(b.build(), Err(NetworkError::BadShape { .. })));
    }

    #[test]
    fn rejects_misplaced_attributes() {
        let mut b = NetworkBuilder::new();
        b.push(LayerRecord::linear("fc", 1, 1).with_stride(2), &[0.0], None);
        assert!(matches!(b.build(), Err(NetworkError::BadAttribute { .. })));
        let mut b = NetworkBuilder::new();
        b.push(LayerRecord::conv("c", 1, 1, 1).with_pool(0), &[0.0], None);
        assert!(matches!(b.build(), Err(NetworkError::BadAttribute { .. })));
    }
}
