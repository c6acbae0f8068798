//! Parameter and FLOP accounting, reduction reports and curve CSV.
//!
//! Conventions: conv params `out·in·kh·kw (+out with bias)`, conv FLOPs
//! `2·out·in·kh·kw·h_out·w_out`; batch-norm params `4·C`, FLOPs `2·C·h·w`;
//! linear params `out·in (+out)`, FLOPs `2·out·in`. [`FlopConvention::Macs`]
//! halves every FLOP figure.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchLayer, Architecture};
use crate::canon;
use crate::network::LayerKind;
use crate::spectral::LayerSpectrum;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("layer `{layer}`: spatial size becomes non-positive")]
    ShapeMismatch { layer: String },
    #[error("layer `{layer}` expects {found} input channels but its producer gives {expected}")]
    ChannelMismatch {
        layer: String,
        expected: usize,
        found: usize,
    },
    #[error("before/after statistics cover different layers")]
    LayerSetMismatch,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopConvention {
    /// Multiply-accumulates counted as two operations.
    #[default]
    Flops,
    Macs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub const CIFAR: InputShape = InputShape {
        channels: 3,
        height: 32,
        width: 32,
    };

    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        InputShape {
            channels,
            height,
            width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer_name: String,
    pub kind: LayerKind,
    pub params: u64,
    pub flops: u64,
    pub out_spatial: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStats {
    pub per_layer: Vec<LayerStats>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl ModelStats {
    pub fn layer(&self, name: &str) -> Option<&LayerStats> {
        self.per_layer.iter().find(|l| l.layer_name == name)
    }

    pub fn to_json(&self) -> String {
        canon::to_string(self).expect("stats serialization is infallible")
    }

    pub fn to_text(&self) -> String {
        let width = self
            .per_layer
            .iter()
            .map(|l| l.layer_name.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:<9}  {:>14}  {:>16}  {:>9}", "layer", "kind", "params", "flops", "out");
        for l in &self.per_layer {
            let spatial = format!("{}x{}", l.out_spatial.0, l.out_spatial.1);
            let _ = writeln!(
                out,
                "{:<width$}  {:<9}  {:>14}  {:>16}  {:>9}",
                l.layer_name,
                l.kind.as_str(),
                l.params,
                l.flops,
                spatial
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:<9}  {:>14}  {:>16}",
            "total", "", self.total_params, self.total_flops
        );
        out
    }
}

fn conv_output(layer: &ArchLayer, size: usize, axis: usize) -> Option<usize> {
    let k = layer.kernel_size?[axis];
    let pad = layer.padding.map_or(0, |p| p[axis]);
    let stride = layer.stride.unwrap_or(1);
    let padded = size + 2 * pad;
    if padded < k {
        return None;
    }
    let out = (padded - k) / stride + 1;
    (out > 0).then_some(out)
}

/// Counts parameters and FLOPs, propagating spatial size from `input`.
pub fn count_stats(
    arch: &Architecture,
    input: InputShape,
    convention: FlopConvention,
) -> Result<ModelStats, StatsError> {
    // Spatial size each layer hands to its consumers (after pooling), and the
    // pre-pool size its batch-norm sees.
    let mut emitted: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut produced: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut out_channels: BTreeMap<&str, usize> = BTreeMap::new();
    let mut per_layer = Vec::with_capacity(arch.layers.len());
    let shape_err = |layer: &ArchLayer| StatsError::ShapeMismatch {
        layer: layer.name.clone(),
    };
    let divisor = match convention {
        FlopConvention::Flops => 1,
        FlopConvention::Macs => 2,
    };

    for layer in &arch.layers {
        let upstream = layer.follows.as_deref();
        let source_channels = match upstream {
            Some(up) => out_channels.get(up).copied().unwrap_or(0),
            None => input.channels,
        };
        let in_spatial = match upstream {
            Some(up) => emitted.get(up).copied().unwrap_or((input.height, input.width)),
            None => (input.height, input.width),
        };
        let bias = if layer.bias { layer.out_channels as u64 } else { 0 };
        let (params, flops, spatial) = match layer.kind {
            LayerKind::Conv2d => {
                if layer.in_channels != source_channels {
                    return Err(StatsError::ChannelMismatch {
                        layer: layer.name.clone(),
                        expected: source_channels,
                        found: layer.in_channels,
                    });
                }
                let [kh, kw] = layer.kernel_size.ok_or_else(|| shape_err(layer))?;
                let h = conv_output(layer, in_spatial.0, 0).ok_or_else(|| shape_err(layer))?;
                let w = conv_output(layer, in_spatial.1, 1).ok_or_else(|| shape_err(layer))?;
                let weights = (layer.out_channels * layer.in_channels * kh * kw) as u64;
                (weights + bias, 2 * weights * (h * w) as u64, (h, w))
            }
            LayerKind::BatchNorm => {
                let spatial = match upstream {
                    Some(up) => produced.get(up).copied().unwrap_or(in_spatial),
                    None => in_spatial,
                };
                let c = layer.out_channels as u64;
                (4 * c, 2 * c * (spatial.0 * spatial.1) as u64, spatial)
            }
            LayerKind::Linear => {
                let multiplier = layer.spatial_multiplier.unwrap_or(1);
                if upstream.is_some() && layer.in_channels != source_channels * multiplier {
                    return Err(StatsError::ChannelMismatch {
                        layer: layer.name.clone(),
                        expected: source_channels * multiplier,
                        found: layer.in_channels,
                    });
                }
                let weights = (layer.out_channels * layer.in_channels) as u64;
                (weights + bias, 2 * weights, (1, 1))
            }
        };
        // A batch norm works at its conv's pre-pool size but passes the pooled
        // map on, since the pool sits after the normalization.
        let base = if layer.kind == LayerKind::BatchNorm { in_spatial } else { spatial };
        let pool = layer.pool.unwrap_or(1);
        let pooled = (base.0 / pool, base.1 / pool);
        if pooled.0 == 0 || pooled.1 == 0 {
            return Err(shape_err(layer));
        }
        produced.insert(&layer.name, spatial);
        emitted.insert(&layer.name, pooled);
        out_channels.insert(&layer.name, layer.out_channels);
        per_layer.push(LayerStats {
            layer_name: layer.name.clone(),
            kind: layer.kind,
            params,
            flops: flops / divisor,
            out_spatial: spatial,
        });
    }
    let total_params = per_layer.iter().map(|l| l.params).sum();
    let total_flops = per_layer.iter().map(|l| l.flops).sum();
    Ok(ModelStats {
        per_layer,
        total_params,
        total_flops,
    })
}

/// `100·(1 - after/before)`; zero when `before` is zero.
pub fn percent_reduction(before: u64, after: u64) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (1.0 - after as f64 / before as f64)
    }
}

/// Two decimal places, as in published compression tables.
pub fn format_percent(value: f64) -> String {
    format!("{value:.2}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub layer_name: String,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub params_pruned_pct: f64,
    pub flops_pruned_pct: f64,
}

impl Reduction {
    fn new(name: &str, params: (u64, u64), flops: (u64, u64)) -> Self {
        Reduction {
            layer_name: name.to_string(),
            params_before: params.0,
            params_after: params.1,
            flops_before: flops.0,
            flops_after: flops.1,
            params_pruned_pct: percent_reduction(params.0, params.1),
            flops_pruned_pct: percent_reduction(flops.0, flops.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub layers: Vec<Reduction>,
    pub total: Reduction,
}

pub fn reduction_report(before: &ModelStats, after: &ModelStats) -> Result<ReductionReport, StatsError> {
    let names = |s: &ModelStats| -> BTreeSet<String> {
        s.per_layer.iter().map(|l| l.layer_name.clone()).collect()
    };
    if before.per_layer.len() != after.per_layer.len() || names(before) != names(after) {
        return Err(StatsError::LayerSetMismatch);
    }
    let layers = before
        .per_layer
        .iter()
        .map(|b| {
            let a = after.layer(&b.layer_name).expect("layer sets checked");
            Reduction::new(&b.layer_name, (b.params, a.params), (b.flops, a.flops))
        })
        .collect();
    Ok(ReductionReport {
        layers,
        total: Reduction::new(
            "total",
            (before.total_params, after.total_params),
            (before.total_flops, after.total_flops),
        ),
    })
}

impl ReductionReport {
    pub fn to_text(&self) -> String {
        let width = self
            .layers
            .iter()
            .map(|l| l.layer_name.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>14}  {:>14}  {:>9}  {:>16}  {:>16}  {:>9}",
            "layer", "params", "params'", "param%", "flops", "flops'", "flop%"
        );
        for r in self.layers.iter().chain(core::iter::once(&self.total)) {
            let _ = writeln!(
                out,
                "{:<width$}  {:>14}  {:>14}  {:>9}  {:>16}  {:>16}  {:>9}",
                r.layer_name,
                r.params_before,
                r.params_after,
                format_percent(r.params_pruned_pct),
                r.flops_before,
                r.flops_after,
                format_percent(r.flops_pruned_pct)
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        canon::to_string(self).expect("report serialization is infallible")
    }
}

fn csv_field(out: &mut String, field: &str) {
    if field.contains([',', '"', '\n', '\r']) {
        out.push('"');
        out.push_str(&field.replace('"', "\"\""));
        out.push('"');
    } else {
        out.push_str(field);
    }
}

/// Cumulative contribution curves as CSV.
///
/// A `layer,n,alpha` block with one row per layer and component count, a
/// blank line, then a `layer,kept,total` summary block.
pub fn curve_csv(spectra: &[LayerSpectrum]) -> String {
    let mut out = String::from("layer,n,alpha\n");
    for s in spectra {
        for (i, a) in s.alpha.iter().enumerate() {
            csv_field(&mut out, &s.layer_name);
            let _ = writeln!(out, ",{},{}", i + 1, canon::format_f64(*a));
        }
    }
    out.push_str("\nlayer,kept,total\n");
    for s in spectra {
        csv_field(&mut out, &s.layer_name);
        let _ = writeln!(out, ",{},{}", s.selected, s.filters());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerRecord, NetworkBuilder};
    use alloc::vec;

    fn conv_net() -> Architecture {
        let mut b = NetworkBuilder::new();
        b.push(LayerRecord::conv("conv", 8, 3, 3), &[0.0; 216], None);
        Architecture::from_network(&b.build().unwrap())
    }

    #[test]
    fn single_conv_counts() {
        let s = count_stats(&conv_net(), InputShape::CIFAR, FlopConvention::Flops).unwrap();
        assert_eq!(s.total_params, 216);
        assert_eq!(s.total_flops, 2 * 8 * 3 * 9 * 32 * 32);
        assert_eq!(s.total_flops, 442_368);
        assert_eq!(s.per_layer[0].out_spatial, (32, 32));
        let macs = count_stats(&conv_net(), InputShape::CIFAR, FlopConvention::Macs).unwrap();
        assert_eq!(macs.total_flops, 221_184);
    }

    #[test]
    fn input_channel_mismatch() {
        let err = count_stats(&conv_net(), InputShape::new(1, 32, 32), FlopConvention::Flops);
        assert!(matches!(err, Err(StatsError::ChannelMismatch { .. })));
    }

    #[test]
    fn collapsing_spatial_size_is_an_error() {
        let err = count_stats(&conv_net(), InputShape::new(3, 1, 1), FlopConvention::Flops);
        assert!(err.is_ok(), "same padding keeps 1x1");
        let mut b = NetworkBuilder::new();
        b.push(LayerRecord::conv("c", 1, 1, 5).with_padding(0), &[0.0; 25], None);
        let arch = Architecture::from_network(&b.build().unwrap());
        assert_eq!(
            count_stats(&arch, InputShape::new(1, 3, 3), FlopConvention::Flops),
            Err(StatsError::ShapeMismatch { layer: "c".into() })
        );
    }

    #[test]
    fn percentages() {
        assert_eq!(format_percent(percent_reduction(100, 25)), "75.00");
        assert_eq!(format_percent(percent_reduction(7, 7)), "0.00");
        assert_eq!(percent_reduction(0, 0), 0.0);
    }

    #[test]
    fn identical_stats_report_zero() {
        let s = count_stats(&conv_net(), InputShape::CIFAR, FlopConvention::Flops).unwrap();
        let r = reduction_report(&s, &s).unwrap();
        assert_eq!(r.total.params_pruned_pct, 0.0);
        assert!(r.to_text().contains("0.00"));
    }

    #[test]
    fn layer_set_mismatch() {
        let s = count_stats(&conv_net(), InputShape::CIFAR, FlopConvention::Flops).unwrap();
        let mut other = s.clone();
        other.per_layer[0].layer_name = "renamed".into();
        assert_eq!(reduction_report(&s, &other), Err(StatsError::LayerSetMismatch));
    }

    #[test]
    fn curve_rows() {
        let s = LayerSpectrum {
            layer_name: "L".into(),
            eigenvalues: vec![1.0, 1.0],
            alpha: vec![0.5, 1.0],
            selected: 1,
            info_measure: 0.0,
            delta: 0.5,
        };
        let csv = curve_csv(&[s]);
        assert_eq!(
            csv,
            "layer,n,alpha\nL,1,5.0000000000000000e-1\nL,2,1.0000000000000000e0\n\nlayer,kept,total\nL,1,2\n"
        );
    }

    #[test]
    fn csv_quotes_awkward_names() {
        let s = LayerSpectrum::zero_variance("a,\"b\"", 1, 0.5);
        assert!(curve_csv(&[s]).contains("\"a,\"\"b\"\"\",1,"));
    }
}
