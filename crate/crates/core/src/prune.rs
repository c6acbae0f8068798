//! Filter scoring and channel-consistent network slicing.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon;
use crate::network::{LayerKind, LayerRecord, NetworkBuilder, NetworkError, NetworkWeights, Tensor};
use crate::nwf;
use crate::planner::ArchitecturePlan;

/// Per-filter importance measure. Higher scores survive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Criterion {
    #[default]
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "l2")]
    L2,
    /// Distance to the layer's geometric median.
    #[serde(rename = "gm")]
    GeometricMedian,
    /// `|γ|` of the batch-norm layer following the conv.
    #[serde(rename = "bn")]
    BnScale,
}

impl Criterion {
    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::L1 => "l1",
            Criterion::L2 => "l2",
            Criterion::GeometricMedian => "gm",
            Criterion::BnScale => "bn",
        }
    }
}

impl FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "l1" => Ok(Criterion::L1),
            "l2" => Ok(Criterion::L2),
            "gm" => Ok(Criterion::GeometricMedian),
            "bn" => Ok(Criterion::BnScale),
            other => Err(format!("unknown criterion `{other}` (expected l1, l2, gm or bn)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterScores {
    pub layer_name: String,
    pub scores: Vec<f64>,
    pub criterion: Criterion,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PruneError {
    #[error("plan was computed for a different network")]
    FingerprintMismatch,
    #[error("layer `{0}` has no batch-norm layer to read scales from")]
    MissingBnGamma(String),
    #[error("layer `{layer}`: expected {expected} values, got {found}")]
    LengthMismatch {
        layer: String,
        expected: usize,
        found: usize,
    },
    #[error("layer `{layer}`: cannot keep {keep} of {filters} filters")]
    KeepOutOfRange {
        layer: String,
        keep: usize,
        filters: usize,
    },
    #[error("plan names `{0}`, which is not a conv2d layer of this network")]
    DanglingFollows(String),
    #[error("coupling group `{0}` members disagree on their filter count")]
    CouplingConflict(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Scores every filter of one conv tensor. `bn_gamma` is required for
/// [`Criterion::BnScale`] and ignored otherwise.
pub fn score_filters(
    layer_name: &str,
    tensor: &Tensor,
    criterion: Criterion,
    bn_gamma: Option<&[f32]>,
) -> Result<FilterScores, PruneError> {
    let filters = tensor.shape.first().copied().unwrap_or(0);
    let width = tensor.data.len().checked_div(filters).unwrap_or(0);
    if filters == 0 || width * filters != tensor.data.len() {
        return Err(PruneError::LengthMismatch {
            layer: layer_name.to_string(),
            expected: tensor.shape.iter().product(),
            found: tensor.data.len(),
        });
    }
    let rows = || tensor.data.chunks_exact(width);
    let scores = match criterion {
        Criterion::L1 => rows()
            .map(|r| r.iter().map(|&v| libm::fabs(v as f64)).sum())
            .collect(),
        Criterion::L2 => rows()
            .map(|r| libm::sqrt(r.iter().map(|&v| (v as f64) * (v as f64)).sum()))
            .collect(),
        Criterion::GeometricMedian => {
            let points: Vec<Vec<f64>> = rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
            let median = geometric_median(&points);
            points.iter().map(|p| distance(p, &median.point)).collect()
        }
        Criterion::BnScale => {
            let gamma = bn_gamma.ok_or_else(|| PruneError::MissingBnGamma(layer_name.to_string()))?;
            if gamma.len() != filters {
                return Err(PruneError::LengthMismatch {
                    layer: layer_name.to_string(),
                    expected: filters,
                    found: gamma.len(),
                });
            }
            gamma.iter().map(|&g| libm::fabs(g as f64)).collect()
        }
    };
    Ok(FilterScores {
        layer_name: layer_name.to_string(),
        scores,
        criterion,
    })
}

/// Scores the conv layer at `index` of `net`.
pub fn score_layer(net: &NetworkWeights, index: usize, criterion: Criterion) -> Result<FilterScores, PruneError> {
    let layer = &net.layers()[index];
    let gamma = match criterion {
        Criterion::BnScale => Some(
            net.batch_norm_for(&layer.name)
                .map(|bn| net.bn_gamma(bn))
                .ok_or_else(|| PruneError::MissingBnGamma(layer.name.clone()))?,
        ),
        _ => None,
    };
    score_filters(&layer.name, &net.tensor(index), criterion, gamma.as_deref())
}

/// Scores of every conv layer, in network order.
pub fn score_network(net: &NetworkWeights, criterion: Criterion) -> Result<Vec<FilterScores>, PruneError> {
    net.conv_layers().map(|(i, _)| score_layer(net, i, criterion)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometricMedian {
    pub point: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub const GM_MAX_ITERATIONS: usize = 500;
pub const GM_TOLERANCE: f64 = 1e-7;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Point minimizing the summed Euclidean distance to `points`.
///
/// Weiszfeld iteration from the centroid, using the Vardi–Zhang step when an
/// iterate lands on a data point. Stops when the unit-vector sum
/// `‖Σ (p_i − y)/‖p_i − y‖‖` drops below `1e-7·N`, when steps fall under
/// `1e-10` of the point spread, or after 500 iterations.
///
/// Panics on an empty input.
pub fn geometric_median(points: &[Vec<f64>]) -> GeometricMedian {
    assert!(!points.is_empty(), "geometric median of no points");
    let n = points.len();
    let dim = points[0].len();
    let mut y = vec![0.0; dim];
    for p in points {
        for (yi, pi) in y.iter_mut().zip(p) {
            *yi += pi;
        }
    }
    for yi in &mut y {
        *yi /= n as f64;
    }
    let scale = points.iter().map(|p| distance(p, &y)).sum::<f64>() / n as f64;
    if scale == 0.0 || n == 1 {
        return GeometricMedian {
            point: y,
            iterations: 0,
            converged: true,
        };
    }
    let coincide = 1e-12 * scale;
    for iteration in 1..=GM_MAX_ITERATIONS {
        let mut weighted = vec![0.0; dim];
        let mut residual = vec![0.0; dim];
        let mut weight_sum = 0.0;
        let mut on_point = 0usize;
        for p in points {
            let d = distance(p, &y);
            if d < coincide {
                on_point += 1;
                continue;
            }
            let w = 1.0 / d;
            weight_sum += w;
            for k in 0..dim {
                weighted[k] += w * p[k];
                residual[k] += w * (p[k] - y[k]);
            }
        }
        let r = libm::sqrt(residual.iter().map(|v| v * v).sum());
        if r <= GM_TOLERANCE * n as f64 || (on_point > 0 && r <= on_point as f64) {
            return GeometricMedian {
                point: y,
                iterations: iteration - 1,
                converged: true,
            };
        }
        let mut next: Vec<f64> = weighted.iter().map(|v| v / weight_sum).collect();
        if on_point > 0 {
            let eta = on_point as f64 / r;
            let keep = eta.min(1.0);
            let pull = (1.0 - eta).max(0.0);
            for (t, &yk) in next.iter_mut().zip(&y) {
                *t = pull * *t + keep * yk;
            }
        }
        let step = distance(&next, &y);
        y = next;
        if step <= 1e-10 * scale {
            return GeometricMedian {
                point: y,
                iterations: iteration,
                converged: true,
            };
        }
    }
    GeometricMedian {
        point: y,
        iterations: GM_MAX_ITERATIONS,
        converged: false,
    }
}

/// Indices of the `keep` highest scores, lower index first on ties, sorted
/// ascending.
pub fn select_survivors(layer_name: &str, scores: &[f64], keep: usize) -> Result<Vec<usize>, PruneError> {
    if keep == 0 || keep > scores.len() {
        return Err(PruneError::KeepOutOfRange {
            layer: layer_name.to_string(),
            keep,
            filters: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    Ok(order)
}

/// A pruned network with the surviving filter indices of every conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub network: NetworkWeights,
    pub survivors: BTreeMap<String, Vec<usize>>,
}

impl PruneOutcome {
    /// Canonical JSON map from layer name to surviving indices.
    pub fn survivors_json(&self) -> String {
        canon::to_string(&self.survivors).expect("survivor serialization is infallible")
    }
}

/// Scores every conv layer under `criterion` and slices `net` to the plan.
pub fn prune_network(
    net: &NetworkWeights,
    plan: &ArchitecturePlan,
    criterion: Criterion,
) -> Result<PruneOutcome, PruneError> {
    check_plan(net, plan)?;
    let scores = score_network(net, criterion)?;
    prune_with_scores(net, plan, &scores)
}

fn check_plan(net: &NetworkWeights, plan: &ArchitecturePlan) -> Result<(), PruneError> {
    if plan.source_fingerprint != nwf::fingerprint(net) {
        return Err(PruneError::FingerprintMismatch);
    }
    Ok(())
}

/// Slices `net` to the plan using precomputed scores (one entry per conv
/// layer, any order). Conv layers absent from the plan keep every filter.
pub fn prune_with_scores(
    net: &NetworkWeights,
    plan: &ArchitecturePlan,
    scores: &[FilterScores],
) -> Result<PruneOutcome, PruneError> {
    check_plan(net, plan)?;
    for entry in &plan.entries {
        if !net.layer(&entry.layer_name).is_some_and(LayerRecord::is_conv) {
            return Err(PruneError::DanglingFollows(entry.layer_name.clone()));
        }
    }
    let keep_of = |name: &str, filters: usize| {
        plan.entry(name).map_or(filters, |e| e.kept_filters)
    };
    let scores_of = |layer: &LayerRecord| -> Result<&[f64], PruneError> {
        let found = scores
            .iter()
            .find(|s| s.layer_name == layer.name)
            .ok_or_else(|| PruneError::LengthMismatch {
                layer: layer.name.clone(),
                expected: layer.out_channels(),
                found: 0,
            })?;
        if found.scores.len() != layer.out_channels() {
            return Err(PruneError::LengthMismatch {
                layer: layer.name.clone(),
                expected: layer.out_channels(),
                found: found.scores.len(),
            });
        }
        Ok(&found.scores)
    };

    // Groups pick one survivor set from summed member scores.
    let mut group_members: BTreeMap<&str, Vec<&LayerRecord>> = BTreeMap::new();
    for (_, layer) in net.conv_layers() {
        if let Some(g) = &layer.coupling_group {
            group_members.entry(g).or_default().push(layer);
        }
    }
    let mut survivors: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (group, members) in &group_members {
        let filters = members[0].out_channels();
        let keep = keep_of(&members[0].name, filters);
        if members
            .iter()
            .any(|m| m.out_channels() != filters || keep_of(&m.name, m.out_channels()) != keep)
        {
            return Err(PruneError::CouplingConflict(group.to_string()));
        }
        let mut summed = vec![0.0; filters];
        for m in members {
            for (s, v) in summed.iter_mut().zip(scores_of(m)?) {
                *s += v;
            }
        }
        let chosen = select_survivors(group, &summed, keep)?;
        for m in members {
            survivors.insert(m.name.clone(), chosen.clone());
        }
    }
    for (_, layer) in net.conv_layers() {
        if layer.coupling_group.is_none() {
            let keep = keep_of(&layer.name, layer.out_channels());
            let chosen = select_survivors(&layer.name, scores_of(layer)?, keep)?;
            survivors.insert(layer.name.clone(), chosen);
        }
    }

    let mut builder = NetworkBuilder::new();
    for (k, v) in net.metadata() {
        builder.set_metadata(k.clone(), v.clone());
    }
    for (index, layer) in net.layers().iter().enumerate() {
        let upstream = channel_survivors(net, &survivors, layer.follows.as_deref());
        let weights = net.weight_bytes(index);
        let mut record = layer.clone();
        let (data, bias) = match layer.kind {
            LayerKind::Conv2d => {
                let own = &survivors[&layer.name];
                let (c, area) = (layer.shape[1], layer.shape[2] * layer.shape[3]);
                let inputs: Vec<usize> = upstream.cloned().unwrap_or_else(|| (0..c).collect());
                let mut data = Vec::with_capacity(own.len() * inputs.len() * area * 4);
                for &f in own {
                    for &ch in &inputs {
                        let start = 4 * (f * c + ch) * area;
                        data.extend_from_slice(&weights[start..start + 4 * area]);
                    }
                }
                record.shape[0] = own.len();
                record.shape[1] = inputs.len();
                let bias = net.bias_bytes(index).map(|b| gather(b, own, 1));
                (data, bias)
            }
            LayerKind::BatchNorm => match upstream {
                Some(keep) => {
                    let channels = layer.shape[1];
                    let mut data = Vec::with_capacity(16 * keep.len());
                    for row in 0..4 {
                        let row_bytes = &weights[4 * row * channels..4 * (row + 1) * channels];
                        data.extend_from_slice(&gather(row_bytes, keep, 1));
                    }
                    record.shape[1] = keep.len();
                    (data, None)
                }
                None => (weights.to_vec(), None),
            },
            LayerKind::Linear => {
                let bias = net.bias_bytes(index).map(<[u8]>::to_vec);
                match upstream {
                    Some(keep) => {
                        let (rows, cols) = (layer.shape[0], layer.shape[1]);
                        let m = layer.spatial_multiplier.unwrap_or(1);
                        let columns: Vec<usize> =
                            keep.iter().flat_map(|&ch| (ch * m)..(ch * m + m)).collect();
                        let mut data = Vec::with_capacity(rows * columns.len() * 4);
                        for r in 0..rows {
                            data.extend_from_slice(&gather(&weights[4 * r * cols..4 * (r + 1) * cols], &columns, 1));
                        }
                        record.shape[1] = columns.len();
                        (data, bias)
                    }
                    None => (weights.to_vec(), bias),
                }
            }
        };
        builder.push_bytes(record, &data, bias.as_deref());
    }
    Ok(PruneOutcome {
        network: builder.build()?,
        survivors,
    })
}

/// Surviving channels produced by `producer`, looking through batch-norm
/// layers. `None` means the producer's channels are untouched.
fn channel_survivors<'a>(
    net: &'a NetworkWeights,
    survivors: &'a BTreeMap<String, Vec<usize>>,
    mut producer: Option<&'a str>,
) -> Option<&'a Vec<usize>> {
    while let Some(name) = producer {
        let layer = net.layer(name)?;
        match layer.kind {
            LayerKind::Conv2d => return survivors.get(name),
            LayerKind::BatchNorm => producer = layer.follows.as_deref(),
            LayerKind::Linear => return None,
        }
    }
    None
}

/// Copies the f32 elements at `indices` (in units of `stride` values).
fn gather(bytes: &[u8], indices: &[usize], stride: usize) -> Vec<u8> {
    let width = 4 * stride;
    let mut out = Vec::with_capacity(indices.len() * width);
    for &i in indices {
        out.extend_from_slice(&bytes[i * width..(i + 1) * width]);
    }
    out
}
