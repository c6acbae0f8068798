//! Whole-network filter budgets.
//!
//! Every conv layer is analysed independently at a shared threshold (with
//! optional per-layer overrides). Layers tagged with the same coupling group
//! are then harmonized to a common filter count, since their outputs are
//! summed and must keep the same channels.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::Architecture;
use crate::canon;
use crate::network::{LayerKind, NetworkWeights};
use crate::nwf;
use crate::spectral::{self, AnalysisError, LayerDecomposition, Normalization, SpectralError};
use crate::stats::{self, FlopConvention, InputShape, StatsError};

/// How a coupling group settles on one filter count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingPolicy {
    /// Keep the largest count of any member.
    #[default]
    Max,
    /// Keep the smallest count of any member.
    Min,
}

impl FromStr for CouplingPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "max" => Ok(CouplingPolicy::Max),
            "min" => Ok(CouplingPolicy::Min),
            other => Err(format!("unknown coupling policy `{other}` (expected max or min)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer_name: String,
    pub original_filters: usize,
    /// Threshold count before coupling resolution.
    pub raw_kept: usize,
    pub kept_filters: usize,
    pub preserve_ratio: f64,
    pub alpha_curve: Vec<f64>,
    pub info_measure: f64,
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling_group: Option<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMetric {
    Params,
    Flops,
    Filters,
}

/// Fraction of a metric the slimmed network should retain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub metric: TargetMetric,
    pub ratio: f64,
}

impl FromStr for Target {
    type Err = String;

    /// Parses `metric:ratio`, e.g. `params:0.25`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (metric, ratio) = s
            .split_once(':')
            .ok_or_else(|| format!("expected metric:ratio, got `{s}`"))?;
        let metric = match metric {
            "params" => TargetMetric::Params,
            "flops" => TargetMetric::Flops,
            "filters" => TargetMetric::Filters,
            other => return Err(format!("unknown target metric `{other}` (params, flops, filters)")),
        };
        let ratio: f64 = ratio
            .parse()
            .map_err(|_| format!("target ratio `{ratio}` is not a number"))?;
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(format!("target ratio {ratio} must lie strictly between 0 and 1"));
        }
        Ok(Target { metric, ratio })
    }
}

/// Record of a threshold search stored alongside the plan it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetOutcome {
    pub metric: TargetMetric,
    pub ratio: f64,
    pub achieved_ratio: f64,
    pub iterations: usize,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitecturePlan {
    pub entries: Vec<PlanEntry>,
    pub delta: f64,
    pub coupling_policy: CouplingPolicy,
    pub normalization: Normalization,
    pub source_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetOutcome>,
}

impl ArchitecturePlan {
    pub fn entry(&self, layer: &str) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.layer_name == layer)
    }

    pub fn kept(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.kept_filters).collect()
    }

    /// Canonical JSON: sorted keys, floats with 17 significant digits.
    pub fn to_json(&self) -> String {
        canon::to_string(self).expect("plan serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, PlanError> {
        serde_json::from_str(text).map_err(|e| PlanError::Parse(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("network has no conv2d layers")]
    EmptyNetwork,
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("delta {0} is outside [0, 1]")]
    DeltaOutOfRange(f64),
    #[error("layer `{layer}` is a grouped or depthwise convolution, which cannot be slimmed")]
    GroupedConvolution { layer: String },
    #[error("layer `{layer}` expects {found} input channels but its producer gives {expected}")]
    ChannelMismatch {
        layer: String,
        expected: usize,
        found: usize,
    },
    #[error("coupling group `{group}`: {reason}")]
    CouplingMismatch { group: String, reason: String },
    #[error("plan was computed for a different network")]
    FingerprintMismatch,
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("malformed plan: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlanConfig {
    pub delta: f64,
    pub policy: CouplingPolicy,
    pub normalization: Normalization,
    /// Per-layer thresholds overriding `delta`.
    pub layer_delta: BTreeMap<String, f64>,
}

impl PlanConfig {
    pub fn new(delta: f64) -> Self {
        PlanConfig {
            delta,
            ..Default::default()
        }
    }

    pub fn with_policy(mut self, policy: CouplingPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn with_layer_delta(mut self, layer: impl Into<String>, delta: f64) -> Self {
        self.layer_delta.insert(layer.into(), delta);
        self
    }

    fn delta_for(&self, layer: &str) -> f64 {
        self.layer_delta.get(layer).copied().unwrap_or(self.delta)
    }
}

fn check_delta(delta: f64) -> Result<(), PlanError> {
    if (0.0..=1.0).contains(&delta) {
        Ok(())
    } else {
        Err(PlanError::DeltaOutOfRange(delta))
    }
}

/// Rejects graphs the planner cannot slim: grouped convolutions, channel
/// counts that disagree with their producer, and malformed coupling groups.
pub fn validate_topology(net: &NetworkWeights) -> Result<(), PlanError> {
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for layer in net.layers() {
        if layer.kind == LayerKind::Conv2d && layer.groups.is_some_and(|g| g > 1) {
            return Err(PlanError::GroupedConvolution {
                layer: layer.name.clone(),
            });
        }
        if let Some(group) = &layer.coupling_group {
            groups.entry(group).or_default().push(&layer.name);
            if layer.kind != LayerKind::Conv2d {
                return Err(PlanError::CouplingMismatch {
                    group: group.clone(),
                    reason: format!("member `{}` is not a conv2d layer", layer.name),
                });
            }
        }
        let Some(producer) = layer.follows.as_deref().and_then(|p| net.layer(p)) else {
            continue;
        };
        let expected = producer.out_channels();
        let (found, needed) = match layer.kind {
            LayerKind::Conv2d | LayerKind::BatchNorm => (layer.in_channels(), expected),
            LayerKind::Linear => (
                layer.in_channels(),
                expected * layer.spatial_multiplier.unwrap_or(1),
            ),
        };
        if found != needed {
            if layer.kind == LayerKind::Conv2d && found < needed && needed % found == 0 {
                return Err(PlanError::GroupedConvolution {
                    layer: layer.name.clone(),
                });
            }
            return Err(PlanError::ChannelMismatch {
                layer: layer.name.clone(),
                expected: needed,
                found,
            });
        }
    }
    for (group, members) in groups {
        let counts: Vec<usize> = members
            .iter()
            .filter_map(|m| net.layer(m))
            .map(|l| l.out_channels())
            .collect();
        if counts.windows(2).any(|w| w[0] != w[1]) {
            return Err(PlanError::CouplingMismatch {
                group: group.to_string(),
                reason: "members have different filter counts".to_string(),
            });
        }
    }
    Ok(())
}

/// Threshold-independent analysis of every conv layer, in network order.
pub fn decompose_network(
    net: &NetworkWeights,
    normalization: Normalization,
) -> Result<Vec<LayerDecomposition>, PlanError> {
    net.conv_layers()
        .map(|(i, layer)| {
            spectral::decompose_layer(&layer.name, &net.tensor(i), normalization).map_err(PlanError::from)
        })
        .collect()
}

/// Sets every member of a coupling group to the group's max (or min) count.
/// Idempotent.
pub fn resolve_coupling(entries: &mut [PlanEntry], policy: CouplingPolicy) {
    let mut shared: BTreeMap<String, usize> = BTreeMap::new();
    for e in entries.iter() {
        if let Some(g) = &e.coupling_group {
            shared
                .entry(g.clone())
                .and_modify(|k| {
                    *k = match policy {
                        CouplingPolicy::Max => (*k).max(e.kept_filters),
                        CouplingPolicy::Min => (*k).min(e.kept_filters),
                    }
                })
                .or_insert(e.kept_filters);
        }
    }
    for e in entries.iter_mut() {
        if let Some(k) = e.coupling_group.as_ref().and_then(|g| shared.get(g)) {
            e.kept_filters = (*k).clamp(1, e.original_filters);
            e.preserve_ratio = e.kept_filters as f64 / e.original_filters as f64;
        }
    }
}

/// Builds a plan from precomputed decompositions (one per conv layer, in
/// network order). `fingerprint` must be [`nwf::fingerprint`] of `net`.
pub fn plan_from_decompositions(
    net: &NetworkWeights,
    decompositions: &[LayerDecomposition],
    config: &PlanConfig,
    fingerprint: &str,
) -> Result<ArchitecturePlan, PlanError> {
    check_delta(config.delta)?;
    for (name, &d) in &config.layer_delta {
        if !net.layer(name).is_some_and(|l| l.is_conv()) {
            return Err(PlanError::UnknownLayer(name.clone()));
        }
        check_delta(d)?;
    }
    if decompositions.is_empty() {
        return Err(PlanError::EmptyNetwork);
    }
    let mut entries = Vec::with_capacity(decompositions.len());
    for (decomp, (_, layer)) in decompositions.iter().zip(net.conv_layers()) {
        debug_assert_eq!(decomp.layer_name, layer.name);
        let delta = config.delta_for(&layer.name);
        let filters = decomp.filters();
        let mut warnings = Vec::new();
        let (raw_kept, alpha_curve) = match decomp.select(delta) {
            Ok(spectrum) => (spectrum.selected, spectrum.alpha),
            Err(AnalysisError {
                source: SpectralError::ZeroVariance,
                ..
            }) => {
                warnings.push("zero filter variance; keeping a single filter".to_string());
                (1, vec![1.0; filters])
            }
            Err(e) => return Err(e.into()),
        };
        entries.push(PlanEntry {
            layer_name: layer.name.clone(),
            original_filters: filters,
            raw_kept,
            kept_filters: raw_kept,
            preserve_ratio: raw_kept as f64 / filters as f64,
            alpha_curve,
            info_measure: decomp.info_measure,
            delta,
            coupling_group: layer.coupling_group.clone(),
            warnings,
        });
    }
    resolve_coupling(&mut entries, config.policy);
    Ok(ArchitecturePlan {
        entries,
        delta: config.delta,
        coupling_policy: config.policy,
        normalization: config.normalization,
        source_fingerprint: fingerprint.to_string(),
        target: None,
    })
}

/// Analyses every conv layer of `net` and assembles a plan.
pub fn plan_architecture(net: &NetworkWeights, config: &PlanConfig) -> Result<ArchitecturePlan, PlanError> {
    check_delta(config.delta)?;
    validate_topology(net)?;
    if net.conv_layers().next().is_none() {
        return Err(PlanError::EmptyNetwork);
    }
    let decompositions = decompose_network(net, config.normalization)?;
    plan_from_decompositions(net, &decompositions, config, &nwf::fingerprint(net))
}

/// Architecture-only description of the slimmed network.
pub fn student_manifest(plan: &ArchitecturePlan, net: &NetworkWeights) -> Result<String, PlanError> {
    Ok(Architecture::from_plan(plan, net)?.to_json())
}

/// Accepted distance between the achieved and requested ratio.
pub const TARGET_TOLERANCE: f64 = 0.005;
pub const MAX_BISECTION_STEPS: usize = 30;

/// Options for evaluating params/FLOPs targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetContext {
    pub input: InputShape,
    pub convention: FlopConvention,
}

impl Default for TargetContext {
    fn default() -> Self {
        TargetContext {
            input: InputShape::CIFAR,
            convention: FlopConvention::Flops,
        }
    }
}

/// Retained fraction of `metric` under `plan`.
pub fn retained_ratio(
    plan: &ArchitecturePlan,
    net: &NetworkWeights,
    metric: TargetMetric,
    context: TargetContext,
) -> Result<f64, PlanError> {
    if metric == TargetMetric::Filters {
        let kept: usize = plan.entries.iter().map(|e| e.kept_filters).sum();
        let total: usize = plan.entries.iter().map(|e| e.original_filters).sum();
        return Ok(kept as f64 / total as f64);
    }
    let fingerprint = plan.source_fingerprint.clone();
    let full = Architecture::with_fingerprint(net, fingerprint.clone());
    let slim = Architecture::from_plan_unchecked(plan, net, fingerprint);
    let before = stats::count_stats(&full, context.input, context.convention)?;
    let after = stats::count_stats(&slim, context.input, context.convention)?;
    let (b, a) = match metric {
        TargetMetric::Params => (before.total_params, after.total_params),
        _ => (before.total_flops, after.total_flops),
    };
    Ok(if b == 0 { 1.0 } else { a as f64 / b as f64 })
}

/// Bisects the global threshold so the plan retains `target.ratio` of the
/// chosen metric.
///
/// The retained fraction is a non-decreasing step function of the threshold,
/// so the search brackets the step that crosses the target and returns
/// whichever side lands closer (the larger side on ties).
pub fn search_target(
    net: &NetworkWeights,
    decompositions: &[LayerDecomposition],
    config: &PlanConfig,
    target: Target,
    context: TargetContext,
) -> Result<ArchitecturePlan, PlanError> {
    if !(target.ratio > 0.0 && target.ratio < 1.0) {
        return Err(PlanError::DeltaOutOfRange(target.ratio));
    }
    let fingerprint = nwf::fingerprint(net);
    let eval = |delta: f64| -> Result<(ArchitecturePlan, f64), PlanError> {
        let cfg = PlanConfig {
            delta,
            ..config.clone()
        };
        let plan = plan_from_decompositions(net, decompositions, &cfg, &fingerprint)?;
        let ratio = retained_ratio(&plan, net, target.metric, context)?;
        Ok((plan, ratio))
    };

    let finish = |(mut plan, achieved): (ArchitecturePlan, f64), iterations| {
        plan.target = Some(TargetOutcome {
            metric: target.metric,
            ratio: target.ratio,
            achieved_ratio: achieved,
            iterations,
            within_tolerance: libm::fabs(achieved - target.ratio) <= TARGET_TOLERANCE,
        });
        plan
    };

    let mut low = (0.0, eval(0.0)?);
    if target.ratio <= low.1 .1 {
        return Ok(finish(low.1, 0));
    }
    let mut high = (1.0, eval(1.0)?);
    if target.ratio >= high.1 .1 {
        return Ok(finish(high.1, 0));
    }
    let mut iterations = 0;
    while iterations < MAX_BISECTION_STEPS {
        iterations += 1;
        let mid = 0.5 * (low.0 + high.0);
        let probe = eval(mid)?;
        if probe.1 < target.ratio {
            low = (mid, probe);
        } else {
            let exact = probe.1 == target.ratio;
            high = (mid, probe);
            if exact {
                break;
            }
        }
    }
    let low_gap = target.ratio - low.1 .1;
    let high_gap = high.1 .1 - target.ratio;
    let best = if low_gap < high_gap && high_gap != 0.0 { low.1 } else { high.1 };
    Ok(finish(best, iterations))
}
