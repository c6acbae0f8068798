//! Weight-free architecture descriptions.
//!
//! An [`Architecture`] can be read off a network directly or derived from a
//! plan over that network; the second form is the student manifest.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::canon;
use crate::network::{LayerKind, NetworkWeights};
use crate::nwf;
use crate::planner::{ArchitecturePlan, PlanError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchLayer {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_size: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    /// Resolved per-axis padding; "same" for odd kernels when unspecified.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<usize>,
    pub bias: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub follows: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling_group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_multiplier: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<ArchLayer>,
    pub source_fingerprint: String,
}

impl Architecture {
    pub fn from_network(net: &NetworkWeights) -> Self {
        Self::with_fingerprint(net, nwf::fingerprint(net))
    }

    pub(crate) fn with_fingerprint(net: &NetworkWeights, fingerprint: String) -> Self {
        Self::with_filter_counts(net, &BTreeMap::new(), fingerprint)
    }

    /// The slimmed architecture a plan describes. Fails when the plan was
    /// computed for a different network.
    pub fn from_plan(plan: &ArchitecturePlan, net: &NetworkWeights) -> Result<Self, PlanError> {
        let fingerprint = nwf::fingerprint(net);
        if plan.source_fingerprint != fingerprint {
            return Err(PlanError::FingerprintMismatch);
        }
        Ok(Self::from_plan_unchecked(plan, net, fingerprint))
    }

    pub(crate) fn from_plan_unchecked(
        plan: &ArchitecturePlan,
        net: &NetworkWeights,
        fingerprint: String,
    ) -> Self {
        let kept = plan
            .entries
            .iter()
            .map(|e| (e.layer_name.clone(), e.kept_filters))
            .collect();
        Self::with_filter_counts(net, &kept, fingerprint)
    }

    /// `kept` overrides the filter count of the named conv layers; consumers
    /// of those layers shrink accordingly.
    fn with_filter_counts(
        net: &NetworkWeights,
        kept: &BTreeMap<String, usize>,
        source_fingerprint: String,
    ) -> Self {
        // Channel count produced by `name`, looking through batch norms.
        let kept_of = |name: &str| -> Option<usize> {
            let mut name = net.layer(name)?.name.as_str();
            loop {
                let layer = net.layer(name)?;
                match layer.kind {
                    LayerKind::Conv2d => return kept.get(name).copied(),
                    LayerKind::BatchNorm => name = layer.follows.as_deref()?,
                    LayerKind::Linear => return None,
                }
            }
        };
        let layers = net
            .layers()
            .iter()
            .map(|rec| {
                let upstream = rec.follows.as_deref().and_then(kept_of);
                let mut layer = ArchLayer {
                    name: rec.name.clone(),
                    kind: rec.kind,
                    in_channels: rec.in_channels(),
                    out_channels: rec.out_channels(),
                    kernel_size: None,
                    stride: None,
                    padding: None,
                    pool: rec.pool,
                    bias: rec.bias_offset.is_some(),
                    follows: rec.follows.clone(),
                    coupling_group: rec.coupling_group.clone(),
                    spatial_multiplier: None,
                };
                match rec.kind {
                    LayerKind::Conv2d => {
                        let (kh, kw) = (rec.shape[2], rec.shape[3]);
                        layer.kernel_size = Some([kh, kw]);
                        layer.stride = Some(rec.stride.unwrap_or(1));
                        layer.padding = Some(match rec.padding {
                            Some(p) => [p, p],
                            None => [(kh - 1) / 2, (kw - 1) / 2],
                        });
                        if let Some(k) = kept.get(&rec.name) {
                            layer.out_channels = *k;
                        }
                        if let Some(up) = upstream {
                            layer.in_channels = up;
                        }
                    }
                    LayerKind::BatchNorm => {
                        if let Some(up) = upstream {
                            layer.in_channels = up;
                            layer.out_channels = up;
                        }
                    }
                    LayerKind::Linear => {
                        let multiplier = rec.spatial_multiplier.unwrap_or(1);
                        layer.spatial_multiplier = Some(multiplier);
                        if let Some(up) = upstream {
                            layer.in_channels = up * multiplier;
                        }
                    }
                }
                layer
            })
            .collect();
        Architecture {
            layers,
            source_fingerprint,
        }
    }

    pub fn layer(&self, name: &str) -> Option<&ArchLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Canonical JSON (sorted keys, fixed float formatting).
    pub fn to_json(&self) -> String {
        canon::to_string(self).expect("architecture serialization is infallible")
    }
}
