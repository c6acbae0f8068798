//! Rayon-backed versions of the per-layer passes. Results are identical to
//! the sequential ones in `archslim-core`; only scheduling differs.

use archslim_core::planner::{self, ArchitecturePlan, PlanConfig, PlanError};
use archslim_core::prune::{self, Criterion, FilterScores, PruneError, PruneOutcome};
use archslim_core::spectral::{self, LayerDecomposition, Normalization};
use archslim_core::{nwf, NetworkWeights};
use rayon::prelude::*;

/// Decomposes every conv layer, in network order.
pub fn decompose_network(
    net: &NetworkWeights,
    normalization: Normalization,
) -> Result<Vec<LayerDecomposition>, PlanError> {
    let convs: Vec<usize> = net.conv_layers().map(|(i, _)| i).collect();
    convs
        .par_iter()
        .map(|&i| {
            let name = &net.layers()[i].name;
            spectral::decompose_layer(name, &net.tensor(i), normalization).map_err(PlanError::from)
        })
        .collect()
}

pub fn plan_architecture(net: &NetworkWeights, config: &PlanConfig) -> Result<ArchitecturePlan, PlanError> {
    planner::validate_topology(net)?;
    if net.conv_layers().next().is_none() {
        return Err(PlanError::EmptyNetwork);
    }
    let decompositions = decompose_network(net, config.normalization)?;
    planner::plan_from_decompositions(net, &decompositions, config, &nwf::fingerprint(net))
}

pub fn score_network(net: &NetworkWeights, criterion: Criterion) -> Result<Vec<FilterScores>, PruneError> {
    let convs: Vec<usize> = net.conv_layers().map(|(i, _)| i).collect();
    convs
        .par_iter()
        .map(|&i| prune::score_layer(net, i, criterion))
        .collect()
}

pub fn prune_network(
    net: &NetworkWeights,
    plan: &ArchitecturePlan,
    criterion: Criterion,
) -> Result<PruneOutcome, PruneError> {
    if plan.source_fingerprint != nwf::fingerprint(net) {
        return Err(PruneError::FingerprintMismatch);
    }
    let scores = score_network(net, criterion)?;
    prune::prune_with_scores(net, plan, &scores)
}
