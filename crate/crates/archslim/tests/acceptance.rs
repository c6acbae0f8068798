//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Run with `cargo test -p archslim --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use archslim::{read_plan, read_weights, write_weights};
use archslim_core::arch::Architecture;
use archslim_core::linalg::Matrix;
use archslim_core::nwf;
use archslim_core::planner::{
    decompose_network, plan_architecture, plan_from_decompositions, retained_ratio, TargetContext, TargetMetric,
};
use archslim_core::prune::{prune_network, Criterion};
use archslim_core::spectral::{
    analyze_layer, covariance, cumulative_contribution, eigenvalues_descending, normalize, select_count,
    FlatFilterMatrix, Normalization,
};
use archslim_core::stats::{count_stats, FlopConvention};
use archslim_core::{LayerKind, NetworkWeights, PlanConfig, Tensor};
use archslim_testkit::oracle::{self, Dense};
use archslim_testkit::{gaussian, rng, synth, TestRng};
use rand::Rng;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Check; 9] = [
        ("trace invariance", trace_invariance),
        ("PCA optimality", pca_optimality),
        ("contribution oracle", contribution_oracle),
        ("rank recovery", rank_recovery),
        ("delta monotonicity", delta_monotonicity),
        ("prune-graph consistency", prune_graph_consistency),
        ("target bisection", target_bisection),
        ("determinism", determinism),
        ("NWF round-trip", nwf_round_trip),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} ({secs:.2} s)"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name}: {reason} ({secs:.2} s)");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn ensure(ok: bool, reason: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(reason())
    }
}

fn within(start: Instant, budget: Duration) -> Result<(), String> {
    let spent = start.elapsed();
    ensure(spent < budget, || format!("took {:.2} s, budget {} s", spent.as_secs_f64(), budget.as_secs()))
}

fn flat(rows: &Dense) -> FlatFilterMatrix {
    FlatFilterMatrix { layer_name: "m".into(), values: Matrix::from_rows(rows) }
}

fn centered_covariance(rows: &Dense) -> Matrix {
    covariance(&normalize(&flat(rows), Normalization::Center)).expect("at least two samples")
}

fn dense(m: &Matrix) -> Dense {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn rows_of(t: &Tensor) -> Dense {
    let width = t.data.len() / t.shape[0];
    t.data.chunks(width).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn trace_invariance() -> Outcome {
    let start = Instant::now();
    let mut r = rng(0xacc1);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let n = r.random_range(2..=32usize);
        let d = r.random_range(2..=256usize);
        let m: Dense = (0..n).map(|_| gaussian(&mut r, d)).collect();
        let q = oracle::orthogonal_matrix(&mut r, n);
        let qm = oracle::matmul(&q, &m);
        let base = centered_covariance(&m);
        let rotated = centered_covariance(&qm);
        let tr = base.trace();
        let eig: f64 = eigenvalues_descending(&rotated).map_err(|e| e.to_string())?.iter().sum();
        for value in [rotated.trace(), eig] {
            let dev = (value - tr).abs() / tr;
            worst = worst.max(dev);
            ensure(dev <= 1e-9, || format!("trial {trial} (n={n}, D={d}): relative deviation {dev:e}"))?;
        }
    }
    within(start, Duration::from_secs(10))?;
    Ok(format!("1000 trials, worst relative deviation {worst:.1e}"))
}

fn pca_optimality() -> Outcome {
    let start = Instant::now();
    let mut r = rng(0xacc2);
    let mut comparisons = 0usize;
    let mut tightest = f64::INFINITY;
    for layer in 0..200 {
        let f = r.random_range(2..=16usize);
        let d = r.random_range(2..=64usize);
        let rows: Dense = if layer % 2 == 0 {
            (0..f).map(|_| gaussian(&mut r, d)).collect()
        } else {
            let rank = r.random_range(1..f.min(d - 1).max(2));
            let singular: Vec<f64> = (0..rank).map(|j| 2.0 * 0.6f64.powi(j as i32)).collect();
            synth::low_rank_rows(&mut r, f, d, &singular, 1e-3)
        };
        let sigma = centered_covariance(&rows);
        let eig = eigenvalues_descending(&sigma).map_err(|e| e.to_string())?;
        let sigma = dense(&sigma);
        for n in 1..=f {
            let top: f64 = eig[..n].iter().sum();
            for _ in 0..50 {
                let frame = oracle::orthonormal_frame(&mut r, f, n);
                let margin = top - oracle::captured_variance(&sigma, &frame);
                tightest = tightest.min(margin);
                comparisons += 1;
                ensure(margin >= -1e-9, || format!("layer {layer}, n={n}: margin {margin:e}"))?;
            }
        }
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!("200 layers, {comparisons} projections, smallest margin {tightest:.1e}"))
}

fn contribution_oracle() -> Outcome {
    let mut r = rng(0xacc3);
    let mut selections = 0;
    for list in 0..1000 {
        let eigs = synth::random_spectrum(&mut r);
        let alpha = cumulative_contribution(&eigs).map_err(|e| e.to_string())?;
        ensure(alpha == oracle::alpha(&eigs), || format!("list {list}: alpha differs"))?;
        let mut deltas = vec![0.0, 0.1, 0.5, 0.9, 0.95, 0.99, 0.999, 1.0, r.random_range(0.0..=1.0)];
        // Thresholds sitting exactly on curve values probe the >= boundary.
        deltas.push(alpha[r.random_range(0..alpha.len())]);
        for delta in deltas {
            let ours = select_count(&alpha, delta).map_err(|e| e.to_string())?;
            let reference = oracle::select(&alpha, delta);
            selections += 1;
            ensure(ours == reference, || format!("list {list}, delta {delta}: n* {ours} vs {reference}"))?;
        }
    }
    Ok(format!("1000 lists, {selections} selections identical"))
}

fn rank_recovery() -> Outcome {
    let mut r = rng(0xacc4);
    let mut hits = 0;
    for trial in 0..100 {
        let rank = 1 + trial % 8;
        let in_ch = r.random_range(2..=4usize);
        let w = synth::low_rank_conv(&mut r, 16, in_ch, 3, rank, 1e-6);
        let t = Tensor::new(vec![16, in_ch, 3, 3], w);
        let true_rank = oracle::centered_rank(&rows_of(&t), 1e-4);
        ensure(true_rank == rank, || format!("trial {trial}: constructed rank {true_rank}, wanted {rank}"))?;
        let s = analyze_layer("l", &t, 0.999, Normalization::Center).map_err(|e| e.to_string())?;
        ensure(s.selected == rank, || format!("trial {trial}: rank {rank}, n* = {}", s.selected))?;
        hits += 1;
    }
    Ok(format!("{hits}/100 trials recovered r"))
}

fn delta_monotonicity() -> Outcome {
    let mut r = rng(0xacc5);
    for trial in 0..50 {
        let net = synth::random_network(&mut r, trial % 2 == 0);
        let decomps = decompose_network(&net, Normalization::Center).map_err(|e| e.to_string())?;
        let fingerprint = nwf::fingerprint(&net);
        let mut previous: Option<Vec<usize>> = None;
        for step in 1..=10 {
            let delta = step as f64 / 10.0;
            let plan = plan_from_decompositions(&net, &decomps, &PlanConfig::new(delta), &fingerprint)
                .map_err(|e| e.to_string())?;
            let kept = plan.kept();
            if let Some(prev) = &previous {
                ensure(prev.iter().zip(&kept).all(|(a, b)| a <= b), || {
                    format!("network {trial}: kept {prev:?} then {kept:?} at delta {delta}")
                })?;
            }
            previous = Some(kept);
        }
    }
    Ok("50 networks, kept filters non-decreasing over 0.1..1.0".into())
}

/// Output- and input-channel survivors of every layer, derived from the
/// conv survivor sets by walking `follows` links.
fn channel_maps(net: &NetworkWeights, survivors: &BTreeMap<String, Vec<usize>>) -> Vec<(Vec<usize>, Vec<usize>)> {
    fn conv_of<'a>(net: &'a NetworkWeights, name: &'a str) -> Option<&'a str> {
        let mut name = name;
        loop {
            let layer = net.layer(name)?;
            match layer.kind {
                LayerKind::Conv2d => return Some(&layer.name),
                LayerKind::BatchNorm => name = layer.follows.as_deref()?,
                LayerKind::Linear => return None,
            }
        }
    }
    let all = |n: usize| (0..n).collect::<Vec<_>>();
    net.layers()
        .iter()
        .map(|layer| {
            let upstream = layer.follows.as_deref().and_then(|f| conv_of(net, f));
            let inputs = |n: usize| upstream.map_or_else(|| all(n), |c| survivors[c].clone());
            match layer.kind {
                LayerKind::Conv2d => (survivors[&layer.name].clone(), inputs(layer.shape[1])),
                LayerKind::BatchNorm => {
                    let outs = inputs(layer.shape[1]);
                    (outs.clone(), outs)
                }
                LayerKind::Linear => {
                    let m = layer.spatial_multiplier.unwrap_or(1);
                    let channels = inputs(layer.shape[1] / m);
                    let cols = channels.iter().flat_map(|&c| c * m..(c + 1) * m).collect();
                    (all(layer.shape[0]), cols)
                }
            }
        })
        .collect()
}

/// Expected pruned bytes of layer `i`, gathered element by element.
fn expected_bytes(net: &NetworkWeights, i: usize, outs: &[usize], ins: &[usize]) -> Vec<u8> {
    let layer = &net.layers()[i];
    let src = net.weight_bytes(i);
    let mut bytes = Vec::new();
    match layer.kind {
        LayerKind::BatchNorm => {
            let c = layer.shape[1];
            for row in 0..4 {
                for &ch in outs {
                    let at = 4 * (row * c + ch);
                    bytes.extend_from_slice(&src[at..at + 4]);
                }
            }
        }
        _ => {
            let inner: usize = layer.shape[2..].iter().product();
            let cols = layer.shape[1];
            for &o in outs {
                for &c in ins {
                    let at = 4 * ((o * cols + c) * inner);
                    bytes.extend_from_slice(&src[at..at + 4 * inner]);
                }
            }
        }
    }
    bytes
}

fn prune_graph_consistency() -> Outcome {
    let mut r = rng(0xacc6);
    let input = synth::RANDOM_INPUT;
    let mut used = BTreeMap::new();
    for trial in 0..100 {
        let bn_rate = [0.0, 0.6, 1.0][trial % 3];
        let net = synth::random_network_with(&mut r, bn_rate);
        let delta = r.random_range(0.3..=1.0);
        let plan = plan_architecture(&net, &PlanConfig::new(delta)).map_err(|e| e.to_string())?;
        let bn_everywhere = net.conv_layers().all(|(_, l)| net.batch_norm_for(&l.name).is_some());
        let criterion = match r.random_range(0..4) {
            0 => Criterion::L1,
            1 => Criterion::L2,
            2 => Criterion::GeometricMedian,
            _ if bn_everywhere => Criterion::BnScale,
            _ => Criterion::L1,
        };
        *used.entry(criterion.as_str()).or_insert(0) += 1;
        let fail = |what: String| format!("network {trial} ({}): {what}", criterion.as_str());
        let out = prune_network(&net, &plan, criterion).map_err(|e| fail(e.to_string()))?;
        oracle::shape_walk(&out.network, input.channels).map_err(fail)?;

        let maps = channel_maps(&net, &out.survivors);
        for (i, (outs, ins)) in maps.iter().enumerate() {
            let name = &net.layers()[i].name;
            let j = out.network.position(name).ok_or_else(|| fail(format!("{name} missing")))?;
            ensure(out.network.weight_bytes(j) == expected_bytes(&net, i, outs, ins).as_slice(), || {
                fail(format!("{name}: weights differ"))
            })?;
            if let Some(bias) = net.bias_bytes(i) {
                let expected: Vec<u8> = outs.iter().flat_map(|&o| bias[4 * o..4 * o + 4].to_vec()).collect();
                ensure(out.network.bias_bytes(j) == Some(expected.as_slice()), || fail(format!("{name}: bias differs")))?;
            }
        }

        let from_weights = count_stats(&Architecture::from_network(&out.network), input, FlopConvention::Flops);
        let arch = Architecture::from_plan(&plan, &net).map_err(|e| fail(e.to_string()))?;
        let from_plan = count_stats(&arch, input, FlopConvention::Flops);
        ensure(from_weights.is_ok() && from_weights == from_plan, || fail("stats differ".into()))?;
    }
    Ok(format!("100 networks, criteria used {used:?}"))
}

fn tool(args: &[&str], dir: &Path) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_3as"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("3as {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))?;
    Ok(out)
}

fn target_bisection() -> Outcome {
    let net = synth::target_toy_net();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_weights(dir.path().join("toy.nwf"), &net).map_err(|e| e.to_string())?;
    tool(&["plan", "toy.nwf", "--target", "params:0.25", "-o", "plan.json"], dir.path())?;
    let plan = read_plan(dir.path().join("plan.json")).map_err(|e| e.to_string())?;
    let context = TargetContext::default();
    let achieved = retained_ratio(&plan, &net, TargetMetric::Params, context).map_err(|e| e.to_string())?;
    let reduction = 100.0 * (1.0 - achieved);
    ensure((reduction - 75.0).abs() <= 0.5, || format!("reduction {reduction:.3}% outside 75% ± 0.5%"))?;

    // Exhaustive sweep: the delta whose retained ratio lies closest to 0.25.
    let decomps = decompose_network(&net, Normalization::Center).map_err(|e| e.to_string())?;
    let fingerprint = nwf::fingerprint(&net);
    let mut best: Option<(f64, f64)> = None;
    for step in 0..=1000 {
        let delta = step as f64 / 1000.0;
        let swept = plan_from_decompositions(&net, &decomps, &PlanConfig::new(delta), &fingerprint)
            .map_err(|e| e.to_string())?;
        let ratio = retained_ratio(&swept, &net, TargetMetric::Params, context).map_err(|e| e.to_string())?;
        if best.is_none_or(|(_, b)| (ratio - 0.25).abs() < (b - 0.25).abs()) {
            best = Some((delta, ratio));
        }
    }
    let (best_delta, best_ratio) = best.expect("sweep is non-empty");
    ensure((achieved - 0.25).abs() <= (best_ratio - 0.25).abs(), || {
        format!("bisection retained {achieved:.5}, sweep best {best_ratio:.5} at delta {best_delta}")
    })?;
    Ok(format!(
        "reduction {reduction:.2}% at delta {:.6}, sweep best {:.2}% at delta {best_delta:.3}",
        plan.delta,
        100.0 * (1.0 - best_ratio)
    ))
}

fn determinism() -> Outcome {
    let net = synth::random_network(&mut rng(0xacc8), true);
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let p = dir.path();
        write_weights(p.join("net.nwf"), &net).map_err(|e| e.to_string())?;
        let mut outputs: Vec<(&str, Vec<u8>)> = Vec::new();
        outputs.push(("analyze", tool(&["analyze", "net.nwf", "--csv", "curve.csv"], p)?.stdout));
        outputs.push(("plan (stdout)", tool(&["plan", "net.nwf", "--delta", "0.9"], p)?.stdout));
        tool(&["plan", "net.nwf", "--delta", "0.9", "-o", "plan.json"], p)?;
        tool(&["plan", "net.nwf", "--target", "flops:0.4", "-o", "target.json"], p)?;
        for criterion in ["l1", "gm"] {
            let pruned = format!("{criterion}.nwf");
            let survivors = format!("{criterion}.json");
            let args = ["prune", "net.nwf", "--plan", "plan.json", "--criterion", criterion, "-o", &pruned];
            tool(&[&args[..], &["--survivors", &survivors]].concat(), p)?;
        }
        for file in ["curve.csv", "plan.json", "target.json", "l1.nwf", "l1.json", "gm.nwf", "gm.json"] {
            outputs.push((file, fs::read(p.join(file)).map_err(|e| e.to_string())?));
        }
        runs.push(outputs);
    }
    for ((name, a), (_, b)) in runs[0].iter().zip(&runs[1]) {
        ensure(a == b, || format!("{name} differs between runs"))?;
        ensure(!a.is_empty(), || format!("{name} is empty"))?;
    }
    Ok(format!("{} outputs byte-identical across two runs", runs[0].len()))
}

fn nwf_round_trip() -> Outcome {
    let mut r: TestRng = rng(0xacc9);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("net.nwf");
    for trial in 0..500 {
        let net = synth::random_container(&mut r);
        write_weights(&path, &net).map_err(|e| e.to_string())?;
        let back = read_weights(&path).map_err(|e| e.to_string())?;
        ensure(back == net, || format!("network {trial} changed on round-trip"))?;
        ensure(nwf::encode(&back) == fs::read(&path).map_err(|e| e.to_string())?, || {
            format!("network {trial} re-encodes differently")
        })?;
    }
    let mut files = vec![nwf::encode(&synth::target_toy_net())];
    files.extend((0..4).map(|_| nwf::encode(&synth::random_container(&mut r))));
    let mut truncations = 0;
    for bytes in &files {
        for len in 0..bytes.len() {
            ensure(nwf::decode(&bytes[..len]).is_err(), || format!("prefix of {len}/{} bytes accepted", bytes.len()))?;
            truncations += 1;
        }
    }
    Ok(format!("500 networks bit-exact, {truncations} truncations rejected"))
}
