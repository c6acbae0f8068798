use archslim_core::arch::Architecture;
use archslim_core::canon::format_f64;
use archslim_core::nwf;
use archslim_core::planner::{plan_architecture, resolve_coupling, CouplingPolicy, PlanConfig};
use archslim_core::prune::{geometric_median, prune_network, score_filters, select_survivors, Criterion};
use archslim_core::spectral::{analyze_layer, cumulative_contribution, decompose_layer, select_count, Normalization};
use archslim_core::stats::{count_stats, FlopConvention};
use archslim_core::Tensor;
use archslim_testkit::{gaussian, oracle, rng, synth};
use proptest::prelude::*;

fn random_layer(seed: u64) -> Tensor {
    let mut r = rng(seed);
    let f = 2 + (seed % 11) as usize;
    let c = 1 + (seed % 4) as usize;
    let k = if seed.is_multiple_of(3) { 1 } else { 3 };
    let width = c * k * k;
    let data = if width > f && seed.is_multiple_of(2) {
        synth::decaying_conv(&mut r, f, c, k, f.min(width - 1), 0.7, 1e-3)
    } else {
        gaussian(&mut r, f * width).iter().map(|&v| v as f32).collect()
    };
    Tensor::new(vec![f, c, k, k], data)
}

fn two_wide(t: &Tensor) -> bool {
    t.shape[1] * t.shape[2] * t.shape[3] >= 2
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nwf_round_trip(seed in any::<u64>(), cut in any::<prop::sample::Index>()) {
        let net = synth::random_container(&mut rng(seed));
        let bytes = nwf::encode(&net);
        let back = nwf::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert_eq!(nwf::encode(&back), bytes.clone());
        prop_assert_eq!(nwf::fingerprint(&back), nwf::fingerprint(&net));
        prop_assert!(nwf::decode(&bytes[..cut.index(bytes.len())]).is_err());
    }

    #[test]
    fn alpha_is_monotone_and_ends_at_one(seed in any::<u64>()) {
        let eigs = synth::random_spectrum(&mut rng(seed));
        let alpha = cumulative_contribution(&eigs).unwrap();
        prop_assert!(alpha.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((alpha[alpha.len() - 1] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn selection_is_minimal(seed in any::<u64>(), delta in 0.0..=1.0f64) {
        let eigs = synth::random_spectrum(&mut rng(seed));
        let alpha = cumulative_contribution(&eigs).unwrap();
        let n = select_count(&alpha, delta).unwrap();
        prop_assert!(n >= 1);
        prop_assert!(alpha[n - 1] >= delta);
        prop_assert!(n == 1 || alpha[n - 2] < delta);
    }

    #[test]
    fn power_of_two_scaling_changes_nothing(seed in any::<u64>(), exp in -6i32..6) {
        let t = random_layer(seed);
        prop_assume!(two_wide(&t));
        let c = 2f32.powi(exp);
        let scaled = Tensor::new(t.shape.clone(), t.data.iter().map(|v| v * c).collect());
        for delta in [0.5, 0.9, 0.99] {
            let a = analyze_layer("l", &t, delta, Normalization::Center).unwrap();
            let b = analyze_layer("l", &scaled, delta, Normalization::Center).unwrap();
            prop_assert_eq!(a.selected, b.selected);
            for (x, y) in a.alpha.iter().zip(&b.alpha) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn arbitrary_scaling_keeps_alpha(seed in any::<u64>(), c in 0.01..100.0f64) {
        let t = random_layer(seed);
        prop_assume!(two_wide(&t));
        let scaled: Vec<f32> = t.data.iter().map(|&v| (v as f64 * c) as f32).collect();
        let a = decompose_layer("l", &t, Normalization::Center).unwrap().alpha().unwrap();
        let b = decompose_layer("l", &Tensor::new(t.shape.clone(), scaled), Normalization::Center)
            .unwrap()
            .alpha()
            .unwrap();
        // f32 rounding of the scaled weights perturbs alpha at ~1e-7.
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-5);
        }
    }

    #[test]
    fn filter_order_is_irrelevant(seed in any::<u64>()) {
        let t = random_layer(seed);
        prop_assume!(two_wide(&t));
        let f = t.shape[0];
        let width = t.data.len() / f;
        let order: Vec<usize> = (0..f).rev().collect();
        let permuted: Vec<f32> = order.iter().flat_map(|&i| t.data[i * width..(i + 1) * width].to_vec()).collect();
        let a = decompose_layer("l", &t, Normalization::Center).unwrap();
        let b = decompose_layer("l", &Tensor::new(t.shape.clone(), permuted), Normalization::Center).unwrap();
        let scale: f64 = a.eigenvalues.iter().sum();
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            prop_assert!((x - y).abs() <= 1e-10 * scale.max(1.0));
        }
    }

    #[test]
    fn kept_filters_grow_with_delta(seed in any::<u64>(), d1 in 0.0..=1.0f64, d2 in 0.0..=1.0f64) {
        let net = synth::random_network(&mut rng(seed), true);
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let a = plan_architecture(&net, &PlanConfig::new(lo)).unwrap();
        let b = plan_architecture(&net, &PlanConfig::new(hi)).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            prop_assert!(x.raw_kept <= y.raw_kept);
            prop_assert!(x.kept_filters <= y.kept_filters);
            prop_assert!(1 <= x.kept_filters && x.kept_filters <= x.original_filters);
            prop_assert_eq!(x.preserve_ratio, x.kept_filters as f64 / x.original_filters as f64);
        }
    }

    #[test]
    fn coupling_is_idempotent(seed in any::<u64>(), min in any::<bool>()) {
        let net = synth::random_network(&mut rng(seed), false);
        let policy = if min { CouplingPolicy::Min } else { CouplingPolicy::Max };
        let plan = plan_architecture(&net, &PlanConfig::new(0.9).with_policy(policy)).unwrap();
        let group: Vec<usize> = plan.entries.iter().filter(|e| e.coupling_group.is_some()).map(|e| e.kept_filters).collect();
        prop_assert!(group.windows(2).all(|w| w[0] == w[1]));
        let mut again = plan.entries.clone();
        resolve_coupling(&mut again, policy);
        prop_assert_eq!(again, plan.entries);
    }

    #[test]
    fn survivors_are_the_top_scores(scores in prop::collection::vec(0u8..8, 1..24), keep_seed in any::<prop::sample::Index>()) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let keep = 1 + keep_seed.index(scores.len());
        let s = select_survivors("l", &scores, keep).unwrap();
        prop_assert_eq!(s.len(), keep);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        let worst_kept = s.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for i in (0..scores.len()).filter(|i| !s.contains(i)) {
            prop_assert!(scores[i] <= worst_kept);
            // A dropped filter tied with a kept one must come later.
            if scores[i] == worst_kept {
                prop_assert!(s.iter().all(|&j| scores[j] > worst_kept || j < i));
            }
        }
    }

    #[test]
    fn criteria_survivors_ignore_scale(seed in any::<u64>(), exp in -4i32..4, gm in any::<bool>()) {
        let t = random_layer(seed);
        let c = 2f32.powi(exp);
        let scaled = Tensor::new(t.shape.clone(), t.data.iter().map(|v| v * c).collect());
        let criterion = if gm { Criterion::GeometricMedian } else { Criterion::L2 };
        let a = score_filters("l", &t, criterion, None).unwrap().scores;
        let b = score_filters("l", &scaled, criterion, None).unwrap().scores;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x * c as f64 - y).abs() <= 1e-6 * y.abs().max(1e-12));
        }
        let keep = 1 + (seed as usize % a.len());
        prop_assert_eq!(select_survivors("l", &a, keep).unwrap(), select_survivors("l", &b, keep).unwrap());
    }

    #[test]
    fn pruning_never_adds_parameters(seed in any::<u64>(), delta in 0.0..=1.0f64) {
        let net = synth::random_network(&mut rng(seed), true);
        let plan = plan_architecture(&net, &PlanConfig::new(delta)).unwrap();
        let out = prune_network(&net, &plan, Criterion::L1).unwrap();
        let input = synth::RANDOM_INPUT;
        let before = count_stats(&Architecture::from_network(&net), input, FlopConvention::Flops).unwrap();
        let after = count_stats(&Architecture::from_network(&out.network), input, FlopConvention::Flops).unwrap();
        let keeps_all = plan.entries.iter().all(|e| e.kept_filters == e.original_filters);
        prop_assert!(after.total_params <= before.total_params);
        prop_assert_eq!(after.total_params == before.total_params, keeps_all);
        prop_assert!(oracle::shape_walk(&out.network, input.channels).is_ok());
    }

    #[test]
    fn one_dimensional_median(values in prop::collection::vec(-1e3..1e3f64, 1..15)) {
        prop_assume!(values.len() % 2 == 1);
        let points: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let spread = sorted[sorted.len() - 1] - sorted[0];
        let gm = geometric_median(&points);
        prop_assert!((gm.point[0] - median).abs() <= 1e-6 * spread.max(1.0), "{:?} vs {}", gm, median);
    }

    #[test]
    fn canonical_floats_round_trip(v in any::<f64>()) {
        prop_assume!(v.is_finite());
        prop_assert_eq!(format_f64(v).parse::<f64>().unwrap(), v);
    }
}
