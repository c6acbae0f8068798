//! Synthetic conv layers and networks with controlled spectra.

use archslim_core::{InputShape, LayerRecord, NetworkBuilder, NetworkWeights};
use rand::Rng;

use crate::oracle::{orthonormal_frame, orthonormal_frame_avoiding, Dense};
use crate::{gaussian, TestRng};

/// `filters × width` rows whose row-centered singular values are exactly
/// `singular` (before noise). Rows are built already zero-mean, so centering
/// leaves the construction intact.
pub fn low_rank_rows(rng: &mut TestRng, filters: usize, width: usize, singular: &[f64], noise: f64) -> Dense {
    let r = singular.len();
    assert!(r <= filters && r < width, "rank {r} does not fit {filters}x{width}");
    let ones = vec![1.0 / (width as f64).sqrt(); width];
    let u = orthonormal_frame(rng, filters, r);
    let v = orthonormal_frame_avoiding(rng, width, r, &[ones]);
    let mut rows = vec![vec![0.0; width]; filters];
    for (i, row) in rows.iter_mut().enumerate() {
        for j in 0..r {
            let c = u[j][i] * singular[j];
            for (x, vk) in row.iter_mut().zip(&v[j]) {
                *x += c * vk;
            }
        }
        if noise > 0.0 {
            for (x, g) in row.iter_mut().zip(gaussian(rng, width)) {
                *x += noise * g;
            }
        }
    }
    rows
}

pub fn to_f32(rows: &Dense) -> Vec<f32> {
    rows.iter().flatten().map(|&v| v as f32).collect()
}

/// Conv weights `(filters, in_ch, k, k)` of intrinsic rank `rank` with equal
/// singular values and entries of order 0.1.
pub fn low_rank_conv(
    rng: &mut TestRng,
    filters: usize,
    in_ch: usize,
    k: usize,
    rank: usize,
    noise: f64,
) -> Vec<f32> {
    let width = in_ch * k * k;
    let s = 0.1 * ((filters * width) as f64 / rank as f64).sqrt();
    to_f32(&low_rank_rows(rng, filters, width, &vec![s; rank], noise))
}

/// Conv weights with a geometrically decaying spectrum `s_j = s_0·ratio^j`
/// over `rank` components.
pub fn decaying_conv(
    rng: &mut TestRng,
    filters: usize,
    in_ch: usize,
    k: usize,
    rank: usize,
    ratio: f64,
    noise: f64,
) -> Vec<f32> {
    let width = in_ch * k * k;
    let s0 = 0.1 * ((filters * width) as f64).sqrt();
    let singular: Vec<f64> = (0..rank).map(|j| s0 * ratio.powi(j as i32)).collect();
    to_f32(&low_rank_rows(rng, filters, width, &singular, noise))
}

/// Chain of 3×3 convs with 8 filters each, layer `i` of rank `ranks[i]`.
pub fn rank_chain_net(rng: &mut TestRng, ranks: &[usize], noise: f64) -> NetworkWeights {
    let mut b = NetworkBuilder::new();
    let mut in_ch = 3;
    let mut prev: Option<String> = None;
    for (i, &r) in ranks.iter().enumerate() {
        let name = format!("conv{}", i + 1);
        let mut rec = LayerRecord::conv(&name, 8, in_ch, 3);
        if let Some(p) = &prev {
            rec = rec.following(p);
        }
        b.push(rec, &low_rank_conv(rng, 8, in_ch, 3, r, noise), None);
        prev = Some(name);
        in_ch = 8;
    }
    b.build().expect("valid chain")
}

/// Input shape used with [`random_network`].
pub const RANDOM_INPUT: InputShape = InputShape {
    channels: 3,
    height: 16,
    width: 16,
};

/// Random chain of 2–8 convs (optional BN after each, one coupled pair,
/// optional pools) ending in a linear head.
pub fn random_network(rng: &mut TestRng, batch_norm: bool) -> NetworkWeights {
    random_network_with(rng, if batch_norm { 0.6 } else { 0.0 })
}

/// [`random_network`] with a BN after each conv at probability `bn_rate`.
pub fn random_network_with(rng: &mut TestRng, bn_rate: f64) -> NetworkWeights {
    let convs = rng.random_range(2..=8usize);
    let mut filters: Vec<usize> = (0..convs).map(|_| rng.random_range(4..=12)).collect();
    let coupled = {
        let a = rng.random_range(0..convs - 1);
        let b = rng.random_range(a + 1..convs);
        filters[b] = filters[a];
        (a, b)
    };
    let mut b = NetworkBuilder::new().metadata("generator", "random_network");
    let mut in_ch = RANDOM_INPUT.channels;
    let mut spatial = RANDOM_INPUT.height;
    let mut producer: Option<String> = None;
    for (i, &f) in filters.iter().enumerate() {
        let name = format!("conv{i}");
        let k = if i > 0 && rng.random_bool(0.3) { 1 } else { 3 };
        let mut rec = LayerRecord::conv(&name, f, in_ch, k);
        if let Some(p) = &producer {
            rec = rec.following(p);
        }
        if i == coupled.0 || i == coupled.1 {
            rec = rec.in_group("res");
        }
        if spatial >= 4 && rng.random_bool(0.3) {
            rec = rec.with_pool(2);
            spatial /= 2;
        }
        let width = in_ch * k * k;
        let rank = rng.random_range(1..=f.min(width - 1));
        let ratio = rng.random_range(0.3..0.9);
        let w = decaying_conv(rng, f, in_ch, k, rank, ratio, 1e-4);
        let bias: Option<Vec<f32>> = rng
            .random_bool(0.5)
            .then(|| gaussian(rng, f).iter().map(|&v| 0.1 * v as f32).collect());
        b.push(rec, &w, bias.as_deref());
        producer = Some(name.clone());
        if bn_rate > 0.0 && rng.random_bool(bn_rate) {
            let bn = format!("bn{i}");
            b.push(LayerRecord::batch_norm(&bn, f).following(&name), &bn_params(rng, f), None);
            if rng.random_bool(0.5) {
                producer = Some(bn);
            }
        }
        in_ch = f;
    }
    let multiplier = if rng.random_bool(0.5) { 1 } else { spatial * spatial };
    let mut head = LayerRecord::linear("fc", 10, in_ch * multiplier).following(producer.as_deref().unwrap());
    if multiplier > 1 {
        head = head.with_spatial_multiplier(multiplier);
    }
    let w: Vec<f32> = gaussian(rng, 10 * in_ch * multiplier).iter().map(|&v| v as f32).collect();
    b.push(head, &w, Some(&[0.0; 10]));
    b.build().expect("random network is valid")
}

/// Rows gamma, beta, running_mean, running_var.
pub fn bn_params(rng: &mut TestRng, channels: usize) -> Vec<f32> {
    let mut v: Vec<f32> = gaussian(rng, 3 * channels).iter().map(|&x| x as f32).collect();
    v.extend((0..channels).map(|_| rng.random_range(0.5f32..2.0)));
    v
}

/// Random network with arbitrary (not spectrally shaped) weights, BN layers,
/// biases and metadata; meant for container round-trips.
pub fn random_container(rng: &mut TestRng) -> NetworkWeights {
    let layers = rng.random_range(1..=5usize);
    let mut b = NetworkBuilder::new();
    for m in 0..rng.random_range(0..3) {
        b.set_metadata(format!("key{m}"), format!("value {}", rng.random::<u32>()));
    }
    let mut in_ch = rng.random_range(1..=4usize);
    let mut prev: Option<String> = None;
    for i in 0..layers {
        let f = rng.random_range(1..=6usize);
        let k = rng.random_range(1..=3usize);
        let name = format!("layer.{i}");
        let mut rec = LayerRecord::conv(&name, f, in_ch, k);
        if let Some(p) = &prev {
            rec = rec.following(p);
        }
        let raw = |rng: &mut TestRng, n| -> Vec<f32> {
            (0..n).map(|_| f32::from_bits(finite_bits(rng))).collect()
        };
        let w = raw(rng, f * in_ch * k * k);
        let bias = rng.random_bool(0.5).then(|| raw(rng, f));
        b.push(rec, &w, bias.as_deref());
        if rng.random_bool(0.4) {
            b.push(
                LayerRecord::batch_norm(format!("bn.{i}"), f).following(&name),
                &bn_params(rng, f),
                None,
            );
        }
        prev = Some(name);
        in_ch = f;
    }
    if rng.random_bool(0.5) {
        let w: Vec<f32> = gaussian(rng, 3 * in_ch).iter().map(|&v| v as f32).collect();
        b.push(LayerRecord::linear("head", 3, in_ch).following(prev.as_deref().unwrap()), &w, None);
    }
    b.build().expect("random container is valid")
}

/// Any finite f32 bit pattern, including subnormals and negative zero.
fn finite_bits(rng: &mut TestRng) -> u32 {
    loop {
        let bits: u32 = rng.random();
        if f32::from_bits(bits).is_finite() {
            return bits;
        }
    }
}

/// Eigenvalue lists for checking the contribution curve: non-increasing,
/// non-negative, a positive leading value, with occasional ties and zeros.
pub fn random_spectrum(rng: &mut TestRng) -> Vec<f64> {
    let n = rng.random_range(1..=64usize);
    let mut v: Vec<f64> = (0..n)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0f64).powi(rng.random_range(1..6)) * 10f64.powi(rng.random_range(-3..4)),
        })
        .collect();
    v.sort_by(|a, b| b.total_cmp(a));
    if v[0] == 0.0 {
        v[0] = 1.0;
    }
    v
}

/// Fixed three-conv network (3→16→32→32 channels, 3×3 kernels, no bias)
/// whose layers have smoothly decaying spectra, so a global threshold can
/// reach most parameter budgets finely.
pub fn target_toy_net() -> NetworkWeights {
    toy_net_with([0.85, 0.85, 0.90], 0x3a5)
}

/// The same three-conv layout with per-layer spectral decay `ratios`.
pub fn toy_net_with(ratios: [f64; 3], seed: u64) -> NetworkWeights {
    let mut rng = crate::rng(seed);
    let mut b = NetworkBuilder::new().metadata("model", "toy3");
    let specs = [("conv1", 16, 3, ratios[0]), ("conv2", 32, 16, ratios[1]), ("conv3", 32, 32, ratios[2])];
    let mut prev: Option<&str> = None;
    for (name, f, c, ratio) in specs {
        let mut rec = LayerRecord::conv(name, f, c, 3);
        if let Some(p) = prev {
            rec = rec.following(p);
        }
        let w = decaying_conv(&mut rng, f, c, 3, f, ratio, 0.0);
        b.push(rec, &w, None);
        prev = Some(name);
    }
    b.build().expect("toy net is valid")
}
