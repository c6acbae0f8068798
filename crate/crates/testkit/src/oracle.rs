//! Brute-force reference computations.
//!
//! Loops index explicitly so each formula reads like its textbook form.
#![allow(clippy::needless_range_loop)]

use archslim_core::{LayerKind, NetworkWeights};

use crate::{gaussian, TestRng};

pub type Dense = Vec<Vec<f64>>;

/// Sample covariance of `rows` (variables) over their columns (observations),
/// computed straight from the definition.
pub fn covariance(rows: &[Vec<f64>]) -> Dense {
    let n = rows.len();
    let d = rows[0].len();
    let means: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / d as f64).collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..d {
                acc += (rows[i][k] - means[i]) * (rows[j][k] - means[j]);
            }
            out[i][j] = acc / (d as f64 - 1.0);
        }
    }
    out
}

pub fn trace(m: &Dense) -> f64 {
    (0..m.len()).map(|i| m[i][i]).sum()
}

/// `k` orthonormal vectors of length `n` (columns of a random rank-k frame),
/// via twice-applied modified Gram–Schmidt.
pub fn orthonormal_frame(rng: &mut TestRng, n: usize, k: usize) -> Dense {
    orthonormal_frame_avoiding(rng, n, k, &[])
}

/// Like [`orthonormal_frame`] but also orthogonal to every vector in `avoid`
/// (which must itself be orthonormal).
pub fn orthonormal_frame_avoiding(rng: &mut TestRng, n: usize, k: usize, avoid: &[Vec<f64>]) -> Dense {
    assert!(k + avoid.len() <= n);
    let mut basis: Dense = avoid.to_vec();
    while basis.len() < avoid.len() + k {
        let mut v = gaussian(rng, n);
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis.split_off(avoid.len())
}

/// Random `n × n` orthogonal matrix (rows orthonormal).
pub fn orthogonal_matrix(rng: &mut TestRng, n: usize) -> Dense {
    orthonormal_frame(rng, n, n)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for k in 0..m {
            for j in 0..p {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// `Σ_j qⱼᵀ Σ qⱼ`: variance captured by projecting onto the frame `q`.
pub fn captured_variance(sigma: &Dense, frame: &Dense) -> f64 {
    frame
        .iter()
        .map(|q| {
            let sq: Vec<f64> = sigma.iter().map(|row| dot(row, q)).collect();
            dot(q, &sq)
        })
        .sum()
}

/// Cumulative contribution by re-summing every prefix from scratch.
pub fn alpha(eigs: &[f64]) -> Vec<f64> {
    let mut total = 0.0;
    for v in eigs {
        total += v;
    }
    (0..eigs.len())
        .map(|i| {
            let mut s = 0.0;
            for v in &eigs[..=i] {
                s += v;
            }
            s / total
        })
        .collect()
}

/// Linear scan for the first `n` with `alpha[n-1] >= delta`.
pub fn select(alpha: &[f64], delta: f64) -> usize {
    for (i, a) in alpha.iter().enumerate() {
        if *a >= delta {
            return i + 1;
        }
    }
    alpha.len()
}

/// Rank of the row-centered matrix by Gaussian elimination with full
/// pivoting; pivots below `rel_tol` of the largest entry count as zero.
pub fn centered_rank(rows: &[Vec<f64>], rel_tol: f64) -> usize {
    let mut m: Dense = rows
        .iter()
        .map(|r| {
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            r.iter().map(|v| v - mean).collect()
        })
        .collect();
    let (n, d) = (m.len(), m[0].len());
    let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    let mut rank = 0;
    for step in 0..n.min(d) {
        let mut best = (step, step, 0.0f64);
        for i in step..n {
            for j in step..d {
                if m[i][j].abs() > best.2 {
                    best = (i, j, m[i][j].abs());
                }
            }
        }
        if best.2 <= rel_tol * scale {
            break;
        }
        m.swap(step, best.0);
        for row in m.iter_mut() {
            row.swap(step, best.1);
        }
        for i in (step + 1)..n {
            let f = m[i][step] / m[step][step];
            for j in step..d {
                m[i][j] -= f * m[step][j];
            }
        }
        rank += 1;
    }
    rank
}

/// Largest `k` eigenvalues of a symmetric PSD matrix by power iteration with
/// Hotelling deflation. Accurate only when the leading gaps are healthy.
pub fn power_eigenvalues(sigma: &Dense, k: usize, rng: &mut TestRng) -> Vec<f64> {
    let n = sigma.len();
    let mut a = sigma.clone();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v = gaussian(rng, n);
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w: Vec<f64> = a.iter().map(|row| dot(row, &v)).collect();
            let norm = dot(&w, &w).sqrt();
            if norm == 0.0 {
                lambda = 0.0;
                break;
            }
            let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
            let moved = next.iter().zip(&v).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            v = next;
            lambda = norm;
            if moved < 1e-14 {
                break;
            }
        }
        for i in 0..n {
            for j in 0..n {
                a[i][j] -= lambda * v[i] * v[j];
            }
        }
        out.push(lambda);
    }
    out
}

/// Walks the layer graph checking that every consumer's input width agrees
/// with what its producer emits. `input_channels` is the image depth seen by
/// convs that follow nothing.
pub fn shape_walk(net: &NetworkWeights, input_channels: usize) -> Result<(), String> {
    let emitted = |name: &str| -> Option<usize> {
        let l = net.layer(name)?;
        Some(match l.kind {
            LayerKind::Conv2d | LayerKind::Linear => l.shape[0],
            LayerKind::BatchNorm => l.shape[1],
        })
    };
    for l in net.layers() {
        let source = match &l.follows {
            Some(p) => emitted(p).ok_or_else(|| format!("{} follows missing {p}", l.name))?,
            None => input_channels,
        };
        let (need, have) = match l.kind {
            LayerKind::Conv2d => (source, l.shape[1]),
            LayerKind::BatchNorm => {
                if l.follows.is_none() {
                    continue;
                }
                (source, l.shape[1])
            }
            LayerKind::Linear => {
                if l.follows.is_none() {
                    continue;
                }
                (source * l.spatial_multiplier.unwrap_or(1), l.shape[1])
            }
        };
        if need != have {
            return Err(format!("{}: expects {have} inputs, producer gives {need}", l.name));
        }
    }
    Ok(())
}
