//! Per-layer spectral analysis of convolution filters.
//!
//! A conv tensor of shape `(F, C, kh, kw)` becomes an `F × D` matrix with
//! `D = C·kh·kw`: each filter is a variable and each of the `D` parameter
//! positions is one observation. Rows are mean-centered, the `F × F` sample
//! covariance is eigendecomposed, and the cumulative contribution curve
//! `alpha[n-1] = (λ_1 + … + λ_n) / Σλ` decides how many principal dimensions
//! (and therefore filters) a layer needs to reach a threshold `delta`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix};
use crate::network::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpectralError {
    #[error("expected a rank-4 conv tensor, got rank {0}")]
    WrongRank(usize),
    #[error("tensor shape and data length disagree")]
    ShapeMismatch,
    #[error("covariance needs at least two samples per filter, got {0}")]
    ZeroSamples(usize),
    #[error("matrix is not symmetric (max deviation {deviation:e})")]
    NotSymmetric { deviation: f64 },
    #[error("covariance is not positive semidefinite (eigenvalue {eigenvalue:e}, trace {trace:e})")]
    NotPsd { eigenvalue: f64, trace: f64 },
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
    #[error("all eigenvalues are zero; the filters carry no variance")]
    ZeroVariance,
    #[error("eigenvalues must be non-negative and non-increasing")]
    InvalidSpectrum,
    #[error("delta {0} is outside [0, 1]")]
    DeltaOutOfRange(f64),
}

/// A [`SpectralError`] tagged with the layer it came from.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("layer `{layer}`: {source}")]
pub struct AnalysisError {
    pub layer: String,
    #[source]
    pub source: SpectralError,
}

/// How each filter row is normalized before the covariance is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Subtract each row's mean (covariance PCA).
    #[default]
    Center,
    /// Subtract the mean and divide by the row's standard deviation
    /// (correlation PCA). Constant rows stay zero.
    Zscore,
}

/// Filters of one conv layer flattened to `filters × (in_channels·kh·kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatFilterMatrix {
    pub layer_name: String,
    pub values: Matrix,
}

impl FlatFilterMatrix {
    pub fn filters(&self) -> usize {
        self.values.rows()
    }

    pub fn samples(&self) -> usize {
        self.values.cols()
    }
}

/// Result of analysing one layer at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpectrum {
    pub layer_name: String,
    /// Non-increasing, each ≥ 0.
    pub eigenvalues: Vec<f64>,
    /// Cumulative contribution; last entry is exactly 1.
    pub alpha: Vec<f64>,
    /// Smallest `n` with `alpha[n-1] >= delta`.
    pub selected: usize,
    /// Covariance trace divided by the kernel area.
    pub info_measure: f64,
    pub delta: f64,
}

impl LayerSpectrum {
    /// Stand-in for a layer whose filters are all identical up to a constant:
    /// no variance to rank, one filter kept.
    pub fn zero_variance(layer_name: &str, filters: usize, delta: f64) -> Self {
        LayerSpectrum {
            layer_name: layer_name.to_string(),
            eigenvalues: vec![0.0; filters],
            alpha: vec![1.0; filters],
            selected: 1,
            info_measure: 0.0,
            delta,
        }
    }

    pub fn filters(&self) -> usize {
        self.eigenvalues.len()
    }
}

/// Threshold-independent part of a layer analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDecomposition {
    pub layer_name: String,
    pub eigenvalues: Vec<f64>,
    pub info_measure: f64,
}

impl LayerDecomposition {
    pub fn filters(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Cumulative contribution curve of this layer.
    pub fn alpha(&self) -> Result<Vec<f64>, AnalysisError> {
        cumulative_contribution(&self.eigenvalues).map_err(|e| self.tag(e))
    }

    pub fn select(&self, delta: f64) -> Result<LayerSpectrum, AnalysisError> {
        check_delta(delta).map_err(|e| self.tag(e))?;
        let alpha = self.alpha()?;
        let selected = select_count(&alpha, delta).map_err(|e| self.tag(e))?;
        Ok(LayerSpectrum {
            layer_name: self.layer_name.clone(),
            eigenvalues: self.eigenvalues.clone(),
            alpha,
            selected,
            info_measure: self.info_measure,
            delta,
        })
    }

    fn tag(&self, source: SpectralError) -> AnalysisError {
        AnalysisError {
            layer: self.layer_name.clone(),
            source,
        }
    }
}

fn check_delta(delta: f64) -> Result<(), SpectralError> {
    if (0.0..=1.0).contains(&delta) {
        Ok(())
    } else {
        Err(SpectralError::DeltaOutOfRange(delta))
    }
}

/// Row `i` of the result is filter `i`'s parameters in row-major order.
pub fn flatten_filters(layer_name: &str, tensor: &Tensor) -> Result<FlatFilterMatrix, SpectralError> {
    let shape = &tensor.shape;
    if shape.len() != 4 {
        return Err(SpectralError::WrongRank(shape.len()));
    }
    let filters = shape[0];
    let cols = shape[1] * shape[2] * shape[3];
    if filters == 0 || cols == 0 || tensor.data.len() != filters * cols {
        return Err(SpectralError::ShapeMismatch);
    }
    let values = tensor.data.iter().map(|&v| f64::from(v)).collect();
    Ok(FlatFilterMatrix {
        layer_name: layer_name.to_string(),
        values: Matrix::from_vec(filters, cols, values),
    })
}

fn row_mean(row: &[f64]) -> f64 {
    row.iter().sum::<f64>() / row.len() as f64
}

/// Subtracts each row's mean over its samples.
pub fn center_rows(m: &FlatFilterMatrix) -> FlatFilterMatrix {
    let mut out = m.clone();
    for i in 0..out.values.rows() {
        let row = out.values.row_mut(i);
        let mean = row_mean(row);
        for v in row.iter_mut() {
            *v -= mean;
        }
    }
    out
}

/// Centers each row and scales it to unit sample standard deviation.
pub fn zscore_rows(m: &FlatFilterMatrix) -> FlatFilterMatrix {
    let mut out = center_rows(m);
    let denom = (out.samples().max(2) - 1) as f64;
    for i in 0..out.values.rows() {
        let row = out.values.row_mut(i);
        let sd = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>() / denom);
        if sd > 0.0 {
            for v in row.iter_mut() {
                *v /= sd;
            }
        }
    }
    out
}

pub fn normalize(m: &FlatFilterMatrix, normalization: Normalization) -> FlatFilterMatrix {
    match normalization {
        Normalization::Center => center_rows(m),
        Normalization::Zscore => zscore_rows(m),
    }
}

/// `M·Mᵀ / (D - 1)` for a row-centered matrix. Exactly symmetric.
pub fn covariance(m: &FlatFilterMatrix) -> Result<Matrix, SpectralError> {
    let n = m.filters();
    let samples = m.samples();
    if samples < 2 {
        return Err(SpectralError::ZeroSamples(samples));
    }
    let scale = 1.0 / (samples - 1) as f64;
    let mut cov = Matrix::zeros(n, n);
    for i in 0..n {
        let ri = m.values.row(i);
        for j in i..n {
            let rj = m.values.row(j);
            let dot: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
            cov[(i, j)] = dot * scale;
            cov[(j, i)] = dot * scale;
        }
    }
    Ok(cov)
}

const SYMMETRY_TOLERANCE: f64 = 1e-9;
const NEGATIVE_CLAMP_BAND: f64 = 1e-9;

/// Eigenvalues of a symmetric PSD matrix, sorted non-increasing.
///
/// Values in `(-1e-9·trace, 0)` are round-off and clamp to zero; anything
/// more negative is `NotPsd`. Values below `n·ε·trace` are at the solver's
/// resolution and are also reported as zero so rank-deficient layers yield
/// an exact cumulative contribution of 1.
pub fn eigenvalues_descending(sigma: &Matrix) -> Result<Vec<f64>, SpectralError> {
    let deviation = sigma.asymmetry();
    if deviation > SYMMETRY_TOLERANCE * sigma.max_abs().max(f64::MIN_POSITIVE) {
        return Err(SpectralError::NotSymmetric { deviation });
    }
    let n = sigma.rows();
    let mut sym = sigma.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (sym[(i, j)] + sym[(j, i)]);
            sym[(i, j)] = avg;
            sym[(j, i)] = avg;
        }
    }
    let trace = sym.trace();
    let mut eig = linalg::symmetric_eigenvalues(&sym).map_err(|_| SpectralError::NoConvergence)?;
    eig.sort_by(|a, b| b.total_cmp(a));
    let band = NEGATIVE_CLAMP_BAND * libm::fabs(trace);
    let resolution = n as f64 * f64::EPSILON * libm::fabs(trace);
    for v in eig.iter_mut() {
        if *v < -band {
            return Err(SpectralError::NotPsd {
                eigenvalue: *v,
                trace,
            });
        }
        if *v <= resolution {
            *v = 0.0;
        }
    }
    Ok(eig)
}

/// `alpha[n-1] = (λ_1 + … + λ_n) / (λ_1 + … + λ_F)`.
pub fn cumulative_contribution(eigs: &[f64]) -> Result<Vec<f64>, SpectralError> {
    if eigs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || eigs.windows(2).any(|w| w[1] > w[0]) {
        return Err(SpectralError::InvalidSpectrum);
    }
    let mut prefix = Vec::with_capacity(eigs.len());
    let mut running = 0.0;
    for &v in eigs {
        running += v;
        prefix.push(running);
    }
    // The total is the final prefix sum so the last ratio is exactly 1.
    let total = running;
    if total <= 0.0 {
        return Err(SpectralError::ZeroVariance);
    }
    Ok(prefix.into_iter().map(|p| p / total).collect())
}

/// Smallest `n ≥ 1` with `alpha[n-1] >= delta`.
pub fn select_count(alpha: &[f64], delta: f64) -> Result<usize, SpectralError> {
    check_delta(delta)?;
    alpha
        .iter()
        .position(|&a| a >= delta)
        .map(|i| i + 1)
        .ok_or(SpectralError::InvalidSpectrum)
}

/// `trace(sigma) / k²`, where `k²` is the kernel area.
pub fn information_measure(sigma: &Matrix, kernel_area: usize) -> f64 {
    assert!(kernel_area > 0, "kernel area must be positive");
    sigma.trace() / kernel_area as f64
}

/// Threshold-independent analysis: flatten, normalize, covariance, spectrum.
pub fn decompose_layer(
    layer_name: &str,
    tensor: &Tensor,
    normalization: Normalization,
) -> Result<LayerDecomposition, AnalysisError> {
    let tag = |source| AnalysisError {
        layer: layer_name.to_string(),
        source,
    };
    let flat = flatten_filters(layer_name, tensor).map_err(tag)?;
    let flat = normalize(&flat, normalization);
    let sigma = covariance(&flat).map_err(tag)?;
    let eigenvalues = eigenvalues_descending(&sigma).map_err(tag)?;
    let kernel_area = tensor.shape[2] * tensor.shape[3];
    Ok(LayerDecomposition {
        layer_name: layer_name.to_string(),
        eigenvalues,
        info_measure: information_measure(&sigma, kernel_area),
    })
}

/// Full per-layer analysis at threshold `delta`.
pub fn analyze_layer(
    layer_name: &str,
    tensor: &Tensor,
    delta: f64,
    normalization: Normalization,
) -> Result<LayerSpectrum, AnalysisError> {
    check_delta(delta).map_err(|source| AnalysisError {
        layer: layer_name.to_string(),
        source,
    })?;
    decompose_layer(layer_name, tensor, normalization)?.select(delta)
}
