//! Per-layer representation geometry of one sample.
//!
//! For each layer `ℓ` three metrics compare the original question (index 0)
//! against its `K` similar questions:
//!
//! * **RSM** (shift magnitude): `S_i = ‖u_i − w_i‖₂` is the shift caused by
//!   blanking key information; `RSM = (S_0 − μ_S) / (σ_S + ε)` with `μ_S`,
//!   `σ_S` (divisor `K − 1`) taken over the neighbors only.
//! * **DC** (directional collapse): cosine between `Δ_0` and the neighbor
//!   mean shift `s̄ = (1/K) Σ_{i≥1} Δ_i`, with `ε` added to both norms.
//! * **RSI** (stability index): `R_i` is the mean distance of the variant
//!   representations of question `i` from their centroid;
//!   `RSI = (R_0 − μ_R) / (σ_R + ε)` over the neighbors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repstore::{Dataset, SampleGeometryInput};
use crate::stats::{dot, l2_norm};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("layer {layer} out of range for {num_layers} layers")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("{metric} needs at least {needed} similar questions, sample has {got}")]
    TooFewNeighbors {
        metric: Metric,
        needed: usize,
        got: usize,
    },
    #[error("RSI needs at least 2 variants per question, sample has {0}")]
    TooFewVariants(usize),
    #[error("epsilon must be a positive finite number, got {0}")]
    InvalidEpsilon(f64),
}

/// The three geometry metrics, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "RSM")]
    Rsm,
    #[serde(rename = "DC")]
    Dc,
    #[serde(rename = "RSI")]
    Rsi,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Rsm, Metric::Dc, Metric::Rsi];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rsm => "RSM",
            Metric::Dc => "DC",
            Metric::Rsi => "RSI",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "RSM" => Ok(Metric::Rsm),
            "DC" => Ok(Metric::Dc),
            "RSI" => Ok(Metric::Rsi),
            _ => Err(format!("unknown metric `{s}` (expected RSM, DC or RSI)")),
        }
    }
}

/// Numerical stability constant added to denominators.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Epsilon(f64);

impl Epsilon {
    pub const DEFAULT: Epsilon = Epsilon(1e-8);

    pub fn new(value: f64) -> Result<Self, GeometryError> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(GeometryError::InvalidEpsilon(value))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Epsilon {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for Epsilon {
    type Error = GeometryError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Epsilon> for f64 {
    fn from(eps: Epsilon) -> f64 {
        eps.0
    }
}

/// Blanking shifts `Δ_i = u_i − w_i` at one layer, original first.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSet {
    pub deltas: Vec<Vec<f64>>,
    pub magnitudes: Vec<f64>,
}

/// `(RSM, DC, RSI)` at one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub rsm: f64,
    pub dc: f64,
    pub rsi: f64,
}

impl LayerGeometry {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Rsm => self.rsm,
            Metric::Dc => self.dc,
            Metric::Rsi => self.rsi,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryProfile {
    pub sample_id: String,
    /// Indexed by layer.
    pub layers: Vec<LayerGeometry>,
}

impl GeometryProfile {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn value(&self, metric: Metric, layer: usize) -> f64 {
        self.layers[layer].get(metric)
    }
}

fn check_layer(sample: &SampleGeometryInput, layer: usize) -> Result<(), GeometryError> {
    if layer < sample.num_layers() {
        Ok(())
    } else {
        Err(GeometryError::LayerOutOfRange {
            layer,
            num_layers: sample.num_layers(),
        })
    }
}

/// Sum taken in ascending value order, so the result depends only on the
/// multiset of inputs (exact invariance under reordering of neighbors or
/// variants).
fn symmetric_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Neighbor-standardized score `(x_0 − mean) / (std + ε)` where `values[0]`
/// is the original and `values[1..]` are the neighbors; `std` uses divisor
/// `K − 1`.
fn standardize_against_neighbors(values: &[f64], eps: Epsilon) -> f64 {
    let neighbors = &values[1..];
    let k = neighbors.len() as f64;
    let mu = symmetric_sum(neighbors.iter().copied()) / k;
    let sigma = (symmetric_sum(neighbors.iter().map(|v| (v - mu) * (v - mu))) / (k - 1.0)).sqrt();
    (values[0] - mu) / (sigma + eps.get())
}

pub fn perturbation_shifts(
    sample: &SampleGeometryInput,
    layer: usize,
) -> Result<ShiftSet, GeometryError> {
    check_layer(sample, layer)?;
    let deltas: Vec<Vec<f64>> = sample
        .clean()
        .iter()
        .zip(sample.blanked())
        .map(|(u, w)| {
            u.layer(layer)
                .iter()
                .zip(w.layer(layer))
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect();
    let magnitudes = deltas.iter().map(|d| l2_norm(d)).collect();
    Ok(ShiftSet { deltas, magnitudes })
}

fn require_neighbors(
    sample: &SampleGeometryInput,
    metric: Metric,
    needed: usize,
) -> Result<(), GeometryError> {
    if sample.num_similar() < needed {
        return Err(GeometryError::TooFewNeighbors {
            metric,
            needed,
            got: sample.num_similar(),
        });
    }
    Ok(())
}

pub fn rsm_at_layer(
    sample: &SampleGeometryInput,
    layer: usize,
    eps: Epsilon,
) -> Result<f64, GeometryError> {
    require_neighbors(sample, Metric::Rsm, 2)?;
    let shifts = perturbation_shifts(sample, layer)?;
    Ok(rsm_from_shifts(&shifts, eps))
}

fn rsm_from_shifts(shifts: &ShiftSet, eps: Epsilon) -> f64 {
    standardize_against_neighbors(&shifts.magnitudes, eps)
}

pub fn dc_at_layer(
    sample: &SampleGeometryInput,
    layer: usize,
    eps: Epsilon,
) -> Result<f64, GeometryError> {
    require_neighbors(sample, Metric::Dc, 1)?;
    let shifts = perturbation_shifts(sample, layer)?;
    Ok(dc_from_shifts(&shifts, eps))
}

fn dc_from_shifts(shifts: &ShiftSet, eps: Epsilon) -> f64 {
    let neighbors = &shifts.deltas[1..];
    let dim = shifts.deltas[0].len();
    let k = neighbors.len() as f64;
    let mean_shift: Vec<f64> = (0..dim)
        .map(|j| symmetric_sum(neighbors.iter().map(|d| d[j])) / k)
        .collect();
    let origin = &shifts.deltas[0];
    let e = eps.get();
    dot(origin, &mean_shift) / ((l2_norm(origin) + e) * (l2_norm(&mean_shift) + e))
}

/// Mean distance of a question's variants from their centroid at one layer.
fn variant_spread(variants: &[crate::repstore::LayerStack], layer: usize) -> f64 {
    let dim = variants[0].dim();
    let m = variants.len() as f64;
    let centroid: Vec<f64> = (0..dim)
        .map(|j| symmetric_sum(variants.iter().map(|v| v.layer(layer)[j])) / m)
        .collect();
    symmetric_sum(variants.iter().map(|v| {
        v.layer(layer)
            .iter()
            .zip(&centroid)
            .map(|(x, c)| (x - c) * (x - c))
            .sum::<f64>()
            .sqrt()
    })) / m
}

pub fn rsi_at_layer(
    sample: &SampleGeometryInput,
    layer: usize,
    eps: Epsilon,
) -> Result<f64, GeometryError> {
    require_neighbors(sample, Metric::Rsi, 2)?;
    if sample.num_variants() < 2 {
        return Err(GeometryError::TooFewVariants(sample.num_variants()));
    }
    check_layer(sample, layer)?;
    let spreads: Vec<f64> = sample
        .variants()
        .iter()
        .map(|group| variant_spread(group, layer))
        .collect();
    Ok(standardize_against_neighbors(&spreads, eps))
}

/// All three metrics at every layer.
pub fn geometry_profile(
    sample: &SampleGeometryInput,
    eps: Epsilon,
) -> Result<GeometryProfile, GeometryError> {
    require_neighbors(sample, Metric::Rsm, 2)?;
    let layers = (0..sample.num_layers())
        .map(|layer| {
            let shifts = perturbation_shifts(sample, layer)?;
            Ok(LayerGeometry {
                rsm: rsm_from_shifts(&shifts, eps),
                dc: dc_from_shifts(&shifts, eps),
                rsi: rsi_at_layer(sample, layer, eps)?,
            })
        })
        .collect::<Result<Vec<_>, GeometryError>>()?;
    Ok(GeometryProfile {
        sample_id: sample.sample_id().to_string(),
        layers,
    })
}

/// Profiles for every sample of a dataset, computed in parallel and returned
/// in the dataset's sample order.
pub fn dataset_profiles(
    dataset: &Dataset,
    eps: Epsilon,
) -> Result<Vec<GeometryProfile>, GeometryError> {
    dataset
        .samples
        .par_iter()
        .map(|s| geometry_profile(s, eps))
        .collect()
}
