//! Synthetic bundles with planted contamination signatures.
//!
//! Clean samples draw every blanking shift `Δ_i` from one distribution (a
//! per-sample shared direction plus isotropic Gaussian noise) and every
//! variant cloud with a common spread. Contaminated samples take the same
//! draw and transform the original question only:
//!
//! * `Δ_0` is blended toward the neighbor mean direction by `align_gain`
//!   (norm preserved) and then scaled by `shift_gain`;
//! * the original's variant offsets are scaled by `rigidity_gain`.
//!
//! With identity gains (`1`, `0`, `1`) a contaminated sample is bit-identical
//! to the clean sample drawn from the same key.
//!
//! Every random stream is keyed by `(seed, sample, question, variant)`, so
//! samples can be generated in any order or in parallel.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repstore::{BundleManifest, Dataset, LayerStack, SampleGeometryInput};
use crate::stats::l2_norm;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthetic parameters: {0}")]
    InvalidParams(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_similar: usize,
    pub num_variants: usize,
    pub n_clean: usize,
    pub n_contaminated: usize,
    /// Multiplier on the contaminated original's shift magnitude (`>= 1`).
    pub shift_gain: f64,
    /// Fraction of the contaminated `Δ_0` direction pulled onto the neighbor
    /// mean direction (`[0, 1]`).
    pub align_gain: f64,
    /// Multiplier on the contaminated original's variant spread (`(0, 1]`).
    pub rigidity_gain: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            num_layers: 8,
            hidden_dim: 16,
            num_similar: 4,
            num_variants: 3,
            n_clean: 30,
            n_contaminated: 30,
            shift_gain: 4.0,
            align_gain: 0.8,
            rigidity_gain: 0.5,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthParams {
    /// Gains at identity: contaminated samples equal clean ones.
    pub fn null(mut self) -> Self {
        self.shift_gain = 1.0;
        self.align_gain = 0.0;
        self.rigidity_gain = 1.0;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn manifest(&self) -> BundleManifest {
        let mut manifest = BundleManifest::new(
            "synthetic",
            self.num_layers,
            self.hidden_dim,
            self.num_similar,
            self.num_variants,
            1,
        );
        manifest.metadata.insert(
            "generator".into(),
            serde_json::to_value(self).expect("params json"),
        );
        manifest
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |msg: &str| Err(SynthError::InvalidParams(msg.into()));
        if let Err(e) = self.manifest().validate() {
            return Err(SynthError::InvalidParams(e.to_string()));
        }
        if !(self.shift_gain.is_finite() && self.shift_gain >= 1.0) {
            return fail("shift_gain must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.align_gain) {
            return fail("align_gain must lie in [0, 1]");
        }
        if !(self.rigidity_gain > 0.0 && self.rigidity_gain <= 1.0) {
            return fail("rigidity_gain must lie in (0, 1]");
        }
        if !(self.noise_scale.is_finite() && self.noise_scale > 0.0) {
            return fail("noise_scale must be positive");
        }
        Ok(())
    }
}

const SHARED_STREAM: u64 = u64::MAX;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, sample: u64, question: u64, variant: u64) -> ChaCha8Rng {
    let key = [sample, question, variant]
        .into_iter()
        .fold(splitmix(seed), |acc, part| splitmix(acc ^ splitmix(part)));
    ChaCha8Rng::seed_from_u64(key)
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn layer_scale(layer: usize) -> f64 {
    1.0 + 0.25 * layer as f64
}

/// Rotates `delta` toward `target` by `gain`, keeping its norm.
fn blend_direction(delta: &[f64], target: &[f64], gain: f64) -> Vec<f64> {
    let (dn, tn) = (l2_norm(delta), l2_norm(target));
    if gain == 0.0 || dn == 0.0 || tn == 0.0 {
        return delta.to_vec();
    }
    let mixed: Vec<f64> = delta
        .iter()
        .zip(target)
        .map(|(d, t)| (1.0 - gain) * d / dn + gain * t / tn)
        .collect();
    let mn = l2_norm(&mixed);
    if mn == 0.0 {
        return delta.to_vec();
    }
    mixed.iter().map(|m| dn * m / mn).collect()
}

fn sample_id(index: usize) -> String {
    format!("synth-{index:05}")
}

/// Generates sample `index`; `contaminated` applies the planted signature.
pub fn synth_sample(params: &SynthParams, contaminated: bool, index: usize) -> SampleGeometryInput {
    synth_sample_with_id(params, contaminated, index, sample_id(index))
}

fn synth_sample_with_id(
    params: &SynthParams,
    contaminated: bool,
    index: usize,
    id: String,
) -> SampleGeometryInput {
    let (layers, dim) = (params.num_layers, params.hidden_dim);
    let questions = params.num_similar + 1;
    let idx = index as u64;
    let noise = params.noise_scale;

    let mut shared_rng = stream(params.seed, idx, SHARED_STREAM, 0);
    let shared: Vec<Vec<f64>> = (0..layers)
        .map(|l| gaussian(&mut shared_rng, dim, layer_scale(l) * noise))
        .collect();

    // content u[i][l] and shift delta[i][l]
    let mut content = Vec::with_capacity(questions);
    let mut deltas = Vec::with_capacity(questions);
    for i in 0..questions {
        let mut rng = stream(params.seed, idx, i as u64, 0);
        let mut u = Vec::with_capacity(layers);
        let mut d = Vec::with_capacity(layers);
        for (l, shared_l) in shared.iter().enumerate() {
            let scale = layer_scale(l);
            u.push(gaussian(&mut rng, dim, scale));
            let n = gaussian(&mut rng, dim, scale * noise);
            d.push(
                shared_l
                    .iter()
                    .zip(&n)
                    .map(|(g, e)| g + e)
                    .collect::<Vec<f64>>(),
            );
        }
        content.push(u);
        deltas.push(d);
    }

    let mut rigidity = 1.0;
    if contaminated {
        for l in 0..layers {
            let mut neighbor_mean = vec![0.0; dim];
            for d in &deltas[1..] {
                for (acc, v) in neighbor_mean.iter_mut().zip(&d[l]) {
                    *acc += v;
                }
            }
            let blended = blend_direction(&deltas[0][l], &neighbor_mean, params.align_gain);
            deltas[0][l] = blended.iter().map(|v| params.shift_gain * v).collect();
        }
        rigidity = params.rigidity_gain;
    }

    let blanked: Vec<Vec<Vec<f64>>> = content
        .iter()
        .zip(&deltas)
        .map(|(u, d)| {
            u.iter()
                .zip(d)
                .map(|(ul, dl)| ul.iter().zip(dl).map(|(a, b)| a - b).collect())
                .collect()
        })
        .collect();

    let variants: Vec<Vec<LayerStack>> = (0..questions)
        .map(|i| {
            let spread = if i == 0 { rigidity } else { 1.0 };
            (0..params.num_variants)
                .map(|m| {
                    let mut rng = stream(params.seed, idx, i as u64, m as u64 + 1);
                    let rows: Vec<Vec<f64>> = blanked[i]
                        .iter()
                        .enumerate()
                        .map(|(l, w)| {
                            let offset = gaussian(&mut rng, dim, layer_scale(l) * noise);
                            w.iter().zip(&offset).map(|(a, o)| a + spread * o).collect()
                        })
                        .collect();
                    LayerStack::from_rows(&rows).expect("rectangular")
                })
                .collect()
        })
        .collect();

    let to_stacks = |v: &Vec<Vec<Vec<f64>>>| -> Vec<LayerStack> {
        v.iter()
            .map(|rows| LayerStack::from_rows(rows).expect("rectangular"))
            .collect()
    };
    SampleGeometryInput::new(id, to_stacks(&content), to_stacks(&blanked), variants)
        .expect("generator produces consistent shapes")
}

/// Clean samples first (indices `0..n_clean`, label 0), then contaminated
/// ones (label 1).
pub fn synth_dataset(params: &SynthParams) -> Result<Dataset, SynthError> {
    params.validate()?;
    let total = params.n_clean + params.n_contaminated;
    let samples: Vec<SampleGeometryInput> = (0..total)
        .into_par_iter()
        .map(|j| synth_sample(params, j >= params.n_clean, j))
        .collect();
    let labels: BTreeMap<String, bool> = (0..total)
        .map(|j| (sample_id(j), j >= params.n_clean))
        .collect();
    Dataset::new(params.manifest(), samples, labels)
        .map_err(|e| SynthError::InvalidParams(e.to_string()))
}

/// A labeled all-clean validation set for fitting the clean reference,
/// drawn from a stream disjoint from [`synth_dataset`] with the same seed.
pub fn synth_reference(params: &SynthParams, n: usize) -> Result<Dataset, SynthError> {
    params.validate()?;
    let ref_params = SynthParams {
        seed: splitmix(params.seed ^ 0x5EED_CAFE_F00D_0001),
        ..params.clone()
    };
    let samples: Vec<SampleGeometryInput> = (0..n)
        .into_par_iter()
        .map(|j| synth_sample_with_id(&ref_params, false, j, format!("ref-{j:05}")))
        .collect();
    let labels = (0..n).map(|j| (format!("ref-{j:05}"), false)).collect();
    Dataset::new(params.manifest(), samples, labels)
        .map_err(|e| SynthError::InvalidParams(e.to_string()))
}
