//! Clean-referenced robust scoring.
//!
//! Each raw metric value is compressed with `sign(x)·ln(1+|x|)`, standardized
//! against a per-(metric, layer) clean reference (median center,
//! `1.4826·MAD` scale), sign-aligned so that larger always means more
//! contamination-like (RSI is negated), and averaged over the selected
//! metric × layer cells into `s_lara`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Epsilon, GeometryProfile, Metric};
use crate::stats::{mad, median, MAD_CONSISTENCY};

pub use crate::geometry::Metric as MetricId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("cannot fit a clean reference on an empty sample set")]
    EmptyReferenceSet,
    #[error("profile {sample_id} has {got} layers, expected {expected}")]
    LayerCountMismatch {
        sample_id: String,
        expected: usize,
        got: usize,
    },
    #[error("layer selection is empty")]
    EmptySelection,
    #[error("metric subset is empty")]
    EmptyMetricSet,
    #[error("layer {layer} out of range for {num_layers} layers")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("mixture weight must lie in [0, 1], got {0}")]
    InvalidBeta(f64),
    #[error("score maps disagree on samples: {only_left:?} only in s_lara, {only_right:?} only in external")]
    SampleMismatch {
        only_left: Vec<String>,
        only_right: Vec<String>,
    },
    #[error("cannot normalize an empty score set")]
    EmptyScoreSet,
}

/// `sign(x) · ln(1 + |x|)`: odd, strictly increasing, fixes 0.
pub fn signed_log_compress(x: f64) -> f64 {
    let magnitude = x.abs().ln_1p();
    if x < 0.0 {
        -magnitude
    } else {
        magnitude
    }
}

/// Robust center and scale of one (metric, layer) cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustCell {
    pub center: f64,
    pub scale: f64,
}

impl RobustCell {
    /// Median and `1.4826 · MAD` of `values`, used as given (no compression).
    pub fn fit(values: &[f64]) -> Option<Self> {
        Some(Self {
            center: median(values)?,
            scale: MAD_CONSISTENCY * mad(values)?,
        })
    }
}

/// Per-(metric, layer) robust reference fitted on clean samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanReference {
    num_layers: usize,
    /// Metric-major: `cells[metric][layer]`.
    cells: Vec<Vec<RobustCell>>,
    fitted_on: usize,
}

impl CleanReference {
    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn fitted_on(&self) -> usize {
        self.fitted_on
    }

    pub fn cell(&self, metric: Metric, layer: usize) -> RobustCell {
        self.cells[metric.index()][layer]
    }
}

/// Fits the clean reference on compressed metric values.
pub fn fit_clean_reference(profiles: &[GeometryProfile]) -> Result<CleanReference, ProtocolError> {
    let first = profiles.first().ok_or(ProtocolError::EmptyReferenceSet)?;
    let num_layers = first.num_layers();
    for p in profiles {
        if p.num_layers() != num_layers {
            return Err(ProtocolError::LayerCountMismatch {
                sample_id: p.sample_id.clone(),
                expected: num_layers,
                got: p.num_layers(),
            });
        }
    }
    let cells = Metric::ALL
        .iter()
        .map(|&metric| {
            (0..num_layers)
                .map(|layer| {
                    let compressed: Vec<f64> = profiles
                        .iter()
                        .map(|p| signed_log_compress(p.value(metric, layer)))
                        .collect();
                    RobustCell::fit(&compressed).expect("nonempty")
                })
                .collect()
        })
        .collect();
    Ok(CleanReference {
        num_layers,
        cells,
        fitted_on: profiles.len(),
    })
}

/// `(compress(raw) − center) / (scale + ε)`.
pub fn robust_z(raw_value: f64, cell: RobustCell, eps: Epsilon) -> f64 {
    (signed_log_compress(raw_value) - cell.center) / (cell.scale + eps.get())
}

/// Orients a z-score so that larger is more contamination-like.
pub fn align_deviation(z: f64, metric: Metric) -> f64 {
    match metric {
        Metric::Rsm | Metric::Dc => z,
        Metric::Rsi => -z,
    }
}

/// Which layers enter the aggregate.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSelection {
    #[default]
    All,
    Early,
    Mid,
    Late,
    Custom(Vec<usize>),
}

impl LayerSelection {
    /// Early = `[0, ⌊L/3⌋)`, Mid = `[⌊L/3⌋, ⌊2L/3⌋)`, Late = the rest. For
    /// `L = 28` these are layers 0–8, 9–17 and 18–27.
    pub fn resolve(&self, num_layers: usize) -> Result<Vec<usize>, ProtocolError> {
        let first_cut = num_layers / 3;
        let second_cut = 2 * num_layers / 3;
        let layers: Vec<usize> = match self {
            LayerSelection::All => (0..num_layers).collect(),
            LayerSelection::Early => (0..first_cut).collect(),
            LayerSelection::Mid => (first_cut..second_cut).collect(),
            LayerSelection::Late => (second_cut..num_layers).collect(),
            LayerSelection::Custom(list) => {
                if let Some(&layer) = list.iter().find(|&&l| l >= num_layers) {
                    return Err(ProtocolError::LayerOutOfRange { layer, num_layers });
                }
                let mut sorted = list.clone();
                sorted.sort_unstable();
                sorted.dedup();
                sorted
            }
        };
        if layers.is_empty() {
            return Err(ProtocolError::EmptySelection);
        }
        Ok(layers)
    }

    pub fn name(&self) -> String {
        match self {
            LayerSelection::All => "all".into(),
            LayerSelection::Early => "early".into(),
            LayerSelection::Mid => "mid".into(),
            LayerSelection::Late => "late".into(),
            LayerSelection::Custom(list) => list
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(","),
        }
    }
}

impl std::str::FromStr for LayerSelection {
    type Err = String;

    /// `all`, `early`, `mid`, `late`, or a comma-separated list of indices.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" => Ok(Self::All),
            "early" => Ok(Self::Early),
            "mid" => Ok(Self::Mid),
            "late" => Ok(Self::Late),
            other => other
                .split(',')
                .map(|t| t.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map(Self::Custom)
                .map_err(|_| format!("invalid layer selection `{s}`")),
        }
    }
}

/// A nonempty subset of {RSM, DC, RSI}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MetricSet([bool; 3]);

impl MetricSet {
    pub const FULL: MetricSet = MetricSet([true; 3]);

    /// The seven nonempty subsets: singletons, pairs, then the full set.
    pub const ABLATION_ORDER: [MetricSet; 7] = [
        MetricSet([false, false, true]),
        MetricSet([false, true, false]),
        MetricSet([true, false, false]),
        MetricSet([false, true, true]),
        MetricSet([true, false, true]),
        MetricSet([true, true, false]),
        MetricSet([true, true, true]),
    ];

    pub fn new(metrics: &[Metric]) -> Result<Self, ProtocolError> {
        let mut flags = [false; 3];
        for m in metrics {
            flags[m.index()] = true;
        }
        if flags.iter().any(|&f| f) {
            Ok(Self(flags))
        } else {
            Err(ProtocolError::EmptyMetricSet)
        }
    }

    pub fn contains(self, metric: Metric) -> bool {
        self.0[metric.index()]
    }

    pub fn iter(self) -> impl Iterator<Item = Metric> {
        Metric::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    pub fn len(self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    /// `RSM+DC`-style label.
    pub fn name(self) -> String {
        self.iter().map(Metric::name).collect::<Vec<_>>().join("+")
    }
}

impl Default for MetricSet {
    fn default() -> Self {
        Self::FULL
    }
}

impl std::fmt::Display for MetricSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

impl std::str::FromStr for MetricSet {
    type Err = String;

    /// Accepts `RSM,DC`, `rsm+dc+rsi`, ...
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let metrics = s
            .split([',', '+'])
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse::<Metric>)
            .collect::<Result<Vec<_>, _>>()?;
        MetricSet::new(&metrics).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreBreakdown {
    pub sample_id: String,
    /// `z[metric][layer]` for every metric and layer.
    pub z: Vec<Vec<f64>>,
    /// `z` with the RSI row negated.
    pub aligned: Vec<Vec<f64>>,
    pub selected_layers: Vec<usize>,
    pub metrics: Vec<Metric>,
    /// Mean aligned deviation of each metric over the selected layers, in
    /// RSM, DC, RSI order (computed for every metric, selected or not).
    pub component_means: [f64; 3],
    pub s_lara: f64,
}

/// Scores one profile against the clean reference.
pub fn lara_score(
    profile: &GeometryProfile,
    reference: &CleanReference,
    selection: &LayerSelection,
    metrics: MetricSet,
    eps: Epsilon,
) -> Result<ScoreBreakdown, ProtocolError> {
    if profile.num_layers() != reference.num_layers() {
        return Err(ProtocolError::LayerCountMismatch {
            sample_id: profile.sample_id.clone(),
            expected: reference.num_layers(),
            got: profile.num_layers(),
        });
    }
    if metrics.is_empty() {
        return Err(ProtocolError::EmptyMetricSet);
    }
    let selected_layers = selection.resolve(profile.num_layers())?;
    let z: Vec<Vec<f64>> = Metric::ALL
        .iter()
        .map(|&m| {
            (0..profile.num_layers())
                .map(|l| robust_z(profile.value(m, l), reference.cell(m, l), eps))
                .collect()
        })
        .collect();
    let aligned: Vec<Vec<f64>> = Metric::ALL
        .iter()
        .zip(&z)
        .map(|(&m, row)| row.iter().map(|&v| align_deviation(v, m)).collect())
        .collect();

    let mut component_means = [0.0; 3];
    for m in Metric::ALL {
        let row = &aligned[m.index()];
        component_means[m.index()] =
            selected_layers.iter().map(|&l| row[l]).sum::<f64>() / selected_layers.len() as f64;
    }
    let mut total = 0.0;
    for m in metrics.iter() {
        for &l in &selected_layers {
            total += aligned[m.index()][l];
        }
    }
    let s_lara = total / (metrics.len() * selected_layers.len()) as f64;

    Ok(ScoreBreakdown {
        sample_id: profile.sample_id.clone(),
        z,
        aligned,
        selected_layers,
        metrics: metrics.iter().collect(),
        component_means,
        s_lara,
    })
}

/// Scores many profiles in parallel, preserving input order.
pub fn score_profiles(
    profiles: &[GeometryProfile],
    reference: &CleanReference,
    selection: &LayerSelection,
    metrics: MetricSet,
    eps: Epsilon,
) -> Result<Vec<ScoreBreakdown>, ProtocolError> {
    profiles
        .par_iter()
        .map(|p| lara_score(p, reference, selection, metrics, eps))
        .collect()
}

pub fn score_map(breakdowns: &[ScoreBreakdown]) -> BTreeMap<String, f64> {
    breakdowns
        .iter()
        .map(|b| (b.sample_id.clone(), b.s_lara))
        .collect()
}

/// Robust z-normalization of a score vector against its own median and
/// `1.4826 · MAD` (with the ε floor on the scale).
pub fn robust_normalize(
    scores: &BTreeMap<String, f64>,
    eps: Epsilon,
) -> Result<BTreeMap<String, f64>, ProtocolError> {
    let values: Vec<f64> = scores.values().copied().collect();
    let cell = RobustCell::fit(&values).ok_or(ProtocolError::EmptyScoreSet)?;
    Ok(scores
        .iter()
        .map(|(id, &v)| (id.clone(), (v - cell.center) / (cell.scale + eps.get())))
        .collect())
}

fn check_same_samples(
    left: &BTreeMap<String, f64>,
    right: &BTreeMap<String, f64>,
) -> Result<(), ProtocolError> {
    let only_left: Vec<String> = left
        .keys()
        .filter(|k| !right.contains_key(*k))
        .cloned()
        .collect();
    let only_right: Vec<String> = right
        .keys()
        .filter(|k| !left.contains_key(*k))
        .cloned()
        .collect();
    if only_left.is_empty() && only_right.is_empty() {
        Ok(())
    } else {
        Err(ProtocolError::SampleMismatch {
            only_left,
            only_right,
        })
    }
}

/// `β · external + (1 − β) · s_lara` on already-normalized scores.
pub fn convex_mix(
    normalized_lara: &BTreeMap<String, f64>,
    normalized_external: &BTreeMap<String, f64>,
    beta: f64,
) -> Result<BTreeMap<String, f64>, ProtocolError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(ProtocolError::InvalidBeta(beta));
    }
    check_same_samples(normalized_lara, normalized_external)?;
    Ok(normalized_lara
        .iter()
        .map(|(id, &lara)| {
            let ext = normalized_external[id];
            (id.clone(), beta * ext + (1.0 - beta) * lara)
        })
        .collect())
}

/// Robust-normalizes both score maps over the shared sample set, then mixes.
pub fn mix_with_external(
    lara: &BTreeMap<String, f64>,
    external: &BTreeMap<String, f64>,
    beta: f64,
    eps: Epsilon,
) -> Result<BTreeMap<String, f64>, ProtocolError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(ProtocolError::InvalidBeta(beta));
    }
    check_same_samples(lara, external)?;
    convex_mix(
        &robust_normalize(lara, eps)?,
        &robust_normalize(external, eps)?,
        beta,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LayerGeometry;

    fn profile(id: &str, rows: &[(f64, f64, f64)]) -> GeometryProfile {
        GeometryProfile {
            sample_id: id.into(),
            layers: rows
                .iter()
                .map(|&(rsm, dc, rsi)| LayerGeometry { rsm, dc, rsi })
                .collect(),
        }
    }

    #[test]
    fn compression_fixtures() {
        assert_eq!(signed_log_compress(0.0), 0.0);
        let e = std::f64::consts::E;
        assert!((signed_log_compress(e - 1.0) - 1.0).abs() < 1e-15);
        assert!((signed_log_compress(-(e * e - 1.0)) + 2.0).abs() < 1e-15);
    }

    #[test]
    fn raw_median_mad_fixture() {
        let cell = RobustCell::fit(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!(cell.center, 3.0);
        assert!((cell.scale - 1.4826).abs() < 1e-12);
    }

    #[test]
    fn reference_is_fitted_on_compressed_values() {
        let values = [1.0, 2.0, 3.0, 4.0, 100.0];
        let profiles: Vec<_> = values
            .iter()
            .map(|&v| profile("c", &[(v, 0.0, 0.0)]))
            .collect();
        let reference = fit_clean_reference(&profiles).unwrap();
        let cell = reference.cell(Metric::Rsm, 0);
        assert_eq!(cell.center, 3f64.ln_1p());
        let compressed: Vec<f64> = values.iter().map(|&v| signed_log_compress(v)).collect();
        let deviations: Vec<f64> = compressed.iter().map(|c| (c - cell.center).abs()).collect();
        assert!((cell.scale - 1.4826 * median(&deviations).unwrap()).abs() < 1e-15);
        assert_eq!(reference.fitted_on(), 5);
        // DC column is constant zero.
        assert_eq!(
            reference.cell(Metric::Dc, 0),
            RobustCell {
                center: 0.0,
                scale: 0.0
            }
        );
    }

    #[test]
    fn symmetric_set_centers_at_zero() {
        let profiles: Vec<_> = [-2.0, 0.0, 2.0]
            .iter()
            .map(|&v| profile("c", &[(v, v, v)]))
            .collect();
        let reference = fit_clean_reference(&profiles).unwrap();
        for m in Metric::ALL {
            assert_eq!(reference.cell(m, 0).center, 0.0);
        }
    }

    #[test]
    fn reference_errors() {
        assert_eq!(
            fit_clean_reference(&[]),
            Err(ProtocolError::EmptyReferenceSet)
        );
        let mixed = [
            profile("a", &[(0.0, 0.0, 0.0)]),
            profile("b", &[(0.0, 0.0, 0.0); 2]),
        ];
        assert!(matches!(
            fit_clean_reference(&mixed),
            Err(ProtocolError::LayerCountMismatch { .. })
        ));
    }

    #[test]
    fn robust_z_fixtures() {
        let eps = Epsilon::DEFAULT;
        let cell = RobustCell {
            center: 0.7,
            scale: 2.0,
        };
        let raw = (0.7f64).exp() - 1.0;
        assert!(robust_z(raw, cell, eps).abs() < 1e-12);

        let unit = RobustCell {
            center: 0.0,
            scale: 1.4826,
        };
        let raw = (1.4826f64).exp() - 1.0;
        assert!((robust_z(raw, unit, eps) - 1.0).abs() < 1e-6);

        let flat = RobustCell {
            center: 0.0,
            scale: 0.0,
        };
        let raw = (0.5f64).exp() - 1.0;
        assert!((robust_z(raw, flat, eps) - 5e7).abs() < 1e-3);
    }

    #[test]
    fn alignment() {
        assert_eq!(align_deviation(1.5, Metric::Rsm), 1.5);
        assert_eq!(align_deviation(1.5, Metric::Rsi), -1.5);
        assert_eq!(align_deviation(0.0, Metric::Dc), 0.0);
    }

    #[test]
    fn layer_windows_for_28_layers() {
        assert_eq!(
            LayerSelection::Early.resolve(28).unwrap(),
            (0..=8).collect::<Vec<_>>()
        );
        assert_eq!(
            LayerSelection::Mid.resolve(28).unwrap(),
            (9..=17).collect::<Vec<_>>()
        );
        assert_eq!(
            LayerSelection::Late.resolve(28).unwrap(),
            (18..=27).collect::<Vec<_>>()
        );
        assert_eq!(
            LayerSelection::Early.resolve(2),
            Err(ProtocolError::EmptySelection)
        );
        assert_eq!(
            LayerSelection::Custom(vec![]).resolve(4),
            Err(ProtocolError::EmptySelection)
        );
        assert!(matches!(
            LayerSelection::Custom(vec![4]).resolve(4),
            Err(ProtocolError::LayerOutOfRange { layer: 4, .. })
        ));
        assert_eq!(
            "1, 3".parse::<LayerSelection>().unwrap(),
            LayerSelection::Custom(vec![1, 3])
        );
    }

    #[test]
    fn metric_set_parsing_and_order() {
        assert_eq!("rsm+dc".parse::<MetricSet>().unwrap().name(), "RSM+DC");
        assert!("".parse::<MetricSet>().is_err());
        let names: Vec<String> = MetricSet::ABLATION_ORDER.iter().map(|s| s.name()).collect();
        assert_eq!(
            names,
            [
                "RSI",
                "DC",
                "RSM",
                "DC+RSI",
                "RSM+RSI",
                "RSM+DC",
                "RSM+DC+RSI"
            ]
        );
    }

    /// Reference with center 0 and scale chosen so z equals the compressed value.
    fn unit_reference(num_layers: usize) -> CleanReference {
        CleanReference {
            num_layers,
            cells: vec![
                vec![
                    RobustCell {
                        center: 0.0,
                        scale: 1.0 - 1e-8
                    };
                    num_layers
                ];
                3
            ],
            fitted_on: 1,
        }
    }

    #[test]
    fn zero_deviation_scores_zero() {
        let p = profile("x", &[(0.0, 0.0, 0.0); 3]);
        let b = lara_score(
            &p,
            &unit_reference(3),
            &LayerSelection::All,
            MetricSet::FULL,
            Epsilon::DEFAULT,
        )
        .unwrap();
        assert_eq!(b.s_lara, 0.0);
    }

    #[test]
    fn error_analysis_aggregate() {
        // Per-metric aligned means taken as already aligned.
        let mean: f64 = [0.151, 0.423, 0.310].iter().sum::<f64>() / 3.0;
        assert!((mean - 0.295).abs() < 1e-3);
    }

    #[test]
    fn aligned_grid_and_subset_mean() {
        let p = profile("x", &[(1.0, 2.0, 3.0), (0.5, -1.0, 4.0)]);
        let reference = unit_reference(2);
        let eps = Epsilon::DEFAULT;
        let b = lara_score(&p, &reference, &LayerSelection::All, MetricSet::FULL, eps).unwrap();
        for m in Metric::ALL {
            for l in 0..2 {
                assert_eq!(
                    b.aligned[m.index()][l],
                    align_deviation(b.z[m.index()][l], m)
                );
            }
        }
        let dc_only = lara_score(
            &p,
            &reference,
            &LayerSelection::All,
            "DC".parse().unwrap(),
            eps,
        )
        .unwrap();
        let dc_row = &dc_only.aligned[Metric::Dc.index()];
        assert_eq!(dc_only.s_lara, (dc_row[0] + dc_row[1]) / 2.0);
        assert_eq!(dc_only.metrics, vec![Metric::Dc]);
        let full_from_components = b.component_means.iter().sum::<f64>() / 3.0;
        assert!((full_from_components - b.s_lara).abs() < 1e-12);
    }

    #[test]
    fn lara_rejects_layer_mismatch() {
        let p = profile("x", &[(1.0, 2.0, 3.0)]);
        assert!(matches!(
            lara_score(
                &p,
                &unit_reference(2),
                &LayerSelection::All,
                MetricSet::FULL,
                Epsilon::DEFAULT
            ),
            Err(ProtocolError::LayerCountMismatch { .. })
        ));
    }

    fn map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn mixing_endpoints_and_default_beta() {
        let eps = Epsilon::DEFAULT;
        let lara = map(&[("a", 1.0), ("b", 2.0), ("c", 7.0)]);
        let ext = map(&[("a", -3.0), ("b", 0.0), ("c", 0.5)]);
        assert_eq!(
            mix_with_external(&lara, &ext, 0.0, eps).unwrap(),
            robust_normalize(&lara, eps).unwrap()
        );
        assert_eq!(
            mix_with_external(&lara, &ext, 1.0, eps).unwrap(),
            robust_normalize(&ext, eps).unwrap()
        );

        let mixed = convex_mix(&map(&[("x", 0.0)]), &map(&[("x", 1.0)]), 0.65).unwrap();
        assert!((mixed["x"] - 0.65).abs() < 1e-15);

        assert!(matches!(
            mix_with_external(&lara, &map(&[("a", 1.0)]), 0.5, eps),
            Err(ProtocolError::SampleMismatch { .. })
        ));
        assert_eq!(
            mix_with_external(&lara, &ext, 1.5, eps),
            Err(ProtocolError::InvalidBeta(1.5))
        );
    }
}
