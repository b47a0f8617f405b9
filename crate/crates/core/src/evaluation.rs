//! Membership-inference evaluation: ROC-AUC, TPR at a fixed FPR, Cohen's d
//! layer-window separation, metric ablations and score-mix sweeps.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{Epsilon, GeometryProfile, Metric};
use crate::protocol::{
    convex_mix, robust_normalize, score_map, score_profiles, CleanReference, LayerSelection,
    MetricSet, ProtocolError,
};
use crate::stats::{mean, sample_variance};

pub const DEFAULT_FPR_TARGET: f64 = 0.05;
pub const DEFAULT_BETAS: [f64; 6] = [0.0, 0.25, 0.5, 0.65, 0.75, 1.0];
pub const DEFAULT_BETA: f64 = 0.65;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("method {method}: need at least one member and one non-member")]
    OneClassOnly { method: String },
    #[error("sample {sample_id} has no score for method {method}")]
    MissingScore { sample_id: String, method: String },
    #[error("each group needs at least 2 values")]
    TooFewValues,
    #[error("pooled standard deviation is zero")]
    DegeneratePool,
    #[error("FPR target must lie in [0, 1], got {0}")]
    InvalidFprTarget(f64),
    #[error("no labeled samples")]
    NoLabels,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub member: bool,
    pub scores: BTreeMap<String, f64>,
}

/// Joins labels with named score maps. Only labeled samples become records;
/// each must carry every method's score.
pub fn build_records(
    labels: &BTreeMap<String, bool>,
    methods: &[(&str, &BTreeMap<String, f64>)],
) -> Result<Vec<EvalRecord>, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::NoLabels);
    }
    labels
        .iter()
        .map(|(id, &member)| {
            let scores = methods
                .iter()
                .map(|(name, map)| {
                    map.get(id).map(|&s| (name.to_string(), s)).ok_or_else(|| {
                        EvalError::MissingScore {
                            sample_id: id.clone(),
                            method: name.to_string(),
                        }
                    })
                })
                .collect::<Result<_, _>>()?;
            Ok(EvalRecord {
                sample_id: id.clone(),
                member,
                scores,
            })
        })
        .collect()
}

fn split_scores(records: &[EvalRecord], method: &str) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let mut members = Vec::new();
    let mut nonmembers = Vec::new();
    for r in records {
        let score = *r
            .scores
            .get(method)
            .ok_or_else(|| EvalError::MissingScore {
                sample_id: r.sample_id.clone(),
                method: method.to_string(),
            })?;
        if r.member {
            members.push(score);
        } else {
            nonmembers.push(score);
        }
    }
    if members.is_empty() || nonmembers.is_empty() {
        return Err(EvalError::OneClassOnly {
            method: method.to_string(),
        });
    }
    Ok((members, nonmembers))
}

/// Mann–Whitney AUC: `P(member > non-member) + ½ P(tie)`.
pub fn auc_from_scores(members: &[f64], nonmembers: &[f64]) -> f64 {
    let mut sorted = nonmembers.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Twice the win count, so ties contribute exactly 1.
    let doubled: u64 = members
        .iter()
        .map(|&m| {
            let below = sorted.partition_point(|&n| n < m);
            let not_above = sorted.partition_point(|&n| n <= m);
            (2 * below + (not_above - below)) as u64
        })
        .sum();
    (doubled as f64 / 2.0) / (members.len() * nonmembers.len()) as f64
}

pub fn roc_auc(records: &[EvalRecord], method: &str) -> Result<f64, EvalError> {
    let (members, nonmembers) = split_scores(records, method)?;
    Ok(auc_from_scores(&members, &nonmembers))
}

/// TPR at the most permissive threshold whose FPR does not exceed the
/// target. Candidate thresholds are the observed scores plus `+∞`; a sample
/// is flagged when its score is strictly above the threshold.
pub fn tpr_from_scores(members: &[f64], nonmembers: &[f64], fpr_target: f64) -> f64 {
    let mut nm = nonmembers.to_vec();
    nm.sort_by(f64::total_cmp);
    let mut mem = members.to_vec();
    mem.sort_by(f64::total_cmp);
    let above = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&s| s <= t);

    let mut thresholds: Vec<f64> = nm.iter().chain(&mem).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    // FPR is nonincreasing in the threshold, so the first admissible one
    // (ascending) is the most permissive.
    let admissible = thresholds
        .into_iter()
        .find(|&t| above(&nm, t) as f64 / nm.len() as f64 <= fpr_target);
    match admissible {
        Some(t) => above(&mem, t) as f64 / mem.len() as f64,
        None => 0.0,
    }
}

pub fn tpr_at_fpr(records: &[EvalRecord], method: &str, fpr_target: f64) -> Result<f64, EvalError> {
    if !(0.0..=1.0).contains(&fpr_target) {
        return Err(EvalError::InvalidFprTarget(fpr_target));
    }
    let (members, nonmembers) = split_scores(records, method)?;
    Ok(tpr_from_scores(&members, &nonmembers, fpr_target))
}

/// `(mean_a − mean_b) / pooled_sd` with `(n − 1)`-weighted variances.
pub fn cohens_d(group_a: &[f64], group_b: &[f64]) -> Result<f64, EvalError> {
    if group_a.len() < 2 || group_b.len() < 2 {
        return Err(EvalError::TooFewValues);
    }
    let (na, nb) = (group_a.len() as f64, group_b.len() as f64);
    let pooled = (((na - 1.0) * sample_variance(group_a) + (nb - 1.0) * sample_variance(group_b))
        / (na + nb - 2.0))
        .sqrt();
    if pooled == 0.0 || !pooled.is_finite() {
        return Err(EvalError::DegeneratePool);
    }
    Ok((mean(group_a) - mean(group_b)) / pooled)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub auc: f64,
    pub tpr_at_fpr: f64,
    pub fpr_target: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
}

pub fn evaluate(
    records: &[EvalRecord],
    method: &str,
    fpr_target: f64,
) -> Result<EvalReport, EvalError> {
    if !(0.0..=1.0).contains(&fpr_target) {
        return Err(EvalError::InvalidFprTarget(fpr_target));
    }
    let (members, nonmembers) = split_scores(records, method)?;
    Ok(EvalReport {
        method: method.to_string(),
        auc: auc_from_scores(&members, &nonmembers),
        tpr_at_fpr: tpr_from_scores(&members, &nonmembers, fpr_target),
        fpr_target,
        n_members: members.len(),
        n_nonmembers: nonmembers.len(),
    })
}

/// Evaluates one score map against labels.
pub fn evaluate_scores(
    method: &str,
    scores: &BTreeMap<String, f64>,
    labels: &BTreeMap<String, bool>,
    fpr_target: f64,
) -> Result<EvalReport, EvalError> {
    let records = build_records(labels, &[(method, scores)])?;
    evaluate(&records, method, fpr_target)
}

/// Knobs shared by the scoring-based evaluations.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditConfig {
    pub eps: Epsilon,
    pub selection: LayerSelection,
    pub fpr_target: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            eps: Epsilon::DEFAULT,
            selection: LayerSelection::All,
            fpr_target: DEFAULT_FPR_TARGET,
        }
    }
}

/// Scores profiles with a metric subset and evaluates the result.
pub fn evaluate_lara(
    profiles: &[GeometryProfile],
    labels: &BTreeMap<String, bool>,
    reference: &CleanReference,
    metrics: MetricSet,
    config: &AuditConfig,
) -> Result<EvalReport, EvalError> {
    let breakdowns = score_profiles(profiles, reference, &config.selection, metrics, config.eps)?;
    evaluate_scores("s_lara", &score_map(&breakdowns), labels, config.fpr_target)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub metrics: String,
    pub report: EvalReport,
}

/// One row per nonempty metric subset, in the fixed order singletons
/// (RSI, DC, RSM), pairs, then the full set.
pub fn ablation_grid(
    profiles: &[GeometryProfile],
    labels: &BTreeMap<String, bool>,
    reference: &CleanReference,
    config: &AuditConfig,
) -> Result<Vec<AblationRow>, EvalError> {
    MetricSet::ABLATION_ORDER
        .iter()
        .map(|&subset| {
            let mut report = evaluate_lara(profiles, labels, reference, subset, config)?;
            report.method = subset.name();
            Ok(AblationRow {
                metrics: subset.name(),
                report,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BetaRow {
    pub beta: f64,
    pub report: EvalReport,
}

/// Evaluates `β · external + (1 − β) · s_lara` (both robust-normalized) for
/// each β.
pub fn beta_sweep(
    lara: &BTreeMap<String, f64>,
    external: &BTreeMap<String, f64>,
    labels: &BTreeMap<String, bool>,
    betas: &[f64],
    eps: Epsilon,
    fpr_target: f64,
) -> Result<Vec<BetaRow>, EvalError> {
    // Rejects mismatched sample sets before normalizing.
    convex_mix(lara, external, 0.0)?;
    let lara_n = robust_normalize(lara, eps)?;
    let ext_n = robust_normalize(external, eps)?;
    betas
        .iter()
        .map(|&beta| {
            let mixed = convex_mix(&lara_n, &ext_n, beta)?;
            let mut report = evaluate_scores("mix", &mixed, labels, fpr_target)?;
            report.method = format!("mix_beta_{beta}");
            Ok(BetaRow { beta, report })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowSeparation {
    pub metric: Metric,
    pub window: String,
    pub layers: Vec<usize>,
    /// Contaminated-minus-clean Cohen's d of the per-sample window mean;
    /// `None` when a group is too small or has zero pooled spread.
    pub cohens_d: Option<f64>,
}

/// Cohen's d between members and non-members for each metric over the
/// early/mid/late windows. Windows that resolve to no layers are skipped.
pub fn layer_window_separation(
    profiles: &[GeometryProfile],
    labels: &BTreeMap<String, bool>,
) -> Vec<WindowSeparation> {
    let Some(num_layers) = profiles.first().map(GeometryProfile::num_layers) else {
        return Vec::new();
    };
    let windows = [
        LayerSelection::Early,
        LayerSelection::Mid,
        LayerSelection::Late,
    ];
    let mut out = Vec::new();
    for metric in Metric::ALL {
        for window in &windows {
            let Ok(layers) = window.resolve(num_layers) else {
                continue;
            };
            let (mut contaminated, mut clean) = (Vec::new(), Vec::new());
            for p in profiles {
                let Some(&member) = labels.get(&p.sample_id) else {
                    continue;
                };
                let v =
                    layers.iter().map(|&l| p.value(metric, l)).sum::<f64>() / layers.len() as f64;
                if member {
                    contaminated.push(v);
                } else {
                    clean.push(v);
                }
            }
            out.push(WindowSeparation {
                metric,
                window: window.name(),
                layers,
                cohens_d: cohens_d(&contaminated, &clean).ok(),
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub layer: usize,
    pub metric: Metric,
    pub group: &'static str,
    pub value: f64,
}

/// Per-layer group means of each raw metric, for layer-curve plots.
pub fn layer_curves(
    profiles: &[GeometryProfile],
    labels: &BTreeMap<String, bool>,
) -> Vec<CurvePoint> {
    let Some(num_layers) = profiles.first().map(GeometryProfile::num_layers) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for layer in 0..num_layers {
        for metric in Metric::ALL {
            for (group, member) in [("contaminated", true), ("clean", false)] {
                let values: Vec<f64> = profiles
                    .iter()
                    .filter(|p| labels.get(&p.sample_id) == Some(&member))
                    .map(|p| p.value(metric, layer))
                    .collect();
                if !values.is_empty() {
                    out.push(CurvePoint {
                        layer,
                        metric,
                        group,
                        value: mean(&values),
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(members: &[f64], nonmembers: &[f64]) -> Vec<EvalRecord> {
        members
            .iter()
            .map(|&s| (true, s))
            .chain(nonmembers.iter().map(|&s| (false, s)))
            .enumerate()
            .map(|(i, (member, s))| EvalRecord {
                sample_id: format!("r{i}"),
                member,
                scores: BTreeMap::from([("m".to_string(), s)]),
            })
            .collect()
    }

    #[test]
    fn auc_fixtures() {
        assert_eq!(
            roc_auc(&records(&[0.9, 0.8], &[0.2, 0.1]), "m").unwrap(),
            1.0
        );
        assert_eq!(
            roc_auc(&records(&[0.5, 0.5], &[0.5, 0.5]), "m").unwrap(),
            0.5
        );
        assert_eq!(
            roc_auc(&records(&[0.8, 0.3], &[0.5, 0.1]), "m").unwrap(),
            0.75
        );
        assert!(matches!(
            roc_auc(&records(&[0.8], &[]), "m"),
            Err(EvalError::OneClassOnly { .. })
        ));
        assert!(matches!(
            roc_auc(&records(&[0.8], &[0.1]), "other"),
            Err(EvalError::MissingScore { .. })
        ));
    }

    #[test]
    fn tpr_fixtures() {
        let r = records(&[10.0, 9.0, 8.0], &[7.0, 6.0, 5.0]);
        assert_eq!(tpr_at_fpr(&r, "m", 0.05).unwrap(), 1.0);
        let inverted = records(&[1.0, 2.0, 3.0], &[7.0, 6.0, 5.0]);
        assert_eq!(tpr_at_fpr(&inverted, "m", 0.05).unwrap(), 0.0);
        assert!(matches!(
            tpr_at_fpr(&r, "m", 1.5),
            Err(EvalError::InvalidFprTarget(_))
        ));
    }

    #[test]
    fn thirty_nonmembers_admit_one_false_positive() {
        // The top non-member sits above every member but one; one FP (1/30)
        // is admissible at 5%, two (2/30) are not.
        let nonmembers: Vec<f64> = (0..30)
            .map(|i| if i < 2 { 100.0 + i as f64 } else { i as f64 })
            .collect();
        let members: Vec<f64> = (0..30).map(|i| 50.0 + i as f64).collect();
        // Threshold 100: only 101 is above -> FPR 1/30, TPR 0 (all members < 100).
        assert_eq!(tpr_from_scores(&members, &nonmembers, 0.05), 0.0);
        let nonmembers: Vec<f64> = (0..30)
            .map(|i| if i == 0 { 100.0 } else { i as f64 })
            .collect();
        // Threshold 29: only the 100 is above -> 1 FP, all members above.
        assert_eq!(tpr_from_scores(&members, &nonmembers, 0.05), 1.0);
    }

    #[test]
    fn cohens_d_fixtures() {
        assert!((cohens_d(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap() + 3.0).abs() < 1e-12);
        assert_eq!(cohens_d(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap(), 0.0);
        assert_eq!(
            cohens_d(&[2.0, 2.0], &[2.0, 2.0]),
            Err(EvalError::DegeneratePool)
        );
        assert_eq!(cohens_d(&[2.0], &[2.0, 3.0]), Err(EvalError::TooFewValues));
    }

    #[test]
    fn build_records_requires_scores_for_labeled_samples() {
        let labels = BTreeMap::from([("a".to_string(), true), ("b".to_string(), false)]);
        let scores = BTreeMap::from([("a".to_string(), 1.0)]);
        assert!(matches!(
            build_records(&labels, &[("s", &scores)]),
            Err(EvalError::MissingScore { .. })
        ));
        assert_eq!(
            build_records(&BTreeMap::new(), &[]),
            Err(EvalError::NoLabels)
        );
    }
}
