//! Compositions of the stage modules used by the command-line tool and the
//! end-to-end tests.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::evaluation::{evaluate_scores, AuditConfig, EvalError, EvalReport};
use crate::geometry::{dataset_profiles, Epsilon, GeometryError, GeometryProfile};
use crate::protocol::{
    fit_clean_reference, score_map, score_profiles, CleanReference, LayerSelection, MetricSet,
    ProtocolError, ScoreBreakdown,
};
use crate::repstore::Dataset;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("clean-reference and scored bundles share {count} sample ids (first: {first})")]
    ReferenceOverlap { count: usize, first: String },
    #[error("clean-reference bundle has no non-member samples")]
    NoCleanSamples,
}

/// Profiles of the samples used to fit the clean reference: the
/// non-members of a labeled bundle, or every sample of an unlabeled one.
pub fn clean_profiles(
    reference: &Dataset,
    eps: Epsilon,
) -> Result<Vec<GeometryProfile>, PipelineError> {
    let profiles = dataset_profiles(reference, eps)?;
    if !reference.is_labeled() {
        return Ok(profiles);
    }
    let clean: Vec<GeometryProfile> = profiles
        .into_iter()
        .filter(|p| reference.labels.get(&p.sample_id) == Some(&false))
        .collect();
    if clean.is_empty() {
        return Err(PipelineError::NoCleanSamples);
    }
    Ok(clean)
}

/// Refuses to fit a reference on samples that are also being scored.
pub fn check_disjoint(reference: &Dataset, scored: &Dataset) -> Result<(), PipelineError> {
    let shared: Vec<&str> = reference
        .samples
        .iter()
        .map(|s| s.sample_id())
        .filter(|id| scored.sample(id).is_some())
        .collect();
    match shared.first() {
        None => Ok(()),
        Some(first) => Err(PipelineError::ReferenceOverlap {
            count: shared.len(),
            first: first.to_string(),
        }),
    }
}

pub fn fit_reference(reference: &Dataset, eps: Epsilon) -> Result<CleanReference, PipelineError> {
    Ok(fit_clean_reference(&clean_profiles(reference, eps)?)?)
}

pub fn score_dataset(
    dataset: &Dataset,
    reference: &CleanReference,
    selection: &LayerSelection,
    metrics: MetricSet,
    eps: Epsilon,
) -> Result<Vec<ScoreBreakdown>, PipelineError> {
    let profiles = dataset_profiles(dataset, eps)?;
    Ok(score_profiles(
        &profiles, reference, selection, metrics, eps,
    )?)
}

/// Reference fit, scoring and evaluation of `s_lara` in one call.
pub fn audit(
    dataset: &Dataset,
    reference_set: &Dataset,
    metrics: MetricSet,
    config: &AuditConfig,
) -> Result<(BTreeMap<String, f64>, EvalReport), PipelineError> {
    check_disjoint(reference_set, dataset)?;
    let reference = fit_reference(reference_set, config.eps)?;
    let breakdowns = score_dataset(dataset, &reference, &config.selection, metrics, config.eps)?;
    let scores = score_map(&breakdowns);
    let report = evaluate_scores("s_lara", &scores, &dataset.labels, config.fpr_target)?;
    Ok((scores, report))
}
