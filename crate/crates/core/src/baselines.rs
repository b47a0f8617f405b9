//! Output-level membership baselines computed from token statistics, plus an
//! adapter for externally produced scores (Recall, CDD, Self-Critique, ...).
//!
//! Every score is oriented so that larger means more member-like.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repstore::{TokenStat, TokenStatsRecord};

pub const DEFAULT_MINK_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineError {
    #[error("empty token sequence")]
    EmptyTokenSequence,
    #[error("sample {sample_id}: token {token_index} lacks distribution statistics")]
    MissingDistributionStats {
        sample_id: String,
        token_index: usize,
    },
    #[error("fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BaselineMethod {
    Ppl,
    MinK,
    MinKpp,
    External(String),
}

impl BaselineMethod {
    pub fn name(&self) -> &str {
        match self {
            BaselineMethod::Ppl => "ppl",
            BaselineMethod::MinK => "mink",
            BaselineMethod::MinKpp => "minkpp",
            BaselineMethod::External(name) => name,
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BaselineMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "ppl" => BaselineMethod::Ppl,
            "mink" | "min-k" => BaselineMethod::MinK,
            "minkpp" | "min-k++" => BaselineMethod::MinKpp,
            _ => BaselineMethod::External(s.to_string()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    HigherIsMember,
    LowerIsMember,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineScore {
    pub sample_id: String,
    pub method: BaselineMethod,
    pub score: f64,
}

fn check_fraction(fraction: f64) -> Result<(), BaselineError> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(BaselineError::InvalidFraction(fraction))
    }
}

/// `max(1, ⌊fraction · n⌋)`, tolerant of representation error in the product
/// (so `0.29 · 100` selects 29 tokens, not 28).
fn selected_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n)
}

/// Mean of the lowest `fraction` of `values`. The selected values are summed
/// in their original sequence order, so `fraction = 1` reproduces the plain
/// mean bit-for-bit.
fn mean_of_lowest(values: &[f64], fraction: f64) -> f64 {
    let count = selected_count(fraction, values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut selected = order[..count].to_vec();
    selected.sort_unstable();
    selected.iter().map(|&i| values[i]).sum::<f64>() / count as f64
}

/// Negated perplexity, `−exp(−mean logp)`.
pub fn ppl_score(tokens: &[TokenStat]) -> Result<f64, BaselineError> {
    if tokens.is_empty() {
        return Err(BaselineError::EmptyTokenSequence);
    }
    let mean_logp = tokens.iter().map(|t| t.logp).sum::<f64>() / tokens.len() as f64;
    Ok(-(-mean_logp).exp())
}

/// Mean log-probability of the lowest `fraction` of tokens.
pub fn mink_score(tokens: &[TokenStat], fraction: f64) -> Result<f64, BaselineError> {
    check_fraction(fraction)?;
    if tokens.is_empty() {
        return Err(BaselineError::EmptyTokenSequence);
    }
    let logps: Vec<f64> = tokens.iter().map(|t| t.logp).collect();
    Ok(mean_of_lowest(&logps, fraction))
}

/// Min-K% on per-token standardized values `(logp − μ) / σ`, where `μ`/`σ`
/// describe the model's log-probability distribution at that position.
pub fn minkpp_score(
    sample_id: &str,
    tokens: &[TokenStat],
    fraction: f64,
) -> Result<f64, BaselineError> {
    check_fraction(fraction)?;
    if tokens.is_empty() {
        return Err(BaselineError::EmptyTokenSequence);
    }
    let normalized = tokens
        .iter()
        .enumerate()
        .map(|(idx, t)| match (t.dist_mean, t.dist_std) {
            (Some(mu), Some(sd)) if sd > 0.0 => Ok((t.logp - mu) / sd),
            _ => Err(BaselineError::MissingDistributionStats {
                sample_id: sample_id.to_string(),
                token_index: idx,
            }),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean_of_lowest(&normalized, fraction))
}

/// Scores every record with one of the token-statistics baselines.
pub fn score_records(
    records: &[TokenStatsRecord],
    method: &BaselineMethod,
    fraction: f64,
) -> Result<Vec<BaselineScore>, BaselineError> {
    records
        .iter()
        .map(|r| {
            let score = match method {
                BaselineMethod::Ppl => ppl_score(&r.tokens)?,
                BaselineMethod::MinK => mink_score(&r.tokens, fraction)?,
                BaselineMethod::MinKpp => minkpp_score(&r.sample_id, &r.tokens, fraction)?,
                BaselineMethod::External(_) => unreachable!("external scores are ingested"),
            };
            Ok(BaselineScore {
                sample_id: r.sample_id.clone(),
                method: method.clone(),
                score,
            })
        })
        .collect()
}

pub fn adapt_external(
    name: &str,
    scores: &BTreeMap<String, f64>,
    orientation: Orientation,
) -> Vec<BaselineScore> {
    let sign = match orientation {
        Orientation::HigherIsMember => 1.0,
        Orientation::LowerIsMember => -1.0,
    };
    scores
        .iter()
        .map(|(id, &score)| BaselineScore {
            sample_id: id.clone(),
            method: BaselineMethod::External(name.to_string()),
            score: sign * score,
        })
        .collect()
}

pub fn to_score_map(scores: &[BaselineScore]) -> BTreeMap<String, f64> {
    scores
        .iter()
        .map(|s| (s.sample_id.clone(), s.score))
        .collect()
}
