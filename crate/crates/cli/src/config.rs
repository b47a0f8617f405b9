//! Run configuration: command-line flags over a TOML file over defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use repgeo::baselines::DEFAULT_MINK_FRACTION;
use repgeo::evaluation::{DEFAULT_BETA, DEFAULT_FPR_TARGET};
use repgeo::{Epsilon, LayerSelection, MetricSet};

use crate::CliError;

pub const OUT_DIR_ENV: &str = "REPGEO_OUT_DIR";

/// Paths that may be given in the config file instead of on the command line.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub bundle: Option<PathBuf>,
    pub clean_ref: Option<PathBuf>,
    pub external_scores: Option<PathBuf>,
    pub token_stats: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Contents of a `--config` TOML file. Every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub epsilon: Option<f64>,
    pub layer_selection: Option<String>,
    pub metrics: Option<String>,
    pub beta: Option<f64>,
    pub mink_fraction: Option<f64>,
    pub fpr_target: Option<f64>,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Flag values shared by every subcommand, before merging.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub epsilon: Option<f64>,
    pub layer_selection: Option<String>,
    pub metrics: Option<String>,
    pub beta: Option<f64>,
    pub mink_fraction: Option<f64>,
    pub fpr_target: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

/// Fully resolved and validated settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub eps: Epsilon,
    pub selection: LayerSelection,
    pub metrics: MetricSet,
    pub beta: f64,
    pub mink_fraction: f64,
    pub fpr_target: f64,
    pub out_dir: PathBuf,
    pub paths: PathsConfig,
}

fn in_range(name: &str, value: f64, ok: bool) -> Result<f64, CliError> {
    if ok && value.is_finite() {
        Ok(value)
    } else {
        Err(CliError::Usage(format!("{name} out of range: {value}")))
    }
}

impl Settings {
    /// Merges flags, file and defaults. `env_out_dir` is the value of
    /// [`OUT_DIR_ENV`], consulted only when neither flag nor file set it.
    pub fn resolve(
        flags: Overrides,
        file: RunConfig,
        env_out_dir: Option<PathBuf>,
    ) -> Result<Self, CliError> {
        let eps = flags
            .epsilon
            .or(file.epsilon)
            .map_or(Ok(Epsilon::DEFAULT), |v| {
                Epsilon::new(v).map_err(|e| CliError::Usage(e.to_string()))
            })?;
        let selection = match flags.layer_selection.or(file.layer_selection) {
            Some(s) => s.parse().map_err(CliError::Usage)?,
            None => LayerSelection::All,
        };
        let metrics = match flags.metrics.or(file.metrics) {
            Some(s) => s.parse().map_err(CliError::Usage)?,
            None => MetricSet::FULL,
        };
        let beta = flags.beta.or(file.beta).unwrap_or(DEFAULT_BETA);
        let beta = in_range("beta", beta, (0.0..=1.0).contains(&beta))?;
        let mink = flags
            .mink_fraction
            .or(file.mink_fraction)
            .unwrap_or(DEFAULT_MINK_FRACTION);
        let mink_fraction = in_range("mink_fraction", mink, mink > 0.0 && mink <= 1.0)?;
        let fpr = flags
            .fpr_target
            .or(file.fpr_target)
            .unwrap_or(DEFAULT_FPR_TARGET);
        let fpr_target = in_range("fpr_target", fpr, fpr > 0.0 && fpr < 1.0)?;
        let out_dir = flags
            .out_dir
            .or_else(|| file.paths.out_dir.clone())
            .or(env_out_dir)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self {
            eps,
            selection,
            metrics,
            beta,
            mink_fraction,
            fpr_target,
            out_dir,
            paths: file.paths,
        })
    }
}

/// First of the flag value and the config value, or a usage error naming the
/// flag.
pub fn require_path(
    flag: Option<PathBuf>,
    configured: &Option<PathBuf>,
    name: &str,
) -> Result<PathBuf, CliError> {
    flag.or_else(|| configured.clone()).ok_or_else(|| {
        CliError::Usage(format!(
            "missing --{name} (flag or config paths.{})",
            name.replace('-', "_")
        ))
    })
}
