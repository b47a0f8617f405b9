//! `repgeo` command-line front end.
//!
//! Every subcommand reads the repstore file formats, calls the library
//! stages in order and writes its tables as CSV and JSON through
//! [`repgeo::report`]. Exit codes: 0 success, 2 usage, 3 data validation,
//! 4 computation precondition. Failures print one JSON object to stderr.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use repgeo::baselines::{score_records, to_score_map, BaselineError, BaselineMethod};
use repgeo::evaluation::{
    ablation_grid, beta_sweep, build_records, evaluate, layer_curves, layer_window_separation,
    AuditConfig, EvalError, DEFAULT_BETAS,
};
use repgeo::geometry::{dataset_profiles, GeometryError};
use repgeo::pipeline::{check_disjoint, fit_reference, score_dataset, PipelineError};
use repgeo::protocol::{score_map, ProtocolError};
use repgeo::report;
use repgeo::repstore::{
    inspect_bundle, read_bundle, read_scores, read_token_stats, scores_to_csv, write_dataset,
    Dataset, RepStoreError,
};
use repgeo::synth::{synth_dataset, synth_reference, SynthError, SynthParams};

use crate::config::{require_path, Overrides, RunConfig, Settings, OUT_DIR_ENV};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] RepStoreError),
    #[error("{0}")]
    Compute(String),
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) | CliError::Output { .. } => 3,
            CliError::Compute(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data_validation",
            CliError::Output { .. } => "output",
            CliError::Compute(_) => "computation",
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": {
                "kind": self.kind(),
                "exit_code": self.exit_code(),
                "message": self.to_string(),
            }
        })
        .to_string()
    }
}

macro_rules! compute_error {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Compute(e.to_string())
            }
        })*
    };
}

compute_error!(GeometryError, ProtocolError, EvalError, BaselineError);

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Compute(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "repgeo",
    version,
    about = "Representation-geometry contamination audit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Stability constant added to denominators.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// all, early, mid, late, or comma-separated layer indices.
    #[arg(long = "layers", global = true)]
    layer_selection: Option<String>,
    /// Metric subset, e.g. RSM,DC,RSI or RSM+DC.
    #[arg(long, global = true)]
    metrics: Option<String>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    mink_fraction: Option<f64>,
    #[arg(long, global = true)]
    fpr_target: Option<f64>,
    /// Output directory (default: config, then $REPGEO_OUT_DIR, then ".").
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a bundle and list every defect.
    Validate {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Per-layer RSM/DC/RSI profiles, plus layer curves and window separation
    /// when the bundle is labeled.
    Metrics {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Aggregate s_lara score per sample.
    Score {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        clean_ref: Option<PathBuf>,
        /// Score CSV path (default: <out-dir>/scores.csv); JSON goes alongside.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Add per-metric mean deviation columns.
        #[arg(long)]
        components: bool,
        /// Allow reference and scored bundles to share sample ids.
        #[arg(long)]
        allow_overlap: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Output-level baseline scores from token statistics.
    Baseline {
        #[arg(long)]
        token_stats: Option<PathBuf>,
        /// ppl, mink or minkpp.
        #[arg(long)]
        method: String,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// AUC and TPR@FPR of one or more score files against bundle labels.
    Eval {
        /// Bundle providing the membership labels.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// NAME=PATH or PATH (name taken from the file stem); repeatable.
        #[arg(long = "scores", required = true)]
        scores: Vec<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluation of all seven metric subsets.
    Ablate {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        clean_ref: Option<PathBuf>,
        #[arg(long)]
        allow_overlap: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluation of β·external + (1 − β)·s_lara over a grid of β.
    SweepBeta {
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Precomputed s_lara scores; otherwise computed with --clean-ref.
        #[arg(long)]
        lara_scores: Option<PathBuf>,
        #[arg(long)]
        clean_ref: Option<PathBuf>,
        #[arg(long)]
        external_scores: Option<PathBuf>,
        /// Comma-separated β values (default 0,0.25,0.5,0.65,0.75,1).
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[arg(long)]
        allow_overlap: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Synthetic labeled bundle with planted contamination.
    Synth {
        /// Bundle path (default: <out-dir>/synth.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a disjoint clean reference bundle here.
        #[arg(long)]
        reference_out: Option<PathBuf>,
        /// Reference size (default: n_clean).
        #[arg(long)]
        reference_size: Option<usize>,
        #[arg(long, default_value_t = 8)]
        num_layers: usize,
        #[arg(long, default_value_t = 16)]
        hidden_dim: usize,
        #[arg(long, default_value_t = 4)]
        num_similar: usize,
        #[arg(long, default_value_t = 3)]
        num_variants: usize,
        #[arg(long, default_value_t = 30)]
        n_clean: usize,
        #[arg(long, default_value_t = 30)]
        n_contaminated: usize,
        #[arg(long, default_value_t = 4.0)]
        shift_gain: f64,
        #[arg(long, default_value_t = 0.8)]
        align_gain: f64,
        #[arg(long, default_value_t = 0.5)]
        rigidity_gain: f64,
        #[arg(long, default_value_t = 1.0)]
        noise_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gains at identity (no planted signal).
        #[arg(long)]
        null: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

fn settings(common: CommonArgs) -> Result<Settings, CliError> {
    let file = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let flags = Overrides {
        epsilon: common.epsilon,
        layer_selection: common.layer_selection,
        metrics: common.metrics,
        beta: common.beta,
        mink_fraction: common.mink_fraction,
        fpr_target: common.fpr_target,
        out_dir: common.out_dir,
    };
    Settings::resolve(
        flags,
        file,
        std::env::var_os(OUT_DIR_ENV).map(PathBuf::from),
    )
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    let output_err = |source| CliError::Output {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(output_err)?;
    }
    fs::write(path, contents).map_err(output_err)
}

/// Writes `<dir>/<stem>.csv` and `<dir>/<stem>.json`.
fn write_table<T: Serialize + ?Sized>(
    dir: &Path,
    stem: &str,
    csv: &str,
    rows: &T,
) -> Result<(), CliError> {
    write_file(&dir.join(format!("{stem}.csv")), csv)?;
    write_file(&dir.join(format!("{stem}.json")), &report::to_json(rows))
}

fn audit_config(s: &Settings) -> AuditConfig {
    AuditConfig {
        eps: s.eps,
        selection: s.selection.clone(),
        fpr_target: s.fpr_target,
    }
}

/// Loads the scored and reference bundles, refusing shared sample ids unless
/// allowed.
fn load_pair(
    bundle: &Path,
    clean_ref: &Path,
    allow_overlap: bool,
) -> Result<(Dataset, Dataset), CliError> {
    let dataset = read_bundle(bundle)?;
    let reference = read_bundle(clean_ref)?;
    if !allow_overlap {
        check_disjoint(&reference, &dataset)?;
    }
    Ok((dataset, reference))
}

#[derive(Serialize)]
struct ValidationReport {
    bundle: PathBuf,
    model_id: String,
    num_samples: usize,
    num_labels: usize,
    defects: Vec<String>,
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Validate { bundle, common } => {
            let s = settings(common)?;
            let path = require_path(bundle, &s.paths.bundle, "bundle")?;
            let file = fs::File::open(&path).map_err(|source| RepStoreError::Io {
                path: path.clone(),
                source,
            })?;
            let inspection = inspect_bundle(BufReader::new(file))?;
            let defects: Vec<String> = inspection.defects.iter().map(|d| d.to_string()).collect();
            let ok = defects.is_empty();
            let summary = ValidationReport {
                bundle: path,
                model_id: inspection.manifest.model_id.clone(),
                num_samples: inspection.samples.len(),
                num_labels: inspection.labels.len(),
                defects,
            };
            print!("{}", report::to_json(&summary));
            if ok {
                // Whole-dataset checks beyond the per-record scan.
                inspection.into_dataset()?;
                Ok(())
            } else {
                Err(CliError::Data(
                    inspection.defects.into_iter().next().expect("nonempty"),
                ))
            }
        }
        Command::Metrics { bundle, common } => {
            let s = settings(common)?;
            let dataset = read_bundle(require_path(bundle, &s.paths.bundle, "bundle")?)?;
            let profiles = dataset_profiles(&dataset, s.eps)?;
            write_table(
                &s.out_dir,
                "profiles",
                &report::profiles_csv(&profiles),
                &profiles,
            )?;
            if dataset.is_labeled() {
                let curves = layer_curves(&profiles, &dataset.labels);
                write_table(
                    &s.out_dir,
                    "layer_curves",
                    &report::curves_csv(&curves),
                    &curves,
                )?;
                let windows = layer_window_separation(&profiles, &dataset.labels);
                write_table(
                    &s.out_dir,
                    "layer_windows",
                    &report::windows_csv(&windows),
                    &windows,
                )?;
            }
            Ok(())
        }
        Command::Score {
            bundle,
            clean_ref,
            out,
            components,
            allow_overlap,
            common,
        } => {
            let s = settings(common)?;
            let bundle = require_path(bundle, &s.paths.bundle, "bundle")?;
            let clean_ref = require_path(clean_ref, &s.paths.clean_ref, "clean-ref")?;
            let (dataset, reference_set) = load_pair(&bundle, &clean_ref, allow_overlap)?;
            let reference = fit_reference(&reference_set, s.eps)?;
            let breakdowns = score_dataset(&dataset, &reference, &s.selection, s.metrics, s.eps)?;
            let out = out.unwrap_or_else(|| s.out_dir.join("scores.csv"));
            write_file(&out, &report::scores_csv(&breakdowns, components))?;
            write_file(&out.with_extension("json"), &report::to_json(&breakdowns))
        }
        Command::Baseline {
            token_stats,
            method,
            common,
        } => {
            let s = settings(common)?;
            let method: BaselineMethod = method.parse().map_err(CliError::Usage)?;
            if let BaselineMethod::External(name) = &method {
                return Err(CliError::Usage(format!(
                    "unknown baseline `{name}` (expected ppl, mink or minkpp)"
                )));
            }
            let path = require_path(token_stats, &s.paths.token_stats, "token-stats")?;
            let records = read_token_stats(path)?;
            let scores = to_score_map(&score_records(&records, &method, s.mink_fraction)?);
            let stem = format!("baseline_{}", method.name());
            write_table(&s.out_dir, &stem, &scores_to_csv(&scores, "score"), &scores)
        }
        Command::Eval {
            bundle,
            scores,
            common,
        } => {
            let s = settings(common)?;
            let dataset = read_bundle(require_path(bundle, &s.paths.bundle, "bundle")?)?;
            let mut methods: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
            for spec in &scores {
                let (name, path) = parse_score_spec(spec)?;
                if methods.insert(name.clone(), read_scores(&path)?).is_some() {
                    return Err(CliError::Usage(format!("duplicate method name `{name}`")));
                }
            }
            let named: Vec<(&str, &BTreeMap<String, f64>)> =
                methods.iter().map(|(n, m)| (n.as_str(), m)).collect();
            let records = build_records(&dataset.labels, &named)?;
            let reports = methods
                .keys()
                .map(|name| evaluate(&records, name, s.fpr_target))
                .collect::<Result<Vec<_>, _>>()?;
            write_table(&s.out_dir, "eval", &report::eval_csv(&reports), &reports)
        }
        Command::Ablate {
            bundle,
            clean_ref,
            allow_overlap,
            common,
        } => {
            let s = settings(common)?;
            let bundle = require_path(bundle, &s.paths.bundle, "bundle")?;
            let clean_ref = require_path(clean_ref, &s.paths.clean_ref, "clean-ref")?;
            let (dataset, reference_set) = load_pair(&bundle, &clean_ref, allow_overlap)?;
            let reference = fit_reference(&reference_set, s.eps)?;
            let profiles = dataset_profiles(&dataset, s.eps)?;
            let rows = ablation_grid(&profiles, &dataset.labels, &reference, &audit_config(&s))?;
            write_table(&s.out_dir, "ablation", &report::ablation_csv(&rows), &rows)
        }
        Command::SweepBeta {
            bundle,
            lara_scores,
            clean_ref,
            external_scores,
            betas,
            allow_overlap,
            common,
        } => {
            let s = settings(common)?;
            let bundle = require_path(bundle, &s.paths.bundle, "bundle")?;
            let external_path =
                require_path(external_scores, &s.paths.external_scores, "external-scores")?;
            let (dataset, lara) = match lara_scores {
                Some(path) => (read_bundle(&bundle)?, read_scores(path)?),
                None => {
                    let clean_ref = require_path(clean_ref, &s.paths.clean_ref, "clean-ref")?;
                    let (dataset, reference_set) = load_pair(&bundle, &clean_ref, allow_overlap)?;
                    let reference = fit_reference(&reference_set, s.eps)?;
                    let breakdowns =
                        score_dataset(&dataset, &reference, &s.selection, s.metrics, s.eps)?;
                    (dataset, score_map(&breakdowns))
                }
            };
            let external = read_scores(external_path)?;
            let betas = betas.unwrap_or_else(|| DEFAULT_BETAS.to_vec());
            if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
                return Err(CliError::Usage(format!("beta out of range: {b}")));
            }
            let rows = beta_sweep(
                &lara,
                &external,
                &dataset.labels,
                &betas,
                s.eps,
                s.fpr_target,
            )?;
            write_table(&s.out_dir, "beta_sweep", &report::beta_csv(&rows), &rows)
        }
        Command::Synth {
            out,
            reference_out,
            reference_size,
            num_layers,
            hidden_dim,
            num_similar,
            num_variants,
            n_clean,
            n_contaminated,
            shift_gain,
            align_gain,
            rigidity_gain,
            noise_scale,
            seed,
            null,
            common,
        } => {
            let s = settings(common)?;
            let mut params = SynthParams {
                num_layers,
                hidden_dim,
                num_similar,
                num_variants,
                n_clean,
                n_contaminated,
                shift_gain,
                align_gain,
                rigidity_gain,
                noise_scale,
                seed,
            };
            if null {
                params = params.null();
            }
            let dataset = synth_dataset(&params)?;
            let out = out.unwrap_or_else(|| s.out_dir.join("synth.jsonl"));
            create_parent(&out)?;
            write_dataset(&dataset, &out)?;
            if let Some(path) = reference_out {
                let reference = synth_reference(&params, reference_size.unwrap_or(n_clean))?;
                create_parent(&path)?;
                write_dataset(&reference, &path)?;
            }
            Ok(())
        }
    }
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => fs::create_dir_all(parent).map_err(|source| CliError::Output {
            path: parent.to_path_buf(),
            source,
        }),
        None => Ok(()),
    }
}

/// `NAME=PATH`, or a bare path named after its file stem.
fn parse_score_spec(spec: &str) -> Result<(String, PathBuf), CliError> {
    if let Some((name, path)) = spec.split_once('=') {
        if name.is_empty() || path.is_empty() {
            return Err(CliError::Usage(format!("bad --scores value `{spec}`")));
        }
        return Ok((name.to_string(), PathBuf::from(path)));
    }
    let path = PathBuf::from(spec);
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| CliError::Usage(format!("bad --scores value `{spec}`")))?
        .to_string();
    Ok((name, path))
}
