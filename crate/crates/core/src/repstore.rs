//! On-disk formats: representation bundles, score CSVs and token statistics.
//!
//! A bundle is line-delimited JSON. Line 1 is the manifest; every later line
//! is a `rep` or `label` record, in any order:
//!
//! ```text
//! {"type":"manifest","model_id":"m","num_layers":2,"hidden_dim":3,"num_similar":2,"num_variants":2,"num_blanks":1}
//! {"type":"rep","sample_id":"s1","question_index":0,"kind":"clean","layers":[[...],[...]]}
//! {"type":"rep","sample_id":"s1","question_index":2,"kind":"variant","variant_index":1,"layers":[[...],[...]]}
//! {"type":"label","sample_id":"s1","member":1}
//! ```
//!
//! Layer 0 is the embedding-layer output and layers `1..L` are the transformer
//! block outputs. Question index 0 is the original question, `1..=K` its
//! similar questions; variant indices run `1..=M`.
//!
//! Representation values are written in scientific notation with 17
//! significant digits so that a write/read cycle reproduces every `f64`
//! exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RepStoreError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("first line of the bundle is not a manifest record")]
    MissingManifest,
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("sample {sample_id}: {what} mismatch, expected {expected}, got {got}")]
    DimensionMismatch {
        sample_id: String,
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("sample {sample_id} is incomplete, missing {missing}")]
    IncompleteSample { sample_id: String, missing: String },
    #[error("sample {sample_id} contains a non-finite value")]
    NonFiniteValue { sample_id: String },
    #[error("sample {sample_id}: {message}")]
    IndexOutOfRange { sample_id: String, message: String },
    #[error("sample {sample_id}: duplicate record {record}")]
    DuplicateRecord { sample_id: String, record: String },
    #[error("sample {sample_id} is labeled more than once")]
    DuplicateLabel { sample_id: String },
    #[error("sample {sample_id}: membership label must be 0 or 1, got {value}")]
    InvalidLabel { sample_id: String, value: i64 },
    #[error("label for {sample_id} has no representation records")]
    LabelWithoutSample { sample_id: String },
    #[error("duplicate sample id {sample_id}")]
    DuplicateSample { sample_id: String },
    #[error("malformed row at line {line}")]
    MalformedRow { line: u64 },
    #[error("expected a `sample_id,score` header, found `{found}`")]
    BadHeader { found: String },
    #[error("token statistics for {sample_id}: {message}")]
    InvalidTokenStats { sample_id: String, message: String },
}

pub type Result<T, E = RepStoreError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RepStoreError + '_ {
    move |source| RepStoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Shape parameters shared by every sample of a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub model_id: String,
    /// `L`: number of hidden-state layers, embeddings included.
    pub num_layers: usize,
    /// `d`: hidden dimension.
    pub hidden_dim: usize,
    /// `K`: number of similar questions per original.
    pub num_similar: usize,
    /// `M`: number of paraphrase variants per blanked question.
    pub num_variants: usize,
    /// `k`: number of `[BLANK]` markers per blanked question.
    pub num_blanks: usize,
    /// Free-form provenance (pooling mode, tokenizer, ...). Not interpreted.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl BundleManifest {
    pub fn new(
        model_id: impl Into<String>,
        num_layers: usize,
        hidden_dim: usize,
        num_similar: usize,
        num_variants: usize,
        num_blanks: usize,
    ) -> Self {
        Self {
            model_id: model_id.into(),
            num_layers,
            hidden_dim,
            num_similar,
            num_variants,
            num_blanks,
            metadata: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(RepStoreError::InvalidManifest(msg.to_string()));
        if self.num_layers < 1 {
            return fail("num_layers must be at least 1");
        }
        if self.hidden_dim < 1 {
            return fail("hidden_dim must be at least 1");
        }
        if self.num_similar < 2 {
            return fail(
                "num_similar must be at least 2 (neighbor standard deviation needs K >= 2)",
            );
        }
        if self.num_variants < 2 {
            return fail("num_variants must be at least 2");
        }
        if self.num_blanks < 1 {
            return fail("num_blanks must be at least 1");
        }
        Ok(())
    }

    /// Records per complete sample: `(K+1)` clean, `(K+1)` blanked and
    /// `(K+1)·M` variant records.
    pub fn records_per_sample(&self) -> usize {
        (self.num_similar + 1) * (2 + self.num_variants)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Clean,
    Blanked,
    Variant,
}

/// One mean-pooled `L × d` representation stack, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    dim: usize,
    data: Vec<f64>,
}

impl LayerStack {
    /// Builds a stack from per-layer rows. All rows must share one nonzero width.
    pub fn from_rows(rows: &[Vec<f64>]) -> Option<Self> {
        let dim = rows.first()?.len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return None;
        }
        Some(Self {
            dim,
            data: rows.concat(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.data[layer * self.dim..(layer + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Applies `f` to every scalar. Used by fixture generators and tests.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Applies `f(layer, coordinate, value)` to every scalar.
    pub fn map_indexed(&self, f: impl Fn(usize, usize, f64) -> f64) -> Self {
        let dim = self.dim;
        Self {
            dim,
            data: self
                .data
                .iter()
                .enumerate()
                .map(|(idx, &v)| f(idx / dim, idx % dim, v))
                .collect(),
        }
    }
}

/// All representations needed to compute one sample's geometry profile.
///
/// Index 0 of each question-indexed vector is the original question and
/// indices `1..=K` are its similar questions.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGeometryInput {
    sample_id: String,
    clean: Vec<LayerStack>,
    blanked: Vec<LayerStack>,
    variants: Vec<Vec<LayerStack>>,
}

impl SampleGeometryInput {
    /// Checks internal shape consistency: `K + 1 >= 2` questions, the same
    /// number of blanked stacks and variant groups, at least one variant per
    /// question, and a common `L × d` shape everywhere.
    pub fn new(
        sample_id: impl Into<String>,
        clean: Vec<LayerStack>,
        blanked: Vec<LayerStack>,
        variants: Vec<Vec<LayerStack>>,
    ) -> Result<Self> {
        let sample_id = sample_id.into();
        let questions = clean.len();
        let mismatch = |what, expected, got| RepStoreError::DimensionMismatch {
            sample_id: sample_id.clone(),
            what,
            expected,
            got,
        };
        if questions < 2 {
            return Err(RepStoreError::IncompleteSample {
                sample_id,
                missing: "similar questions (need at least one besides the original)".into(),
            });
        }
        if blanked.len() != questions {
            return Err(mismatch("blanked question count", questions, blanked.len()));
        }
        if variants.len() != questions {
            return Err(mismatch("variant group count", questions, variants.len()));
        }
        let num_variants = variants[0].len();
        if num_variants == 0 {
            return Err(RepStoreError::IncompleteSample {
                sample_id,
                missing: "variants".into(),
            });
        }
        if let Some(group) = variants.iter().find(|g| g.len() != num_variants) {
            return Err(mismatch("variants per question", num_variants, group.len()));
        }
        let (layers, dim) = (clean[0].num_layers(), clean[0].dim());
        for stack in clean
            .iter()
            .chain(&blanked)
            .chain(variants.iter().flatten())
        {
            if stack.num_layers() != layers {
                return Err(mismatch("layer count", layers, stack.num_layers()));
            }
            if stack.dim() != dim {
                return Err(mismatch("hidden dimension", dim, stack.dim()));
            }
            if !stack.is_finite() {
                return Err(RepStoreError::NonFiniteValue { sample_id });
            }
        }
        Ok(Self {
            sample_id,
            clean,
            blanked,
            variants,
        })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    /// `K`, the number of similar questions (excluding the original).
    pub fn num_similar(&self) -> usize {
        self.clean.len() - 1
    }

    pub fn num_variants(&self) -> usize {
        self.variants[0].len()
    }

    pub fn num_layers(&self) -> usize {
        self.clean[0].num_layers()
    }

    pub fn dim(&self) -> usize {
        self.clean[0].dim()
    }

    /// `u_i` stacks, original first.
    pub fn clean(&self) -> &[LayerStack] {
        &self.clean
    }

    /// `w_i` stacks, original first.
    pub fn blanked(&self) -> &[LayerStack] {
        &self.blanked
    }

    /// `φ_{i,·}` stacks; `variants()[i][m]` is variant `m + 1` of question `i`.
    pub fn variants(&self) -> &[Vec<LayerStack>] {
        &self.variants
    }

    /// Checks this sample against a manifest's declared shape.
    pub fn check_against(&self, manifest: &BundleManifest) -> Result<()> {
        let mismatch = |what, expected, got| {
            Err(RepStoreError::DimensionMismatch {
                sample_id: self.sample_id.clone(),
                what,
                expected,
                got,
            })
        };
        if self.num_similar() != manifest.num_similar {
            return mismatch(
                "similar question count",
                manifest.num_similar,
                self.num_similar(),
            );
        }
        if self.num_variants() != manifest.num_variants {
            return mismatch("variant count", manifest.num_variants, self.num_variants());
        }
        if self.num_layers() != manifest.num_layers {
            return mismatch("layer count", manifest.num_layers, self.num_layers());
        }
        if self.dim() != manifest.hidden_dim {
            return mismatch("hidden dimension", manifest.hidden_dim, self.dim());
        }
        Ok(())
    }
}

/// A validated bundle: manifest, complete samples sorted by id, and optional
/// membership labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: BundleManifest,
    pub samples: Vec<SampleGeometryInput>,
    /// `sample_id -> member`.
    pub labels: BTreeMap<String, bool>,
}

impl Dataset {
    pub fn new(
        manifest: BundleManifest,
        mut samples: Vec<SampleGeometryInput>,
        labels: BTreeMap<String, bool>,
    ) -> Result<Self> {
        manifest.validate()?;
        samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        for pair in samples.windows(2) {
            if pair[0].sample_id == pair[1].sample_id {
                return Err(RepStoreError::DuplicateSample {
                    sample_id: pair[0].sample_id.clone(),
                });
            }
        }
        for sample in &samples {
            sample.check_against(&manifest)?;
        }
        for id in labels.keys() {
            if samples
                .binary_search_by(|s| s.sample_id.as_str().cmp(id))
                .is_err()
            {
                return Err(RepStoreError::LabelWithoutSample {
                    sample_id: id.clone(),
                });
            }
        }
        Ok(Self {
            manifest,
            samples,
            labels,
        })
    }

    pub fn sample(&self, sample_id: &str) -> Option<&SampleGeometryInput> {
        self.samples
            .binary_search_by(|s| s.sample_id.as_str().cmp(sample_id))
            .ok()
            .map(|idx| &self.samples[idx])
    }

    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty()
    }
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum BundleLine {
    Manifest(BundleManifest),
    Rep(RawRep),
    Label(RawLabel),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRep {
    sample_id: String,
    question_index: usize,
    kind: RecordKind,
    #[serde(default)]
    variant_index: Option<usize>,
    layers: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLabel {
    sample_id: String,
    member: i64,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum OutLine<'a> {
    Manifest(&'a BundleManifest),
    Label { sample_id: &'a str, member: u8 },
}

/// Per-sample slot table filled while streaming records.
struct Slots {
    clean: Vec<Option<LayerStack>>,
    blanked: Vec<Option<LayerStack>>,
    variants: Vec<Vec<Option<LayerStack>>>,
}

impl Slots {
    fn new(manifest: &BundleManifest) -> Self {
        let q = manifest.num_similar + 1;
        Self {
            clean: vec![None; q],
            blanked: vec![None; q],
            variants: vec![vec![None; manifest.num_variants]; q],
        }
    }

    fn missing(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, slot) in self.clean.iter().enumerate() {
            if slot.is_none() {
                out.push(format!("clean (i={i})"));
            }
        }
        for (i, slot) in self.blanked.iter().enumerate() {
            if slot.is_none() {
                out.push(format!("blanked (i={i})"));
            }
        }
        for (i, group) in self.variants.iter().enumerate() {
            for (m, slot) in group.iter().enumerate() {
                if slot.is_none() {
                    out.push(format!("variant (i={i}, m={})", m + 1));
                }
            }
        }
        out
    }

    fn into_sample(self, sample_id: String) -> Result<SampleGeometryInput> {
        let take = |v: Vec<Option<LayerStack>>| v.into_iter().map(Option::unwrap).collect();
        SampleGeometryInput::new(
            sample_id,
            take(self.clean),
            take(self.blanked),
            self.variants.into_iter().map(take).collect(),
        )
    }
}

/// Result of scanning a bundle: every defect found, plus the samples that
/// assembled cleanly.
#[derive(Debug)]
pub struct BundleInspection {
    pub manifest: BundleManifest,
    pub samples: Vec<SampleGeometryInput>,
    pub labels: BTreeMap<String, bool>,
    pub defects: Vec<RepStoreError>,
}

impl BundleInspection {
    pub fn into_dataset(self) -> Result<Dataset> {
        if let Some(first) = self.defects.into_iter().next() {
            return Err(first);
        }
        Dataset::new(self.manifest, self.samples, self.labels)
    }
}

/// Scans a bundle, collecting every record-level defect instead of stopping
/// at the first one. Only an unreadable stream or a missing/invalid manifest
/// is fatal.
pub fn inspect_bundle<R: BufRead>(reader: R) -> Result<BundleInspection> {
    let mut lines = reader.lines().enumerate();
    let manifest = loop {
        match lines.next() {
            None => return Err(RepStoreError::MissingManifest),
            Some((idx, line)) => {
                let line = line.map_err(|e| RepStoreError::Parse {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
                if idx == 0 || !line.trim().is_empty() {
                    match serde_json::from_str::<BundleLine>(&line) {
                        Ok(BundleLine::Manifest(m)) => break m,
                        _ => return Err(RepStoreError::MissingManifest),
                    }
                }
            }
        }
    };
    manifest.validate()?;

    let mut defects = Vec::new();
    let mut slots: BTreeMap<String, Slots> = BTreeMap::new();
    let mut labels = BTreeMap::new();
    let mut duplicate_labels = BTreeSet::new();

    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                defects.push(RepStoreError::Parse {
                    line: line_no,
                    message: e.to_string(),
                });
                continue;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<BundleLine>(&line) {
            Err(e) => defects.push(RepStoreError::Parse {
                line: line_no,
                message: e.to_string(),
            }),
            Ok(BundleLine::Manifest(_)) => defects.push(RepStoreError::Parse {
                line: line_no,
                message: "second manifest record".into(),
            }),
            Ok(BundleLine::Label(label)) => {
                if label.member != 0 && label.member != 1 {
                    defects.push(RepStoreError::InvalidLabel {
                        sample_id: label.sample_id,
                        value: label.member,
                    });
                } else if labels
                    .insert(label.sample_id.clone(), label.member == 1)
                    .is_some()
                    && duplicate_labels.insert(label.sample_id.clone())
                {
                    defects.push(RepStoreError::DuplicateLabel {
                        sample_id: label.sample_id,
                    });
                }
            }
            Ok(BundleLine::Rep(rep)) => {
                if let Err(defect) = place_record(&manifest, &mut slots, rep) {
                    defects.push(defect);
                }
            }
        }
    }

    let mut samples = Vec::with_capacity(slots.len());
    for (sample_id, table) in slots {
        let missing = table.missing();
        if !missing.is_empty() {
            defects.push(RepStoreError::IncompleteSample {
                sample_id,
                missing: missing.join(", "),
            });
            continue;
        }
        match table.into_sample(sample_id) {
            Ok(sample) => samples.push(sample),
            Err(e) => defects.push(e),
        }
    }
    let known: BTreeSet<&str> = samples.iter().map(|s| s.sample_id()).collect();
    for id in labels.keys() {
        let incomplete = defects.iter().any(
            |d| matches!(d, RepStoreError::IncompleteSample { sample_id, .. } if sample_id == id),
        );
        if !known.contains(id.as_str()) && !incomplete {
            defects.push(RepStoreError::LabelWithoutSample {
                sample_id: id.clone(),
            });
        }
    }
    Ok(BundleInspection {
        manifest,
        samples,
        labels,
        defects,
    })
}

fn place_record(
    manifest: &BundleManifest,
    slots: &mut BTreeMap<String, Slots>,
    rep: RawRep,
) -> Result<()> {
    let sample_id = rep.sample_id;
    let out_of_range = |message: String| RepStoreError::IndexOutOfRange {
        sample_id: sample_id.clone(),
        message,
    };
    if rep.question_index > manifest.num_similar {
        return Err(out_of_range(format!(
            "question_index {} outside [0, {}]",
            rep.question_index, manifest.num_similar
        )));
    }
    let variant = match (rep.kind, rep.variant_index) {
        (RecordKind::Variant, Some(m)) if (1..=manifest.num_variants).contains(&m) => Some(m - 1),
        (RecordKind::Variant, Some(m)) => {
            return Err(out_of_range(format!(
                "variant_index {m} outside [1, {}]",
                manifest.num_variants
            )))
        }
        (RecordKind::Variant, None) => {
            return Err(out_of_range("variant record without variant_index".into()))
        }
        (_, Some(_)) => {
            return Err(out_of_range(
                "variant_index present on a non-variant record".into(),
            ))
        }
        (_, None) => None,
    };
    if rep.layers.len() != manifest.num_layers {
        return Err(RepStoreError::DimensionMismatch {
            sample_id,
            what: "layer count",
            expected: manifest.num_layers,
            got: rep.layers.len(),
        });
    }
    if let Some(row) = rep.layers.iter().find(|r| r.len() != manifest.hidden_dim) {
        return Err(RepStoreError::DimensionMismatch {
            sample_id,
            what: "hidden dimension",
            expected: manifest.hidden_dim,
            got: row.len(),
        });
    }
    if rep.layers.iter().flatten().any(|v| !v.is_finite()) {
        return Err(RepStoreError::NonFiniteValue { sample_id });
    }
    let stack = LayerStack::from_rows(&rep.layers).expect("shape checked above");
    let table = slots
        .entry(sample_id.clone())
        .or_insert_with(|| Slots::new(manifest));
    let i = rep.question_index;
    let (slot, label) = match (rep.kind, variant) {
        (RecordKind::Clean, _) => (&mut table.clean[i], format!("clean (i={i})")),
        (RecordKind::Blanked, _) => (&mut table.blanked[i], format!("blanked (i={i})")),
        (RecordKind::Variant, Some(m)) => (
            &mut table.variants[i][m],
            format!("variant (i={i}, m={})", m + 1),
        ),
        (RecordKind::Variant, None) => unreachable!("checked above"),
    };
    if slot.is_some() {
        return Err(RepStoreError::DuplicateRecord {
            sample_id,
            record: label,
        });
    }
    *slot = Some(stack);
    Ok(())
}

/// Loads a bundle, failing on the first defect (in sample-id order).
pub fn read_bundle(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    inspect_bundle(BufReader::new(file))?.into_dataset()
}

pub fn parse_bundle(text: &str) -> Result<Dataset> {
    inspect_bundle(text.as_bytes())?.into_dataset()
}

/// Formats a float with 17 significant digits in JSON-compatible scientific
/// notation.
pub fn format_f64(value: f64) -> String {
    format!("{value:.16e}")
}

fn write_rep_line(
    out: &mut String,
    sample_id: &str,
    question_index: usize,
    kind: RecordKind,
    variant_index: Option<usize>,
    stack: &LayerStack,
) {
    let id = serde_json::to_string(sample_id).expect("string serialization");
    let kind = match kind {
        RecordKind::Clean => "clean",
        RecordKind::Blanked => "blanked",
        RecordKind::Variant => "variant",
    };
    let _ = write!(
        out,
        r#"{{"type":"rep","sample_id":{id},"question_index":{question_index},"kind":"{kind}""#
    );
    if let Some(m) = variant_index {
        let _ = write!(out, r#","variant_index":{m}"#);
    }
    out.push_str(r#","layers":["#);
    for (l, row) in stack.rows().enumerate() {
        if l > 0 {
            out.push(',');
        }
        out.push('[');
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format_f64(*v));
        }
        out.push(']');
    }
    out.push_str("]}\n");
}

/// Serializes a dataset to the bundle text format. Validates everything first
/// so that an invalid dataset produces no output at all.
pub fn bundle_to_string(
    manifest: &BundleManifest,
    samples: &[SampleGeometryInput],
    labels: &BTreeMap<String, bool>,
) -> Result<String> {
    manifest.validate()?;
    for sample in samples {
        sample.check_against(manifest)?;
    }
    let mut out = serde_json::to_string(&OutLine::Manifest(manifest)).expect("manifest json");
    out.push('\n');
    for sample in samples {
        let id = sample.sample_id();
        for (i, stack) in sample.clean().iter().enumerate() {
            write_rep_line(&mut out, id, i, RecordKind::Clean, None, stack);
        }
        for (i, stack) in sample.blanked().iter().enumerate() {
            write_rep_line(&mut out, id, i, RecordKind::Blanked, None, stack);
        }
        for (i, group) in sample.variants().iter().enumerate() {
            for (m, stack) in group.iter().enumerate() {
                write_rep_line(&mut out, id, i, RecordKind::Variant, Some(m + 1), stack);
            }
        }
    }
    for (id, &member) in labels {
        let line = OutLine::Label {
            sample_id: id,
            member: member as u8,
        };
        out.push_str(&serde_json::to_string(&line).expect("label json"));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_bundle(
    manifest: &BundleManifest,
    samples: &[SampleGeometryInput],
    labels: &BTreeMap<String, bool>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let text = bundle_to_string(manifest, samples, labels)?;
    let path = path.as_ref();
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_bundle(&dataset.manifest, &dataset.samples, &dataset.labels, path)
}

/// Reads a `sample_id,score` CSV. The score column may also be named
/// `s_lara` so that score files emitted by this crate can be read back;
/// further columns are ignored.
pub fn read_scores(path: impl AsRef<Path>) -> Result<BTreeMap<String, f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    parse_scores(file)
}

pub fn parse_scores<R: io::Read>(reader: R) -> Result<BTreeMap<String, f64>> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = csv.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        _ => {
            return Err(RepStoreError::BadHeader {
                found: String::new(),
            })
        }
    };
    let header_ok = header.len() >= 2
        && header.get(0).map(str::trim) == Some("sample_id")
        && matches!(header.get(1).map(str::trim), Some("score" | "s_lara"));
    if !header_ok {
        return Err(RepStoreError::BadHeader {
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut scores = BTreeMap::new();
    for (idx, record) in records.enumerate() {
        let line = idx as u64 + 2;
        let record = record.map_err(|_| RepStoreError::MalformedRow { line })?;
        let line = record.position().map_or(line, |p| p.line());
        let id = record.get(0).map(str::trim).unwrap_or("");
        let score = record
            .get(1)
            .and_then(|s| s.trim().parse::<f64>().ok())
            .filter(|s| s.is_finite());
        let (true, Some(score)) = (!id.is_empty(), score) else {
            return Err(RepStoreError::MalformedRow { line });
        };
        if scores.insert(id.to_string(), score).is_some() {
            return Err(RepStoreError::DuplicateSample {
                sample_id: id.to_string(),
            });
        }
    }
    Ok(scores)
}

/// Writes a two-column score CSV with the given score column name.
pub fn scores_to_csv(scores: &BTreeMap<String, f64>, column: &str) -> String {
    let mut out = format!("sample_id,{column}\n");
    for (id, score) in scores {
        let _ = writeln!(out, "{},{score}", csv_field(id));
    }
    out
}

pub fn write_scores(
    scores: &BTreeMap<String, f64>,
    column: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, scores_to_csv(scores, column)).map_err(io_err(path))
}

/// Quotes a CSV field when it contains a delimiter, quote or newline.
pub fn csv_field(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Per-token statistics for the output-level baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenStat {
    /// Natural-log probability of the observed token.
    pub logp: f64,
    /// Mean of the log-probabilities over the vocabulary at this position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist_mean: Option<f64>,
    /// Standard deviation of the vocabulary log-probabilities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist_std: Option<f64>,
}

impl TokenStat {
    pub fn new(logp: f64) -> Self {
        Self {
            logp,
            dist_mean: None,
            dist_std: None,
        }
    }

    pub fn with_distribution(logp: f64, mean: f64, std: f64) -> Self {
        Self {
            logp,
            dist_mean: Some(mean),
            dist_std: Some(std),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenStatsRecord {
    pub sample_id: String,
    pub tokens: Vec<TokenStat>,
}

impl TokenStatsRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| {
            Err(RepStoreError::InvalidTokenStats {
                sample_id: self.sample_id.clone(),
                message,
            })
        };
        if self.tokens.is_empty() {
            return fail("empty token sequence".into());
        }
        for (idx, tok) in self.tokens.iter().enumerate() {
            if !tok.logp.is_finite() || tok.logp > 0.0 {
                return fail(format!("token {idx}: logp must be finite and <= 0"));
            }
            if tok.dist_mean.is_some_and(|m| !m.is_finite()) {
                return fail(format!("token {idx}: dist_mean must be finite"));
            }
            if tok.dist_std.is_some_and(|s| !(s.is_finite() && s > 0.0)) {
                return fail(format!("token {idx}: dist_std must be positive"));
            }
        }
        Ok(())
    }
}

pub fn parse_token_stats<R: BufRead>(reader: R) -> Result<Vec<TokenStatsRecord>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| RepStoreError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TokenStatsRecord =
            serde_json::from_str(&line).map_err(|e| RepStoreError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        record.validate()?;
        if !seen.insert(record.sample_id.clone()) {
            return Err(RepStoreError::DuplicateSample {
                sample_id: record.sample_id,
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn read_token_stats(path: impl AsRef<Path>) -> Result<Vec<TokenStatsRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    parse_token_stats(BufReader::new(file))
}

pub fn write_token_stats(records: &[TokenStatsRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for record in records {
        record.validate()?;
        let line = serde_json::to_string(record).expect("token stats json");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecordKind::Clean => "clean",
            RecordKind::Blanked => "blanked",
            RecordKind::Variant => "variant",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(layers: usize, dim: usize, seed: f64) -> LayerStack {
        let rows: Vec<Vec<f64>> = (0..layers)
            .map(|l| {
                (0..dim)
                    .map(|j| seed + l as f64 * 0.5 + j as f64 * 0.25)
                    .collect()
            })
            .collect();
        LayerStack::from_rows(&rows).unwrap()
    }

    /// Manifest {L=2,d=3,K=2,M=2,k=1} with one complete sample.
    fn toy_bundle() -> (BundleManifest, SampleGeometryInput) {
        let manifest = BundleManifest::new("toy", 2, 3, 2, 2, 1);
        let sample = SampleGeometryInput::new(
            "s1",
            (0..3).map(|i| stack(2, 3, i as f64)).collect(),
            (0..3).map(|i| stack(2, 3, 10.0 + i as f64)).collect(),
            (0..3)
                .map(|i| {
                    (0..2)
                        .map(|m| stack(2, 3, 20.0 + i as f64 + m as f64 / 3.0))
                        .collect()
                })
                .collect(),
        )
        .unwrap();
        (manifest, sample)
    }

    fn toy_text() -> String {
        let (manifest, sample) = toy_bundle();
        let labels = BTreeMap::from([("s1".to_string(), true)]);
        bundle_to_string(&manifest, &[sample], &labels).unwrap()
    }

    #[test]
    fn complete_bundle_assembles_one_sample() {
        let text = toy_text();
        // manifest + 3 clean + 3 blanked + 6 variant + 1 label
        assert_eq!(text.lines().count(), 1 + 3 + 3 + 6 + 1);
        let ds = parse_bundle(&text).unwrap();
        assert_eq!(ds.samples.len(), 1);
        assert_eq!(ds.manifest.records_per_sample(), 12);
        assert_eq!(ds.labels.get("s1"), Some(&true));
        let (_, sample) = toy_bundle();
        assert_eq!(ds.samples[0], sample);
    }

    #[test]
    fn missing_variant_is_reported() {
        let text: String = toy_text()
            .lines()
            .filter(|l| {
                !(l.contains(r#""question_index":2"#) && l.contains(r#""variant_index":2"#))
            })
            .map(|l| format!("{l}\n"))
            .collect();
        match parse_bundle(&text) {
            Err(RepStoreError::IncompleteSample { sample_id, missing }) => {
                assert_eq!(sample_id, "s1");
                assert_eq!(missing, "variant (i=2, m=2)");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wide_row_is_dimension_mismatch() {
        let mut lines: Vec<String> = toy_text().lines().map(String::from).collect();
        lines[1] = r#"{"type":"rep","sample_id":"s1","question_index":0,"kind":"clean","layers":[[1,2,3,4],[1,2,3]]}"#.into();
        let text = lines.join("\n");
        assert!(matches!(
            parse_bundle(&text),
            Err(RepStoreError::DimensionMismatch {
                expected: 3,
                got: 4,
                ..
            })
        ));
    }

    #[test]
    fn manifest_must_come_first() {
        let text = toy_text();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(0, 1);
        assert!(matches!(
            parse_bundle(&lines.join("\n")),
            Err(RepStoreError::MissingManifest)
        ));
        assert!(matches!(
            parse_bundle(""),
            Err(RepStoreError::MissingManifest)
        ));
    }

    #[test]
    fn manifest_rejects_single_neighbor() {
        let m = BundleManifest::new("x", 1, 1, 1, 2, 1);
        assert!(matches!(
            m.validate(),
            Err(RepStoreError::InvalidManifest(_))
        ));
    }

    #[test]
    fn empty_sample_list_writes_only_manifest() {
        let manifest = BundleManifest::new("empty", 2, 3, 2, 2, 1);
        let text = bundle_to_string(&manifest, &[], &BTreeMap::new()).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with(r#"{"type":"manifest""#));
        assert!(parse_bundle(&text).unwrap().samples.is_empty());
    }

    #[test]
    fn incompatible_sample_rejected_before_output() {
        let (_, sample) = toy_bundle();
        let manifest = BundleManifest::new("toy", 2, 3, 3, 2, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.jsonl");
        assert!(write_bundle(&manifest, &[sample], &BTreeMap::new(), &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn duplicate_records_and_labels_are_defects() {
        let text = toy_text();
        let mut lines: Vec<&str> = text.lines().collect();
        let dup_rep = lines[1];
        let dup_label = *lines.last().unwrap();
        lines.push(dup_rep);
        lines.push(dup_label);
        let inspection = inspect_bundle(lines.join("\n").as_bytes()).unwrap();
        assert_eq!(inspection.defects.len(), 2);
        assert!(matches!(
            inspection.defects[0],
            RepStoreError::DuplicateRecord { .. }
        ));
        assert!(matches!(
            inspection.defects[1],
            RepStoreError::DuplicateLabel { .. }
        ));
    }

    #[test]
    fn orphan_label_is_a_defect() {
        let text = format!(
            "{}{}\n",
            toy_text(),
            r#"{"type":"label","sample_id":"ghost","member":0}"#
        );
        assert!(matches!(
            parse_bundle(&text),
            Err(RepStoreError::LabelWithoutSample { .. })
        ));
    }

    #[test]
    fn out_of_range_indices() {
        let mut lines: Vec<String> = toy_text().lines().map(String::from).collect();
        lines.push(r#"{"type":"rep","sample_id":"s1","question_index":3,"kind":"clean","layers":[[1,2,3],[1,2,3]]}"#.into());
        assert!(matches!(
            parse_bundle(&lines.join("\n")),
            Err(RepStoreError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn format_roundtrips_exactly() {
        for v in [
            0.1,
            -0.0,
            1e-300,
            123456789.12345679,
            f64::MAX,
            f64::MIN_POSITIVE,
            -2.5e17,
        ] {
            let s = format_f64(v);
            let back: f64 = serde_json::from_str(&s).unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{s}");
        }
    }

    #[test]
    fn score_csv_examples() {
        let ok = parse_scores("sample_id,score\na,0.5\nb,1.0\n".as_bytes()).unwrap();
        assert_eq!(ok.len(), 2);
        assert_eq!(ok["b"], 1.0);
        assert!(matches!(
            parse_scores("sample_id,score\na,0.5\na,0.6\n".as_bytes()),
            Err(RepStoreError::DuplicateSample { .. })
        ));
        assert!(matches!(
            parse_scores("sample_id,score\na,not_a_number\n".as_bytes()),
            Err(RepStoreError::MalformedRow { line: 2 })
        ));
        assert!(matches!(
            parse_scores("id,value\na,1\n".as_bytes()),
            Err(RepStoreError::BadHeader { .. })
        ));
        assert!(matches!(
            parse_scores("sample_id,score\na,NaN\n".as_bytes()),
            Err(RepStoreError::MalformedRow { line: 2 })
        ));
    }

    #[test]
    fn score_csv_roundtrip_with_quoted_ids() {
        let scores = BTreeMap::from([("a,b".to_string(), -0.25), ("c".to_string(), 3.0)]);
        let text = scores_to_csv(&scores, "score");
        assert_eq!(parse_scores(text.as_bytes()).unwrap(), scores);
    }

    #[test]
    fn token_stats_validation() {
        let good = r#"{"sample_id":"a","tokens":[{"logp":-1.0,"dist_mean":-3.0,"dist_std":1.0},{"logp":0.0}]}"#;
        let recs = parse_token_stats(good.as_bytes()).unwrap();
        assert_eq!(recs[0].tokens.len(), 2);
        for bad in [
            r#"{"sample_id":"a","tokens":[]}"#,
            r#"{"sample_id":"a","tokens":[{"logp":0.5}]}"#,
            r#"{"sample_id":"a","tokens":[{"logp":-1.0,"dist_std":0.0}]}"#,
        ] {
            assert!(matches!(
                parse_token_stats(bad.as_bytes()),
                Err(RepStoreError::InvalidTokenStats { .. })
            ));
        }
        let dup = format!("{good}\n{good}\n");
        assert!(matches!(
            parse_token_stats(dup.as_bytes()),
            Err(RepStoreError::DuplicateSample { .. })
        ));
    }
}
