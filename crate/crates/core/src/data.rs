//! Probe records, datasets, predictions and their on-disk formats.
//!
//! Probe records are stored as JSON Lines, one object per line:
//!
//! ```text
//! {"id": "s17", "probs": [0.1, 0.7, 0.2], "true_label": 1, "is_member": true}
//! ```
//!
//! `true_label` and `is_member` may be `null` or absent. Predictions are CSV
//! with the header `id,predicted_member,variant`. Lines starting with `#` are
//! comments and carry provenance (the config digest) when written by the CLI.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::nonmember::SeparationSpec;
use crate::projection::ProjectionSpec;

/// Absolute tolerance on the probability simplex constraint.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Output probability vector of one probed sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub id: String,
    pub probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<usize>,
    /// Ground truth, only ever read by evaluation code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_member: Option<bool>,
}

impl ProbeRecord {
    pub fn new(id: impl Into<String>, probs: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            probs,
            true_label: None,
            is_member: None,
        }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.true_label = Some(label);
        self
    }

    pub fn with_membership(mut self, member: bool) -> Self {
        self.is_member = Some(member);
        self
    }

    /// Checks the simplex constraint and label range. `line` is only used
    /// for error reporting.
    pub fn validate(&self, line: usize) -> Result<()> {
        if self.probs.is_empty() {
            return Err(Error::InvalidInput(format!(
                "line {line}: record `{}` has an empty probability vector",
                self.id
            )));
        }
        for &p in &self.probs {
            if !p.is_finite() || p < -SIMPLEX_TOLERANCE || p > 1.0 + SIMPLEX_TOLERANCE {
                return Err(Error::InvalidInput(format!(
                    "line {line}: record `{}` has probability {p} outside [0, 1]",
                    self.id
                )));
            }
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::ProbabilitySum { line, sum });
        }
        if let Some(label) = self.true_label {
            if label >= self.probs.len() {
                return Err(Error::InvalidInput(format!(
                    "line {line}: record `{}` has true_label {label} >= {} classes",
                    self.id,
                    self.probs.len()
                )));
            }
        }
        Ok(())
    }

    /// Largest probability score.
    pub fn top1(&self) -> f64 {
        self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// An ordered, validated collection of probe records sharing one class count.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    records: Vec<ProbeRecord>,
    num_classes: usize,
}

impl ProbeDataset {
    pub fn new(records: Vec<ProbeRecord>) -> Result<Self> {
        let num_classes = records.first().map(|r| r.probs.len()).unwrap_or(0);
        Self::with_classes(records, num_classes)
    }

    pub fn with_classes(records: Vec<ProbeRecord>, num_classes: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            rec.validate(i + 1)?;
            if rec.probs.len() != num_classes {
                return Err(Error::DimensionMismatch {
                    expected: num_classes,
                    found: rec.probs.len(),
                });
            }
            if !seen.insert(rec.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate record id `{}`", rec.id)));
            }
        }
        Ok(Self {
            records,
            num_classes,
        })
    }

    pub fn records(&self) -> &[ProbeRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ProbeRecord> {
        self.records
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Whether every record carries a true label.
    pub fn has_labels(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.true_label.is_some())
    }

    /// The attack-facing view: membership ground truth is not reachable
    /// through it.
    pub fn view(&self) -> ProbeView<'_> {
        ProbeView {
            records: &self.records,
            num_classes: self.num_classes,
        }
    }

    /// Subset by position, keeping order.
    pub fn select(&self, indices: &[usize]) -> ProbeDataset {
        ProbeDataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Same records with ground truth and/or labels stripped.
    pub fn redacted(&self, keep_labels: bool) -> ProbeDataset {
        ProbeDataset {
            records: self
                .records
                .iter()
                .map(|r| ProbeRecord {
                    id: r.id.clone(),
                    probs: r.probs.clone(),
                    true_label: if keep_labels { r.true_label } else { None },
                    is_member: None,
                })
                .collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Read-only attack view over a dataset. Exposes ids, probabilities and true
/// labels; membership ground truth is deliberately absent.
#[derive(Clone, Copy, Debug)]
pub struct ProbeView<'a> {
    records: &'a [ProbeRecord],
    num_classes: usize,
}

/// One record as seen by an attack.
#[derive(Clone, Copy, Debug)]
pub struct BlindRecord<'a> {
    pub id: &'a str,
    pub probs: &'a [f64],
    pub true_label: Option<usize>,
}

impl<'a> ProbeView<'a> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, i: usize) -> BlindRecord<'a> {
        let r = &self.records[i];
        BlindRecord {
            id: &r.id,
            probs: &r.probs,
            true_label: r.true_label,
        }
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = BlindRecord<'a>> + 'a {
        self.records.iter().map(|r| BlindRecord {
            id: &r.id,
            probs: &r.probs,
            true_label: r.true_label,
        })
    }

    /// A sub-view over a contiguous range of records.
    pub fn slice(&self, range: std::ops::Range<usize>) -> ProbeView<'a> {
        ProbeView {
            records: &self.records[range],
            num_classes: self.num_classes,
        }
    }

    pub fn has_labels(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.true_label.is_some())
    }
}

/// Attack mode: whole batches at once, or one new record against a
/// previously processed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Batch,
    Incremental,
}

/// Attack variant of the differential-comparison family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Single-directional comparison against generated nonmembers.
    #[serde(rename = "diff-w/")]
    DiffWith,
    /// Bi-directional comparison after rough separation; no extra probes.
    #[serde(rename = "diff-w/o")]
    DiffWithout,
    /// One-class classifier trained on generated nonmembers.
    #[serde(rename = "1class")]
    OneClass,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::DiffWith => "diff-w/",
            Variant::DiffWithout => "diff-w/o",
            Variant::OneClass => "1class",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diff-w/" | "diff-w" | "diff-with" => Ok(Variant::DiffWith),
            "diff-w/o" | "diff-wo" | "diff-without" => Ok(Variant::DiffWithout),
            "1class" | "one-class" => Ok(Variant::OneClass),
            other => Err(Error::InvalidInput(format!("unknown variant `{other}`"))),
        }
    }
}

/// Everything an attack run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub projection: ProjectionSpec,
    pub kernel: KernelSpec,
    pub batch_size: usize,
    pub mode: AttackMode,
    pub variant: Variant,
    pub move_tolerance: f64,
    pub max_iterations: usize,
    /// Rough separation used by `diff-w/o`.
    pub separation: SeparationSpec,
    /// ν of the one-class model used by `1class`.
    pub nu: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::for_variant(Variant::DiffWith)
    }
}

impl AttackConfig {
    /// Defaults per variant: batch 20 for `diff-w/`, 1,000 for `diff-w/o`.
    pub fn for_variant(variant: Variant) -> Self {
        let batch_size = match variant {
            Variant::DiffWith => 20,
            Variant::DiffWithout => 1000,
            Variant::OneClass => 1000,
        };
        Self {
            projection: ProjectionSpec::default(),
            kernel: KernelSpec::default(),
            batch_size,
            mode: AttackMode::Batch,
            variant,
            move_tolerance: 0.0,
            max_iterations: 1000,
            separation: SeparationSpec::default(),
            nu: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidInput(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.move_tolerance >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "move_tolerance must be >= 0, got {}",
                self.move_tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput("max_iterations must be positive".into()));
        }
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return Err(Error::InvalidInput(format!("nu must lie in (0, 1), got {}", self.nu)));
        }
        self.kernel.validate_params()?;
        self.projection.validate()
    }
}

/// Iteration and move counters attached to a prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub iterations: usize,
    pub moves: usize,
}

/// Verdict for one target record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipPrediction {
    pub id: String,
    pub predicted_member: bool,
    pub variant: String,
    #[serde(skip)]
    pub meta: PredictionMeta,
}

impl MembershipPrediction {
    pub fn new(id: impl Into<String>, predicted_member: bool, variant: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            predicted_member,
            variant: variant.into(),
            meta: PredictionMeta::default(),
        }
    }
}

/// Reads and validates a JSON-Lines probe file. Blank lines and `#`
/// comment lines are skipped.
pub fn load_probe_records(path: impl AsRef<Path>, expected_classes: Option<usize>) -> Result<ProbeDataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut num_classes = expected_classes;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let trimmed = line.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec: ProbeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: e.to_string(),
        })?;
        rec.validate(line_no)?;
        match num_classes {
            Some(m) if m != rec.probs.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: Error::DimensionMismatch {
                        expected: m,
                        found: rec.probs.len(),
                    }
                    .to_string(),
                })
            }
            Some(_) => {}
            None => num_classes = Some(rec.probs.len()),
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("duplicate record id `{}`", rec.id),
            });
        }
        records.push(rec);
    }
    Ok(ProbeDataset {
        records,
        num_classes: num_classes.unwrap_or(0),
    })
}

/// Writes a dataset as JSON Lines.
pub fn save_probe_records(dataset: &ProbeDataset, path: impl AsRef<Path>) -> Result<()> {
    write_probe_records(dataset, path, None)
}

/// Same as [`save_probe_records`], prefixed by a `# digest: ...` line.
pub fn save_probe_records_with_digest(dataset: &ProbeDataset, path: impl AsRef<Path>, digest: &str) -> Result<()> {
    write_probe_records(dataset, path, Some(digest))
}

fn write_probe_records(dataset: &ProbeDataset, path: impl AsRef<Path>, digest: Option<&str>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    if let Some(d) = digest {
        writeln!(out, "# digest: {d}")?;
    }
    for rec in dataset.records() {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes predictions as CSV with header `id,predicted_member,variant`.
pub fn save_predictions(preds: &[MembershipPrediction], path: impl AsRef<Path>) -> Result<()> {
    write_predictions(preds, path, None)
}

/// Same as [`save_predictions`], prefixed by a `# digest: ...` comment line.
pub fn save_predictions_with_digest(
    preds: &[MembershipPrediction],
    path: impl AsRef<Path>,
    digest: &str,
) -> Result<()> {
    write_predictions(preds, path, Some(digest))
}

fn write_predictions(preds: &[MembershipPrediction], path: impl AsRef<Path>, digest: Option<&str>) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    if let Some(d) = digest {
        writeln!(file, "# digest: {d}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["id", "predicted_member", "variant"])?;
    for p in preds {
        w.write_record([p.id.as_str(), if p.predicted_member { "true" } else { "false" }, p.variant.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a prediction CSV written by [`save_predictions`].
pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<MembershipPrediction>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let p: MembershipPrediction = row?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn loads_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        let body = r#"{"id": "a", "probs": [0.1, 0.2, 0.3, 0.2, 0.2], "true_label": 2, "is_member": true}
{"id": "b", "probs": [0.2, 0.2, 0.2, 0.2, 0.2]}
{"id": "c", "probs": [0.0, 0.0, 1.0, 0.0, 0.0], "true_label": null, "is_member": null}
"#;
        let ds = load_probe_records(write(&dir, "p.jsonl", body), Some(5)).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_classes(), 5);
        assert_eq!(ds.records()[0].true_label, Some(2));
        assert_eq!(ds.records()[1].is_member, None);
    }

    #[test]
    fn rejects_bad_sum_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"id\": \"a\", \"probs\": [0.5, 0.5]}\n{\"id\": \"b\", \"probs\": [0.4, 0.4]}\n";
        let err = load_probe_records(write(&dir, "p.jsonl", body), None).unwrap_err();
        match err {
            Error::ProbabilitySum { line, sum } => {
                assert_eq!(line, 2);
                assert!((sum - 0.8).abs() < 1e-12);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_mixed_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"id\": \"a\", \"probs\": [0.2, 0.2, 0.2, 0.2, 0.2]}\n{\"id\": \"b\", \"probs\": [0.25, 0.25, 0.25, 0.25]}\n";
        let err = load_probe_records(write(&dir, "p.jsonl", body), None).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"), "{err}");
        let err = load_probe_records(write(&dir, "q.jsonl", body), Some(4)).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"id\": \"a\", \"probs\": [1.0]}\nnot json\n";
        let err = load_probe_records(write(&dir, "p.jsonl", body), None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn label_out_of_range_rejected() {
        let rec = ProbeRecord::new("x", vec![0.5, 0.5]).with_label(2);
        assert!(rec.validate(1).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let recs = vec![ProbeRecord::new("x", vec![1.0]), ProbeRecord::new("x", vec![1.0])];
        assert!(ProbeDataset::new(recs).is_err());
    }

    #[test]
    fn prediction_csv_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        let preds = vec![
            MembershipPrediction::new("a", true, "diff-w/"),
            MembershipPrediction::new("b", false, "diff-w/"),
        ];
        save_predictions(&preds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "id,predicted_member,variant\na,true,diff-w/\nb,false,diff-w/\n");
        assert_eq!(load_predictions(&path).unwrap(), preds);

        save_predictions(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "id,predicted_member,variant\n");
        assert!(load_predictions(&path).unwrap().is_empty());
    }

    #[test]
    fn digest_comment_is_skipped_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        let preds = vec![MembershipPrediction::new("a", true, "1class")];
        save_predictions_with_digest(&preds, &path, "abc123").unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("# digest: abc123\n"));
        assert_eq!(load_predictions(&path).unwrap(), preds);

        let path = dir.path().join("probes.jsonl");
        let ds = ProbeDataset::new(vec![ProbeRecord::new("a", vec![0.5, 0.5]).with_label(0)]).unwrap();
        save_probe_records_with_digest(&ds, &path, "abc123").unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("# digest: abc123\n"));
        assert_eq!(load_probe_records(&path, None).unwrap(), ds);
    }

    #[test]
    fn view_hides_membership() {
        let ds = ProbeDataset::new(vec![ProbeRecord::new("a", vec![0.3, 0.7]).with_label(1).with_membership(true)]).unwrap();
        let rec = ds.view().get(0);
        assert_eq!(rec.id, "a");
        assert_eq!(rec.true_label, Some(1));
        assert_eq!(ds.redacted(false).records()[0].is_member, None);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        cfg.batch_size = 2;
        cfg.move_tolerance = -1.0;
        assert!(cfg.validate().is_err());
    }
}
