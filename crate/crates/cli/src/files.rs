//! On-disk layout of a run and the formats the core crate does not own:
//! sample CSVs and model files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use blindmi_core::toy::{Samples, ToyModel};
use ndarray::Array2;

use crate::failure::Failure;

/// Every file a run reads or writes, relative to the output root.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self, split: &str) -> PathBuf {
        self.root.join("data").join(format!("{split}.csv"))
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.json"))
    }

    pub fn probes(&self, name: &str) -> PathBuf {
        self.root.join("probes").join(format!("{name}.jsonl"))
    }

    pub fn truth(&self) -> PathBuf {
        self.root.join("probes").join("truth.csv")
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.root.join("attacks").join("predictions")
    }

    pub fn predictions(&self, attack: &str) -> PathBuf {
        self.predictions_dir().join(format!("{}.csv", slug(attack)))
    }

    pub fn convergence(&self, attack: &str) -> PathBuf {
        self.root.join("attacks").join("convergence").join(format!("{}.csv", slug(attack)))
    }

    pub fn totals(&self) -> PathBuf {
        self.root.join("attacks").join("totals.csv")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("eval").join("metrics.csv")
    }

    pub fn sweep(&self, kind: &str) -> PathBuf {
        self.root.join("sweep").join(format!("{kind}.csv"))
    }
}

/// File-name form of an attack name: `diff-w/o` -> `diff-wo`,
/// `top2+true` -> `top2-true`.
pub fn slug(name: &str) -> String {
    name.replace('/', "").replace('+', "-")
}

/// Creates the parent directory of an output file.
pub fn ensure_parent(path: &Path) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::config(format!("cannot create output directory {}: {e}", dir.display())))?;
    }
    Ok(())
}

/// Fails with an upstream error naming the command that produces `path`.
pub fn require(path: &Path, producer: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::upstream(format!(
            "missing {}; run `blindmi {producer}` with the same config first",
            path.display()
        )))
    }
}

/// The digest recorded in a file's first line, if any.
pub fn recorded_digest(path: &Path) -> Option<String> {
    let text = std::fs::read_to_string(path).ok()?;
    let first = text.lines().next()?;
    if let Some(d) = first.strip_prefix("# digest: ") {
        return Some(d.trim().to_string());
    }
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    value.get("digest")?.as_str().map(str::to_string)
}

/// Warns when an input was produced under a different config.
pub fn check_digest(path: &Path, digest: &str) {
    match recorded_digest(path) {
        Some(d) if d != digest => log::warn!(
            "{} was written under config digest {d}, current digest is {digest}",
            path.display()
        ),
        None => log::warn!("{} carries no config digest", path.display()),
        _ => {}
    }
}

/// Samples as CSV: `label,x0,...` (or only features when `labeled` is
/// false) after a digest comment line.
pub fn write_samples(samples: &Samples, path: &Path, digest: &str, labeled: bool) -> Result<(), Failure> {
    let mut out = format!("# digest: {digest}\n");
    let dim = samples.features.ncols();
    let mut cols: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
    if labeled {
        cols.insert(0, "label".into());
    }
    out.push_str(&cols.join(","));
    out.push('\n');
    for (row, label) in samples.features.rows().into_iter().zip(&samples.labels) {
        if labeled {
            write!(out, "{label}").unwrap();
        }
        for (j, v) in row.iter().enumerate() {
            if j > 0 || labeled {
                out.push(',');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    ensure_parent(path)?;
    std::fs::write(path, out).map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))
}

/// Reads a sample CSV. Files without a `label` column get label 0.
pub fn read_samples(path: &Path) -> Result<Samples, Failure> {
    let bad = |msg: String| Failure::upstream(format!("{}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let labeled = reader.headers().map_err(|e| bad(e.to_string()))?.get(0) == Some("label");
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut dim = None;
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let mut fields = row.iter();
        let label = if labeled {
            let raw = fields.next().unwrap_or("");
            raw.parse::<usize>()
                .map_err(|_| bad(format!("row {}: bad label `{raw}`", i + 1)))?
        } else {
            0
        };
        let before = values.len();
        for f in fields {
            values.push(f.parse::<f64>().map_err(|_| bad(format!("row {}: bad value `{f}`", i + 1)))?);
        }
        let width = values.len() - before;
        if *dim.get_or_insert(width) != width {
            return Err(bad(format!("row {} has {width} features, expected {}", i + 1, dim.unwrap())));
        }
        labels.push(label);
    }
    let features = Array2::from_shape_vec((labels.len(), dim.unwrap_or(0)), values).map_err(|e| bad(e.to_string()))?;
    Ok(Samples { features, labels })
}

/// Model JSON with the digest as an extra top-level field.
pub fn write_model(model: &ToyModel, path: &Path, digest: &str) -> Result<(), Failure> {
    let mut value = serde_json::to_value(model).map_err(|e| Failure::config(e.to_string()))?;
    value
        .as_object_mut()
        .expect("model serializes to an object")
        .insert("digest".into(), digest.into());
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(&value).expect("json value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))
}

pub fn read_model(path: &Path) -> Result<ToyModel, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::upstream(format!("{}: {e}", path.display())))?;
    ToyModel::from_json(&text).map_err(|e| Failure::upstream(format!("{}: {e}", path.display())))
}
