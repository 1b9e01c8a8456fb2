//! Projections from an m-class probability vector to k ranked features.

use serde::{Deserialize, Serialize};

use crate::data::ProbeView;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// All m scores, descending.
    SortedAll,
    /// The k largest scores, descending.
    TopK,
    /// The k-1 largest scores, descending, then the true-class score.
    TopKPlusTrue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub kind: ProjectionKind,
    /// Output dimension. Ignored by `sorted_all`.
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    3
}

impl Default for ProjectionSpec {
    /// Top three scores, the blind-setting default.
    fn default() -> Self {
        Self::top_k(3)
    }
}

impl ProjectionSpec {
    pub fn sorted_all() -> Self {
        Self {
            kind: ProjectionKind::SortedAll,
            k: 0,
        }
    }

    pub fn top_k(k: usize) -> Self {
        Self {
            kind: ProjectionKind::TopK,
            k,
        }
    }

    pub fn top_k_plus_true(k: usize) -> Self {
        Self {
            kind: ProjectionKind::TopKPlusTrue,
            k,
        }
    }

    pub fn needs_labels(&self) -> bool {
        self.kind == ProjectionKind::TopKPlusTrue
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ProjectionKind::SortedAll => Ok(()),
            ProjectionKind::TopK if self.k == 0 => Err(Error::InvalidInput("top_k needs k >= 1".into())),
            ProjectionKind::TopKPlusTrue if self.k < 2 => {
                Err(Error::InvalidInput("top_k_plus_true needs k >= 2".into()))
            }
            _ => Ok(()),
        }
    }

    /// Output dimension for m-class inputs.
    pub fn output_dim(&self, num_classes: usize) -> usize {
        match self.kind {
            ProjectionKind::SortedAll => num_classes,
            _ => self.k,
        }
    }

    /// Short label used in reports, e.g. `top3` or `top2+true`.
    pub fn label(&self) -> String {
        match self.kind {
            ProjectionKind::SortedAll => "sorted_all".into(),
            ProjectionKind::TopK => format!("top{}", self.k),
            ProjectionKind::TopKPlusTrue => format!("top{}+true", self.k - 1),
        }
    }
}

/// Class indices ordered by descending probability, ties by ascending index.
fn ranking(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// Projects one probability vector.
pub fn project(probs: &[f64], true_label: Option<usize>, spec: &ProjectionSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let m = probs.len();
    if spec.kind != ProjectionKind::SortedAll && spec.k > m {
        return Err(Error::InvalidInput(format!("projection k = {} exceeds {m} classes", spec.k)));
    }
    let order = ranking(probs);
    let out = match spec.kind {
        ProjectionKind::SortedAll => order.iter().map(|&i| probs[i]).collect(),
        ProjectionKind::TopK => order[..spec.k].iter().map(|&i| probs[i]).collect(),
        ProjectionKind::TopKPlusTrue => {
            let label = true_label.ok_or_else(|| {
                Error::InvalidInput("top_k_plus_true projection requires a true label".into())
            })?;
            if label >= m {
                return Err(Error::InvalidInput(format!("true label {label} out of range for {m} classes")));
            }
            let mut v: Vec<f64> = order[..spec.k - 1].iter().map(|&i| probs[i]).collect();
            v.push(probs[label]);
            v
        }
    };
    Ok(out)
}

/// Projects every record of a view, in order.
pub fn project_all(view: &ProbeView<'_>, spec: &ProjectionSpec) -> Result<Vec<Vec<f64>>> {
    view.iter()
        .map(|r| {
            project(r.probs, r.true_label, spec).map_err(|e| match e {
                Error::InvalidInput(_) if r.true_label.is_none() && spec.needs_labels() => {
                    Error::MissingLabel(r.id.to_string())
                }
                other => other,
            })
        })
        .collect()
}
