//! Comparison attacks: confidence and loss thresholds, label agreement, and
//! a shadow-trained neural classifier.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{BlindRecord, MembershipPrediction, ProbeDataset, ProbeView};
use crate::error::{Error, Result};
use crate::projection::{project_all, ProjectionKind, ProjectionSpec};
use crate::toy::{argmax, train_model, Architecture, Samples, TrainSpec};

pub const DEFAULT_PERCENTILE: f64 = 90.0;
pub const LOSS_FLOOR: f64 = 1e-12;
pub const MIN_SHADOW_SET: usize = 50;

fn prediction(id: &str, member: bool, variant: &str) -> MembershipPrediction {
    MembershipPrediction::new(id, member, variant)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], pct: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySet("reference probes"));
    }
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(Error::InvalidInput(format!("percentile must lie in (0, 100], got {pct}")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = pct / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(v[lo] + (rank - lo as f64) * (v[hi] - v[lo]))
}

fn top1(r: &BlindRecord<'_>) -> f64 {
    r.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Member iff the top-1 score strictly exceeds the given percentile of the
/// reference probes' top-1 scores.
pub fn top1_threshold_attack(
    target: &ProbeView<'_>,
    reference: &ProbeView<'_>,
    pct: f64,
) -> Result<Vec<MembershipPrediction>> {
    let scores: Vec<f64> = reference.iter().map(|r| top1(&r)).collect();
    let threshold = percentile(&scores, pct)?;
    Ok(target
        .iter()
        .map(|r| prediction(r.id, top1(&r) > threshold, "top1-threshold"))
        .collect())
}

fn true_class_prob(r: &BlindRecord<'_>) -> Result<f64> {
    let label = r.true_label.ok_or_else(|| Error::MissingLabel(r.id.to_string()))?;
    Ok(r.probs[label])
}

/// `-ln p`, with `p` floored at [`LOSS_FLOOR`].
pub fn loss_of(p_true: f64) -> f64 {
    -p_true.max(LOSS_FLOOR).ln()
}

/// Member iff the cross-entropy loss on the true class is strictly below
/// the shadow model's average training loss.
pub fn loss_threshold_attack(target: &ProbeView<'_>, avg_train_loss: f64) -> Result<Vec<MembershipPrediction>> {
    target
        .iter()
        .map(|r| {
            let loss = loss_of(true_class_prob(&r)?);
            Ok(prediction(r.id, loss < avg_train_loss, "loss-threshold"))
        })
        .collect()
}

/// Member iff the predicted class (lowest index on ties) is the true label.
pub fn label_only_attack(target: &ProbeView<'_>) -> Result<Vec<MembershipPrediction>> {
    target
        .iter()
        .map(|r| {
            let label = r.true_label.ok_or_else(|| Error::MissingLabel(r.id.to_string()))?;
            Ok(prediction(r.id, argmax(r.probs) == label, "label-only"))
        })
        .collect()
}

/// Outputs of a shadow model on its own training data and on held-out data.
#[derive(Clone, Debug)]
pub struct ShadowArtifacts {
    pub member_outputs: ProbeDataset,
    pub nonmember_outputs: ProbeDataset,
    pub avg_train_loss: f64,
}

impl ShadowArtifacts {
    pub fn new(member_outputs: ProbeDataset, nonmember_outputs: ProbeDataset) -> Result<Self> {
        let losses = member_outputs
            .view()
            .iter()
            .map(|r| true_class_prob(&r).map(loss_of))
            .collect::<Result<Vec<f64>>>()?;
        if losses.is_empty() {
            return Err(Error::EmptySet("shadow member outputs"));
        }
        let avg_train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        Ok(Self {
            member_outputs,
            nonmember_outputs,
            avg_train_loss,
        })
    }
}

/// Feature choices of the shadow-classifier attack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NnFeatures {
    /// All scores, sorted.
    All,
    /// The top three scores.
    Top3,
    /// The top two scores plus the true-class score.
    Top2PlusTrue,
}

impl NnFeatures {
    pub fn projection(self) -> ProjectionSpec {
        match self {
            NnFeatures::All => ProjectionSpec::sorted_all(),
            NnFeatures::Top3 => ProjectionSpec::top_k(3),
            NnFeatures::Top2PlusTrue => ProjectionSpec::top_k_plus_true(3),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NnFeatures::All => "nn",
            NnFeatures::Top3 => "top3-nn",
            NnFeatures::Top2PlusTrue => "top2+true",
        }
    }
}

/// Trainer settings for the shadow classifier.
pub fn nn_train_spec(seed: u64) -> TrainSpec {
    TrainSpec {
        architecture: Architecture::mlp(),
        epochs: 200,
        learning_rate: 0.01,
        seed,
    }
}

/// Trains a binary classifier on projected shadow member (1) and nonmember
/// (0) outputs; a target record is a member iff its score exceeds 0.5.
pub fn nn_attack(
    target: &ProbeView<'_>,
    shadow: &ShadowArtifacts,
    features: NnFeatures,
    seed: u64,
) -> Result<Vec<MembershipPrediction>> {
    let (nm, nn) = (shadow.member_outputs.len(), shadow.nonmember_outputs.len());
    if nm < MIN_SHADOW_SET || nn < MIN_SHADOW_SET {
        return Err(Error::InvalidInput(format!(
            "shadow sets need at least {MIN_SHADOW_SET} records each, got {nm} members and {nn} nonmembers"
        )));
    }
    let spec = features.projection();
    let members = project_all(&shadow.member_outputs.view(), &spec)?;
    let nonmembers = project_all(&shadow.nonmember_outputs.view(), &spec)?;
    let dim = members[0].len();
    let rows: Vec<f64> = members.iter().chain(&nonmembers).flatten().copied().collect();
    let train = Samples {
        features: Array2::from_shape_vec((nm + nn, dim), rows).map_err(|e| Error::InvalidInput(e.to_string()))?,
        labels: std::iter::repeat_n(1, nm).chain(std::iter::repeat_n(0, nn)).collect(),
    };
    let model = train_model(&train, 2, &nn_train_spec(seed))?;

    let points = project_all(target, &spec)?;
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: points.iter().find(|p| p.len() != dim).map_or(0, Vec::len),
        });
    }
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let x = Array2::from_shape_vec((points.len(), dim), flat).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let scores = model.predict_proba(x.view())?;
    Ok(target
        .iter()
        .zip(scores.rows())
        .map(|(r, s)| prediction(r.id, s[1] > 0.5, features.name()))
        .collect())
}

/// Whether the projection reads true labels.
pub fn nn_needs_labels(features: NnFeatures) -> bool {
    features.projection().kind == ProjectionKind::TopKPlusTrue
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ProbeRecord;

    fn ds(recs: Vec<ProbeRecord>) -> ProbeDataset {
        ProbeDataset::new(recs).unwrap()
    }

    #[test]
    fn top1_threshold_rules() {
        let reference = ds((0..10).map(|i| ProbeRecord::new(format!("r{i}"), vec![0.5, 0.5])).collect());
        let target = ds(vec![
            ProbeRecord::new("a", vec![0.95, 0.05]),
            ProbeRecord::new("b", vec![0.5, 0.5]),
        ]);
        let p = top1_threshold_attack(&target.view(), &reference.view(), 90.0).unwrap();
        assert!(p[0].predicted_member);
        assert!(!p[1].predicted_member);
        let reference = ds(vec![
            ProbeRecord::new("r0", vec![0.99, 0.01]),
            ProbeRecord::new("r1", vec![0.6, 0.4]),
        ]);
        let target = ds(vec![ProbeRecord::new("t", vec![0.999, 0.001])]);
        assert!(top1_threshold_attack(&target.view(), &reference.view(), 100.0).unwrap()[0].predicted_member);
        let empty = ProbeDataset::new(vec![]).unwrap();
        assert!(top1_threshold_attack(&target.view(), &empty.view(), 90.0).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 50.0).unwrap(), 3.0);
        assert!((percentile(&[0.0, 10.0], 90.0).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn loss_threshold_rules() {
        let target = ds(vec![
            ProbeRecord::new("a", vec![0.9, 0.1]).with_label(0),
            ProbeRecord::new("b", vec![(-0.2f64).exp(), 1.0 - (-0.2f64).exp()]).with_label(0),
            ProbeRecord::new("c", vec![1.0 - 1e-15, 1e-15]).with_label(1),
        ]);
        assert!((loss_of(0.9) - 0.10536).abs() < 1e-5);
        let threshold = loss_of((-0.2f64).exp());
        let p = loss_threshold_attack(&target.view(), threshold).unwrap();
        assert!(p[0].predicted_member);
        assert!(!p[1].predicted_member);
        assert!(!p[2].predicted_member);
        assert!((loss_of(1e-15) - 27.631).abs() < 1e-3);
        let unlabeled = ds(vec![ProbeRecord::new("x", vec![0.5, 0.5])]);
        assert!(matches!(loss_threshold_attack(&unlabeled.view(), 0.2), Err(Error::MissingLabel(_))));
    }

    #[test]
    fn label_only_rules() {
        let target = ds(vec![
            ProbeRecord::new("a", vec![0.1, 0.8, 0.1]).with_label(1),
            ProbeRecord::new("b", vec![0.8, 0.1, 0.1]).with_label(1),
            ProbeRecord::new("c", vec![0.5, 0.5, 0.0]).with_label(0),
        ]);
        let p: Vec<bool> = label_only_attack(&target.view()).unwrap().iter().map(|p| p.predicted_member).collect();
        assert_eq!(p, vec![true, false, true]);
        let unlabeled = ds(vec![ProbeRecord::new("x", vec![0.5, 0.5])]);
        assert!(label_only_attack(&unlabeled.view()).is_err());
    }

    fn onehot(i: usize) -> ProbeRecord {
        let mut p = vec![0.001; 11];
        p[i % 10] = 0.99;
        ProbeRecord::new(format!("m{i}"), p).with_label(i % 10)
    }

    fn flat(i: usize) -> ProbeRecord {
        ProbeRecord::new(format!("n{i}"), vec![1.0 / 11.0; 11]).with_label(i % 10)
    }

    #[test]
    fn nn_separable() {
        let shadow = ShadowArtifacts::new(
            ds((0..60).map(onehot).collect()),
            ds((0..60).map(flat).collect()),
        )
        .unwrap();
        let target = ds((100..140).map(onehot).chain((100..140).map(flat)).collect());
        for f in [NnFeatures::All, NnFeatures::Top3, NnFeatures::Top2PlusTrue] {
            let p = nn_attack(&target.view(), &shadow, f, 3).unwrap();
            for (i, pred) in p.iter().enumerate() {
                assert_eq!(pred.predicted_member, i < 40, "{} {}", f.name(), pred.id);
            }
            assert_eq!(p, nn_attack(&target.view(), &shadow, f, 3).unwrap());
        }
    }

    #[test]
    fn nn_needs_enough_shadow() {
        let shadow = ShadowArtifacts::new(ds((0..10).map(onehot).collect()), ds((0..60).map(flat).collect())).unwrap();
        let target = ds((0..4).map(onehot).collect());
        assert!(nn_attack(&target.view(), &shadow, NnFeatures::Top3, 0).is_err());
    }
}
