//! End-to-end experiment plumbing: the synthetic overfit benchmark, the
//! registry of attacks with their capability requirements, and a single
//! dispatcher used by sweeps and the CLI.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};

use crate::baselines::{
    label_only_attack, loss_threshold_attack, nn_attack, top1_threshold_attack, NnFeatures, ShadowArtifacts,
    DEFAULT_PERCENTILE,
};
use crate::data::{AttackConfig, MembershipPrediction, ProbeDataset, ProbeRecord, ProbeView, Variant};
use crate::diff::{attack_batched, BatchOutcome};
use crate::error::{Error, Result};
use crate::nonmember::generate_random_batch;
use crate::oneclass::attack_one_class;
use crate::toy::{train_model, Samples, SyntheticSpec, SyntheticTask, ToyModel, TrainSpec};

/// Every attack the harness can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackKind {
    #[serde(rename = "diff-w/")]
    DiffWith,
    #[serde(rename = "diff-w/o")]
    DiffWithout,
    #[serde(rename = "1class")]
    OneClass,
    #[serde(rename = "top1-threshold")]
    Top1Threshold,
    #[serde(rename = "loss-threshold")]
    LossThreshold,
    #[serde(rename = "label-only")]
    LabelOnly,
    #[serde(rename = "nn")]
    Nn,
    #[serde(rename = "top3-nn")]
    Top3Nn,
    #[serde(rename = "top2+true")]
    Top2PlusTrue,
}

/// What an attack needs beyond the target's output probabilities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Requirements {
    pub true_labels: bool,
    pub generated_nonmembers: bool,
    pub shadow_model: bool,
}

impl AttackKind {
    pub const ALL: [AttackKind; 9] = [
        AttackKind::DiffWith,
        AttackKind::DiffWithout,
        AttackKind::OneClass,
        AttackKind::Top1Threshold,
        AttackKind::LossThreshold,
        AttackKind::LabelOnly,
        AttackKind::Nn,
        AttackKind::Top3Nn,
        AttackKind::Top2PlusTrue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::DiffWith => "diff-w/",
            AttackKind::DiffWithout => "diff-w/o",
            AttackKind::OneClass => "1class",
            AttackKind::Top1Threshold => "top1-threshold",
            AttackKind::LossThreshold => "loss-threshold",
            AttackKind::LabelOnly => "label-only",
            AttackKind::Nn => "nn",
            AttackKind::Top3Nn => "top3-nn",
            AttackKind::Top2PlusTrue => "top2+true",
        }
    }

    pub fn requirements(self) -> Requirements {
        let none = Requirements::default();
        match self {
            AttackKind::DiffWith | AttackKind::OneClass | AttackKind::Top1Threshold => Requirements {
                generated_nonmembers: true,
                ..none
            },
            AttackKind::DiffWithout => none,
            AttackKind::LossThreshold | AttackKind::Top2PlusTrue => Requirements {
                true_labels: true,
                shadow_model: true,
                ..none
            },
            AttackKind::LabelOnly => Requirements {
                true_labels: true,
                ..none
            },
            AttackKind::Nn | AttackKind::Top3Nn => Requirements {
                shadow_model: true,
                ..none
            },
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            AttackKind::DiffWith => Some(Variant::DiffWith),
            AttackKind::DiffWithout => Some(Variant::DiffWithout),
            AttackKind::OneClass => Some(Variant::OneClass),
            _ => None,
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = AttackKind::ALL.iter().map(|k| k.name()).collect();
                Error::InvalidInput(format!("unknown attack `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Everything an attack may draw on. Which fields are present defines the
/// threat setting.
#[derive(Clone, Copy)]
pub struct AttackInputs<'a> {
    pub target: ProbeView<'a>,
    /// Probes of generated nonmembers.
    pub generated: Option<ProbeView<'a>>,
    pub shadow: Option<&'a ShadowArtifacts>,
}

impl AttackInputs<'_> {
    /// `blackbox` when true labels are visible, else `blind`.
    pub fn setting(&self) -> &'static str {
        if self.target.has_labels() {
            "blackbox"
        } else {
            "blind"
        }
    }
}

/// Refuses attacks whose requirements the inputs do not meet.
pub fn check_capabilities(kind: AttackKind, inputs: &AttackInputs<'_>) -> Result<()> {
    let req = kind.requirements();
    let refuse = |capability: &'static str| Error::Capability {
        attack: kind.name().to_string(),
        capability,
        setting: inputs.setting().to_string(),
    };
    if req.true_labels && !inputs.target.has_labels() {
        return Err(refuse("true labels"));
    }
    if req.generated_nonmembers && inputs.generated.is_none_or(|g| g.is_empty()) {
        return Err(refuse("generated nonmember probes"));
    }
    if req.shadow_model && inputs.shadow.is_none() {
        return Err(refuse("a shadow model"));
    }
    if kind == AttackKind::Top2PlusTrue && !inputs.shadow.is_some_and(|s| s.member_outputs.has_labels()) {
        return Err(refuse("true labels on shadow outputs"));
    }
    Ok(())
}

/// Per-attack settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    #[serde(deserialize_with = "diff_with_config")]
    pub diff_with: AttackConfig,
    #[serde(deserialize_with = "diff_without_config")]
    pub diff_without: AttackConfig,
    #[serde(deserialize_with = "one_class_config")]
    pub one_class: AttackConfig,
    /// How many generated probes `diff-w/` compares each batch against.
    pub diff_nonmember_count: usize,
    /// Percentile of generated top-1 scores used by `top1-threshold`.
    pub percentile: f64,
    pub nn_seed: u64,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            diff_with: AttackConfig::for_variant(Variant::DiffWith),
            diff_without: AttackConfig::for_variant(Variant::DiffWithout),
            one_class: AttackConfig::for_variant(Variant::OneClass),
            diff_nonmember_count: 20,
            percentile: DEFAULT_PERCENTILE,
            nn_seed: 0,
        }
    }
}

/// Reads a possibly partial attack config over the defaults of `variant`,
/// so a table that only sets `batch_size` keeps its slot's variant.
fn config_over<'de, D: Deserializer<'de>>(d: D, variant: Variant) -> std::result::Result<AttackConfig, D::Error> {
    let given = serde_json::Value::deserialize(d)?;
    let serde_json::Value::Object(given) = given else {
        return Err(D::Error::custom("attack config must be a table"));
    };
    let mut merged = match serde_json::to_value(AttackConfig::for_variant(variant)) {
        Ok(serde_json::Value::Object(m)) => m,
        _ => unreachable!("attack config serializes to an object"),
    };
    merged.extend(given);
    let config: AttackConfig = serde_json::from_value(merged.into()).map_err(D::Error::custom)?;
    if config.variant != variant {
        return Err(D::Error::custom(format!(
            "the {} slot cannot run variant {}",
            variant.name(),
            config.variant.name()
        )));
    }
    Ok(config)
}

fn diff_with_config<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<AttackConfig, D::Error> {
    config_over(d, Variant::DiffWith)
}

fn diff_without_config<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<AttackConfig, D::Error> {
    config_over(d, Variant::DiffWithout)
}

fn one_class_config<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<AttackConfig, D::Error> {
    config_over(d, Variant::OneClass)
}

/// Predictions plus per-batch logs for the differential variants.
#[derive(Clone, Debug)]
pub struct AttackResult {
    pub kind: AttackKind,
    pub predictions: Vec<MembershipPrediction>,
    pub batches: Vec<BatchOutcome>,
}

pub fn run_attack(kind: AttackKind, inputs: &AttackInputs<'_>, settings: &AttackSettings) -> Result<AttackResult> {
    check_capabilities(kind, inputs)?;
    let target = &inputs.target;
    let mut batches = Vec::new();
    let predictions = match kind {
        AttackKind::DiffWith => {
            let generated = inputs.generated.expect("checked");
            let count = settings.diff_nonmember_count.min(generated.len());
            let run = attack_batched(target, Some(&generated.slice(0..count)), &settings.diff_with)?;
            batches = run.batches;
            run.predictions
        }
        AttackKind::DiffWithout => {
            let run = attack_batched(target, None, &settings.diff_without)?;
            batches = run.batches;
            run.predictions
        }
        AttackKind::OneClass => attack_one_class(target, &inputs.generated.expect("checked"), &settings.one_class)?.0,
        AttackKind::Top1Threshold => {
            top1_threshold_attack(target, &inputs.generated.expect("checked"), settings.percentile)?
        }
        AttackKind::LossThreshold => loss_threshold_attack(target, inputs.shadow.expect("checked").avg_train_loss)?,
        AttackKind::LabelOnly => label_only_attack(target)?,
        AttackKind::Nn => nn_attack(target, inputs.shadow.expect("checked"), NnFeatures::All, settings.nn_seed)?,
        AttackKind::Top3Nn => nn_attack(target, inputs.shadow.expect("checked"), NnFeatures::Top3, settings.nn_seed)?,
        AttackKind::Top2PlusTrue => {
            nn_attack(target, inputs.shadow.expect("checked"), NnFeatures::Top2PlusTrue, settings.nn_seed)?
        }
    };
    Ok(AttackResult {
        kind,
        predictions,
        batches,
    })
}

/// How the benchmark is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub synthetic: SyntheticSpec,
    pub train: TrainSpec,
    /// Number of generated inputs probed as nonmembers.
    pub generated_count: usize,
    pub generation: Generation,
    /// Train and probe a shadow model on fresh samples of the same task.
    pub shadow: bool,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self::standard(0)
    }
}

impl BenchmarkSpec {
    pub fn standard(seed: u64) -> Self {
        Self {
            synthetic: SyntheticSpec::standard(seed),
            train: TrainSpec::standard(seed),
            generated_count: 1000,
            generation: Generation::default(),
            shadow: true,
        }
    }
}

/// How generated nonmember inputs are made.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Generation {
    /// Uniform random features in `[0,1]^d`.
    Random,
    /// Target inputs plus zero-mean Gaussian noise of the given variance,
    /// cycling through the target set in its shuffled order.
    Perturbed { variance: f64 },
}

impl Default for Generation {
    fn default() -> Self {
        Generation::Random
    }
}

/// Raw inputs of the benchmark.
#[derive(Clone, Debug)]
pub struct BenchmarkData {
    pub train: Samples,
    pub holdout: Samples,
    /// Shuffled order of the target set: positions into `train` followed
    /// by `holdout`.
    pub order: Vec<usize>,
    pub generated: Array2<f64>,
    pub shadow_train: Samples,
    pub shadow_holdout: Samples,
}

/// Shuffled positions of a target set of `n` records (training set first,
/// then held-out set) as used under `seed`.
pub fn target_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5151));
    order
}

/// Draws every input set of the benchmark from one task.
pub fn benchmark_data(spec: &BenchmarkSpec) -> Result<BenchmarkData> {
    let mut task = SyntheticTask::new(spec.synthetic.clone())?;
    let per_class = spec.synthetic.samples_per_class;
    let train = task.draw(per_class);
    let holdout = task.draw(per_class);
    let (shadow_train, shadow_holdout) = (task.draw(per_class), task.draw(per_class));
    let dim = spec.synthetic.dim;

    let order = target_order(train.len() + holdout.len(), spec.synthetic.seed);

    let seed = spec.synthetic.seed ^ 0x9e37_79b9;
    let rows = match spec.generation {
        Generation::Random => generate_random_batch(spec.generated_count, dim, seed)?,
        Generation::Perturbed { variance } => {
            if !(variance > 0.0 && variance.is_finite()) {
                return Err(Error::InvalidInput(format!("perturbation variance must be > 0, got {variance}")));
            }
            let normal = Normal::new(0.0, variance.sqrt()).expect("checked variance");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..spec.generated_count)
                .map(|i| {
                    let j = order[i % order.len()];
                    let source = if j < train.len() {
                        train.features.row(j)
                    } else {
                        holdout.features.row(j - train.len())
                    };
                    source.iter().map(|v| v + normal.sample(&mut rng)).collect::<Vec<f64>>()
                })
                .collect()
        }
    };
    let generated = Array2::from_shape_vec((rows.len(), dim), rows.concat())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(BenchmarkData {
        train,
        holdout,
        order,
        generated,
        shadow_train,
        shadow_holdout,
    })
}

/// A trained target model and its probes.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub model: ToyModel,
    /// Members (training set) and nonmembers (held-out set), shuffled, with
    /// neutral ids `s0000`, `s0001`, ... and ground truth attached.
    pub target: ProbeDataset,
    /// Probes of generated inputs, without labels.
    pub generated: ProbeDataset,
    pub shadow: Option<ShadowArtifacts>,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
}

impl Benchmark {
    pub fn build(spec: &BenchmarkSpec) -> Result<Self> {
        let data = benchmark_data(spec)?;
        Self::from_data(spec, &data)
    }

    pub fn from_data(spec: &BenchmarkSpec, data: &BenchmarkData) -> Result<Self> {
        let m = spec.synthetic.num_classes;
        let mut model = train_model(&data.train, m, &spec.train)?;
        let holdout_accuracy = model.accuracy(&data.holdout)?;
        model.meta.test_accuracy = Some(holdout_accuracy);
        let (target, generated) = probe_benchmark(&model, &data.train, &data.holdout, &data.order, &data.generated)?;
        let shadow = if spec.shadow {
            let shadow_model = train_shadow(spec, &data.shadow_train)?;
            Some(shadow_artifacts(&shadow_model, &data.shadow_train, &data.shadow_holdout)?)
        } else {
            None
        };
        Ok(Self {
            train_accuracy: model.meta.train_accuracy,
            model,
            target,
            generated,
            shadow,
            holdout_accuracy,
        })
    }

    pub fn inputs(&self) -> AttackInputs<'_> {
        AttackInputs {
            target: self.target.view(),
            generated: Some(self.generated.view()),
            shadow: self.shadow.as_ref(),
        }
    }
}

/// Probes the target set (members then nonmembers, permuted by `order`,
/// with neutral ids and ground truth) and the generated inputs (no labels).
pub fn probe_benchmark(
    model: &ToyModel,
    train: &Samples,
    holdout: &Samples,
    order: &[usize],
    generated: &Array2<f64>,
) -> Result<(ProbeDataset, ProbeDataset)> {
    let mut records = model.probe(train, "", Some(true))?.into_records();
    records.extend(model.probe(holdout, "", Some(false))?.into_records());
    let mut seen = vec![false; records.len()];
    let is_permutation =
        order.len() == records.len() && order.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true));
    if !is_permutation {
        return Err(Error::InvalidInput(format!(
            "target order is not a permutation of the {} target records",
            records.len()
        )));
    }
    let target = with_ids(order.iter().map(|&i| records[i].clone()).collect(), "s")?;
    let unlabeled = Samples {
        features: generated.clone(),
        labels: vec![0; generated.nrows()],
    };
    let generated = model.probe(&unlabeled, "g", None)?.redacted(false);
    Ok((target, generated))
}

/// Trains the shadow model on the shadow training set. Its seed is the
/// target's plus one.
pub fn train_shadow(spec: &BenchmarkSpec, shadow_train: &Samples) -> Result<ToyModel> {
    let mut shadow_spec = spec.train;
    shadow_spec.seed = spec.train.seed.wrapping_add(1);
    train_model(shadow_train, spec.synthetic.num_classes, &shadow_spec)
}

pub fn shadow_artifacts(shadow_model: &ToyModel, members: &Samples, nonmembers: &Samples) -> Result<ShadowArtifacts> {
    ShadowArtifacts::new(
        shadow_model.probe(members, "sm", None)?,
        shadow_model.probe(nonmembers, "sn", None)?,
    )
}

/// Renames records to zero-padded ids `{prefix}0000`, ... in their current
/// order, so ids carry no membership signal.
pub fn with_ids(mut records: Vec<ProbeRecord>, prefix: &str) -> Result<ProbeDataset> {
    let width = records.len().saturating_sub(1).to_string().len().max(4);
    for (i, r) in records.iter_mut().enumerate() {
        r.id = format!("{prefix}{i:0width$}");
    }
    ProbeDataset::new(records)
}
