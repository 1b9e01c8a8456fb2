//! Synthetic classification tasks and small seedable classifiers that can be
//! driven to overfit. Their softmax outputs are the probe records the attacks
//! consume.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ProbeDataset, ProbeRecord};
use crate::error::{Error, Result};

/// Gaussian class clusters around means drawn uniformly in `[0,1]^dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Per-coordinate standard deviation around the class mean.
    pub cluster_spread: f64,
    /// Fraction of labels reassigned to a different class.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::standard(0)
    }
}

impl SyntheticSpec {
    /// The frozen overfit benchmark: 10 classes, 20 features, 100 training
    /// samples per class, 30% label noise.
    pub fn standard(seed: u64) -> Self {
        Self {
            num_classes: 10,
            dim: 20,
            samples_per_class: 100,
            cluster_spread: 1.0,
            label_noise: 0.3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidInput("dim and samples_per_class must be positive".into()));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::InvalidInput(format!("cluster_spread must be > 0, got {}", self.cluster_spread)));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::InvalidInput(format!("label_noise must be in [0, 0.5), got {}", self.label_noise)));
        }
        Ok(())
    }
}

/// Features (one row per sample) and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Samples {
        Samples {
            features: self.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// A drawn task: the class means, so further samples (held-out, shadow)
/// can come from the same distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub spec: SyntheticSpec,
    pub means: Array2<f64>,
    rng: ChaCha8Rng,
}

impl SyntheticTask {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let means = Array2::from_shape_fn((spec.num_classes, spec.dim), |_| rng.random::<f64>());
        Ok(Self { spec, means, rng })
    }

    /// Draws `per_class` samples of every class, then applies label noise.
    /// Successive calls continue the task's random stream.
    pub fn draw(&mut self, per_class: usize) -> Samples {
        let m = self.spec.num_classes;
        let d = self.spec.dim;
        let n = m * per_class;
        let normal = Normal::new(0.0, self.spec.cluster_spread).expect("validated spread");
        let mut features = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for (i, mut row) in features.axis_iter_mut(Axis(0)).enumerate() {
            let class = i / per_class;
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.means[[class, j]] + normal.sample(&mut self.rng);
            }
            labels.push(class);
        }
        let flips = (self.spec.label_noise * n as f64).floor() as usize;
        for i in sample(&mut self.rng, n, flips) {
            let shift = self.rng.random_range(1..m);
            labels[i] = (labels[i] + shift) % m;
        }
        Samples { features, labels }
    }
}

/// Draws the training set described by `spec`.
pub fn make_synthetic_dataset(spec: &SyntheticSpec) -> Result<Samples> {
    let mut task = SyntheticTask::new(spec.clone())?;
    Ok(task.draw(spec.samples_per_class))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Softmax,
    Mlp { hidden: usize },
}

impl Architecture {
    pub fn mlp() -> Self {
        Architecture::Mlp { hidden: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `inputs x outputs`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn xavier(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            weights: Array2::from_shape_fn((inputs, outputs), |_| rng.random_range(-limit..limit)),
            bias: Array1::zeros(outputs),
        }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn forward(&self, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// A softmax-regression or one-hidden-layer tanh classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub num_classes: usize,
    /// One layer for softmax regression, two for the MLP.
    pub layers: Vec<Layer>,
    pub meta: TrainingMeta,
}

/// Parameter gradients, shaped like [`ToyModel::layers`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl ToyModel {
    /// Xavier-initialized model.
    pub fn init(architecture: Architecture, input_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        Self::build(architecture, input_dim, num_classes, |i, o| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64 * 7919 + o as u64));
            Layer::xavier(i, o, &mut rng)
        })
    }

    /// All-zero weights: every input maps to the uniform distribution.
    pub fn zeros(architecture: Architecture, input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::build(architecture, input_dim, num_classes, Layer::zeros)
    }

    fn build(
        architecture: Architecture,
        input_dim: usize,
        num_classes: usize,
        mut layer: impl FnMut(usize, usize) -> Layer,
    ) -> Result<Self> {
        if num_classes < 2 || input_dim == 0 {
            return Err(Error::InvalidInput(format!(
                "model needs >= 2 classes and a positive input dimension, got {num_classes} and {input_dim}"
            )));
        }
        let layers = match architecture {
            Architecture::Softmax => vec![layer(input_dim, num_classes)],
            Architecture::Mlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::InvalidInput("hidden layer needs at least one unit".into()));
                }
                vec![layer(input_dim, hidden), layer(hidden, num_classes)]
            }
        };
        Ok(Self {
            architecture,
            input_dim,
            num_classes,
            layers,
            meta: TrainingMeta::default(),
        })
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: x.ncols(),
            });
        }
        Ok(())
    }

    /// Hidden activations (MLP only) and logits.
    fn forward(&self, x: &ArrayView2<'_, f64>) -> (Option<Array2<f64>>, Array2<f64>) {
        match self.layers.as_slice() {
            [out] => (None, out.forward(x)),
            [hidden, out] => {
                let h = hidden.forward(x).mapv(f64::tanh);
                let z = out.forward(&h.view());
                (Some(h), z)
            }
            _ => unreachable!("one or two layers"),
        }
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(self.forward(&x).1)
    }

    /// Row-wise softmax probabilities.
    pub fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut z = self.logits(x)?;
        softmax_rows(&mut z);
        Ok(z)
    }

    pub fn accuracy(&self, data: &Samples) -> Result<f64> {
        let p = self.predict_proba(data.features.view())?;
        let hits = p
            .axis_iter(Axis(0))
            .zip(&data.labels)
            .filter(|(row, &y)| argmax(row.as_slice().expect("contiguous")) == y)
            .count();
        Ok(hits as f64 / data.len().max(1) as f64)
    }

    /// Mean cross-entropy over the samples and its parameter gradients.
    pub fn loss_and_gradients(&self, data: &Samples) -> Result<(f64, Gradients)> {
        let x = data.features.view();
        self.check_input(&x)?;
        let n = data.len();
        if n == 0 {
            return Err(Error::EmptySet("training samples"));
        }
        if let Some(&bad) = data.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for {} classes", self.num_classes)));
        }
        let (hidden, z) = self.forward(&x);
        let mut loss = 0.0;
        let mut dz = z;
        for (mut row, &y) in dz.axis_iter_mut(Axis(0)).zip(&data.labels) {
            let logits = row.to_vec();
            loss += cross_entropy(&logits, y);
            for (g, v) in row.iter_mut().zip(cross_entropy_grad(&logits, y)) {
                *g = v / n as f64;
            }
        }
        loss /= n as f64;
        let layers = match (&hidden, self.layers.as_slice()) {
            (None, [_]) => vec![Layer {
                weights: x.t().dot(&dz),
                bias: dz.sum_axis(Axis(0)),
            }],
            (Some(h), [_, out]) => {
                let mut dh = dz.dot(&out.weights.t());
                dh.zip_mut_with(h, |g, &a| *g *= 1.0 - a * a);
                vec![
                    Layer {
                        weights: x.t().dot(&dh),
                        bias: dh.sum_axis(Axis(0)),
                    },
                    Layer {
                        weights: h.t().dot(&dz),
                        bias: dz.sum_axis(Axis(0)),
                    },
                ]
            }
            _ => unreachable!("layer count matches architecture"),
        };
        Ok((loss, Gradients { layers }))
    }

    fn step(&mut self, grads: &Gradients, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weights.scaled_add(-lr, &g.weights);
            layer.bias.scaled_add(-lr, &g.bias);
        }
    }

    /// Outputs as probe records with ids `{prefix}{i}`, carrying true labels
    /// and, if given, ground-truth membership.
    pub fn probe(&self, data: &Samples, prefix: &str, is_member: Option<bool>) -> Result<ProbeDataset> {
        let p = self.predict_proba(data.features.view())?;
        let records = p
            .axis_iter(Axis(0))
            .zip(&data.labels)
            .enumerate()
            .map(|(i, (row, &y))| {
                let mut rec = ProbeRecord::new(format!("{prefix}{i}"), row.to_vec()).with_label(y);
                rec.is_member = is_member;
                rec
            })
            .collect();
        ProbeDataset::with_classes(records, self.num_classes)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(s)?;
        let expected = match model.architecture {
            Architecture::Softmax => 1,
            Architecture::Mlp { .. } => 2,
        };
        if model.layers.len() != expected {
            return Err(Error::InvalidInput(format!(
                "model file has {} layers, architecture needs {expected}",
                model.layers.len()
            )));
        }
        Ok(model)
    }
}

/// Full-batch gradient descent settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub architecture: Architecture,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self::standard(0)
    }
}

impl TrainSpec {
    /// Settings that overfit the standard benchmark.
    pub fn standard(seed: u64) -> Self {
        Self {
            architecture: Architecture::mlp(),
            epochs: 2000,
            learning_rate: 0.5,
            seed,
        }
    }
}

/// Trains with full-batch gradient descent on mean cross-entropy. Fails if
/// the loss stops being finite.
pub fn train_model(data: &Samples, num_classes: usize, spec: &TrainSpec) -> Result<ToyModel> {
    train_model_with_history(data, num_classes, spec).map(|(m, _)| m)
}

/// As [`train_model`], also returning the loss before every update.
pub fn train_model_with_history(data: &Samples, num_classes: usize, spec: &TrainSpec) -> Result<(ToyModel, Vec<f64>)> {
    if !(spec.learning_rate > 0.0 && spec.learning_rate.is_finite()) {
        return Err(Error::InvalidInput(format!("learning rate must be > 0, got {}", spec.learning_rate)));
    }
    let mut present = vec![false; num_classes];
    for &y in &data.labels {
        if y >= num_classes {
            return Err(Error::InvalidInput(format!("label {y} out of range for {num_classes} classes")));
        }
        present[y] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::InvalidInput("training data must contain at least 2 classes".into()));
    }
    let mut model = ToyModel::init(spec.architecture, data.features.ncols(), num_classes, spec.seed)?;
    let mut history = Vec::with_capacity(spec.epochs);
    for epoch in 0..spec.epochs {
        let (loss, grads) = model.loss_and_gradients(data)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged at epoch {epoch}: loss {loss} (learning rate {})",
                spec.learning_rate
            )));
        }
        history.push(loss);
        model.step(&grads, spec.learning_rate);
    }
    let (final_loss, _) = model.loss_and_gradients(data)?;
    if !final_loss.is_finite() {
        return Err(Error::Numerical(format!(
            "training diverged after {} epochs: loss {final_loss}",
            spec.epochs
        )));
    }
    model.meta = TrainingMeta {
        epochs: spec.epochs,
        learning_rate: spec.learning_rate,
        seed: spec.seed,
        final_loss,
        train_accuracy: model.accuracy(data)?,
        test_accuracy: None,
    };
    Ok((model, history))
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `-ln softmax(logits)[label]`, computed stably.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Gradient of [`cross_entropy`] with respect to the logits:
/// `softmax(logits) - onehot(label)`.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.iter()
        .enumerate()
        .map(|(i, e)| e / sum - if i == label { 1.0 } else { 0.0 })
        .collect()
}
