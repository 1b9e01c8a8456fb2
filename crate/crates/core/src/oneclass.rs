//! One-class variant: a ν one-class SVM fit on projected nonmember outputs.
//! Target records the model flags as outliers are predicted members.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AttackConfig, MembershipPrediction, PredictionMeta, ProbeView, Variant};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::projection::project_all;

pub const MIN_TRAINING_POINTS: usize = 10;
pub const KKT_TOLERANCE: f64 = 1e-4;
pub const MAX_PAIR_UPDATES: usize = 100_000;

/// `decision(x) = sum_i coef_i k(sv_i, x) - rho`, with coefficients in
/// `[0, 1/(nu n)]` summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneClassModel {
    pub support_vectors: Vec<Vec<f64>>,
    pub coefficients: Vec<f64>,
    pub rho: f64,
    pub kernel: KernelSpec,
    pub nu: f64,
    /// Size of the training set the bound `1/(nu n)` refers to.
    pub training_size: usize,
    pub pair_updates: usize,
}

impl OneClassModel {
    pub fn dim(&self) -> usize {
        self.support_vectors.first().map_or(0, Vec::len)
    }

    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        let s: f64 = self
            .support_vectors
            .iter()
            .zip(&self.coefficients)
            .map(|(sv, a)| a * self.kernel.eval(sv, x))
            .sum();
        Ok(s - self.rho)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if model.support_vectors.len() != model.coefficients.len() {
            return Err(Error::InvalidInput("support vector and coefficient counts differ".into()));
        }
        Ok(model)
    }
}

/// Fits the one-class SVM by pairwise coordinate descent on the dual
///
/// ```text
/// min 1/2 a'Qa   s.t.  0 <= a_i <= 1,  sum a_i = nu n
/// ```
///
/// picking the maximal violating pair each step, then rescales so the
/// coefficients sum to one. A bandwidth left unset is set by the median
/// heuristic over the training points.
pub fn train_one_class(points: &[Vec<f64>], kernel: &KernelSpec, nu: f64) -> Result<OneClassModel> {
    let n = points.len();
    if n < MIN_TRAINING_POINTS {
        return Err(Error::InvalidInput(format!(
            "one-class training needs at least {MIN_TRAINING_POINTS} points, got {n}"
        )));
    }
    if !(nu > 0.0 && nu < 1.0) {
        return Err(Error::InvalidInput(format!("nu must lie in (0, 1), got {nu}")));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: p.len(),
        });
    }
    let kernel = kernel.resolved(points.iter().map(Vec::as_slice))?;

    let q: Vec<Vec<f64>> = points
        .par_iter()
        .map(|a| points.iter().map(|b| kernel.eval(a, b)).collect())
        .collect();

    // feasible start: the first floor(nu n) at the bound, one fractional
    let total = nu * n as f64;
    let mut alpha = vec![0.0; n];
    let full = total.floor() as usize;
    for a in alpha.iter_mut().take(full) {
        *a = 1.0;
    }
    if full < n {
        alpha[full] = total - full as f64;
    }
    let mut grad: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&j| alpha[j] > 0.0).map(|j| q[i][j] * alpha[j]).sum())
        .collect();

    let mut updates = 0;
    loop {
        // i can grow, j can shrink
        let (mut i, mut g_min) = (usize::MAX, f64::INFINITY);
        let (mut j, mut g_max) = (usize::MAX, f64::NEG_INFINITY);
        for t in 0..n {
            if alpha[t] < 1.0 && grad[t] < g_min {
                g_min = grad[t];
                i = t;
            }
            if alpha[t] > 0.0 && grad[t] > g_max {
                g_max = grad[t];
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX || g_max - g_min < KKT_TOLERANCE {
            break;
        }
        if updates >= MAX_PAIR_UPDATES {
            return Err(Error::NotConverged {
                iterations: updates,
                violation: g_max - g_min,
            });
        }
        let curvature = (q[i][i] + q[j][j] - 2.0 * q[i][j]).max(1e-12);
        let step = ((g_max - g_min) / curvature).min(1.0 - alpha[i]).min(alpha[j]);
        alpha[i] += step;
        alpha[j] -= step;
        for (t, g) in grad.iter_mut().enumerate() {
            *g += step * (q[t][i] - q[t][j]);
        }
        updates += 1;
    }

    let rho = offset(&alpha, &grad);
    let scale = 1.0 / total;
    let mut support_vectors = Vec::new();
    let mut coefficients = Vec::new();
    for (p, &a) in points.iter().zip(&alpha) {
        if a > 0.0 {
            support_vectors.push(p.clone());
            coefficients.push(a * scale);
        }
    }
    Ok(OneClassModel {
        support_vectors,
        coefficients,
        rho: rho * scale,
        kernel,
        nu,
        training_size: n,
        pair_updates: updates,
    })
}

/// Mean gradient over free coefficients; without any, the midpoint of the
/// feasible interval.
fn offset(alpha: &[f64], grad: &[f64]) -> f64 {
    let (mut sum, mut free) = (0.0, 0usize);
    let (mut lower, mut upper) = (f64::NEG_INFINITY, f64::INFINITY);
    for (&a, &g) in alpha.iter().zip(grad) {
        if a >= 1.0 {
            lower = lower.max(g);
        } else if a <= 0.0 {
            upper = upper.min(g);
        } else {
            sum += g;
            free += 1;
        }
    }
    if free > 0 {
        sum / free as f64
    } else {
        (lower + upper) / 2.0
    }
}

/// One verdict per target vector: member iff `decision < 0`.
pub fn classify_one_class(model: &OneClassModel, target: &[Vec<f64>]) -> Result<Vec<bool>> {
    target
        .par_iter()
        .map(|x| model.decision(x).map(|d| d < 0.0))
        .collect()
}

/// Trains on the projected nonmember probes and classifies every target
/// record.
pub fn attack_one_class(
    target: &ProbeView<'_>,
    nonmem: &ProbeView<'_>,
    config: &AttackConfig,
) -> Result<(Vec<MembershipPrediction>, OneClassModel)> {
    config.validate()?;
    let train = project_all(nonmem, &config.projection)?;
    let model = train_one_class(&train, &config.kernel, config.nu)?;
    let points = project_all(target, &config.projection)?;
    let verdicts = classify_one_class(&model, &points)?;
    let meta = PredictionMeta {
        iterations: model.pair_updates,
        moves: 0,
    };
    let preds = target
        .iter()
        .zip(verdicts)
        .map(|(r, member)| MembershipPrediction {
            id: r.id.to_string(),
            predicted_member: member,
            variant: Variant::OneClass.name().to_string(),
            meta,
        })
        .collect();
    Ok((preds, model))
}
