//! Metrics, statistical tests, convergence accounting and sweeps.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{MembershipPrediction, ProbeDataset};
use crate::diff::BatchOutcome;
use crate::error::{Error, Result};
use crate::harness::{run_attack, AttackInputs, AttackKind, AttackSettings, Benchmark, BenchmarkSpec};
use crate::kernels::{mmd, KernelSpec};

/// Confusion-matrix metrics with member as the positive class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub digest: String,
}

/// Ground-truth membership by id, from records that carry it.
pub fn ground_truth(dataset: &ProbeDataset) -> HashMap<String, bool> {
    dataset
        .records()
        .iter()
        .filter_map(|r| r.is_member.map(|m| (r.id.clone(), m)))
        .collect()
}

pub fn compute_metrics(preds: &[MembershipPrediction], truth: &HashMap<String, bool>) -> Result<MetricsReport> {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for p in preds {
        let actual = *truth.get(&p.id).ok_or_else(|| Error::MissingGroundTruth(p.id.clone()))?;
        match (p.predicted_member, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let precision = ratio(tp, fp);
    let recall = ratio(tp, fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricsReport {
        variant: preds.first().map(|p| p.variant.clone()).unwrap_or_default(),
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        tn,
        digest: String::new(),
    })
}

pub const METRICS_HEADER: &str = "variant,precision,recall,f1,tp,fp,fn,tn,digest";

pub fn write_metrics(reports: &[MetricsReport], path: impl AsRef<Path>, digest: Option<&str>) -> Result<()> {
    let mut out = header_lines(digest);
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.variant, r.precision, r.recall, r.f1, r.tp, r.fp, r.fn_, r.tn, r.digest
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn header_lines(digest: Option<&str>) -> String {
    digest.map(|d| format!("# digest: {d}\n")).unwrap_or_default()
}

/// Largest sample size (per group) for which the p-value is exact.
pub const EXACT_LIMIT: usize = 8;

/// Two-sided Mann-Whitney U test with mid-ranks. Returns `min(U_A, U_B)`
/// and the p-value: exact over all equally likely group assignments when
/// both samples have at most eight values, otherwise the tie-corrected
/// normal approximation with continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 3 || b.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "Mann-Whitney U needs at least 3 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("Mann-Whitney U samples must be finite".into()));
    }
    let (n1, n2) = (a.len(), b.len());
    let ranks = midranks(&a.iter().chain(b).copied().collect::<Vec<_>>());
    let rank_sum_a: f64 = ranks[..n1].iter().sum();
    let u_a = rank_sum_a - (n1 * (n1 + 1)) as f64 / 2.0;
    let u_b = (n1 * n2) as f64 - u_a;
    let u = u_a.min(u_b);
    let p = if n1 <= EXACT_LIMIT && n2 <= EXACT_LIMIT {
        exact_p(&ranks, n1, u_a)
    } else {
        normal_p(&ranks, n1, n2, u_a)
    };
    Ok((u, p))
}

/// 1-based ranks, ties sharing the average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Counts subsets of size `n1` by their doubled rank sum (mid-ranks are
/// multiples of 1/2, so doubled ranks are integers).
fn exact_p(ranks: &[f64], n1: usize, u_a: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // counts[k][s]: subsets of size k with doubled rank sum s
    let mut counts = vec![vec![0f64; max_sum + 1]; n1 + 1];
    counts[0][0] = 1.0;
    for &r in &doubled {
        for k in (1..=n1).rev() {
            for s in (r..=max_sum).rev() {
                counts[k][s] += counts[k - 1][s - r];
            }
        }
    }
    let n2 = ranks.len() - n1;
    let mean = (n1 * n2) as f64 / 2.0;
    let observed = (u_a - mean).abs();
    let offset = (n1 * (n1 + 1)) as f64 / 2.0;
    let (mut extreme, mut total) = (0.0, 0.0);
    for (s, &c) in counts[n1].iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        total += c;
        let u = s as f64 / 2.0 - offset;
        if (u - mean).abs() >= observed - 1e-9 {
            extreme += c;
        }
    }
    (extreme / total).min(1.0)
}

fn normal_p(ranks: &[f64], n1: usize, n2: usize, u_a: f64) -> f64 {
    let n = (n1 + n2) as f64;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let prod = (n1 * n2) as f64;
    let var = prod / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = (((u_a - prod / 2.0).abs() - 0.5).max(0.0)) / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - std.cdf(z))).min(1.0)
}

/// MMD between two probe sets' projected outputs, e.g. generated versus
/// real nonmembers.
pub fn mmd_between(a: &[Vec<f64>], b: &[Vec<f64>], kernel: &KernelSpec) -> Result<f64> {
    let kernel = kernel.resolved(a.iter().chain(b).map(Vec::as_slice))?;
    mmd(a, b, &kernel)
}

/// One row of a convergence trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub batch: usize,
    pub iteration: usize,
    pub distance: f64,
    pub moves_committed: usize,
}

/// Totals over all batches of one run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ConvergenceTotals {
    pub batches: usize,
    pub iterations: usize,
    pub moves_attempted: usize,
    pub moves_committed: usize,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub totals: ConvergenceTotals,
}

pub fn convergence_report(batches: &[BatchOutcome]) -> ConvergenceReport {
    let mut rows = Vec::new();
    let mut totals = ConvergenceTotals::default();
    for b in batches {
        for t in &b.outcome.trajectory {
            rows.push(ConvergenceRow {
                batch: b.batch,
                iteration: t.iteration,
                distance: t.distance,
                moves_committed: t.moves_committed,
            });
        }
        totals.batches += 1;
        totals.iterations += b.outcome.iterations;
        totals.moves_attempted += b.outcome.moves_attempted;
        totals.moves_committed += b.outcome.moves_committed;
        totals.wall_time += b.outcome.wall_time;
    }
    ConvergenceReport { rows, totals }
}

pub const CONVERGENCE_HEADER: &str = "batch,iteration,distance,moves_committed";
pub const TOTALS_HEADER: &str = "variant,batches,iterations,moves_attempted,moves_committed,wall_time";
pub const LONG_HEADER: &str = "series,x,metric,value";

/// Per-batch trajectory CSV. With `long`, emits `series,x,metric,value`
/// rows (series = batch, x = iteration).
pub fn write_convergence(report: &ConvergenceReport, path: impl AsRef<Path>, digest: Option<&str>, long: bool) -> Result<()> {
    let mut out = header_lines(digest);
    if long {
        out.push_str(LONG_HEADER);
        out.push('\n');
        for r in &report.rows {
            out.push_str(&format!("{},{},distance,{}\n", r.batch, r.iteration, r.distance));
            out.push_str(&format!("{},{},moves_committed,{}\n", r.batch, r.iteration, r.moves_committed));
        }
    } else {
        out.push_str(CONVERGENCE_HEADER);
        out.push('\n');
        for r in &report.rows {
            out.push_str(&format!("{},{},{},{}\n", r.batch, r.iteration, r.distance, r.moves_committed));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Table of run totals (one row per variant). Wall time is the only
/// non-reproducible column, so it is written only when `timed` is set.
pub fn write_totals(
    rows: &[(String, ConvergenceTotals)],
    path: impl AsRef<Path>,
    digest: Option<&str>,
    timed: bool,
) -> Result<()> {
    let mut out = header_lines(digest);
    let header = if timed {
        TOTALS_HEADER
    } else {
        TOTALS_HEADER.trim_end_matches(",wall_time")
    };
    out.push_str(header);
    out.push('\n');
    for (variant, t) in rows {
        out.push_str(&format!(
            "{},{},{},{},{}",
            variant, t.batches, t.iterations, t.moves_attempted, t.moves_committed
        ));
        if timed {
            out.push_str(&format!(",{}", t.wall_time));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Sweep settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Nonmember-to-member ratios.
    pub ratios: Vec<f64>,
    pub class_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub attacks: Vec<AttackKind>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ratios: vec![1.0, 5.0, 10.0, 20.0],
            class_counts: vec![2, 5, 10],
            seeds: (0..5).collect(),
            attacks: vec![AttackKind::DiffWith, AttackKind::DiffWithout, AttackKind::Top1Threshold],
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.ratios.iter().find(|r| !(**r >= 1.0)) {
            return Err(Error::InvalidInput(format!("ratios must be >= 1, got {r}")));
        }
        if let Some(m) = self.class_counts.iter().find(|m| **m < 2) {
            return Err(Error::InvalidInput(format!("class counts must be >= 2, got {m}")));
        }
        if self.seeds.is_empty() || self.attacks.is_empty() {
            return Err(Error::InvalidInput("sweeps need at least one seed and one attack".into()));
        }
        Ok(())
    }
}

/// Mean and standard error of the mean of one sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    /// The swept parameter (ratio or class count).
    pub param: f64,
    pub attack: String,
    pub f1_mean: f64,
    pub f1_sem: f64,
    pub runs: usize,
}

fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Keeps every nonmember and `round(nonmembers / r)` members, sampled
/// without replacement under `seed`; record order is preserved.
pub fn subsample_ratio(target: &ProbeDataset, ratio: f64, seed: u64) -> Result<ProbeDataset> {
    let members: Vec<usize> = (0..target.len())
        .filter(|&i| target.records()[i].is_member == Some(true))
        .collect();
    let nonmembers = target.len() - members.len();
    let want = (nonmembers as f64 / ratio).round() as usize;
    if want == 0 || want > members.len() {
        return Err(Error::InvalidInput(format!(
            "pool of {} members and {nonmembers} nonmembers cannot realise ratio {ratio}",
            members.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11ce);
    let keep: HashSet<usize> = sample(&mut rng, members.len(), want).into_iter().map(|i| members[i]).collect();
    let idx: Vec<usize> = (0..target.len())
        .filter(|i| keep.contains(i) || target.records()[*i].is_member == Some(false))
        .collect();
    Ok(target.select(&idx))
}

fn f1_of(kind: AttackKind, target: &ProbeDataset, bench: &Benchmark, settings: &AttackSettings) -> Result<f64> {
    let blind = target.redacted(true);
    let inputs = AttackInputs {
        target: blind.view(),
        ..bench.inputs()
    };
    let res = run_attack(kind, &inputs, settings)?;
    Ok(compute_metrics(&res.predictions, &ground_truth(target))?.f1)
}

fn aggregate(cells: Vec<(f64, AttackKind, f64)>, config: &SweepConfig, params: &[f64]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &param in params {
        for &kind in &config.attacks {
            let f1s: Vec<f64> = cells
                .iter()
                .filter(|(p, k, _)| *p == param && *k == kind)
                .map(|c| c.2)
                .collect();
            let (f1_mean, f1_sem) = mean_sem(&f1s);
            rows.push(SweepRow {
                param,
                attack: kind.name().to_string(),
                f1_mean,
                f1_sem,
                runs: f1s.len(),
            });
        }
    }
    rows
}

/// F1 per (ratio, attack), averaged over seeds. Each seed builds one
/// benchmark and subsamples its members to every ratio.
pub fn ratio_sweep(base: &BenchmarkSpec, settings: &AttackSettings, config: &SweepConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let benches: Vec<Benchmark> = config
        .seeds
        .par_iter()
        .map(|&seed| Benchmark::build(&reseeded(base, seed)))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, f64, AttackKind)> = (0..benches.len())
        .flat_map(|b| config.ratios.iter().flat_map(move |&r| config.attacks.iter().map(move |&k| (b, r, k))))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(b, r, kind)| {
            let target = subsample_ratio(&benches[b].target, r, config.seeds[b])?;
            Ok((r, kind, f1_of(kind, &target, &benches[b], settings)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(cells, config, &config.ratios))
}

/// F1 per (class count, attack), averaged over seeds. The benchmark is
/// rebuilt for every class count with the total training size held fixed,
/// and projections wider than the class count are narrowed to it.
pub fn class_sweep(base: &BenchmarkSpec, settings: &AttackSettings, config: &SweepConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let total = base.synthetic.num_classes * base.synthetic.samples_per_class;
    let jobs: Vec<(usize, u64)> = config
        .class_counts
        .iter()
        .flat_map(|&m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(m, seed)| {
            let mut spec = reseeded(base, seed);
            spec.synthetic.num_classes = m;
            spec.synthetic.samples_per_class = (total / m).max(1);
            let bench = Benchmark::build(&spec)?;
            let settings = narrowed(settings, m);
            config
                .attacks
                .iter()
                .map(|&kind| Ok((m as f64, kind, f1_of(kind, &bench.target, &bench, &settings)?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let params: Vec<f64> = config.class_counts.iter().map(|&m| m as f64).collect();
    Ok(aggregate(cells.into_iter().flatten().collect(), config, &params))
}

/// Caps every projection at `m` outputs so small class counts stay valid.
fn narrowed(settings: &AttackSettings, m: usize) -> AttackSettings {
    let mut out = settings.clone();
    for config in [&mut out.diff_with, &mut out.diff_without, &mut out.one_class] {
        config.projection.k = config.projection.k.min(m);
    }
    out
}

fn reseeded(base: &BenchmarkSpec, seed: u64) -> BenchmarkSpec {
    let mut spec = base.clone();
    spec.synthetic.seed = seed;
    spec.train.seed = seed;
    spec
}

pub const SWEEP_HEADER: &str = "param,attack,f1_mean,f1_sem,runs";

/// Sweep table. `param_name` labels the swept column (`ratio` or
/// `classes`); with `long`, rows become `series,x,metric,value`.
pub fn write_sweep(
    rows: &[SweepRow],
    param_name: &str,
    path: impl AsRef<Path>,
    digest: Option<&str>,
    long: bool,
) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(header_lines(digest).as_bytes())?;
    if long {
        writeln!(file, "{LONG_HEADER}")?;
        for r in rows {
            writeln!(file, "{},{},f1_mean,{}", r.attack, r.param, r.f1_mean)?;
            writeln!(file, "{},{},f1_sem,{}", r.attack, r.param, r.f1_sem)?;
        }
    } else {
        writeln!(file, "{}", SWEEP_HEADER.replacen("param", param_name, 1))?;
        for r in rows {
            writeln!(file, "{},{},{},{},{}", r.param, r.attack, r.f1_mean, r.f1_sem, r.runs)?;
        }
    }
    file.flush()?;
    Ok(())
}
