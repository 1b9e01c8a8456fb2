//! Differential comparison.
//!
//! A sample is judged by how the MMD between the two sets reacts when it is
//! moved across: if the distance does not shrink, the sample looks like the
//! set it was moved into.
//!
//! * [`diff_single`] moves target samples into a set of known nonmembers.
//!   The reference distance is frozen for a whole sweep; samples judged
//!   nonmember join the nonmember side immediately and leave the target side
//!   when the sweep ends.
//! * [`diff_bi`] moves samples both ways between two rough halves of the
//!   target set, updating the reference distance after every committed move,
//!   then labels the more confident half as members.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{AttackConfig, AttackMode, BlindRecord, MembershipPrediction, PredictionMeta, ProbeView, Variant};
use crate::error::{Error, Result};
use crate::kernels::{median_heuristic_sigma, KernelSpec, MmdState, Side};
use crate::nonmember::rough_separation;
use crate::projection::{project, project_all};

/// Distance and move count at the end of one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub distance: f64,
    pub moves_committed: usize,
}

/// One committed move: the reference distance it was compared against and
/// the distance it produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CommitRecord {
    pub iteration: usize,
    pub index: usize,
    pub from: Side,
    pub reference: f64,
    pub d_after: f64,
}

/// Result of one differential comparison over a batch. Indices refer to the
/// positions of the inputs (for [`diff_bi`], `part1` followed by `part2`).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffOutcome {
    pub member_idx: Vec<usize>,
    pub nonmember_idx: Vec<usize>,
    pub iterations: usize,
    pub moves_attempted: usize,
    pub moves_committed: usize,
    pub wall_time: f64,
    pub final_distance: f64,
    pub trajectory: Vec<IterationLog>,
    pub commits: Vec<CommitRecord>,
}

fn check_dims(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet("differential comparison input"));
    }
    let dim = a[0].len();
    if let Some(v) = a.iter().chain(b).find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: v.len(),
        });
    }
    Ok(())
}

fn resolve_kernel(kernel: &KernelSpec, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<KernelSpec> {
    kernel.resolved(a.iter().chain(b).map(Vec::as_slice))
}

/// Single-directional differential comparison of `target` against `nonmem`.
///
/// Each iteration freezes `d = D(nonmem, target)` and visits the remaining
/// target samples in input order. A sample whose move gives
/// `D(nonmem + y, target - y) >= d + tol` is marked nonmember and added to
/// the nonmember side at once; marked samples leave the target side after
/// the sweep. Iterations repeat while something was marked, up to
/// `max_iter`. A lone remaining target sample cannot be moved and stays a
/// member.
pub fn diff_single(
    nonmem: &[Vec<f64>],
    target: &[Vec<f64>],
    kernel: &KernelSpec,
    tol: f64,
    max_iter: usize,
) -> Result<DiffOutcome> {
    check_dims(target, nonmem)?;
    let start = Instant::now();
    let kernel = resolve_kernel(kernel, target, nonmem)?;
    let mut state = MmdState::new(target, nonmem, &kernel)?;
    let mut active: Vec<usize> = (0..target.len()).collect();
    let mut out = Outcome::default();
    let mut last_distance = state.distance();
    loop {
        out.iterations += 1;
        let d = state.distance();
        let mut marked = Vec::new();
        if active.len() >= 2 {
            for &i in &active {
                let d_after = state.peek_transfer(Side::Target, i);
                out.attempted += 1;
                if d_after >= d + tol {
                    state.insert(Side::Nonmem, i);
                    marked.push(i);
                    out.commits.push(CommitRecord {
                        iteration: out.iterations,
                        index: i,
                        from: Side::Target,
                        reference: d,
                        d_after,
                    });
                }
            }
        }
        for &i in &marked {
            state.remove(Side::Target, i);
        }
        active.retain(|i| !marked.contains(i));
        if !active.is_empty() {
            last_distance = state.distance();
        }
        out.trajectory.push(IterationLog {
            iteration: out.iterations,
            distance: last_distance,
            moves_committed: marked.len(),
        });
        if marked.is_empty() || active.is_empty() || out.iterations >= max_iter {
            break;
        }
    }
    let members = active;
    let nonmembers = (0..target.len()).filter(|i| !members.contains(i)).collect();
    Ok(out.finish(members, nonmembers, last_distance, start))
}

#[derive(Default)]
struct Outcome {
    iterations: usize,
    attempted: usize,
    trajectory: Vec<IterationLog>,
    commits: Vec<CommitRecord>,
}

impl Outcome {
    fn finish(self, members: Vec<usize>, nonmembers: Vec<usize>, distance: f64, start: Instant) -> DiffOutcome {
        DiffOutcome {
            member_idx: members,
            nonmember_idx: nonmembers,
            iterations: self.iterations,
            moves_attempted: self.attempted,
            moves_committed: self.commits.len(),
            wall_time: start.elapsed().as_secs_f64(),
            final_distance: distance,
            trajectory: self.trajectory,
            commits: self.commits,
        }
    }
}

/// Bi-directional differential comparison between two rough halves.
///
/// Forward sweep moves `part1 -> part2`, backward sweep `part2 -> part1`;
/// each committed move (`d' >= d + tol`) sets `d = d'`. Moves that would
/// empty a side are skipped. Stops when a double sweep commits nothing or
/// after `max_iter` iterations; the half with the higher mean first
/// coordinate is the member side.
pub fn diff_bi(
    part1: &[Vec<f64>],
    part2: &[Vec<f64>],
    kernel: &KernelSpec,
    tol: f64,
    max_iter: usize,
) -> Result<DiffOutcome> {
    check_dims(part1, part2)?;
    let start = Instant::now();
    let kernel = resolve_kernel(kernel, part1, part2)?;
    let mut state = MmdState::new(part1, part2, &kernel)?;
    let mut out = Outcome::default();
    let mut d = state.distance();
    loop {
        out.iterations += 1;
        let mut committed = 0;
        for from in [Side::Target, Side::Nonmem] {
            for i in state.members(from) {
                if state.len(from) < 2 {
                    break;
                }
                let d_after = state.peek_transfer(from, i);
                out.attempted += 1;
                if d_after >= d + tol {
                    state.remove(from, i);
                    state.insert(from.other(), i);
                    out.commits.push(CommitRecord {
                        iteration: out.iterations,
                        index: i,
                        from,
                        reference: d,
                        d_after,
                    });
                    d = d_after;
                    committed += 1;
                }
            }
        }
        out.trajectory.push(IterationLog {
            iteration: out.iterations,
            distance: d,
            moves_committed: committed,
        });
        if committed == 0 || out.iterations >= max_iter {
            break;
        }
    }
    let side1 = state.members(Side::Target);
    let side2 = state.members(Side::Nonmem);
    let points = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| state.point(i).to_vec()).collect() };
    let (members, nonmembers) = match decide_member_side(&points(&side1), &points(&side2)) {
        MemberSide::A => (side1, side2),
        MemberSide::B => (side2, side1),
    };
    let final_distance = state.distance();
    Ok(out.finish(members, nonmembers, final_distance, start))
}

/// Which of two sets holds the members.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemberSide {
    A,
    B,
}

fn mean_first(set: &[Vec<f64>]) -> f64 {
    set.iter().map(|v| v[0]).sum::<f64>() / set.len() as f64
}

/// The set with the strictly larger mean first coordinate (the top-1 score
/// after projection) is the member side; an exact tie goes to `A`.
pub fn decide_member_side(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> MemberSide {
    let (a, b) = (mean_first(set_a), mean_first(set_b));
    if a > b {
        MemberSide::A
    } else if b > a {
        MemberSide::B
    } else {
        log::warn!("member side tie: both sets have mean confidence {a}; choosing the first set");
        MemberSide::A
    }
}

/// Per-batch result of [`attack_batched`].
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub batch: usize,
    /// Record ids in the order the comparison visited them.
    pub ids: Vec<String>,
    pub outcome: DiffOutcome,
}

/// Predictions plus per-batch bookkeeping.
#[derive(Clone, Debug)]
pub struct AttackRun {
    pub predictions: Vec<MembershipPrediction>,
    pub batches: Vec<BatchOutcome>,
}

/// Consecutive batch ranges of `batch_size`; a trailing batch of one record
/// joins the previous batch.
pub fn batch_ranges(n: usize, batch_size: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if batch_size < 2 {
        return Err(Error::InvalidInput(format!("batch size must be >= 2, got {batch_size}")));
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "a batch needs at least 2 records after merging, got {n}"
        )));
    }
    let mut ranges: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(batch_size)
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if ranges.len() > 1 && ranges.last().map(|r| r.len()) == Some(1) {
        let last = ranges.pop().unwrap();
        ranges.last_mut().unwrap().end = last.end;
    }
    Ok(ranges)
}

/// Runs a differential-comparison variant over consecutive batches of the
/// target view. `diff-w/` compares each batch against a fresh copy of the
/// projected nonmember set; `diff-w/o` separates each batch roughly and runs
/// the bi-directional comparison. An unset bandwidth is fixed once, over the
/// whole target view plus the nonmember set, before any batch runs.
pub fn attack_batched(target: &ProbeView<'_>, nonmem: Option<&ProbeView<'_>>, config: &AttackConfig) -> Result<AttackRun> {
    config.validate()?;
    let nonmem_points = prepare_nonmem(nonmem, config)?;
    let ranges = batch_ranges(target.len(), config.batch_size)?;
    let all: Vec<BlindRecord<'_>> = target.iter().collect();
    let config = &with_attack_bandwidth(config, &all, nonmem_points.as_deref())?;
    let results: Vec<Result<BatchOutcome>> = ranges
        .par_iter()
        .enumerate()
        .map(|(b, range)| run_batch(b, all[range.clone()].to_vec(), nonmem_points.as_deref(), config))
        .collect();
    let mut batches = Vec::with_capacity(results.len());
    for r in results {
        batches.push(r?);
    }
    let mut predictions = Vec::with_capacity(target.len());
    for rec in target.iter() {
        predictions.push(MembershipPrediction {
            id: rec.id.to_string(),
            predicted_member: false,
            variant: config.variant.name().to_string(),
            meta: PredictionMeta::default(),
        });
    }
    // fill verdicts by id, keeping the target's record order
    let mut index = std::collections::HashMap::with_capacity(target.len());
    for (i, p) in predictions.iter().enumerate() {
        index.insert(p.id.clone(), i);
    }
    for batch in &batches {
        let meta = PredictionMeta {
            iterations: batch.outcome.iterations,
            moves: batch.outcome.moves_committed,
        };
        for &m in &batch.outcome.member_idx {
            predictions[index[&batch.ids[m]]].predicted_member = true;
        }
        for id in &batch.ids {
            predictions[index[id]].meta = meta;
        }
    }
    Ok(AttackRun { predictions, batches })
}

fn prepare_nonmem(nonmem: Option<&ProbeView<'_>>, config: &AttackConfig) -> Result<Option<Vec<Vec<f64>>>> {
    match config.variant {
        Variant::DiffWith => {
            let view = nonmem.ok_or_else(|| Error::InvalidInput("diff-w/ requires a nonmember probe set".into()))?;
            if view.is_empty() {
                return Err(Error::EmptySet("nonmember probe set"));
            }
            Ok(Some(project_all(view, &config.projection)?))
        }
        Variant::DiffWithout => Ok(None),
        Variant::OneClass => Err(Error::InvalidInput(
            "1class is not a differential-comparison variant; use oneclass::attack_one_class".into(),
        )),
    }
}

/// Largest number of points the bandwidth median is taken over. Bigger
/// unions are thinned to an evenly spaced subset.
pub const BANDWIDTH_SAMPLE: usize = 4000;

/// Freezes an unset bandwidth for the whole attack: the median heuristic over
/// every projected target record plus the nonmember set.
fn with_attack_bandwidth(
    config: &AttackConfig,
    records: &[BlindRecord<'_>],
    nonmem: Option<&[Vec<f64>]>,
) -> Result<AttackConfig> {
    let mut config = config.clone();
    if !config.kernel.uses_bandwidth() || config.kernel.sigma.is_some() {
        return Ok(config);
    }
    let mut points = records
        .iter()
        .map(|r| project(r.probs, r.true_label, &config.projection).map_err(|_| missing_label(r, &config)))
        .collect::<Result<Vec<_>>>()?;
    points.extend(nonmem.unwrap_or_default().iter().cloned());
    let step = points.len().div_ceil(BANDWIDTH_SAMPLE).max(1);
    let sample: Vec<&[f64]> = points.iter().step_by(step).map(Vec::as_slice).collect();
    config.kernel = config.kernel.with_sigma(median_heuristic_sigma(&sample)?);
    Ok(config)
}

/// The config [`attack_batched`] would run with on this target: an unset
/// bandwidth is resolved over the whole target plus the nonmember set.
/// Passing the result to [`attack_incremental`] reproduces batch-mode
/// verdicts exactly.
pub fn attack_bandwidth(
    target: &ProbeView<'_>,
    nonmem: Option<&ProbeView<'_>>,
    config: &AttackConfig,
) -> Result<AttackConfig> {
    config.validate()?;
    let nonmem_points = prepare_nonmem(nonmem, config)?;
    let all: Vec<BlindRecord<'_>> = target.iter().collect();
    with_attack_bandwidth(config, &all, nonmem_points.as_deref())
}

/// Runs one batch. Records are visited in ascending id order.
fn run_batch(
    batch: usize,
    mut records: Vec<BlindRecord<'_>>,
    nonmem: Option<&[Vec<f64>]>,
    config: &AttackConfig,
) -> Result<BatchOutcome> {
    records.sort_by(|a, b| a.id.cmp(b.id));
    let ids: Vec<String> = records.iter().map(|r| r.id.to_string()).collect();
    let points = records
        .iter()
        .map(|r| project(r.probs, r.true_label, &config.projection).map_err(|_| missing_label(r, config)))
        .collect::<Result<Vec<_>>>()?;
    let outcome = match config.variant {
        Variant::DiffWith => {
            let nonmem = nonmem.expect("prepared nonmember set");
            diff_single(nonmem, &points, &config.kernel, config.move_tolerance, config.max_iterations)?
        }
        Variant::DiffWithout => {
            let owned: Vec<crate::data::ProbeRecord> = records
                .iter()
                .map(|r| crate::data::ProbeRecord {
                    id: r.id.to_string(),
                    probs: r.probs.to_vec(),
                    true_label: r.true_label,
                    is_member: None,
                })
                .collect();
            let ds = crate::data::ProbeDataset::new(owned)?;
            let sep = rough_separation(&ds.view(), &config.separation, &config.projection)?;
            let part1: Vec<Vec<f64>> = sep.pseudo_target.iter().map(|&i| points[i].clone()).collect();
            let part2: Vec<Vec<f64>> = sep.pseudo_nonmem.iter().map(|&i| points[i].clone()).collect();
            let mut outcome = diff_bi(&part1, &part2, &config.kernel, config.move_tolerance, config.max_iterations)?;
            // map pool positions back to batch positions
            let pool: Vec<usize> = sep.pseudo_target.iter().chain(&sep.pseudo_nonmem).copied().collect();
            for v in [&mut outcome.member_idx, &mut outcome.nonmember_idx] {
                for i in v.iter_mut() {
                    *i = pool[*i];
                }
                v.sort_unstable();
            }
            for c in &mut outcome.commits {
                c.index = pool[c.index];
            }
            outcome
        }
        Variant::OneClass => unreachable!("rejected in prepare_nonmem"),
    };
    Ok(BatchOutcome { batch, ids, outcome })
}

fn missing_label(r: &BlindRecord<'_>, config: &AttackConfig) -> Error {
    if config.projection.needs_labels() && r.true_label.is_none() {
        Error::MissingLabel(r.id.to_string())
    } else {
        Error::InvalidInput(format!("record `{}` is incompatible with projection {}", r.id, config.projection.label()))
    }
}

/// Incremental mode: adds `record` to a previously processed batch, reruns
/// the comparison on the enlarged batch and returns the verdict for
/// `record`. Equals the batch-mode verdict for the same batch composition.
pub fn attack_incremental(
    batch: &ProbeView<'_>,
    record: BlindRecord<'_>,
    nonmem: Option<&ProbeView<'_>>,
    config: &AttackConfig,
) -> Result<MembershipPrediction> {
    let mut cfg = config.clone();
    cfg.mode = AttackMode::Incremental;
    cfg.validate()?;
    if batch.iter().any(|r| r.id == record.id) {
        return Err(Error::InvalidInput(format!("record `{}` is already in the batch", record.id)));
    }
    let nonmem_points = prepare_nonmem(nonmem, &cfg)?;
    let mut records: Vec<BlindRecord<'_>> = batch.iter().collect();
    records.push(record);
    let cfg = with_attack_bandwidth(&cfg, &records, nonmem_points.as_deref())?;
    let result = run_batch(0, records, nonmem_points.as_deref(), &cfg)?;
    let pos = result.ids.iter().position(|id| id == record.id).expect("record in batch");
    Ok(MembershipPrediction {
        id: record.id.to_string(),
        predicted_member: result.outcome.member_idx.contains(&pos),
        variant: cfg.variant.name().to_string(),
        meta: PredictionMeta {
            iterations: result.outcome.iterations,
            moves: result.outcome.moves_committed,
        },
    })
}
