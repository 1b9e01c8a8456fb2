//! Acceptance checks. Runs without the libtest harness so that every check
//! prints exactly one PASS/FAIL line; the process fails if any check fails.

use std::time::{Duration, Instant};

use blindmi_core::data::{AttackConfig, ProbeDataset, ProbeRecord, Variant, SIMPLEX_TOLERANCE};
use blindmi_core::diff::{attack_batched, attack_incremental, diff_bi, diff_single, DiffOutcome};
use blindmi_core::eval::{
    compute_metrics, convergence_report, ground_truth, mann_whitney_u, ratio_sweep, ConvergenceTotals, SweepConfig,
    EXACT_LIMIT,
};
use blindmi_core::harness::{run_attack, AttackInputs, AttackKind, AttackSettings, Benchmark, BenchmarkSpec};
use blindmi_core::kernels::{KernelSpec, MmdState, Side};
use blindmi_core::toy::{cross_entropy, cross_entropy_grad, Architecture, Samples, ToyModel};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        passed,
        detail: detail.into(),
    }
}

fn main() {
    let seeds: Vec<u64> = (0..5).collect();
    let bench_start = Instant::now();
    let benches: Vec<Benchmark> = seeds
        .par_iter()
        .map(|&s| Benchmark::build(&BenchmarkSpec::standard(s)).expect("standard benchmark"))
        .collect();
    let bench_time = bench_start.elapsed();

    let checks = vec![
        mmd_state_matches_scratch(),
        comparisons_match_reference(),
        moves_are_monotone_and_runs_terminate(&benches[0]),
        separable_outputs_are_recovered(),
        incremental_matches_batch(),
        differential_attack_ordering(&benches, bench_time),
        ratio_degradation(),
        mann_whitney_matches_enumeration(),
        model_gradients_and_simplex(&benches),
        move_accounting(&benches),
    ];
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("{} of {} acceptance checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// independent oracles

fn gauss(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-sq / (2.0 * sigma * sigma)).exp()
}

fn laplace(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let l1: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    (-l1 / sigma).exp()
}

/// From-scratch biased MMD. Block sums are compensated so the oracle stays
/// accurate when the three terms nearly cancel.
fn scratch_mmd(x: &[&[f64]], y: &[&[f64]], k: &dyn Fn(&[f64], &[f64]) -> f64) -> f64 {
    let mean = |p: &[&[f64]], q: &[&[f64]]| {
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for a in p {
            for b in q {
                let v = k(a, b);
                let t = s + v;
                c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
                s = t;
            }
        }
        (s + c) / (p.len() * q.len()) as f64
    };
    (mean(x, x) + mean(y, y) - 2.0 * mean(x, y)).max(0.0).sqrt()
}

fn random_simplex(rng: &mut ChaCha8Rng, m: usize, peak: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..m).map(|_| rng.random::<f64>().powf(peak)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Top-3 projection written out by hand.
fn top3(p: &[f64]) -> Vec<f64> {
    let mut v = p.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v.truncate(3);
    v
}

// ---------------------------------------------------------------------------

fn mmd_state_matches_scratch() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for pair in 0..1000 {
        let dim = rng.random_range(1..=5);
        let nx = rng.random_range(1..=64);
        let ny = rng.random_range(1..=64);
        let x: Vec<Vec<f64>> = (0..nx).map(|_| (0..dim).map(|_| rng.random()).collect()).collect();
        let y: Vec<Vec<f64>> = (0..ny).map(|_| (0..dim).map(|_| rng.random::<f64>() * 0.8 + 0.3).collect()).collect();
        let sigma = rng.random_range(0.1..2.0);
        let (spec, k): (KernelSpec, Box<dyn Fn(&[f64], &[f64]) -> f64>) = if pair % 2 == 0 {
            (KernelSpec::gaussian(Some(sigma)), Box::new(move |a, b| gauss(a, b, sigma)))
        } else {
            (KernelSpec::laplacian(Some(sigma)), Box::new(move |a, b| laplace(a, b, sigma)))
        };
        let pool: Vec<Vec<f64>> = x.iter().chain(&y).cloned().collect();
        let mut on_target: Vec<bool> = (0..pool.len()).map(|i| i < nx).collect();
        let mut state = MmdState::new(&x, &y, &spec).unwrap();
        let moves = rng.random_range(0..=100);
        for step in 0..=moves {
            if step > 0 {
                let i = rng.random_range(0..pool.len());
                let from = if on_target[i] { Side::Target } else { Side::Nonmem };
                if state.len(from) < 2 {
                    continue;
                }
                state.delta_move_from(from, i).unwrap().commit(&mut state).unwrap();
                on_target[i] = !on_target[i];
            }
            let t: Vec<&[f64]> = (0..pool.len()).filter(|&i| on_target[i]).map(|i| pool[i].as_slice()).collect();
            let n: Vec<&[f64]> = (0..pool.len()).filter(|&i| !on_target[i]).map(|i| pool[i].as_slice()).collect();
            let want = scratch_mmd(&t, &n, &k);
            let got = state.distance();
            let rel = (got - want).abs() / want.abs().max(f64::MIN_POSITIVE);
            if want > 0.0 || got > 0.0 {
                worst = worst.max(rel);
            }
            compared += 1;
        }
    }
    let elapsed = start.elapsed();
    let passed = worst <= 1e-9 && elapsed < Duration::from_secs(30);
    check(
        "incremental MMD equals from-scratch MMD",
        passed,
        format!("{compared} states over 1000 pairs, worst relative error {worst:.2e}, {elapsed:.1?} (limits 1e-9, 30s)"),
    )
}

// ---------------------------------------------------------------------------

/// Single-directional comparison that recomputes the set distance for every
/// candidate. Marked samples join the nonmember side at once and leave the
/// target side after the sweep.
fn naive_single(nonmem: &[Vec<f64>], target: &[Vec<f64>], sigma: f64, tol: f64, max_iter: usize) -> (Vec<usize>, usize, usize) {
    let k = |a: &[f64], b: &[f64]| gauss(a, b, sigma);
    let mut active: Vec<usize> = (0..target.len()).collect();
    let mut extra: Vec<usize> = Vec::new();
    let (mut iterations, mut commits) = (0, 0);
    loop {
        iterations += 1;
        let side = |skip: Option<usize>, active: &[usize]| -> Vec<&[f64]> {
            active.iter().filter(|&&i| Some(i) != skip).map(|&i| target[i].as_slice()).collect()
        };
        let base_nonmem = |extra: &[usize]| -> Vec<&[f64]> {
            nonmem.iter().map(Vec::as_slice).chain(extra.iter().map(|&i| target[i].as_slice())).collect()
        };
        let d = scratch_mmd(&side(None, &active), &base_nonmem(&extra), &k);
        let mut marked = Vec::new();
        if active.len() >= 2 {
            for &i in &active {
                let mut grown = base_nonmem(&extra);
                grown.push(target[i].as_slice());
                let d_after = scratch_mmd(&side(Some(i), &active), &grown, &k);
                if d_after >= d + tol {
                    extra.push(i);
                    marked.push(i);
                }
            }
        }
        commits += marked.len();
        active.retain(|i| !marked.contains(i));
        if marked.is_empty() || active.is_empty() || iterations >= max_iter {
            break;
        }
    }
    (active, iterations, commits)
}

/// Bi-directional comparison with a running distance, recomputed from
/// scratch after every candidate.
fn naive_bi(part1: &[Vec<f64>], part2: &[Vec<f64>], sigma: f64, tol: f64, max_iter: usize) -> (Vec<usize>, usize, usize) {
    let k = |a: &[f64], b: &[f64]| gauss(a, b, sigma);
    let pool: Vec<&[f64]> = part1.iter().chain(part2).map(Vec::as_slice).collect();
    let mut first: Vec<bool> = (0..pool.len()).map(|i| i < part1.len()).collect();
    let dist = |first: &[bool]| {
        let a: Vec<&[f64]> = (0..pool.len()).filter(|&i| first[i]).map(|i| pool[i]).collect();
        let b: Vec<&[f64]> = (0..pool.len()).filter(|&i| !first[i]).map(|i| pool[i]).collect();
        scratch_mmd(&a, &b, &k)
    };
    let mut d = dist(&first);
    let (mut iterations, mut commits) = (0, 0);
    loop {
        iterations += 1;
        let mut committed = 0;
        for from_first in [true, false] {
            let snapshot: Vec<usize> = (0..pool.len()).filter(|&i| first[i] == from_first).collect();
            for i in snapshot {
                if first.iter().filter(|&&f| f == from_first).count() < 2 {
                    break;
                }
                first[i] = !from_first;
                let d_after = dist(&first);
                if d_after >= d + tol {
                    d = d_after;
                    committed += 1;
                } else {
                    first[i] = from_first;
                }
            }
        }
        commits += committed;
        if committed == 0 || iterations >= max_iter {
            break;
        }
    }
    let mean_top = |side: bool| {
        let idx: Vec<usize> = (0..pool.len()).filter(|&i| first[i] == side).collect();
        idx.iter().map(|&i| pool[i][0]).sum::<f64>() / idx.len() as f64
    };
    let member_first = mean_top(true) >= mean_top(false);
    let members = (0..pool.len()).filter(|&i| first[i] == member_first).collect();
    (members, iterations, commits)
}

fn comparisons_match_reference() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut mismatches = Vec::new();
    for instance in 0..200 {
        let m = rng.random_range(3..=10);
        let n_target = rng.random_range(2..=32);
        let n_nonmem = rng.random_range(2..=32);
        // members peaked, nonmembers flatter, mixed into the target side
        let target: Vec<Vec<f64>> = (0..n_target)
            .map(|_| {
                let peak = if rng.random_bool(0.5) { 6.0 } else { 1.0 };
                top3(&random_simplex(&mut rng, m, peak))
            })
            .collect();
        let nonmem: Vec<Vec<f64>> = (0..n_nonmem).map(|_| top3(&random_simplex(&mut rng, m, 1.0))).collect();
        let sigma = rng.random_range(0.05..0.6);
        let tol = if instance % 4 == 0 { 1e-12 } else { 0.0 };
        let kernel = KernelSpec::gaussian(Some(sigma));

        let got = diff_single(&nonmem, &target, &kernel, tol, 1000).unwrap();
        let (members, iterations, commits) = naive_single(&nonmem, &target, sigma, tol, 1000);
        if got.member_idx != members || got.iterations != iterations || got.moves_committed != commits {
            mismatches.push(format!("single #{instance}"));
        }

        let got = diff_bi(&target, &nonmem, &kernel, tol, 1000).unwrap();
        let (mut members, iterations, commits) = naive_bi(&target, &nonmem, sigma, tol, 1000);
        members.sort_unstable();
        let mut got_members = got.member_idx.clone();
        got_members.sort_unstable();
        if got_members != members || got.iterations != iterations || got.moves_committed != commits {
            mismatches.push(format!("bi #{instance}"));
        }
    }
    let elapsed = start.elapsed();
    check(
        "comparison loops match recompute-everything references",
        mismatches.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "200 instances x 2 loops, {} mismatches {:?}, {elapsed:.1?} (limit 60s)",
            mismatches.len(),
            mismatches.iter().take(5).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------------------

fn audit_outcome(out: &DiffOutcome, tol: f64, running: bool) -> Result<(), String> {
    let mut prev: Option<f64> = None;
    for c in &out.commits {
        if c.d_after < c.reference + tol {
            return Err(format!("commit {} has d' {} < d {} + tol", c.index, c.d_after, c.reference));
        }
        if running {
            if let Some(p) = prev {
                if c.reference != p || c.d_after < p {
                    return Err(format!("running distance broke at commit {}", c.index));
                }
            }
            prev = Some(c.d_after);
        }
    }
    if running && out.trajectory.windows(2).any(|w| w[1].distance < w[0].distance) {
        return Err("running distance decreased between iterations".into());
    }
    Ok(())
}

fn moves_are_monotone_and_runs_terminate(bench: &Benchmark) -> Check {
    let settings = AttackSettings::default();
    let mut problems = Vec::new();
    let mut commits = 0;
    for kind in AttackKind::ALL {
        let res = match run_attack(kind, &bench.inputs(), &settings) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("{kind}: {e}"));
                continue;
            }
        };
        let config = match kind {
            AttackKind::DiffWith => &settings.diff_with,
            AttackKind::DiffWithout => &settings.diff_without,
            _ => continue,
        };
        for b in &res.batches {
            commits += b.outcome.commits.len();
            if let Err(e) = audit_outcome(&b.outcome, config.move_tolerance, kind == AttackKind::DiffWithout) {
                problems.push(format!("{kind} batch {}: {e}", b.batch));
            }
            if b.outcome.iterations > config.max_iterations {
                problems.push(format!("{kind} batch {} ran {} iterations", b.batch, b.outcome.iterations));
            }
        }
    }
    check(
        "committed moves never lower the distance; every attack terminates",
        problems.is_empty(),
        format!("{commits} commits audited across 9 attacks, problems: {problems:?}"),
    )
}

// ---------------------------------------------------------------------------

fn separable_dataset(seed: u64) -> (ProbeDataset, ProbeDataset) {
    let m = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = |base: Vec<f64>, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut v: Vec<f64> = base.iter().map(|p| (p + rng.random_range(-1e-3..1e-3)).max(1e-9)).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    };
    let one_hot = |c: usize| -> Vec<f64> { (0..m).map(|j| if j == c { 0.99 } else { 0.01 / 9.0 }).collect() };
    let uniform = vec![0.1; m];
    let mut records = Vec::new();
    for i in 0..1000 {
        let c = rng.random_range(0..m);
        records.push((one_hot(c), true, i));
        records.push((uniform.clone(), false, 1000 + i));
    }
    // shuffle so that batches mix both kinds
    for i in (1..records.len()).rev() {
        let j = rng.random_range(0..=i);
        records.swap(i, j);
    }
    let target = records
        .into_iter()
        .enumerate()
        .map(|(pos, (base, member, _))| ProbeRecord::new(format!("r{pos:04}"), noisy(base, &mut rng)).with_membership(member))
        .collect();
    let generated = (0..1000).map(|i| ProbeRecord::new(format!("g{i:04}"), noisy(uniform.clone(), &mut rng))).collect();
    (
        ProbeDataset::new(target).unwrap(),
        ProbeDataset::new(generated).unwrap(),
    )
}

fn separable_outputs_are_recovered() -> Check {
    let start = Instant::now();
    let (target, generated) = separable_dataset(33);
    let truth = ground_truth(&target);
    let blind = target.redacted(false);
    let settings = AttackSettings::default();
    let inputs = AttackInputs {
        target: blind.view(),
        generated: Some(generated.view()),
        shadow: None,
    };
    let mut scores = Vec::new();
    for kind in [AttackKind::DiffWith, AttackKind::DiffWithout, AttackKind::OneClass] {
        let preds = run_attack(kind, &inputs, &settings).unwrap().predictions;
        scores.push((kind, compute_metrics(&preds, &truth).unwrap().f1));
    }
    let elapsed = start.elapsed();
    let passed = scores.iter().all(|&(_, f1)| f1 >= 0.99) && elapsed < Duration::from_secs(60);
    let detail: Vec<String> = scores.iter().map(|(k, f1)| format!("{k} {f1:.4}")).collect();
    check(
        "separable outputs are recovered",
        passed,
        format!("F1 {} on 1000+1000 records, {elapsed:.1?} (limits 0.99, 60s)", detail.join(", ")),
    )
}

// ---------------------------------------------------------------------------

fn incremental_matches_batch() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let m = 10;
    let random_record = |id: String, rng: &mut ChaCha8Rng| {
        let peak = if rng.random_bool(0.5) { 8.0 } else { 1.0 };
        ProbeRecord::new(id, random_simplex(rng, m, peak))
    };
    let generated =
        ProbeDataset::new((0..20).map(|i| random_record(format!("g{i:02}"), &mut rng)).collect()).unwrap();
    let mut mismatches = 0;
    let mut runs = 0;
    for r in 0..100 {
        let batch_len = rng.random_range(2..=39);
        let batch =
            ProbeDataset::new((0..batch_len).map(|i| random_record(format!("b{r:03}-{i:02}"), &mut rng)).collect())
                .unwrap();
        let record = random_record(format!("new{r:03}"), &mut rng);
        let mut joined = batch.records().to_vec();
        joined.push(record.clone());
        let joined = ProbeDataset::new(joined).unwrap();
        let single = ProbeDataset::new(vec![record]).unwrap();
        for variant in [Variant::DiffWith, Variant::DiffWithout] {
            let mut config = AttackConfig::for_variant(variant);
            config.batch_size = joined.len();
            let nonmem = (variant == Variant::DiffWith).then(|| generated.view());
            let batch_mode = attack_batched(&joined.view(), nonmem.as_ref(), &config).unwrap();
            let expected = batch_mode.predictions.last().unwrap().predicted_member;
            let got = attack_incremental(&batch.view(), single.view().get(0), nonmem.as_ref(), &config).unwrap();
            runs += 1;
            if got.predicted_member != expected {
                mismatches += 1;
            }
        }
    }
    check(
        "incremental verdicts equal batch verdicts",
        mismatches == 0,
        format!("{runs} records (100 per variant), {mismatches} mismatches"),
    )
}

// ---------------------------------------------------------------------------

fn mean_f1(benches: &[Benchmark], kind: AttackKind, settings: &AttackSettings) -> f64 {
    let scores: Vec<f64> = benches
        .par_iter()
        .map(|b| {
            let blind = b.target.redacted(false);
            let inputs = AttackInputs {
                target: blind.view(),
                ..b.inputs()
            };
            let preds = run_attack(kind, &inputs, settings).unwrap().predictions;
            compute_metrics(&preds, &ground_truth(&b.target)).unwrap().f1
        })
        .collect();
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn differential_attack_ordering(benches: &[Benchmark], bench_time: Duration) -> Check {
    let start = Instant::now();
    let settings = AttackSettings::default();
    let with = mean_f1(benches, AttackKind::DiffWith, &settings);
    let without = mean_f1(benches, AttackKind::DiffWithout, &settings);
    let top1 = mean_f1(benches, AttackKind::Top1Threshold, &settings);
    let elapsed = start.elapsed() + bench_time;
    check(
        "diff-w/ leads on the overfit benchmark",
        with > top1 && with >= without - 0.02 && elapsed < Duration::from_secs(300),
        format!(
            "mean F1 over {} seeds: diff-w/ {with:.3}, diff-w/o {without:.3}, top1-threshold {top1:.3}, {elapsed:.1?} (limit 300s)",
            benches.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn ratio_degradation() -> Check {
    const BAND: f64 = 0.03;
    let start = Instant::now();
    let config = SweepConfig::default();
    let rows = ratio_sweep(&BenchmarkSpec::standard(0), &AttackSettings::default(), &config).unwrap();
    let elapsed = start.elapsed();
    let curve = |attack: &str| -> Vec<f64> {
        config
            .ratios
            .iter()
            .map(|&r| rows.iter().find(|row| row.attack == attack && row.param == r).unwrap().f1_mean)
            .collect()
    };
    let mut rising = Vec::new();
    let mut lines = Vec::new();
    for kind in &config.attacks {
        let c = curve(kind.name());
        for (w, r) in c.windows(2).zip(config.ratios.windows(2)) {
            if w[1] > w[0] + BAND {
                rising.push(format!("{kind} {}->{}", r[0], r[1]));
            }
        }
        let shown: Vec<String> = c.iter().map(|f| format!("{f:.3}")).collect();
        lines.push(format!("{kind} [{}]", shown.join(" ")));
    }
    let drop = |c: Vec<f64>| c[0] - c[c.len() - 1];
    let with_drop = drop(curve(AttackKind::DiffWith.name()));
    let top1_drop = drop(curve(AttackKind::Top1Threshold.name()));
    let passed = rising.is_empty() && with_drop <= top1_drop + BAND && elapsed < Duration::from_secs(600);
    check(
        "F1 falls with the nonmember ratio, diff-w/ no faster than top1",
        passed,
        format!(
            "ratios {:?}: {}; F1 drop diff-w/ {with_drop:.3} vs top1-threshold {top1_drop:.3}; rises beyond band: {rising:?}; {elapsed:.1?} (limit 600s)",
            config.ratios,
            lines.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------

/// Two-sided p-value by enumerating every assignment of the pooled
/// mid-ranks to the first group.
fn enumerated_p(a: &[f64], b: &[f64]) -> (f64, f64) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let ranks: Vec<f64> = pooled
        .iter()
        .map(|&v| {
            let below = pooled.iter().filter(|&&w| w < v).count() as f64;
            let equal = pooled.iter().filter(|&&w| w == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let (n1, n2) = (a.len(), b.len());
    let u_of = |sum: f64| sum - (n1 * (n1 + 1)) as f64 / 2.0;
    let u_obs = u_of(ranks[..n1].iter().sum());
    let centre = (n1 * n2) as f64 / 2.0;
    let (mut extreme, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let sum: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
        total += 1;
        if (u_of(sum) - centre).abs() >= (u_obs - centre).abs() - 1e-9 {
            extreme += 1;
        }
    }
    (u_obs.min((n1 * n2) as f64 - u_obs), extreme as f64 / total as f64)
}

fn mann_whitney_matches_enumeration() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for _ in 0..300 {
        let n1 = rng.random_range(3..=EXACT_LIMIT);
        let n2 = rng.random_range(3..=EXACT_LIMIT);
        // coarse values so ties are common
        let levels = rng.random_range(2..=12);
        let a: Vec<f64> = (0..n1).map(|_| rng.random_range(0..levels) as f64).collect();
        let b: Vec<f64> = (0..n2).map(|_| rng.random_range(0..levels) as f64 + 0.5 * rng.random_range(0..2) as f64).collect();
        let (u, p) = mann_whitney_u(&a, &b).unwrap();
        let (u_ref, p_ref) = enumerated_p(&a, &b);
        worst = worst.max((u - u_ref).abs()).max((p - p_ref).abs());
        cases += 1;
    }
    let same = [0.31, 0.42, 0.57, 0.64, 0.73, 0.88];
    let (u_same, p_same) = mann_whitney_u(&same, &same).unwrap();
    check(
        "Mann-Whitney U matches exhaustive enumeration",
        worst < 1e-12 && u_same == 18.0,
        format!("{cases} tied and untied cases, worst |diff| {worst:.1e}; identical 6+6 samples give U = {u_same} (p = {p_same:.4})"),
    )
}

// ---------------------------------------------------------------------------

fn model_gradients_and_simplex(benches: &[Benchmark]) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
    let mut worst_logit = 0.0f64;
    for _ in 0..200 {
        let m = rng.random_range(2..=10);
        let logits: Vec<f64> = (0..m).map(|_| rng.random_range(-4.0..4.0)).collect();
        let label = rng.random_range(0..m);
        let grad = cross_entropy_grad(&logits, label);
        for j in 0..m {
            let h = 1e-5;
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (cross_entropy(&up, label) - cross_entropy(&down, label)) / (2.0 * h);
            worst_logit = worst_logit.max(rel(grad[j], fd));
        }
    }

    // parameter gradients of a small MLP and softmax model
    let mut worst_param = 0.0f64;
    for arch in [Architecture::Softmax, Architecture::Mlp { hidden: 5 }] {
        let (n, d, m) = (12, 4, 3);
        let data = Samples {
            features: Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0)),
            labels: (0..n).map(|_| rng.random_range(0..m)).collect(),
        };
        let model = ToyModel::init(arch, d, m, 7).unwrap();
        let (_, grads) = model.loss_and_gradients(&data).unwrap();
        for (l, layer) in model.layers.iter().enumerate() {
            for (idx, &g) in grads.layers[l].weights.indexed_iter() {
                let h = 1e-5;
                let mut up = model.clone();
                let mut down = model.clone();
                up.layers[l].weights[idx] += h;
                down.layers[l].weights[idx] -= h;
                let fd = (up.loss_and_gradients(&data).unwrap().0 - down.loss_and_gradients(&data).unwrap().0) / (2.0 * h);
                worst_param = worst_param.max(rel(g, fd));
            }
            for j in 0..layer.bias.len() {
                let h = 1e-5;
                let mut up = model.clone();
                let mut down = model.clone();
                up.layers[l].bias[j] += h;
                down.layers[l].bias[j] -= h;
                let fd = (up.loss_and_gradients(&data).unwrap().0 - down.loss_and_gradients(&data).unwrap().0) / (2.0 * h);
                worst_param = worst_param.max(rel(grads.layers[l].bias[j], fd));
            }
        }
    }

    let mut records = 0;
    let mut worst_sum = 0.0f64;
    let mut negative = 0;
    for b in benches {
        let shadow = b.shadow.as_ref().map(|s| [&s.member_outputs, &s.nonmember_outputs]);
        let sets = [&b.target, &b.generated].into_iter().chain(shadow.into_iter().flatten());
        for set in sets {
            for r in set.records() {
                records += 1;
                worst_sum = worst_sum.max((r.probs.iter().sum::<f64>() - 1.0).abs());
                negative += r.probs.iter().filter(|&&p| p < 0.0).count();
            }
        }
    }
    check(
        "model gradients match finite differences; outputs lie on the simplex",
        worst_logit <= 1e-5 && worst_param <= 1e-5 && worst_sum <= SIMPLEX_TOLERANCE && negative == 0,
        format!(
            "worst relative error: logits {worst_logit:.1e}, parameters {worst_param:.1e}; {records} records, worst |sum - 1| {worst_sum:.1e}, {negative} negative entries"
        ),
    )
}

// ---------------------------------------------------------------------------

fn move_accounting(benches: &[Benchmark]) -> Check {
    let settings = AttackSettings::default();
    let mut exact = true;
    let mut totals = [ConvergenceTotals::default(); 2];
    for b in benches {
        for (slot, kind) in [AttackKind::DiffWith, AttackKind::DiffWithout].into_iter().enumerate() {
            let res = run_attack(kind, &b.inputs(), &settings).unwrap();
            let report = convergence_report(&res.batches);
            let t = report.totals;
            let sum = |f: fn(&DiffOutcome) -> usize| res.batches.iter().map(|x| f(&x.outcome)).sum::<usize>();
            exact &= t.batches == res.batches.len()
                && t.iterations == sum(|o| o.iterations)
                && t.moves_attempted == sum(|o| o.moves_attempted)
                && t.moves_committed == sum(|o| o.moves_committed)
                && report.rows.len() == sum(|o| o.trajectory.len());
            totals[slot].batches += t.batches;
            totals[slot].iterations += t.iterations;
            totals[slot].moves_attempted += t.moves_attempted;
            totals[slot].moves_committed += t.moves_committed;
        }
    }
    let [with, without] = totals;
    check(
        "move accounting: totals are exact and diff-w/o commits more moves",
        exact && without.moves_committed > with.moves_committed,
        format!(
            "totals exact: {exact}; over {} seeds committed diff-w/o {} vs diff-w/ {}, attempted diff-w/o {} vs diff-w/ {}, iterations diff-w/o {} vs diff-w/ {}",
            benches.len(),
            without.moves_committed,
            with.moves_committed,
            without.moves_attempted,
            with.moves_attempted,
            without.iterations,
            with.iterations
        ),
    )
}
