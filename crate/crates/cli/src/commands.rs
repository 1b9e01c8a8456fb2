use std::collections::HashMap;
use std::path::{Path, PathBuf};

use blindmi_core::baselines::ShadowArtifacts;
use blindmi_core::data::{
    load_predictions, load_probe_records, save_predictions_with_digest, save_probe_records_with_digest, ProbeDataset,
};
use blindmi_core::diff::{attack_bandwidth, attack_incremental, batch_ranges};
use blindmi_core::eval::{
    class_sweep, compute_metrics, convergence_report, ground_truth, ratio_sweep, write_convergence, write_metrics,
    write_sweep, write_totals,
};
use blindmi_core::harness::{
    benchmark_data, check_capabilities, probe_benchmark, run_attack, shadow_artifacts, target_order, train_shadow,
    AttackInputs, AttackKind,
};
use blindmi_core::toy::{train_model, Samples};

use crate::config::Resolved;
use crate::failure::Failure;
use crate::files::{
    check_digest, ensure_parent, read_model, read_samples, recorded_digest, require, write_model, write_samples, Layout,
};

const SPLITS: [&str; 4] = ["train", "holdout", "shadow_train", "shadow_holdout"];

pub fn synth(run: &Resolved) -> Result<(), Failure> {
    let layout = Layout::new(&run.out);
    let data = benchmark_data(&run.config.benchmark)?;
    let sets = [&data.train, &data.holdout, &data.shadow_train, &data.shadow_holdout];
    for (split, samples) in SPLITS.iter().zip(sets) {
        let path = layout.data(split);
        write_samples(samples, &path, &run.digest, true)?;
        say!("wrote {} ({} rows)", path.display(), samples.len());
    }
    let generated = Samples {
        labels: vec![0; data.generated.nrows()],
        features: data.generated,
    };
    let path = layout.data("generated");
    write_samples(&generated, &path, &run.digest, false)?;
    say!("wrote {} ({} rows)", path.display(), generated.len());
    Ok(())
}

fn load_split(layout: &Layout, split: &str, digest: &str) -> Result<Samples, Failure> {
    let path = layout.data(split);
    require(&path, "synth")?;
    check_digest(&path, digest);
    read_samples(&path)
}

pub fn train(run: &Resolved) -> Result<(), Failure> {
    let layout = Layout::new(&run.out);
    let spec = &run.config.benchmark;
    let m = spec.synthetic.num_classes;
    let train = load_split(&layout, "train", &run.digest)?;
    let holdout = load_split(&layout, "holdout", &run.digest)?;
    let mut model = train_model(&train, m, &spec.train)?;
    let holdout_accuracy = model.accuracy(&holdout)?;
    model.meta.test_accuracy = Some(holdout_accuracy);
    let path = layout.model("target");
    write_model(&model, &path, &run.digest)?;
    say!(
        "wrote {} (train accuracy {:.3}, holdout accuracy {holdout_accuracy:.3})",
        path.display(),
        model.meta.train_accuracy
    );
    if spec.shadow {
        let shadow = train_shadow(spec, &load_split(&layout, "shadow_train", &run.digest)?)?;
        let path = layout.model("shadow");
        write_model(&shadow, &path, &run.digest)?;
        say!("wrote {} (train accuracy {:.3})", path.display(), shadow.meta.train_accuracy);
    }
    Ok(())
}

pub fn probe(run: &Resolved, blind: bool) -> Result<(), Failure> {
    let layout = Layout::new(&run.out);
    let model_path = layout.model("target");
    require(&model_path, "train")?;
    check_digest(&model_path, &run.digest);
    let model = read_model(&model_path)?;

    let train = load_split(&layout, "train", &run.digest)?;
    let holdout = load_split(&layout, "holdout", &run.digest)?;
    let generated = load_split(&layout, "generated", &run.digest)?;
    let order = target_order(train.len() + holdout.len(), run.config.benchmark.synthetic.seed);
    let (target, generated) = probe_benchmark(&model, &train, &holdout, &order, &generated.features)?;

    let target_path = layout.probes("target");
    ensure_parent(&target_path)?;
    if blind {
        let truth_path = layout.truth();
        write_truth(&target, &truth_path, &run.digest)?;
        save_probe_records_with_digest(&target.redacted(false), &target_path, &run.digest)?;
        say!("wrote {} (ground truth kept for evaluation)", truth_path.display());
    } else {
        save_probe_records_with_digest(&target, &target_path, &run.digest)?;
        let _ = std::fs::remove_file(layout.truth());
    }
    say!("wrote {} ({} records)", target_path.display(), target.len());
    let gen_path = layout.probes("generated");
    save_probe_records_with_digest(&generated, &gen_path, &run.digest)?;
    say!("wrote {} ({} records)", gen_path.display(), generated.len());

    let shadow_files = [layout.probes("shadow_members"), layout.probes("shadow_nonmembers")];
    let shadow_path = layout.model("shadow");
    if blind || !shadow_path.is_file() {
        // The blind setting has no shadow model.
        for f in &shadow_files {
            let _ = std::fs::remove_file(f);
        }
        return Ok(());
    }
    check_digest(&shadow_path, &run.digest);
    let shadow = read_model(&shadow_path)?;
    let artifacts = shadow_artifacts(
        &shadow,
        &load_split(&layout, "shadow_train", &run.digest)?,
        &load_split(&layout, "shadow_holdout", &run.digest)?,
    )?;
    for (path, set) in shadow_files.iter().zip([&artifacts.member_outputs, &artifacts.nonmember_outputs]) {
        save_probe_records_with_digest(set, path, &run.digest)?;
        say!("wrote {} ({} records)", path.display(), set.len());
    }
    Ok(())
}

fn write_truth(target: &ProbeDataset, path: &Path, digest: &str) -> Result<(), Failure> {
    let mut out = format!("# digest: {digest}\nid,is_member\n");
    for r in target.records() {
        let member = r.is_member.ok_or_else(|| Failure::upstream(format!("record `{}` has no ground truth", r.id)))?;
        out.push_str(&format!("{},{member}\n", r.id));
    }
    std::fs::write(path, out).map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))
}

fn read_truth(path: &Path) -> Result<HashMap<String, bool>, Failure> {
    let bad = |e: csv::Error| Failure::upstream(format!("{}: {e}", path.display()));
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(bad)?;
    reader
        .deserialize::<(String, bool)>()
        .map(|row| row.map_err(bad))
        .collect()
}

/// Target, generated and shadow probes as found on disk.
struct ProbeFiles {
    target: ProbeDataset,
    generated: Option<ProbeDataset>,
    shadow: Option<ShadowArtifacts>,
}

impl ProbeFiles {
    fn load(layout: &Layout, target: Option<&Path>, digest: &str) -> Result<Self, Failure> {
        let target_path = target.map(Path::to_path_buf).unwrap_or_else(|| layout.probes("target"));
        require(&target_path, "probe")?;
        check_digest(&target_path, digest);
        let target = load_probe_records(&target_path, None)?;
        let m = Some(target.num_classes());
        let optional = |name: &str| -> Result<Option<ProbeDataset>, Failure> {
            let path = layout.probes(name);
            if !path.is_file() {
                return Ok(None);
            }
            check_digest(&path, digest);
            Ok(Some(load_probe_records(&path, m)?))
        };
        let generated = optional("generated")?;
        let shadow = match (optional("shadow_members")?, optional("shadow_nonmembers")?) {
            (Some(a), Some(b)) => Some(ShadowArtifacts::new(a, b)?),
            _ => None,
        };
        Ok(Self {
            target,
            generated,
            shadow,
        })
    }

    fn inputs(&self) -> AttackInputs<'_> {
        AttackInputs {
            target: self.target.view(),
            generated: self.generated.as_ref().map(ProbeDataset::view),
            shadow: self.shadow.as_ref(),
        }
    }
}

/// Capability check whose message also lists what the inputs do allow.
fn admit(kind: AttackKind, inputs: &AttackInputs<'_>) -> Result<(), Failure> {
    check_capabilities(kind, inputs).map_err(|e| {
        let usable: Vec<&str> = AttackKind::ALL
            .into_iter()
            .filter(|k| check_capabilities(*k, inputs).is_ok())
            .map(AttackKind::name)
            .collect();
        let mut f = Failure::from(e);
        f.message = format!("{}; attacks available with these inputs: {}", f.message, usable.join(", "));
        f
    })
}

pub struct AttackArgs {
    pub attacks: Vec<AttackKind>,
    pub target: Option<PathBuf>,
    pub record: Option<String>,
    pub incremental: bool,
    pub plot_data: bool,
}

pub fn attack(run: &Resolved, args: &AttackArgs) -> Result<(), Failure> {
    let layout = Layout::new(&run.out);
    let kinds = if args.attacks.is_empty() {
        run.config.attacks.clone()
    } else {
        args.attacks.clone()
    };
    let files = ProbeFiles::load(&layout, args.target.as_deref(), &run.digest)?;
    let inputs = files.inputs();
    for &kind in &kinds {
        admit(kind, &inputs)?;
    }
    if args.incremental {
        let [kind] = kinds[..] else {
            return Err(Failure::config("incremental mode runs exactly one attack; pass a single --attack"));
        };
        let record = args
            .record
            .as_deref()
            .ok_or_else(|| Failure::config("incremental mode needs --record ID"))?;
        return incremental(run, kind, &files, record);
    }
    if args.record.is_some() {
        return Err(Failure::config("--record only applies with --mode incremental"));
    }

    let mut totals = Vec::new();
    for &kind in &kinds {
        let result = run_attack(kind, &inputs, &run.config.attack)?;
        let path = layout.predictions(kind.name());
        ensure_parent(&path)?;
        save_predictions_with_digest(&result.predictions, &path, &run.digest)?;
        let members = result.predictions.iter().filter(|p| p.predicted_member).count();
        say!(
            "{kind}: {members} of {} predicted members -> {}",
            result.predictions.len(),
            path.display()
        );
        if kind.variant().is_some() && !result.batches.is_empty() {
            let report = convergence_report(&result.batches);
            let path = layout.convergence(kind.name());
            ensure_parent(&path)?;
            write_convergence(&report, &path, Some(&run.digest), args.plot_data)?;
            log::info!("{kind}: wall time {:.3}s", report.totals.wall_time);
            totals.push((kind.name().to_string(), report.totals));
        }
    }
    if !totals.is_empty() {
        write_totals(&totals, layout.totals(), Some(&run.digest), false)?;
    }
    Ok(())
}

/// Verdict for one record against the rest of the batch it falls in under
/// batch mode, with the bandwidth batch mode would use, so the two agree.
fn incremental(run: &Resolved, kind: AttackKind, files: &ProbeFiles, record: &str) -> Result<(), Failure> {
    let settings = &run.config.attack;
    let (config, nonmem) = match kind {
        AttackKind::DiffWith => {
            let generated = files.generated.as_ref().expect("admitted");
            let count = settings.diff_nonmember_count.min(generated.len());
            (&settings.diff_with, Some(generated.view().slice(0..count)))
        }
        AttackKind::DiffWithout => (&settings.diff_without, None),
        other => {
            return Err(Failure::config(format!(
                "incremental mode supports diff-w/ and diff-w/o, not {other}"
            )))
        }
    };
    let target = &files.target;
    let pos = target
        .records()
        .iter()
        .position(|r| r.id == record)
        .ok_or_else(|| Failure::config(format!("no record `{record}` in the target probes")))?;
    let range = batch_ranges(target.len(), config.batch_size)?
        .into_iter()
        .find(|r| r.contains(&pos))
        .expect("ranges cover every record");
    let others: Vec<usize> = range.filter(|&i| i != pos).collect();
    let batch = target.select(&others);
    let config = attack_bandwidth(&target.view(), nonmem.as_ref(), config)?;
    let verdict = attack_incremental(&batch.view(), target.view().get(pos), nonmem.as_ref(), &config)?;
    say!(
        "{} {}",
        verdict.id,
        if verdict.predicted_member { "member" } else { "nonmember" }
    );
    Ok(())
}

pub fn eval(run: &Resolved, predictions: &[PathBuf], truth: Option<&Path>) -> Result<(), Failure> {
    let layout = Layout::new(&run.out);
    let truth = match truth {
        Some(path) => load_truth(path)?,
        None if layout.truth().is_file() => load_truth(&layout.truth())?,
        None => load_truth(&layout.probes("target"))?,
    };
    if truth.is_empty() {
        return Err(Failure::upstream("ground truth is empty; probe without --blind or pass --truth"));
    }
    let paths = if predictions.is_empty() {
        let dir = layout.predictions_dir();
        let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Failure::upstream(format!("{}: {e}; run `blindmi attack` first", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        found.sort();
        found
    } else {
        predictions.to_vec()
    };
    if paths.is_empty() {
        return Err(Failure::upstream("no prediction files found; run `blindmi attack` first"));
    }
    let mut reports = Vec::new();
    for path in &paths {
        require(path, "attack")?;
        check_digest(path, &run.digest);
        let preds = load_predictions(path).map_err(|e| Failure::from(e).context(path.display()))?;
        let mut report = compute_metrics(&preds, &truth).map_err(|e| Failure::from(e).context(path.display()))?;
        report.digest = recorded_digest(path).unwrap_or_default();
        say!(
            "{:<16} precision {:.4}  recall {:.4}  f1 {:.4}",
            report.variant, report.precision, report.recall, report.f1
        );
        reports.push(report);
    }
    let path = layout.metrics();
    ensure_parent(&path)?;
    write_metrics(&reports, &path, Some(&run.digest))?;
    say!("wrote {}", path.display());
    Ok(())
}

fn load_truth(path: &Path) -> Result<HashMap<String, bool>, Failure> {
    require(path, "probe")?;
    if path.extension().is_some_and(|x| x == "csv") {
        read_truth(path)
    } else {
        Ok(ground_truth(&load_probe_records(path, None)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Ratio,
    Class,
    All,
}

pub fn sweep(run: &Resolved, kind: SweepKind, plot_data: bool) -> Result<(), Failure> {
    let layout = Layout::new(&run.out);
    let (bench, settings, config) = (&run.config.benchmark, &run.config.attack, &run.config.sweep);
    if matches!(kind, SweepKind::Ratio | SweepKind::All) {
        let rows = ratio_sweep(bench, settings, config)?;
        let path = layout.sweep("ratio");
        ensure_parent(&path)?;
        write_sweep(&rows, "ratio", &path, Some(&run.digest), plot_data)?;
        say!("wrote {} ({} rows)", path.display(), rows.len());
    }
    if matches!(kind, SweepKind::Class | SweepKind::All) {
        let rows = class_sweep(bench, settings, config)?;
        let path = layout.sweep("class");
        ensure_parent(&path)?;
        write_sweep(&rows, "classes", &path, Some(&run.digest), plot_data)?;
        say!("wrote {} ({} rows)", path.display(), rows.len());
    }
    Ok(())
}
