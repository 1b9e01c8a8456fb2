//! Run configuration: one TOML file plus `--set key=value` overrides,
//! resolved into a single struct whose digest tags every output file.

use std::path::{Path, PathBuf};

use blindmi_core::harness::{AttackKind, AttackSettings, BenchmarkSpec, Generation};
use blindmi_core::eval::SweepConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::Failure;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "BLINDMI_OUT";
pub const DEFAULT_OUT: &str = "blindmi-out";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Shorthand that seeds data, training and the shadow classifier.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub benchmark: BenchmarkSpec,
    pub attack: AttackSettings,
    /// Attacks run by `attack` when none are named on the command line.
    pub attacks: Vec<AttackKind>,
    pub sweep: SweepConfig,
    /// Not part of the digest: the same experiment may be written anywhere.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
}

/// Config after overrides, with its digest.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub digest: String,
    pub out: PathBuf,
}

pub fn default_attacks() -> Vec<AttackKind> {
    vec![
        AttackKind::DiffWith,
        AttackKind::DiffWithout,
        AttackKind::OneClass,
        AttackKind::Top1Threshold,
    ]
}

/// Reads `path` (or starts from defaults), applies `--set` overrides and the
/// seed shorthand, validates everything and computes the digest.
pub fn resolve(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<Resolved, Failure> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::config(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Failure::config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    let mut config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::config(format!("invalid config: {}", e.message())))?;
    if seed.is_some() {
        config.seed = seed;
    }
    if let Some(s) = config.seed {
        config.benchmark.synthetic.seed = s;
        config.benchmark.train.seed = s;
        config.attack.nn_seed = s;
    }
    if config.attacks.is_empty() {
        config.attacks = default_attacks();
    }
    validate(&config)?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| config.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let digest = digest(&config);
    Ok(Resolved { config, digest, out })
}

/// First 16 hex digits of the SHA-256 of the canonical JSON form.
pub fn digest(config: &RunConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    hex::encode(&Sha256::digest(json.as_bytes())[..8])
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// bare string.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), Failure> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("override `{item}` is not KEY=VALUE")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::config(format!("override key `{key}` is malformed")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Failure::config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn validate(config: &RunConfig) -> Result<(), Failure> {
    let bench = &config.benchmark;
    bench.synthetic.validate().map_err(Failure::from)?;
    let lr = bench.train.learning_rate;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Failure::config(format!("train.learning_rate must be > 0, got {lr}")));
    }
    if let Generation::Perturbed { variance } = bench.generation {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Failure::config(format!("generation variance must be > 0, got {variance}")));
        }
    }
    if bench.generated_count == 0 {
        return Err(Failure::config("benchmark.generated_count must be positive"));
    }
    let settings = &config.attack;
    for cfg in [&settings.diff_with, &settings.diff_without, &settings.one_class] {
        cfg.validate().map_err(Failure::from)?;
    }
    if settings.diff_nonmember_count < 2 {
        return Err(Failure::config("attack.diff_nonmember_count must be >= 2"));
    }
    if !(0.0..=100.0).contains(&settings.percentile) {
        return Err(Failure::config(format!(
            "attack.percentile must lie in [0, 100], got {}",
            settings.percentile
        )));
    }
    config.sweep.validate().map_err(Failure::from)
}
