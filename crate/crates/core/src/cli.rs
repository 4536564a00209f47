//! The `s3n` command line: generate, inject, train, score, eval, gradcheck.
//!
//! Option values resolve as command-line flag, then the `--config` JSON file,
//! then the built-in default. Seeds additionally fall back to `S3N_SEED`.
//! The config file is a JSON object keyed by option name in snake case; an
//! object stored under a command's name overrides top-level keys for that
//! command.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Value};

use crate::dataset::{load_dataset, read_scores, write_scores, write_trajectory, DatasetManifest, ManifestEntry};
use crate::diagnostics::{self, Fault, SuiteOptions};
use crate::error::Error;
use crate::eval::{evaluate_scores, evaluate_trajectories, score_dataset, EvalReport};
use crate::game::{simulate, GameConfig};
use crate::inject::{inject, AnomalyType, InjectionConfig};
use crate::model::{EmbeddingModel, ModelConfig};
use crate::trainer::{train, TrainConfig};

pub const EXIT_OK: i32 = 0;
/// A command ran but its check did not pass (gradcheck).
pub const EXIT_FAILED_CHECK: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_CONTRACT: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

pub const SEED_ENV: &str = "S3N_SEED";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e {
                Error::InvalidConfig(_) => EXIT_USAGE,
                Error::Io(_)
                | Error::Json(_)
                | Error::DatasetFormat { .. }
                | Error::Parse { .. }
                | Error::CheckpointFormat(_) => EXIT_IO,
                Error::InvalidShape(_)
                | Error::InvalidBatch(_)
                | Error::InvalidInput(_)
                | Error::EmptyTrajectory { .. }
                | Error::TrainingDiverged { .. }
                | Error::Contract(_) => EXIT_CONTRACT,
            },
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "s3n", version, about = "Frame-embedding anomaly detection for game trajectories")]
pub struct Cli {
    /// JSON file with option values; flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Print a machine-readable JSON result on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate normal-play trajectories into a dataset directory.
    Generate(GenerateArgs),
    /// Copy a dataset, corrupting a fraction of its trajectories.
    Inject(InjectArgs),
    /// Train an embedding model on uncorrupted trajectories.
    Train(TrainArgs),
    /// Score every transition of a dataset with a trained model.
    Score(ScoreArgs),
    /// Summarise scores: UDS, Pr(Δ1 > Δj) and per-type AUC.
    Eval(EvalArgs),
    /// Check every backward pass against finite differences.
    Gradcheck(GradcheckArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Inject(_) => "inject",
            Command::Train(_) => "train",
            Command::Score(_) => "score",
            Command::Eval(_) => "eval",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

/// Copy every unset field of `$flags` from `$file`.
macro_rules! fill_from {
    ($flags:expr, $file:expr; $($field:ident),+ $(,)?) => {
        $( if $flags.$field.is_none() { $flags.$field = $file.$field.take(); } )+
    };
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateArgs {
    /// Frames per trajectory [default: 1000].
    #[arg(long)]
    pub frames: Option<usize>,
    /// Number of trajectories [default: 10].
    #[arg(long)]
    pub trajectories: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Frame height in pixels [default: 64].
    #[arg(long)]
    pub height: Option<usize>,
    /// Frame width in pixels [default: 64].
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub ball_radius: Option<usize>,
    #[arg(long)]
    pub ball_speed: Option<f64>,
    #[arg(long)]
    pub paddle_width: Option<usize>,
    #[arg(long)]
    pub paddle_speed: Option<f64>,
}

fn de_types<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<AnomalyType>>, D::Error> {
    let names: Option<Vec<String>> = Option::deserialize(d)?;
    names
        .map(|v| v.iter().map(|s| s.parse().map_err(serde::de::Error::custom)).collect())
        .transpose()
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectArgs {
    /// Source dataset; it is never modified.
    #[arg(long = "in", value_name = "DIR")]
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Expected events per frame [default: 0.01].
    #[arg(long)]
    pub rate: Option<f64>,
    /// Comma-separated anomaly types [default: all six].
    #[arg(long, value_delimiter = ',')]
    #[serde(deserialize_with = "de_types")]
    pub types: Option<Vec<AnomalyType>>,
    /// Fraction of trajectories to corrupt, rounded to the nearest count
    /// [default: 0.5].
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shortest freeze in frames [default: 2].
    #[arg(long)]
    pub freeze_min: Option<usize>,
    /// Longest freeze in frames [default: 8].
    #[arg(long)]
    pub freeze_max: Option<usize>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Training log CSV [default: checkpoint path with `.train.csv`].
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Embedding dimension [default: 32].
    #[arg(long)]
    pub dim: Option<usize>,
    /// [default: 12]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Pairs per batch [default: 128].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Triplet margin [default: 0.2].
    #[arg(long)]
    pub margin: Option<f64>,
    /// Adam learning rate [default: 0.0005].
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train even if the dataset holds corrupted trajectories.
    #[arg(long)]
    pub allow_corrupted: bool,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreArgs {
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Output CSV.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    /// Score table from `score`; alternative to --model with --data.
    #[arg(long, value_name = "FILE")]
    pub scores: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// UDS residual threshold [default: 0.2].
    #[arg(long)]
    pub margin: Option<f64>,
    /// Directory for report.json and report.csv.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultArg {
    ConvKernel,
    LinearBias,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckArgs {
    /// Probes per check [default: 100].
    #[arg(long)]
    pub probes: Option<usize>,
    /// Largest accepted relative error [default: 1e-4].
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Break one backward pass on purpose (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: Option<FaultArg>,
}

/// Result of a completed command.
#[derive(Debug, Clone, Serialize)]
pub struct CommandResult {
    pub command: String,
    pub exit_code: i32,
    pub summary: String,
    pub details: Value,
}

fn load_config(path: &Path, command: &str) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(Error::from)?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let Value::Object(map) = root else {
        return Err(usage(format!("config {} is not a JSON object", path.display())));
    };
    let mut merged = serde_json::Map::new();
    for (key, value) in &map {
        if !value.is_object() {
            merged.insert(key.clone(), value.clone());
        }
    }
    if let Some(Value::Object(section)) = map.get(command) {
        merged.extend(section.clone());
    }
    Ok(Value::Object(merged))
}

/// Deserialize the config section, ignoring keys meant for other commands.
fn file_args<T: for<'de> Deserialize<'de> + Default>(config: Option<&Value>, known: &[&str]) -> Result<T, CliError> {
    let Some(Value::Object(map)) = config else {
        return Ok(T::default());
    };
    let relevant: serde_json::Map<String, Value> = map
        .iter()
        .filter(|(k, _)| known.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    serde_json::from_value(Value::Object(relevant)).map_err(|e| usage(format!("config: {e}")))
}

fn resolve_seed(seed: Option<u64>) -> Result<u64, CliError> {
    if let Some(seed) = seed {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| usage(format!("missing required option --{flag}")))
}

/// Parse and run one invocation, returning the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let json = cli.json;
    let name = cli.command.name();
    match execute(cli) {
        Ok(result) => {
            if json {
                println!("{}", serde_json::to_string(&result).expect("serializable"));
            } else {
                println!("{}", result.summary);
            }
            result.exit_code
        }
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {e}");
            if json {
                let out = json!({ "command": name, "exit_code": code, "error": e.to_string() });
                println!("{out}");
            }
            code
        }
    }
}

pub fn execute(cli: Cli) -> Result<CommandResult, CliError> {
    let name = cli.command.name();
    let config = cli.config.as_deref().map(|p| load_config(p, name)).transpose()?;
    let config = config.as_ref();
    match cli.command {
        Command::Generate(mut a) => {
            let mut f: GenerateArgs = file_args(
                config,
                &["frames", "trajectories", "seed", "out", "height", "width", "ball_radius", "ball_speed", "paddle_width", "paddle_speed"],
            )?;
            fill_from!(a, f; frames, trajectories, seed, out, height, width, ball_radius, ball_speed, paddle_width, paddle_speed);
            generate(a)
        }
        Command::Inject(mut a) => {
            let mut f: InjectArgs = file_args(
                config,
                &["in", "out", "rate", "types", "fraction", "seed", "freeze_min", "freeze_max"],
            )?;
            fill_from!(a, f; input, out, rate, types, fraction, seed, freeze_min, freeze_max);
            inject_dataset(a)
        }
        Command::Train(mut a) => {
            let mut f: TrainArgs = file_args(
                config,
                &["data", "out", "log", "dim", "epochs", "batch", "margin", "lr", "seed", "allow_corrupted"],
            )?;
            fill_from!(a, f; data, out, log, dim, epochs, batch, margin, lr, seed);
            a.allow_corrupted |= f.allow_corrupted;
            train_model(a)
        }
        Command::Score(mut a) => {
            let mut f: ScoreArgs = file_args(config, &["model", "data", "out"])?;
            fill_from!(a, f; model, data, out);
            score(a)
        }
        Command::Eval(mut a) => {
            let mut f: EvalArgs = file_args(config, &["scores", "model", "data", "margin", "out"])?;
            fill_from!(a, f; scores, model, data, margin, out);
            eval(a)
        }
        Command::Gradcheck(mut a) => {
            let mut f: GradcheckArgs = file_args(config, &["probes", "tolerance", "seed", "inject_fault"])?;
            fill_from!(a, f; probes, tolerance, seed, inject_fault);
            gradcheck(a)
        }
    }
}

fn ok(command: &str, summary: String, details: Value) -> Result<CommandResult, CliError> {
    Ok(CommandResult {
        command: command.into(),
        exit_code: EXIT_OK,
        summary,
        details,
    })
}

fn generate(a: GenerateArgs) -> Result<CommandResult, CliError> {
    let frames = a.frames.unwrap_or(1000);
    let count = a.trajectories.unwrap_or(10);
    if frames < 2 {
        return Err(usage(format!("--frames must be at least 2, got {frames}")));
    }
    if count == 0 {
        return Err(usage("--trajectories must be at least 1"));
    }
    let out = required(a.out, "out")?;
    let seed = resolve_seed(a.seed)?;
    let base = GameConfig::default();
    let game = GameConfig {
        height: a.height.unwrap_or(base.height),
        width: a.width.unwrap_or(base.width),
        ball_radius: a.ball_radius.unwrap_or(base.ball_radius),
        ball_speed: a.ball_speed.unwrap_or(base.ball_speed),
        paddle_width: a.paddle_width.unwrap_or(base.paddle_width),
        paddle_speed: a.paddle_speed.unwrap_or(base.paddle_speed),
        seed,
    };
    game.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = DatasetManifest::new("bounce", game.clone());
    for i in 0..count {
        let traj_seed = rng.next_u64();
        let mut traj = simulate(&GameConfig { seed: traj_seed, ..game.clone() }, frames)?;
        traj.id = format!("traj-{i:04}");
        write_trajectory(&out, &traj, None)?;
        manifest.trajectories.push(ManifestEntry {
            id: traj.id.clone(),
            frames,
            corrupted: false,
            seed: Some(traj_seed),
        });
    }
    manifest.write(&out)?;
    ok(
        "generate",
        format!("wrote {count} trajectories x {frames} frames to {}", out.display()),
        json!({ "out": out, "trajectories": count, "frames": frames, "seed": seed }),
    )
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn inject_dataset(a: InjectArgs) -> Result<CommandResult, CliError> {
    let input = required(a.input, "in")?;
    let out = required(a.out, "out")?;
    if same_dir(&input, &out) {
        return Err(usage("--out must differ from --in; the source dataset is left untouched"));
    }
    let fraction = a.fraction.unwrap_or(0.5);
    if !(0.0..=1.0).contains(&fraction) {
        return Err(usage(format!("--fraction {fraction} outside [0, 1]")));
    }
    let seed = resolve_seed(a.seed)?;
    let defaults = InjectionConfig::default();
    let base = InjectionConfig {
        rate: a.rate.unwrap_or(defaults.rate),
        types: a.types.map(|t| t.into_iter().collect()).unwrap_or(defaults.types),
        freeze_min: a.freeze_min.unwrap_or(defaults.freeze_min),
        freeze_max: a.freeze_max.unwrap_or(defaults.freeze_max),
        seed,
    };
    base.validate()?;

    let (manifest, stored) = load_dataset(&input)?;
    if manifest.has_corrupted() {
        return Err(Error::Contract(format!("{} already holds corrupted trajectories", input.display())).into());
    }
    let total = stored.len();
    let chosen = (fraction * total as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = vec![false; total];
    for i in rand::seq::index::sample(&mut rng, total, chosen) {
        selected[i] = true;
    }

    let mut out_manifest = manifest.clone();
    out_manifest.injection = Some(base.clone());
    out_manifest.trajectories.clear();
    let mut events: std::collections::BTreeMap<AnomalyType, usize> = Default::default();
    let mut warnings = Vec::new();
    for (item, corrupt) in stored.into_iter().zip(selected) {
        let traj_seed = rng.next_u64();
        let mut entry = item.entry.clone();
        if corrupt {
            let injected = inject(&item.trajectory, &InjectionConfig { seed: traj_seed, ..base.clone() })?;
            for e in &injected.events {
                *events.entry(e.kind).or_default() += 1;
            }
            for w in &injected.warnings {
                log::warn!("{}: {w}", entry.id);
                warnings.push(format!("{}: {w}", entry.id));
            }
            write_trajectory(&out, &injected.trajectory, Some(&injected.labels))?;
            entry.corrupted = true;
        } else {
            write_trajectory(&out, &item.trajectory, None)?;
        }
        out_manifest.trajectories.push(entry);
    }
    out_manifest.write(&out)?;
    let placed: usize = events.values().sum();
    ok(
        "inject",
        format!(
            "corrupted {chosen} of {total} trajectories with {placed} events; wrote {}",
            out.display()
        ),
        json!({ "out": out, "corrupted": chosen, "total": total, "events": events, "warnings": warnings }),
    )
}

fn train_model(a: TrainArgs) -> Result<CommandResult, CliError> {
    let data = required(a.data, "data")?;
    let out = required(a.out, "out")?;
    let log_path = a.log.unwrap_or_else(|| out.with_extension("train.csv"));
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        batch_size: a.batch.unwrap_or(defaults.batch_size),
        margin: a.margin.unwrap_or(defaults.margin),
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        embed_dim: a.dim.unwrap_or(defaults.embed_dim),
        seed: resolve_seed(a.seed)?,
    };
    config.validate()?;
    let header = format!(
        "train settings: batch_size={} margin={} learning_rate={} epochs={} embed_dim={} seed={}",
        config.batch_size, config.margin, config.learning_rate, config.epochs, config.embed_dim, config.seed
    );
    log::info!("{header}");

    let (manifest, stored) = load_dataset(&data)?;
    if manifest.has_corrupted() {
        if !a.allow_corrupted {
            return Err(Error::Contract(format!(
                "{} contains corrupted trajectories; training expects normal play only (pass --allow-corrupted to override)",
                data.display()
            ))
            .into());
        }
        log::warn!("training on a dataset that contains corrupted trajectories");
    }
    let model_config = ModelConfig::for_frames(manifest.generator.height, manifest.generator.width, config.embed_dim);
    let model = EmbeddingModel::init(model_config, config.seed)?;
    let frames: usize = stored.iter().map(|s| s.trajectory.len()).sum();
    let (model, log) = train(stored.into_iter().map(|s| s.trajectory), &config, model)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::from)?;
    }
    model.save(&out)?;
    log.save_csv(&log_path)?;
    let final_loss = log.epoch_mean_loss.last().copied().unwrap_or(f64::NAN);
    ok(
        "train",
        format!(
            "{header}\ntrained on {frames} frames for {} steps, final epoch mean loss {final_loss:.4}; checkpoint {}",
            log.steps.len(),
            out.display()
        ),
        json!({
            "checkpoint": out,
            "log": log_path,
            "settings": config,
            "frames": frames,
            "steps": log.steps.len(),
            "epoch_mean_loss": log.epoch_mean_loss,
        }),
    )
}

fn score(a: ScoreArgs) -> Result<CommandResult, CliError> {
    let model_path = required(a.model, "model")?;
    let data = required(a.data, "data")?;
    let out = required(a.out, "out")?;
    let model = EmbeddingModel::<f32>::load(&model_path)?;
    let (_, stored) = load_dataset(&data)?;
    let rows = score_dataset(&model, &stored)?;
    write_scores(&out, &rows)?;
    ok(
        "score",
        format!("scored {} transitions into {}", rows.len(), out.display()),
        json!({ "out": out, "rows": rows.len() }),
    )
}

fn eval(a: EvalArgs) -> Result<CommandResult, CliError> {
    let out = required(a.out, "out")?;
    let margin = a.margin.unwrap_or(TrainConfig::default().margin);
    let report: EvalReport = match (a.scores, a.model, a.data) {
        (Some(scores), None, None) => evaluate_scores(&read_scores(&scores)?, margin)?,
        (None, Some(model), Some(data)) => {
            let model = EmbeddingModel::<f32>::load(&model)?;
            let (_, stored) = load_dataset(&data)?;
            evaluate_trajectories(&model, &stored, margin)?
        }
        _ => return Err(usage("eval takes either --scores, or --model together with --data")),
    };
    fs::create_dir_all(&out).map_err(Error::from)?;
    report.write_json(&out.join(REPORT_JSON))?;
    report.save_csv(&out.join(REPORT_CSV))?;

    let mut lines = vec![format!("UDS {:.4}", report.uds)];
    for (j, p) in &report.rank_sum {
        lines.push(format!("Pr(Δ1 > Δ{j}) {p:.4}"));
    }
    for (kind, v) in &report.auc {
        lines.push(format!("AUC {kind} {v:.4}"));
    }
    lines.extend(report.warnings.iter().map(|w| format!("warning: {w}")));
    ok(
        "eval",
        lines.join("\n"),
        serde_json::to_value(&report).map_err(Error::from)?,
    )
}

fn gradcheck(a: GradcheckArgs) -> Result<CommandResult, CliError> {
    let options = SuiteOptions {
        probes: a.probes.unwrap_or(diagnostics::DEFAULT_PROBES),
        tolerance: a.tolerance.unwrap_or(diagnostics::DEFAULT_TOLERANCE),
        seed: resolve_seed(a.seed)?,
        fault: a.inject_fault.map(|f| match f {
            FaultArg::ConvKernel => Fault::ConvKernel,
            FaultArg::LinearBias => Fault::LinearBias,
        }),
    };
    if options.probes == 0 || !(options.tolerance > 0.0) {
        return Err(usage("--probes must be >= 1 and --tolerance > 0"));
    }
    let report = diagnostics::run_suite(&options)?;
    let mut lines: Vec<String> = report
        .checks
        .iter()
        .map(|c| {
            format!(
                "{:<18} probes={} max_rel_error={:.3e} tolerance={:.0e} {}",
                c.name,
                c.probes,
                c.max_rel_error,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            )
        })
        .collect();
    lines.push(if report.passed { "all checks passed".into() } else { "gradient check FAILED".into() });
    Ok(CommandResult {
        command: "gradcheck".into(),
        exit_code: if report.passed { EXIT_OK } else { EXIT_FAILED_CHECK },
        summary: lines.join("\n"),
        details: serde_json::to_value(&report).map_err(Error::from)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(usage("x").exit_code(), 64);
        assert_eq!(CliError::from(Error::Contract("c".into())).exit_code(), 3);
        assert_eq!(CliError::from(Error::shape("s")).exit_code(), 3);
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(CliError::from(Error::from(io)).exit_code(), 2);
        assert_eq!(CliError::from(Error::InvalidConfig("bad".into())).exit_code(), 64);
    }

    #[test]
    fn config_sections_override_top_level() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 1, "frames": 50, "train": {"seed": 9}}"#).unwrap();
        let train = load_config(&path, "train").unwrap();
        assert_eq!(train["seed"], 9);
        let generate = load_config(&path, "generate").unwrap();
        assert_eq!(generate["seed"], 1);
        let args: GenerateArgs = file_args(Some(&generate), &["frames", "seed"]).unwrap();
        assert_eq!((args.frames, args.seed), (Some(50), Some(1)));
        // keys for other commands are ignored
        let args: ScoreArgs = file_args(Some(&generate), &["model", "data", "out"]).unwrap();
        assert!(args.model.is_none());
    }

    #[test]
    fn config_type_names_are_parsed() {
        let v = json!({ "types": ["flicker", "freeze-skip"] });
        let args: InjectArgs = file_args(Some(&v), &["types"]).unwrap();
        assert_eq!(args.types.unwrap(), vec![AnomalyType::Flicker, AnomalyType::FreezeSkip]);
        let v = json!({ "types": ["wobble"] });
        assert!(matches!(file_args::<InjectArgs>(Some(&v), &["types"]), Err(CliError::Usage(_))));
    }
}
