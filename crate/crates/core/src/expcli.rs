//! Command-line front end: config resolution, dispatch and artifact output.
//!
//! Every JSON artifact carries a `provenance` block holding the fully resolved
//! [`ExperimentConfig`]. Passing that file back through `--config` reruns the
//! same experiment. CSV files use LF line endings and 17 significant digits.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::adapters::{format_f64, param_count, AdapterKind};
use crate::attnbench::{run_benchmark, BenchConfig};
use crate::error::LabError;
use crate::invariance::run_invariance_batch;
use crate::scalinglab::{estimate_gamma, run_width_sweep, SweepConfig, SweepMethod};
use crate::toydyn::{train_toy, ToyConfig, ToyMethod};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Toy,
    Sweep,
    Invariance,
    Attn,
    Params,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvarianceConfig {
    /// Number of square checks and, separately, of truncated checks.
    pub trials: u64,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self { trials: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamsConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
}

impl Default for ParamsConfig {
    fn default() -> Self {
        Self {
            d_in: 128,
            d_out: 128,
            rank: 8,
        }
    }
}

/// The resolved configuration of one run. Exactly one section is present,
/// matching `command`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: CommandKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invariance: Option<InvarianceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attn: Option<BenchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamsConfig>,
}

impl ExperimentConfig {
    pub fn new(command: CommandKind, seed: u64) -> Self {
        let mut c = Self {
            command,
            seed,
            toy: None,
            sweep: None,
            invariance: None,
            attn: None,
            params: None,
        };
        match command {
            CommandKind::Toy => c.toy = Some(ToyConfig::default()),
            CommandKind::Sweep => c.sweep = Some(SweepConfig::default()),
            CommandKind::Invariance => c.invariance = Some(InvarianceConfig::default()),
            CommandKind::Attn => c.attn = Some(BenchConfig::default()),
            CommandKind::Params => c.params = Some(ParamsConfig::default()),
        }
        c
    }

    fn check_sections(&self) -> Result<(), UsageError> {
        let present = [
            (CommandKind::Toy, self.toy.is_some()),
            (CommandKind::Sweep, self.sweep.is_some()),
            (CommandKind::Invariance, self.invariance.is_some()),
            (CommandKind::Attn, self.attn.is_some()),
            (CommandKind::Params, self.params.is_some()),
        ];
        for (kind, here) in present {
            if here && kind != self.command {
                return Err(UsageError(format!(
                    "config section {} does not belong to command {}",
                    command_name(kind),
                    command_name(self.command)
                )));
            }
        }
        Ok(())
    }

    /// Module-level validation; messages name the offending key.
    pub fn validate(&self) -> Result<(), UsageError> {
        self.check_sections()?;
        let res = match self.command {
            CommandKind::Toy => self.toy.as_ref().map_or(Ok(()), |c| c.validate()),
            CommandKind::Sweep => self.sweep.as_ref().map_or(Ok(()), |c| c.validate()),
            CommandKind::Attn => self.attn.as_ref().map_or(Ok(()), |c| {
                c.validate()?;
                c.check_parity().map(|_| ())
            }),
            CommandKind::Params => self.params.as_ref().map_or(Ok(()), |c| {
                if c.rank == 0 || c.d_in == 0 || c.d_out == 0 {
                    Err(LabError::InvalidArgument(
                        "d_in, d_out and rank must be positive".into(),
                    ))
                } else {
                    Ok(())
                }
            }),
            CommandKind::Invariance => Ok(()),
        };
        res.map_err(|e| UsageError(e.to_string()))
    }
}

fn command_name(kind: CommandKind) -> &'static str {
    match kind {
        CommandKind::Toy => "toy",
        CommandKind::Sweep => "sweep",
        CommandKind::Invariance => "invariance",
        CommandKind::Attn => "attn",
        CommandKind::Params => "params",
    }
}

/// A configuration problem; maps to exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "usage error: {}", self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(
    name = "singlora-lab",
    version,
    about = "LoRA and SingLoRA numerical experiments"
)]
pub struct Cli {
    /// Master seed (default 0, or the value from --config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "results")]
    pub out: PathBuf,
    /// JSON config file; either a bare config or a previous run's output.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Omit the generation timestamp from JSON outputs.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rank-1 toy model trajectory.
    Toy(ToyArgs),
    /// Width sweep with fitted scaling exponents.
    Sweep(SweepArgs),
    /// Batch of transformation-invariance checks.
    Invariance(InvarianceArgs),
    /// Attention-score benchmark, LoRA against SingLoRA.
    Attn(AttnArgs),
    /// Trainable parameter counts.
    Params(ParamsArgs),
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum MethodArg {
    Lora,
    Singlora,
    LoraPlus,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub eta_b_ratio: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub ramp_threshold: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Comma-separated, strictly increasing.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long, allow_negative_numbers = true)]
    pub c: Option<f64>,
    #[arg(long)]
    pub eta0: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seeds_per_width: Option<usize>,
    #[arg(long)]
    pub lr_ratio: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr_ratio_exponent: Option<f64>,
    #[arg(long)]
    pub ramp_threshold: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InvarianceArgs {
    #[arg(long)]
    pub trials: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub lora_rank: Option<usize>,
    #[arg(long)]
    pub singlora_rank: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub iters: Option<u64>,
    /// Ramp threshold T; 0 disables the ramp.
    #[arg(long, conflicts_with = "no_ramp")]
    pub ramp_threshold: Option<u64>,
    /// Same as `--ramp-threshold 0`.
    #[arg(long)]
    pub no_ramp: bool,
    #[arg(long)]
    pub log_stride: Option<u64>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub d_in: Option<usize>,
    #[arg(long)]
    pub d_out: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn toy_method(m: MethodArg) -> Result<ToyMethod, UsageError> {
    match m {
        MethodArg::Lora => Ok(ToyMethod::Lora),
        MethodArg::Singlora => Ok(ToyMethod::Singlora),
        MethodArg::LoraPlus => Err(UsageError(
            "method lora-plus is only available for sweep; use toy --eta-b-ratio instead".into(),
        )),
    }
}

fn sweep_method(m: MethodArg) -> SweepMethod {
    match m {
        MethodArg::Lora => SweepMethod::Lora,
        MethodArg::Singlora => SweepMethod::Singlora,
        MethodArg::LoraPlus => SweepMethod::LoraPlus,
    }
}

/// Reads a config file. A document with a top-level `provenance` key (any
/// JSON artifact written by this tool) is unwrapped first.
pub fn load_config_file(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
    if let Some(p) = value.get_mut("provenance") {
        value = p.take();
    }
    let cfg: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
    Ok(cfg)
}

/// Merges defaults, the optional config file and command-line flags.
pub fn resolve_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let kind = match &cli.command {
        Command::Toy(_) => CommandKind::Toy,
        Command::Sweep(_) => CommandKind::Sweep,
        Command::Invariance(_) => CommandKind::Invariance,
        Command::Attn(_) => CommandKind::Attn,
        Command::Params(_) => CommandKind::Params,
    };
    let mut cfg = match &cli.config {
        Some(path) => {
            let file = load_config_file(path)?;
            if file.command != kind {
                return Err(UsageError(format!(
                    "config file is for command {}, not {}",
                    command_name(file.command),
                    command_name(kind)
                ))
                .into());
            }
            file.check_sections()?;
            let mut c = ExperimentConfig::new(kind, file.seed);
            c.toy = file.toy.or(c.toy);
            c.sweep = file.sweep.or(c.sweep);
            c.invariance = file.invariance.or(c.invariance);
            c.attn = file.attn.or(c.attn);
            c.params = file.params.or(c.params);
            c
        }
        None => ExperimentConfig::new(kind, 0),
    };
    set(&mut cfg.seed, cli.seed);

    match &cli.command {
        Command::Toy(a) => {
            let c = cfg.toy.get_or_insert_with(ToyConfig::default);
            if let Some(m) = a.method {
                c.method = toy_method(m)?;
            }
            set(&mut c.n, a.n);
            set(&mut c.eta, a.eta);
            set(&mut c.eta_b_ratio, a.eta_b_ratio);
            set(&mut c.steps, a.steps);
            if a.ramp_threshold.is_some() {
                c.ramp_threshold = a.ramp_threshold;
            }
        }
        Command::Sweep(a) => {
            let c = cfg.sweep.get_or_insert_with(SweepConfig::default);
            set(&mut c.method, a.method.map(sweep_method));
            set(&mut c.widths, a.widths.clone());
            set(&mut c.c, a.c);
            set(&mut c.eta0, a.eta0);
            set(&mut c.steps, a.steps);
            set(&mut c.seeds_per_width, a.seeds_per_width);
            set(&mut c.lr_ratio, a.lr_ratio);
            set(&mut c.lr_ratio_exponent, a.lr_ratio_exponent);
            if a.ramp_threshold.is_some() {
                c.ramp_threshold = a.ramp_threshold;
            }
        }
        Command::Invariance(a) => {
            let c = cfg.invariance.get_or_insert_with(InvarianceConfig::default);
            set(&mut c.trials, a.trials);
        }
        Command::Attn(a) => {
            let c = cfg.attn.get_or_insert_with(BenchConfig::default);
            set(&mut c.seq_len, a.seq_len);
            set(&mut c.dim, a.dim);
            set(&mut c.lora_rank, a.lora_rank);
            set(&mut c.singlora_rank, a.singlora_rank);
            set(&mut c.lr, a.lr);
            set(&mut c.iters, a.iters);
            set(&mut c.log_stride, a.log_stride);
            set(&mut c.seeds, a.seeds);
            set(&mut c.optimizer.weight_decay, a.weight_decay);
            if a.no_ramp {
                c.ramp_threshold = Some(0);
            } else if a.ramp_threshold.is_some() {
                c.ramp_threshold = a.ramp_threshold;
            }
        }
        Command::Params(a) => {
            let c = cfg.params.get_or_insert_with(ParamsConfig::default);
            set(&mut c.d_in, a.d_in);
            set(&mut c.d_out, a.d_out);
            set(&mut c.rank, a.rank);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// An artifact to be written into the output directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub exit_code: i32,
    pub artifacts: Vec<Artifact>,
}

fn csv_bytes(
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| anyhow!("csv buffer: {e}"))
}

fn json_artifact(
    name: &str,
    cfg: &ExperimentConfig,
    timestamp: bool,
    result: Value,
) -> anyhow::Result<Artifact> {
    let mut doc = serde_json::Map::new();
    doc.insert("provenance".into(), serde_json::to_value(cfg)?);
    if timestamp {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        doc.insert("generated_unix_seconds".into(), json!(secs));
    }
    doc.insert("result".into(), result);
    let mut bytes = serde_json::to_vec_pretty(&Value::Object(doc))?;
    bytes.push(b'\n');
    Ok(Artifact {
        name: name.into(),
        bytes,
    })
}

fn divergence_json(err: &LabError) -> Value {
    match err {
        LabError::Diverged { step, detail } => json!({ "step": step, "detail": detail }),
        other => json!({ "detail": other.to_string() }),
    }
}

/// Runs a resolved experiment and returns the files it produces.
pub fn execute(cfg: &ExperimentConfig, timestamp: bool) -> anyhow::Result<RunOutput> {
    cfg.validate()?;
    let seed = cfg.seed;
    let mut artifacts = Vec::new();
    let mut exit_code = EXIT_OK;
    match cfg.command {
        CommandKind::Toy => {
            let tc = cfg.toy.clone().unwrap_or_default();
            match train_toy(&tc, seed) {
                Ok(records) => {
                    let rows = records.iter().flat_map(|r| {
                        r.quantities().into_iter().map(move |(q, v)| {
                            vec![r.step.to_string(), q.to_string(), format_f64(v)]
                        })
                    });
                    artifacts.push(Artifact {
                        name: "toy_trajectory.csv".into(),
                        bytes: csv_bytes(&["step", "quantity", "value"], rows)?,
                    });
                    let last = records.last().map(|r| {
                        r.quantities()
                            .into_iter()
                            .map(|(q, v)| (q.to_string(), v))
                            .collect::<BTreeMap<_, _>>()
                    });
                    let result = json!({ "steps_recorded": records.len(), "final": last });
                    artifacts.push(json_artifact("toy_summary.json", cfg, timestamp, result)?);
                }
                Err(e @ LabError::Diverged { .. }) => {
                    exit_code = EXIT_DIVERGED;
                    let result = json!({ "divergence": divergence_json(&e) });
                    artifacts.push(json_artifact("toy_summary.json", cfg, timestamp, result)?);
                }
                Err(e) => return Err(e.into()),
            }
        }
        CommandKind::Sweep => {
            let sc = cfg.sweep.clone().unwrap_or_default();
            let report = run_width_sweep(&sc, seed)?;
            let method = sc.method.as_str();
            let c = format_f64(sc.c);
            let rows = report.cells.iter().flat_map(|cell| {
                let c = c.clone();
                cell.values.iter().map(move |(q, v)| {
                    vec![
                        method.to_string(),
                        c.clone(),
                        cell.width.to_string(),
                        cell.seed.to_string(),
                        q.clone(),
                        format_f64(*v),
                    ]
                })
            });
            artifacts.push(Artifact {
                name: "sweep_cells.csv".into(),
                bytes: csv_bytes(&["method", "c", "width", "seed", "quantity", "value"], rows)?,
            });
            let mut gammas = serde_json::Map::new();
            for q in report.quantities() {
                let entry = match estimate_gamma(&report, &q) {
                    Ok(g) => {
                        json!({ "slope": g.slope, "stderr": g.stderr, "r_squared": g.r_squared })
                    }
                    Err(e) => json!({ "error": e.to_string() }),
                };
                gammas.insert(q, entry);
            }
            let diverged: Vec<Value> = report
                .diverged_cells()
                .map(|c| json!({ "width": c.width, "seed": c.seed, "detail": c.diverged }))
                .collect();
            let result = json!({ "gamma": gammas, "diverged_cells": diverged });
            artifacts.push(json_artifact("sweep_summary.json", cfg, timestamp, result)?);
        }
        CommandKind::Invariance => {
            let ic = cfg.invariance.clone().unwrap_or_default();
            let records = run_invariance_batch(seed, ic.trials)?;
            let all_passed = records.iter().all(|r| r.passed);
            let result = json!({ "all_passed": all_passed, "records": records });
            artifacts.push(json_artifact(
                "invariance_report.json",
                cfg,
                timestamp,
                result,
            )?);
        }
        CommandKind::Attn => {
            let bc = cfg.attn.clone().unwrap_or_default();
            match run_benchmark(&bc, seed) {
                Ok(report) => {
                    let rows = report.curves.iter().flat_map(|c| {
                        c.losses.iter().map(move |p| {
                            vec![
                                c.method.to_string(),
                                c.seed.to_string(),
                                p.step.to_string(),
                                format_f64(p.loss),
                                format_f64(p.relative_loss),
                            ]
                        })
                    });
                    artifacts.push(Artifact {
                        name: "attn_curves.csv".into(),
                        bytes: csv_bytes(
                            &["method", "seed", "step", "loss", "relative_loss"],
                            rows,
                        )?,
                    });
                    let finals: Vec<Value> = report
                        .curves
                        .iter()
                        .map(|c| {
                            json!({
                                "method": c.method.to_string(),
                                "seed": c.seed,
                                "final_loss": c.final_loss,
                                "final_relative_loss": c.final_relative_loss,
                            })
                        })
                        .collect();
                    let result = json!({ "summary": report.summary, "finals": finals });
                    artifacts.push(json_artifact("attn_summary.json", cfg, timestamp, result)?);
                }
                Err(e @ LabError::Diverged { .. }) => {
                    exit_code = EXIT_DIVERGED;
                    let result = json!({ "divergence": divergence_json(&e) });
                    artifacts.push(json_artifact("attn_summary.json", cfg, timestamp, result)?);
                }
                Err(e) => return Err(e.into()),
            }
        }
        CommandKind::Params => {
            let pc = cfg.params.clone().unwrap_or_default();
            let lora = param_count(AdapterKind::Lora, pc.d_in, pc.d_out, pc.rank);
            let sing = param_count(AdapterKind::Singlora, pc.d_in, pc.d_out, pc.rank);
            let large = pc.d_in.max(pc.d_out);
            let parity_rank = (lora % large == 0).then(|| lora / large);
            let result = json!({
                "lora": lora,
                "singlora": sing,
                "ratio_singlora_to_lora": sing as f64 / lora as f64,
                "singlora_rank_matching_lora": parity_rank,
            });
            artifacts.push(json_artifact("params.json", cfg, timestamp, result)?);
        }
    }
    Ok(RunOutput {
        exit_code,
        artifacts,
    })
}

/// Writes each artifact through a temporary file in `dir` and renames it into place.
pub fn write_artifacts(dir: &Path, artifacts: &[Artifact]) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let mut written = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        let target = dir.join(&a.name);
        let mut tmp = tempfile::NamedTempFile::new_in(dir)
            .with_context(|| format!("creating temporary file in {}", dir.display()))?;
        tmp.write_all(&a.bytes)
            .and_then(|_| tmp.as_file().sync_all())
            .with_context(|| format!("writing {}", target.display()))?;
        tmp.persist(&target)
            .map_err(|e| e.error)
            .with_context(|| format!("renaming into {}", target.display()))?;
        written.push(target);
    }
    Ok(written)
}

/// Exit status for an error chain.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return EXIT_IO;
    }
    match err.downcast_ref::<LabError>() {
        Some(LabError::InvalidArgument(_)) => EXIT_USAGE,
        Some(LabError::Diverged { .. }) => EXIT_DIVERGED,
        Some(LabError::Io(_)) => EXIT_IO,
        Some(LabError::Serde(_)) | None => 1,
    }
}

/// Parses `args`, runs, writes outputs and returns the process exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = resolve_config(&cli).and_then(|cfg| {
        let out = execute(&cfg, !cli.no_timestamp)?;
        let paths = write_artifacts(&cli.out, &out.artifacts)?;
        Ok((out.exit_code, paths))
    });
    match result {
        Ok((code, paths)) => {
            for p in paths {
                println!("{}", p.display());
            }
            if code == EXIT_DIVERGED {
                eprintln!("run diverged; see the summary JSON for details");
            }
            code
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code_for(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> anyhow::Result<ExperimentConfig> {
        let cli = Cli::try_parse_from(std::iter::once("singlora-lab").chain(args.iter().copied()))?;
        resolve_config(&cli)
    }

    #[test]
    fn attn_flags_fill_defaults() {
        let c = parse(&["attn", "--seed", "7", "--iters", "100"]).unwrap();
        assert_eq!(c.seed, 7);
        let a = c.attn.unwrap();
        assert_eq!(a.iters, 100);
        assert_eq!(
            a,
            BenchConfig {
                iters: 100,
                ..BenchConfig::default()
            }
        );
    }

    #[test]
    fn negative_exponent_is_accepted() {
        let c = parse(&["sweep", "--method", "lora", "--c", "-1"]).unwrap();
        assert_eq!(c.sweep.unwrap().c, -1.0);
    }

    #[test]
    fn bad_number_is_a_usage_error_naming_the_key() {
        let err = Cli::try_parse_from(["singlora-lab", "sweep", "--c", "abc"]).unwrap_err();
        assert!(err.use_stderr());
        assert!(err.to_string().contains("--c"));
    }

    #[test]
    fn constraint_violation_is_usage() {
        let err = parse(&["toy", "--n", "0"]).unwrap_err();
        assert_eq!(exit_code_for(&err), EXIT_USAGE);
        assert!(err.to_string().contains('n'));
        let err = parse(&["attn", "--singlora-rank", "8"]).unwrap_err();
        assert_eq!(exit_code_for(&err), EXIT_USAGE);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let bad = r#"{"command":"toy","seed":1,"toy":{"n":8,"bogus":1}}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(bad).is_err());
        let bad = r#"{"command":"toy","extra":true}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(bad).is_err());
    }

    #[test]
    fn foreign_section_is_rejected() {
        let mut c = ExperimentConfig::new(CommandKind::Toy, 0);
        c.attn = Some(BenchConfig::default());
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = parse(&["sweep", "--widths", "64,128,256", "--eta0", "0.05"]).unwrap();
        let back: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn toy_zero_steps_has_header_only() {
        let c = parse(&["toy", "--method", "singlora", "--steps", "0"]).unwrap();
        let out = execute(&c, false).unwrap();
        assert_eq!(out.exit_code, EXIT_OK);
        assert_eq!(out.artifacts[0].bytes, b"step,quantity,value\n");
    }

    #[test]
    fn csv_uses_lf_and_lossless_floats() {
        let b = csv_bytes(&["x"], [vec![format_f64(0.1)]]).unwrap();
        let s = String::from_utf8(b).unwrap();
        assert!(!s.contains('\r'));
        let v: f64 = s.lines().nth(1).unwrap().parse().unwrap();
        assert_eq!(v, 0.1);
    }

    #[test]
    fn timestamp_is_optional() {
        let c = ExperimentConfig::new(CommandKind::Params, 0);
        let with = execute(&c, true).unwrap();
        let without = execute(&c, false).unwrap();
        let s = String::from_utf8(with.artifacts[0].bytes.clone()).unwrap();
        assert!(s.contains("generated_unix_seconds"));
        let s = String::from_utf8(without.artifacts[0].bytes.clone()).unwrap();
        assert!(!s.contains("generated_unix_seconds"));
    }
}
