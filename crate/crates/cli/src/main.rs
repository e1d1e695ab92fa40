//! `fedat`: run federated adversarial training experiments from a TOML config.
//!
//! Failures print one JSON object on stderr, e.g.
//! `{"error":"config","message":"...","path":"exp.toml"}`, and exit with 2 for
//! invalid input (bad flags, config or arguments) or 1 for runtime failures.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedat::checkpoint::{atomic_write, Checkpoint};
use fedat::config::ExperimentConfig;
use fedat::interpolation::{default_grid, loss_sweep, sweep_csv};
use fedat::metrics::{read_metrics, summary_csv};
use fedat::nn::ModelSpec;
use fedat::orchestrator::{run_experiment, Experiment, METRICS_FILE};
use fedat::svcca::{layer_activations, svcca_score, DEFAULT_VARIANCE_KEEP};
use fedat::Error;

#[derive(Parser)]
#[command(
    name = "fedat",
    version,
    about = "Deterministic federated adversarial training simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.jsonl, summary.csv, config.toml and final.ckpt.
    Run(RunArgs),
    /// Run one experiment per value of a config key and write comparison.csv.
    Sweep(SweepArgs),
    /// Tabulate natural and adversarial loss along the line between two checkpoints.
    Interpolate(InterpolateArgs),
    /// Per-layer SVCCA similarity between two checkpoints on probe inputs.
    Svcca(SvccaArgs),
    /// Print the summary table of a finished run.
    Report(ReportArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config value, e.g. `--set schedule.e0=50` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; shorthand for `--set run.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ExperimentArgs {
    fn overrides(&self) -> Vec<String> {
        let mut all = self.overrides.clone();
        if let Some(seed) = self.seed {
            all.push(format!("run.seed={seed}"));
        }
        all
    }

    fn load(&self, extra: &[String]) -> Result<ExperimentConfig, CliError> {
        if !self.config.is_file() {
            return Err(CliError::usage(
                "config",
                format!("config file not found: {}", self.config.display()),
            )
            .with_path(&self.config));
        }
        let mut overrides = self.overrides();
        overrides.extend_from_slice(extra);
        ExperimentConfig::load(&self.config, &overrides)
            .map_err(|e| CliError::from(e).with_path(&self.config))
    }
}

#[derive(Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long, short, env = "FEDAT_OUT", default_value = "fedat-out")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Worker threads for client training (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    workers: Option<usize>,
    /// Dotted config key to vary, e.g. `schedule.fixed_e`.
    #[arg(long)]
    axis: String,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',', num_args = 0.., allow_hyphen_values = true)]
    values: Vec<String>,
}

#[derive(Args)]
struct InterpolateArgs {
    /// Checkpoint at w = 0.
    ckpt_a: PathBuf,
    /// Checkpoint at w = 1.
    ckpt_b: PathBuf,
    /// Config whose training set and attack are used.
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Grid as `LO:HI:STEP` (default −0.2:1.2:0.05).
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
    /// Skip the adversarial loss column.
    #[arg(long)]
    natural_only: bool,
}

#[derive(Args)]
struct SvccaArgs {
    ckpt_a: PathBuf,
    ckpt_b: PathBuf,
    /// Probe inputs as CSV (a `label` column, if present, is ignored).
    #[arg(long)]
    probe: PathBuf,
    /// Min-max rescale probe features into [0, 1].
    #[arg(long)]
    rescale: bool,
    /// Comma-separated layer indices (default: all).
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_VARIANCE_KEEP)]
    variance_keep: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory or metrics.jsonl file.
    run: PathBuf,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    kind: &'static str,
    message: String,
    path: Option<PathBuf>,
}

impl CliError {
    fn usage(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind,
            message: message.into(),
            path: None,
        }
    }

    fn with_path(mut self, path: &Path) -> Self {
        self.path.get_or_insert_with(|| path.to_path_buf());
        self
    }

    fn to_json(&self) -> String {
        let mut record = serde_json::json!({ "error": self.kind, "message": self.message });
        if let Some(p) = &self.path {
            record["path"] = p.display().to_string().into();
        }
        record.to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::InvalidConfig(_) => (2, "config"),
            Error::InvalidSpec(_) | Error::InvalidArgument(_) | Error::InvalidPartition(_) => {
                (2, "invalid")
            }
            Error::Io { .. } => (1, "io"),
            Error::Checkpoint(_) => (1, "checkpoint"),
            _ => (1, "runtime"),
        };
        let path = match &e {
            Error::Io { path, .. } => Some(path.clone()),
            _ => None,
        };
        Self {
            code,
            kind,
            message: e.to_string(),
            path,
        }
    }
}

fn workers(requested: Option<usize>) -> usize {
    requested
        .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
        .unwrap_or(1)
        .max(1)
}

fn write_output(path: &Path, text: &str) -> Result<(), CliError> {
    atomic_write(path, text.as_bytes()).map_err(CliError::from)
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let config = args.experiment.load(&[])?;
    let outcome = run_experiment(config, &args.out.out, workers(args.workers))?;
    if let Some(last) = outcome.reports.last() {
        eprintln!(
            "finished {} rounds: nat_acc {} adv_acc {} -> {}",
            outcome.reports.len(),
            fmt_opt(last.nat_acc),
            fmt_opt(last.adv_acc),
            args.out.out.display()
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Directory name for one sweep value.
fn sweep_dir(axis: &str, value: &str) -> String {
    let clean: String = value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{axis}={clean}")
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    if args.axis.trim().is_empty() {
        return Err(CliError::usage("invalid", "--axis must name a config key"));
    }
    let values: Vec<String> = args
        .values
        .iter()
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(CliError::usage(
            "invalid",
            "--values must list at least one value",
        ));
    }
    // Check the base config before any compute.
    args.experiment.load(&[])?;

    let workers = workers(args.workers);
    let mut table = String::from("value,status,nat_acc,adv_acc,mean_loss\n");
    let mut failures = 0;
    for value in &values {
        let dir = args.out.out.join(sweep_dir(&args.axis, value));
        let result = args
            .experiment
            .load(&[format!("{}={value}", args.axis)])
            .and_then(|cfg| run_experiment(cfg, &dir, workers).map_err(CliError::from));
        match result {
            Ok(outcome) => {
                let last = outcome.reports.last();
                let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                let _ = writeln!(
                    table,
                    "{value},ok,{},{},{}",
                    cell(last.and_then(|r| r.nat_acc)),
                    cell(last.and_then(|r| r.adv_acc)),
                    cell(last.map(|r| r.mean_loss))
                );
            }
            Err(e) => {
                failures += 1;
                eprintln!("{}", e.to_json());
                let _ = writeln!(table, "{value},failed,,,");
            }
        }
    }
    write_output(&args.out.out.join("comparison.csv"), &table)?;
    if failures > 0 {
        return Err(CliError {
            code: 1,
            kind: "sweep",
            message: format!("{failures} of {} runs failed", values.len()),
            path: Some(args.out.out.join("comparison.csv")),
        });
    }
    Ok(())
}

fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    let bad = || {
        CliError::usage(
            "invalid",
            format!("grid {text:?} is not LO:HI:STEP with LO <= HI and STEP > 0"),
        )
    };
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let [lo, hi, step] = parts[..] else {
        return Err(bad());
    };
    if !(lo.is_finite() && hi.is_finite() && step > 0.0 && lo <= hi) {
        return Err(bad());
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| lo + i as f64 * step).collect())
}

fn same_architecture(a: &ModelSpec, b: &ModelSpec) -> bool {
    a.layer_sizes() == b.layer_sizes() && a.activation() == b.activation()
}

fn read_pair(a: &Path, b: &Path) -> Result<(Checkpoint, Checkpoint), CliError> {
    let read = |p: &Path| Checkpoint::read(p).map_err(|e| CliError::from(e).with_path(p));
    let (ca, cb) = (read(a)?, read(b)?);
    if !same_architecture(&ca.spec, &cb.spec) {
        return Err(CliError::usage(
            "checkpoint",
            format!(
                "checkpoints have different architectures: {:?} vs {:?}",
                ca.spec.layer_sizes(),
                cb.spec.layer_sizes()
            ),
        ));
    }
    Ok((ca, cb))
}

fn cmd_interpolate(args: InterpolateArgs) -> Result<(), CliError> {
    let config = args.experiment.load(&[])?;
    let grid = match &args.grid {
        Some(text) => parse_grid(text)?,
        None => default_grid(),
    };
    let (a, b) = read_pair(&args.ckpt_a, &args.ckpt_b)?;
    let seed = config.run.seed;
    let exp = Experiment::new(config)?;
    if !same_architecture(&exp.spec, &a.spec) {
        return Err(CliError::usage(
            "checkpoint",
            format!(
                "checkpoint architecture {:?} does not fit the config's data (expects {:?})",
                a.spec.layer_sizes(),
                exp.spec.layer_sizes()
            ),
        ));
    }
    let attack = (!args.natural_only).then_some(&exp.config.attack);
    let rows = loss_sweep(
        &a.values,
        &b.values,
        &a.spec,
        exp.train.as_batch(),
        attack,
        &grid,
        seed,
    )?;
    write_output(&args.out.out.join("interpolation.csv"), &sweep_csv(&rows))
}

fn cmd_svcca(args: SvccaArgs) -> Result<(), CliError> {
    let (a, b) = read_pair(&args.ckpt_a, &args.ckpt_b)?;
    let probe = fedat::data::load_probe_csv(&args.probe, args.rescale)
        .map_err(|e| CliError::from(e).with_path(&args.probe))?;
    if probe.cols() != a.spec.input_dim() {
        return Err(CliError::usage(
            "invalid",
            format!(
                "probe has {} features, the model expects {}",
                probe.cols(),
                a.spec.input_dim()
            ),
        )
        .with_path(&args.probe));
    }
    let layers: Vec<usize> = if args.layers.is_empty() {
        (0..a.spec.num_layers()).collect()
    } else {
        args.layers.clone()
    };
    let mut table = String::from("layer,score,kept_a,kept_b,degenerate\n");
    for layer in layers {
        let acts_a = layer_activations(&a.values, &a.spec, &probe, layer)?;
        let acts_b = layer_activations(&b.values, &b.spec, &probe, layer)?;
        let r = svcca_score(&acts_a, &acts_b, args.variance_keep)?;
        let _ = writeln!(
            table,
            "{layer},{},{},{},{}",
            r.score, r.kept_a, r.kept_b, r.degenerate
        );
    }
    write_output(&args.out.out.join("svcca.csv"), &table)
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let path = if args.run.is_dir() {
        args.run.join(METRICS_FILE)
    } else {
        args.run.clone()
    };
    let records = read_metrics(&path).map_err(|e| CliError::from(e).with_path(&path))?;
    print!("{}", summary_csv(&records));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::Svcca(a) => cmd_svcca(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("-0.2:1.2:0.05").unwrap();
        assert_eq!(g.len(), 29);
        assert_eq!(g[0], -0.2);
        assert!((g[28] - 1.2).abs() < 1e-12);
        assert_eq!(parse_grid("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }

    #[test]
    fn error_record_is_one_json_line() {
        let e = CliError::usage("config", "config file not found: a b.toml")
            .with_path(Path::new("a b.toml"));
        let line = e.to_json();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "config");
        assert_eq!(v["path"], "a b.toml");
        assert_eq!(e.code, 2);
    }

    #[test]
    fn sweep_dir_names() {
        assert_eq!(sweep_dir("schedule.fixed_e", "5"), "schedule.fixed_e=5");
        assert_eq!(sweep_dir("fusion.kind", "\"a/b\""), "fusion.kind=_a_b_");
    }
}
