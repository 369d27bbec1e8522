mod commands;
mod config;
mod manifest;
mod pgm;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "cyclechaos", version, about = "Three-domain cycle generators as discrete dynamical systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or import the three-category dataset and write IDX files.
    Dataset(Common),
    /// Train G, F and the three discriminators.
    Train(Common),
    /// Iterate a generator from test images and write an image grid.
    Generate(Common),
    /// Estimate Lyapunov spectra over an ensemble of trajectories.
    Lyapunov(Common),
    /// Measure direct divergence of nearby starting points.
    Diverge(Common),
    /// Manifold precision and recall against k and iteration step.
    Pr(Common),
    /// PCA projection of training images and a generated orbit.
    Project(Common),
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    transient: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long)]
    benchmark: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    data: Option<String>,
    /// Any configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String, String)>, CliError> {
        let flags = [
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("lambda", &self.lambda),
            ("k", &self.k),
            ("steps", &self.steps),
            ("transient", &self.transient),
            ("epsilon", &self.epsilon),
            ("embedder", &self.embedder),
            ("benchmark", &self.benchmark),
            ("checkpoint", &self.checkpoint),
            ("data", &self.data),
        ];
        let mut out: Vec<_> = flags
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone(), format!("--{k}"))))
            .collect();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set: expected KEY=VALUE, got `{s}`")))?;
            out.push((k.trim().to_string(), v.trim().to_string(), format!("--set {}", k.trim())));
        }
        Ok(out)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common, f): (&'static str, &Common, fn(commands::Ctx) -> commands::CmdResult) = match &cli.command {
        Command::Dataset(c) => ("dataset", c, commands::cmd_dataset),
        Command::Train(c) => ("train", c, commands::cmd_train),
        Command::Generate(c) => ("generate", c, commands::cmd_generate),
        Command::Lyapunov(c) => ("lyapunov", c, commands::cmd_lyapunov),
        Command::Diverge(c) => ("diverge", c, commands::cmd_diverge),
        Command::Pr(c) => ("pr", c, commands::cmd_pr),
        Command::Project(c) => ("project", c, commands::cmd_project),
    };
    let schema = commands::schema_for(name).expect("every subcommand has a schema");
    let cfg = RunConfig::build(name, &schema, common.config.as_deref(), &common.overrides()?)?;
    f(commands::Ctx::new(cfg, common.out.clone())?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Usage(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
