use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use swflow::{Error, Result};
use swflow_cli::{cmd_barycenter, cmd_fair, cmd_gmm_flow, exit_code, Log, ModeSelection, Outcome, RunConfigFile};

#[derive(Parser)]
#[command(name = "swflow", version, about = "Sliced-Wasserstein flows, barycenters and fair regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Flow particles toward a Gaussian-mixture target.
    GmmFlow(Overrides),
    /// Barycenter flow over several group samples.
    Barycenter(Overrides),
    /// Fair-regression Pareto sweep.
    Fair(Overrides),
    /// Check a config without running anything.
    Validate(Overrides),
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["stochastic", "liouville", "both"])]
    mode: Option<String>,
    /// First seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated list, e.g. 0,0.5,1
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    quiet: bool,
    /// Validate the resolved config and exit.
    #[arg(long)]
    validate: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfigFile> {
        let mut cfg = match &self.config {
            Some(p) => RunConfigFile::load(p)?,
            None => RunConfigFile::default(),
        };
        if let Some(m) = &self.mode {
            cfg.mode = m.parse::<ModeSelection>()?;
        }
        if self.seed.is_some() || self.seeds.is_some() {
            let first = self.seed.unwrap_or(cfg.seeds.first().copied().unwrap_or(0));
            let count = self.seeds.unwrap_or(1);
            if count == 0 {
                return Err(Error::InvalidConfig("--seeds must be >= 1".into()));
            }
            cfg.seeds = (first..first + count).collect();
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(l) = self.lambda {
            cfg.flow.lambda = l;
            cfg.fair.lambdas = vec![l];
        }
        if let Some(a) = &self.alphas {
            cfg.fair.alphas = a.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn threads_from_env() -> Result<()> {
    let Ok(v) = std::env::var("SWFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("SWFLOW_THREADS={v:?} is not a count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, run): (&Overrides, Option<fn(&RunConfigFile, Log) -> Result<Outcome>>) = match &cli.command {
        Command::GmmFlow(a) => (a, Some(cmd_gmm_flow)),
        Command::Barycenter(a) => (a, Some(cmd_barycenter)),
        Command::Fair(a) => (a, Some(cmd_fair)),
        Command::Validate(a) => (a, None),
    };
    let log = Log { quiet: args.quiet };
    let result = threads_from_env().and_then(|_| args.resolve()).and_then(|cfg| match run {
        Some(run) if !args.validate => run(&cfg, log),
        _ => {
            if !args.quiet {
                println!("config ok");
            }
            Ok(Outcome::default())
        }
    });
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result) as u8)
}
