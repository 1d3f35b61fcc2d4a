use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use igar_core::bench::{build_suite, ContradictionType, DEFAULT_CASES};
use igar_core::metrics::Variant;
use igar_core::world::Suite;
use igar_harness::config::{Axis, PolicySource, RunConfig, SuiteRef, SweepSpec, TrainSpec};
use igar_harness::{audit, dump_heatmaps, load_policy, load_suites, persist, run_with, sweep, HarnessError};

#[derive(Parser)]
#[command(name = "igar", version, about = "Sink-aware attention recalibration experiments on a toy instruction benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Benchmark suite tools.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Run every case, variant and rollout; write report, manifest and episodes.
    Run(RunArgs),
    /// Run once per value of one recalibration parameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// p, rho or layers.
        #[arg(long)]
        axis: Axis,
        /// Comma-separated grid.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Train a policy on the shortcut dataset and save its weights.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump per-layer, per-head attention before and after recalibration.
    Heatmap {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        case: String,
        #[arg(long, default_value = "Normal")]
        variant: Variant,
    },
    /// Print and audit a persisted run.
    Report {
        /// Run output directory.
        dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Generate and validate a suite file.
    Generate {
        #[arg(long)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_CASES)]
        cases: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config file plus overrides; flags win over file values.
#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Suite file(s); replaces the configured suites.
    #[arg(long = "suite")]
    suites: Vec<PathBuf>,
    /// Built-in policy: `sink` or `train`.
    #[arg(long, conflicts_with = "weights")]
    policy: Option<String>,
    /// Saved policy weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    rollouts: Option<usize>,
    /// Enable recalibration.
    #[arg(long, conflicts_with = "no_igar")]
    igar: bool,
    /// Disable recalibration.
    #[arg(long)]
    no_igar: bool,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run rollouts on one thread.
    #[arg(long)]
    serial: bool,
    /// Output directory (default: $IGAR_OUT_DIR, then ./igar-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if !self.suites.is_empty() {
            cfg.suites = self.suites.iter().map(|p| SuiteRef::File { path: p.clone() }).collect();
        }
        match self.policy.as_deref() {
            None => {}
            Some("sink") => cfg.policy = PolicySource::Sink { seed: 0 },
            Some("train") => cfg.policy = PolicySource::Train(TrainSpec::default()),
            Some(other) => return Err(HarnessError::Config(format!("unknown policy `{other}` (sink, train)"))),
        }
        if let Some(path) = &self.weights {
            cfg.policy = PolicySource::Weights { path: path.clone() };
        }
        if let Some(r) = self.rollouts {
            cfg.rollouts = r;
        }
        if self.igar {
            cfg.intervention = true;
        }
        if self.no_igar {
            cfg.intervention = false;
        }
        if let Some(v) = self.p {
            cfg.recal.p = v;
        }
        if let Some(v) = self.rho {
            cfg.recal.rho = v;
        }
        if let Some(v) = self.layers {
            cfg.recal.layers = v;
        }
        if let Some(v) = self.tau {
            cfg.sink.tau = v;
        }
        if let Some(v) = self.gamma {
            cfg.sink.gamma = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.serial {
            cfg.parallel = false;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Bench { command: BenchCommand::Generate { suite, seed, cases, out } } => {
            let s = build_suite(suite, cases, &ContradictionType::ALL, seed)?;
            s.revalidate()?;
            std::fs::write(&out, s.to_json()).map_err(|e| HarnessError::io(&out, e))?;
            println!("{} cases, sha256 {}", s.cases.len(), s.content_hash());
        }
        Command::Run(args) => {
            let cfg = args.config()?;
            let suites = load_suites(&cfg)?;
            let policy = load_policy(&cfg)?;
            let out = run_with(&cfg, &policy, &suites)?;
            let dir = cfg.out_dir();
            persist(&out, &dir)?;
            print!("{}", out.table());
            eprintln!("wrote {}", dir.display());
            if out.failed_episodes() > 0 {
                return Err(HarnessError::EpisodeFailures(out.failed_episodes()));
            }
        }
        Command::Sweep { run, axis, values } => {
            let cfg = run.config()?;
            let spec = SweepSpec { axis, values };
            let suites = load_suites(&cfg)?;
            let policy = load_policy(&cfg)?;
            let report = sweep(&spec, &cfg, &policy, &suites)?;
            let path = cfg.out_dir().join(format!("sweep_{axis}.csv"));
            igar_harness::run::write_file(&path, report.table().as_bytes())?;
            print!("{}", report.table());
            let mut failed = 0;
            for (value, e) in report.failures() {
                eprintln!("{axis} = {value}: {e}");
                failed += 1;
            }
            for p in &report.points {
                if let Ok(o) = &p.result {
                    failed += o.failed_episodes();
                }
            }
            if failed > 0 {
                return Err(HarnessError::EpisodeFailures(failed));
            }
        }
        Command::Train { out, scenes, epochs, lr, dropout, seed } => {
            let mut t = TrainSpec::default();
            t.scenes = scenes.unwrap_or(t.scenes);
            t.epochs = epochs.unwrap_or(t.epochs);
            t.lr = lr.unwrap_or(t.lr);
            t.dropout = dropout.unwrap_or(t.dropout);
            t.seed = seed.unwrap_or(t.seed);
            let cfg = RunConfig { policy: PolicySource::Train(t), ..RunConfig::default() };
            cfg.validate()?;
            let spec = load_policy(&cfg)?;
            igar_core::policy::io::save(&spec, &out).map_err(|e| HarnessError::Config(format!("{}: {e}", out.display())))?;
            println!("saved {} parameters to {}", spec.num_params(), out.display());
        }
        Command::Heatmap { run, case, variant } => {
            let cfg = run.config()?;
            let suites = load_suites(&cfg)?;
            let policy = load_policy(&cfg)?;
            let dir = dump_heatmaps(&cfg, &policy, &suites, &case, variant, &cfg.out_dir().join("heatmaps"))?;
            println!("{}", dir.display());
        }
        Command::Report { dir } => {
            let a = audit(&dir)?;
            print!("{}", a.table);
            if !a.passed() {
                return Err(HarnessError::Audit(a.problems.join("; ")));
            }
            eprintln!("audit passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
