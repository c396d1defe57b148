mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{ArgAction, Args, Parser, Subcommand};
use log::error;
use tfmpe::pipeline::Method;

use commands::{Diagnostic, EvaluateArgs, Predictive, ReportArgs, SampleArgs};
use config::{RunConfig, SweepConfig};

#[derive(Parser, Debug)]
#[command(
    author,
    version,
    about = "Tokenised flow-matching posterior estimation for hierarchical models"
)]
struct Cli {
    /// Increase log verbosity (-v, -vv)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    /// Worker threads (defaults to all cores)
    #[arg(long, global = true, env = "TFMPE_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset from a task
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Sites per sample
        #[arg(long, default_value_t = 1)]
        sites: usize,
    },
    /// Train a method and write checkpoints
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "COUNT")]
        sites: Option<usize>,
        /// Continue posterior training of an existing run in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Draw posterior samples for one observation
    Sample {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        /// Dataset directory holding the observation
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// CSV output path
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
    },
    /// Run a diagnostic on a trained run
    Evaluate {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Diagnostic::Lc2st)]
        diagnostic: Diagnostic,
        #[arg(short, long)]
        output: PathBuf,
        /// Observation row for single-observation diagnostics
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value_t = Predictive::Simulator)]
        predictive: Predictive,
        /// Second run for the kernel two-sample test
        #[arg(long, value_name = "DIR")]
        reference: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
    },
    /// Run a sweep of train-and-evaluate cells
    Benchmark {
        /// Sweep file
        #[arg(long, value_name = "PATH")]
        sweep: PathBuf,
    },
    /// Simulation cost table
    Report {
        #[arg(long, value_name = "DIR")]
        run: Option<PathBuf>,
        #[arg(long)]
        n: Option<u64>,
        /// Multi-site training samples (defaults to N)
        #[arg(long)]
        n_multi: Option<u64>,
        #[arg(long)]
        sites: Option<u64>,
        /// Seconds per true simulator call
        #[arg(long)]
        t_sim: Option<f64>,
        /// Seconds per surrogate draw
        #[arg(long)]
        t_like: Option<f64>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

/// Flags shared by commands that start from a run config.
#[derive(Args, Debug)]
struct RunArgs {
    /// TOML run config; flags override its values
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    method: Option<String>,
    /// Simulation budget
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Maximum epochs for every training stage
    #[arg(long)]
    epochs: Option<usize>,
}

impl RunArgs {
    fn resolve(&self, sites: Option<usize>) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(t) = &self.task {
            c.task = t.clone();
        }
        if let Some(m) = &self.method {
            c.method = m.parse::<Method>()?;
        }
        if let Some(n) = self.n {
            c.n = n;
        }
        if let Some(s) = sites {
            c.n_s = s;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.output {
            c.output = o.clone();
        }
        if let Some(e) = self.epochs {
            for t in [
                &mut c.pipeline.surrogate_training,
                &mut c.pipeline.posterior_training,
            ] {
                t.max_epochs = e;
                t.patience = t.patience.min(e);
            }
        }
        c.validate()?;
        Ok(c)
    }
}

fn load_optional(path: &Option<PathBuf>) -> Result<Option<RunConfig>> {
    path.as_deref().map(RunConfig::load).transpose()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { run, sites } => commands::simulate(&run.resolve(None)?, sites),
        Command::Train { run, sites, resume } => commands::train(&run.resolve(sites)?, resume),
        Command::Sample {
            run,
            data,
            index,
            samples,
            output,
            config,
        } => commands::sample(
            SampleArgs {
                run: &run,
                data: &data,
                index,
                n_samples: samples,
                output: &output,
            },
            load_optional(&config)?,
        ),
        Command::Evaluate {
            run,
            data,
            diagnostic,
            output,
            index,
            predictive,
            reference,
            config,
        } => commands::evaluate(
            EvaluateArgs {
                run: &run,
                data: &data,
                diagnostic,
                output: &output,
                index,
                predictive,
                reference: reference.as_deref(),
            },
            load_optional(&config)?,
        ),
        Command::Benchmark { sweep } => commands::benchmark(&SweepConfig::load(&sweep)?),
        Command::Report {
            run,
            n,
            n_multi,
            sites,
            t_sim,
            t_like,
            output,
        } => commands::report(ReportArgs {
            run,
            n,
            n_multi,
            sites,
            t_sim,
            t_like,
            output,
        }),
    }
}

/// 2 for configuration problems, 3 for numeric or training failures, 4 for
/// unreadable or incompatible files.
fn exit_code(err: &anyhow::Error) -> u8 {
    use tfmpe::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config { .. } | E::UnknownTask { .. } => 2,
                E::Format { .. } | E::Version { .. } | E::Json(_) | E::Io(_) => 4,
                _ => 3,
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            error!("cannot size the worker pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
