//! `resonet`: train and inspect passive lattice audio classifiers.
//!
//! Every subcommand that runs numerics takes a TOML run configuration
//! (`--config`); flag-only tools (`gradcheck`, `reduce bench`, `bands
//! misfit`) are self-contained. Artifacts land under the configured
//! output directory and are written atomically. Exit codes: 0 success,
//! 1 invalid configuration or usage, 2 missing input, 3 numeric blowup.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::{GeometrySource, SplitArg};
use config::{parse_band, parse_shape, MissingInput, RunConfig};

#[derive(Parser)]
#[command(
    name = "resonet",
    version,
    about = "Passive lattice audio classifiers: datasets, surrogates, training, evaluation."
)]
struct Cli {
    /// Worker thread count (overrides RESONET_THREADS; default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (TOML).
    #[arg(long, short = 'c')]
    config: PathBuf,
}

impl ConfigArgs {
    fn load(&self) -> Result<(RunConfig, Vec<u8>)> {
        RunConfig::load(&self.config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Dataset utilities.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Surrogate generation and fitting.
    #[command(subcommand)]
    Surrogate(SurrogateCmd),
    /// Train a classifier (two-layer when the config has a [deep] section).
    Train(ConfigArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Compare reverse-mode gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Model-order-reduction benchmarks.
    #[command(subcommand)]
    Reduce(ReduceCmd),
    /// Dispersion-band scoring.
    #[command(subcommand)]
    Bands(BandsCmd),
    /// Train across lattice sizes and tabulate accuracies.
    #[command(name = "size-study")]
    SizeStudy(SizeStudyArgs),
    /// Forward-simulate one drive through a lattice.
    Simulate(SimulateArgs),
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Synthesize clips (or ingest WAVs listed in dataset.manifest) into
    /// a prepared-clip cache.
    Prepare {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Cache directory (default: <output.dir>/dataset).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SurrogateCmd {
    /// Sample reference (geometry, model) pairs for fitting.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output file (default: <output.dir>/surrogate_samples.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the per-element quadratic surrogate from sampled pairs.
    Fit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Sampled pairs (default: <output.dir>/surrogate_samples.json).
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Output file (default: <output.dir>/surrogate.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Trained checkpoint JSON (single- or two-layer).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which split to score.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Also write the full evaluation JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Lattice shape, e.g. 3x3.
    #[arg(long, value_parser = parse_shape, default_value = "3x3")]
    shape: (usize, usize),
    /// Simulation steps per sample.
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Synthetic clips per class.
    #[arg(long, default_value_t = 2)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Relative finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    rel_step: f64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ReduceCmd {
    /// Split a grid into strips, reduce each with both component methods,
    /// reassemble, and compare eigenfrequencies against the full model.
    Bench {
        /// Grid side length (the model is grid x grid).
        #[arg(long, default_value_t = 40)]
        grid: usize,
        /// Number of strip components.
        #[arg(long, default_value_t = 4)]
        strips: usize,
        /// Retained component modes per strip.
        #[arg(long, default_value_t = 20)]
        modes: usize,
        /// Assembled modes to compare.
        #[arg(long, default_value_t = 10)]
        compare: usize,
        /// Write the CSV table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BandsCmd {
    /// Score a three-band dispersion sample (four wavenumbers per band,
    /// frequencies in kHz).
    Misfit {
        #[arg(long, value_parser = parse_band)]
        f7: [f64; 4],
        #[arg(long, value_parser = parse_band)]
        f8: [f64; 4],
        #[arg(long, value_parser = parse_band)]
        f9: [f64; 4],
    },
}

#[derive(Args)]
struct SizeStudyArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated lattice sizes, e.g. 2x2,3x3,5x5.
    #[arg(long, value_delimiter = ',', value_parser = parse_shape, required = true)]
    sizes: Vec<(usize, usize)>,
    /// Output CSV (default: <output.dir>/size_study.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Take the geometry from a trained single-layer checkpoint.
    #[arg(long, conflicts_with = "geometry_seed")]
    checkpoint: Option<PathBuf>,
    /// Use a random geometry drawn from this seed.
    #[arg(long)]
    geometry_seed: Option<u64>,
    /// Drive frequency in Hz (default: the on-site resonance).
    #[arg(long)]
    sine: Option<f64>,
    /// Drive amplitude.
    #[arg(long, default_value_t = 1.0)]
    amp: f64,
    /// Steps to integrate (default: training.n_steps).
    #[arg(long)]
    steps: Option<usize>,
    /// Output CSV (default: <output.dir>/trajectory.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(command: Command, threads: usize) -> Result<()> {
    match command {
        Command::Dataset(DatasetCmd::Prepare { cfg, out_dir }) => {
            let (cfg, raw) = cfg.load()?;
            commands::dataset_prepare(&cfg, &raw, out_dir, threads)
        }
        Command::Surrogate(SurrogateCmd::Gen { cfg, out }) => {
            let (cfg, raw) = cfg.load()?;
            commands::surrogate_gen(&cfg, &raw, out, threads)
        }
        Command::Surrogate(SurrogateCmd::Fit { cfg, samples, out }) => {
            let (cfg, raw) = cfg.load()?;
            commands::surrogate_fit(&cfg, &raw, samples, out, threads)
        }
        Command::Train(cfg) => {
            let (cfg, raw) = cfg.load()?;
            commands::train(&cfg, &raw, threads)
        }
        Command::Eval(args) => {
            let (cfg, raw) = args.cfg.load()?;
            commands::eval(&cfg, &raw, &args.checkpoint, args.split, args.out, threads)
        }
        Command::Gradcheck(args) => commands::gradcheck_cmd(
            args.shape,
            args.steps,
            args.samples_per_class,
            args.seed,
            args.rel_step,
            args.out,
            threads,
        ),
        Command::Reduce(ReduceCmd::Bench {
            grid,
            strips,
            modes,
            compare,
            out,
        }) => commands::reduce_bench(grid, strips, modes, compare, out, threads),
        Command::Bands(BandsCmd::Misfit { f7, f8, f9 }) => {
            commands::bands_misfit_cmd(f7, f8, f9)
        }
        Command::SizeStudy(args) => {
            let (cfg, raw) = args.cfg.load()?;
            commands::size_study_cmd(&cfg, &raw, &args.sizes, args.out, threads)
        }
        Command::Simulate(args) => {
            let (cfg, raw) = args.cfg.load()?;
            let source = if let Some(path) = args.checkpoint {
                GeometrySource::Checkpoint(path)
            } else if let Some(seed) = args.geometry_seed {
                GeometrySource::Random(seed)
            } else {
                GeometrySource::Flat
            };
            commands::simulate_cmd(
                &cfg, &raw, source, args.sine, args.amp, args.steps, args.out, threads,
            )
        }
    }
}

/// Distinct exit codes per failure class: bad configuration or usage is
/// 1, a missing input file is 2, a diverged simulation is 3.
fn exit_code(err: &anyhow::Error) -> u8 {
    use resonet::sim::SimError;
    for cause in err.chain() {
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
        if cause.downcast_ref::<MissingInput>().is_some() {
            return 2;
        }
        if let Some(SimError::Blowup { .. }) = cause.downcast_ref::<SimError>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed;
            // anything else is a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = resonet::configure_threads(cli.threads);
    match run(cli.command, threads) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("resonet: error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
