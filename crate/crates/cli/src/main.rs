//! `morphobricks` command-line entry point.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{apply_override, set_path, RunConfig};
use crate::error::CliError;
use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "morphobricks", version, about = "Shape classification and damage recovery on simulated NCA bricks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for the command's primary random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Override a configuration key, e.g. `train.learning_rate=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a procedural dataset of `.voxtxt` files and an index.
    GenDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        #[arg(long)]
        count: Option<usize>,
        /// Cubic size budget per shape.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Train a classifier on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        eval_every: Option<usize>,
        #[arg(long)]
        target_accuracy: Option<f64>,
    },
    /// Report per-class active-voxel accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Run the distributed brick simulation with optional fault sweeps.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        shape: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cycles: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        fault_rates: Option<Vec<f64>>,
        #[arg(long)]
        trials: Option<usize>,
        /// Explicit faulty brick ids; replaces the fault-rate sweep.
        #[arg(long, value_delimiter = ',')]
        fault_bricks: Option<Vec<usize>>,
        /// `ideal` or `protocol`.
        #[arg(long)]
        channel: Option<String>,
        /// True class name when the shape file is unlabeled.
        #[arg(long)]
        label: Option<String>,
    },
    /// Write hidden-channel volumes of a rollout as `.voxfield` files.
    ExportChannels {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        shape: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        channels: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
    },
    /// Damage detection and recovery experiments.
    #[command(subcommand)]
    Damage(DamageCommand),
    /// Wire-protocol conformance tools.
    #[command(subcommand)]
    Protocol(ProtocolCommand),
    /// Print the full default configuration.
    Config {
        /// Write to this file instead of standard output.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Repeat a run from its manifest.
    Rerun {
        manifest: PathBuf,
        /// Output directory; defaults to the recorded one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Subcommand)]
pub enum DamageCommand {
    /// Train a shape-conditioned damage detector.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
    },
    /// Detection accuracy on freshly damaged dataset shapes.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Regrow one target from a seed cluster.
    Recover {
        #[command(flatten)]
        common: Common,
        /// Target shape.
        #[arg(long)]
        shape: PathBuf,
        /// Damage model; omit together with `--oracle`.
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Starting cells; defaults to the cells nearest the centroid.
        #[arg(long)]
        start: Option<PathBuf>,
        /// Use exact labels instead of a trained model.
        #[arg(long)]
        oracle: bool,
    },
    /// Train per hidden size and tabulate recovery accuracy.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',')]
        hidden: Option<Vec<usize>>,
        #[arg(long)]
        seeds: Option<usize>,
        /// Directory with `damage_h<H>.ncap` checkpoints to reuse.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Subcommand)]
pub enum ProtocolCommand {
    /// Write the `hex_bits,durations_us` conformance vectors.
    Vectors {
        #[command(flatten)]
        common: Common,
        /// Random floats appended after the boundary set.
        #[arg(long, default_value_t = 64)]
        random: usize,
    },
    /// Randomized round trips and impairment trials.
    Fuzz {
        #[command(flatten)]
        common: Common,
        /// Random floats to round-trip over the ideal channel.
        #[arg(long)]
        n: Option<usize>,
        /// Full-state exchanges over the configured channel.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Timing budget of retransmitted full-state frames.
    Budget {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        unit_us: Option<f64>,
    },
}

impl Command {
    pub fn name(&self) -> String {
        match self {
            Command::GenDataset { .. } => "gen-dataset".into(),
            Command::Train { .. } => "train".into(),
            Command::Eval { .. } => "eval".into(),
            Command::Simulate { .. } => "simulate".into(),
            Command::ExportChannels { .. } => "export-channels".into(),
            Command::Damage(d) => format!(
                "damage {}",
                match d {
                    DamageCommand::Train { .. } => "train",
                    DamageCommand::Detect { .. } => "detect",
                    DamageCommand::Recover { .. } => "recover",
                    DamageCommand::Sweep { .. } => "sweep",
                }
            ),
            Command::Protocol(p) => format!(
                "protocol {}",
                match p {
                    ProtocolCommand::Vectors { .. } => "vectors",
                    ProtocolCommand::Fuzz { .. } => "fuzz",
                    ProtocolCommand::Budget { .. } => "budget",
                }
            ),
            Command::Config { .. } => "config".into(),
            Command::Rerun { .. } => "rerun".into(),
        }
    }

    fn common_mut(&mut self) -> Option<&mut Common> {
        Some(match self {
            Command::GenDataset { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Simulate { common, .. }
            | Command::ExportChannels { common, .. } => common,
            Command::Damage(
                DamageCommand::Train { common, .. }
                | DamageCommand::Detect { common, .. }
                | DamageCommand::Recover { common, .. }
                | DamageCommand::Sweep { common, .. },
            ) => common,
            Command::Protocol(
                ProtocolCommand::Vectors { common, .. }
                | ProtocolCommand::Fuzz { common, .. }
                | ProtocolCommand::Budget { common, .. },
            ) => common,
            Command::Config { .. } | Command::Rerun { .. } => return None,
        })
    }

    /// The configuration key fed by `--seed`.
    fn seed_key(&self) -> &'static str {
        match self {
            Command::GenDataset { .. } => "dataset.seed",
            Command::Train { .. } => "train.rng_seed",
            Command::Eval { .. } => "eval.seed",
            Command::Simulate { .. } => "sim.seed",
            Command::ExportChannels { .. } => "export.seed",
            Command::Damage(DamageCommand::Train { .. } | DamageCommand::Sweep { .. }) => "damage.seed",
            Command::Damage(DamageCommand::Detect { .. }) => "detect.seed",
            Command::Damage(DamageCommand::Recover { .. }) => "recovery.seed",
            Command::Protocol(_) => "fuzz.seed",
            Command::Config { .. } | Command::Rerun { .. } => "",
        }
    }

    /// Command flags as configuration assignments.
    fn overrides(&self) -> Vec<(&'static str, toml::Value)> {
        use toml::Value as V;
        let int = |v: usize| V::Integer(v as i64);
        let ints = |v: &[usize]| V::Array(v.iter().map(|&x| V::Integer(x as i64)).collect());
        let mut out = Vec::new();
        let mut push = |k: &'static str, v: Option<V>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        match self {
            Command::GenDataset {
                classes, count, budget, ..
            } => {
                push(
                    "dataset.classes",
                    classes.as_ref().map(|c| V::Array(c.iter().cloned().map(V::String).collect())),
                );
                push("dataset.count", count.map(int));
                push("dataset.budget", budget.map(|b| ints(&[b, b, b])));
            }
            Command::Train {
                iterations,
                eval_every,
                target_accuracy,
                ..
            } => {
                push("train.iterations", iterations.map(int));
                push("train.eval_every", eval_every.map(int));
                push("train.target_accuracy", target_accuracy.map(V::Float));
            }
            Command::Eval { steps, trials, .. } => {
                push("eval.steps", steps.map(int));
                push("eval.trials", trials.map(int));
            }
            Command::Simulate {
                cycles,
                fault_rates,
                trials,
                channel,
                ..
            } => {
                push("sim.cycles", cycles.map(int));
                push(
                    "simulate.fault_rates",
                    fault_rates.as_ref().map(|r| V::Array(r.iter().map(|&x| V::Float(x)).collect())),
                );
                push("simulate.trials", trials.map(int));
                push("simulate.channel", channel.clone().map(V::String));
            }
            Command::ExportChannels { channels, steps, .. } => {
                push("export.channels", channels.as_deref().map(ints));
                push("export.steps", steps.as_deref().map(ints));
            }
            Command::Damage(DamageCommand::Train { epochs, hidden, .. }) => {
                push("damage.epochs", epochs.map(int));
                push("damage.hidden", hidden.map(int));
            }
            Command::Damage(DamageCommand::Detect { samples, .. }) => push("detect.samples", samples.map(int)),
            Command::Damage(DamageCommand::Sweep { hidden, seeds, .. }) => {
                push("sweep.hidden", hidden.as_deref().map(ints));
                push("sweep.seeds", seeds.map(int));
            }
            Command::Protocol(ProtocolCommand::Fuzz { n, trials, .. }) => {
                push("fuzz.roundtrips", n.map(int));
                push("fuzz.trials", trials.map(int));
            }
            Command::Protocol(ProtocolCommand::Budget { unit_us, .. }) => {
                push("protocol.unit_us", unit_us.map(V::Float))
            }
            _ => {}
        }
        out
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("MORPHOBRICKS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Validation(format!("MORPHOBRICKS_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn parse(args: &[String]) -> Result<Option<Cli>, CliError> {
    let argv = std::iter::once("morphobricks".to_string()).chain(args.iter().cloned());
    match Cli::try_parse_from(argv) {
        Ok(cli) => Ok(Some(cli)),
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                print!("{e}");
                Ok(None)
            }
            _ => Err(CliError::Validation(e.render().to_string().trim_end().to_string())),
        },
    }
}

fn resolve(command: &mut Command) -> Result<RunConfig, CliError> {
    let seed_key = command.seed_key();
    let overrides = command.overrides();
    let common = command.common_mut().expect("configurable command");
    let mut value = RunConfig::load(common.config.as_deref())?;
    for s in &common.set {
        apply_override(&mut value, s)?;
    }
    for (key, v) in overrides {
        set_path(&mut value, key, v)?;
    }
    if let Some(seed) = common.seed {
        set_path(&mut value, seed_key, toml::Value::Integer(seed as i64))?;
    }
    RunConfig::from_value(value)
}

fn run(args: Vec<String>) -> Result<(), CliError> {
    configure_threads()?;
    let Some(cli) = parse(&args)? else {
        return Ok(());
    };
    match cli.command {
        Command::Config { file } => {
            let text = RunConfig::generated();
            match file {
                Some(path) => std::fs::write(&path, text).map_err(|e| CliError::io(path.display(), e)),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Rerun { manifest, out } => {
            let recorded = RunManifest::read(&manifest)?;
            let Some(cli) = parse(&recorded.args)? else {
                return Ok(());
            };
            let mut command = cli.command;
            if matches!(command, Command::Config { .. } | Command::Rerun { .. }) {
                return Err(CliError::Validation("manifest does not record a rerunnable command".into()));
            }
            if let Some(out) = out {
                command.common_mut().expect("configurable command").out = out;
            }
            recorded.config.validate()?;
            commands::execute(&command, recorded.config, recorded.args)
        }
        mut command => {
            let config = resolve(&mut command)?;
            config.validate()?;
            commands::execute(&command, config, args)
        }
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = match run(args) {
        Ok(()) => 0,
        Err(e) => {
            for line in e.to_string().lines() {
                eprintln!("ERROR: {line}");
            }
            e.exit_code()
        }
    };
    std::process::exit(code);
}
