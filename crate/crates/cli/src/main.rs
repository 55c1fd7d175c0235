use std::error::Error as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use m2m_core::io::read_checkpoint;
use m2m_core::pipeline::{cmd_enhance, cmd_enhance_manifest, cmd_evaluate, cmd_simulate, cmd_train};
use m2m_core::{Error, SimulateConfig, TrainSettings};

/// Mixture-to-mixture speech enhancement toolkit.
#[derive(Debug, Parser)]
#[command(name = "m2m", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate seeded toy scenes plus `manifest.jsonl` and `test.jsonl`.
    Simulate(SimulateArgs),
    /// Train an estimator on a manifest.
    Train(TrainArgs),
    /// Enhance a recording (or every record of a manifest) with a checkpoint.
    Enhance(EnhanceArgs),
    /// Score enhanced files against the truth speech of a manifest.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// key=value config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// key=value config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EnhanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Far-field WAV files; channels are concatenated in the given order.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    input: Vec<PathBuf>,
    /// Enhance every record; `--out` is then a directory.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output WAV, or output directory with `--manifest`.
    #[arg(long)]
    out: PathBuf,
    /// Remix the reference mixture at this speech-to-mixture ratio (dB).
    #[arg(long, allow_negative_numbers = true)]
    reinforce_db: Option<f64>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding `<id>.wav` for every record.
    #[arg(long)]
    enhanced: PathBuf,
    /// Directory for `report.tsv` and `report.json`.
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate(args) => {
            let mut cfg = match &args.config {
                Some(path) => SimulateConfig::read(path)?,
                None => SimulateConfig::default(),
            };
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            let summary = cmd_simulate(&cfg, &args.out)?;
            println!(
                "wrote {} training/validation and {} test scenes to {}",
                summary.records.len(),
                summary.test_records.len(),
                args.out.display()
            );
        }
        Command::Train(args) => {
            let settings = match &args.config {
                Some(path) => TrainSettings::read(path)?,
                None => TrainSettings::default(),
            };
            let summary = cmd_train(&args.manifest, &settings, &args.out, args.seed)?;
            println!(
                "trained {} steps; checkpoint {}",
                summary.steps,
                summary.final_checkpoint.display()
            );
        }
        Command::Enhance(args) => {
            let ckpt = read_checkpoint(&args.checkpoint)?;
            match &args.manifest {
                Some(manifest) => {
                    let written = cmd_enhance_manifest(&ckpt, manifest, &args.out, args.reinforce_db)?;
                    println!("enhanced {} recordings into {}", written.len(), args.out.display());
                }
                None => {
                    cmd_enhance(&ckpt, &args.input, &args.out, args.reinforce_db)?;
                    println!("wrote {}", args.out.display());
                }
            }
        }
        Command::Evaluate(args) => {
            let report = cmd_evaluate(&args.manifest, &args.enhanced, &args.out)?;
            println!(
                "{} utterances: mean SI-SDR {:.2} dB, mean SDR {:.2} dB",
                report.utterances.len(),
                report.mean_si_sdr_db,
                report.mean_sdr_db
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = err.source();
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::FAILURE
        }
    }
}
