use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use farebench::eval::Variant;
use farebench::pipeline::{Pipeline, PipelineConfig, MODELS};
use farebench::{par, synth, Error, Result};

#[derive(Parser)]
#[command(name = "farebench", version, about = "Taxi-fare regression robustness benchmark")]
struct Cli {
    /// JSON pipeline config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set models.gat.ensemble_size=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read the raw CSV in chunks and validate the schema.
    Ingest,
    /// Impute, filter, engineer features, split and fit normalization.
    Preprocess,
    /// Inject Gaussian noise and write the KS report.
    Perturb,
    /// Train the denoising autoencoder and reconstruct the noisy table.
    Denoise,
    /// Train models; defaults to every enabled model on every variant.
    Train {
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Score stored predictions.
    Evaluate,
    /// Write comparison tables from stored evaluation reports.
    Report,
    /// Run every stale stage and write the manifest.
    #[command(alias = "run_pipeline")]
    RunPipeline,
    /// Write a synthetic raw trip CSV.
    Synth {
        #[arg(long, default_value_t = 10_000)]
        rows: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "data/sample_10k.csv")]
        out: PathBuf,
        /// Clean trips with coordinates driven by two latent factors.
        #[arg(long)]
        rank2: bool,
    },
    /// Print the effective config as JSON.
    Config,
}

fn run(cli: Cli) -> Result<()> {
    if cli.sequential {
        par::set_sequential(true);
    }
    if let Command::Synth { rows, seed, out, rank2 } = &cli.command {
        if *rank2 {
            std::fs::write(out, synth::rank2_trip_csv(*rows, *seed)).map_err(|e| Error::io(out, e))?;
        } else {
            let summary = synth::write_raw_trip_csv(out, *rows, *seed)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        return Ok(());
    }
    let config = PipelineConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let pipeline = Pipeline::new(config)?;
    std::fs::create_dir_all(&pipeline.config.output_dir).map_err(|e| Error::io(&pipeline.config.output_dir, e))?;
    match cli.command {
        Command::Ingest => pipeline.ingest(),
        Command::Preprocess => pipeline.preprocess(),
        Command::Perturb => pipeline.perturb(),
        Command::Denoise => pipeline.denoise(),
        Command::Train { model, variant } => {
            let models: Vec<String> = match model {
                Some(m) if MODELS.contains(&m.as_str()) => vec![m],
                Some(m) => return Err(Error::Config(format!("unknown model `{m}`"))),
                None => pipeline.config.models.enabled().iter().map(|m| m.to_string()).collect(),
            };
            let variants = match variant {
                Some(v) => vec![v.parse::<Variant>()?],
                None => Variant::ALL.to_vec(),
            };
            for m in &models {
                for v in &variants {
                    pipeline.train(m, *v)?;
                }
            }
            Ok(())
        }
        Command::Evaluate => pipeline.evaluate(),
        Command::Report => pipeline.report().map(|p| println!("{}", p.display())),
        Command::RunPipeline => pipeline.run_all().map(|_| {
            println!("{}", pipeline.config.output_dir.join("manifest.json").display());
        }),
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&pipeline.config)?);
            Ok(())
        }
        Command::Synth { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
