use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shapeseq::pcio::Split;
use shapeseq::{EmdMode, MetricOptions};
use shapeseq_cli::commands;
use shapeseq_cli::pipeline::{synth_data, RunDir, Stage};
use shapeseq_cli::{run_stage, CliError, PipelineConfig};

#[derive(Parser)]
#[command(name = "shapeseq", version, about = "Point cloud generation from sequences of shape compositions")]
struct Cli {
    /// Pipeline config (TOML). Defaults to <out>/config.toml when present,
    /// built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/test shapes and test depth images.
    SynthData,
    /// Stage A: canonical-mapping autoencoder.
    TrainCae,
    /// Stage B: sphere grouping.
    TrainGroup,
    /// Stage C: grouped vector-quantized codec.
    TrainVqvae,
    /// Stage D: autoregressive transformer over token sequences.
    TrainTransformer,
    /// Encode shapes to tokens and decode them back.
    Reconstruct {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Sample shapes from the transformer.
    Generate {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Sample completions of a depth image (PGM or PCSD1).
    Complete {
        #[arg(long)]
        depth: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// MMD, COV and 1-NNA of generated clouds against reference clouds.
    Eval {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Skip unit-sphere normalization.
        #[arg(long)]
        raw: bool,
        #[arg(long, value_parser = ["auto", "exact", "approximate"], default_value = "auto")]
        emd: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Codebook usage of the tokens of a data split.
    UsageReport {
        #[arg(long, value_parser = ["train", "test"], default_value = "test")]
        split: String,
    },
}

fn load_config(cli: &Cli, run: &RunDir) -> Result<PipelineConfig, CliError> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None if run.config().exists() => PipelineConfig::load(&run.config())?,
        None => PipelineConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => config.with_seed(s),
        None => config,
    })
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let run = RunDir::new(&cli.out);
    let config = load_config(&cli, &run)?;
    let stage = |s: Stage| -> Result<(), CliError> {
        let path = run_stage(s, &config, &run)?;
        println!("stage {s}: wrote {}", path.display());
        Ok(())
    };
    match cli.command {
        Command::SynthData => {
            let (train, test) = synth_data(&config, &run)?;
            println!("wrote {train} train and {test} test shapes under {}", run.root.join("data").display());
        }
        Command::TrainCae => stage(Stage::A)?,
        Command::TrainGroup => stage(Stage::B)?,
        Command::TrainVqvae => stage(Stage::C)?,
        Command::TrainTransformer => stage(Stage::D)?,
        Command::Reconstruct { inputs, dest } => {
            let dest = dest.unwrap_or_else(|| run.root.join("reconstructions"));
            for (path, cd) in commands::reconstruct(&run, &inputs, &dest)? {
                println!("{}\tcd {cd:.6e}", path.display());
            }
        }
        Command::Generate {
            n,
            top_p,
            temperature,
            dest,
        } => {
            let mut sampling = config.sampling.clone();
            sampling.top_p = top_p.unwrap_or(sampling.top_p);
            sampling.temperature = temperature.unwrap_or(sampling.temperature);
            let dest = dest.unwrap_or_else(|| run.generated());
            let out = commands::generate(&config, &run, n, &sampling, &dest)?;
            println!("wrote {} shapes to {}", out.files.len(), dest.display());
        }
        Command::Complete {
            depth,
            k,
            temperature,
            dest,
        } => {
            let mut sampling = config.sampling.clone();
            sampling.temperature = temperature.unwrap_or(sampling.temperature);
            let dest = dest.unwrap_or_else(|| run.root.join("completions"));
            let out = commands::complete(&config, &run, &depth, k, &sampling, &dest)?;
            println!("wrote {} completions to {}; TMD x 1e3 = {:.3}", out.files.len(), dest.display(), out.tmd * 1e3);
        }
        Command::Eval {
            gen,
            reference,
            raw,
            emd,
            report,
        } => {
            let emd_mode = match emd.as_str() {
                "exact" => EmdMode::Exact,
                "approximate" => EmdMode::Approximate,
                _ => EmdMode::Auto,
            };
            let report = report.unwrap_or_else(|| run.root.join("report.txt"));
            let rep = commands::eval(&gen, &reference, &MetricOptions { raw, emd_mode }, &report)?;
            print!("{}", rep.table());
        }
        Command::UsageReport { split } => {
            let split = if split == "train" { Split::Train } else { Split::Test };
            let usage = commands::usage_report(&run, split, &run.root.join("usage.txt"))?;
            println!("codebook usage: {usage:.2}%");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
