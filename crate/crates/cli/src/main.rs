use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use split_ensemble::data::save_image_dir;
use split_ensemble::evaluation::NoiseKind;
use split_ensemble::harness::{
    cmd_ablate, cmd_eval, cmd_train, noise_set, parse_override, AblationGrid, ExperimentConfig,
};
use split_ensemble::nn::Dims;
use split_ensemble::trainer::load_checkpoint;

#[derive(Parser)]
#[command(name = "split-ensemble", version, about = "Train and evaluate split ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=30`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let overrides = self
            .overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>, _>>()?;
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p, &overrides).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::from_toml_str("", &overrides)?,
        };
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchFormat {
    Dot,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Noise {
    Gaussian,
    Uniform,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model and write checkpoints and event logs.
    Train(ConfigArgs),
    /// Evaluate a trained run on its ID test set and OOD sets.
    Eval(ConfigArgs),
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Grid axes (TOML).
        #[arg(long)]
        grid: PathBuf,
    },
    /// Export the architecture stored in a checkpoint.
    ExportArch {
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "dot")]
        format: ArchFormat,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Write a synthetic noise OOD set as PNG images plus labels.csv.
    GenOod {
        #[arg(value_enum)]
        kind: Noise,
        output: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let out = cmd_train(&cfg)?;
            info!("model written to {}", out.output_dir.display());
        }
        Command::Eval(args) => {
            let report = cmd_eval(&args.load()?)?;
            print!("{}", report.to_csv()?);
        }
        Command::Ablate { config, grid } => {
            let cfg = config.load()?;
            let text = fs::read_to_string(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let grid: AblationGrid = toml::from_str(&text).with_context(|| format!("parsing {}", grid.display()))?;
            let report = cmd_ablate(&cfg, &grid)?;
            print!("{}", report.to_csv()?);
        }
        Command::ExportArch {
            checkpoint,
            format,
            output,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let text = match format {
                ArchFormat::Dot => ck.model.to_dot()?,
                ArchFormat::Json => serde_json::to_string_pretty(&ck.model.export()?)?,
            };
            match output {
                Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Command::GenOod {
            kind,
            output,
            count,
            channels,
            height,
            width,
            seed,
        } => {
            if !matches!(channels, 1 | 3) {
                bail!("channels must be 1 or 3, got {channels}");
            }
            let kind = match kind {
                Noise::Gaussian => NoiseKind::Gaussian,
                Noise::Uniform => NoiseKind::Uniform,
            };
            let set = noise_set(kind, Dims::new(channels, height, width), count, seed)?;
            save_image_dir(&set, &output)?;
            info!("{count} images written to {}", output.display());
        }
    }
    Ok(())
}
