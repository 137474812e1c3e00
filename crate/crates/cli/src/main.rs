use std::path::{Path, PathBuf};
use std::process::ExitCode;

use autr::encoders::{AudioClip, VideoClip};
use autr::io::{load_checkpoint, read_checkpoint_config, save_checkpoint, Config, Container};
use autr::metrics::{evaluate, select_masks};
use autr::synth::{write_all_splits, Dataset};
use autr::train::fit;
use autr::AutrModel;
use clap::{Parser, Subcommand};

/// Audio-visual segmentation on synthetic scenes.
#[derive(Parser, Debug)]
#[command(name = "autr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train, val, test and open_set splits.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// A split directory, or a root holding `train/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a checkpoint and write an m_j / m_f report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// A split directory, or a root holding `test/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Supplies `beta_sq` and `threshold`.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Predict masks and sounding probabilities for one scene file.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn split_dir(data: &Path, default_split: &str) -> PathBuf {
    if data.join("manifest.txt").exists() {
        data.to_path_buf()
    } else {
        data.join(default_split)
    }
}

fn load_model(ckpt: &Path) -> autr::Result<AutrModel> {
    let cfg = read_checkpoint_config(ckpt)?;
    load_checkpoint(ckpt, &cfg)
}

fn run(command: Command) -> autr::Result<()> {
    match command {
        Command::GenData { config, out } => {
            let cfg = Config::load(&config)?;
            write_all_splits(&out, &cfg.data)?;
            eprintln!("wrote splits to {}", out.display());
        }
        Command::Train { config, data, out, init } => {
            let cfg = Config::load(&config)?;
            let dataset = Dataset::load(&split_dir(&data, "train"))?;
            let mut model = match init {
                Some(path) => load_checkpoint(&path, &cfg.model)?,
                None => AutrModel::new(cfg.model.clone())?,
            };
            fit(&mut model, &dataset.examples(), &cfg.train, &cfg.objective, |stats, _| {
                eprintln!("epoch {} loss {:.5}", stats.epoch + 1, stats.mean_loss);
                Ok(())
            })?;
            save_checkpoint(&model, &out)?;
        }
        Command::Eval { ckpt, data, report, config } => {
            let metrics = match config {
                Some(path) => Config::load(&path)?.metrics,
                None => Default::default(),
            };
            let model = load_model(&ckpt)?;
            let dataset = Dataset::load(&split_dir(&data, "test"))?;
            let result = evaluate(&model, &dataset.examples(), &metrics)?;
            result.write_report(&report)?;
            print!("{}", result.report());
        }
        Command::Infer { ckpt, scene, out } => {
            let model = load_model(&ckpt)?;
            let c = Container::read(&scene)?;
            let video = VideoClip::new(c.require("video")?.clone())?;
            let audio = AudioClip::new(c.require("audio")?.clone())?;
            let (h, w) = video.size();
            let sel = select_masks(&model.predict(&video, &audio)?, h, w)?;
            let mut result = Container::new();
            result.insert("mask_prob", sel.mask_prob)?;
            result.insert("sounding_prob", sel.sounding_prob)?;
            result.write(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
