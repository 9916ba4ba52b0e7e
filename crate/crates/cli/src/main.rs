//! `tend`: train, score, evaluate and plot two-stage novelty detectors.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use tend::config::RunConfig;
use tend::data::{make_synthetic, Motif, SyntheticParams};
use tend::distortions::{distort, sample_spec, DistortionKind};
use tend::experiment::{self, ScoreSplit, STAGE1_CKPT, STAGE2_CKPT};
use tend::image::ImageSample;
use tend::scoring::ScoreMode;

#[derive(Parser, Debug)]
#[command(name = "tend", version, about = "Two-stage novelty detection with transformation-based embeddings")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving every artifact of the command.
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stage 1: train the autoencoder on ID images.
    TrainAe,
    /// Stage 2: train the classifier and margin learner on a frozen stage-1 backbone.
    TrainHead {
        /// Stage-1 checkpoint (default: <out-dir>/stage1.ckpt).
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Score the test mixture or the generated validation sets.
    Score {
        /// Checkpoint to score with (default: <out-dir>/stage2.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// TEND, MARGIN_ONLY, CLASSIFIER_ONLY or AE_RECON (default: from config).
        #[arg(long)]
        mode: Option<String>,
        /// Blend weight λ (default: from config, 0.5 if unset).
        #[arg(long)]
        lambda: Option<f64>,
        /// Output CSV (default: <out-dir>/scores.csv or val_scores.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compute AUROC, the G-Mean threshold and ACC_val from score files.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// Generated validation scores; adds per-corruption ACC_val.
        #[arg(long)]
        val_scores: Option<PathBuf>,
        /// Dataset name for the table row.
        #[arg(long, default_value = "dataset")]
        dataset: String,
        /// Margin R for the table row.
        #[arg(long)]
        margin: Option<f64>,
    },
    /// Draw the margin plot (ground-truth and prediction panels).
    Plot {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        margin: f64,
        /// Decision threshold on S (default: G-Mean threshold of the scores).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Apply one distortion to a PNG.
    Distort {
        #[arg(long)]
        input: PathBuf,
        /// Distortion kind, e.g. barrel, perspective, polar, noise.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1)]
        channels: usize,
    },
    /// Write a synthetic two-motif image folder (<out-dir>/<class>/*.png).
    MakeSynthetic {
        #[arg(long, default_value_t = 200)]
        n_id: usize,
        #[arg(long, default_value_t = 100)]
        n_ood: usize,
        #[arg(long, value_enum, default_value_t = MotifArg::Blobs)]
        motif: MotifArg,
        #[arg(long, default_value_t = 0.03)]
        noise: f64,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Test,
    Val,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MotifArg {
    Blobs,
    Stripes,
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let path = self.config.as_deref().context("this command needs --config")?;
        let mut cfg = RunConfig::load(path)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_root(dir);
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> Result<()> {
    let out = &cli.out_dir;
    match &cli.command {
        Command::TrainAe => {
            let cfg = cli.run_config()?;
            let run = experiment::train_ae(&cfg, out)?;
            let last = run.log.last().map_or(f64::NAN, |r| r.total);
            println!("stage 1 done: {} (final mse {last})", run.checkpoint_path.display());
        }
        Command::TrainHead { stage1 } => {
            let cfg = cli.run_config()?;
            let s1 = stage1.clone().unwrap_or_else(|| out.join(STAGE1_CKPT));
            let run = experiment::train_head(&cfg, &s1, out)?;
            println!(
                "stage 2 done: {} (backbone sha256 {})",
                run.checkpoint_path.display(),
                run.backbone_sha256
            );
        }
        Command::Score { checkpoint, split, mode, lambda, output } => {
            let cfg = cli.run_config()?;
            let ckpt = checkpoint.clone().unwrap_or_else(|| out.join(STAGE2_CKPT));
            let mode: ScoreMode = match mode {
                Some(m) => m.parse()?,
                None => cfg.scoring.mode,
            };
            let lambda = lambda.unwrap_or(cfg.scoring.lambda);
            let (split, default_name) = match split {
                SplitArg::Test => (ScoreSplit::Test, "scores.csv"),
                SplitArg::Val => (ScoreSplit::Val, "val_scores.csv"),
            };
            let output = output.clone().unwrap_or_else(|| out.join(default_name));
            let records = experiment::score(&cfg, &ckpt, split, mode, lambda, &output)?;
            println!("{} scores ({mode}) -> {}", records.len(), output.display());
        }
        Command::Eval { scores, val_scores, dataset, margin } => {
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let report = experiment::evaluate(scores, val_scores.as_deref(), dataset, *margin, out)?;
            print!("{}", report.to_text());
        }
        Command::Plot { scores, margin, threshold } => {
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let paths = experiment::plot_scores(scores, *margin, *threshold, out)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Distort { input, kind, output, channels } => {
            let kind: DistortionKind = kind.parse()?;
            let img = ImageSample::load_native(input, *channels)?;
            let spec = sample_spec(kind, cli.seed.unwrap_or(0));
            distort(&img, &spec)?.save_png(output)?;
            println!("{kind} -> {}", output.display());
        }
        Command::MakeSynthetic { n_id, n_ood, motif, noise, side, channels } => {
            let params = SyntheticParams {
                n_id: *n_id,
                n_ood: *n_ood,
                motif: match motif {
                    MotifArg::Blobs => Motif::Blobs,
                    MotifArg::Stripes => Motif::Stripes,
                },
                noise: *noise,
                seed: cli.seed.unwrap_or(0),
                side: *side,
                channels: *channels,
                train_fraction: 0.8,
            };
            let ds = make_synthetic(&params)?;
            let mut n = 0;
            for s in ds.train_id.iter().chain(&ds.test_mixture) {
                let path = out.join(format!("{}.png", s.source_id));
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                }
                s.save_png(&path)?;
                n += 1;
            }
            println!("{n} images -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
