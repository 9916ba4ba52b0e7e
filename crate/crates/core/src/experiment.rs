//! File-level pipeline steps shared by the command line and the acceptance suite.
//!
//! Every step writes into a run directory through atomic writes and records what it
//! produced in `manifest.json`. CSV artifacts hold no wall-clock values, so identical
//! seeds give byte-identical files; timings live in the manifest only.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::atomic::{write_atomic, write_with};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, RunSeeds};
use crate::data::{ingest, make_synthetic, DataRoot, Dataset};
use crate::distortions::generate_validation_set;
use crate::error::{Result, TendError};
use crate::evaluation::{gmean_threshold, EvalReport, LabeledScore};
use crate::image::{ImageSample, Label};
use crate::plot::{self, Decision};
use crate::scoring::{read_scores_csv, write_scores_csv, ScoreMode, ScoreRecord, Scorer, Stage2Parts};
use crate::training::{train_stage1, train_stage2, EpochRecord, Stage};

pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const STAGE1_LOSS: &str = "stage1_loss.csv";
pub const STAGE2_LOSS: &str = "stage2_loss.csv";
pub const DATASET_MANIFEST: &str = "dataset_manifest.csv";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const RUN_MANIFEST: &str = "manifest.json";
pub const REPORT: &str = "report.txt";
pub const TABLE: &str = "table.csv";

/// What a run directory contains and how it was produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: Option<String>,
    pub seeds: Option<RunSeeds>,
    /// Artifact role → file name inside the run directory.
    pub artifacts: BTreeMap<String, String>,
    /// Step name → wall-clock seconds.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn load_or_default(out_dir: &Path) -> Result<Self> {
        let path = out_dir.join(RUN_MANIFEST);
        if !path.exists() {
            return Ok(Self { tool_version: env!("CARGO_PKG_VERSION").into(), ..Self::default() });
        }
        let text = fs::read_to_string(&path).map_err(|e| TendError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| TendError::Data(format!("{}: {e}", path.display())))
    }

    fn record(&mut self, role: &str, file: &Path, out_dir: &Path) {
        let rel = file.strip_prefix(out_dir).unwrap_or(file);
        self.artifacts.insert(role.into(), rel.display().to_string());
    }

    fn save(&self, out_dir: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_atomic(&out_dir.join(RUN_MANIFEST), &json)
    }

    /// Paths of referenced artifacts that are missing on disk.
    pub fn missing_artifacts(&self, out_dir: &Path) -> Vec<PathBuf> {
        self.artifacts
            .values()
            .map(|f| out_dir.join(f))
            .filter(|p| !p.exists())
            .collect()
    }
}

fn update_manifest(
    cfg: Option<&RunConfig>,
    out_dir: &Path,
    step: &str,
    seconds: f64,
    artifacts: &[(&str, &Path)],
) -> Result<()> {
    let mut m = RunManifest::load_or_default(out_dir)?;
    m.tool_version = env!("CARGO_PKG_VERSION").into();
    if let Some(cfg) = cfg {
        m.config = Some(cfg.to_toml());
        m.seeds = Some(cfg.seeds());
    }
    for (role, path) in artifacts {
        m.record(role, path, out_dir);
    }
    m.timings.insert(step.into(), seconds);
    m.save(out_dir)
}

/// Builds the dataset described by `cfg`, holding out real OOD training data in
/// supervised mode.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let mut ds = match cfg.dataset.root {
        DataRoot::Synthetic => make_synthetic(&cfg.synthetic_params().expect("validated config"))?,
        DataRoot::Folder(_) => ingest(&cfg.dataset_spec())?,
    };
    if cfg.stage2.supervised_mode {
        ds.hold_out_ood(
            cfg.stage2.ood_train_fraction,
            cfg.stage2.ood_train_classes.as_deref(),
            cfg.seeds().dataset,
        )?;
    }
    if !ds.skipped.is_empty() {
        log::warn!("{} unreadable files skipped", ds.skipped.len());
    }
    Ok(ds)
}

/// Generated validation corruptions of every ID image (train and held-out).
pub fn validation_samples(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<ImageSample>> {
    let id: Vec<ImageSample> = ds
        .train_id
        .iter()
        .chain(ds.test_mixture.iter().filter(|s| s.label == Label::Id))
        .cloned()
        .collect();
    let mut out = Vec::new();
    for &kind in &cfg.validation.kinds {
        out.extend(generate_validation_set(&id, kind, cfg.seeds().validation)?);
    }
    Ok(out)
}

fn write_loss_csv(path: &Path, header: &str, log: &[EpochRecord], stage: Stage) -> Result<()> {
    let mut s = format!("{header}\n");
    for r in log {
        match stage {
            Stage::Stage1 => writeln!(s, "{},{}", r.epoch, r.total),
            Stage::Stage2 => writeln!(s, "{},{},{},{},{}", r.epoch, r.total, r.bce, r.margin_in, r.margin_out),
        }
        .expect("string write");
    }
    write_atomic(path, s.as_bytes())
}

fn snapshot(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    let path = out_dir.join(CONFIG_SNAPSHOT);
    write_atomic(&path, cfg.to_toml().as_bytes())?;
    Ok(path)
}

#[derive(Debug)]
pub struct Stage1Run {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub checkpoint_path: PathBuf,
}

/// Stage 1: trains the autoencoder and writes `stage1.ckpt` plus its loss CSV.
pub fn train_ae(cfg: &RunConfig, out_dir: &Path) -> Result<Stage1Run> {
    let start = Instant::now();
    let ds = load_dataset(cfg)?;
    let arch = cfg.architecture()?;
    let tc = cfg.stage1_config();
    let (backbone, log) = train_stage1(&ds.train_id, &arch, &tc)?;
    let checkpoint = Checkpoint::stage1(backbone, tc.seed);

    fs::create_dir_all(out_dir).map_err(|e| TendError::io(out_dir, e))?;
    let ckpt_path = out_dir.join(STAGE1_CKPT);
    let loss_path = out_dir.join(STAGE1_LOSS);
    let manifest_path = out_dir.join(DATASET_MANIFEST);
    write_with(&manifest_path, |buf| ds.write_manifest(buf))?;
    write_loss_csv(&loss_path, "epoch,mse", &log, Stage::Stage1)?;
    checkpoint.save(&ckpt_path)?;
    let cfg_path = snapshot(cfg, out_dir)?;
    update_manifest(
        Some(cfg),
        out_dir,
        "train_ae",
        start.elapsed().as_secs_f64(),
        &[
            ("stage1_checkpoint", &ckpt_path),
            ("stage1_loss", &loss_path),
            ("dataset_manifest", &manifest_path),
            ("config", &cfg_path),
        ],
    )?;
    info!("wrote {}", ckpt_path.display());
    Ok(Stage1Run { checkpoint, log, checkpoint_path: ckpt_path })
}

#[derive(Debug)]
pub struct Stage2Run {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub checkpoint_path: PathBuf,
    pub backbone_sha256: String,
}

/// Stage 2: trains the head on top of a frozen `STAGE1` backbone.
pub fn train_head(cfg: &RunConfig, stage1: &Path, out_dir: &Path) -> Result<Stage2Run> {
    let start = Instant::now();
    let s1 = Checkpoint::load(stage1)?;
    s1.expect_stage(Stage::Stage1)?;
    if s1.backbone.arch() != &cfg.architecture()? {
        return Err(TendError::Config("config architecture differs from the stage-1 checkpoint".into()));
    }
    let before = s1.backbone.fingerprint();
    let ds = load_dataset(cfg)?;
    let tc = cfg.stage2_config();
    let outcome = train_stage2(&ds.train_id, &tc, &s1.backbone, Some(&ds.train_ood))?;
    let checkpoint = Checkpoint::stage2(&s1, outcome.head, outcome.center, tc.margin, tc.margin_reduction, tc.seed);
    if checkpoint.backbone.fingerprint() != before {
        return Err(TendError::Contract("backbone hash changed during stage 2".into()));
    }

    fs::create_dir_all(out_dir).map_err(|e| TendError::io(out_dir, e))?;
    let ckpt_path = out_dir.join(STAGE2_CKPT);
    let loss_path = out_dir.join(STAGE2_LOSS);
    write_loss_csv(&loss_path, "epoch,total,bce,margin_in,margin_out", &outcome.log, Stage::Stage2)?;
    checkpoint.save(&ckpt_path)?;
    let cfg_path = snapshot(cfg, out_dir)?;
    update_manifest(
        Some(cfg),
        out_dir,
        "train_head",
        start.elapsed().as_secs_f64(),
        &[("stage2_checkpoint", &ckpt_path), ("stage2_loss", &loss_path), ("config", &cfg_path)],
    )?;
    Ok(Stage2Run { checkpoint, log: outcome.log, checkpoint_path: ckpt_path, backbone_sha256: before })
}

/// Which samples to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreSplit {
    /// Held-out ID plus OOD test images.
    Test,
    /// Generated validation corruptions of the ID images.
    Val,
}

pub fn score_checkpoint(checkpoint: &Checkpoint, samples: &[ImageSample], mode: ScoreMode, lambda: f64) -> Result<Vec<ScoreRecord>> {
    let parts = match (&checkpoint.head, &checkpoint.center, checkpoint.margin) {
        (Some(head), Some(center), Some(margin)) => Some(Stage2Parts { head, center, margin }),
        _ => None,
    };
    Scorer::new(&checkpoint.backbone, parts, lambda, mode)?.score_batch(samples)
}

/// Scores a split of the configured dataset and writes the scores CSV to `out`.
pub fn score(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: ScoreSplit,
    mode: ScoreMode,
    lambda: f64,
    out: &Path,
) -> Result<Vec<ScoreRecord>> {
    let start = Instant::now();
    let ck = Checkpoint::load(checkpoint)?;
    let ds = load_dataset(cfg)?;
    let samples = match split {
        ScoreSplit::Test => ds.test_mixture,
        ScoreSplit::Val => validation_samples(cfg, &ds)?,
    };
    let records = score_checkpoint(&ck, &samples, mode, lambda)?;
    write_with(out, |buf| write_scores_csv(&records, buf))?;
    if let Some(dir) = out.parent() {
        let role = match split {
            ScoreSplit::Test => format!("scores_{mode}"),
            ScoreSplit::Val => format!("val_scores_{mode}"),
        };
        update_manifest(None, dir, &role, start.elapsed().as_secs_f64(), &[(&role, out)])?;
    }
    Ok(records)
}

fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let f = fs::File::open(path).map_err(|e| TendError::io(path, e))?;
    read_scores_csv(f).map_err(|e| TendError::Data(format!("{}: {e}", path.display())))
}

/// Evaluates a scores CSV (and optional validation scores); writes `report.txt` and
/// `table.csv` into `out_dir`.
pub fn evaluate(
    scores_path: &Path,
    val_path: Option<&Path>,
    dataset: &str,
    margin: Option<f64>,
    out_dir: &Path,
) -> Result<EvalReport> {
    let start = Instant::now();
    let test = read_scores(scores_path)?;
    let val = val_path.map(read_scores).transpose()?;
    let report = EvalReport::from_records(&test, val.as_deref())?;
    let mode = test.first().map(|r| r.mode.to_string()).unwrap_or_default();
    let report_path = out_dir.join(REPORT);
    let table_path = out_dir.join(TABLE);
    write_atomic(&report_path, report.to_text().as_bytes())?;
    let table = format!("{}\n{}\n", report.table_header(), report.table_row(dataset, &mode, margin));
    write_atomic(&table_path, table.as_bytes())?;
    update_manifest(
        None,
        out_dir,
        "eval",
        start.elapsed().as_secs_f64(),
        &[("report", &report_path), ("table", &table_path)],
    )?;
    Ok(report)
}

/// Writes `truth.png`, `prediction.png` and `plot_legend.txt`. Without an explicit
/// threshold the G-Mean threshold of the scores is used, falling back to the margin
/// circle when the scores hold a single class.
pub fn plot_scores(scores_path: &Path, margin: f64, threshold: Option<f64>, out_dir: &Path) -> Result<[PathBuf; 3]> {
    let records = read_scores(scores_path)?;
    let decision = match threshold {
        Some(t) => Decision::Threshold(t),
        None => LabeledScore::from_records(&records)
            .and_then(|s| gmean_threshold(&s))
            .map_or(Decision::Margin, |th| Decision::Threshold(th.t)),
    };
    let (truth, pred) = plot::render(&records, margin, decision)?;
    let paths = [out_dir.join("truth.png"), out_dir.join("prediction.png"), out_dir.join("plot_legend.txt")];
    for (img, path) in [(&truth, &paths[0]), (&pred, &paths[1])] {
        write_with(path, |buf| {
            img.write_to(&mut std::io::Cursor::new(buf), image::ImageFormat::Png)?;
            Ok(())
        })?;
    }
    let legend = format!("{}  R = {margin}\n  decision = {decision:?}\n", plot::LEGEND);
    write_atomic(&paths[2], legend.as_bytes())?;
    Ok(paths)
}

/// Summary of a full in-process pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub reports: BTreeMap<ScoreMode, EvalReport>,
    pub backbone_sha256_before: String,
    pub backbone_sha256_after: String,
    pub stage1_log: Vec<EpochRecord>,
    pub stage2_log: Vec<EpochRecord>,
    /// Mean `‖c − O‖²` over ID training images and over one fresh pseudo-outlier each.
    pub mean_id_distance: f64,
    pub mean_pseudo_distance: f64,
    pub out_dir: PathBuf,
}

/// Trains both stages, then scores and evaluates every mode with validation sets.
/// Metric files land in `out_dir/<MODE>/`.
pub fn run_pipeline(cfg: &RunConfig, out_dir: &Path) -> Result<PipelineSummary> {
    let s1 = train_ae(cfg, out_dir)?;
    let s2 = train_head(cfg, &s1.checkpoint_path, out_dir)?;
    let ds = load_dataset(cfg)?;
    let ck = &s2.checkpoint;
    let (head, center) = (ck.head.as_ref().expect("stage 2"), ck.center.as_ref().expect("stage 2"));
    let pseudo: Vec<ImageSample> = ds
        .train_id
        .iter()
        .enumerate()
        .map(|(i, s)| crate::training::pseudo_outlier(s, cfg.seeds().validation, 0, i))
        .collect::<Result<_>>()?;
    let mean_id_distance = crate::training::mean_distance(&ds.train_id, &ck.backbone, head, center)?;
    let mean_pseudo_distance = crate::training::mean_distance(&pseudo, &ck.backbone, head, center)?;

    let mut reports = BTreeMap::new();
    for mode in ScoreMode::ALL {
        let dir = out_dir.join(mode.as_str());
        let scores = dir.join("scores.csv");
        let val = dir.join("val_scores.csv");
        score(cfg, &s2.checkpoint_path, ScoreSplit::Test, mode, cfg.scoring.lambda, &scores)?;
        score(cfg, &s2.checkpoint_path, ScoreSplit::Val, mode, cfg.scoring.lambda, &val)?;
        let margin = mode.needs_head().then_some(cfg.stage2.margin);
        let report = evaluate(&scores, Some(&val), "run", margin, &dir)?;
        reports.insert(mode, report);
    }
    Ok(PipelineSummary {
        reports,
        backbone_sha256_before: s2.backbone_sha256,
        backbone_sha256_after: ck.backbone.fingerprint(),
        stage1_log: s1.log,
        stage2_log: s2.log,
        mean_id_distance,
        mean_pseudo_distance,
        out_dir: out_dir.to_path_buf(),
    })
}
