//! TOML run configuration covering the dataset, architecture, both training stages,
//! scoring and the generated validation sets. One master `seed` feeds every stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataRoot, DatasetSpec, Motif, SyntheticParams};
use crate::distortions::DistortionKind;
use crate::error::{Result, TendError};
use crate::model::ArchitectureSpec;
use crate::rng;
use crate::scoring::{ScoreMode, DEFAULT_LAMBDA};
use crate::training::{MarginReduction, Stage, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Image-folder root, or `SYNTHETIC`.
    pub root: DataRoot,
    #[serde(default = "default_id_class")]
    pub id_class: String,
    #[serde(default)]
    pub ood_classes: Option<Vec<String>>,
    #[serde(default = "default_side")]
    pub input_side: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_id: usize,
    pub n_ood: usize,
    #[serde(default = "default_motif")]
    pub motif: Motif,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Section {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Section {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default)]
    pub margin_reduction: MarginReduction,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub supervised_mode: bool,
    #[serde(default)]
    pub ood_train_classes: Option<Vec<String>>,
    /// Share of the selected OOD classes moved into training in supervised mode.
    #[serde(default = "default_ood_fraction")]
    pub ood_train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringSection {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_mode")]
    pub mode: ScoreMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSection {
    #[serde(default = "default_val_kinds")]
    pub kinds: Vec<DistortionKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
    /// Defaults to the standard layout for the dataset's side and channel count.
    #[serde(default)]
    pub architecture: Option<ArchitectureSpec>,
    #[serde(default = "default_stage1")]
    pub stage1: Stage1Section,
    #[serde(default = "default_stage2")]
    pub stage2: Stage2Section,
    #[serde(default = "default_scoring")]
    pub scoring: ScoringSection,
    #[serde(default = "default_validation")]
    pub validation: ValidationSection,
}

fn default_id_class() -> String {
    "blobs".into()
}
fn default_side() -> usize {
    128
}
fn default_channels() -> usize {
    1
}
fn default_train_fraction() -> f64 {
    0.8
}
fn default_motif() -> Motif {
    Motif::Blobs
}
fn default_noise() -> f64 {
    0.03
}
fn default_epochs() -> usize {
    50
}
fn default_lr() -> f64 {
    0.001
}
fn default_batch() -> usize {
    16
}
fn default_warmup() -> usize {
    10
}
fn default_margin() -> f64 {
    250.0
}
fn default_ood_fraction() -> f64 {
    0.5
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_mode() -> ScoreMode {
    ScoreMode::Tend
}
fn default_val_kinds() -> Vec<DistortionKind> {
    DistortionKind::VALIDATION.to_vec()
}
fn default_stage1() -> Stage1Section {
    Stage1Section { epochs: default_epochs(), learning_rate: default_lr(), batch_size: default_batch() }
}
fn default_stage2() -> Stage2Section {
    Stage2Section {
        epochs: default_epochs(),
        warmup_epochs: default_warmup(),
        margin: default_margin(),
        margin_reduction: MarginReduction::MeanDim,
        learning_rate: default_lr(),
        batch_size: default_batch(),
        supervised_mode: false,
        ood_train_classes: None,
        ood_train_fraction: default_ood_fraction(),
    }
}
fn default_scoring() -> ScoringSection {
    ScoringSection { lambda: default_lambda(), mode: default_mode() }
}
fn default_validation() -> ValidationSection {
    ValidationSection { kinds: default_val_kinds() }
}

/// Seed streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub dataset: u64,
    pub stage1: u64,
    pub stage2: u64,
    pub validation: u64,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| TendError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TendError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| TendError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// A small synthetic run at side 64 (the desk-scale acceptance setting).
    pub fn synthetic_default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSection {
                root: DataRoot::Synthetic,
                id_class: Motif::Blobs.class_name().into(),
                ood_classes: None,
                input_side: 64,
                channels: 1,
                train_fraction: 0.8,
            },
            synthetic: Some(SyntheticSection { n_id: 200, n_ood: 100, motif: Motif::Blobs, noise: 0.03 }),
            architecture: None,
            stage1: Stage1Section { epochs: 30, ..default_stage1() },
            stage2: Stage2Section { epochs: 30, ..default_stage2() },
            scoring: default_scoring(),
            validation: default_validation(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture()?.validate()?;
        self.dataset_spec().validate()?;
        if self.dataset.root == DataRoot::Synthetic {
            let syn = self
                .synthetic
                .as_ref()
                .ok_or_else(|| TendError::Config("root = \"SYNTHETIC\" needs a [synthetic] section".into()))?;
            if syn.motif.class_name() != self.dataset.id_class {
                return Err(TendError::Config(format!(
                    "synthetic id_class must be `{}` for motif {:?}",
                    syn.motif.class_name(),
                    syn.motif
                )));
            }
        }
        self.stage1_config().validate()?;
        self.stage2_config().validate()?;
        if !(0.0..=1.0).contains(&self.scoring.lambda) {
            return Err(TendError::Config(format!("lambda must lie in [0, 1], got {}", self.scoring.lambda)));
        }
        if let Some(k) = self.validation.kinds.iter().find(|k| !DistortionKind::VALIDATION.contains(k)) {
            return Err(TendError::Config(format!("`{k}` is a training distortion, not a validation one")));
        }
        Ok(())
    }

    pub fn seeds(&self) -> RunSeeds {
        RunSeeds {
            dataset: rng::derive(self.seed, 10),
            stage1: rng::derive(self.seed, 11),
            stage2: rng::derive(self.seed, 12),
            validation: rng::derive(self.seed, 13),
        }
    }

    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        let arch = self
            .architecture
            .clone()
            .unwrap_or_else(|| ArchitectureSpec::with_input(self.dataset.input_side, self.dataset.channels));
        if arch.input_side != self.dataset.input_side || arch.channels != self.dataset.channels {
            return Err(TendError::Config(
                "architecture input_side/channels disagree with the dataset section".into(),
            ));
        }
        Ok(arch)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            root: self.dataset.root.clone(),
            id_class: self.dataset.id_class.clone(),
            ood_classes: self.dataset.ood_classes.clone(),
            input_side: self.dataset.input_side,
            channels: self.dataset.channels,
            train_fraction: self.dataset.train_fraction,
            seed: self.seeds().dataset,
        }
    }

    pub fn synthetic_params(&self) -> Option<SyntheticParams> {
        self.synthetic.as_ref().map(|s| SyntheticParams {
            n_id: s.n_id,
            n_ood: s.n_ood,
            motif: s.motif,
            noise: s.noise,
            seed: self.seeds().dataset,
            side: self.dataset.input_side,
            channels: self.dataset.channels,
            train_fraction: self.dataset.train_fraction,
        })
    }

    pub fn stage1_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.stage1.learning_rate,
            ..TrainConfig::stage1(self.stage1.epochs, self.stage1.batch_size, self.seeds().stage1)
        }
    }

    pub fn stage2_config(&self) -> TrainConfig {
        let s = &self.stage2;
        TrainConfig {
            stage: Stage::Stage2,
            epochs: s.epochs,
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            warmup_epochs: s.warmup_epochs,
            margin: s.margin,
            margin_reduction: s.margin_reduction,
            seed: self.seeds().stage2,
            supervised_mode: s.supervised_mode,
            ood_train_classes: s.ood_train_classes.clone(),
        }
    }

    /// Resolves a relative folder root against the config file's directory.
    pub fn resolve_root(&mut self, config_dir: &Path) {
        if let DataRoot::Folder(p) = &self.dataset.root {
            if p.is_relative() {
                self.dataset.root = DataRoot::Folder(config_dir.join(p));
            }
        }
    }

    pub fn folder_root(&self) -> Option<PathBuf> {
        match &self.dataset.root {
            DataRoot::Folder(p) => Some(p.clone()),
            DataRoot::Synthetic => None,
        }
    }
}
