//! One-vs-rest dataset construction: image folders (`root/<class>/<files>`) and a
//! synthetic two-motif generator for desk-scale runs.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TendError};
use crate::image::{ImageSample, Label, Split};
use crate::rng;

/// Where a dataset comes from: an image-folder root, or the synthetic generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum DataRoot {
    Folder(PathBuf),
    Synthetic,
}

impl From<String> for DataRoot {
    fn from(s: String) -> Self {
        if s == "SYNTHETIC" {
            DataRoot::Synthetic
        } else {
            DataRoot::Folder(PathBuf::from(s))
        }
    }
}

impl From<DataRoot> for String {
    fn from(r: DataRoot) -> Self {
        match r {
            DataRoot::Synthetic => "SYNTHETIC".into(),
            DataRoot::Folder(p) => p.display().to_string(),
        }
    }
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root: DataRoot,
    pub id_class: String,
    /// `None` means every other class folder.
    #[serde(default)]
    pub ood_classes: Option<Vec<String>>,
    pub input_side: usize,
    pub channels: usize,
    /// Fraction of ID images used for training; the rest join the test mixture.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(TendError::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if let Some(ood) = &self.ood_classes {
            if ood.contains(&self.id_class) {
                return Err(TendError::Config(format!("id_class `{}` is also listed as OOD", self.id_class)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Motif {
    /// A single Gaussian blob with random position and width.
    Blobs,
    /// Sinusoidal stripes with random orientation, frequency and phase.
    Stripes,
}

impl Motif {
    pub fn other(self) -> Motif {
        match self {
            Motif::Blobs => Motif::Stripes,
            Motif::Stripes => Motif::Blobs,
        }
    }

    pub fn class_name(self) -> &'static str {
        match self {
            Motif::Blobs => "blobs",
            Motif::Stripes => "stripes",
        }
    }
}

impl FromStr for Motif {
    type Err = TendError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BLOBS" => Ok(Motif::Blobs),
            "STRIPES" => Ok(Motif::Stripes),
            other => Err(TendError::Config(format!("unknown motif `{other}`"))),
        }
    }
}

impl fmt::Display for Motif {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.class_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub n_id: usize,
    pub n_ood: usize,
    /// Motif of the ID class; OOD samples use the other one.
    pub motif: Motif,
    /// Standard deviation of additive pixel noise (clamped to `[0, 1]` afterwards).
    pub noise: f64,
    pub seed: u64,
    pub side: usize,
    pub channels: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

impl SyntheticParams {
    pub fn new(n_id: usize, n_ood: usize, seed: u64) -> Self {
        Self {
            n_id,
            n_ood,
            motif: Motif::Blobs,
            noise: 0.03,
            seed,
            side: 64,
            channels: 1,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub source_id: String,
    pub path: String,
    pub class: String,
    pub label: String,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train_id: Vec<ImageSample>,
    /// Real OOD training samples; only populated for the supervised ablation.
    pub train_ood: Vec<ImageSample>,
    pub test_mixture: Vec<ImageSample>,
    pub skipped: Vec<SkippedFile>,
    pub manifest: Vec<ManifestRow>,
}

/// Class name encoded as the `source_id` prefix (`class/file`).
pub fn class_of(source_id: &str) -> &str {
    source_id.split_once('/').map_or(source_id, |(c, _)| c)
}

fn manifest_row(s: &ImageSample, path: &str) -> ManifestRow {
    ManifestRow {
        source_id: s.source_id.clone(),
        path: path.to_string(),
        class: class_of(&s.source_id).to_string(),
        label: s.label.to_string(),
        split: s.split.to_string(),
    }
}

impl Dataset {
    /// Moves `⌊fraction · n⌋` OOD test images of each listed class (all OOD classes when
    /// `classes` is `None`) into `train_ood`, for the supervised ablation.
    pub fn hold_out_ood(&mut self, fraction: f64, classes: Option<&[String]>, seed: u64) -> Result<()> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(TendError::Config(format!("OOD hold-out fraction must lie in [0, 1), got {fraction}")));
        }
        let selected = |s: &ImageSample| {
            s.label == Label::Ood && classes.is_none_or(|cs| cs.iter().any(|c| c == class_of(&s.source_id)))
        };
        let candidates: Vec<usize> = (0..self.test_mixture.len())
            .filter(|&i| selected(&self.test_mixture[i]))
            .collect();
        if candidates.is_empty() {
            return Err(TendError::Data("no OOD samples match the requested training classes".into()));
        }
        let mut order = candidates.clone();
        order.shuffle(&mut rng::seeded(rng::derive(seed, 0x00D)));
        let take = (fraction * candidates.len() as f64).floor() as usize;
        let mut chosen: Vec<usize> = order[..take].to_vec();
        chosen.sort_unstable();
        for &i in chosen.iter().rev() {
            let s = self.test_mixture.remove(i).with_split(Split::Train);
            self.train_ood.push(s);
        }
        self.train_ood.reverse();
        for row in &mut self.manifest {
            if self.train_ood.iter().any(|s| s.source_id == row.source_id) {
                row.split = Split::Train.to_string();
            }
        }
        Ok(())
    }

    pub fn write_manifest(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.manifest {
            w.serialize(row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::derive(seed, 0x5917)));
    let n_train = (train_fraction * n as f64).floor() as usize;
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| TendError::io(dir, e))? {
        let path = entry.map_err(|e| TendError::io(dir, e))?.path();
        if path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads `root/<class>/<images>` into an ID training split and a test mixture.
/// Undecodable files are skipped and reported in [`Dataset::skipped`].
pub fn ingest(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = match &spec.root {
        DataRoot::Folder(p) => p,
        DataRoot::Synthetic => {
            return Err(TendError::Config("a SYNTHETIC root is built with make_synthetic".into()))
        }
    };
    if !root.is_dir() {
        return Err(TendError::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let classes: Vec<String> = sorted_entries(root, true)?.iter().map(|p| file_name(p)).collect();
    if !classes.contains(&spec.id_class) {
        return Err(TendError::Data(format!(
            "id_class `{}` not found under {} (classes: {})",
            spec.id_class,
            root.display(),
            classes.join(", ")
        )));
    }
    let ood_classes: Vec<String> = match &spec.ood_classes {
        Some(list) => {
            if let Some(missing) = list.iter().find(|c| !classes.contains(c)) {
                return Err(TendError::Data(format!("OOD class `{missing}` not found")));
            }
            list.clone()
        }
        None => classes.iter().filter(|c| **c != spec.id_class).cloned().collect(),
    };

    let mut ds = Dataset::default();
    let load_class = |class: &str, label: Label, ds: &mut Dataset| -> Result<Vec<(ImageSample, String)>> {
        let mut out = Vec::new();
        for path in sorted_entries(&root.join(class), false)? {
            match image::open(&path) {
                Ok(img) => {
                    let s = ImageSample::from_dynamic(&img, spec.channels, spec.input_side)?
                        .with_label(label)
                        .with_source_id(format!("{class}/{}", file_name(&path)));
                    out.push((s, path.display().to_string()));
                }
                Err(e) => {
                    warn!("skipping {}: {e}", path.display());
                    ds.skipped.push(SkippedFile { path, reason: e.to_string() });
                }
            }
        }
        Ok(out)
    };

    let id = load_class(&spec.id_class, Label::Id, &mut ds)?;
    if id.is_empty() {
        return Err(TendError::Data(format!("id_class `{}` has no readable images", spec.id_class)));
    }
    let (train, test) = split_indices(id.len(), spec.train_fraction, spec.seed);
    for i in train {
        let (s, p) = &id[i];
        let s = s.clone().with_split(Split::Train);
        ds.manifest.push(manifest_row(&s, p));
        ds.train_id.push(s);
    }
    for i in test {
        let (s, p) = &id[i];
        let s = s.clone().with_split(Split::Test);
        ds.manifest.push(manifest_row(&s, p));
        ds.test_mixture.push(s);
    }
    for class in &ood_classes {
        for (s, p) in load_class(class, Label::Ood, &mut ds)? {
            let s = s.with_split(Split::Test);
            ds.manifest.push(manifest_row(&s, &p));
            ds.test_mixture.push(s);
        }
    }
    Ok(ds)
}

fn motif_image(motif: Motif, side: usize, channels: usize, noise: f64, seed: u64) -> ImageSample {
    let mut r = rng::seeded(seed);
    let s = side as f64;
    let field: Box<dyn Fn(f64, f64) -> f64> = match motif {
        Motif::Blobs => {
            let cx = r.random_range(0.3..0.7) * s;
            let cy = r.random_range(0.3..0.7) * s;
            let w = r.random_range(0.08..0.16) * s;
            Box::new(move |x, y| {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                0.1 + 0.8 * (-d2 / (2.0 * w * w)).exp()
            })
        }
        Motif::Stripes => {
            let theta = r.random_range(0.0..std::f64::consts::PI);
            let freq = r.random_range(3.0..6.0);
            let phase = r.random_range(0.0..std::f64::consts::TAU);
            let (c, sn) = (theta.cos(), theta.sin());
            Box::new(move |x, y| {
                let u = (x * c + y * sn) / s;
                0.5 + 0.4 * (std::f64::consts::TAU * freq * u + phase).sin()
            })
        }
    };
    let normal = (noise > 0.0).then(|| Normal::new(0.0, noise).expect("noise validated"));
    let plane: Vec<f64> = (0..side * side)
        .map(|i| {
            let v = field((i % side) as f64 + 0.5, (i / side) as f64 + 0.5);
            match &normal {
                Some(n) => (v + n.sample(&mut r)).clamp(0.0, 1.0),
                None => v,
            }
        })
        .collect();
    ImageSample::from_fn(side, channels, |_, y, x| plane[y * side + x])
}

/// Builds a separable two-motif dataset: ID images of `params.motif`, OOD images of
/// the other motif. The ID set is split by `train_fraction`; all OOD goes to test.
pub fn make_synthetic(params: &SyntheticParams) -> Result<Dataset> {
    if params.n_id == 0 || params.n_ood == 0 {
        return Err(TendError::Config("synthetic n_id and n_ood must be positive".into()));
    }
    if !(params.noise >= 0.0 && params.noise.is_finite()) {
        return Err(TendError::Config(format!("synthetic noise must be ≥ 0, got {}", params.noise)));
    }
    if !(params.train_fraction > 0.0 && params.train_fraction < 1.0) {
        return Err(TendError::Config("train_fraction must lie in (0, 1)".into()));
    }
    if params.side < 8 || !(params.channels == 1 || params.channels == 3) {
        return Err(TendError::Config("synthetic images need side ≥ 8 and 1 or 3 channels".into()));
    }
    let make = |motif: Motif, stream: u64, i: usize, label: Label| {
        let seed = rng::derive(rng::derive(params.seed, stream), i as u64);
        motif_image(motif, params.side, params.channels, params.noise, seed)
            .with_label(label)
            .with_source_id(format!("{}/{i:05}", motif.class_name()))
    };
    let mut ds = Dataset::default();
    let (train, test) = split_indices(params.n_id, params.train_fraction, params.seed);
    for i in train {
        let s = make(params.motif, 1, i, Label::Id).with_split(Split::Train);
        ds.manifest.push(manifest_row(&s, ""));
        ds.train_id.push(s);
    }
    for i in test {
        let s = make(params.motif, 1, i, Label::Id).with_split(Split::Test);
        ds.manifest.push(manifest_row(&s, ""));
        ds.test_mixture.push(s);
    }
    for i in 0..params.n_ood {
        let s = make(params.motif.other(), 2, i, Label::Ood).with_split(Split::Test);
        ds.manifest.push(manifest_row(&s, ""));
        ds.test_mixture.push(s);
    }
    Ok(ds)
}

/// Leave-one-out k-nearest-neighbour accuracy in pixel space (majority vote, ties to OOD).
/// Used to certify that a dataset is separable before trusting it in acceptance runs.
pub fn knn_separability(samples: &[ImageSample], k: usize) -> Result<f64> {
    if samples.len() <= k || k == 0 {
        return Err(TendError::Data(format!("need more than k = {k} samples, got {}", samples.len())));
    }
    let mut correct = 0usize;
    for (i, a) in samples.iter().enumerate() {
        let mut dists: Vec<(f64, usize)> = samples
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, b)| {
                let d: f64 = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum();
                (d, j)
            })
            .collect();
        dists.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let ood_votes = dists[..k].iter().filter(|(_, j)| samples[*j].label == Label::Ood).count();
        let predicted = if 2 * ood_votes >= k { Label::Ood } else { Label::Id };
        correct += (predicted == a.label) as usize;
    }
    Ok(correct as f64 / samples.len() as f64)
}
