//! Stage 1 (reconstruction) and stage 2 (discriminator + margin objective) training.
//!
//! Stage 2 never takes the backbone mutably: the encoder is a frozen feature extractor,
//! and its fingerprint is checked before and after the loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info};
use ndarray::{concatenate, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::distortions::{distort, sample_train_spec};
use crate::error::{Result, TendError};
use crate::image::{ImageSample, Label};
use crate::model::{images_to_batch, ArchitectureSpec, Backbone, Head};
use crate::nn::{sigmoid, Adam, Trainable};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "STAGE1")]
    Stage1,
    #[serde(rename = "STAGE2")]
    Stage2,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Stage1 => "STAGE1",
            Stage::Stage2 => "STAGE2",
        })
    }
}

/// How the per-dimension margin terms are reduced over the `K` feature dimensions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginReduction {
    /// `(1/K) Σ_i`, the default.
    #[default]
    MeanDim,
    /// `Σ_i`.
    SumDim,
}

impl MarginReduction {
    fn scale(self, k: usize) -> f64 {
        match self {
            MarginReduction::MeanDim => 1.0 / k as f64,
            MarginReduction::SumDim => 1.0,
        }
    }
}

impl FromStr for MarginReduction {
    type Err = TendError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_dim" => Ok(Self::MeanDim),
            "sum_dim" => Ok(Self::SumDim),
            other => Err(TendError::Config(format!("unknown margin reduction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub margin: f64,
    #[serde(default)]
    pub margin_reduction: MarginReduction,
    pub seed: u64,
    #[serde(default)]
    pub supervised_mode: bool,
    #[serde(default)]
    pub ood_train_classes: Option<Vec<String>>,
}

impl TrainConfig {
    pub fn stage1(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            stage: Stage::Stage1,
            epochs,
            learning_rate: 0.001,
            batch_size,
            warmup_epochs: 0,
            margin: 250.0,
            margin_reduction: MarginReduction::MeanDim,
            seed,
            supervised_mode: false,
            ood_train_classes: None,
        }
    }

    pub fn stage2(epochs: usize, warmup_epochs: usize, margin: f64, batch_size: usize, seed: u64) -> Self {
        Self {
            stage: Stage::Stage2,
            warmup_epochs,
            margin,
            ..Self::stage1(epochs, batch_size, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TendError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TendError::Config("learning_rate must be positive".into()));
        }
        if self.stage == Stage::Stage2 {
            if !(self.margin > 0.0 && self.margin.is_finite()) {
                return Err(TendError::Config(format!("margin R must be positive, got {}", self.margin)));
            }
            if self.warmup_epochs >= self.epochs {
                return Err(TendError::Config(format!(
                    "warmup_epochs ({}) must be below epochs ({})",
                    self.warmup_epochs, self.epochs
                )));
            }
        }
        Ok(())
    }
}

/// Mean compressed feature of the ID training set, fixed once computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Center {
    pub o: Vec<f64>,
    pub computed_at_epoch: usize,
}

/// Pixel-wise MSE averaged over pixels and channels.
pub fn reconstruction_loss(image: &ImageSample, recon: &ImageSample) -> Result<f64> {
    if image.side() != recon.side() || image.channels() != recon.channels() {
        return Err(TendError::shape(
            format!("{}x{}x{}", image.channels(), image.side(), image.side()),
            format!("{}x{}x{}", recon.channels(), recon.side(), recon.side()),
        ));
    }
    let n = image.pixels().len() as f64;
    Ok(image
        .pixels()
        .iter()
        .zip(recon.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

fn check_len(c: &[f64], o: &[f64]) -> Result<()> {
    if c.len() != o.len() || c.is_empty() {
        return Err(TendError::shape(format!("feature of length {}", o.len()), c.len()));
    }
    Ok(())
}

/// Unnormalized squared distance `‖c − O‖²`.
pub fn squared_distance(c: &[f64], o: &[f64]) -> f64 {
    c.iter().zip(o).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Pull term for ID features: reduced `Σ_i (c_i − O_i)²`.
pub fn margin_loss_in(c: &[f64], o: &[f64], reduction: MarginReduction) -> Result<f64> {
    check_len(c, o)?;
    Ok(squared_distance(c, o) * reduction.scale(c.len()))
}

/// Hinge push for distorted features: reduced `Σ_i max(R − (c_i − O_i)², 0)`.
pub fn margin_loss_out(c: &[f64], o: &[f64], margin: f64, reduction: MarginReduction) -> Result<f64> {
    check_len(c, o)?;
    if !(margin > 0.0) {
        return Err(TendError::Parameter(format!("margin R must be positive, got {margin}")));
    }
    let s: f64 = c
        .iter()
        .zip(o)
        .map(|(a, b)| (margin - (a - b) * (a - b)).max(0.0))
        .sum();
    Ok(s * reduction.scale(c.len()))
}

/// Numerically stable binary cross entropy on a logit.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stage2Loss {
    pub total: f64,
    pub bce: f64,
    /// `margin_in + margin_out`; zero when the margin term is disabled.
    pub margin: f64,
    pub margin_in: f64,
    pub margin_out: f64,
}

/// Margin settings for the stage-2 objective; `None` means BCE only.
#[derive(Debug, Clone, Copy)]
pub struct MarginTerm<'a> {
    pub center: &'a [f64],
    pub margin: f64,
    pub reduction: MarginReduction,
}

/// Objective and its gradients w.r.t. `c` and the logits. `targets[n]` is 1 for distorted
/// (OOD) rows and 0 for ID rows; BCE averages over all rows, each margin term over its class.
pub(crate) fn stage2_objective(
    c: &Array2<f64>,
    logits: &[f64],
    targets: &[f64],
    margin: Option<MarginTerm<'_>>,
) -> Result<(Stage2Loss, Array2<f64>, Vec<f64>)> {
    let n = logits.len();
    let n_id = targets.iter().filter(|&&t| t == 0.0).count();
    let n_ood = n - n_id;
    if n_id == 0 || n_ood == 0 {
        return Err(TendError::Training("stage-2 batches need both ID and distorted samples".into()));
    }
    let mut loss = Stage2Loss::default();
    let mut dz = vec![0.0; n];
    for i in 0..n {
        loss.bce += bce_with_logit(logits[i], targets[i]) / n as f64;
        dz[i] = (sigmoid(logits[i]) - targets[i]) / n as f64;
    }
    let mut dc = Array2::zeros(c.dim());
    if let Some(m) = margin {
        let k = c.ncols();
        let scale = m.reduction.scale(k);
        for (row, (crow, mut drow)) in c.axis_iter(Axis(0)).zip(dc.axis_iter_mut(Axis(0))).enumerate() {
            let crow = crow.as_slice().expect("row-major");
            if targets[row] == 0.0 {
                loss.margin_in += margin_loss_in(crow, m.center, m.reduction)? / n_id as f64;
                for ((d, ci), oi) in drow.iter_mut().zip(crow).zip(m.center) {
                    *d = 2.0 * (ci - oi) * scale / n_id as f64;
                }
            } else {
                loss.margin_out += margin_loss_out(crow, m.center, m.margin, m.reduction)? / n_ood as f64;
                for ((d, ci), oi) in drow.iter_mut().zip(crow).zip(m.center) {
                    let dev = ci - oi;
                    // Subgradient at the kink is taken as zero.
                    if m.margin - dev * dev > 0.0 {
                        *d = -2.0 * dev * scale / n_ood as f64;
                    }
                }
            }
        }
        loss.margin = loss.margin_in + loss.margin_out;
    }
    loss.total = loss.bce + loss.margin;
    Ok((loss, dc, dz))
}

/// Evaluates the stage-2 objective on an ID batch and a distorted batch with the
/// inference-mode model. `center` must be present when a margin is requested.
pub fn stage2_loss(
    batch_id: &[ImageSample],
    batch_distorted: &[ImageSample],
    center: Option<&Center>,
    margin: Option<(f64, MarginReduction)>,
    backbone: &Backbone,
    head: &Head,
) -> Result<Stage2Loss> {
    if batch_id.is_empty() || batch_distorted.is_empty() {
        return Err(TendError::Data("stage-2 loss needs non-empty ID and distorted batches".into()));
    }
    let term = match (margin, center) {
        (Some((r, reduction)), Some(c)) => Some(MarginTerm { center: &c.o, margin: r, reduction }),
        (Some(_), None) => {
            return Err(TendError::Contract("margin term requested before the center O exists".into()))
        }
        (None, _) => None,
    };
    let arch = backbone.arch();
    let x = images_to_batch(batch_id.iter().chain(batch_distorted), arch)?;
    let c = head.compress_batch(&backbone.encode_batch(&x));
    let z = head.logits(&c);
    let targets: Vec<f64> = (0..z.len()).map(|i| (i >= batch_id.len()) as u8 as f64).collect();
    Ok(stage2_objective(&c, &z, &targets, term)?.0)
}

/// One row of a training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Stage 1: reconstruction MSE. Stage 2: total objective.
    pub total: f64,
    pub bce: f64,
    pub margin_in: f64,
    pub margin_out: f64,
    pub seconds: f64,
}

fn check_id(data: &[ImageSample]) -> Result<()> {
    if data.is_empty() {
        return Err(TendError::Data("training set is empty".into()));
    }
    if let Some(bad) = data.iter().find(|s| s.label != Label::Id) {
        return Err(TendError::Data(format!(
            "training samples must be ID; `{}` is {}",
            bad.source_id, bad.label
        )));
    }
    Ok(())
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    idx
}

/// Mean reconstruction MSE of the inference-mode autoencoder over `data`.
pub fn mean_reconstruction_error(backbone: &Backbone, data: &[ImageSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(TendError::Data("no samples".into()));
    }
    let mut total = 0.0;
    for chunk in data.chunks(32) {
        let x = images_to_batch(chunk, backbone.arch())?;
        let y = backbone.reconstruct_batch(&x);
        total += (&x - &y).mapv(|v| v * v).sum();
    }
    let per = (backbone.arch().channels * backbone.arch().input_side.pow(2)) as f64;
    Ok(total / (per * data.len() as f64))
}

/// Trains the autoencoder on ID data. `epochs == 0` returns the initialized model.
pub fn train_stage1(
    data: &[ImageSample],
    arch: &ArchitectureSpec,
    cfg: &TrainConfig,
) -> Result<(Backbone, Vec<EpochRecord>)> {
    cfg.validate()?;
    if cfg.stage != Stage::Stage1 {
        return Err(TendError::Config("train_stage1 needs a stage-1 config".into()));
    }
    check_id(data)?;
    let mut model = Backbone::new(arch, cfg.seed)?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut log = Vec::with_capacity(cfg.epochs);
    let per_image = (arch.channels * arch.input_side * arch.input_side) as f64;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = shuffled(data.len(), rng::derive(cfg.seed, 1000 + epoch as u64));
        let mut sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = images_to_batch(idx.iter().map(|&i| &data[i]), arch)?;
            model.zero_grad();
            let y = model.forward_train(&x);
            let diff = &y - &x;
            let numel = per_image * idx.len() as f64;
            let loss = diff.mapv(|v| v * v).sum() / numel;
            if !loss.is_finite() {
                return Err(TendError::Training(format!(
                    "non-finite reconstruction loss at epoch {epoch}, batch {bi}"
                )));
            }
            model.backward(&(diff * (2.0 / numel)));
            opt.step(&mut model.params_mut());
            sum += loss * idx.len() as f64;
        }
        let rec = EpochRecord {
            epoch,
            total: sum / data.len() as f64,
            bce: 0.0,
            margin_in: 0.0,
            margin_out: 0.0,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!("stage1 epoch {epoch}: mse {:.6}", rec.total);
        log.push(rec);
    }
    model.mark_stage1_complete();
    Ok((model, log))
}

/// Encodes `data` with the frozen encoder, in order.
pub fn encode_all(backbone: &Backbone, data: &[ImageSample]) -> Result<Array4<f64>> {
    let arch = backbone.arch();
    let mut parts = Vec::new();
    for chunk in data.chunks(64) {
        parts.push(backbone.encode_batch(&images_to_batch(chunk, arch)?));
    }
    if parts.is_empty() {
        let s = arch.latent_side();
        return Ok(Array4::zeros((0, arch.latent_channels(), s, s)));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("matching latent shapes"))
}

fn compress_all(head: &Head, latents: &Array4<f64>) -> Array2<f64> {
    let mut parts = Vec::new();
    for start in (0..latents.dim().0).step_by(64) {
        let end = (start + 64).min(latents.dim().0);
        parts.push(head.compress_batch(&latents.slice(ndarray::s![start..end, .., .., ..]).to_owned()));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("matching feature shapes")
}

/// `O` = mean compressed feature over all ID training samples (inference mode).
pub fn compute_center(data: &[ImageSample], backbone: &Backbone, head: &Head, epoch: usize) -> Result<Center> {
    if data.is_empty() {
        return Err(TendError::Data("cannot compute a center from an empty ID set".into()));
    }
    let c = compress_all(head, &encode_all(backbone, data)?);
    let o = c.mean_axis(Axis(0)).expect("non-empty").to_vec();
    Ok(Center { o, computed_at_epoch: epoch })
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub head: Head,
    pub center: Center,
    pub log: Vec<EpochRecord>,
}

/// Distorted counterpart of ID sample `index` for `epoch`.
pub fn pseudo_outlier(sample: &ImageSample, seed: u64, epoch: usize, index: usize) -> Result<ImageSample> {
    let spec = sample_train_spec(rng::derive(rng::derive(seed, 2000 + epoch as u64), index as u64));
    distort(sample, &spec)
}

/// Trains the head against pseudo-outliers (or, in supervised mode, against `ood_train`).
///
/// Warm-up epochs optimize BCE only; then `O` is computed and the margin terms join the
/// objective. Supervised mode is BCE-only throughout, with the center still recorded.
pub fn train_stage2(
    data: &[ImageSample],
    cfg: &TrainConfig,
    backbone: &Backbone,
    ood_train: Option<&[ImageSample]>,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    if cfg.stage != Stage::Stage2 {
        return Err(TendError::Config("train_stage2 needs a stage-2 config".into()));
    }
    check_id(data)?;
    if !backbone.stage1_complete() {
        return Err(TendError::Contract("stage 2 needs a backbone that completed stage 1".into()));
    }
    let real_ood = if cfg.supervised_mode {
        let ood = ood_train.filter(|o| !o.is_empty()).ok_or_else(|| {
            TendError::Config("supervised mode needs real OOD training samples".into())
        })?;
        Some(ood)
    } else {
        None
    };
    let frozen = backbone.fingerprint();
    let arch = backbone.arch();
    let mut head = Head::new(arch, cfg.seed)?;
    let mut opt = Adam::new(cfg.learning_rate);
    let id_latents = encode_all(backbone, data)?;
    let mut center: Option<Center> = None;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        if epoch == cfg.warmup_epochs {
            let c = compute_center(data, backbone, &head, epoch)?;
            debug!("center computed after {epoch} warm-up epochs");
            center = Some(c);
        }
        let use_margin = !cfg.supervised_mode && center.is_some();
        let order = shuffled(data.len(), rng::derive(cfg.seed, 3000 + epoch as u64));
        let ood_order = real_ood.map(|o| shuffled(o.len(), rng::derive(cfg.seed, 4000 + epoch as u64)));
        let mut sums = Stage2Loss::default();
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let negatives: Vec<ImageSample> = match (real_ood, &ood_order) {
                (Some(ood), Some(perm)) => (0..idx.len())
                    .map(|j| ood[perm[(bi * cfg.batch_size + j) % perm.len()]].clone())
                    .collect(),
                _ => idx
                    .iter()
                    .map(|&i| pseudo_outlier(&data[i], cfg.seed, epoch, i))
                    .collect::<Result<_>>()?,
            };
            let id_part = id_latents.select(Axis(0), idx);
            let neg_part = backbone.encode_batch(&images_to_batch(&negatives, arch)?);
            let latents = concatenate(Axis(0), &[id_part.view(), neg_part.view()]).expect("latent shapes");
            let targets: Vec<f64> = (0..latents.dim().0).map(|r| (r >= idx.len()) as u8 as f64).collect();

            head.zero_grad();
            let (c, z) = head.forward_train(&latents);
            let term = if use_margin {
                let ctr = center.as_ref().expect("use_margin implies center");
                Some(MarginTerm { center: &ctr.o, margin: cfg.margin, reduction: cfg.margin_reduction })
            } else {
                None
            };
            let (loss, dc, dz) = stage2_objective(&c, &z, &targets, term)?;
            if !loss.total.is_finite() {
                return Err(TendError::Training(format!(
                    "non-finite stage-2 loss at epoch {epoch}, batch {bi}: {loss:?}"
                )));
            }
            head.backward(&dc, &dz);
            opt.step(&mut head.params_mut());
            sums.total += loss.total;
            sums.bce += loss.bce;
            sums.margin_in += loss.margin_in;
            sums.margin_out += loss.margin_out;
            batches += 1;
        }
        let b = batches as f64;
        let rec = EpochRecord {
            epoch,
            total: sums.total / b,
            bce: sums.bce / b,
            margin_in: sums.margin_in / b,
            margin_out: sums.margin_out / b,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "stage2 epoch {epoch}: total {:.5} bce {:.5} in {:.5} out {:.5}",
            rec.total, rec.bce, rec.margin_in, rec.margin_out
        );
        log.push(rec);
    }
    if backbone.fingerprint() != frozen {
        return Err(TendError::Contract("stage 2 modified the frozen backbone".into()));
    }
    let center = center.expect("warmup_epochs < epochs guarantees a center");
    Ok(Stage2Outcome { head, center, log })
}

/// Mean `‖c − O‖²` over a set of samples (inference mode).
pub fn mean_distance(samples: &[ImageSample], backbone: &Backbone, head: &Head, center: &Center) -> Result<f64> {
    if samples.is_empty() {
        return Err(TendError::Data("no samples".into()));
    }
    let c = compress_all(head, &encode_all(backbone, samples)?);
    let total: f64 = c
        .axis_iter(Axis(0))
        .map(|row| squared_distance(row.as_slice().expect("row-major"), &center.o))
        .sum();
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{NamedArrays, Param};
    use rand::Rng as _;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn reconstruction_loss_examples() {
        let zero = ImageSample::filled(4, 1, 0.0);
        let one = ImageSample::filled(4, 1, 1.0);
        assert_eq!(reconstruction_loss(&zero, &zero).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&zero, &one).unwrap(), 1.0);
        let a = ImageSample::filled(2, 1, 0.0);
        let b = ImageSample::from_fn(2, 1, |_, y, x| (x == 0 && y == 0) as u8 as f64);
        assert!(close(reconstruction_loss(&a, &b).unwrap(), 0.25, 1e-12));
        assert!(reconstruction_loss(&a, &zero).is_err());
    }

    #[test]
    fn margin_examples() {
        let r = MarginReduction::MeanDim;
        assert_eq!(margin_loss_in(&[1.0, 2.0], &[1.0, 2.0], r).unwrap(), 0.0);
        assert_eq!(margin_loss_in(&[1.0; 4], &[0.0; 4], r).unwrap(), 1.0);
        assert!(close(margin_loss_in(&[3.0, 4.0], &[0.0, 0.0], r).unwrap(), 12.5, 1e-12));
        assert_eq!(margin_loss_in(&[3.0, 4.0], &[0.0, 0.0], MarginReduction::SumDim).unwrap(), 25.0);

        assert_eq!(margin_loss_out(&[20.0, -20.0], &[0.0, 0.0], 150.0, r).unwrap(), 0.0);
        assert_eq!(margin_loss_out(&[5.0; 3], &[5.0; 3], 150.0, r).unwrap(), 150.0);
        let dev = [100f64.sqrt(), 200f64.sqrt()];
        assert!(close(margin_loss_out(&dev, &[0.0, 0.0], 150.0, r).unwrap(), 25.0, 1e-9));
        assert!(margin_loss_in(&[1.0], &[1.0, 2.0], r).is_err());
        assert!(margin_loss_out(&[1.0], &[1.0], 0.0, r).is_err());
    }

    #[test]
    fn bce_matches_naive_formula() {
        for &(z, t) in &[(0.3, 1.0), (-2.0, 0.0), (4.0, 0.0), (-1.0, 1.0)] {
            let p: f64 = sigmoid(z);
            let naive = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            assert!(close(bce_with_logit(z, t), naive, 1e-12));
        }
        assert_eq!(bce_with_logit(0.0, 1.0), std::f64::consts::LN_2);
    }

    #[test]
    fn objective_composes_hand_examples() {
        // ID row: c − O = (3, 4) → 12.5; distorted row: deviations² (100, 200), R = 150 → 25.
        let c = Array2::from_shape_vec((2, 2), vec![3.0, 4.0, 10.0, 200f64.sqrt()]).unwrap();
        let z = [0.4, -0.7];
        let targets = [0.0, 1.0];
        let term = MarginTerm { center: &[0.0, 0.0], margin: 150.0, reduction: MarginReduction::MeanDim };
        let (loss, _, _) = stage2_objective(&c, &z, &targets, Some(term)).unwrap();
        let bce = (bce_with_logit(0.4, 0.0) + bce_with_logit(-0.7, 1.0)) / 2.0;
        assert!(close(loss.bce, bce, 1e-12));
        assert!(close(loss.margin_in, 12.5, 1e-9));
        assert!(close(loss.margin_out, 25.0, 1e-9));
        assert!(close(loss.total, bce + 37.5, 1e-9));
    }

    #[test]
    fn objective_vanishes_at_the_joint_optimum() {
        let c = Array2::from_shape_vec((2, 2), vec![1.0, 1.0, 40.0, -40.0]).unwrap();
        let term = MarginTerm { center: &[1.0, 1.0], margin: 250.0, reduction: MarginReduction::MeanDim };
        let (loss, _, _) = stage2_objective(&c, &[-800.0, 800.0], &[0.0, 1.0], Some(term)).unwrap();
        assert_eq!(loss.margin, 0.0);
        assert!(loss.bce < 1e-300);
    }

    #[test]
    fn hinge_kink_has_zero_subgradient() {
        let c = Array2::from_shape_vec((2, 1), vec![0.0, 5.0]).unwrap();
        let term = MarginTerm { center: &[0.0], margin: 25.0, reduction: MarginReduction::MeanDim };
        let (loss, dc, _) = stage2_objective(&c, &[0.0, 0.0], &[0.0, 1.0], Some(term)).unwrap();
        assert_eq!(loss.margin_out, 0.0);
        assert_eq!(dc[[1, 0]], 0.0);
    }

    fn toy_arch() -> ArchitectureSpec {
        ArchitectureSpec {
            encoder_widths: vec![2, 3, 3, 4, 4],
            head_conv_out: 3,
            compressed_dim: 5,
            ..ArchitectureSpec::with_input(64, 1)
        }
    }

    /// Flattened copies of every head parameter, so finite differences can poke them.
    fn head_loss(head: &Head, latents: &Array4<f64>, targets: &[f64], term: Option<MarginTerm<'_>>) -> f64 {
        let mut h = head.clone();
        let (c, z) = h.forward_train(latents);
        stage2_objective(&c, &z, targets, term).unwrap().0.total
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let arch = toy_arch();
        let mut head = Head::new(&arch, 4).unwrap();
        let mut r = rng::seeded(9);
        let s = arch.latent_side();
        let latents = Array4::from_shape_fn((4, 4, s, s), |_| r.random_range(-1.0..1.0));
        let targets = [0.0, 0.0, 1.0, 1.0];
        let center: Vec<f64> = (0..5).map(|i| 0.1 * i as f64 - 0.2).collect();
        // Small R so that some hinge dimensions are active and some are not.
        let term = MarginTerm { center: &center, margin: 0.05, reduction: MarginReduction::MeanDim };

        let (c, z) = head.forward_train(&latents);
        let (_, dc, dz) = stage2_objective(&c, &z, &targets, Some(term)).unwrap();
        head.zero_grad();
        let (c2, _) = head.forward_train(&latents);
        assert_eq!(c, c2);
        head.backward(&dc, &dz);

        let analytic: Vec<Vec<f64>> = head.params_mut().iter().map(|p: &&mut Param| p.grad.clone()).collect();
        let eps = 1e-6;
        let mut checked = 0;
        for (pi, grads) in analytic.iter().enumerate() {
            let len = grads.len();
            for idx in [0, len / 3, len / 2, len - 1] {
                let mut hp = head.clone();
                hp.params_mut()[pi].value[idx] += eps;
                let mut hm = head.clone();
                hm.params_mut()[pi].value[idx] -= eps;
                let num = (head_loss(&hp, &latents, &targets, Some(term))
                    - head_loss(&hm, &latents, &targets, Some(term)))
                    / (2.0 * eps);
                let ana = grads[idx];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(rel < 1e-3, "param {pi}[{idx}]: numeric {num}, analytic {ana}");
                checked += 1;
            }
        }
        assert!(checked >= 20);
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let arch = toy_arch();
        let mut bb = Backbone::new(&arch, 2).unwrap();
        let mut r = rng::seeded(3);
        let x = Array4::from_shape_fn((2, 1, 64, 64), |_| r.random_range(0.0..1.0));
        let numel = x.len() as f64;
        let loss = |b: &Backbone| {
            let mut b = b.clone();
            let y = b.forward_train(&x);
            (&y - &x).mapv(|v| v * v).sum() / numel
        };
        let y = bb.forward_train(&x);
        bb.backward(&((&y - &x) * (2.0 / numel)));
        let analytic: Vec<Vec<f64>> = bb.params_mut().iter().map(|p| p.grad.clone()).collect();
        let eps = 1e-6;
        for pi in [0, 1, analytic.len() / 2, analytic.len() - 2, analytic.len() - 1] {
            let len = analytic[pi].len();
            for idx in [0, len - 1] {
                let mut bp = bb.clone();
                bp.params_mut()[pi].value[idx] += eps;
                let mut bm = bb.clone();
                bm.params_mut()[pi].value[idx] -= eps;
                let num = (loss(&bp) - loss(&bm)) / (2.0 * eps);
                let ana = analytic[pi][idx];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
                assert!(rel < 1e-3, "param {pi}[{idx}]: numeric {num}, analytic {ana}");
            }
        }
    }

    fn blobs(n: usize, side: usize, seed: u64) -> Vec<ImageSample> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|i| {
                let cx = r.random_range(0.3..0.7) * side as f64;
                let cy = r.random_range(0.3..0.7) * side as f64;
                ImageSample::from_fn(side, 1, |_, y, x| {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    0.1 + 0.8 * (-d2 / 40.0).exp()
                })
                .with_source_id(format!("b{i}"))
            })
            .collect()
    }

    #[test]
    fn stage1_zero_epochs_returns_initial_params() {
        let arch = toy_arch();
        let data = blobs(3, 64, 0);
        let (bb, log) = train_stage1(&data, &arch, &TrainConfig::stage1(0, 2, 5)).unwrap();
        assert!(log.is_empty());
        assert_eq!(bb.fingerprint(), Backbone::new(&arch, 5).unwrap().fingerprint());
    }

    #[test]
    fn stage1_rejects_empty_and_non_id_data() {
        let arch = toy_arch();
        let cfg = TrainConfig::stage1(1, 2, 0);
        assert!(matches!(train_stage1(&[], &arch, &cfg), Err(TendError::Data(_))));
        let ood = vec![ImageSample::filled(64, 1, 0.2).with_label(Label::Ood)];
        assert!(train_stage1(&ood, &arch, &cfg).is_err());
    }

    #[test]
    fn stage1_reduces_loss_deterministically() {
        let arch = toy_arch();
        let data = blobs(12, 64, 1);
        let cfg = TrainConfig { learning_rate: 0.01, ..TrainConfig::stage1(6, 4, 7) };
        let (a, log_a) = train_stage1(&data, &arch, &cfg).unwrap();
        let (b, log_b) = train_stage1(&data, &arch, &cfg).unwrap();
        let strip = |l: &[EpochRecord]| l.iter().map(|r| r.total).collect::<Vec<_>>();
        assert_eq!(strip(&log_a), strip(&log_b));
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert!(log_a.last().unwrap().total < log_a[0].total);
    }

    #[test]
    fn center_examples() {
        let arch = toy_arch();
        let bb = Backbone::new(&arch, 0).unwrap();
        let head = Head::new(&arch, 0).unwrap();
        let data = blobs(5, 64, 2);
        let one = compute_center(&data[..1], &bb, &head, 0).unwrap();
        let e = bb.encode(&data[0]).unwrap();
        let c = head.compress(&e).unwrap();
        for (a, b) in one.o.iter().zip(&c.0) {
            assert!(close(*a, *b, 1e-12));
        }
        assert!(compute_center(&[], &bb, &head, 0).is_err());
    }

    #[test]
    fn center_matches_streaming_mean() {
        let arch = toy_arch();
        let bb = Backbone::new(&arch, 6).unwrap();
        let head = Head::new(&arch, 6).unwrap();
        let data = blobs(100, 64, 8);
        let center = compute_center(&data, &bb, &head, 3).unwrap();
        assert_eq!(center.computed_at_epoch, 3);
        let mut mean = vec![0.0; arch.compressed_dim];
        for (n, s) in data.iter().enumerate() {
            let c = head.compress(&bb.encode(s).unwrap()).unwrap();
            for (m, v) in mean.iter_mut().zip(&c.0) {
                *m += (v - *m) / (n + 1) as f64;
            }
        }
        for (a, b) in center.o.iter().zip(&mean) {
            assert!(close(*a, *b, 1e-6));
        }
    }

    #[test]
    fn stage2_rejects_untrained_backbone() {
        let arch = toy_arch();
        let bb = Backbone::new(&arch, 0).unwrap();
        let data = blobs(2, 64, 3);
        let cfg = TrainConfig::stage2(2, 1, 1.0, 2, 0);
        assert!(matches!(train_stage2(&data, &cfg, &bb, None), Err(TendError::Contract(_))));
    }

    #[test]
    fn stage2_loss_requires_center_for_margin() {
        let arch = toy_arch();
        let bb = Backbone::new(&arch, 0).unwrap();
        let head = Head::new(&arch, 0).unwrap();
        let data = blobs(2, 64, 3);
        let dist: Vec<_> = data.iter().enumerate().map(|(i, s)| pseudo_outlier(s, 0, 0, i).unwrap()).collect();
        let err = stage2_loss(&data, &dist, None, Some((250.0, MarginReduction::MeanDim)), &bb, &head);
        assert!(matches!(err, Err(TendError::Contract(_))));
        let bce_only = stage2_loss(&data, &dist, None, None, &bb, &head).unwrap();
        assert_eq!(bce_only.margin, 0.0);
        assert_eq!(bce_only.total, bce_only.bce);
    }

    #[test]
    fn stage2_loss_is_invariant_to_batch_duplication() {
        let arch = toy_arch();
        let bb = Backbone::new(&arch, 0).unwrap();
        let head = Head::new(&arch, 1).unwrap();
        let data = blobs(3, 64, 4);
        let dist: Vec<_> = data.iter().enumerate().map(|(i, s)| pseudo_outlier(s, 1, 0, i).unwrap()).collect();
        let center = compute_center(&data, &bb, &head, 0).unwrap();
        let m = Some((0.01, MarginReduction::MeanDim));
        let once = stage2_loss(&data, &dist, Some(&center), m, &bb, &head).unwrap();
        let twice_id: Vec<_> = data.iter().chain(&data).cloned().collect();
        let twice_dist: Vec<_> = dist.iter().chain(&dist).cloned().collect();
        let twice = stage2_loss(&twice_id, &twice_dist, Some(&center), m, &bb, &head).unwrap();
        assert!(close(once.total, twice.total, 1e-12 * once.total.abs().max(1.0)));
        assert!(once.bce >= 0.0 && once.margin_in >= 0.0 && once.margin_out >= 0.0);
    }

    #[test]
    fn stage2_keeps_backbone_frozen_and_checks_config() {
        let arch = toy_arch();
        let data = blobs(6, 64, 5);
        let (bb, _) = train_stage1(&data, &arch, &TrainConfig::stage1(1, 3, 0)).unwrap();
        let before = bb.fingerprint();
        let cfg = TrainConfig::stage2(3, 1, 0.5, 3, 1);
        let out = train_stage2(&data, &cfg, &bb, None).unwrap();
        assert_eq!(bb.fingerprint(), before);
        assert_eq!(out.center.computed_at_epoch, 1);
        assert_eq!(out.log.len(), 3);
        assert_eq!(out.log[0].margin_in, 0.0);
        assert!(out.log[2].margin_in > 0.0 || out.log[2].margin_out > 0.0);

        let bad = TrainConfig::stage2(3, 3, 0.5, 3, 1);
        assert!(matches!(train_stage2(&data, &bad, &bb, None), Err(TendError::Config(_))));
        let sup = TrainConfig { supervised_mode: true, ..cfg.clone() };
        assert!(train_stage2(&data, &sup, &bb, None).is_err());
        let ood: Vec<_> = blobs(4, 64, 9).into_iter().map(|s| s.with_label(Label::Ood)).collect();
        let sup_out = train_stage2(&data, &sup, &bb, Some(&ood)).unwrap();
        assert!(sup_out.log.iter().all(|r| r.margin_in == 0.0 && r.margin_out == 0.0));

        let mut names = Vec::new();
        sup_out.head.visit("", &mut |n, _, _| names.push(n));
        assert!(names.iter().all(|n| n.starts_with("head.")));
    }
}
