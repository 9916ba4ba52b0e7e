//! Autoencoder backbone and discriminator head.
//!
//! Encoder: five `Conv(k=4, s=2, p=1)` stages (`channels→16→32→64→128→256`), each
//! followed by batch-norm and ReLU. Decoder mirrors it with transposed convolutions;
//! the last one maps to the image channels and ends in a sigmoid so reconstructions
//! stay in `[0, 1]`. The head is `Conv(256→512)`+BN+ReLU, flatten, `FC(fc_in→K)` giving
//! the compressed feature `c`, then `FC(K→1)` giving the OOD logit.

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TendError};
use crate::image::{ImageSample, Label, Split};
use crate::nn::{
    relu4, relu4_backward, sigmoid, BatchNorm2d, Conv2d, ConvTranspose2d, Linear, NamedArrays, Param,
    Trainable,
};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_side: usize,
    pub channels: usize,
    pub encoder_widths: Vec<usize>,
    pub head_conv_out: usize,
    pub compressed_dim: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        Self::with_input(128, 1)
    }
}

impl ArchitectureSpec {
    pub fn with_input(input_side: usize, channels: usize) -> Self {
        Self {
            input_side,
            channels,
            encoder_widths: vec![16, 32, 64, 128, 256],
            head_conv_out: 512,
            compressed_dim: 512,
            kernel: 4,
            stride: 2,
            padding: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.kernel, self.stride, self.padding) != (4, 2, 1) {
            return Err(TendError::Config(format!(
                "every conv uses kernel 4, stride 2, padding 1; got {}/{}/{}",
                self.kernel, self.stride, self.padding
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(TendError::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(TendError::Config("encoder widths must be non-empty and positive".into()));
        }
        let min_side = 1usize << (self.encoder_widths.len() + 1);
        if !self.input_side.is_power_of_two() || self.input_side < min_side {
            return Err(TendError::Config(format!(
                "input side must be a power of two and at least {min_side}, got {}",
                self.input_side
            )));
        }
        if self.head_conv_out == 0 || self.compressed_dim == 0 {
            return Err(TendError::Config("head sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn latent_channels(&self) -> usize {
        *self.encoder_widths.last().expect("validated")
    }

    /// Spatial side of the encoder output.
    pub fn latent_side(&self) -> usize {
        self.input_side >> self.encoder_widths.len()
    }

    /// Spatial side of the head convolution output.
    pub fn head_side(&self) -> usize {
        self.latent_side() / 2
    }

    /// Input width of the first fully connected layer.
    pub fn fc_in(&self) -> usize {
        self.head_conv_out * self.head_side() * self.head_side()
    }
}

/// Encoder output `e`: `[latent_channels, s, s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFeature(pub Array3<f64>);

/// Compressed feature `c` of length `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedFeature(pub Vec<f64>);

impl CompressedFeature {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Stacks images into an `[N, C, S, S]` batch after checking them against `arch`.
pub fn images_to_batch<'a>(images: impl IntoIterator<Item = &'a ImageSample>, arch: &ArchitectureSpec) -> Result<Array4<f64>> {
    let (c, s) = (arch.channels, arch.input_side);
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        if img.side() != s || img.channels() != c {
            return Err(TendError::shape(
                format!("{c}x{s}x{s} image"),
                format!("{}x{}x{} image `{}`", img.channels(), img.side(), img.side(), img.source_id),
            ));
        }
        data.extend_from_slice(img.pixels());
        n += 1;
    }
    Ok(Array4::from_shape_vec((n, c, s, s), data).expect("sizes checked"))
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
    out: Option<Array4<f64>>,
}

impl ConvBlock {
    fn new(cin: usize, cout: usize, arch: &ArchitectureSpec, r: &mut rng::Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, arch.kernel, arch.stride, arch.padding, r),
            bn: BatchNorm2d::new(cout),
            out: None,
        }
    }

    fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        relu4(&self.bn.infer(&self.conv.infer(x)))
    }

    fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let y = relu4(&self.bn.forward_train(&self.conv.forward_train(x)));
        self.out = Some(y.clone());
        y
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let out = self.out.take().expect("backward without forward_train");
        let d = relu4_backward(&out, dy);
        self.conv.backward(&self.bn.backward(&d))
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv.params_mut();
        v.extend(self.bn.params_mut());
        v
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &mut Vec<f64>)) {
        self.conv.visit_mut(&format!("{prefix}.conv"), f);
        self.bn.visit_mut(&format!("{prefix}.bn"), f);
    }
}

#[derive(Debug, Clone)]
struct DeconvBlock {
    deconv: ConvTranspose2d,
    bn: BatchNorm2d,
    out: Option<Array4<f64>>,
}

impl DeconvBlock {
    fn new(cin: usize, cout: usize, arch: &ArchitectureSpec, r: &mut rng::Rng) -> Self {
        Self {
            deconv: ConvTranspose2d::new(cin, cout, arch.kernel, arch.stride, arch.padding, r),
            bn: BatchNorm2d::new(cout),
            out: None,
        }
    }

    fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        relu4(&self.bn.infer(&self.deconv.infer(x)))
    }

    fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let y = relu4(&self.bn.forward_train(&self.deconv.forward_train(x)));
        self.out = Some(y.clone());
        y
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let out = self.out.take().expect("backward without forward_train");
        let d = relu4_backward(&out, dy);
        self.deconv.backward(&self.bn.backward(&d))
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.deconv.params_mut();
        v.extend(self.bn.params_mut());
        v
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.deconv.visit(&format!("{prefix}.deconv"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &mut Vec<f64>)) {
        self.deconv.visit_mut(&format!("{prefix}.deconv"), f);
        self.bn.visit_mut(&format!("{prefix}.bn"), f);
    }
}

/// The stage-1 autoencoder. Frozen (only `&self` methods are used) once stage 2 begins.
#[derive(Debug, Clone)]
pub struct Backbone {
    arch: ArchitectureSpec,
    encoder: Vec<ConvBlock>,
    decoder: Vec<DeconvBlock>,
    output: ConvTranspose2d,
    recon: Option<Array4<f64>>,
    stage1_complete: bool,
}

impl Backbone {
    pub fn new(arch: &ArchitectureSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::seeded(rng::derive(seed, 1));
        let mut encoder = Vec::new();
        let mut cin = arch.channels;
        for &w in &arch.encoder_widths {
            encoder.push(ConvBlock::new(cin, w, arch, &mut r));
            cin = w;
        }
        let mut decoder = Vec::new();
        for &w in arch.encoder_widths.iter().rev().skip(1) {
            decoder.push(DeconvBlock::new(cin, w, arch, &mut r));
            cin = w;
        }
        let output = ConvTranspose2d::new(cin, arch.channels, arch.kernel, arch.stride, arch.padding, &mut r);
        Ok(Self {
            arch: arch.clone(),
            encoder,
            decoder,
            output,
            recon: None,
            stage1_complete: false,
        })
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    /// Whether these weights come out of stage-1 training (directly or from a checkpoint).
    pub fn stage1_complete(&self) -> bool {
        self.stage1_complete
    }

    pub(crate) fn mark_stage1_complete(&mut self) {
        self.stage1_complete = true;
    }

    /// Inference-mode encoder pass over a batch (batch-norm uses running statistics).
    pub fn encode_batch(&self, x: &Array4<f64>) -> Array4<f64> {
        self.encoder.iter().fold(x.clone(), |h, b| b.infer(&h))
    }

    pub fn decode_batch(&self, z: &Array4<f64>) -> Array4<f64> {
        let h = self.decoder.iter().fold(z.clone(), |h, b| b.infer(&h));
        self.output.infer(&h).mapv(sigmoid)
    }

    pub fn reconstruct_batch(&self, x: &Array4<f64>) -> Array4<f64> {
        self.decode_batch(&self.encode_batch(x))
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let mut h = x.clone();
        for b in &mut self.encoder {
            h = b.forward_train(&h);
        }
        for b in &mut self.decoder {
            h = b.forward_train(&h);
        }
        let y = self.output.forward_train(&h).mapv(sigmoid);
        self.recon = Some(y.clone());
        y
    }

    pub fn backward(&mut self, d_recon: &Array4<f64>) {
        let y = self.recon.take().expect("backward without forward_train");
        let mut d = d_recon * &y.mapv(|s| s * (1.0 - s));
        d = self.output.backward(&d);
        for b in self.decoder.iter_mut().rev() {
            d = b.backward(&d);
        }
        for b in self.encoder.iter_mut().rev() {
            d = b.backward(&d);
        }
    }

    pub fn encode(&self, image: &ImageSample) -> Result<LatentFeature> {
        let x = images_to_batch([image], &self.arch)?;
        let e = self.encode_batch(&x);
        Ok(LatentFeature(e.index_axis_move(Axis(0), 0)))
    }

    pub fn decode(&self, latent: &LatentFeature) -> Result<ImageSample> {
        let (c, s) = (self.arch.latent_channels(), self.arch.latent_side());
        if latent.0.dim() != (c, s, s) {
            return Err(TendError::shape(format!("latent {c}x{s}x{s}"), format!("{:?}", latent.0.dim())));
        }
        let z = latent.0.clone().insert_axis(Axis(0));
        let y = self.decode_batch(&z);
        let side = self.arch.input_side;
        ImageSample::new(
            side,
            self.arch.channels,
            y.into_raw_vec_and_offset().0,
            Label::Unknown,
            Split::Test,
            "reconstruction",
        )
    }

    /// Stable SHA-256 over every parameter and running statistic.
    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }
}

impl Trainable for Backbone {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for b in &mut self.encoder {
            v.extend(b.params_mut());
        }
        for b in &mut self.decoder {
            v.extend(b.params_mut());
        }
        v.extend(self.output.params_mut());
        v
    }
}

impl NamedArrays for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&format!("{prefix}encoder.{i}"), f);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&format!("{prefix}decoder.{i}"), f);
        }
        self.output.visit(&format!("{prefix}decoder.output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &mut Vec<f64>)) {
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}encoder.{i}"), f);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}decoder.{i}"), f);
        }
        self.output.visit_mut(&format!("{prefix}decoder.output"), f);
    }
}

/// Discriminator head over frozen encoder features.
#[derive(Debug, Clone)]
pub struct Head {
    arch: ArchitectureSpec,
    conv: ConvBlock,
    fc1: Linear,
    fc2: Linear,
}

impl Head {
    pub fn new(arch: &ArchitectureSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::seeded(rng::derive(seed, 2));
        Ok(Self {
            arch: arch.clone(),
            conv: ConvBlock::new(arch.latent_channels(), arch.head_conv_out, arch, &mut r),
            fc1: Linear::new(arch.fc_in(), arch.compressed_dim, &mut r),
            fc2: Linear::new(arch.compressed_dim, 1, &mut r),
        })
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    fn flatten(h: Array4<f64>) -> Array2<f64> {
        let n = h.dim().0;
        let per = h.len() / n.max(1);
        let (raw, _) = h.as_standard_layout().into_owned().into_raw_vec_and_offset();
        Array2::from_shape_vec((n, per), raw).expect("flatten")
    }

    /// `[N, 256, s, s]` latents to `[N, K]` compressed features (inference mode).
    pub fn compress_batch(&self, latents: &Array4<f64>) -> Array2<f64> {
        self.fc1.infer(&Self::flatten(self.conv.infer(latents)))
    }

    pub fn logits(&self, compressed: &Array2<f64>) -> Vec<f64> {
        self.fc2.infer(compressed).column(0).to_vec()
    }

    /// Training-mode pass returning `(c, logits)` and caching for [`Head::backward`].
    pub fn forward_train(&mut self, latents: &Array4<f64>) -> (Array2<f64>, Vec<f64>) {
        let h = Self::flatten(self.conv.forward_train(latents));
        let c = self.fc1.forward_train(&h);
        let z = self.fc2.forward_train(&c).column(0).to_vec();
        (c, z)
    }

    /// Backpropagates loss gradients w.r.t. `c` and the logits; the latent gradient is dropped.
    pub fn backward(&mut self, d_compressed: &Array2<f64>, d_logits: &[f64]) {
        let dz = Array2::from_shape_vec((d_logits.len(), 1), d_logits.to_vec()).expect("logit grad");
        let dc = self.fc2.backward(&dz) + d_compressed;
        let dh = self.fc1.backward(&dc);
        let (s, ch) = (self.arch.head_side(), self.arch.head_conv_out);
        let dh4 = dh.into_shape_with_order((d_logits.len(), ch, s, s)).expect("unflatten");
        self.conv.backward(&dh4);
    }

    pub fn compress(&self, latent: &LatentFeature) -> Result<CompressedFeature> {
        let (c, s) = (self.arch.latent_channels(), self.arch.latent_side());
        if latent.0.dim() != (c, s, s) {
            return Err(TendError::shape(format!("latent {c}x{s}x{s}"), format!("{:?}", latent.0.dim())));
        }
        let out = self.compress_batch(&latent.0.clone().insert_axis(Axis(0)));
        Ok(CompressedFeature(out.row(0).to_vec()))
    }

    /// Probability that `c` is OOD (distorted class = 1).
    pub fn classify(&self, c: &CompressedFeature) -> Result<f64> {
        if c.len() != self.arch.compressed_dim {
            return Err(TendError::shape(self.arch.compressed_dim, c.len()));
        }
        let m = Array2::from_shape_vec((1, c.len()), c.0.clone()).expect("row");
        Ok(sigmoid(self.logits(&m)[0]))
    }
}

impl Trainable for Head {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv.params_mut();
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
}

impl NamedArrays for Head {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.conv.visit(&format!("{prefix}head.conv"), f);
        self.fc1.visit(&format!("{prefix}head.fc1"), f);
        self.fc2.visit(&format!("{prefix}head.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &mut Vec<f64>)) {
        self.conv.visit_mut(&format!("{prefix}head.conv"), f);
        self.fc1.visit_mut(&format!("{prefix}head.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}head.fc2"), f);
    }
}

/// SHA-256 over names, shapes and little-endian values of every array, hex encoded.
pub fn fingerprint(module: &dyn NamedArrays) -> String {
    let mut h = Sha256::new();
    module.visit("", &mut |name, shape, values| {
        h.update(name.as_bytes());
        for d in shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in values {
            h.update(v.to_le_bytes());
        }
    });
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
