use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::image::ImageSample;
use crate::rng;

pub(super) fn random_cut(img: &ImageSample, area_fraction: f64, seed: u64) -> Vec<f64> {
    let side = img.side();
    let s = side as f64;
    let mut r = rng::seeded(seed);
    let aspect: f64 = r.random_range(0.5..=2.0);
    let area = area_fraction * s * s;
    let w = (area * aspect).sqrt().round().clamp(1.0, s) as usize;
    let h = (area / w as f64).round().clamp(1.0, s) as usize;
    let x0 = r.random_range(0..=side - w);
    let y0 = r.random_range(0..=side - h);
    let mut out = img.pixels().to_vec();
    for c in 0..img.channels() {
        for y in y0..y0 + h {
            let row = (c * side + y) * side;
            out[row + x0..row + x0 + w].fill(0.0);
        }
    }
    out
}

pub(super) fn random_crop_resize(img: &ImageSample, side_fraction: f64, seed: u64) -> Vec<f64> {
    let s = img.side() as f64;
    let window = side_fraction * s;
    let mut r = rng::seeded(seed);
    let ox = r.random_range(0.0..=s - window);
    let oy = r.random_range(0.0..=s - window);
    let mut out = Vec::with_capacity(img.pixels().len());
    for c in 0..img.channels() {
        for y in 0..img.side() {
            let sy = oy + (y as f64 + 0.5) * side_fraction - 0.5;
            for x in 0..img.side() {
                let sx = ox + (x as f64 + 0.5) * side_fraction - 0.5;
                out.push(img.sample_clamped(c, sx, sy));
            }
        }
    }
    out
}

/// `n` i.i.d. draws from N(0, σ²), the raw field `noise` adds before clamping.
pub(super) fn gaussian_field(n: usize, sigma: f64, seed: u64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut r = rng::seeded(seed);
    (0..n).map(|_| normal.sample(&mut r)).collect()
}

pub(super) fn noise(img: &ImageSample, sigma: f64, seed: u64) -> Vec<f64> {
    let field = gaussian_field(img.pixels().len(), sigma, seed);
    img.pixels()
        .iter()
        .zip(field)
        .map(|(v, n)| (v + n).clamp(0.0, 1.0))
        .collect()
}

pub(super) fn gaussian_blur(img: &ImageSample, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let side = img.side();
    let last = side as isize - 1;
    let mut out = vec![0.0; img.pixels().len()];
    let mut tmp = vec![0.0; side * side];
    for c in 0..img.channels() {
        let plane = img.channel(c);
        // Horizontal pass, edges replicated.
        for y in 0..side {
            for x in 0..side {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let xx = (x as isize + j as isize - radius).clamp(0, last) as usize;
                    acc += k * plane[y * side + xx];
                }
                tmp[y * side + x] = acc;
            }
        }
        let dst = &mut out[c * side * side..(c + 1) * side * side];
        for y in 0..side {
            for x in 0..side {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let yy = (y as isize + j as isize - radius).clamp(0, last) as usize;
                    acc += k * tmp[yy * side + x];
                }
                dst[y * side + x] = acc;
            }
        }
    }
    out
}
