use std::f64::consts::PI;

use crate::error::{Result, TendError};
use crate::image::ImageSample;

/// Runs `map(x, y) -> Option<(sx, sy)>` for every output pixel and resamples.
/// `None` (or a source outside the footprint) yields the black fill.
fn inverse_map(img: &ImageSample, map: impl Fn(f64, f64) -> Option<(f64, f64)>) -> Vec<f64> {
    let side = img.side();
    let mut coords = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            coords.push(map(x as f64, y as f64));
        }
    }
    let mut out = Vec::with_capacity(side * side * img.channels());
    for c in 0..img.channels() {
        for src in &coords {
            let v = src.and_then(|(sx, sy)| img.sample(c, sx, sy)).unwrap_or(0.0);
            out.push(v);
        }
    }
    out
}

fn center(img: &ImageSample) -> f64 {
    (img.side() as f64 - 1.0) / 2.0
}

pub(super) fn barrel(img: &ImageSample, a: f64, b: f64, c: f64, d: f64) -> Vec<f64> {
    let cx = center(img);
    let norm = img.side() as f64 / 2.0;
    inverse_map(img, |x, y| {
        let (dx, dy) = (x - cx, y - cx);
        let r = (dx * dx + dy * dy).sqrt() / norm;
        let f = ((a * r + b) * r + c) * r + d;
        Some((cx + dx * f, cx + dy * f))
    })
}

/// 3×3 projective transform, row-major, with `h[8]` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    /// Solves for the homography taking each `from[i]` to `to[i]`.
    pub fn from_points(from: &[[f64; 2]; 4], to: &[[f64; 2]; 4]) -> Option<Self> {
        let mut m = [[0.0f64; 9]; 8];
        for i in 0..4 {
            let [x, y] = from[i];
            let [u, v] = to[i];
            m[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            m[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        let h = solve8(m)?;
        Some(Homography([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0]))
    }

    /// Projective denominator at `(x, y)`; its sign flips across the horizon line.
    pub fn denominator(&self, x: f64, y: f64) -> f64 {
        self.0[6] * x + self.0[7] * y + self.0[8]
    }

    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let h = &self.0;
        let w = self.denominator(x, y);
        if w.abs() < 1e-12 {
            return None;
        }
        Some(((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w))
    }
}

/// Gaussian elimination with partial pivoting on an 8×9 augmented system.
fn solve8(mut m: [[f64; 9]; 8]) -> Option<[f64; 8]> {
    for col in 0..8 {
        let pivot = (col..8).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        for row in 0..8 {
            if row != col {
                let f = m[row][col] / m[col][col];
                if f != 0.0 {
                    for k in col..9 {
                        m[row][k] -= f * m[col][k];
                    }
                }
            }
        }
    }
    let mut out = [0.0; 8];
    for i in 0..8 {
        out[i] = m[i][8] / m[i][i];
    }
    Some(out)
}

pub(super) fn perspective(img: &ImageSample, offsets: &[[f64; 2]; 4]) -> Result<Vec<f64>> {
    let s = img.side() as f64;
    let (lo, hi) = (-0.5, s - 0.5);
    let src = [[lo, lo], [hi, lo], [hi, hi], [lo, hi]];
    let mut dst = src;
    for (d, o) in dst.iter_mut().zip(offsets) {
        d[0] += o[0] * s;
        d[1] += o[1] * s;
    }
    // Inverse mapping: destination pixel -> source coordinate.
    let h = Homography::from_points(&dst, &src)
        .ok_or_else(|| TendError::Parameter("perspective control points are degenerate".into()))?;
    // Points beyond the horizon would map to a mirrored copy; treat them as virtual.
    let (mx, my) = dst.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0] / 4.0, b + p[1] / 4.0));
    let sign = h.denominator(mx, my).signum();
    Ok(inverse_map(img, |x, y| {
        if h.denominator(x, y) * sign <= 0.0 {
            None
        } else {
            h.apply(x, y)
        }
    }))
}

pub(super) fn arc(img: &ImageSample, angle_deg: f64) -> Vec<f64> {
    let s = img.side() as f64;
    let cx = center(img);
    let theta = angle_deg.to_radians();
    // Outer radius makes the arc's chord span the frame; the top of the outer arc touches
    // the top edge. Past a half turn the arc is centered in the frame instead.
    let (outer, cy) = if theta <= PI {
        let r = s / (2.0 * (theta / 2.0).sin());
        (r, r - 0.5)
    } else {
        (s / 2.0, cx)
    };
    let inner = (outer - s).max(0.0);
    inverse_map(img, |x, y| {
        let dx = x - cx;
        let dy = cy - y;
        let r = (dx * dx + dy * dy).sqrt();
        let phi = dx.atan2(dy);
        if phi.abs() > theta / 2.0 || r > outer || r < inner {
            return None;
        }
        let sx = (phi / theta + 0.5) * s - 0.5;
        let sy = (outer - r) / (outer - inner) * s - 0.5;
        Some((sx, sy))
    })
}

pub(super) fn polar(img: &ImageSample) -> Vec<f64> {
    let s = img.side() as f64;
    let c = center(img);
    inverse_map(img, |x, y| {
        let phi = (x + 0.5) / s * 2.0 * PI;
        let r = (y + 0.5) / s * (s / 2.0);
        Some((c + r * phi.cos(), c + r * phi.sin()))
    })
}

pub(super) fn tile(img: &ImageSample, k: u32) -> Vec<f64> {
    let s = img.side() as f64;
    let k = k as f64;
    inverse_map(img, |x, y| {
        let u = ((x + 0.5) * k).rem_euclid(s);
        let v = ((y + 0.5) * k).rem_euclid(s);
        Some((u - 0.5, v - 0.5))
    })
}

pub(super) fn affine(img: &ImageSample, m: &[f64; 6]) -> Vec<f64> {
    let c = center(img);
    let [a, b, tx, cc, d, ty] = *m;
    let det = a * d - b * cc;
    let (ia, ib, ic, id) = (d / det, -b / det, -cc / det, a / det);
    inverse_map(img, |x, y| {
        let (u, v) = (x - c - tx, y - c - ty);
        Some((c + ia * u + ib * v, c + ic * u + id * v))
    })
}
