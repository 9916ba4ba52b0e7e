//! Static margin plots: each sample sits at radius `√d` from the center O, at an angle
//! hashed from its `source_id`; the blue circle is the margin at radius `√R`.
//!
//! The angle carries no information. Only the radius is a real distance.

use image::{Rgb, RgbImage};

use crate::error::{Result, TendError};
use crate::image::Label;
use crate::rng::fnv1a;
use crate::scoring::ScoreRecord;

pub const PANEL_SIDE: u32 = 512;
const GREEN: Rgb<u8> = Rgb([30, 160, 60]);
const RED: Rgb<u8> = Rgb([210, 40, 40]);
const BLUE: Rgb<u8> = Rgb([40, 70, 220]);
const AXIS: Rgb<u8> = Rgb([200, 200, 200]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

pub const LEGEND: &str = "\
Margin plot
  radius  = sqrt(d), d = squared distance ||c - O||^2 to the center O
  angle   = hash(source_id); carries no information
  circle  = margin, radius sqrt(R)
  green   = ID, red = OOD
  panel truth.png: colors from ground-truth labels
  panel prediction.png: colors from the decision S >= t (or d >= R without a threshold)
";

/// Angle in `[0, 2π)` from a stable hash of `source_id`.
pub fn angle_of(source_id: &str) -> f64 {
    (fnv1a(source_id.as_bytes()) as f64 / 2f64.powi(64)) * std::f64::consts::TAU
}

/// Plot-space coordinates (origin = O) for a squared distance `d`.
pub fn position(d: f64, source_id: &str) -> (f64, f64) {
    let r = d.max(0.0).sqrt();
    let a = angle_of(source_id);
    (r * a.cos(), r * a.sin())
}

/// Maps plot space onto pixels; axes are symmetric about the origin.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub extent: f64,
}

impl Frame {
    pub fn for_records(records: &[ScoreRecord], margin: f64) -> Self {
        let max_r = records
            .iter()
            .filter_map(|r| r.d)
            .fold(margin, f64::max)
            .sqrt();
        Self { extent: 1.1 * max_r.max(f64::MIN_POSITIVE) }
    }

    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let half = PANEL_SIDE as f64 / 2.0;
        (half + x / self.extent * (half - 8.0), half - y / self.extent * (half - 8.0))
    }

    pub fn pixel_radius(&self, r: f64) -> f64 {
        r / self.extent * (PANEL_SIDE as f64 / 2.0 - 8.0)
    }
}

fn disc(img: &mut RgbImage, cx: f64, cy: f64, radius: f64, color: Rgb<u8>) {
    let r = radius.ceil() as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (cx.round() as i64 + dx, cy.round() as i64 + dy);
            if ((dx * dx + dy * dy) as f64) <= radius * radius
                && (0..PANEL_SIDE as i64).contains(&x)
                && (0..PANEL_SIDE as i64).contains(&y)
            {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

fn circle(img: &mut RgbImage, cx: f64, cy: f64, radius: f64, color: Rgb<u8>) {
    let steps = (radius * 8.0).max(64.0) as usize;
    for i in 0..steps {
        let a = i as f64 / steps as f64 * std::f64::consts::TAU;
        disc(img, cx + radius * a.cos(), cy + radius * a.sin(), 1.0, color);
    }
}

fn panel(records: &[ScoreRecord], margin: f64, frame: Frame, is_ood: impl Fn(&ScoreRecord) -> bool) -> RgbImage {
    let mut img = RgbImage::from_pixel(PANEL_SIDE, PANEL_SIDE, WHITE);
    let mid = PANEL_SIDE / 2;
    for i in 0..PANEL_SIDE {
        img.put_pixel(i, mid, AXIS);
        img.put_pixel(mid, i, AXIS);
    }
    let (ox, oy) = frame.to_pixel(0.0, 0.0);
    circle(&mut img, ox, oy, frame.pixel_radius(margin.sqrt()), BLUE);
    for r in records {
        let (x, y) = position(r.d.unwrap_or(0.0), &r.source_id);
        let (px, py) = frame.to_pixel(x, y);
        disc(&mut img, px, py, 3.0, if is_ood(r) { RED } else { GREEN });
    }
    img
}

/// Rule used to color the prediction panel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    /// OOD iff `S ≥ t`.
    Threshold(f64),
    /// OOD iff the point lies on or outside the margin circle (`d ≥ R`).
    Margin,
}

/// Ground-truth and prediction panels.
pub fn render(records: &[ScoreRecord], margin: f64, decision: Decision) -> Result<(RgbImage, RgbImage)> {
    if !(margin > 0.0) {
        return Err(TendError::Parameter(format!("margin R must be positive, got {margin}")));
    }
    if let Some(r) = records.iter().find(|r| r.d.is_none()) {
        return Err(TendError::Data(format!(
            "`{}` has no distance d ({} scores cannot be plotted)",
            r.source_id, r.mode
        )));
    }
    let frame = Frame::for_records(records, margin);
    let truth = panel(records, margin, frame, |r| r.label == Label::Ood);
    let pred = panel(records, margin, frame, |r| match decision {
        Decision::Threshold(t) => r.s >= t,
        Decision::Margin => r.d.unwrap_or(0.0) >= margin,
    });
    Ok((truth, pred))
}
