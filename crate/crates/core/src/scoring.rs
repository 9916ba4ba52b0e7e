//! Per-sample anomaly scores. Higher `S` means more anomalous in every mode.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TendError};
use crate::image::{ImageSample, Label};
use crate::model::{images_to_batch, Backbone, Head};
use crate::nn::sigmoid;
use crate::training::{squared_distance, Center};

/// Default blend weight between classifier probability and scaled distance.
pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScoreMode {
    /// `λ·p + (1−λ)·d/R`.
    Tend,
    /// `d/R` (no classifier).
    MarginOnly,
    /// `p` (no margin learner).
    ClassifierOnly,
    /// Autoencoder reconstruction MSE.
    AeRecon,
}

impl ScoreMode {
    pub const ALL: [ScoreMode; 4] = [
        ScoreMode::Tend,
        ScoreMode::MarginOnly,
        ScoreMode::ClassifierOnly,
        ScoreMode::AeRecon,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMode::Tend => "TEND",
            ScoreMode::MarginOnly => "MARGIN_ONLY",
            ScoreMode::ClassifierOnly => "CLASSIFIER_ONLY",
            ScoreMode::AeRecon => "AE_RECON",
        }
    }

    pub fn needs_head(self) -> bool {
        self != ScoreMode::AeRecon
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreMode {
    type Err = TendError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        ScoreMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| TendError::Config(format!("unknown score mode `{s}`")))
    }
}

/// One scored sample. `p`, `d` and `d_prime` are absent in `AE_RECON` mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub source_id: String,
    pub label: Label,
    pub p: Option<f64>,
    pub d: Option<f64>,
    pub d_prime: Option<f64>,
    pub s: f64,
    pub mode: ScoreMode,
}

/// `λ·p + (1−λ)·d/R`.
pub fn blend(p: f64, d: f64, margin: f64, lambda: f64) -> f64 {
    lambda * p + (1.0 - lambda) * (d / margin)
}

/// Trained stage-2 state needed by every mode except `AE_RECON`.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Parts<'a> {
    pub head: &'a Head,
    pub center: &'a Center,
    pub margin: f64,
}

/// Read-only view of a trained model for scoring.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'a> {
    pub backbone: &'a Backbone,
    pub stage2: Option<Stage2Parts<'a>>,
    pub lambda: f64,
    pub mode: ScoreMode,
}

impl<'a> Scorer<'a> {
    pub fn new(
        backbone: &'a Backbone,
        stage2: Option<Stage2Parts<'a>>,
        lambda: f64,
        mode: ScoreMode,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(TendError::Parameter(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        match stage2 {
            None if mode.needs_head() => {
                return Err(TendError::Contract(format!(
                    "{mode} scoring needs a stage-2 checkpoint (head, center O, margin R)"
                )))
            }
            Some(s) if !(s.margin > 0.0) => {
                return Err(TendError::Parameter(format!("margin R must be positive, got {}", s.margin)))
            }
            _ => {}
        }
        Ok(Self { backbone, stage2, lambda, mode })
    }

    fn combine(&self, p: f64, d: f64, margin: f64) -> f64 {
        match self.mode {
            ScoreMode::Tend => blend(p, d, margin, self.lambda),
            ScoreMode::MarginOnly => d / margin,
            ScoreMode::ClassifierOnly => p,
            ScoreMode::AeRecon => unreachable!("reconstruction mode has no p or d"),
        }
    }

    pub fn score(&self, sample: &ImageSample) -> Result<ScoreRecord> {
        Ok(self.score_batch(std::slice::from_ref(sample))?.remove(0))
    }

    /// Scores `samples` in order; errors name the offending sample.
    pub fn score_batch(&self, samples: &[ImageSample]) -> Result<Vec<ScoreRecord>> {
        let arch = self.backbone.arch();
        if let Some(bad) = samples
            .iter()
            .find(|s| s.side() != arch.input_side || s.channels() != arch.channels)
        {
            return Err(TendError::Data(format!(
                "sample `{}` is {}x{}x{}, model expects {}x{}x{}",
                bad.source_id,
                bad.channels(),
                bad.side(),
                bad.side(),
                arch.channels,
                arch.input_side,
                arch.input_side
            )));
        }
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(32) {
            let x = images_to_batch(chunk, arch)?;
            match self.stage2 {
                Some(st) if self.mode.needs_head() => {
                    let c = st.head.compress_batch(&self.backbone.encode_batch(&x));
                    let z = st.head.logits(&c);
                    for ((sample, row), zi) in chunk.iter().zip(c.axis_iter(Axis(0))).zip(z) {
                        let d = squared_distance(row.as_slice().expect("row-major"), &st.center.o);
                        let p = sigmoid(zi);
                        out.push(ScoreRecord {
                            source_id: sample.source_id.clone(),
                            label: sample.label,
                            p: Some(p),
                            d: Some(d),
                            d_prime: Some(d / st.margin),
                            s: self.combine(p, d, st.margin),
                            mode: self.mode,
                        });
                    }
                }
                _ => {
                    let y = self.backbone.reconstruct_batch(&x);
                    let per = (x.len() / chunk.len()) as f64;
                    for (i, sample) in chunk.iter().enumerate() {
                        let diff = &x.index_axis(Axis(0), i) - &y.index_axis(Axis(0), i);
                        out.push(ScoreRecord {
                            source_id: sample.source_id.clone(),
                            label: sample.label,
                            p: None,
                            d: None,
                            d_prime: None,
                            s: diff.mapv(|v| v * v).sum() / per,
                            mode: self.mode,
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    source_id: String,
    label: String,
    p: Option<f64>,
    d: Option<f64>,
    d_prime: Option<f64>,
    #[serde(rename = "S")]
    s: f64,
    mode: String,
}

pub const SCORES_HEADER: &str = "source_id,label,p,d,d_prime,S,mode";

/// Writes `source_id,label,p,d,d_prime,S,mode`; absent values are empty cells.
/// Floats use the shortest representation that round-trips exactly.
pub fn write_scores_csv(records: &[ScoreRecord], out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(SCORES_HEADER.split(','))?;
    for r in records {
        w.serialize(CsvRow {
            source_id: r.source_id.clone(),
            label: r.label.to_string(),
            p: r.p,
            d: r.d,
            d_prime: r.d_prime,
            s: r.s,
            mode: r.mode.to_string(),
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Parses a scores CSV; errors carry the 1-based line number of the bad row.
pub fn read_scores_csv(input: impl Read) -> Result<Vec<ScoreRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != SCORES_HEADER {
        return Err(TendError::Data(format!(
            "line 1: expected header `{SCORES_HEADER}`, got `{}`",
            header.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| TendError::Data(format!("line {line}: {e}")))?;
        let at = |e: TendError| TendError::Data(format!("line {line}: {e}"));
        if !row.s.is_finite() {
            return Err(TendError::Data(format!("line {line}: non-finite score")));
        }
        out.push(ScoreRecord {
            source_id: row.source_id,
            label: row.label.parse().map_err(at)?,
            p: row.p,
            d: row.d,
            d_prime: row.d_prime,
            s: row.s,
            mode: row.mode.parse().map_err(at)?,
        });
    }
    Ok(out)
}
