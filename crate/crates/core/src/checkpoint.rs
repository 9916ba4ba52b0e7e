//! `TENDCKPT-v1` checkpoints.
//!
//! Layout: the magic line `TENDCKPT-v1\n`, a little-endian `u64` header length, a JSON
//! header (stage tag, architecture, seeds, center, margin, tensor table), then every
//! tensor as raw little-endian `f64` in header order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::error::{Result, TendError};
use crate::model::{ArchitectureSpec, Backbone, Head};
use crate::nn::NamedArrays;
use crate::training::{Center, MarginReduction, Stage};

pub const MAGIC: &[u8] = b"TENDCKPT-v1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub stage1: u64,
    pub stage2: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub backbone: Backbone,
    pub head: Option<Head>,
    pub center: Option<Center>,
    pub margin: Option<f64>,
    pub margin_reduction: Option<MarginReduction>,
    pub seeds: Seeds,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    stage: Stage,
    arch: ArchitectureSpec,
    seeds: Seeds,
    center: Option<Center>,
    margin: Option<f64>,
    margin_reduction: Option<MarginReduction>,
    backbone_sha256: String,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> TendError {
    TendError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn stage1(backbone: Backbone, seed: u64) -> Self {
        Self {
            stage: Stage::Stage1,
            backbone,
            head: None,
            center: None,
            margin: None,
            margin_reduction: None,
            seeds: Seeds { stage1: seed, stage2: None },
        }
    }

    pub fn stage2(
        stage1: &Checkpoint,
        head: Head,
        center: Center,
        margin: f64,
        reduction: MarginReduction,
        seed: u64,
    ) -> Self {
        Self {
            stage: Stage::Stage2,
            backbone: stage1.backbone.clone(),
            head: Some(head),
            center: Some(center),
            margin: Some(margin),
            margin_reduction: Some(reduction),
            seeds: Seeds { stage1: stage1.seeds.stage1, stage2: Some(seed) },
        }
    }

    fn validate(&self) -> Result<()> {
        let complete = self.head.is_some() && self.center.is_some() && self.margin.is_some();
        match self.stage {
            Stage::Stage1 if self.head.is_some() => Err(bad("STAGE1 checkpoint carries a head")),
            Stage::Stage2 if !complete => Err(bad("STAGE2 checkpoint needs head, center O and margin R")),
            _ => Ok(()),
        }
    }

    /// Fails unless the stage tag is `expected`.
    pub fn expect_stage(&self, expected: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(bad(format!("expected a {expected} checkpoint, found {}", self.stage)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut push = |name: String, shape: &[usize], values: &[f64]| {
            tensors.push(TensorEntry { name, shape: shape.to_vec() });
            for v in values {
                data.extend_from_slice(&v.to_le_bytes());
            }
        };
        self.backbone.visit("", &mut push);
        if let Some(h) = &self.head {
            h.visit("", &mut push);
        }
        let header = Header {
            stage: self.stage,
            arch: self.backbone.arch().clone(),
            seeds: self.seeds,
            center: self.center.clone(),
            margin: self.margin,
            margin_reduction: self.margin_reduction,
            backbone_sha256: self.backbone.fingerprint(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| bad("not a TENDCKPT-v1 file (bad magic)"))?;
        if rest.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..len]).map_err(|e| bad(format!("header: {e}")))?;
        let mut payload = &rest[len..];
        let mut arrays: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            if payload.len() < n * 8 {
                return Err(bad(format!("tensor `{}` is truncated", t.name)));
            }
            let values = payload[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            payload = &payload[n * 8..];
            arrays.insert(t.name.clone(), (t.shape.clone(), values));
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing bytes after the last tensor", payload.len())));
        }

        let mut backbone = Backbone::new(&header.arch, 0)?;
        fill(&mut backbone, &mut arrays)?;
        backbone.mark_stage1_complete();
        if backbone.fingerprint() != header.backbone_sha256 {
            return Err(bad("backbone hash does not match the header"));
        }
        let head = if header.stage == Stage::Stage2 {
            let mut h = Head::new(&header.arch, 0)?;
            fill(&mut h, &mut arrays)?;
            Some(h)
        } else {
            None
        };
        if let Some(extra) = arrays.keys().next() {
            return Err(bad(format!("unexpected tensor `{extra}`")));
        }
        let ck = Self {
            stage: header.stage,
            backbone,
            head,
            center: header.center,
            margin: header.margin,
            margin_reduction: header.margin_reduction,
            seeds: header.seeds,
        };
        ck.validate()?;
        Ok(ck)
    }

    /// Atomic write: a failed save never leaves a partial checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TendError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            TendError::Checkpoint(m) => bad(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn fill(module: &mut dyn NamedArrays, arrays: &mut HashMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
    let mut err = None;
    module.visit_mut("", &mut |name, shape, values| {
        if err.is_some() {
            return;
        }
        match arrays.remove(&name) {
            Some((s, v)) if s == shape => *values = v,
            Some((s, _)) => err = Some(bad(format!("tensor `{name}` has shape {s:?}, expected {shape:?}"))),
            None => err = Some(bad(format!("missing tensor `{name}`"))),
        }
    });
    err.map_or(Ok(()), Err)
}
