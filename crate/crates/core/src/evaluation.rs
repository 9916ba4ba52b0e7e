//! Detection metrics with OOD as the positive class: a sample is predicted OOD iff `S ≥ t`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Result, TendError};
use crate::image::Label;
use crate::scoring::ScoreRecord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledScore {
    pub s: f64,
    pub ood: bool,
}

impl LabeledScore {
    pub fn new(s: f64, truth: Label) -> Result<Self> {
        if !s.is_finite() {
            return Err(TendError::Metric(format!("non-finite score {s}")));
        }
        match truth {
            Label::Id => Ok(Self { s, ood: false }),
            Label::Ood => Ok(Self { s, ood: true }),
            Label::Unknown => Err(TendError::Metric("score without ground-truth label".into())),
        }
    }

    pub fn from_records(records: &[ScoreRecord]) -> Result<Vec<Self>> {
        records.iter().map(|r| Self::new(r.s, r.label)).collect()
    }
}

fn class_counts(scores: &[LabeledScore]) -> Result<(usize, usize)> {
    let pos = scores.iter().filter(|x| x.ood).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(TendError::Metric(format!(
            "metric undefined for a single class ({pos} OOD, {neg} ID)"
        )));
    }
    if let Some(bad) = scores.iter().find(|x| !x.s.is_finite()) {
        return Err(TendError::Metric(format!("non-finite score {}", bad.s)));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUROC: `P(S_ood > S_id) + ½·P(tie)`, via midranks.
pub fn auroc(scores: &[LabeledScore]) -> Result<f64> {
    let (pos, neg) = class_counts(scores)?;
    let mut sorted: Vec<LabeledScore> = scores.to_vec();
    sorted.sort_by(|a, b| a.s.total_cmp(&b.s));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].s == sorted[i].s {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * sorted[i..=j].iter().filter(|x| x.ood).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `TP / (TP + FN)`; `None` without OOD samples.
    pub fn tpr(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    /// `FP / (FP + TN)`; `None` without ID samples.
    pub fn fpr(&self) -> Option<f64> {
        let n = self.fp + self.tn;
        (n > 0).then(|| self.fp as f64 / n as f64)
    }
}

pub fn confusion(scores: &[LabeledScore], t: f64) -> Confusion {
    let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for x in scores {
        match (x.s >= t, x.ood) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub t: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub diff: f64,
    pub gmean: f64,
}

/// Candidate thresholds: −∞, midpoints between consecutive distinct scores, +∞.
pub fn candidate_thresholds(scores: &[LabeledScore]) -> Vec<f64> {
    let mut v: Vec<f64> = scores.iter().map(|x| x.s).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    let mut out = Vec::with_capacity(v.len() + 1);
    out.push(f64::NEG_INFINITY);
    for w in v.windows(2) {
        let mid = w[0] + (w[1] - w[0]) / 2.0;
        // Adjacent floats have no midpoint strictly above the lower one.
        out.push(if mid > w[0] { mid } else { w[1] });
    }
    out.push(f64::INFINITY);
    out
}

/// Maximizes `√(TPR·(1−FPR))` over the candidate thresholds; ties go to the larger DIFF,
/// then the smaller `t`. When all scores are equal every finite split is degenerate and
/// `t = +∞` (everything predicted ID) is returned.
pub fn gmean_threshold(scores: &[LabeledScore]) -> Result<Threshold> {
    let (pos, neg) = class_counts(scores)?;
    let mut sorted: Vec<LabeledScore> = scores.to_vec();
    sorted.sort_by(|a, b| a.s.total_cmp(&b.s));
    if sorted[0].s == sorted[sorted.len() - 1].s {
        return Ok(Threshold { t: f64::INFINITY, tpr: 0.0, fpr: 0.0, diff: 0.0, gmean: 0.0 });
    }
    let candidates = candidate_thresholds(scores);
    // Sweep upwards: below candidate k sit the first `below` sorted samples. Comparisons use
    // exact integer keys, G² ∝ TP·TN and DIFF ∝ TP·neg − FP·pos, so ties are real ties.
    let mut below = 0usize;
    let (mut fn_, mut tn) = (0usize, 0usize);
    let mut best: Option<((u128, i128), f64, usize, usize)> = None;
    for &t in &candidates {
        while below < sorted.len() && sorted[below].s < t {
            if sorted[below].ood {
                fn_ += 1;
            } else {
                tn += 1;
            }
            below += 1;
        }
        let (tp, fp) = (pos - fn_, neg - tn);
        let key = selection_key(tp, fp, tn, pos, neg);
        // Candidates arrive in increasing t, so a strict comparison keeps the smaller t.
        if best.is_none_or(|(k, ..)| key > k) {
            best = Some((key, t, tp, fp));
        }
    }
    let (_, t, tp, fp) = best.expect("at least two candidates");
    let tpr = tp as f64 / pos as f64;
    let fpr = fp as f64 / neg as f64;
    Ok(Threshold { t, tpr, fpr, diff: tpr - fpr, gmean: (tpr * (1.0 - fpr)).sqrt() })
}

/// Lexicographic ranking key: (TP·TN, TP·neg − FP·pos), monotone in (G-Mean, DIFF).
fn selection_key(tp: usize, fp: usize, tn: usize, pos: usize, neg: usize) -> (u128, i128) {
    (
        tp as u128 * tn as u128,
        tp as i128 * neg as i128 - fp as i128 * pos as i128,
    )
}

/// Fraction of generated validation samples (all OOD) flagged with `S ≥ t`.
pub fn validation_accuracy(val_scores: &[ScoreRecord], t: f64) -> Result<f64> {
    if val_scores.is_empty() {
        return Err(TendError::Metric("validation accuracy of an empty set".into()));
    }
    if let Some(bad) = val_scores.iter().find(|r| r.label != Label::Ood) {
        return Err(TendError::Metric(format!(
            "validation sample `{}` is labeled {}, expected OOD",
            bad.source_id, bad.label
        )));
    }
    let flagged = val_scores.iter().filter(|r| r.s >= t).count();
    Ok(flagged as f64 / val_scores.len() as f64)
}

/// Distortion kind encoded as the `kind:` prefix of a generated validation `source_id`.
pub fn validation_kind(source_id: &str) -> Option<&str> {
    source_id.split_once(':').map(|(k, _)| k)
}

/// ACC_val per distortion kind, keyed by the `kind:` prefix of each `source_id`.
pub fn per_kind_accuracy(val_scores: &[ScoreRecord], t: f64) -> Result<BTreeMap<String, f64>> {
    let mut groups: BTreeMap<String, Vec<ScoreRecord>> = BTreeMap::new();
    for r in val_scores {
        let kind = validation_kind(&r.source_id).ok_or_else(|| {
            TendError::Data(format!("validation source_id `{}` lacks a `kind:` prefix", r.source_id))
        })?;
        groups.entry(kind.to_string()).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(k, rs)| Ok((k, validation_accuracy(&rs, t)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub auroc: f64,
    pub threshold: Threshold,
    pub counts: Confusion,
    pub per_transform_acc: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn from_records(test: &[ScoreRecord], val: Option<&[ScoreRecord]>) -> Result<Self> {
        let scores = LabeledScore::from_records(test)?;
        let auroc = auroc(&scores)?;
        let threshold = gmean_threshold(&scores)?;
        let counts = confusion(&scores, threshold.t);
        let per_transform_acc = match val {
            Some(v) => per_kind_accuracy(v, threshold.t)?,
            None => BTreeMap::new(),
        };
        Ok(Self { auroc, threshold, counts, per_transform_acc })
    }

    /// `key = value` lines; ACC_val lines only when validation scores were supplied.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let th = &self.threshold;
        let _ = writeln!(s, "auroc = {}", self.auroc);
        let _ = writeln!(s, "threshold = {}", th.t);
        let _ = writeln!(s, "gmean = {}", th.gmean);
        let _ = writeln!(s, "tpr = {}", th.tpr);
        let _ = writeln!(s, "fpr = {}", th.fpr);
        let _ = writeln!(s, "diff = {}", th.diff);
        let c = &self.counts;
        let _ = writeln!(s, "tp = {}\nfp = {}\ntn = {}\nfn = {}", c.tp, c.fp, c.tn, c.fn_);
        for (k, v) in &self.per_transform_acc {
            let _ = writeln!(s, "acc_val.{k} = {v}");
        }
        s
    }

    pub fn table_header(&self) -> String {
        let mut h = String::from("dataset,mode,R,fpr,tpr,diff,auroc,threshold");
        for k in self.per_transform_acc.keys() {
            let _ = write!(h, ",acc_{k}");
        }
        h
    }

    /// One table row per (dataset, mode, R).
    pub fn table_row(&self, dataset: &str, mode: &str, margin: Option<f64>) -> String {
        let th = &self.threshold;
        let r = margin.map(|m| m.to_string()).unwrap_or_default();
        let mut row = format!(
            "{dataset},{mode},{r},{},{},{},{},{}",
            th.fpr, th.tpr, th.diff, self.auroc, th.t
        );
        for v in self.per_transform_acc.values() {
            let _ = write!(row, ",{v}");
        }
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::ScoreMode;
    use proptest::prelude::*;

    fn ls(id: &[f64], ood: &[f64]) -> Vec<LabeledScore> {
        id.iter()
            .map(|&s| LabeledScore { s, ood: false })
            .chain(ood.iter().map(|&s| LabeledScore { s, ood: true }))
            .collect()
    }

    /// O(n²) pair count.
    fn auroc_oracle(v: &[LabeledScore]) -> f64 {
        let mut favorable = 0.0;
        let mut pairs = 0.0;
        for a in v.iter().filter(|x| x.ood) {
            for b in v.iter().filter(|x| !x.ood) {
                pairs += 1.0;
                favorable += if a.s > b.s { 1.0 } else if a.s == b.s { 0.5 } else { 0.0 };
            }
        }
        favorable / pairs
    }

    /// Independent sweep: every candidate, counts recomputed from scratch, ranked by exact
    /// rational comparison of G² = TP·TN/(pos·neg) and DIFF.
    fn sweep_oracle(v: &[LabeledScore]) -> (f64, usize, usize) {
        let pos = v.iter().filter(|x| x.ood).count() as i128;
        let neg = v.len() as i128 - pos;
        let mut best: Option<(i128, i128, f64, usize, usize)> = None;
        for t in candidate_thresholds(v) {
            let c = confusion(v, t);
            let g = c.tp as i128 * c.tn as i128;
            let d = c.tp as i128 * neg - c.fp as i128 * pos;
            let replace = match best {
                None => true,
                Some((bg, bd, bt, ..)) => g > bg || (g == bg && (d > bd || (d == bd && t < bt))),
            };
            if replace {
                best = Some((g, d, t, c.tp, c.fp));
            }
        }
        let (_, _, t, tp, fp) = best.unwrap();
        (t, tp, fp)
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&ls(&[0.0, 1.0], &[2.0, 3.0])).unwrap(), 1.0);
        assert_eq!(auroc(&ls(&[1.0, 1.0], &[1.0, 1.0, 1.0])).unwrap(), 0.5);
        assert_eq!(auroc(&ls(&[2.0], &[1.0, 3.0])).unwrap(), 0.5);
        assert!(matches!(auroc(&ls(&[1.0], &[])), Err(TendError::Metric(_))));
    }

    #[test]
    fn gmean_examples() {
        let sep = gmean_threshold(&ls(&[0.0, 1.0], &[2.0, 3.0])).unwrap();
        assert_eq!((sep.t, sep.tpr, sep.fpr, sep.diff), (1.5, 1.0, 0.0, 1.0));

        let same = gmean_threshold(&ls(&[0.4, 0.4], &[0.4])).unwrap();
        assert_eq!((same.t, same.tpr, same.fpr), (f64::INFINITY, 0.0, 0.0));

        let hand = ls(&[0.1, 0.2, 0.4], &[0.3, 0.5, 0.6]);
        let got = gmean_threshold(&hand).unwrap();
        let (t, _, _) = sweep_oracle(&hand);
        assert_eq!(got.t, t);
        // Frozen from the sweep: t = 0.25 (TPR 1, FPR 1/3) and t = 0.45 (TPR 2/3, FPR 0)
        // tie on G-Mean √(2/3) and on DIFF 2/3; the smaller threshold wins.
        assert!((got.t - 0.25).abs() < 1e-12);
        assert!(got.tpr == 1.0 && (got.fpr - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_examples() {
        let hand = ls(&[0.1, 0.2, 0.4], &[0.3, 0.5, 0.6]);
        let all = confusion(&hand, f64::NEG_INFINITY);
        assert_eq!((all.tpr(), all.fpr()), (Some(1.0), Some(1.0)));
        let none = confusion(&hand, f64::INFINITY);
        assert_eq!((none.tpr(), none.fpr()), (Some(0.0), Some(0.0)));
        let c = confusion(&hand, 0.35);
        assert_eq!((c.tp, c.fn_, c.fp, c.tn), (2, 1, 1, 2));
        assert!((c.tpr().unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.fpr().unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(confusion(&ls(&[1.0], &[]), 0.0).tpr(), None);
    }

    fn val(scores: &[f64]) -> Vec<ScoreRecord> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoreRecord {
                source_id: format!("{}:x/{i}", if i % 2 == 0 { "noise" } else { "gaussian_blur" }),
                label: Label::Ood,
                p: None,
                d: None,
                d_prime: None,
                s,
                mode: ScoreMode::Tend,
            })
            .collect()
    }

    #[test]
    fn validation_accuracy_examples() {
        assert_eq!(validation_accuracy(&val(&[0.9, 0.8]), 0.5).unwrap(), 1.0);
        assert_eq!(validation_accuracy(&val(&[0.1, 0.2]), 0.5).unwrap(), 0.0);
        let ten = val(&[0.6, 0.7, 0.5, 0.9, 0.1, 0.55, 0.2, 0.8, 0.3, 0.51]);
        assert_eq!(validation_accuracy(&ten, 0.5).unwrap(), 0.7);
        assert!(validation_accuracy(&[], 0.5).is_err());
        let per = per_kind_accuracy(&ten, 0.5).unwrap();
        assert_eq!(per["noise"], 0.4);
        assert_eq!(per["gaussian_blur"], 1.0);
    }

    #[test]
    fn report_text_and_row() {
        let recs: Vec<ScoreRecord> = [(0.1, Label::Id), (0.2, Label::Id), (0.4, Label::Id), (0.3, Label::Ood), (0.5, Label::Ood), (0.6, Label::Ood)]
            .iter()
            .enumerate()
            .map(|(i, &(s, label))| ScoreRecord {
                source_id: format!("c/{i}"),
                label,
                p: None,
                d: None,
                d_prime: None,
                s,
                mode: ScoreMode::Tend,
            })
            .collect();
        let rep = EvalReport::from_records(&recs, None).unwrap();
        let text = rep.to_text();
        assert!(text.contains("threshold = 0.25"));
        assert!(!text.contains("acc_val"));
        assert_eq!(rep.table_header(), "dataset,mode,R,fpr,tpr,diff,auroc,threshold");
        assert!(rep.table_row("syn", "TEND", Some(250.0)).starts_with("syn,TEND,250,0.333"));
        let with_val = EvalReport::from_records(&recs, Some(&val(&[0.9, 0.1]))).unwrap();
        assert!(with_val.to_text().contains("acc_val.noise = 1\n"));
        assert!(with_val.table_header().ends_with(",acc_gaussian_blur,acc_noise"));
    }

    fn score_set() -> impl Strategy<Value = Vec<LabeledScore>> {
        // Coarse integer-valued scores force frequent ties.
        (1usize..100, 1usize..100, 1u32..30).prop_flat_map(|(n_id, n_ood, levels)| {
            (
                proptest::collection::vec(0..levels, n_id),
                proptest::collection::vec(0..levels, n_ood),
            )
                .prop_map(|(a, b)| {
                    let id: Vec<f64> = a.into_iter().map(|v| v as f64 * 0.1).collect();
                    let ood: Vec<f64> = b.into_iter().map(|v| v as f64 * 0.1).collect();
                    ls(&id, &ood)
                })
        })
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_count(v in score_set()) {
            prop_assert!((auroc(&v).unwrap() - auroc_oracle(&v)).abs() <= 1e-12);
        }

        #[test]
        fn auroc_invariant_under_monotone_map(v in score_set()) {
            let mapped: Vec<_> = v.iter().map(|x| LabeledScore { s: (3.0 * x.s).exp() - 7.0, ood: x.ood }).collect();
            prop_assert!((auroc(&v).unwrap() - auroc(&mapped).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn gmean_never_beaten_by_sweep(v in score_set()) {
            let got = gmean_threshold(&v).unwrap();
            let distinct = v.iter().any(|x| x.s != v[0].s);
            if distinct {
                let (t, tp, fp) = sweep_oracle(&v);
                let c = confusion(&v, got.t);
                prop_assert_eq!((got.t, c.tp, c.fp), (t, tp, fp));
            } else {
                prop_assert_eq!(got.t, f64::INFINITY);
            }
        }

        #[test]
        fn rates_non_increasing_and_counts_partition(v in score_set(), t1 in -1.0f64..4.0, dt in 0.0f64..2.0) {
            let a = confusion(&v, t1);
            let b = confusion(&v, t1 + dt);
            prop_assert_eq!(a.total(), v.len());
            prop_assert!(b.tpr().unwrap() <= a.tpr().unwrap());
            prop_assert!(b.fpr().unwrap() <= a.fpr().unwrap());
        }
    }
}
