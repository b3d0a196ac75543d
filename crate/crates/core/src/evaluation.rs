//! IoU, F1-optimal threshold selection, top-k accuracy and dataset reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataio::Mask;
use crate::error::{Error, Result};

/// |pred ∧ truth| / |pred ∨ truth|; two empty masks agree perfectly.
pub fn iou(pred: &Mask, truth: &Mask) -> Result<f64> {
    let union = pred.union_count(truth)?;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(pred.intersection_count(truth)? as f64 / union as f64)
}

/// One image scored against its best caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredSample {
    pub id: String,
    pub score: f64,
    /// The highest-scoring caption was the ground-truth one.
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn check_samples(samples: &[ScoredSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Empty("scored samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::InvalidArgument(format!("score of `{}` is not finite", s.id)));
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn pr_f1_unchecked(samples: &[ScoredSample], threshold: f64) -> PrF1 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for s in samples {
        match (s.correct, s.score >= threshold) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrF1 { precision, recall, f1 }
}

/// Present iff `score >= threshold`; correct-and-present samples are true positives.
pub fn pr_f1(samples: &[ScoredSample], threshold: f64) -> Result<PrF1> {
    check_samples(samples)?;
    Ok(pr_f1_unchecked(samples, threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub threshold: f64,
    pub f1: f64,
    /// One row per distinct observed score, ascending.
    pub table: Vec<ThresholdRow>,
}

/// Sweeps every distinct observed score and keeps the best F1, smallest threshold on ties.
pub fn optimal_threshold(samples: &[ScoredSample]) -> Result<ThresholdReport> {
    check_samples(samples)?;
    let mut candidates: Vec<f64> = samples.iter().map(|s| s.score).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let table: Vec<ThresholdRow> = candidates
        .iter()
        .map(|&t| {
            let m = pr_f1_unchecked(samples, t);
            ThresholdRow { threshold: t, precision: m.precision, recall: m.recall, f1: m.f1 }
        })
        .collect();
    let mut best = &table[0];
    for row in &table[1..] {
        if row.f1 > best.f1 {
            best = row;
        }
    }
    Ok(ThresholdReport { threshold: best.threshold, f1: best.f1, table })
}

/// Indices of the `k` highest scores, lower index first among equals.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Fraction of rows whose label is among the row's `k` best captions.
pub fn topk_accuracy(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if scores.is_empty() {
        return Err(Error::Empty("score matrix".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::dim(format!("{} score rows for {} labels", scores.len(), labels.len())));
    }
    let c = scores[0].len();
    if c == 0 || scores.iter().any(|r| r.len() != c) {
        return Err(Error::dim("score rows must share one nonzero caption count"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::dim(format!("label {l} out of range for {c} captions")));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(row, &label)| top_k(row, k).contains(&label))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Rounds to 6 decimals so reports print identically across runs.
pub fn round6(v: f64) -> f64 {
    let r = (v * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleIou {
    pub id: String,
    pub prompt_kind: String,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
}

/// Dataset-level masking report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingReport {
    pub per_sample: Vec<SampleIou>,
    pub mean_iou_by_kind: BTreeMap<String, f64>,
    pub threshold_report: ThresholdReport,
    pub accuracy: Accuracy,
    /// Samples without a ground-truth mask; excluded from IoU.
    pub missing_masks: Vec<String>,
}

impl MaskingReport {
    /// Sorts rows by (id, kind), averages per kind and rounds every float.
    pub fn build(
        mut per_sample: Vec<SampleIou>,
        threshold_report: ThresholdReport,
        accuracy: Accuracy,
        mut missing_masks: Vec<String>,
    ) -> Self {
        per_sample.sort_by(|a, b| a.id.cmp(&b.id).then_with(|| a.prompt_kind.cmp(&b.prompt_kind)));
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for s in &per_sample {
            let e = sums.entry(s.prompt_kind.clone()).or_default();
            e.0 += s.iou;
            e.1 += 1;
        }
        let mean_iou_by_kind = sums.into_iter().map(|(k, (s, n))| (k, round6(s / n as f64))).collect();
        for s in &mut per_sample {
            s.iou = round6(s.iou);
        }
        missing_masks.sort();
        let round_row = |r: &ThresholdRow| ThresholdRow {
            threshold: round6(r.threshold),
            precision: round6(r.precision),
            recall: round6(r.recall),
            f1: round6(r.f1),
        };
        let threshold_report = ThresholdReport {
            threshold: round6(threshold_report.threshold),
            f1: round6(threshold_report.f1),
            table: threshold_report.table.iter().map(round_row).collect(),
        };
        let accuracy = Accuracy { top1: round6(accuracy.top1), top5: round6(accuracy.top5) };
        Self { per_sample, mean_iou_by_kind, threshold_report, accuracy, missing_masks }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(score: f64, correct: bool) -> ScoredSample {
        ScoredSample { id: format!("{score}"), score, correct }
    }

    #[test]
    fn iou_examples() {
        let a = Mask::from_fn(8, 8, |x, y| x < 4 && y < 4);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = Mask::from_fn(8, 8, |x, y| x >= 4 && y >= 4);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&Mask::new(8, 8), &Mask::new(8, 8)).unwrap(), 1.0);
        assert_eq!(iou(&a, &Mask::new(8, 8)).unwrap(), 0.0);

        let pred = Mask::from_fn(16, 20, |_, y| y <= 9);
        let truth = Mask::from_fn(16, 20, |_, y| (5..=14).contains(&y));
        assert!((iou(&pred, &truth).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(iou(&a, &Mask::new(8, 9)).is_err());
    }

    #[test]
    fn pr_f1_examples() {
        let all = [s(0.9, true), s(0.4, true)];
        assert_eq!(pr_f1(&all, 0.1).unwrap(), PrF1 { precision: 1.0, recall: 1.0, f1: 1.0 });
        let above = pr_f1(&all, 0.95).unwrap();
        assert_eq!((above.recall, above.f1), (0.0, 0.0));

        let three = [s(0.9, true), s(0.8, true), s(0.2, false)];
        let m = pr_f1(&three, 0.2).unwrap();
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 0.8).abs() < 1e-15);
        assert!(pr_f1(&[], 0.5).is_err());
    }

    #[test]
    fn optimal_threshold_examples() {
        let three = [s(0.9, true), s(0.8, true), s(0.2, false)];
        let r = optimal_threshold(&three).unwrap();
        assert_eq!((r.threshold, r.f1), (0.8, 1.0));
        assert_eq!(r.table.len(), 3);

        let all = [s(0.7, true), s(0.3, true), s(0.5, true)];
        let r = optimal_threshold(&all).unwrap();
        assert_eq!((r.threshold, r.f1), (0.3, 1.0));
        assert!(optimal_threshold(&[]).is_err());
        assert!(optimal_threshold(&[s(f64::NAN, true)]).is_err());
    }

    #[test]
    fn topk_examples() {
        let rows = vec![vec![0.1, 0.5, 0.4]];
        assert_eq!(topk_accuracy(&rows, &[1], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&rows, &[0], 3).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&rows, &[0], 7).unwrap(), 1.0);
        let tie = vec![vec![0.9, 0.1, 0.9]];
        assert_eq!(topk_accuracy(&tie, &[2], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&tie, &[0], 1).unwrap(), 1.0);
        assert!(topk_accuracy(&rows, &[3], 1).is_err());
        assert!(topk_accuracy(&rows, &[0, 1], 1).is_err());
        assert!(topk_accuracy(&rows, &[0], 0).is_err());
    }

    #[test]
    fn report_rounds_and_sorts() {
        let rows = vec![
            SampleIou { id: "b".into(), prompt_kind: "multi".into(), iou: 0.5 },
            SampleIou { id: "a".into(), prompt_kind: "multi".into(), iou: 1.0 / 3.0 },
        ];
        let tr = ThresholdReport { threshold: 0.1234567, f1: 1.0, table: vec![] };
        let r = MaskingReport::build(rows, tr, Accuracy { top1: 1.0, top5: 1.0 }, vec!["z".into(), "c".into()]);
        assert_eq!(r.per_sample[0].id, "a");
        assert_eq!(r.per_sample[0].iou, 0.333333);
        assert_eq!(r.mean_iou_by_kind["multi"], 0.416667);
        assert_eq!(r.threshold_report.threshold, 0.123457);
        assert_eq!(r.missing_masks, vec!["c", "z"]);
    }
}
