//! Segmentation accuracy, pixel-level sparsification curves and frame-level
//! ranking metrics.
//!
//! Void pixels ([`VOID_LABEL`] in the ground truth) are dropped before any
//! counting or ranking.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{same_hw, LabelMap, ScalarMap, TensorError, VOID_LABEL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("expected {expected} items, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("predicted label {label} is not a class index below {classes}")]
    PredictionLabel { label: u8, classes: usize },
    #[error("ground-truth label {label} is neither void nor below {classes}")]
    GroundTruthLabel { label: u8, classes: usize },
    #[error("recall points must lie in (0, 1] and strictly decrease, got {0:?}")]
    RecallPoints(Vec<f64>),
    #[error("retrieval percentage {0} outside (0, 1]")]
    Percentage(f64),
    #[error("rankings do not contain the same ids")]
    IdSetMismatch,
    #[error("ranking contains id {0} twice")]
    DuplicateId(usize),
    #[error("at least two items are needed, got {0}")]
    TooFewItems(usize),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(EvalError::LengthMismatch {
                expected: classes * classes,
                got: counts.len(),
            });
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        same_hw(pred.hw(), gt.hw(), 1, 1)?;
        let c = self.classes;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == VOID_LABEL {
                continue;
            }
            check_labels(p, g, c)?;
            self.counts[usize::from(g) * c + usize::from(p)] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(EvalError::LengthMismatch {
                expected: self.classes,
                got: other.classes,
            });
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }
}

fn check_labels(p: u8, g: u8, classes: usize) -> Result<()> {
    if usize::from(g) >= classes {
        return Err(EvalError::GroundTruthLabel { label: g, classes });
    }
    if usize::from(p) >= classes {
        return Err(EvalError::PredictionLabel { label: p, classes });
    }
    Ok(())
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    /// `None` for classes absent from the ground truth.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub class_avg: f64,
    pub global_avg: f64,
    pub mean_iou: f64,
}

/// Metrics from a (possibly fractionally weighted) confusion matrix.
fn metrics_from_weights(classes: usize, w: &[f64]) -> Result<SegMetrics> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(EvalError::Empty);
    }
    let row = |c: usize| (0..classes).map(|k| w[c * classes + k]).sum::<f64>();
    let col = |c: usize| (0..classes).map(|k| w[k * classes + c]).sum::<f64>();
    let mut per_class_accuracy = Vec::with_capacity(classes);
    let mut per_class_iou = Vec::with_capacity(classes);
    let mut trace = 0.0;
    for c in 0..classes {
        let d = w[c * classes + c];
        trace += d;
        let (r, k) = (row(c), col(c));
        per_class_accuracy.push((r > 0.0).then(|| d / r));
        per_class_iou.push((r + k > 0.0).then(|| d / (r + k - d)));
    }
    let mean = |xs: &[Option<f64>]| {
        let present: Vec<f64> = xs.iter().flatten().copied().collect();
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(SegMetrics {
        class_avg: mean(&per_class_accuracy),
        mean_iou: mean(&per_class_iou),
        global_avg: trace / total,
        per_class_accuracy,
        per_class_iou,
    })
}

pub fn seg_metrics(cm: &ConfusionMatrix) -> Result<SegMetrics> {
    let w: Vec<f64> = cm.counts.iter().map(|&v| v as f64).collect();
    metrics_from_weights(cm.classes, &w)
}

/// Whether sparsification thresholds pool every test pixel or apply per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankingMode {
    #[default]
    Global,
    PerFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub mode: RankingMode,
    pub points: Vec<PrPoint>,
}

/// `{1.0, 0.95, ..., 0.5}`.
pub fn default_recall_points() -> Vec<f64> {
    (0..=10).map(|i| 1.0 - 0.05 * i as f64).collect()
}

pub(crate) fn check_recall_points(points: &[f64]) -> Result<()> {
    let in_range = points.iter().all(|&r| r > 0.0 && r <= 1.0);
    let decreasing = points.windows(2).all(|w| w[0] > w[1]);
    if points.is_empty() || !in_range || !decreasing {
        return Err(EvalError::RecallPoints(points.to_vec()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct RankedPixel {
    unc: f64,
    gt: u8,
    pred: u8,
}

/// Confusion weights of the `recall` fraction of `pixels` with the lowest
/// uncertainty. `pixels` must be sorted by uncertainty. The tie group that
/// straddles the cut contributes fractionally, which is the expectation of
/// keeping a uniform random subset of it.
fn kept_weights(pixels: &[RankedPixel], recall: f64, classes: usize, w: &mut [f64]) {
    let target = recall * pixels.len() as f64;
    let mut kept = 0.0;
    let mut i = 0;
    while i < pixels.len() && kept < target {
        let mut j = i + 1;
        while j < pixels.len() && pixels[j].unc == pixels[i].unc {
            j += 1;
        }
        let group = (j - i) as f64;
        let share = ((target - kept) / group).min(1.0);
        for px in &pixels[i..j] {
            w[usize::from(px.gt) * classes + usize::from(px.pred)] += share;
        }
        kept += group * share;
        i = j;
    }
}

/// Mean IoU over the most certain pixels at each recall point.
pub fn pr_sparsification(
    preds: &[LabelMap],
    gts: &[LabelMap],
    uncs: &[ScalarMap],
    classes: usize,
    recall_points: &[f64],
    mode: RankingMode,
) -> Result<PrCurve> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    for other in [gts.len(), uncs.len()] {
        if other != preds.len() {
            return Err(EvalError::LengthMismatch {
                expected: preds.len(),
                got: other,
            });
        }
    }
    check_recall_points(recall_points)?;

    let mut frames: Vec<Vec<RankedPixel>> = Vec::with_capacity(preds.len());
    for ((p, g), u) in preds.iter().zip(gts).zip(uncs) {
        same_hw(p.hw(), g.hw(), 1, 1)?;
        same_hw(p.hw(), u.hw(), 1, 1)?;
        let mut px = Vec::with_capacity(g.data().len());
        for ((&pl, &gl), &uv) in p.data().iter().zip(g.data()).zip(u.data()) {
            if gl == VOID_LABEL {
                continue;
            }
            check_labels(pl, gl, classes)?;
            px.push(RankedPixel {
                unc: uv,
                gt: gl,
                pred: pl,
            });
        }
        frames.push(px);
    }
    let groups: Vec<Vec<RankedPixel>> = match mode {
        RankingMode::Global => vec![frames.into_iter().flatten().collect()],
        RankingMode::PerFrame => frames,
    };
    let groups: Vec<Vec<RankedPixel>> = groups
        .into_iter()
        .map(|mut g| {
            // Stable: equal values keep frame then row-major order.
            g.sort_by(|a, b| a.unc.total_cmp(&b.unc));
            g
        })
        .collect();
    if groups.iter().all(|g| g.is_empty()) {
        return Err(EvalError::Empty);
    }

    let mut points = Vec::with_capacity(recall_points.len());
    for &recall in recall_points {
        let mut w = vec![0.0; classes * classes];
        for g in &groups {
            kept_weights(g, recall, classes, &mut w);
        }
        points.push(PrPoint {
            recall,
            miou: metrics_from_weights(classes, &w)?.mean_iou,
        });
    }
    Ok(PrCurve { mode, points })
}

/// Order ids by descending score; equal scores keep ascending id order.
fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids
}

/// Fraction of non-void pixels predicted wrongly, per frame. A frame with no
/// labeled pixels scores zero.
pub fn frame_error_rates(preds: &[LabelMap], gts: &[LabelMap]) -> Result<Vec<f64>> {
    if preds.len() != gts.len() {
        return Err(EvalError::LengthMismatch {
            expected: preds.len(),
            got: gts.len(),
        });
    }
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            same_hw(p.hw(), g.hw(), 1, 1)?;
            let (mut wrong, mut total) = (0usize, 0usize);
            for (&pl, &gl) in p.data().iter().zip(g.data()) {
                if gl != VOID_LABEL {
                    total += 1;
                    wrong += usize::from(pl != gl);
                }
            }
            Ok(if total == 0 {
                0.0
            } else {
                wrong as f64 / total as f64
            })
        })
        .collect()
}

pub fn frame_error_rank(preds: &[LabelMap], gts: &[LabelMap]) -> Result<Vec<usize>> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(rank_descending(&frame_error_rates(preds, gts)?))
}

/// How a frame's pixel uncertainties collapse into one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameReduction {
    #[default]
    Mean,
    Sum,
    P95,
}

impl FrameReduction {
    pub fn apply(self, m: &ScalarMap) -> f64 {
        match self {
            FrameReduction::Mean => m.mean(),
            FrameReduction::Sum => m.data().iter().sum(),
            FrameReduction::P95 => {
                let mut v = m.data().to_vec();
                v.sort_by(f64::total_cmp);
                // nearest-rank percentile
                let rank = (0.95 * v.len() as f64).ceil() as usize;
                v[rank.clamp(1, v.len()) - 1]
            }
        }
    }
}

pub fn frame_uncertainty_scores(unc_maps: &[ScalarMap], reduction: FrameReduction) -> Vec<f64> {
    unc_maps.iter().map(|m| reduction.apply(m)).collect()
}

pub fn frame_uncertainty_rank(unc_maps: &[ScalarMap], reduction: FrameReduction) -> Vec<usize> {
    rank_descending(&frame_uncertainty_scores(unc_maps, reduction))
}

fn positions(rank: &[usize]) -> Result<std::collections::HashMap<usize, usize>> {
    let mut pos = std::collections::HashMap::with_capacity(rank.len());
    for (i, &id) in rank.iter().enumerate() {
        if pos.insert(id, i).is_some() {
            return Err(EvalError::DuplicateId(id));
        }
    }
    Ok(pos)
}

/// `(concordant - discordant) / (n (n - 1) / 2)` between two orderings of the
/// same ids.
pub fn kendall_tau(rank_a: &[usize], rank_b: &[usize]) -> Result<f64> {
    let pa = positions(rank_a)?;
    let pb = positions(rank_b)?;
    if rank_a.len() != rank_b.len() || pa.keys().any(|k| !pb.contains_key(k)) {
        return Err(EvalError::IdSetMismatch);
    }
    let n = rank_a.len();
    if n < 2 {
        return Err(EvalError::TooFewItems(n));
    }
    // Positions in b, visited in a's order: a pair is concordant when b keeps
    // the same relative order.
    let in_b: Vec<usize> = rank_a.iter().map(|id| pb[id]).collect();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            if in_b[i] < in_b[j] {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((concordant - discordant) as f64 / pairs)
}

/// Number of items retrieved at `percentage` of `n`.
pub fn retrieval_count(percentage: f64, n: usize) -> usize {
    // The epsilon keeps 0.3 * 10 from rounding up to 4.
    ((percentage * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// IoU of the top-`M` ids of two rankings, `M = ceil(percentage * n)`.
pub fn ranking_iou(gt_rank: &[usize], unc_rank: &[usize], percentage: f64) -> Result<f64> {
    if gt_rank.is_empty() || unc_rank.is_empty() {
        return Err(EvalError::Empty);
    }
    if !(percentage > 0.0 && percentage <= 1.0) {
        return Err(EvalError::Percentage(percentage));
    }
    let pa = positions(gt_rank)?;
    let pb = positions(unc_rank)?;
    if gt_rank.len() != unc_rank.len() || pa.keys().any(|k| !pb.contains_key(k)) {
        return Err(EvalError::IdSetMismatch);
    }
    let m = retrieval_count(percentage, gt_rank.len());
    let g: HashSet<usize> = gt_rank[..m].iter().copied().collect();
    let u: HashSet<usize> = unc_rank[..m].iter().copied().collect();
    let inter = g.intersection(&u).count();
    let union = g.union(&u).count();
    Ok(inter as f64 / union as f64)
}

/// `{10%, 30%, 50%, 70%}`.
pub const DEFAULT_RETRIEVAL: [f64; 4] = [0.1, 0.3, 0.5, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingIou {
    pub percentage: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    /// `None` when either ranking carries no information.
    pub kendall_tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kendall_tau_note: Option<String>,
    pub ranking_iou: Vec<RankingIou>,
}

/// Frame-level comparison of an error ranking with an uncertainty ranking
/// built from per-frame scores. Kendall tau is undefined (reported as
/// `None`) when all error scores or all uncertainty scores are equal, since
/// the order is then only the id tie-break.
pub fn ranking_report(
    error_scores: &[f64],
    unc_scores: &[f64],
    percentages: &[f64],
) -> Result<RankingReport> {
    if error_scores.len() != unc_scores.len() {
        return Err(EvalError::LengthMismatch {
            expected: error_scores.len(),
            got: unc_scores.len(),
        });
    }
    let gt_rank = rank_descending(error_scores);
    let unc_rank = rank_descending(unc_scores);
    let constant = |s: &[f64]| s.windows(2).all(|w| w[0] == w[1]);
    let (kendall_tau, kendall_tau_note) = if error_scores.len() < 2 {
        (None, Some("fewer than two labeled frames".to_string()))
    } else if constant(error_scores) {
        (
            None,
            Some("all frames have the same error rate".to_string()),
        )
    } else if constant(unc_scores) {
        (
            None,
            Some("all frames have the same uncertainty score".to_string()),
        )
    } else {
        (Some(kendall_tau(&gt_rank, &unc_rank)?), None)
    };
    let ranking_iou = percentages
        .iter()
        .map(|&p| {
            Ok(RankingIou {
                percentage: p,
                value: ranking_iou(&gt_rank, &unc_rank, p)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RankingReport {
        kendall_tau,
        kendall_tau_note,
        ranking_iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lm(w: usize, data: &[u8]) -> LabelMap {
        LabelMap::from_vec(data.len() / w, w, 8, data.to_vec()).unwrap()
    }

    #[test]
    fn confusion_cases() {
        let gt = lm(2, &[0, 1, 1, 0]);
        let cm = confusion(&gt, &gt, 2).unwrap();
        assert_eq!(cm.counts(), &[2, 0, 0, 2]);

        let void = lm(2, &[VOID_LABEL; 4]);
        assert_eq!(confusion(&gt, &void, 2).unwrap().total(), 0);

        // one pixel of class 1 predicted as 0
        let pred = lm(2, &[0, 0, 1, 0]);
        let cm = confusion(&pred, &gt, 2).unwrap();
        assert_eq!(cm.counts(), &[2, 0, 1, 1]);

        assert!(confusion(&pred, &lm(1, &[0, 1, 1, 0]), 2).is_err());
        assert!(matches!(
            confusion(&lm(2, &[0, 3, 0, 0]), &gt, 2),
            Err(EvalError::PredictionLabel { .. })
        ));
    }

    #[test]
    fn seg_metrics_binary_case() {
        let cm = ConfusionMatrix::from_counts(2, vec![90, 10, 0, 0]).unwrap();
        let m = seg_metrics(&cm).unwrap();
        assert_eq!(m.global_avg, 0.9);
        assert_eq!(m.per_class_iou, vec![Some(0.9), Some(0.0)]);
        assert_eq!(m.mean_iou, 0.45);
        assert_eq!(m.per_class_accuracy, vec![Some(0.9), None]);
        assert_eq!(m.class_avg, 0.9);
    }

    #[test]
    fn seg_metrics_perfect_and_empty() {
        let cm = ConfusionMatrix::from_counts(3, vec![5, 0, 0, 0, 7, 0, 0, 0, 0]).unwrap();
        let m = seg_metrics(&cm).unwrap();
        assert_eq!((m.class_avg, m.global_avg, m.mean_iou), (1.0, 1.0, 1.0));
        assert_eq!(seg_metrics(&ConfusionMatrix::new(3)), Err(EvalError::Empty));
    }

    #[test]
    fn seg_metrics_three_class_hand_computed() {
        //        pred 0  1  2
        // gt 0:      5  1  0
        // gt 1:      2  6  2
        // gt 2:      0  1  3
        let cm = ConfusionMatrix::from_counts(3, vec![5, 1, 0, 2, 6, 2, 0, 1, 3]).unwrap();
        let m = seg_metrics(&cm).unwrap();
        // accuracies 5/6, 6/10, 3/4
        assert!((m.class_avg - (5.0 / 6.0 + 0.6 + 0.75) / 3.0).abs() < 1e-15);
        assert!((m.global_avg - 14.0 / 20.0).abs() < 1e-15);
        // IoU: 5/(6+7-5)=5/8, 6/(10+8-6)=1/2, 3/(4+5-3)=1/2
        assert!((m.mean_iou - (0.625 + 0.5 + 0.5) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pr_full_recall_equals_mean_iou() {
        let gt = lm(4, &[0, 0, 1, 1, 2, 2, 0, 1]);
        let pred = lm(4, &[0, 1, 1, 1, 2, 0, 0, 1]);
        let unc = ScalarMap::from_vec(2, 4, (0..8).map(|i| i as f64).collect()).unwrap();
        let curve = pr_sparsification(
            std::slice::from_ref(&pred),
            std::slice::from_ref(&gt),
            &[unc],
            3,
            &[1.0],
            RankingMode::Global,
        )
        .unwrap();
        let full = seg_metrics(&confusion(&pred, &gt, 3).unwrap())
            .unwrap()
            .mean_iou;
        assert!((curve.points[0].miou - full).abs() < 1e-15);
    }

    #[test]
    fn pr_perfect_ordering_reaches_one() {
        let gt = lm(5, &[0, 0, 1, 1, 2, 2, 0, 1, 2, 0]);
        let pred = lm(5, &[0, 1, 1, 1, 2, 0, 0, 1, 1, 0]);
        let unc: Vec<f64> = pred
            .data()
            .iter()
            .zip(gt.data())
            .map(|(p, g)| f64::from(p != g))
            .collect();
        let unc = ScalarMap::from_vec(2, 5, unc).unwrap();
        let curve = pr_sparsification(
            &[pred],
            &[gt],
            &[unc],
            3,
            &[1.0, 0.9, 0.7, 0.5],
            RankingMode::Global,
        )
        .unwrap();
        assert!(curve.points[0].miou < 1.0);
        assert_eq!(curve.points[2].miou, 1.0);
        assert_eq!(curve.points[3].miou, 1.0);
    }

    #[test]
    fn pr_constant_uncertainty_is_flat() {
        let gt = lm(5, &[0, 0, 1, 1, 2, 2, 0, 1, 2, 0]);
        let pred = lm(5, &[0, 1, 1, 1, 2, 0, 0, 1, 1, 0]);
        let unc = ScalarMap::filled(2, 5, 0.3).unwrap();
        let curve = pr_sparsification(
            &[pred],
            &[gt],
            &[unc],
            3,
            &default_recall_points(),
            RankingMode::Global,
        )
        .unwrap();
        let first = curve.points[0].miou;
        assert!(curve.points.iter().all(|p| (p.miou - first).abs() < 1e-12));
    }

    #[test]
    fn pr_rejects_bad_inputs() {
        let gt = lm(2, &[0, 1]);
        let unc = ScalarMap::filled(1, 2, 0.0).unwrap();
        let err = pr_sparsification(
            std::slice::from_ref(&gt),
            std::slice::from_ref(&gt),
            std::slice::from_ref(&unc),
            2,
            &[1.0, 0.0],
            RankingMode::Global,
        );
        assert!(matches!(err, Err(EvalError::RecallPoints(_))));
        assert_eq!(
            pr_sparsification(&[], &[], &[], 2, &[1.0], RankingMode::Global),
            Err(EvalError::Empty)
        );
        let void = lm(2, &[VOID_LABEL, VOID_LABEL]);
        assert_eq!(
            pr_sparsification(
                std::slice::from_ref(&gt),
                &[void],
                &[unc],
                2,
                &[1.0],
                RankingMode::Global
            ),
            Err(EvalError::Empty)
        );
    }

    #[test]
    fn pr_per_frame_mode_thresholds_each_frame() {
        // Frame 0 is all low uncertainty and wrong; frame 1 all high and right.
        let gt = lm(2, &[0, 1]);
        let wrong = lm(2, &[1, 0]);
        let lo = ScalarMap::filled(1, 2, 0.1).unwrap();
        let hi = ScalarMap::filled(1, 2, 0.9).unwrap();
        let preds = [wrong, gt.clone()];
        let gts = [gt.clone(), gt];
        let uncs = [lo, hi];
        let global =
            pr_sparsification(&preds, &gts, &uncs, 2, &[0.5], RankingMode::Global).unwrap();
        let per = pr_sparsification(&preds, &gts, &uncs, 2, &[0.5], RankingMode::PerFrame).unwrap();
        assert_eq!(global.points[0].miou, 0.0);
        assert!((per.points[0].miou - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(per.mode, RankingMode::PerFrame);
    }

    #[test]
    fn frame_error_rank_cases() {
        let gt = lm(2, &[0, 1, 1, 0]);
        assert_eq!(
            frame_error_rank(
                &[gt.clone(), gt.clone(), gt.clone()],
                &[gt.clone(), gt.clone(), gt.clone()]
            )
            .unwrap(),
            vec![0, 1, 2]
        );
        let bad = lm(2, &[1, 1, 1, 0]);
        assert_eq!(
            frame_error_rank(
                &[gt.clone(), bad.clone(), gt.clone()],
                &[gt.clone(), gt.clone(), gt.clone()]
            )
            .unwrap(),
            vec![1, 0, 2]
        );
        // errors per frame: 1/4, 3/4, 2/4
        let f0 = lm(2, &[1, 1, 1, 0]);
        let f1 = lm(2, &[1, 0, 0, 0]);
        let f2 = lm(2, &[1, 0, 1, 0]);
        assert_eq!(
            frame_error_rank(&[f0, f1, f2], &[gt.clone(), gt.clone(), gt.clone()]).unwrap(),
            vec![1, 2, 0]
        );
        assert!(frame_error_rank(std::slice::from_ref(&gt), &[]).is_err());
    }

    #[test]
    fn frame_uncertainty_rank_cases() {
        let z = ScalarMap::filled(2, 2, 0.0).unwrap();
        assert_eq!(
            frame_uncertainty_rank(&[z.clone(), z.clone(), z.clone()], FrameReduction::Mean),
            vec![0, 1, 2]
        );
        let hot = ScalarMap::filled(2, 2, 2.0).unwrap();
        assert_eq!(
            frame_uncertainty_rank(&[z.clone(), hot, z], FrameReduction::Mean)[0],
            1
        );
        let maps: Vec<ScalarMap> = [0.1, 0.3, 0.2]
            .iter()
            .map(|&v| ScalarMap::filled(2, 2, v).unwrap())
            .collect();
        assert_eq!(
            frame_uncertainty_rank(&maps, FrameReduction::Mean),
            vec![1, 2, 0]
        );
        assert_eq!(
            frame_uncertainty_rank(&maps, FrameReduction::Sum),
            vec![1, 2, 0]
        );
        let m = ScalarMap::from_vec(1, 20, (1..=20).map(f64::from).collect()).unwrap();
        assert_eq!(FrameReduction::P95.apply(&m), 19.0);
    }

    #[test]
    fn kendall_tau_cases() {
        assert_eq!(kendall_tau(&[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[1, 2, 3, 4], &[4, 3, 2, 1]).unwrap(), -1.0);
        assert!((kendall_tau(&[1, 2, 3], &[1, 3, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(kendall_tau(&[1, 2], &[1, 3]), Err(EvalError::IdSetMismatch));
        assert_eq!(
            kendall_tau(&[1, 1], &[1, 1]),
            Err(EvalError::DuplicateId(1))
        );
        assert_eq!(kendall_tau(&[1], &[1]), Err(EvalError::TooFewItems(1)));
    }

    #[test]
    fn ranking_iou_cases() {
        // a, b, c, d, e, f = 0..6; top half
        assert_eq!(
            ranking_iou(&[0, 1, 2, 3, 4, 5], &[0, 1, 2, 3, 4, 5], 0.3).unwrap(),
            1.0
        );
        assert_eq!(ranking_iou(&[0, 1, 2, 3], &[2, 3, 0, 1], 0.5).unwrap(), 0.0);
        assert_eq!(
            ranking_iou(&[0, 1, 2, 4, 3, 5], &[0, 1, 3, 2, 4, 5], 0.5).unwrap(),
            0.5
        );
        assert_eq!(retrieval_count(0.3, 10), 3);
        assert_eq!(retrieval_count(0.1, 23), 3);
        assert!(matches!(
            ranking_iou(&[0, 1], &[0, 1], 0.0),
            Err(EvalError::Percentage(_))
        ));
        assert_eq!(ranking_iou(&[], &[], 0.5), Err(EvalError::Empty));
    }

    #[test]
    fn ranking_report_constant_errors_is_null() {
        let r = ranking_report(&[0.0, 0.0, 0.0], &[0.1, 0.3, 0.2], &DEFAULT_RETRIEVAL).unwrap();
        assert_eq!(r.kendall_tau, None);
        assert!(r.kendall_tau_note.is_some());
        let r = ranking_report(&[0.3, 0.1, 0.2], &[0.1, 0.3, 0.2], &[1.0]).unwrap();
        assert_eq!(r.kendall_tau, Some(-1.0));
        assert_eq!(r.ranking_iou[0].value, 1.0);
    }

    fn permutation(n: usize, keys: &[u64]) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..n).collect();
        ids.sort_by_key(|&i| keys[i]);
        ids
    }

    proptest! {
        #[test]
        fn tau_antisymmetric_under_reversal(n in 2usize..12, ka in prop::collection::vec(any::<u64>(), 12), kb in prop::collection::vec(any::<u64>(), 12)) {
            let a = permutation(n, &ka);
            let b = permutation(n, &kb);
            let mut rb = b.clone();
            rb.reverse();
            let t = kendall_tau(&a, &b).unwrap();
            prop_assert!((kendall_tau(&a, &rb).unwrap() + t).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&t));
        }

        #[test]
        fn ranking_iou_full_is_one(n in 1usize..12, ka in prop::collection::vec(any::<u64>(), 12), kb in prop::collection::vec(any::<u64>(), 12)) {
            prop_assert_eq!(ranking_iou(&permutation(n, &ka), &permutation(n, &kb), 1.0).unwrap(), 1.0);
        }

        #[test]
        fn confusion_is_additive(frames in prop::collection::vec(prop::collection::vec((0u8..3, 0u8..4), 6), 1..5)) {
            // gt label 3 stands for void
            let mut summed = ConfusionMatrix::new(3);
            let (mut all_p, mut all_g) = (Vec::new(), Vec::new());
            for f in &frames {
                let p: Vec<u8> = f.iter().map(|x| x.0).collect();
                let g: Vec<u8> = f.iter().map(|x| if x.1 == 3 { VOID_LABEL } else { x.1 }).collect();
                summed.merge(&confusion(&lm(6, &p), &lm(6, &g), 3).unwrap()).unwrap();
                all_p.extend(p);
                all_g.extend(g);
            }
            let pooled = confusion(&lm(6, &all_p), &lm(6, &all_g), 3).unwrap();
            prop_assert_eq!(&summed, &pooled);
            if pooled.total() > 0 {
                prop_assert_eq!(seg_metrics(&summed).unwrap(), seg_metrics(&pooled).unwrap());
            }
        }

        #[test]
        fn void_pixels_never_change_metrics(base in prop::collection::vec((0u8..3, 0u8..3, 0.0f64..1.0), 4..20),
                                           extra in prop::collection::vec((0u8..3, 0.0f64..1.0), 1..10)) {
            let p: Vec<u8> = base.iter().map(|x| x.0).collect();
            let g: Vec<u8> = base.iter().map(|x| x.1).collect();
            let u: Vec<f64> = base.iter().map(|x| x.2).collect();
            let (mut p2, mut g2, mut u2) = (p.clone(), g.clone(), u.clone());
            for e in &extra {
                p2.push(e.0);
                g2.push(VOID_LABEL);
                u2.push(e.1);
            }
            let n = p.len();
            let n2 = p2.len();
            let cm1 = confusion(&lm(n, &p), &lm(n, &g), 3).unwrap();
            let cm2 = confusion(&lm(n2, &p2), &lm(n2, &g2), 3).unwrap();
            prop_assert_eq!(seg_metrics(&cm1).unwrap(), seg_metrics(&cm2).unwrap());
            let c1 = pr_sparsification(&[lm(n, &p)], &[lm(n, &g)], &[ScalarMap::from_vec(1, n, u).unwrap()], 3, &default_recall_points(), RankingMode::Global).unwrap();
            let c2 = pr_sparsification(&[lm(n2, &p2)], &[lm(n2, &g2)], &[ScalarMap::from_vec(1, n2, u2).unwrap()], 3, &default_recall_points(), RankingMode::Global).unwrap();
            prop_assert_eq!(c1, c2);
        }
    }
}
