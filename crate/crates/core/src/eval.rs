//! Detection evaluation: greedy IoU matching of scored predictions against
//! ground truth, 101-point interpolated average precision per class and IoU
//! threshold, and the averaged report used by the pipeline and CLI.
//!
//! Matching is deterministic: predictions are ranked by descending score
//! with ties kept in insertion order, and each prediction claims the
//! unclaimed same-image ground-truth box of highest IoU (lowest index on
//! ties) when that IoU reaches the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoxXYXY};
use crate::labelspace::ToothLabel;
use crate::{real, Real};

/// IoU thresholds of the averaged metric: 0.50 to 0.95 in steps of 0.05.
pub const IOU_THRESHOLDS: [f64; 10] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// One scored, labeled detection on one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord<F: Real> {
    pub image_id: usize,
    pub label: ToothLabel,
    pub score: F,
    pub bbox: BoxXYXY<F>,
}

/// One labeled ground-truth box on one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth<F: Real> {
    pub image_id: usize,
    pub label: ToothLabel,
    pub bbox: BoxXYXY<F>,
}

/// One rank of a precision/recall sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint<F: Real> {
    pub recall: F,
    pub precision: F,
    /// Score of the prediction admitted at this rank.
    pub score: F,
}

/// Precision/recall sweep of one class at one IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve<F: Real> {
    pub label: ToothLabel,
    pub iou_threshold: F,
    pub num_gt: usize,
    /// One point per prediction, in rank order.
    pub points: Vec<PrPoint<F>>,
    /// 101-point interpolated average precision.
    pub ap: F,
}

/// Per-class slice of an [`EvalReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval<F: Real> {
    pub label: ToothLabel,
    /// AP at each entry of [`IOU_THRESHOLDS`], in order.
    pub ap_per_threshold: Vec<F>,
    /// Mean of `ap_per_threshold`.
    pub ap: F,
    pub ap50: F,
    pub ap75: F,
}

/// Detection quality over a set of classes: per-class APs and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<F: Real> {
    pub classes: Vec<ClassEval<F>>,
    /// Mean over classes of the threshold-averaged AP.
    pub ap: F,
    pub ap50: F,
    pub ap75: F,
    /// The anterior-FD class on its own, when it was evaluated.
    pub fd_ap: Option<F>,
    pub fd_ap50: Option<F>,
    pub fd_ap75: Option<F>,
}

/// Drops posterior-teeth detections, keeping everything else in order.
///
/// Used when evaluating against datasets that do not annotate posterior
/// teeth, where such detections would otherwise count as false positives.
pub fn exclude_posterior<F: Real>(records: &[DetectionRecord<F>]) -> Vec<DetectionRecord<F>> {
    records
        .iter()
        .filter(|r| r.label != ToothLabel::PosteriorTeeth)
        .copied()
        .collect()
}

/// Distinct ground-truth labels, sorted by token index.
pub fn classes_present<F: Real>(gts: &[GroundTruth<F>]) -> Vec<ToothLabel> {
    let mut seen = [false; crate::labelspace::VOCAB_SIZE];
    for g in gts {
        seen[g.label.token_index()] = true;
    }
    ToothLabel::ALL
        .iter()
        .copied()
        .filter(|l| seen[l.token_index()])
        .collect()
}

/// Precision/recall sweep and 101-point AP of one class at one IoU
/// threshold.
///
/// Fails with [`Error::UndefinedAp`] when the class has no ground truth
/// (recall is undefined); a class with ground truth but no predictions
/// yields an empty sweep and AP 0.
pub fn pr_curve<F: Real>(
    records: &[DetectionRecord<F>],
    gts: &[GroundTruth<F>],
    label: ToothLabel,
    iou_threshold: F,
) -> Result<PrCurve<F>> {
    if !iou_threshold.is_finite() || iou_threshold <= F::zero() || iou_threshold > F::one() {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold must lie in (0, 1], got {iou_threshold}"
        )));
    }
    for (i, r) in records.iter().enumerate() {
        if !r.score.is_finite() || r.score < F::zero() || r.score > F::one() {
            return Err(Error::InvalidArgument(format!(
                "record {i} has score {} outside [0, 1]",
                r.score
            )));
        }
    }

    let class_gts: Vec<&GroundTruth<F>> = gts.iter().filter(|g| g.label == label).collect();
    if class_gts.is_empty() {
        return Err(Error::UndefinedAp(format!(
            "no ground truth with label {label}"
        )));
    }

    // Rank by descending score; the stable sort keeps insertion order on
    // ties, which makes the sweep reproducible.
    let mut ranked: Vec<&DetectionRecord<F>> =
        records.iter().filter(|r| r.label == label).collect();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("scores are finite"));

    let mut claimed = vec![false; class_gts.len()];
    let mut points = Vec::with_capacity(ranked.len());
    let num_gt = class_gts.len();
    let (mut tp, mut fp) = (0usize, 0usize);
    for rec in &ranked {
        let mut best: Option<(usize, F)> = None;
        for (j, g) in class_gts.iter().enumerate() {
            if claimed[j] || g.image_id != rec.image_id {
                continue;
            }
            let v = iou(&rec.bbox, &g.bbox);
            // Strictly-higher IoU wins, so ties resolve to the lowest index.
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, v)) if v >= iou_threshold => {
                claimed[j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        points.push(PrPoint {
            recall: real::<F>(tp as f64) / real::<F>(num_gt as f64),
            precision: real::<F>(tp as f64) / real::<F>((tp + fp) as f64),
            score: rec.score,
        });
    }

    let ap = interpolated_ap(&points);
    Ok(PrCurve { label, iou_threshold, num_gt, points, ap })
}

/// 101-point interpolated AP: mean over recalls 0.00, 0.01, ..., 1.00 of
/// the running-maximum precision achieved at or beyond each recall.
fn interpolated_ap<F: Real>(points: &[PrPoint<F>]) -> F {
    if points.is_empty() {
        return F::zero();
    }
    // Right-to-left precision envelope; recall is nondecreasing in rank.
    let mut envelope: Vec<F> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len() - 1).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = F::zero();
    for i in 0..=100 {
        let r = real::<F>(i as f64 / 100.0);
        // First rank whose recall reaches r; envelope is the best precision
        // at that recall or beyond.
        let p = points
            .iter()
            .position(|pt| pt.recall >= r)
            .map_or(F::zero(), |k| envelope[k]);
        sum += p;
    }
    sum / real(101.0)
}

/// Evaluates the given classes at the ten standard IoU thresholds and
/// averages, producing per-class APs, their means, and the anterior-FD
/// figures when that class is included.
pub fn coco_ap<F: Real>(
    records: &[DetectionRecord<F>],
    gts: &[GroundTruth<F>],
    classes: &[ToothLabel],
) -> Result<EvalReport<F>> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate an empty class list".into(),
        ));
    }
    let mut class_evals = Vec::with_capacity(classes.len());
    for &label in classes {
        let mut ap_per_threshold = Vec::with_capacity(IOU_THRESHOLDS.len());
        for &t in &IOU_THRESHOLDS {
            ap_per_threshold.push(pr_curve(records, gts, label, real::<F>(t))?.ap);
        }
        let ap = ap_per_threshold.iter().copied().sum::<F>()
            / real::<F>(ap_per_threshold.len() as f64);
        class_evals.push(ClassEval {
            label,
            ap,
            ap50: ap_per_threshold[0],
            ap75: ap_per_threshold[5],
            ap_per_threshold,
        });
    }
    let n = real::<F>(class_evals.len() as f64);
    let ap = class_evals.iter().map(|c| c.ap).sum::<F>() / n;
    let ap50 = class_evals.iter().map(|c| c.ap50).sum::<F>() / n;
    let ap75 = class_evals.iter().map(|c| c.ap75).sum::<F>() / n;
    let fd = class_evals.iter().find(|c| c.label == ToothLabel::AnteriorFd);
    Ok(EvalReport {
        ap,
        ap50,
        ap75,
        fd_ap: fd.map(|c| c.ap),
        fd_ap50: fd.map(|c| c.ap50),
        fd_ap75: fd.map(|c| c.ap75),
        classes: class_evals,
    })
}
