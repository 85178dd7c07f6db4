//! Training losses with exact analytic gradients: a sigmoid focal loss over
//! query/token logit matrices and an L1 + GIoU box regression loss, composed
//! into the per-scene total used by the pipeline.
//!
//! Gradient conventions:
//!
//! * the L1 term uses the subgradient `sign(0) = 0` at equal coordinates;
//! * the GIoU term picks the strict-comparison branch at intersection and
//!   hull ties (these ties, box tangency, and equal coordinates are the only
//!   non-smooth points);
//! * [`Target::NoCare`] entries are skipped outright, never multiplied by
//!   zero, so their logits cannot influence the result even at the bit
//!   level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxCXCYWH, BoxXYXY};
use crate::labelspace::{DenoisingQuery, QueryRole, ToothLabel, VOCAB_SIZE};
use crate::matching::Assignment;
use crate::num::{log_sigmoid, sigmoid, sign};
use crate::{real, Real};

/// Per-entry supervision state of a logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Positive,
    Negative,
    NoCare,
}

/// Query-by-token logit matrix.
pub type LogitMatrix<F> = Vec<Vec<F>>;

/// Query-by-token supervision matrix, same shape as its [`LogitMatrix`].
pub type TargetMatrix = Vec<Vec<Target>>;

/// Hyperparameters of the focal and box losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig<F: Real> {
    /// Focal loss positive-class balance.
    pub alpha: F,
    /// Focal loss hard-example exponent.
    pub gamma: F,
    /// Weight of the L1 box term.
    pub lambda_l1: F,
    /// Weight of the (1 - GIoU) box term.
    pub lambda_giou: F,
}

impl<F: Real> Default for LossConfig<F> {
    fn default() -> Self {
        Self {
            alpha: real(0.25),
            gamma: real(2.0),
            lambda_l1: real(5.0),
            lambda_giou: real(2.0),
        }
    }
}

impl<F: Real> LossConfig<F> {
    fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < F::zero() || self.alpha > F::one() {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !self.gamma.is_finite() || self.gamma < F::zero() {
            return Err(Error::InvalidArgument(format!(
                "gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        if !self.lambda_l1.is_finite()
            || !self.lambda_giou.is_finite()
            || self.lambda_l1 < F::zero()
            || self.lambda_giou < F::zero()
        {
            return Err(Error::InvalidArgument(
                "loss weights must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Focal loss value and gradient for a single logit.
///
/// Positive entries contribute `-alpha * (1-s)^gamma * ln(s)`, negative
/// entries `-(1-alpha) * s^gamma * ln(1-s)`, with `s = sigmoid(logit)`.
/// Returns `(loss, dloss/dlogit)`; both are finite for any finite logit.
fn focal_entry<F: Real>(logit: F, positive: bool, alpha: F, gamma: F) -> (F, F) {
    let s = sigmoid(logit);
    if positive {
        let ln_s = log_sigmoid(logit);
        let scale = alpha * (F::one() - s).powf(gamma);
        let loss = -scale * ln_s;
        let grad = scale * (gamma * s * ln_s - (F::one() - s));
        (loss, grad)
    } else {
        let ln_1ms = log_sigmoid(-logit);
        let scale = (F::one() - alpha) * s.powf(gamma);
        let loss = -scale * ln_1ms;
        let grad = scale * (s - gamma * (F::one() - s) * ln_1ms);
        (loss, grad)
    }
}

/// Focal loss over a logit/target matrix: value, gradient, positive count.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalLoss<F: Real> {
    pub loss: F,
    /// Same shape as the logits; exactly zero at `NoCare` entries.
    pub grad: LogitMatrix<F>,
    pub num_positives: usize,
}

/// Sigmoid focal loss over all non-`NoCare` entries of a logit matrix,
/// normalized by the number of positive entries (divisor at least 1).
///
/// `NoCare` entries are skipped, not zero-weighted: perturbing their logits
/// changes nothing, bit for bit.
pub fn focal_contrastive_loss<F: Real>(
    logits: &[Vec<F>],
    targets: &[Vec<Target>],
    alpha: F,
    gamma: F,
) -> Result<FocalLoss<F>> {
    if logits.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows vs {} target rows",
            logits.len(),
            targets.len()
        )));
    }
    let mut num_positives = 0usize;
    let mut sum = F::zero();
    let mut grad: LogitMatrix<F> = Vec::with_capacity(logits.len());
    for (r, (lrow, trow)) in logits.iter().zip(targets).enumerate() {
        if lrow.len() != trow.len() {
            return Err(Error::ShapeMismatch(format!(
                "row {r}: {} logits vs {} targets",
                lrow.len(),
                trow.len()
            )));
        }
        let mut grow = vec![F::zero(); lrow.len()];
        for (c, (&logit, &target)) in lrow.iter().zip(trow).enumerate() {
            if !logit.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite logit at ({r}, {c})"
                )));
            }
            match target {
                Target::NoCare => {}
                Target::Positive => {
                    num_positives += 1;
                    let (l, g) = focal_entry(logit, true, alpha, gamma);
                    sum += l;
                    grow[c] = g;
                }
                Target::Negative => {
                    let (l, g) = focal_entry(logit, false, alpha, gamma);
                    sum += l;
                    grow[c] = g;
                }
            }
        }
        grad.push(grow);
    }
    let denom = real::<F>(num_positives.max(1) as f64);
    for row in grad.iter_mut() {
        for g in row.iter_mut() {
            *g /= denom;
        }
    }
    Ok(FocalLoss { loss: sum / denom, grad, num_positives })
}

/// GIoU of two boxes given in center/size form, with the gradient with
/// respect to the first box's `(cx, cy, w, h)`.
///
/// Unlike [`crate::geometry::giou`] this works on raw center/size values and
/// tolerates corners outside the unit square; only positive extents are
/// assumed.
fn giou_cxcywh_with_grad<F: Real>(pred: &BoxCXCYWH<F>, gt: &BoxCXCYWH<F>) -> (F, [F; 4]) {
    let half = real::<F>(0.5);
    let (px1, px2) = (pred.cx() - pred.w() * half, pred.cx() + pred.w() * half);
    let (py1, py2) = (pred.cy() - pred.h() * half, pred.cy() + pred.h() * half);
    let (gx1, gx2) = (gt.cx() - gt.w() * half, gt.cx() + gt.w() * half);
    let (gy1, gy2) = (gt.cy() - gt.h() * half, gt.cy() + gt.h() * half);

    let ap = pred.w() * pred.h();
    let ag = gt.w() * gt.h();

    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    let overlap = iw > F::zero() && ih > F::zero();
    let inter = if overlap { iw * ih } else { F::zero() };

    let hw = px2.max(gx2) - px1.min(gx1);
    let hh = py2.max(gy2) - py1.min(gy1);
    let hull = hw * hh;
    let union = ap + ag - inter;

    let iou = if overlap { inter / union } else { F::zero() };
    let giou = iou - (hull - union) / hull;

    // Partials with respect to the pred corners. Strict comparisons select
    // the active min/max branches; ties are the documented non-smooth set.
    let zero = F::zero();
    let (mut di, mut dc) = ([zero; 4], [zero; 4]); // index order: x1, x2, y1, y2
    if overlap {
        if px1 > gx1 {
            di[0] = -ih;
        }
        if px2 < gx2 {
            di[1] = ih;
        }
        if py1 > gy1 {
            di[2] = -iw;
        }
        if py2 < gy2 {
            di[3] = iw;
        }
    }
    if px1 < gx1 {
        dc[0] = -hh;
    }
    if px2 > gx2 {
        dc[1] = hh;
    }
    if py1 < gy1 {
        dc[2] = -hw;
    }
    if py2 > gy2 {
        dc[3] = hw;
    }
    let da = [-pred.h(), pred.h(), -pred.w(), pred.w()];

    let mut dgiou_corner = [zero; 4];
    for k in 0..4 {
        let du = da[k] - di[k];
        // d(inter/union) + d(union/hull); giou = inter/union - 1 + union/hull.
        let d_iou = if overlap {
            (di[k] * union - inter * du) / (union * union)
        } else {
            zero
        };
        let d_tail = (du * hull - union * dc[k]) / (hull * hull);
        dgiou_corner[k] = d_iou + d_tail;
    }

    // Chain from corners to (cx, cy, w, h).
    let grad = [
        dgiou_corner[0] + dgiou_corner[1],
        dgiou_corner[2] + dgiou_corner[3],
        (dgiou_corner[1] - dgiou_corner[0]) * half,
        (dgiou_corner[3] - dgiou_corner[2]) * half,
    ];
    (giou, grad)
}

/// Box regression loss `lambda_l1 * L1 + lambda_giou * (1 - GIoU)` and its
/// gradient with respect to the predicted `(cx, cy, w, h)`.
///
/// Zero exactly when the boxes coincide; the gradient is also zero there
/// (the L1 subgradient convention and the tied GIoU branches cancel).
pub fn localization_loss<F: Real>(
    pred: &BoxCXCYWH<F>,
    gt: &BoxCXCYWH<F>,
    cfg: &LossConfig<F>,
) -> Result<(F, [F; 4])> {
    cfg.validate()?;
    let l1 = crate::geometry::l1_box_distance(pred, gt);
    let (giou, dgiou) = giou_cxcywh_with_grad(pred, gt);
    let loss = cfg.lambda_l1 * l1 + cfg.lambda_giou * (F::one() - giou);
    let dl1 = [
        sign(pred.cx() - gt.cx()),
        sign(pred.cy() - gt.cy()),
        sign(pred.w() - gt.w()),
        sign(pred.h() - gt.h()),
    ];
    let mut grad = [F::zero(); 4];
    for k in 0..4 {
        grad[k] = cfg.lambda_l1 * dl1[k] - cfg.lambda_giou * dgiou[k];
    }
    Ok((loss, grad))
}

/// Expands an [`Assignment`] into a per-query target matrix over the
/// vocabulary: matched queries are positive at their ground-truth label
/// token and negative elsewhere, unmatched queries are all-negative, and
/// no-care queries are all-no-care.
pub fn build_target_matrix<F: Real>(
    assignment: &Assignment<F>,
    gt_labels: &[ToothLabel],
) -> Result<TargetMatrix> {
    use crate::matching::MatchOutcome;
    let mut rows = Vec::with_capacity(assignment.outcomes.len());
    for outcome in &assignment.outcomes {
        let row = match outcome {
            MatchOutcome::Matched(j) => {
                let label = gt_labels.get(*j).ok_or_else(|| {
                    Error::ShapeMismatch(format!(
                        "assignment references gt {j} but only {} labels given",
                        gt_labels.len()
                    ))
                })?;
                let mut r = vec![Target::Negative; VOCAB_SIZE];
                r[label.token_index()] = Target::Positive;
                r
            }
            MatchOutcome::Negative => vec![Target::Negative; VOCAB_SIZE],
            MatchOutcome::NoCare => vec![Target::NoCare; VOCAB_SIZE],
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Everything [`total_loss`] produces: the scalar terms and the gradients
/// with respect to each logit and each predicted box parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss<F: Real> {
    pub total: F,
    /// Focal classification term over the scene queries.
    pub classification: F,
    /// Box regression term over matched queries.
    pub localization: F,
    /// Denoising term (classification + reconstruction), already weighted.
    pub denoising: F,
    /// d total / d scene logits, shape Q x T.
    pub grad_logits: LogitMatrix<F>,
    /// d total / d scene box parameters (cx, cy, w, h); zero rows for
    /// unmatched and no-care queries.
    pub grad_boxes: Vec<[F; 4]>,
    /// d total / d denoising-query logits, shape N x T.
    pub dn_grad_logits: LogitMatrix<F>,
    /// d total / d denoising-query box parameters; zero rows for negative
    /// (background) denoising queries.
    pub dn_grad_boxes: Vec<[F; 4]>,
}

/// Composes the per-scene training loss:
///
/// * focal classification over the scene queries, with targets from the
///   assignment (no-care queries contribute nothing);
/// * box regression over matched queries, averaged over matches;
/// * for denoising queries, focal classification (positives reconstruct
///   their ground-truth label, negatives are background) plus box
///   regression of positive queries toward their ground-truth box, averaged
///   over positives, the whole group scaled by `dn_weight`.
///
/// `dn_weight` must be finite and >= 0; pass 1 for the plain sum.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<F: Real>(
    logits: &[Vec<F>],
    boxes: &[BoxCXCYWH<F>],
    assignment: &Assignment<F>,
    gt: &[(ToothLabel, BoxXYXY<F>)],
    dn_queries: &[DenoisingQuery<F>],
    dn_logits: &[Vec<F>],
    dn_boxes: &[BoxCXCYWH<F>],
    cfg: &LossConfig<F>,
    dn_weight: F,
) -> Result<TotalLoss<F>> {
    cfg.validate()?;
    if !dn_weight.is_finite() || dn_weight < F::zero() {
        return Err(Error::InvalidArgument(format!(
            "dn_weight must be finite and >= 0, got {dn_weight}"
        )));
    }
    if logits.len() != boxes.len() || logits.len() != assignment.outcomes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows, {} boxes, {} outcomes",
            logits.len(),
            boxes.len(),
            assignment.outcomes.len()
        )));
    }
    if dn_queries.len() != dn_logits.len() || dn_queries.len() != dn_boxes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} dn queries, {} dn logit rows, {} dn boxes",
            dn_queries.len(),
            dn_logits.len(),
            dn_boxes.len()
        )));
    }

    let gt_labels: Vec<ToothLabel> = gt.iter().map(|(l, _)| *l).collect();

    // Scene classification.
    let targets = build_target_matrix(assignment, &gt_labels)?;
    let focal = focal_contrastive_loss(logits, &targets, cfg.alpha, cfg.gamma)?;

    // Scene box regression over matched pairs.
    let matched: Vec<(usize, usize)> = assignment.matched_pairs().collect();
    let mut grad_boxes = vec![[F::zero(); 4]; boxes.len()];
    let mut loc_sum = F::zero();
    let loc_denom = real::<F>(matched.len().max(1) as f64);
    for &(qi, gj) in &matched {
        let gt_box = gt
            .get(gj)
            .ok_or_else(|| {
                Error::ShapeMismatch(format!("assignment references gt {gj} of {}", gt.len()))
            })?
            .1
            .to_cxcywh();
        let (l, g) = localization_loss(&boxes[qi], &gt_box, cfg)?;
        loc_sum += l;
        for k in 0..4 {
            grad_boxes[qi][k] = g[k] / loc_denom;
        }
    }
    let localization = loc_sum / loc_denom;

    // Denoising: classification for every query, reconstruction for
    // positives.
    let mut dn_targets: TargetMatrix = Vec::with_capacity(dn_queries.len());
    for q in dn_queries {
        if q.source_gt_index >= gt.len() {
            return Err(Error::ShapeMismatch(format!(
                "denoising query references gt {} of {}",
                q.source_gt_index,
                gt.len()
            )));
        }
        let row = match q.role {
            QueryRole::Positive => {
                let mut r = vec![Target::Negative; VOCAB_SIZE];
                r[q.label.token_index()] = Target::Positive;
                r
            }
            QueryRole::Negative => vec![Target::Negative; VOCAB_SIZE],
        };
        dn_targets.push(row);
    }
    let dn_focal = focal_contrastive_loss(dn_logits, &dn_targets, cfg.alpha, cfg.gamma)?;

    let mut dn_grad_boxes = vec![[F::zero(); 4]; dn_queries.len()];
    let n_dn_pos = dn_queries.iter().filter(|q| q.role == QueryRole::Positive).count();
    let dn_loc_denom = real::<F>(n_dn_pos.max(1) as f64);
    let mut dn_loc_sum = F::zero();
    for (i, q) in dn_queries.iter().enumerate() {
        if q.role != QueryRole::Positive {
            continue;
        }
        let gt_box = gt[q.source_gt_index].1.to_cxcywh();
        let (l, g) = localization_loss(&dn_boxes[i], &gt_box, cfg)?;
        dn_loc_sum += l;
        for k in 0..4 {
            dn_grad_boxes[i][k] = dn_weight * g[k] / dn_loc_denom;
        }
    }
    let denoising = dn_weight * (dn_focal.loss + dn_loc_sum / dn_loc_denom);

    let mut dn_grad_logits = dn_focal.grad;
    for row in dn_grad_logits.iter_mut() {
        for g in row.iter_mut() {
            *g *= dn_weight;
        }
    }

    Ok(TotalLoss {
        total: focal.loss + localization + denoising,
        classification: focal.loss,
        localization,
        denoising,
        grad_logits: focal.grad,
        grad_boxes,
        dn_grad_logits,
        dn_grad_boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{CostWeights, MatchOutcome, Prediction};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn focal_entry_at_zero_logit_matches_hand_value() {
        // s = 0.5: loss = 0.25 * 0.5^2 * ln 2 = 0.0625 * ln 2.
        let (l, _) = focal_entry(0.0_f64, true, 0.25, 2.0);
        assert!((l - 0.0625 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((l - 0.043321698784996586).abs() < 1e-12);
    }

    #[test]
    fn focal_with_gamma_zero_alpha_half_is_scaled_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x: f64 = rng.gen_range(-6.0..6.0);
            let s = 1.0 / (1.0 + (-x).exp());
            let (lp, _) = focal_entry(x, true, 0.5, 0.0);
            let (ln, _) = focal_entry(x, false, 0.5, 0.0);
            assert!((lp - 0.5 * -(s.ln())).abs() < 1e-12);
            assert!((ln - 0.5 * -((1.0 - s).ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_downweights_easy_examples() {
        // A confident correct positive (logit 4) must cost far less with
        // gamma = 2 than with gamma = 0, relatively speaking.
        let (hard, _) = focal_entry(4.0_f64, true, 0.25, 2.0);
        let (plain, _) = focal_entry(4.0_f64, true, 0.25, 0.0);
        assert!(hard < plain * 0.01);
    }

    #[test]
    fn focal_entry_is_finite_and_correct_at_extreme_logits() {
        let (l, g) = focal_entry(-1000.0_f64, true, 0.25, 2.0);
        assert!(l.is_finite() && g.is_finite());
        assert!((l - 250.0).abs() < 1e-9); // alpha * 1000
        assert!((g + 0.25).abs() < 1e-9); // limit of the positive gradient
        let (l, g) = focal_entry(1000.0_f64, false, 0.25, 2.0);
        assert!(l.is_finite() && g.is_finite());
        assert!((l - 750.0).abs() < 1e-9);
        assert!((g - 0.75).abs() < 1e-9);
    }

    fn numeric_grad(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn focal_entry_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let x: f64 = rng.gen_range(-8.0..8.0);
            let alpha: f64 = rng.gen_range(0.05..0.95);
            let gamma: f64 = rng.gen_range(0.0..4.0);
            for positive in [true, false] {
                let (_, g) = focal_entry(x, positive, alpha, gamma);
                let fd = numeric_grad(|t| focal_entry(t, positive, alpha, gamma).0, x);
                let denom = g.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((g - fd) / denom).abs() < 1e-4,
                    "x={x} alpha={alpha} gamma={gamma} pos={positive}: {g} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn focal_matrix_normalizes_by_positive_count() {
        let logits = vec![vec![0.0_f64, 0.0], vec![0.0, 0.0]];
        let targets = vec![
            vec![Target::Positive, Target::Negative],
            vec![Target::Positive, Target::Negative],
        ];
        let two_pos = focal_contrastive_loss(&logits, &targets, 0.25, 2.0).unwrap();
        assert_eq!(two_pos.num_positives, 2);
        let entry_pos = focal_entry(0.0_f64, true, 0.25, 2.0).0;
        let entry_neg = focal_entry(0.0_f64, false, 0.25, 2.0).0;
        assert!((two_pos.loss - (2.0 * entry_pos + 2.0 * entry_neg) / 2.0).abs() < 1e-15);

        // All-negative matrix: divisor clamps at 1.
        let targets = vec![vec![Target::Negative; 2]; 2];
        let none = focal_contrastive_loss(&logits, &targets, 0.25, 2.0).unwrap();
        assert_eq!(none.num_positives, 0);
        assert!((none.loss - 4.0 * entry_neg).abs() < 1e-15);
    }

    #[test]
    fn nocare_entries_are_skipped_bit_for_bit() {
        let targets = vec![
            vec![Target::Positive, Target::NoCare],
            vec![Target::NoCare, Target::Negative],
        ];
        let a = focal_contrastive_loss(
            &vec![vec![0.3_f64, 5.0], vec![-2.0, -0.7]],
            &targets,
            0.25,
            2.0,
        )
        .unwrap();
        let b = focal_contrastive_loss(
            &vec![vec![0.3_f64, -123.0], vec![777.0, -0.7]],
            &targets,
            0.25,
            2.0,
        )
        .unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grad, b.grad);
        assert_eq!(a.grad[0][1], 0.0);
        assert_eq!(a.grad[1][0], 0.0);
    }

    #[test]
    fn focal_rejects_shape_mismatch_and_nonfinite_logits() {
        let targets = vec![vec![Target::Negative; 2]];
        assert!(focal_contrastive_loss(&vec![vec![0.0_f64; 3]], &targets, 0.25, 2.0).is_err());
        assert!(
            focal_contrastive_loss(&vec![vec![f64::NAN, 0.0]], &targets, 0.25, 2.0).is_err()
        );
    }

    #[test]
    fn focal_loss_decreases_monotonically_under_gradient_descent() {
        // 1x1 positive target: gradient steps must drive the loss toward 0.
        let mut logit = 0.0_f64;
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let got = focal_contrastive_loss(
                &vec![vec![logit]],
                &vec![vec![Target::Positive]],
                0.25,
                2.0,
            )
            .unwrap();
            assert!(got.loss < prev);
            prev = got.loss;
            logit -= 1.0 * got.grad[0][0];
        }
        assert!(prev < 0.02);
    }

    fn cbox(cx: f64, cy: f64, w: f64, h: f64) -> BoxCXCYWH<f64> {
        BoxCXCYWH::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn localization_loss_is_zero_with_zero_gradient_on_identical_boxes() {
        let b = cbox(0.4, 0.5, 0.2, 0.3);
        let (l, g) = localization_loss(&b, &b, &LossConfig::default()).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, [0.0; 4]);
    }

    #[test]
    fn localization_loss_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let a = cbox(
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.3),
            );
            let b = cbox(
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.3),
            );
            let (l, _) = localization_loss(&a, &b, &LossConfig::default()).unwrap();
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn giou_grad_matches_geometry_value_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut checked = 0;
        while checked < 300 {
            let p = cbox(
                rng.gen_range(0.25..0.75),
                rng.gen_range(0.25..0.75),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.3),
            );
            let g = cbox(
                rng.gen_range(0.25..0.75),
                rng.gen_range(0.25..0.75),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.3),
            );
            let (val, grad) = giou_cxcywh_with_grad(&p, &g);
            // Cross-check the value against the corner-form implementation.
            if let (Ok(px), Ok(gx)) = (p.to_xyxy(), g.to_xyxy()) {
                assert!((val - crate::geometry::giou(&px, &gx)).abs() < 1e-12);
            }
            // Finite differences, skipping points too close to a tie.
            let params = [p.cx(), p.cy(), p.w(), p.h()];
            let tie_gap = tie_distance(&p, &g);
            if tie_gap < 1e-3 {
                continue;
            }
            for k in 0..4 {
                let fd = numeric_grad(
                    |t| {
                        let mut q = params;
                        q[k] = t;
                        let pb = cbox(q[0], q[1], q[2], q[3]);
                        giou_cxcywh_with_grad(&pb, &g).0
                    },
                    params[k],
                );
                let denom = grad[k].abs().max(fd.abs()).max(1e-3);
                assert!(
                    ((grad[k] - fd) / denom).abs() < 1e-4,
                    "param {k}: analytic {} vs fd {fd}",
                    grad[k]
                );
            }
            checked += 1;
        }
    }

    /// Smallest distance from any pred corner to the matching gt corner /
    /// tangency, used to keep finite-difference probes off the kinks.
    fn tie_distance(p: &BoxCXCYWH<f64>, g: &BoxCXCYWH<f64>) -> f64 {
        let (px1, px2) = (p.cx() - p.w() / 2.0, p.cx() + p.w() / 2.0);
        let (py1, py2) = (p.cy() - p.h() / 2.0, p.cy() + p.h() / 2.0);
        let (gx1, gx2) = (g.cx() - g.w() / 2.0, g.cx() + g.w() / 2.0);
        let (gy1, gy2) = (g.cy() - g.h() / 2.0, g.cy() + g.h() / 2.0);
        [
            px1 - gx1,
            px2 - gx2,
            py1 - gy1,
            py2 - gy2,
            px1 - gx2,
            px2 - gx1,
            py1 - gy2,
            py2 - gy1,
        ]
        .into_iter()
        .map(f64::abs)
        .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn localization_gradient_matches_finite_differences_off_the_kinks() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 200 {
            let p = cbox(
                rng.gen_range(0.25..0.75),
                rng.gen_range(0.25..0.75),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.3),
            );
            let g = cbox(
                rng.gen_range(0.25..0.75),
                rng.gen_range(0.25..0.75),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.3),
            );
            if tie_distance(&p, &g) < 1e-3
                || (p.cx() - g.cx()).abs() < 1e-3
                || (p.cy() - g.cy()).abs() < 1e-3
                || (p.w() - g.w()).abs() < 1e-3
                || (p.h() - g.h()).abs() < 1e-3
            {
                continue;
            }
            let (_, grad) = localization_loss(&p, &g, &cfg).unwrap();
            let params = [p.cx(), p.cy(), p.w(), p.h()];
            for k in 0..4 {
                let fd = numeric_grad(
                    |t| {
                        let mut q = params;
                        q[k] = t;
                        localization_loss(&cbox(q[0], q[1], q[2], q[3]), &g, &cfg)
                            .unwrap()
                            .0
                    },
                    params[k],
                );
                let denom = grad[k].abs().max(fd.abs()).max(1e-3);
                assert!(((grad[k] - fd) / denom).abs() < 1e-4);
            }
            checked += 1;
        }
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxXYXY<f64> {
        BoxXYXY::new(x1, y1, x2, y2).unwrap()
    }

    fn scene_fixture() -> (
        Vec<Vec<f64>>,
        Vec<BoxCXCYWH<f64>>,
        Assignment<f64>,
        Vec<(ToothLabel, BoxXYXY<f64>)>,
    ) {
        let gt = vec![
            (ToothLabel::AnteriorNoFd, bx(0.3, 0.4, 0.4, 0.6)),
            (ToothLabel::AnteriorFd, bx(0.45, 0.4, 0.55, 0.6)),
        ];
        let preds = vec![
            Prediction { scores: [0.1, 0.1, 0.8, 0.1], bbox: bx(0.31, 0.41, 0.41, 0.61) },
            Prediction { scores: [0.1, 0.1, 0.1, 0.8], bbox: bx(0.44, 0.39, 0.54, 0.59) },
            Prediction { scores: [0.7, 0.1, 0.1, 0.1], bbox: bx(0.1, 0.45, 0.2, 0.55) },
        ];
        let assignment =
            crate::matching::match_predictions(&preds, &gt, &CostWeights::default(), true, false)
                .unwrap();
        let logits = vec![
            vec![-2.0, -2.0, 1.5, -2.0],
            vec![-2.0, -2.0, -2.0, 1.5],
            vec![0.9, -2.0, -2.0, -2.0],
        ];
        let boxes: Vec<BoxCXCYWH<f64>> = preds.iter().map(|p| p.bbox.to_cxcywh()).collect();
        (logits, boxes, assignment, gt)
    }

    #[test]
    fn total_loss_recomposes_from_its_parts() {
        let (logits, boxes, assignment, gt) = scene_fixture();
        assert_eq!(assignment.outcomes[2], MatchOutcome::NoCare);
        let got = total_loss(
            &logits,
            &boxes,
            &assignment,
            &gt,
            &[],
            &[],
            &[],
            &LossConfig::default(),
            1.0,
        )
        .unwrap();

        // Independent recomposition: focal over the expanded targets plus
        // the mean matched localization loss.
        let cfg = LossConfig::default();
        let labels: Vec<ToothLabel> = gt.iter().map(|(l, _)| *l).collect();
        let targets = build_target_matrix(&assignment, &labels).unwrap();
        let focal = focal_contrastive_loss(&logits, &targets, cfg.alpha, cfg.gamma).unwrap();
        let mut loc = 0.0;
        for (qi, gj) in assignment.matched_pairs() {
            loc += localization_loss(&boxes[qi], &gt[gj].1.to_cxcywh(), &cfg).unwrap().0;
        }
        loc /= assignment.matched_pairs().count() as f64;
        assert!((got.total - (focal.loss + loc)).abs() < 1e-15);
        assert_eq!(got.denoising, 0.0);
        assert!(got.total >= 0.0);
    }

    #[test]
    fn total_loss_nocare_rows_have_zero_gradients() {
        let (logits, boxes, assignment, gt) = scene_fixture();
        let got = total_loss(
            &logits,
            &boxes,
            &assignment,
            &gt,
            &[],
            &[],
            &[],
            &LossConfig::default(),
            1.0,
        )
        .unwrap();
        assert_eq!(got.grad_logits[2], vec![0.0; 4]);
        assert_eq!(got.grad_boxes[2], [0.0; 4]);

        // Perturbing the no-care row must not change anything, bitwise.
        let mut perturbed = logits.clone();
        perturbed[2] = vec![100.0, -50.0, 3.0, 0.0];
        let again = total_loss(
            &perturbed,
            &boxes,
            &assignment,
            &gt,
            &[],
            &[],
            &[],
            &LossConfig::default(),
            1.0,
        )
        .unwrap();
        assert_eq!(got.total.to_bits(), again.total.to_bits());
        assert_eq!(got.grad_logits, again.grad_logits);
        assert_eq!(got.grad_boxes, again.grad_boxes);
    }

    #[test]
    fn total_loss_denoising_positives_reconstruct_and_negatives_suppress() {
        let (logits, boxes, assignment, gt) = scene_fixture();
        let dn = vec![
            DenoisingQuery {
                label: ToothLabel::AnteriorNoFd,
                bbox: cbox(0.36, 0.51, 0.11, 0.21),
                role: QueryRole::Positive,
                group_index: 0,
                source_gt_index: 0,
            },
            DenoisingQuery {
                label: ToothLabel::PosteriorTeeth,
                bbox: cbox(0.5, 0.5, 0.1, 0.2),
                role: QueryRole::Negative,
                group_index: 0,
                source_gt_index: 1,
            },
        ];
        let dn_logits = vec![vec![0.0, 0.0, 0.5, 0.0], vec![0.5, 0.0, 0.0, 0.0]];
        let dn_boxes = vec![dn[0].bbox, dn[1].bbox];
        let got = total_loss(
            &logits,
            &boxes,
            &assignment,
            &gt,
            &dn,
            &dn_logits,
            &dn_boxes,
            &LossConfig::default(),
            1.0,
        )
        .unwrap();
        assert!(got.denoising > 0.0);
        // Positive query gets box gradient, negative does not.
        assert!(got.dn_grad_boxes[0].iter().any(|g| *g != 0.0));
        assert_eq!(got.dn_grad_boxes[1], [0.0; 4]);
        // Negative query is pushed down on its (corrupted) label token.
        assert!(got.dn_grad_logits[1][0] > 0.0);

        // Doubling dn_weight doubles exactly the denoising term.
        let double = total_loss(
            &logits,
            &boxes,
            &assignment,
            &gt,
            &dn,
            &dn_logits,
            &dn_boxes,
            &LossConfig::default(),
            2.0,
        )
        .unwrap();
        assert!((double.denoising - 2.0 * got.denoising).abs() < 1e-12);
        assert!((double.total - (got.classification + got.localization + 2.0 * got.denoising))
            .abs()
            < 1e-12);
    }

    #[test]
    fn total_loss_validates_shapes() {
        let (logits, boxes, assignment, gt) = scene_fixture();
        let bad_logits = logits[..2].to_vec();
        assert!(total_loss(
            &bad_logits,
            &boxes,
            &assignment,
            &gt,
            &[],
            &[],
            &[],
            &LossConfig::default(),
            1.0
        )
        .is_err());
    }
}
