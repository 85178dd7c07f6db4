//! Set-prediction matching: Hungarian assignment of predictions to ground
//! truth, plus the anterior-extremity mask that decides which unmatched
//! predictions are exempt from negative supervision.
//!
//! On partially annotated images only the anterior teeth carry boxes, so a
//! prediction on an (unannotated) posterior tooth would ordinarily be
//! punished as a false positive. The mask identifies the posterior region
//! purely from the annotated anterior boxes: a box is masked when it pokes
//! out horizontally past the anterior extremities while staying strictly
//! inside their vertical band. Masked unmatched predictions become
//! [`MatchOutcome::NoCare`] and contribute nothing to any loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, l1_box_distance, BoxXYXY};
use crate::labelspace::ToothLabel;
use crate::{real, Real};

/// Extreme coordinates of a set of anterior ground-truth boxes:
/// `left = min x1`, `right = max x2`, `top = min y1`, `bottom = max y2`.
///
/// Invariant: `left < right` and `top < bottom` (guaranteed because every
/// contributing box has positive extent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnteriorExtremities<F: Real> {
    pub left: F,
    pub right: F,
    pub top: F,
    pub bottom: F,
}

/// Computes [`AnteriorExtremities`] over a nonempty set of boxes.
///
/// The caller is responsible for passing only anterior ground-truth boxes;
/// this function just folds the extremes.
pub fn anterior_extremities<F: Real>(boxes: &[BoxXYXY<F>]) -> Result<AnteriorExtremities<F>> {
    let first = boxes.first().ok_or_else(|| {
        Error::InvalidArgument("anterior extremities need at least one box".into())
    })?;
    let mut e = AnteriorExtremities {
        left: first.x1(),
        right: first.x2(),
        top: first.y1(),
        bottom: first.y2(),
    };
    for b in &boxes[1..] {
        e.left = e.left.min(b.x1());
        e.right = e.right.max(b.x2());
        e.top = e.top.min(b.y1());
        e.bottom = e.bottom.max(b.y2());
    }
    Ok(e)
}

/// Whether a box lies in the posterior region implied by the anterior
/// extremities: horizontally extending past the left or right extremity
/// while vertically strictly inside the anterior band. All comparisons are
/// strict, so a box exactly on an extremity is not masked.
pub fn posterior_mask<F: Real>(b: &BoxXYXY<F>, e: &AnteriorExtremities<F>) -> bool {
    (b.x1() < e.left || b.x2() > e.right) && (b.y1() > e.top && b.y2() < e.bottom)
}

/// Weights of the three matching-cost terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights<F: Real> {
    pub class: F,
    pub l1: F,
    pub giou: F,
}

impl<F: Real> Default for CostWeights<F> {
    fn default() -> Self {
        Self { class: real(2.0), l1: real(5.0), giou: real(2.0) }
    }
}

/// One detection-side input to matching: per-label classification scores in
/// `[0, 1]` (token order of [`ToothLabel::ALL`]) and a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction<F: Real> {
    pub scores: [F; crate::labelspace::VOCAB_SIZE],
    pub bbox: BoxXYXY<F>,
}

/// Supervision outcome for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "gt_index", rename_all = "snake_case")]
pub enum MatchOutcome {
    /// Assigned to the ground-truth object with this index.
    Matched(usize),
    /// Unmatched; trained as background.
    Negative,
    /// Unmatched but inside the posterior mask; excluded from every loss.
    NoCare,
}

/// Cost breakdown for a matched prediction/ground-truth pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostTerms<F: Real> {
    pub class: F,
    pub l1: F,
    pub giou: F,
    pub total: F,
}

/// Result of matching one scene's predictions against its ground truth.
///
/// Invariants: `outcomes.len()` equals the number of predictions, every
/// ground-truth index appears in at most one `Matched` outcome, and the
/// number of matches equals `min(#preds, #gts)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment<F: Real> {
    pub outcomes: Vec<MatchOutcome>,
    /// Per-prediction cost breakdown; `Some` exactly for matched predictions.
    pub matched_terms: Vec<Option<CostTerms<F>>>,
    /// Sum of matched-pair costs, accumulated in prediction-index order.
    pub total_cost: F,
}

impl<F: Real> Assignment<F> {
    /// Matched `(prediction, ground truth)` pairs in prediction order.
    pub fn matched_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.outcomes.iter().enumerate().filter_map(|(i, o)| match o {
            MatchOutcome::Matched(j) => Some((i, *j)),
            _ => None,
        })
    }
}

const UNSET: usize = usize::MAX;

/// Minimum-cost assignment between the rows and columns of a rectangular
/// cost matrix.
///
/// Returns the `min(#rows, #cols)` matched `(row, col)` pairs sorted by row,
/// together with their summed cost (accumulated in row order). The solution
/// is exactly optimal; among equally cheap optima the lexicographically
/// smallest pair list is returned, which makes the result a pure function
/// of the matrix.
///
/// Rejects empty or ragged matrices and any NaN or infinite entry.
pub fn hungarian<F: Real>(cost: &[Vec<F>]) -> Result<(Vec<(usize, usize)>, F)> {
    let n_rows = cost.len();
    if n_rows == 0 {
        return Err(Error::InvalidCostMatrix("no rows".into()));
    }
    let n_cols = cost[0].len();
    if n_cols == 0 {
        return Err(Error::InvalidCostMatrix("no columns".into()));
    }
    let mut max_abs = F::zero();
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n_cols {
            return Err(Error::InvalidCostMatrix(format!(
                "row {i} has {} entries, expected {n_cols}",
                row.len()
            )));
        }
        for c in row {
            if !c.is_finite() {
                return Err(Error::InvalidCostMatrix(format!(
                    "non-finite entry {c:?} in row {i}"
                )));
            }
            max_abs = max_abs.max(c.abs());
        }
    }

    // Square-pad with zeros. Every padded perfect matching contains the same
    // number of dummy cells at equal cost, so real-cell optimality is
    // preserved.
    let dim = n_rows.max(n_cols);
    let at = |i: usize, j: usize| -> F {
        if i < n_rows && j < n_cols {
            cost[i][j]
        } else {
            F::zero()
        }
    };

    let (col4row, u, v) = solve_square(dim, &at);

    // Any optimal matching uses only edges that are tight under the optimal
    // duals (complementary slackness), so equal-cost optima can be
    // enumerated on the tight subgraph alone.
    let tol = real::<F>(1e-9) * max_abs.max(F::one());
    let mut tight: Vec<Vec<usize>> = vec![Vec::new(); dim];
    let mut n_tight = 0usize;
    for i in 0..dim {
        for j in 0..dim {
            if (at(i, j) - u[i] - v[j]).abs() <= tol {
                tight[i].push(j);
                n_tight += 1;
            }
        }
    }

    let chosen = if n_tight == dim {
        // The tight graph is exactly the optimal matching: it is unique.
        col4row
    } else {
        lexicographic_tight_matching(dim, n_cols, &tight)
    };

    let mut pairs = Vec::with_capacity(n_rows.min(n_cols));
    let mut total = F::zero();
    for (i, &j) in chosen.iter().enumerate().take(n_rows) {
        if j < n_cols {
            pairs.push((i, j));
            total += cost[i][j];
        }
    }
    Ok((pairs, total))
}

/// Shortest-augmenting-path solver for the square padded problem. Returns
/// the column matched to each row plus the optimal dual variables.
fn solve_square<F: Real>(dim: usize, at: &impl Fn(usize, usize) -> F) -> (Vec<usize>, Vec<F>, Vec<F>) {
    let mut u = vec![F::zero(); dim];
    let mut v = vec![F::zero(); dim];
    let mut col4row = vec![UNSET; dim];
    let mut row4col = vec![UNSET; dim];

    let mut shortest = vec![F::infinity(); dim];
    let mut path = vec![UNSET; dim];
    let mut in_sr = vec![false; dim];
    let mut in_sc = vec![false; dim];
    let mut remaining = Vec::with_capacity(dim);

    for cur_row in 0..dim {
        for x in shortest.iter_mut() {
            *x = F::infinity();
        }
        for x in in_sr.iter_mut() {
            *x = false;
        }
        for x in in_sc.iter_mut() {
            *x = false;
        }
        remaining.clear();
        remaining.extend(0..dim);

        let mut min_val = F::zero();
        let mut i = cur_row;
        let sink;
        loop {
            in_sr[i] = true;
            let mut lowest = F::infinity();
            let mut index = UNSET;
            for (it, &j) in remaining.iter().enumerate() {
                let r = min_val + at(i, j) - u[i] - v[j];
                if r < shortest[j] {
                    shortest[j] = r;
                    path[j] = i;
                }
                if shortest[j] < lowest
                    || (shortest[j] == lowest && index != UNSET && row4col[j] == UNSET)
                {
                    lowest = shortest[j];
                    index = it;
                }
            }
            min_val = lowest;
            let j = remaining[index];
            in_sc[j] = true;
            remaining.swap_remove(index);
            if row4col[j] == UNSET {
                sink = j;
                break;
            }
            i = row4col[j];
        }

        u[cur_row] += min_val;
        for i2 in 0..dim {
            if in_sr[i2] && i2 != cur_row {
                u[i2] += min_val - shortest[col4row[i2]];
            }
        }
        for j in 0..dim {
            if in_sc[j] {
                v[j] -= min_val - shortest[j];
            }
        }

        let mut j = sink;
        loop {
            let i2 = path[j];
            row4col[j] = i2;
            std::mem::swap(&mut col4row[i2], &mut j);
            if i2 == cur_row {
                break;
            }
        }
    }
    (col4row, u, v)
}

/// Lexicographically smallest perfect matching on the tight subgraph:
/// process rows in order, give each row the smallest usable column (real
/// columns before dummy ones) that still leaves the rest feasible.
fn lexicographic_tight_matching(dim: usize, n_cols: usize, tight: &[Vec<usize>]) -> Vec<usize> {
    let mut fixed = vec![UNSET; dim];
    let mut col_taken = vec![false; dim];
    for row in 0..dim {
        // Real columns in ascending order first; dummy columns are
        // interchangeable for the pair list but still need feasibility.
        let mut candidates: Vec<usize> = tight[row].iter().copied().filter(|j| *j < n_cols).collect();
        candidates.extend(tight[row].iter().copied().filter(|j| *j >= n_cols));
        for j in candidates {
            if col_taken[j] {
                continue;
            }
            fixed[row] = j;
            col_taken[j] = true;
            if feasible(dim, tight, &fixed, &col_taken, row + 1) {
                break;
            }
            fixed[row] = UNSET;
            col_taken[j] = false;
        }
        debug_assert!(fixed[row] != UNSET, "tight graph lost perfection");
    }
    fixed
}

/// Whether rows `from..dim` can be perfectly matched into the untaken
/// columns of the tight graph (Kuhn's augmenting-path matching).
fn feasible(dim: usize, tight: &[Vec<usize>], fixed: &[usize], col_taken: &[bool], from: usize) -> bool {
    let mut row_of_col = vec![UNSET; dim];
    for (row, &j) in fixed.iter().enumerate() {
        if j != UNSET {
            row_of_col[j] = row;
        }
    }
    for row in from..dim {
        let mut visited = vec![false; dim];
        if !augment(row, tight, col_taken, &mut row_of_col, &mut visited, from) {
            return false;
        }
    }
    true
}

fn augment(
    row: usize,
    tight: &[Vec<usize>],
    col_taken: &[bool],
    row_of_col: &mut [usize],
    visited: &mut [bool],
    from: usize,
) -> bool {
    for &j in &tight[row] {
        if col_taken[j] || visited[j] {
            continue;
        }
        visited[j] = true;
        let occupant = row_of_col[j];
        // Only rows not yet fixed may be displaced.
        if occupant == UNSET
            || (occupant >= from && augment(occupant, tight, col_taken, row_of_col, visited, from))
        {
            row_of_col[j] = row;
            return true;
        }
    }
    false
}

/// Assigns predictions to ground truth and labels every prediction with a
/// supervision outcome.
///
/// The pairwise cost is
/// `class_w * (1 - score_of_gt_class) + l1_w * L1(boxes) + giou_w * (1 - GIoU)`.
/// Hungarian matching runs on the full cost matrix first; only afterwards,
/// and only when `tma_enabled` is set and the annotations are incomplete,
/// are unmatched predictions inside the posterior mask relabeled
/// [`MatchOutcome::NoCare`]. Matched predictions are never demoted. With no
/// ground truth at all, every prediction is `Negative` and masking is
/// skipped entirely (there are no extremities to mask against).
pub fn match_predictions<F: Real>(
    preds: &[Prediction<F>],
    gts: &[(ToothLabel, BoxXYXY<F>)],
    weights: &CostWeights<F>,
    tma_enabled: bool,
    annotation_complete: bool,
) -> Result<Assignment<F>> {
    for (i, p) in preds.iter().enumerate() {
        for s in &p.scores {
            if !s.is_finite() || *s < F::zero() || *s > F::one() {
                return Err(Error::InvalidArgument(format!(
                    "prediction {i} has score {s} outside [0, 1]"
                )));
            }
        }
    }
    let mut assignment = Assignment {
        outcomes: vec![MatchOutcome::Negative; preds.len()],
        matched_terms: vec![None; preds.len()],
        total_cost: F::zero(),
    };
    if preds.is_empty() {
        return Ok(assignment);
    }

    if !gts.is_empty() {
        let mut cost = vec![vec![F::zero(); gts.len()]; preds.len()];
        let mut terms = vec![vec![None; gts.len()]; preds.len()];
        for (i, p) in preds.iter().enumerate() {
            for (j, (label, gt_box)) in gts.iter().enumerate() {
                let class = F::one() - p.scores[label.token_index()];
                let l1 = l1_box_distance(&p.bbox.to_cxcywh(), &gt_box.to_cxcywh());
                let g = F::one() - giou(&p.bbox, gt_box);
                let total = weights.class * class + weights.l1 * l1 + weights.giou * g;
                cost[i][j] = total;
                terms[i][j] = Some(CostTerms { class, l1, giou: g, total });
            }
        }
        let (pairs, total_cost) = hungarian(&cost)?;
        for (i, j) in pairs {
            assignment.outcomes[i] = MatchOutcome::Matched(j);
            assignment.matched_terms[i] = terms[i][j].take();
        }
        assignment.total_cost = total_cost;

        if tma_enabled && !annotation_complete {
            let anterior: Vec<BoxXYXY<F>> = gts
                .iter()
                .filter(|(l, _)| l.is_anterior())
                .map(|(_, b)| *b)
                .collect();
            if !anterior.is_empty() {
                let e = anterior_extremities(&anterior)?;
                for (i, p) in preds.iter().enumerate() {
                    if assignment.outcomes[i] == MatchOutcome::Negative
                        && posterior_mask(&p.bbox, &e)
                    {
                        assignment.outcomes[i] = MatchOutcome::NoCare;
                    }
                }
            }
        }
    }
    Ok(assignment)
}
