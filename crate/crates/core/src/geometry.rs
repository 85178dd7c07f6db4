//! Axis-aligned boxes in normalized image coordinates and the box math the
//! rest of the crate builds on.
//!
//! Two parameterizations are used throughout:
//!
//! * [`BoxXYXY`] — corner form `(x1, y1, x2, y2)`, the storage and
//!   annotation format. Strictly inside the unit square.
//! * [`BoxCXCYWH`] — center/size form `(cx, cy, w, h)`, the regression and
//!   loss format.
//!
//! Both are generic over the scalar type; see [`crate::Real`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{real, Real};

/// Default center-shift scale for [`jitter_box`]: a box center may move by
/// up to half of its own extent along each axis.
pub const DEFAULT_CENTER_JITTER: f64 = 1.0;

/// Default size-rescale range for [`jitter_box`]: width and height are
/// multiplied by independent factors in `[0.6, 1.4]`.
pub const DEFAULT_SCALE_JITTER: f64 = 0.4;

/// Smallest extent a box may have after clamping before it counts as
/// degenerate.
const MIN_EXTENT: f64 = 1e-9;

/// Axis-aligned box in corner form, normalized to the unit square.
///
/// Invariants, enforced at construction: all coordinates are finite,
/// `0 <= x1 < x2 <= 1` and `0 <= y1 < y2 <= 1`. Width and height are
/// therefore strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawXYXY<F>", into = "RawXYXY<F>")]
pub struct BoxXYXY<F: Real> {
    x1: F,
    y1: F,
    x2: F,
    y2: F,
}

/// Axis-aligned box in center/size form, normalized coordinates.
///
/// Invariants, enforced at construction: all fields are finite,
/// `0 <= cx, cy <= 1` and `0 < w, h <= 1`. The corners `cx ± w/2` may fall
/// outside the unit square, which is why [`BoxCXCYWH::to_xyxy`] is fallible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCXCYWH<F>", into = "RawCXCYWH<F>")]
pub struct BoxCXCYWH<F: Real> {
    cx: F,
    cy: F,
    w: F,
    h: F,
}

#[derive(Serialize, Deserialize)]
struct RawXYXY<F> {
    x1: F,
    y1: F,
    x2: F,
    y2: F,
}

#[derive(Serialize, Deserialize)]
struct RawCXCYWH<F> {
    cx: F,
    cy: F,
    w: F,
    h: F,
}

impl<F: Real> TryFrom<RawXYXY<F>> for BoxXYXY<F> {
    type Error = Error;
    fn try_from(r: RawXYXY<F>) -> Result<Self> {
        Self::new(r.x1, r.y1, r.x2, r.y2)
    }
}

impl<F: Real> From<BoxXYXY<F>> for RawXYXY<F> {
    fn from(b: BoxXYXY<F>) -> Self {
        RawXYXY { x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2 }
    }
}

impl<F: Real> TryFrom<RawCXCYWH<F>> for BoxCXCYWH<F> {
    type Error = Error;
    fn try_from(r: RawCXCYWH<F>) -> Result<Self> {
        Self::new(r.cx, r.cy, r.w, r.h)
    }
}

impl<F: Real> From<BoxCXCYWH<F>> for RawCXCYWH<F> {
    fn from(b: BoxCXCYWH<F>) -> Self {
        RawCXCYWH { cx: b.cx, cy: b.cy, w: b.w, h: b.h }
    }
}

impl<F: Real> BoxXYXY<F> {
    /// Builds a corner-form box, validating the type invariants.
    pub fn new(x1: F, y1: F, x2: F, y2: F) -> Result<Self> {
        let coords = [x1, y1, x2, y2];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite corner in ({x1:?}, {y1:?}, {x2:?}, {y2:?})"
            )));
        }
        let (zero, one) = (F::zero(), F::one());
        if x1 < zero || y1 < zero || x2 > one || y2 > one {
            return Err(Error::InvalidBox(format!(
                "corners outside unit square: ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox(format!(
                "empty or inverted box: ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> F {
        self.x1
    }

    pub fn y1(&self) -> F {
        self.y1
    }

    pub fn x2(&self) -> F {
        self.x2
    }

    pub fn y2(&self) -> F {
        self.y2
    }

    pub fn width(&self) -> F {
        self.x2 - self.x1
    }

    pub fn height(&self) -> F {
        self.y2 - self.y1
    }

    pub fn area(&self) -> F {
        self.width() * self.height()
    }

    /// Converts to center/size form. Infallible: a valid corner box always
    /// has its center in the unit square and positive extents.
    pub fn to_cxcywh(&self) -> BoxCXCYWH<F> {
        let half = real::<F>(0.5);
        BoxCXCYWH {
            cx: (self.x1 + self.x2) * half,
            cy: (self.y1 + self.y2) * half,
            w: self.width(),
            h: self.height(),
        }
    }
}

impl<F: Real> BoxCXCYWH<F> {
    /// Builds a center/size box, validating the type invariants.
    pub fn new(cx: F, cy: F, w: F, h: F) -> Result<Self> {
        let fields = [cx, cy, w, h];
        if fields.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite field in ({cx:?}, {cy:?}, {w:?}, {h:?})"
            )));
        }
        let (zero, one) = (F::zero(), F::one());
        if cx < zero || cx > one || cy < zero || cy > one {
            return Err(Error::InvalidBox(format!(
                "center outside unit square: ({cx}, {cy})"
            )));
        }
        if w <= zero || h <= zero || w > one || h > one {
            return Err(Error::InvalidBox(format!("invalid size: ({w}, {h})")));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn cx(&self) -> F {
        self.cx
    }

    pub fn cy(&self) -> F {
        self.cy
    }

    pub fn w(&self) -> F {
        self.w
    }

    pub fn h(&self) -> F {
        self.h
    }

    /// Converts to corner form.
    ///
    /// Fails when the implied corners leave the unit square (for example
    /// `cx = 0.1, w = 0.4`), because [`BoxXYXY`] requires containment.
    pub fn to_xyxy(&self) -> Result<BoxXYXY<F>> {
        let half = real::<F>(0.5);
        BoxXYXY::new(
            self.cx - self.w * half,
            self.cy - self.h * half,
            self.cx + self.w * half,
            self.cy + self.h * half,
        )
    }
}

/// Intersection-over-union of two boxes.
///
/// Symmetric, in `[0, 1]`. Boxes that only touch along an edge or corner
/// have zero intersection area and therefore IoU 0.
pub fn iou<F: Real>(a: &BoxXYXY<F>, b: &BoxXYXY<F>) -> F {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(F::zero());
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(F::zero());
    let inter = iw * ih;
    if inter <= F::zero() {
        return F::zero();
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Generalized IoU: IoU minus the fraction of the enclosing hull not covered
/// by the union.
///
/// Symmetric, in `(-1, 1]`, equal to IoU when the hull coincides with the
/// union, and increasingly negative as disjoint boxes move apart.
pub fn giou<F: Real>(a: &BoxXYXY<F>, b: &BoxXYXY<F>) -> F {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(F::zero());
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(F::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let hull = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    let iou = if inter > F::zero() { inter / union } else { F::zero() };
    iou - (hull - union) / hull
}

/// L1 distance between two boxes in center/size parameters:
/// `|dcx| + |dcy| + |dw| + |dh|`.
pub fn l1_box_distance<F: Real>(a: &BoxCXCYWH<F>, b: &BoxCXCYWH<F>) -> F {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Randomly perturbs a box for denoising-query construction.
///
/// The center moves by a uniform offset within `±lambda1 * (w/2, h/2)` of
/// the original box, then width and height are multiplied by independent
/// uniform factors in `[1 - lambda2, 1 + lambda2]`. The result is clamped
/// back into the unit square; a box that collapses below a minimal extent
/// under clamping is rejected as degenerate.
///
/// Exactly four RNG draws are consumed per call, in the fixed order
/// (center-x, center-y, width factor, height factor), so the output is a
/// deterministic function of `(b, lambda1, lambda2, rng state)`.
///
/// Requires `lambda1 >= 0` and `0 <= lambda2 <= 1`.
pub fn jitter_box<F: Real, R: Rng + ?Sized>(
    b: &BoxCXCYWH<F>,
    lambda1: F,
    lambda2: F,
    rng: &mut R,
) -> Result<BoxCXCYWH<F>> {
    if !(lambda1 >= F::zero()) || !lambda1.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda1 must be finite and >= 0, got {lambda1}"
        )));
    }
    if !(lambda2 >= F::zero() && lambda2 <= F::one()) {
        return Err(Error::InvalidArgument(format!(
            "lambda2 must lie in [0, 1], got {lambda2}"
        )));
    }
    let half = real::<F>(0.5);
    // Uniform in [-1, 1) for shifts, [1 - lambda2, 1 + lambda2) for scales.
    let mut unit = || real::<F>(rng.gen::<f64>());
    let two = real::<F>(2.0);
    let dcx = (unit() * two - F::one()) * lambda1 * b.w * half;
    let dcy = (unit() * two - F::one()) * lambda1 * b.h * half;
    let fw = F::one() + (unit() * two - F::one()) * lambda2;
    let fh = F::one() + (unit() * two - F::one()) * lambda2;

    let cx = b.cx + dcx;
    let cy = b.cy + dcy;
    let w = b.w * fw;
    let h = b.h * fh;

    let clamp01 = |v: F| v.max(F::zero()).min(F::one());
    let x1 = clamp01(cx - w * half);
    let x2 = clamp01(cx + w * half);
    let y1 = clamp01(cy - h * half);
    let y2 = clamp01(cy + h * half);

    let min_extent = real::<F>(MIN_EXTENT);
    if x2 - x1 < min_extent || y2 - y1 < min_extent {
        return Err(Error::DegenerateBox(format!(
            "jitter collapsed box to ({x1}, {y1}, {x2}, {y2})"
        )));
    }
    Ok(BoxXYXY { x1, y1, x2, y2 }.to_cxcywh())
}
