//! Open-set dental detection toolkit.
//!
//! The crate provides the numeric core of a detector for intraoral images in
//! which only the anterior teeth carry diagnosis annotations (bone
//! fenestration/dehiscence, "FD") while posterior teeth are visible but
//! unlabeled. The pieces fit together like this:
//!
//! * [`geometry`] — normalized boxes in corner and center form, IoU/GIoU,
//!   and the bounded box jitter used to noise denoising queries.
//! * [`labelspace`] — the four-token label vocabulary, the conditional
//!   label-flip distribution used for contrastive denoising, and the
//!   denoising-query sampler.
//! * [`matching`] — Hungarian assignment of predictions to ground truth plus
//!   the anterior-extremity mask that exempts unannotated posterior regions
//!   from negative supervision.
//! * [`losses`] — sigmoid focal classification loss and L1+GIoU box loss,
//!   both with exact analytic gradients, composed into a per-scene total.
//! * [`eval`] — COCO-style average precision with 101-point interpolation.
//! * [`synthdata`] — a synthetic dental scene generator with COCO
//!   import/export.
//! * [`pipeline`] — a small trainable detector over the synthetic scenes,
//!   wired end to end with plain gradient descent.
//!
//! Numeric code is generic over the scalar type via [`Real`] (implemented
//! for `f32` and `f64`); the aliases at the crate root fix `f64`, which is
//! what the pipeline and all file formats use.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod labelspace;
pub mod losses;
pub mod matching;
mod num;
pub mod pipeline;
pub mod synthdata;

pub use error::{Error, Result};

/// Scalar type the numeric core is generic over.
///
/// `f64` is the default precision everywhere in this crate; `f32` is
/// supported for callers that want the smaller footprint and can live with
/// the looser tolerances.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` constant into the working scalar type.
///
/// Panics only if `x` is not representable at all (never for finite inputs
/// with `f32`/`f64`).
#[inline]
pub fn real<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("finite f64 constant must convert into Real")
}

pub type BoxXYXY = geometry::BoxXYXY<f64>;
pub type BoxCXCYWH = geometry::BoxCXCYWH<f64>;
pub type TransitionDistribution = labelspace::TransitionDistribution<f64>;
pub type DenoisingQuery = labelspace::DenoisingQuery<f64>;
pub type AnteriorExtremities = matching::AnteriorExtremities<f64>;
pub type CostWeights = matching::CostWeights<f64>;
pub type Assignment = matching::Assignment<f64>;
pub type Prediction = matching::Prediction<f64>;
pub type LossConfig = losses::LossConfig<f64>;
pub type DetectionRecord = eval::DetectionRecord<f64>;
pub type GroundTruth = eval::GroundTruth<f64>;
pub type EvalReport = eval::EvalReport<f64>;
pub type Scene = synthdata::Scene<f64>;
pub type ToyDetector = pipeline::ToyDetector<f64>;
pub type TrainConfig = pipeline::TrainConfig<f64>;
pub type TrainOutcome = pipeline::TrainOutcome<f64>;

pub use labelspace::ToothLabel;
pub use synthdata::DatasetSpec;
