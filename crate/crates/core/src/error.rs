use thiserror::Error;

/// Everything in this crate that can fail fails with one of these.
#[derive(Debug, Error)]
pub enum Error {
    /// A box violated its coordinate invariants (non-finite, inverted, or
    /// outside the unit square where the type requires it).
    #[error("invalid box: {0}")]
    InvalidBox(String),

    /// A jittered or clamped box collapsed below the minimum usable size.
    #[error("degenerate box after clamping: {0}")]
    DegenerateBox(String),

    /// A probability or weight argument was outside its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two containers that must agree in shape did not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A cost matrix handed to the assignment solver was empty, ragged,
    /// or contained NaN/infinite entries.
    #[error("invalid cost matrix: {0}")]
    InvalidCostMatrix(String),

    /// Average precision was requested for a class with no ground truth.
    #[error("undefined AP: no ground truth for class `{0}`")]
    UndefinedAp(String),

    /// The requested synthetic scene could not be laid out (too many boxes
    /// for the available bands, or a feature dimension that is too small).
    #[error("infeasible dataset spec: {0}")]
    InfeasibleSpec(String),

    /// A serialized artifact (COCO file, model file) failed validation.
    #[error("invalid file contents: {0}")]
    InvalidFile(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
