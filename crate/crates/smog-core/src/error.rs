use alloc::string::String;
use alloc::vec::Vec;

/// Errors surfaced by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")]
    KernelTooLarge {
        kh: usize,
        kw: usize,
        h: usize,
        w: usize,
    },
    #[error("batch_norm: train mode needs at least 2 samples, got {n}")]
    DegenerateBatch { n: usize },
    #[error("l2_normalize: row {row} has near-zero norm {norm:e} (representation collapse)")]
    ZeroVector { row: usize, norm: f64 },
    #[error("backward: loss must be scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("instance loss needs at least 2 samples for negatives, got {n}")]
    InsufficientNegatives { n: usize },
    #[error("kmeans: {points} points cannot seed {k} clusters")]
    TooFewPoints { points: usize, k: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("image too small: {h}x{w}, need at least {min}x{min}")]
    ImageTooSmall { h: usize, w: usize, min: usize },
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = core::result::Result<T, CoreError>;
