//! Error type shared across the crate.
//!
//! Contract violations carry enough context to point at the offending
//! input (pixel coordinates, triangle index, loss term) rather than a
//! generic message.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: image is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        context: &'static str,
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("triangle {index} is degenerate (area {area:.3e} < 1e-12)")]
    DegenerateTriangle { index: usize, area: f64 },

    #[error("expected {expected} expression weights, got {got}")]
    WeightCountMismatch { expected: usize, got: usize },

    #[error("vertex index {index} out of range for {count} vertices")]
    VertexIndexOutOfRange { index: usize, count: usize },

    #[error("triangle index {index} out of range for {count} triangles")]
    TriangleIndexOutOfRange { index: usize, count: usize },

    #[error("render output carries no contribution cache; run the forward pass with caching enabled")]
    MissingContributionCache,

    #[error("non-finite pixel gradient at ({x}, {y}) channel {channel}")]
    NonFinitePixelGradient { x: usize, y: usize, channel: usize },

    #[error("non-finite {term} loss at iteration {iteration}")]
    NonFiniteLoss { term: &'static str, iteration: u64 },

    #[error("unknown editor prompt id {0}")]
    UnknownPrompt(u32),

    #[error("{context}: image {got_w}x{got_h} is smaller than the {window}x{window} filter window")]
    ImageTooSmall {
        context: &'static str,
        window: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("target grid holds {targets} images for {cameras} cameras x {times} timesteps")]
    GridMismatch {
        cameras: usize,
        times: usize,
        targets: usize,
    },

    #[error("empty {what}")]
    Empty { what: &'static str },

    #[error("checkpoint is malformed: {reason}")]
    BadCheckpoint { reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
