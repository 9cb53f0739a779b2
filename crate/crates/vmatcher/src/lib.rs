//! VMatcher: a CPU-first hybrid Mamba-Transformer semi-dense feature matcher.
//!
//! Given two grayscale images, the pipeline extracts multi-scale features
//! with a small VGG-style backbone, mixes the coarse (1/8-resolution) token
//! grids with an interleaved stack of MambaVision, gated-MLP and downsampled
//! attention layers, correlates the transformed features into coarse
//! cell-level matches, and refines each match to sub-pixel precision with a
//! two-stage local search.
//!
//! Everything runs on a minimal f32 tensor core with reverse-mode gradient
//! recording ([`tensor`]), so the full model is trainable on synthetic
//! homography pairs at desk scale.

pub mod attention;
pub mod backbone;
pub mod error;
pub mod grid;
pub mod mamba;
pub mod matcher;
pub mod ssm;
pub mod tensor;

pub use error::{VmError, VmResult};
pub use grid::TokenGrid;
pub use ssm::{DiscreteSsm, SsmParams};
pub use tensor::{backward, Tape, Tensor};
