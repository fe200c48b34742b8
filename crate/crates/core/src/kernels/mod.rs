//! Masks, the frame-stack x mask-stack product, and result assembly.

mod analysis;
mod apply;
mod masks;
mod result;

use thiserror::Error;

pub use analysis::{AnalysisSpec, CompiledAnalysis, DiskRoi, MaskShape, Operation};
pub use apply::{apply_masks, apply_masks_block, sum_frames_tile, FrameAccumulator};
pub use masks::{
    make_com_masks, make_disk_mask, make_point_mask, make_random_mask, make_ring_mask, MaskStack,
};
pub use result::{finalize_com, grid_checksums, ComField, PartialResult, ResultGrid, ResultKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("partition {0} merged twice")]
    DoubleMerge(usize),
    #[error("contract violation: {0}")]
    Contract(String),
}
