//! Building blocks of the brain tumor segmentation orchestrator: NIfTI-1
//! I/O, affine geometry and resampling, the task registry and algorithm
//! catalog, input validation, label fusion and evaluation metrics.

pub mod fusion;
pub mod geometry;
pub mod mask;
pub mod metrics;
pub mod nifti;
pub mod registry;
pub mod validation;

#[cfg(feature = "testkit")]
pub mod testkit;

pub use geometry::{AffineTransform, GridSpec, Space};
pub use mask::{BinaryMask, SegmentationMask};
pub use nifti::{read_volume, write_volume, Volume};
pub use registry::{Label, TaskId, TaskSpec};
