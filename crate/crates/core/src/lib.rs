//! Rib fracture segmentation from CT with a CAM-gated 3D UNet.
//!
//! The crate covers the whole pipeline: volume I/O, patch sampling with
//! Hounsfield windowing, the encoder-decoder with its bottleneck patch
//! classifier, the composite focal/dice/BCE objective, AdamW training,
//! sliding-window inference, connected-component postprocessing, and
//! FROC/DSC evaluation. A synthetic phantom generator stands in for real
//! scans in tests.
//!
//! Voxel arrays are stored flat with axis order (W, H, D), W fastest:
//! `index = x + W * (y + H * z)`.

pub mod checkpoint;
pub mod components;
pub mod evaluation;
pub mod error;
pub mod exec;
pub mod inference;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod postprocess;
pub mod sampling;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use exec::Exec;
pub use volume::{CtVolume, FractureMask, Shape3};
