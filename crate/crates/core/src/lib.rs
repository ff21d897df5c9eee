//! Hierarchical RGB-D fusion for surface normal estimation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with tape-based reverse-mode differentiation.
//! * [`geometry`]: pinhole unprojection, least-squares normals from depth, angular error.
//! * [`synth`]: synthetic RGB-D scenes, sensor corruption and ground-truth noise.
//! * [`network`]: the hierarchical fusion network and its early/late fusion ablations.
//! * [`loss`], [`optim`], [`train`]: multi-scale losses, RMSprop and the training loop.
//! * [`eval`]: the five-number angular metric report.
//! * [`io`] and [`config`]: on-disk formats and the run configuration.

pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod network;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
