//! Point cloud denoising with the classical bilateral filter and a learnable
//! variant whose per-point bandwidths are predicted by a multi-scale
//! point-set network.

// `!(x > 0.0)` deliberately rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod filter;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod patch;
pub mod seed;
pub mod shapes;
pub mod training;

pub use error::{Error, Result};
pub use filter::{denoise_classical, denoise_learned, FilterParams};
pub use geometry::{PointCloud, SpatialIndex};
pub use network::{Architecture, LbfModel};
