//! Depth completion from RGBD data with 2D-3D fuse blocks.
//!
//! A self-contained numeric stack: dense tensors with reverse-mode
//! differentiation, pinhole geometry, exact KD-tree nearest neighbors,
//! continuous convolution on point clouds, and the stacked fuse-block
//! network, plus losses, metrics, KITTI-format IO and a synthetic scene
//! generator for desk-scale experiments.

pub mod contconv;
pub mod dataio;
pub mod error;
pub mod fusenet;
pub mod geometry;
pub mod gradcheck;
pub mod layers;
pub mod neighbors;
pub mod objective;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{DepthImage, Intrinsics, PointSet};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Element, Tensor};
