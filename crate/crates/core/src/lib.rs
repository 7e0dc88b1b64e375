//! Geometric core of a monocular mapping and pseudo-lidar 3D detection
//! pipeline.
//!
//! - [`geometry`]: SE(3) poses, pinhole projection, depth back-projection and
//!   the skip-time pose-consistency residual.
//! - [`photometric`]: bilinear sampling, inverse warping and the view
//!   synthesis, depth and joint losses.
//! - [`optimize`]: direct photometric pose optimization on synthetic scenes,
//!   single pairs and 3-frame snippets.
//! - [`mapeval`]: trajectory recovery and snippet-wise absolute trajectory
//!   error.
//! - [`deteval`]: rotated BEV/3D IoU and KITTI-style average precision.
//! - [`kitti_io`]: calibration, pose, label, depth PNG and point cloud formats.

pub mod deteval;
pub mod geometry;
pub mod kitti_io;
pub mod mapeval;
pub mod optimize;
pub mod photometric;
pub mod raster;

pub use geometry::{Intrinsics, Point3, PointCloud, Se3Pose, Twist};
pub use raster::{DepthMap, Image, ValidityMask};
