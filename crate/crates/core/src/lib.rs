//! LiDAR-guided Gaussian splatting: complexity-aware sampling, planar depth
//! rendering and confidence-weighted depth supervision.

pub mod camera_geom;
pub mod complexity;
pub mod depth_render;
pub mod error;
pub mod index;
pub mod linalg;
pub mod losses;
pub mod ply;
pub mod pointcloud;
pub mod raster;
pub mod splat_model;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
