//! Extrinsic calibration of four-camera surround-view fisheye rigs from
//! clicked ground-point correspondences.

pub mod bev;
pub mod calibration;
pub mod camera;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod optimize;
pub mod raster;
pub mod scene;
pub mod synthetic;

pub use error::{Error, Result};
