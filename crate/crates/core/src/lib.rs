//! Spatial-temporal calibration of heterogeneous camera rigs against a
//! reference tracker, and single- and multi-view 6DoF object pose estimation
//! from 2D-3D correspondence distributions, with a rig and scene simulator.
//!
//! Units: millimeters, seconds and radians internally; degrees only in reports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod cli;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod mvpose;
pub mod robust;
pub mod sim;
pub mod trajectory;

pub use geometry::{compose, geodesic_distance, invert, CameraIntrinsics, CameraModel, Distortion, RigidTransform};
