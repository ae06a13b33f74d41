//! Metric localization of a monocular camera against a prior signed distance
//! field map.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`]: SE(3) exp/log, left-multiplicative twist updates, pinhole
//!   projection and their Jacobians;
//! * [`sdf_map`]: block-hashed voxel map with trilinear queries and ray casting;
//! * [`factors`]: SDF and reprojection residuals, Huber weighting;
//! * [`optimizer`]: pose refinement, structure refinement and joint
//!   optimization with χ² outlier handling;
//! * [`sim`]: deterministic synthetic scenes, trajectories and feature tracks,
//!   plus landmark generation;
//! * [`pipeline`]: the track-then-localize loop and trajectory evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod eval;
pub mod factors;
pub mod geometry;
pub mod optimizer;
pub mod pipeline;
pub mod scene;
pub mod sdf_map;
pub mod sim;
pub mod trajectory;

pub use error::{GeometryError, MapError, PipelineError, SimError, SolverError};
pub use geometry::{CameraIntrinsics, Pixel, Pose, Twist};
pub use sdf_map::{GradientScheme, SdfMap, SdfQuery};
