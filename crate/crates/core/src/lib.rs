//! Placement-flexible inertial pose estimation on a synthetic body.
//!
//! A procedural 24-joint body with a skinned mesh supplies virtual IMU
//! signals at any surface point. Each joint has a node network conditioned
//! on the sensor's body coordinate; a matchmaker assigns worn devices to
//! nodes from a precomputed loss table, and a pose regressor fuses the
//! node features into full-body orientations.

mod error;

pub mod autodiff;
pub mod body_model;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod eval;
pub mod math;
pub mod matchmaker;
pub mod motion_gen;
pub mod net;
pub mod trainer;
pub mod vimu_synth;

pub use error::{Error, Result};
