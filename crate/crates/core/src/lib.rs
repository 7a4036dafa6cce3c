//! Simulation and experiment harness for a planar 2-DoF leg driven by three
//! tendons, controlled through a learned inverse map with optional PI
//! feedback on joint-angle error.
//!
//! Modules, bottom-up:
//! - [`plant`]: rigid-body leg, Hill-type tendon actuators, contact, RK4.
//! - [`trajectories`]: babbling signals and desired joint kinematics.
//! - [`inverse_map`]: the 6-15-3 MLP, its training and warm-start refinement.
//! - [`controller`]: open-/closed-loop control ticks, delay line, episodes.
//! - [`experiments`]: task suite, metrics and paired statistics.
//! - [`config`]: flat run configuration with a content hash.

pub mod config;
pub mod error;
pub mod kv;
pub mod plant;
pub mod controller;
pub mod experiments;
pub mod inverse_map;
pub mod trajectories;

pub use error::{Error, Result};
