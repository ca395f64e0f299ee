//! Malfunction-aware manipulation lab.
//!
//! A planar arm whose joints can lose gain and range, a scripted demonstrator
//! that works around the damage, behavior-cloning policies with and without a
//! health projector, and the joint-by-weakness evaluation matrix.

pub mod config;
pub mod episode;
pub mod eval;
pub mod error;
pub mod expert;
pub mod health;
pub mod nn;
pub mod norm;
pub mod policy;
pub mod render;
pub mod report;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
pub use health::{DegradationConfig, HealthVector};
pub use sim::{Action, ArmState, Observation, SceneConfig, Sim};
pub use norm::NormStats;
pub use policy::{Checkpoint, Policy, PolicyConfig, PolicyMode};
