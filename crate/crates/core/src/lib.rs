//! Pose-aligned, attention-driven multi-branch person re-identification.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod evaluation;
pub mod experiment;
pub mod fusion;
pub mod geometry;
pub mod network;
pub mod pipeline;
pub mod training;

pub use error::{ReidError, Result};
