//! Camera-rig adaptation for multi-camera driving scenes.

pub mod category;
pub mod cli;
pub mod dataset;
pub mod fields;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod image;
pub mod optimizer;
pub mod pipeline;
pub mod real;
pub mod renderer;
pub mod worldgen;
