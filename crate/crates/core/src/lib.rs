//! Trimodal win/loss recognition from post-match interview footage:
//! skeletal keypoint offsets, per-frame visual embeddings, and reasoning
//! text are encoded separately, fused, and classified, with weakly
//! supervised pseudo-labels filling out the training pool.

pub mod config;
pub mod datamodel;
pub mod encoders;
pub mod error;
pub mod featio;
pub mod graph_topology;
pub mod inference;
pub mod keypoint_features;
pub mod model;
pub mod nn;
pub mod synthgen;
pub mod training;
pub mod weaksup;
pub mod seeding;

pub use error::{Error, Result};
