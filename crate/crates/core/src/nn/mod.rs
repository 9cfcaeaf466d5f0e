//! Hand-rolled neural-network substrate: a reverse-mode tape over dense
//! f64 matrices, named parameter storage with AdamW, and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod params;
pub mod tape;

pub use gradcheck::{check_gradients, GradReport};
pub use params::{xavier_uniform, AdamW, ParameterSet};
pub use tape::{NodeId, Tape};
