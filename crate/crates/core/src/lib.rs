//! Attentional graph neural network feature matching with an
//! optimal-transport assignment layer, trained end-to-end on synthetic
//! homography scenes.

pub mod autodiff;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod gnn;
mod linalg;
pub mod matcher;
pub mod model;
mod nn;
pub mod property_suite;
pub mod rng;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
