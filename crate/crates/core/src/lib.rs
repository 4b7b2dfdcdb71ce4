//! Hyperspherical graph autoencoder toolkit for weighted connectome graphs.

pub mod adversarial;
pub mod checkpoint;
pub mod completion;
pub mod config;
pub mod eval;
pub mod graph;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod vmf;
