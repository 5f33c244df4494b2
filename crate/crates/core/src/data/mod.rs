//! Synthetic clip corpus: generation, letterboxing, manifests and training
//! windows.

pub mod captions;
pub mod dataset;
pub mod frame;
pub mod generator;
pub mod manifest;
