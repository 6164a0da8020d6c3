//! Symbolic regression with a prunable operator network.
//!
//! The pipeline trains a dense network whose hidden nodes are elementary
//! operators, prunes it with beam search into minimalist subnetworks,
//! extracts one expression per subnetwork and refits its coefficients.

pub mod expr;
pub mod symnet;
pub mod data;
pub mod trainer;
pub mod pruner;
pub mod postfit;
pub mod engine;
pub mod bench;
