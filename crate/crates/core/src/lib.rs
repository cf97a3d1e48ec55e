//! Global ionospheric VTEC estimation with hybrid Bayesian neural networks.
//!
//! The pipeline reads IONEX maps and daily space-weather indices, trains a
//! network whose weights are partly random variables, and predicts VTEC with
//! an uncertainty taken from the spread of repeated stochastic predictions.

pub mod bnn;
pub mod calibrate;
pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod inference;
pub mod ionex;
pub mod rng;
pub mod spaceweather;
pub mod synth;
