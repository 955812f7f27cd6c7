//! Whitening-based anomaly detection on dynamic graphs under feature drift.

pub mod autodiff;
pub mod checks;
pub mod detector;
pub mod encoder;
pub mod eval;
pub mod graphstore;
pub mod linalg;
pub mod nsem;
pub mod pipeline;
pub mod rng;

mod nn;
