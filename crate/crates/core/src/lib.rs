//! Federated learning benchmark simulator.
//!
//! Runs FedSGD and FedAvg over an in-process, byte-metered network with a
//! simulated clock, and scores runs on accuracy, communication, time,
//! privacy (gradient-inversion attacks) and robustness to non-IID data.

pub mod attacks;
pub mod bench;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod protocol;
pub mod seed;
pub mod strategy;
