//! Deterministic simulator for Byzantine-robust decentralized federated
//! learning: clients on a communication graph train locally, exchange
//! models with their neighbors and combine them with a robust rule, while
//! malicious clients send poisoned models.

pub mod aggregation;
pub mod attacks;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod rng;

pub use error::{Result, SimError};
