//! Whole-device simulation: configuration, traffic, the event loop and
//! metrics.

pub mod config;
pub mod engine;
pub mod experiments;
pub mod metrics;
pub mod traffic;
