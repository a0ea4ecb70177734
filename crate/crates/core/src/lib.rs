//! Deterministic discrete-event model of a multi-core FPGA middlebox.

pub mod accelerators;
pub mod event;
pub mod messaging;
pub mod fabric;
pub mod flow;
pub mod model;
pub mod packet;
pub mod processor;
pub mod scheduler;
pub mod sim;
