//! Simulator and optimization toolkit for RIS-assisted UAV data collection
//! from deadline-constrained IoT devices.

pub mod agent;
pub mod channel;
pub mod config;
pub mod energy;
pub mod env;
pub mod harness;
pub mod replay;
pub mod ris_optim;
