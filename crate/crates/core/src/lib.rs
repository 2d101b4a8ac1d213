//! Simulation of partitioned GRUB reservations with temporary and permanent
//! migration, plus global-EDF reclaiming baselines.

pub mod balance;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod global;
pub mod grub;
pub mod migration;
pub mod model;
pub mod rational;
pub mod workload;
