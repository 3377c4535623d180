//! Experiment orchestration: configs, the run store, reports and rosters.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod roster;
pub mod store;
