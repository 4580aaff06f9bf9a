//! Experiment orchestration for the `sparseact` command line tool.

pub mod compare;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;
