//! File formats, run configuration, reports and the command line for the
//! `anymod_core` pretraining framework.

pub mod bav;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod steplog;
