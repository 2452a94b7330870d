//! Experiment workflows on top of `srnn-core`: configuration, feature caches, a synthetic
//! corpus generator, figures and the `srnn` command line.

pub mod cache;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod plot;
pub mod synth;
