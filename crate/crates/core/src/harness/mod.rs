//! Synthetic data, file formats, experiment recipes and the command line.

pub mod cli;
pub mod config;
pub mod data;
pub mod decode;
pub mod manifest;
pub mod model_file;
pub mod recipes;
