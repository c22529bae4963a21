//! File formats, WAV IO, asset manifests and the command-line pipeline
//! around `nmfp-core`.

pub mod assets;
pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod wav;
