//! File formats: grid bundles, run configuration and run manifests.

mod bundle;
mod config;
mod manifest;

pub use bundle::*;
pub use config::*;
pub use manifest::*;
