//! Files, synthetic benchmarks and the `tta` command line around
//! [`tta_core`].

pub mod cli;
pub mod config;
pub mod discriminator;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod report;
pub mod run;
pub mod synth;

pub use error::{HarnessError, Result};
