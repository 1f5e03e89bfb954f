//! File formats, configuration and the experiment pipeline around
//! `tkgcn-core`.

pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod workspace;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
pub use workspace::Workspace;
