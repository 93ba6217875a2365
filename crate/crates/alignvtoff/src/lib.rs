//! Files, datasets, training pipeline and command line on top of
//! [`alignvtoff_core`].

pub mod cli;
pub mod dataset;
pub mod error;
pub mod io;
pub mod pipeline;

pub use error::{PipelineError, Result};
