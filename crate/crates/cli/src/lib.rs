//! Batch front end of the lpsv lab: JSON configs in, CSV tables and a
//! checksummed manifest out.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod manifest;
pub mod run;
pub mod table;

pub use config::RunConfig;
pub use manifest::{RunManifest, Status};
pub use run::{run, Outcome, Overrides, Subcommand};
