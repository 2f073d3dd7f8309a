//! Sampling, reasoning-length filtering, simulation-consistency ranking and
//! inconsistency-driven refinement for LLM-generated Verilog.
//!
//! The stages are plain functions over in-memory types; [`pipeline`] wires
//! them to an on-disk run directory with resumable stages.

pub mod backend;
pub mod density;
pub mod error;
pub mod evaluation;
pub mod prompts;
pub mod pipeline;
pub mod ranking;
pub mod refinement;
pub mod retry;
pub mod sampler;
pub mod sim;
pub mod store;
pub mod types;

pub use error::{BackendError, Error, Result};
pub use types::*;
