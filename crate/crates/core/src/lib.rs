//! Checkpoint arithmetic for building multi-task models from fine-tuned ones
//! without retraining.
//!
//! - [`tensor_store`] safetensors-compatible checkpoint container
//! - [`task_vector`] extraction, scaling, addition, application, LoRA deltas
//! - [`merge_engine`] linear, LoRA-aware, language-control and analogy merges,
//!   plus TOML merge recipes
//! - [`ties`] TIES-Merging (trim, sign election, disjoint mean)
//! - [`coeff_search`] exhaustive coefficient grid search
//! - [`harness`] deterministic toy task that exhibits language confusion
//!   after merging and its repair by a language-control vector

pub mod coeff_search;
pub mod error;
pub mod harness;
pub mod merge_engine;
pub mod task_vector;
pub mod tensor_store;
pub mod ties;

pub use error::{Error, Result};
pub use tensor_store::{load_checkpoint, save_checkpoint, validate_compat, Checkpoint, CompatReport, Tensor};
pub use task_vector::{LoraAdapter, LoraPair, TaskVector};
