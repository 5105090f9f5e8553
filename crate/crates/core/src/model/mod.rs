//! Tiny decoder-only transformer with per-domain bottleneck adapters placed
//! after each feed-forward block.
//!
//! The parameters split into a frozen base φ ([`BaseModel`]) and per-domain
//! θ ([`AdapterModule`]). With untied heads the output head is part of θ, so
//! composing adapters also composes heads.

pub mod checkpoint;
mod config;
mod lm;
mod transformer;

pub use config::ModelConfig;
pub use lm::{Adapted, CausalLm};
pub use transformer::{bind, build_logits, forward, init_base, AdapterModule, BaseModel, Bound};
