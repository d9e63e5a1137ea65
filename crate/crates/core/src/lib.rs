//! Deterministic business-rule cascade engine with audit capture, plus world
//! generation, benchmark synthesis, predictors and scoring.

pub mod benchgen;
pub mod dsl;
pub mod engine;
pub mod eval;
pub mod metrics;
pub mod predict;
pub mod query;
pub mod schema;
pub mod store;
pub mod value;
pub mod world;
pub mod worldgen;
