//! Tabular in-context classification with a compressed context.
//!
//! A compressor transformer summarizes a labeled training table into `K`
//! latent rows; a predictor transformer classifies query rows against that
//! summary (or against the full table, the predictor-only baseline).

pub mod bench;
pub mod compressor;
pub mod config;
pub mod container;
mod error;
pub mod infer;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod params;
pub mod predictor;
pub mod prior;
pub mod tab2d;
pub mod table;
pub mod train;

#[global_allocator]
static ALLOC: memory::CountingAlloc = memory::CountingAlloc;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::TacoModel;
pub use table::Table;
