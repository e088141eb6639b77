//! Full models, ablation variants, and the experiment grids.

mod config;
mod grid;
mod network;

pub use config::{ModelConfig, Variant};
pub use grid::{count_params, sweep_grid, GridEntry, GridKind};
pub use network::{BatchCache, Model, ShapeTrace};
