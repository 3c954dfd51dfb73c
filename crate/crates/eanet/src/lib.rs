//! File formats, configuration and command implementations around
//! `eanet-core`: long-format CSV series, run configuration files,
//! checkpoints, CSV artifacts and the `eanet` command line.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csv_long;
mod error;
pub mod tables;

pub use eanet_core;
pub use error::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Shortest-safe decimal form: 17 significant digits, exact on reload.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
