//! Command implementations behind the `a2` binary.

pub mod bench;
pub mod data;
pub mod erf;
pub mod gradcheck;
pub mod train;

use std::path::Path;

use a2mamba::model::ModelConfig;
use a2mamba::{Error, Result};

/// A JSON config file, or one of the preset names (`toy`, `nano`, `tiny`,
/// `small`, `base`, `large`) when no such file exists.
pub fn load_config(arg: &str) -> Result<ModelConfig> {
    let path = Path::new(arg);
    if path.exists() {
        return ModelConfig::load(path);
    }
    ModelConfig::preset(arg).ok_or_else(|| {
        Error::config(
            "config",
            format!("{arg} is neither a file nor a preset name"),
        )
    })
}

/// Caps the worker pool at `A2_THREADS` when set.
pub fn init_threads() -> std::result::Result<(), String> {
    match std::env::var("A2_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| format!("A2_THREADS={v} is not a positive integer"))?;
            if n == 0 {
                return Err("A2_THREADS must be at least 1".into());
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| e.to_string())
        }
        Err(_) => Ok(()),
    }
}
