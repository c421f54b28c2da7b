//! The `plume` command-line tool: synthesize a region, build patches, train,
//! evaluate and forecast.

pub mod commands;
pub mod config;
pub mod error;
pub mod raster;

pub use config::RunConfig;
pub use error::{CliError, Result};

/// Sizes the global worker pool; `None` keeps rayon's default.
pub fn init_workers(workers: Option<usize>) -> Result<()> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    }
    Ok(())
}
