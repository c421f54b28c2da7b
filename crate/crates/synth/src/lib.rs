//! Synthetic region generator: towns, roads, traffic and weather drivers, an
//! advection-diffusion simulation of NO2 and PM with an O3 titration proxy,
//! noisy station readings and a blurred surrogate of a chemistry model.

pub mod config;
pub mod error;
pub mod output;
pub mod physical;
pub mod sim;
pub mod transport;
pub mod world;

pub use config::SynthConfig;
pub use error::{Result, SynthError};
pub use output::{generate, write_dataset, Summary};
pub use sim::{Simulation, Snapshot};
pub use world::World;
