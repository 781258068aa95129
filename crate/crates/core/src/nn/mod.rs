//! Minimal layer toolkit on top of `candle-core`: parameter storage with
//! seeded initialisation, conv/linear layers, and optimizers.

pub mod conv;
pub mod layers;
pub mod optim;
pub mod params;

pub use layers::{Conv2d, Linear};
pub use optim::{OptimConfig, Optimizer, OptimizerKind};
pub use params::{Init, ParamStore};
