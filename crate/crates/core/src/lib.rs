pub mod anova;
pub mod campaign;
pub mod cv;
pub mod error;
pub mod fade_margin;
pub mod features;
pub mod nonparam;
mod optim;
pub mod regression;
pub mod residuals;
pub mod rng;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
