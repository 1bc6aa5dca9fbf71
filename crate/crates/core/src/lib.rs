//! Bayesian segmentation-uncertainty toolkit: Weibull posterior heads, adversarial
//! calibration training and uncertainty metrics on synthetic scenes.

pub mod error;
pub mod grid;
pub mod scalar;
pub mod special;
pub mod tape;
pub mod weibull;
pub mod params;
pub mod prompt;
pub mod head;
pub mod style;
pub mod deform;
pub mod losses;
pub mod synth;
pub mod metrics;
pub mod postproc;
pub mod trainer;
pub mod eval;

pub use error::{Error, Result};
pub use grid::Grid;
pub use scalar::Real;
pub use tape::{Border, Grads, Tape, Var};

pub type GridF32 = Grid<f32>;
pub type GridF64 = Grid<f64>;
pub type TapeF32 = Tape<f32>;
pub type TapeF64 = Tape<f64>;
