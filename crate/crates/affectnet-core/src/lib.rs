//! Multi-task facial affect recognition at desk scale.
//!
//! A self-contained stack: a reverse-mode autodiff tensor engine, SE/CBAM
//! attention blocks, a hard-parameter-sharing three-head network (valence/
//! arousal regression, 8 action-unit detection, 7-way expression
//! classification), the matching loss suite and challenge metrics, synthetic
//! data generation, and a two-phase trainer.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
