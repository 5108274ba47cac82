// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod cli;
pub mod autograd;
pub mod dataio;
pub mod error;
pub mod fvr;
pub mod gan;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod optim;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
