//! Mixture-of-experts text conditioning for instruction-guided diffusion
//! image editing, at desk scale.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, image IO and the
//! command line live in the `moectl` crate.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod moe;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod training;

pub use autodiff::{Gradients, ParamId, ParamStore, Parameter, Tape, Var};
pub use error::{Error, Result};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use tensor::{matmul, softmax, Tensor};
