//! Dense real matrices with reverse-mode gradients over a fixed primitive set.
//!
//! Programs are recorded on a [`Tape`] and evaluated eagerly. The primitive
//! set is closed (see [`Op`]); model components are composed from it so that
//! every backward rule lives in one place and is covered by [`grad_check`].

mod error;
mod gradcheck;
mod matrix;
mod real;
mod tape;

pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, step_size, GradCheckReport, InputCheck};
pub use matrix::Matrix;
pub use real::Real;
pub use tape::{Gradients, Op, Tape, Var};
