//! Foldable sequence encoders.
//!
//! A seed model holds `n_p` physical blocks and can be unfolded to any
//! logical depth by running blocks repeatedly. Training combines the
//! deepest unfolded pass, the seed pass and a stop-gradient KL term so that
//! one set of weights serves every depth in between.

pub mod analysis;
pub mod autodiff;
pub mod blocks;
pub mod criteria;
pub mod engine;
mod error;
pub mod io;
pub mod trainer;

pub use error::{Error, Result};
