//! Online point tracking with streaming/collision memory and deformable
//! attention, a point-based multi-object association engine, and the
//! synthetic-video harness used to train and evaluate both.

pub mod assoc;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod selftest;
pub mod supervision;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
