//! Reverse-mode automatic differentiation on a flat tape, sized for
//! desk-scale sequence models.
//!
//! The building blocks are deliberately small:
//!
//! - [`Array`] — a dense row-major `f64` matrix (scalars are 1×1).
//! - [`ParamStore`] — named trainable arrays with gradient accumulators.
//! - [`Tape`] — records forward operations and plays them back in reverse
//!   to accumulate exact gradients into the store.
//! - [`GruCell`] / [`BiGru`] — recurrent layers built from tape ops.
//! - [`Adam`] — the optimizer, with bias correction and global-norm clipping.
//! - [`checkpoint`] — a versioned binary container that round-trips
//!   parameters and optimizer state bit-exactly.
//!
//! Everything is double precision and single-threaded per tape; distinct
//! tapes over a shared read-only store may run concurrently.

mod array;
pub mod check;
pub mod checkpoint;
mod error;
mod optim;
mod params;
mod rnn;
mod tape;

pub use array::Array;
pub use error::TensorError;
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use rnn::{BiGru, BiGruNodes, GruCell, GruNodes};
pub use tape::{NodeId, Tape};
