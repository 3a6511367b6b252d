//! Split learning over a small splittable CNN: a common extractor shared by
//! clients, a cloud-side middle model, and per-client local classifiers, with
//! epoch-end extractor weight averaging. Only forward features and backward
//! gradients cross the wire; labels and raw inputs stay on the client.
//!
//! The crate also ships the feature-inversion attack used to measure how much
//! of the input can be reconstructed from the transmitted features at each
//! split depth, together with the reconstruction score that quantifies it.
//!
//! Entry points:
//! - [`model::reference_model`] / [`model::split`] — the network and its cuts
//! - [`run`] — drivers behind the `splitlearn` binary (serve, client,
//!   local-sim, baseline, compare, attack)
//! - [`attack`] — decoder construction, attack training, reconstruction score
//!
//! See the crate examples for one runnable program per capability.

pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod client;
pub mod crc;
pub mod data;
pub mod model;
pub mod ops;
pub mod protocol;
pub mod run;
pub mod server;
pub mod tensor;
pub mod transport;

pub use tensor::{Rng, ShapeError, Tensor, TensorOf};
