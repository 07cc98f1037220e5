//! Gated residual attention at desk scale.
//!
//! A query-propagation decoder whose per-query Gumbel-Softmax gates decide,
//! layer by layer, whether to keep the current frame's query or fall back to
//! the previous frame's final one. Zero-gated queries are also dropped from
//! the self-attention query set, which both protects degraded queries from
//! noisy interaction and cuts attention compute.
//!
//! The crate bundles everything needed to train and probe the mechanism on a
//! synthetic occlusion world: a small f64 reverse-mode tape (`tensor`), the
//! gate itself (`gating`), the decoder (`decoder`), the temporal driver with
//! matching and loss (`propagation`), the scene generator (`synthworld`),
//! metrics and FLOPs accounting (`evalkit`), and a sweep/experiment layer
//! (`experiment`). Seed sweeps run data-parallel under the `parallel`
//! feature (rayon) and fall back to a sequential loop without it; results
//! are ordered either way, so outputs are byte-identical across both modes.

pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod gating;
pub mod hungarian;
pub mod par;
pub mod propagation;
pub mod rng;
pub mod synthworld;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
