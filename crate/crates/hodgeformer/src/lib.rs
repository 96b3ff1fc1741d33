//! Triangle-mesh transformers built from learned discrete Hodge star operators.
//!
//! The crate is organized bottom-up:
//!
//! - [`mesh`]: triangle mesh storage, OBJ/OFF io, signed incidence matrices,
//!   adjacency, shape generators, and structured mutations.
//! - [`sparsity`]: per-element attention target sets (BFS-local plus
//!   component-restricted random targets).
//! - [`features`]: raw per-vertex / per-edge / per-face input features and
//!   geometric augmentation.
//! - [`autodiff`]: a tape-based reverse-mode engine generic over `f32`/`f64`
//!   with the sparse operators the model needs.
//! - [`nn`]: parameter store, attention/star building blocks, layers, Adam.
//! - [`model`]: configuration, datasets, the training loop, evaluation,
//!   checkpoints.
//! - [`par`]: batch parallelism (rayon behind the `parallel` feature, with a
//!   sequential fallback that produces identical results).

pub mod autodiff;
pub mod error;
pub mod features;
pub mod mesh;
pub mod model;
pub mod nn;
pub mod par;
pub mod sparsity;
mod vec3;

pub use error::{Error, Result};
