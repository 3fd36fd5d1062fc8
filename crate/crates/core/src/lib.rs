//! Streaming autoregressive video-latent generation at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: f64 tensors with tape-based reverse-mode differentiation and
//!   an explicit `detach`.
//! - [`rope`], [`cache`], [`attention`]: rotary embedding applied at read
//!   time over compacted cache positions, a KV cache with a persistent sink
//!   frame plus a rolling frame window, and block-causal attention over it.
//! - [`generator`]: a chunked few-step denoiser and sequential rollout.
//! - [`fusion`]: frozen toy 3D feature extractor and the zero-initialized
//!   fusion of projected features into the text embedding.
//! - [`losses`]: forward diffusion, the distribution-matching generator
//!   gradient, the 3D cosine loss and the weighted total.
//! - [`trainer`]: conditional autoregressive training with detached
//!   conditioning, and the drift experiment.
//! - [`streamer`]: the alternating long/short context schedule for
//!   unbounded generation.
//! - [`model`], [`optim`], [`config`], [`format`]: the net bundle, Adam,
//!   TOML run configuration and binary file formats.
//! - [`verify`]: property suites behind `ew verify`.

pub mod attention;
pub mod cache;
pub mod config;
pub mod error;
pub mod format;
pub mod fusion;
pub mod generator;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rope;
pub mod streamer;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
