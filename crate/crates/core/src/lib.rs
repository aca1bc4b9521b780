//! Training-free text-guided editing on a next-scale autoregressive image model.
//!
//! A source image is encoded into a pyramid of residual bit grids and run once
//! through a predictor to cache per-bit probabilities and attention maps
//! ([`cache`]). Edits then re-sample only the bits whose cached value loses
//! probability under the target prompt and reassemble the rest from the cache
//! ([`editor`]).

pub mod cache;
pub mod codec;
pub mod editor;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod predictor;
pub mod pyramid;
pub mod shapesworld;
pub mod textenc;

pub use error::{Error, Result};
