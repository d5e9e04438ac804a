//! Sparse neural map prior engine.
//!
//! A global feature-tile store is queried at each ego pose, fused with the
//! current BEV observation (moving average, conv-GRU, or cross-attention +
//! conv-GRU), decoded, and written back. A synthetic city simulator stands in
//! for camera encoders so the whole loop can be measured end to end.

pub mod cli;
pub mod config;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod simulator;
pub mod tensor;
pub mod tile_service;
pub mod tile_store;

pub use error::{Error, Result};
