//! Neural compression-based feature learning for video restoration.
//!
//! A recurrent restoration pipeline in which temporal features are
//! flow-aligned, attended, and purified by a learned compression
//! bottleneck with per-position/per-channel adaptive quantization,
//! trained under an L2 + cross-entropy objective. Everything runs on
//! plain CPU f32 tensors with a small reverse-mode tape.

pub mod autograd;
pub mod bench;

pub mod config;
pub mod flow;
pub mod metrics;
pub mod refine;
pub mod restore;
pub mod conv;
pub mod data;
pub mod error;


pub mod nn;
pub mod pipeline;



pub mod tensor;
pub mod types;

pub use config::{load_config, Direction, ModelConfig, QuantMode, RestorationVariant};
pub use error::{Error, Result};
pub use tensor::{read_tensor, write_tensor, Tensor};
