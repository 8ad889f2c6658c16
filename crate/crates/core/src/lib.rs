//! vitlab: a desk-scale Vision Transformer laboratory for token reduction.
//!
//! The crate implements, end to end on CPU:
//!
//! - a minimal f32 tensor with reverse-mode autodiff ([`tensor`]),
//! - a pruning-aware ViT backbone with masked attention ([`vit`]),
//! - learnable token pruning with Gumbel straight-through policies and
//!   inference-time top-k reactivation ([`pruning`]),
//! - train-time token routing with random or fixed bounds ([`routing`]),
//! - a token-merging baseline ([`tome`]),
//! - a dense binary-segmentation head and metrics ([`seg`]),
//! - a synthetic vessel-style dataset ([`data`]),
//! - and the training / evaluation / benchmarking harness ([`harness`]).

pub mod data;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod pruning;
pub mod rng;
pub mod routing;
pub mod seg;
pub mod tensor;
pub mod tome;
pub mod vit;

pub use tensor::{Tensor, TensorError};
