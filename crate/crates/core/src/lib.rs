//! Instance-level document layout segmentation with a twin-attention
//! transformer, written against `core` + `alloc` only.
//!
//! The pipeline is: a small convolutional backbone with a feature pyramid
//! ([`backbone`]), a grid of patch features refined by pre-norm transformer
//! layers whose attention is factorized into column and row passes
//! ([`attention`], [`encoder`]), per-cell category and dynamic-kernel heads
//! ([`heads`]), a layer-wise aggregation of pyramid levels into a shared mask
//! feature map ([`lfam`]), and dynamic convolution plus Matrix NMS to produce
//! scored instance masks ([`maskgen`]). [`training`] holds target assignment,
//! focal and dice losses and the SGD optimizer; [`evalkit`] scores predictions
//! with COCO-style mask mAP; [`synthdoc`] renders deterministic synthetic page
//! layouts.
//!
//! Everything differentiable runs on the tape in [`tensor`].

#![no_std]

extern crate alloc;

pub mod attention;
pub mod backbone;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod heads;
pub mod lfam;
pub mod maskgen;
pub mod model;
pub mod params;
pub mod rng;
pub mod synthdoc;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
