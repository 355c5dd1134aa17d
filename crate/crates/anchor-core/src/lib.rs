//! Adversarial training integrated with hard-positive-mined supervised
//! contrastive learning, at desk scale and fully verifiable.
//!
//! The crate provides:
//!
//! - a dense-tensor core with reverse-mode differentiation and a
//!   finite-difference verification harness ([`tape`], [`gradcheck`]),
//! - deterministic synthetic datasets and stochastic augmentation ([`data`]),
//! - a small convolutional encoder with projection and classifier heads
//!   ([`models`]),
//! - FGSM / PGD l-infinity attacks with configurable objectives ([`attacks`]),
//! - the contrastive losses with curriculum-weighted hard-positive mining and
//!   margin-based negative handling ([`losses`]),
//! - the two-phase pretrain / adversarial-partial-training pipeline and the
//!   robustness evaluation harness ([`pipeline`]),
//! - independent brute-force oracles and the gradient-check suite ([`verify`]).
//!
//! Data-parallel kernels and batch-parallel evaluation are enabled by the
//! `parallel` feature (on by default); the sequential fallback produces
//! bitwise-identical results.

pub mod attacks;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use error::{AnchorError, Result};
pub use tensor::{Precision, Tensor};
