//! Width-switchable convolutional networks with pruned sub-network
//! architectures.
//!
//! The crate covers the full pipeline in plain Rust, with no IO:
//!
//! * dense rank-4 tensors with reverse-mode differentiation for small CNN
//!   training ([`tensor`], [`conv`], [`norm`], [`layers`], [`loss`],
//!   [`optim`]),
//! * declarative model graphs with residual and depthwise-separable blocks,
//!   plus exact multiply-accumulate and parameter accounting ([`graph`],
//!   [`zoo`], [`profile`]),
//! * prefix-sliced sub-network execution with per-width batch-norm banks,
//!   output-preserving channel sorting, and zero-padded residual joins
//!   ([`net`], [`slim`], [`sort`], [`join`]),
//! * channel scoring, FLOPs-targeted selection, residual join policies, and
//!   the one-shot / iterative / multi-base pruning regimes ([`score`],
//!   [`select`], [`regimes`]),
//! * training loops for individual, width-switchable, and pruned-architecture
//!   networks, with inplace knowledge distillation ([`train`]).
//!
//! The core is `no_std` (with `alloc`); IO, file formats, and the CLI live in
//! the companion `slimprune-cli` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod conv;
pub mod element;
pub mod error;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod profile;
pub mod rng;
pub mod slim;
pub mod tensor;
pub mod zoo;
// remaining modules land as the build proceeds
// pub mod fdcheck;
// pub mod join;
// pub mod net;
// pub mod regimes;
// pub mod score;
// pub mod select;
// pub mod sort;
// pub mod train;

pub use element::Element;
pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
