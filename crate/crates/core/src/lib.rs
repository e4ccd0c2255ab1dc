//! A desk-scale laboratory for incremental open-world object detection.
//!
//! The crate is organised bottom-up:
//!
//! - [`numcore`]: dense tensors, softmax, a small tanh MLP with hand-written
//!   backward passes, SGD with warmup/cosine schedule and a central-difference
//!   gradient oracle.
//! - [`losses`]: cross-entropy, focal and class-balanced focal losses, smooth L1
//!   and old-class KL, each with analytic gradients.
//! - [`distill`]: per-channel feature normalization, normalized feature
//!   distillation, the prototype clustering term and the composite task losses.
//! - [`inductive`]: the inductive fully connected block, per-class base queues,
//!   the inductive loss and the alternating task/inductive update schedule.
//! - [`openworld`]: IoU, mAP@50, Wilderness Impact, A-OSE and energy scoring.
//! - [`harness`]: the synthetic long-tailed task stream, the detector, the
//!   incremental training loop, evaluation and the experiment grids.
//! - [`cli`]: the `owlab` command-line front end.

pub mod cli;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod inductive;
pub mod losses;
pub mod numcore;
pub mod openworld;

pub use error::{Error, Result};
