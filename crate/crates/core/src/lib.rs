//! Text-prompted set-prediction segmentation.
//!
//! The crate is organised around the training and evaluation pipeline:
//!
//! * [`corpus`]: manifests, the label-to-concept dictionary, triplet
//!   expansion and deterministic train/validation splits.
//! * [`geometry`]: masks, normalized boxes, IoU / GIoU / L1.
//! * [`matching`]: focal Hungarian one-to-one matching and the auxiliary
//!   one-to-many matcher.
//! * [`objective`]: the find / segmentation / total losses, both as plain
//!   `f64` functions and as differentiable tensor graphs.
//! * [`model`]: a small text-conditioned query segmenter and its checkpoints.
//! * [`schedule`]: layer-wise rate decay, group rates, warmup with
//!   inverse-square-root decay, and AdamW.
//! * [`inference`]: highest-confidence prompt masks, semantic maps, Dice/IoU
//!   and report aggregation.
//! * [`config`], [`train`] and [`pipeline`]: the glue behind the CLI.

pub mod config;
pub mod corpus;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod matching;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod schedule;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
