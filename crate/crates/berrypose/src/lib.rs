//! Single-shot 6DoF pose and 3D size estimation toolkit for approximately
//! rotation-symmetric fruit.
//!
//! This crate carries everything around the math core: the convolutional
//! network, the procedural synthetic-scene generator, dataset formats and
//! I/O, the training pipeline, evaluation, and the `berrypose` CLI. The
//! pure geometry/codec/loss/PnP math lives in [`berrypose_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod evalkit;
pub mod formats;
pub mod network;
pub mod pipeline;
pub mod synthgen;
pub mod viz;

pub use berrypose_core as core;
