//! Disentangled content/style conditioning for a small latent diffusion
//! model: triplet dataset pipeline, dual-query disentanglement network,
//! alignment losses, block-selective cross-attention backbone, two-stage
//! training, sampling, and evaluation metrics.

pub mod captioner;
pub mod checkpoint;
pub mod config;
pub mod csdn;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluate;
pub mod graph;
pub mod losses;
pub mod mcl;
pub mod nn;
pub mod schedule;
pub mod stylize;
pub mod toydata;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
