//! Two-stage infrared/visible image fusion.
//!
//! Stage I fuses a registered infrared/visible pair into a preliminary image
//! with a multi-scale convolutional branch for infrared, a windowed transformer
//! branch for visible, and cross-attention between them. Stage II stacks that
//! image with two semantic masks into a five-channel sample and refines it with
//! a conditional DDPM whose U-Net decoder features feed an attention-weighted
//! aggregation head.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datamodel;
pub mod denoiser;
pub mod error;
pub mod ingest;
pub mod diffusion;
pub mod losses;
pub mod maskprovider;
pub mod metrics;
pub mod nn;
pub mod stage1;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, RemoteMaskError, Result};
