//! Task-aware accelerated MRI acquisition by sequential experimental design.
//!
//! The library simulates an adaptive 2D single-coil acquisition loop: a
//! diffusion (or analytic Gaussian) prior over joint image/segmentation
//! states, a masked Fourier measurement model, and a gradient-based
//! information-gain optimizer that picks the next k-space subsampling
//! trajectory given everything measured so far.
//!
//! Modules follow the pipeline:
//!
//! * [`field`] — complex fields, joint targets, measurement records
//! * [`mask`] — differentiable trajectory masks (Cartesian, radial, spiral)
//! * [`forward`] — DFT measurement model, likelihoods, design gradients
//! * [`prior`] — score models: analytic Gaussian mixtures, trainable denoiser, phantoms
//! * [`diffusion`] — noise schedule, reverse-SDE samplers, posterior guidance
//! * [`design`] — information-gain estimation and the sequential design loop
//! * [`metrics`] — PSNR / SSIM / Dice
//! * [`export`] — PGM / CSV artifact writers

pub mod design;
pub mod diffusion;
pub mod error;
pub mod export;
pub mod field;
pub mod forward;
pub mod mask;
pub mod metrics;
pub mod prior;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
