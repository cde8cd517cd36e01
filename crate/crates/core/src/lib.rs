//! Diffusion autoencoder with a transformer semantic encoder, built from scratch
//! on a minimal reverse-mode autodiff tensor library.
//!
//! The crate is organized around the data flow of the system:
//!
//! - [`tensor`]: dense tensors with reverse-mode automatic differentiation.
//! - [`schedule`] / [`diffusion`]: noise schedules, the Gaussian forward process,
//!   and the deterministic DDIM reverse recurrence (shared by images and codes).
//! - [`vit`]: vision-transformer semantic encoder producing the conditioning code.
//! - [`unet`]: conditional UNet noise predictor with adaptive group-norm injection.
//! - [`latent`]: skip-connected MLP diffusion model over normalized semantic codes.
//! - [`pipeline`]: two-stage training, three-step generative sampling, reconstruction.
//! - [`eval`]: Fréchet distance, improved precision/recall, PCA manifold plots,
//!   and a downstream classification harness.
//! - [`data`]: dataset ingestion and a procedural toy-texture generator.

pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
