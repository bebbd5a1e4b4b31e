//! Background subtraction with a deep probabilistic background model.
//!
//! A convolutional variational autoencoder is trained, unsupervised, on the
//! frames of a fixed-camera video. Its decoded posterior mean is used as the
//! per-frame background estimate, and foreground masks come from thresholding
//! the difference between each frame and its background. A principal
//! component pursuit (robust PCA) baseline and a precision / recall /
//! F-measure harness are included for comparison.
//!
//! Module map:
//!
//! - [`video_io`]: image-sequence loading, mask/background writing, synthetic scenes
//! - [`diffnet`]: layer forward/backward, parameters, gradient checking, Adam
//! - [`vae`]: encoder, reparameterization, decoder and the L1 + KL loss
//! - [`training`]: the training loop and checkpoint persistence
//! - [`rpca`]: principal component pursuit by inexact augmented Lagrangian
//! - [`pipeline`]: background estimation, mask extraction and the run protocols
//! - [`evaluation`]: confusion counts and F-measure reports
//! - [`cli`]: the `deeppbm` command-line front end

pub mod cli;
pub mod diffnet;
pub mod error;
pub mod evaluation;
pub mod pipeline;
pub mod rpca;
pub mod training;
pub mod vae;
pub mod video_io;

pub use error::{Error, Result};
