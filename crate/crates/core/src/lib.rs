//! Adversarial training of an image classifier on examples produced by a
//! generator that attacks a VAE.
//!
//! Stages, each in [`pipeline`]:
//!
//! 1. train a VAE on clean images;
//! 2. with the VAE frozen, train a generator whose l∞-bounded outputs
//!    maximize the VAE loss, then train a classifier on those outputs only;
//! 3. fine-tune generator and classifier jointly.
//!
//! [`attacks`] adds FGSM and PGD aimed at either model, and [`eval`] the
//! metrics and transfer matrix reported by [`run::run_avic`].

pub mod attacks;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod run;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
