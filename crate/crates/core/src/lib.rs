//! Classifier inversion and reconstruction of training-set look-alikes.
//!
//! A conditioned generator is trained against a frozen classifier so that
//! its outputs elicit the conditioned labels ([`inversion`]). Extra losses on
//! confidence, perturbation robustness, weight-gradient magnitude and image
//! priors pull the outputs toward the classifier's training data
//! ([`reconstruction`]). [`evaluation`] measures the result and [`runner`]
//! ties the stages into reproducible run directories.

pub mod classifier;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod inversion;
pub mod reconstruction;
pub mod runner;

pub use error::{Error, Result};
