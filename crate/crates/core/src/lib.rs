//! Exemplar-based explanations for black-box image classifiers.
//!
//! An adversarial autoencoder, grown progressively in resolution, supplies a
//! latent space. Around the latent code of an image a genetic search builds
//! a labeled neighborhood, a decision tree fitted on it yields a factual
//! rule and counterfactual rules, and sampling inside those rules produces
//! exemplars, counterexemplars and a saliency map.

pub mod aae;
pub mod bundle;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod desk;
pub mod error;
pub mod explainer;
pub mod image;
pub mod neighborhood;
pub mod progressive;
pub mod surrogate;

pub use error::{Error, Result};
