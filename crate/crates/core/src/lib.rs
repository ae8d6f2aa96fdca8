//! Subject-conditioned rectified-flow video generation at desk scale.
//!
//! A small diffusion transformer predicts the velocity of a straight-line
//! noise/data interpolation in the latent space of an invertible toy VAE.
//! It is conditioned collectively: a joint stream of multimodal and text
//! tokens, an identity stream of reference-image tokens, and reference
//! latents placed on extra temporal slots of the input.

pub mod conditioning;
pub mod dit;
pub mod encoders;
pub mod error;
pub mod flow;
pub mod harness;
pub mod nn;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book;
