//! Single-stage open-vocabulary, domain-generalized semantic segmentation.
//!
//! Frozen visual, depth and text encoders are represented by feature
//! providers ([`features`]). Trainable per-layer prompts refine the visual
//! features ([`geotext`]), a coarse mask prior turns the refined multi-scale
//! features into class-aware query priors ([`cmpe`]), and a text-conditioned
//! head predicts per-pixel class logits for any label set ([`head`]).
//! Everything runs on the small reverse-mode autodiff engine in [`tensor`].

pub mod cli;
pub mod cmpe;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod geotext;
pub mod gradsuite;
pub mod head;
pub mod model;
mod nn;
pub mod params;
pub mod pgm;
pub mod tensor;
pub mod train;
pub mod vfea;

pub use error::{Error, Result};
pub use params::{Bound, ParamStore};
pub use tensor::{Graph, Tensor, Var};
