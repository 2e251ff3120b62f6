//! Anchor-relative gaze estimation from paired event and frame inputs.
//!
//! Local expert transformers classify the gaze shift of a current eye state
//! relative to a registered anchor state within one sub-region of the gaze
//! grid. A single full-grid student then learns from all experts through a
//! hard label loss, an attention KL loss and a feature loss against
//! diffusion reconstructions of the experts' latents.

pub mod anchors;
pub mod checkpoint;
pub mod corrnet;
pub mod data;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod geom;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod tokenizer;

pub use error::{GazeError, Result};
