//! Locate-then-generate question answering over scene text.
//!
//! The answer location module (`alm`) predicts an answer region box from a
//! visual stream and maps it onto scene-text tokens through box overlap; a
//! linguistic head refines those token probabilities and a soft switch mixes
//! the two. The answer generation module (`agm`) turns the selected tokens
//! into an answer sequence. Everything trains from scratch on the synthetic
//! scene-text world in `dataworld`.

pub mod agm;
pub mod alm;
pub mod autograd;
pub mod dataworld;
pub mod encoders;
pub mod error;
pub mod evalsuite;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod params;
pub mod preprocess;
pub mod vocab;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use dataworld::{CorruptionSpec, SceneInstance, SceneTextToken, WorldConfig};
pub use preprocess::AlmTargets;
pub use alm::{AlmLossConfig, AlmOutput};
pub use params::ParamStore;
