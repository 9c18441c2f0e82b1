//! Saliency attribution, fusion, trigger gating and weak labeling for image
//! classifiers, with a built-in seeded reference network.

pub mod concepts;
pub mod detection;
pub mod error;
pub mod eval;
pub mod features;
pub mod fixtures;
pub mod fusion;
pub mod labeler;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod saliency;
pub mod trigger;

pub use error::{Error, Result};
pub use labeler::DiseaseLabel;
pub use model::{FeatureStack, Forward, MicroNet, MicroNetSpec, ModelBackend, ModelKind};
pub use numeric::{Grid2D, ImageRgb, ProbVector};
pub use saliency::{Method, SaliencyMap};
