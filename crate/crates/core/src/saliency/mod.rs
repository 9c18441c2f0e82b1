//! Attribution engines. Every map leaves here normalized to `[0, 1]` at the
//! explained image's resolution.

mod fullgrad;
mod gradcam;
mod rise;
mod tcav;

use serde::{Deserialize, Serialize};

use crate::numeric::Grid2D;

pub use fullgrad::{full_grad, full_grad_terms, BiasTerm, FullGradTerms};
pub use gradcam::grad_cam;
pub use rise::{rise_alignment_weight, rise_mask, rise_masks, rise_saliency, AlignmentWeight, RiseConfig};
pub use tcav::{
    tcav_concept_map, tcav_directional, tcav_score, train_cav, train_cav_from_features, ConceptActivationVector,
    ConceptSet, CAV_EPOCHS, CAV_LEARNING_RATE, MIN_CONCEPT_SET,
};

/// Which procedure produced a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "gradcam")]
    GradCam,
    #[serde(rename = "fullgrad")]
    FullGrad,
    #[serde(rename = "rise")]
    Rise,
    #[serde(rename = "tcav-concept")]
    TcavConcept,
    #[serde(rename = "fused-intra")]
    FusedIntra,
    #[serde(rename = "fused-inter")]
    FusedInter,
    #[serde(rename = "fused-weighted")]
    FusedWeighted,
    #[serde(rename = "fused-gated")]
    FusedGated,
}

impl Method {
    /// The four attribution methods in priority order.
    pub const ATTRIBUTION: [Method; 4] = [Method::GradCam, Method::FullGrad, Method::Rise, Method::TcavConcept];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::GradCam => "gradcam",
            Method::FullGrad => "fullgrad",
            Method::Rise => "rise",
            Method::TcavConcept => "tcav-concept",
            Method::FusedIntra => "fused-intra",
            Method::FusedInter => "fused-inter",
            Method::FusedWeighted => "fused-weighted",
            Method::FusedGated => "fused-gated",
        }
    }
}

/// A normalized attribution grid and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub grid: Grid2D,
    pub method: Method,
    pub model_id: String,
    pub class_index: usize,
    pub layer: Option<String>,
}

impl SaliencyMap {
    pub fn new(grid: Grid2D, method: Method, model_id: impl Into<String>, class_index: usize) -> Self {
        Self {
            grid,
            method,
            model_id: model_id.into(),
            class_index,
            layer: None,
        }
    }

    pub fn with_layer(mut self, layer: impl Into<String>) -> Self {
        self.layer = Some(layer.into());
        self
    }

    /// True when no pixel carries attribution.
    pub fn is_empty_saliency(&self) -> bool {
        self.grid.is_all_zero()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }
}
