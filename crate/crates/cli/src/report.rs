//! The versioned JSON explanation report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use trigger_xai::eval::{Curve, GateReport, SurrogateFit};
use trigger_xai::pipeline::{Explanation, ModelExplanation};
use trigger_xai::saliency::AlignmentWeight;
use trigger_xai::trigger::{ConceptAlignment, ConsistencyMatrix, DriftReport, TriggerReport};
use trigger_xai::{Method, ModelKind, SaliencyMap};

pub const SCHEMA_VERSION: &str = "v1";

/// The committed JSON Schema the report validates against.
pub const SCHEMA: &str = include_str!("../schema/report-v1.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSummary {
    pub method: Method,
    pub model_id: String,
    pub layer: Option<String>,
    pub class_index: usize,
    /// No positive saliency anywhere.
    pub empty: bool,
    pub mass: f64,
    /// `[row, column]` of the first maximum.
    pub peak: [usize; 2],
    /// Overlay file name inside the output directory.
    pub overlay: Option<String>,
}

impl MapSummary {
    pub fn of(map: &SaliencyMap, overlay: Option<String>) -> Self {
        let (y, x) = map.grid.argmax();
        Self {
            method: map.method,
            model_id: map.model_id.clone(),
            layer: map.layer.clone(),
            class_index: map.class_index,
            empty: map.is_empty_saliency(),
            mass: map.grid.sum(),
            peak: [y, x],
            overlay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcavBlock {
    pub concept: String,
    pub layer: String,
    pub score: f64,
    pub cav_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HisBlock {
    pub candidates: Vec<Method>,
    pub confidences: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// `lambda * I + gamma * uncertainty` per candidate.
    pub scores: Vec<f64>,
    /// Added to every candidate alike, so it never changes the choice.
    pub uncertainty_term: f64,
    pub selected: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionBlock {
    pub intra: MapSummary,
    pub weighted: MapSummary,
    pub gated: MapSummary,
    /// `[gradcam, fullgrad, rise, tcav-concept]` after the RISE alignment
    /// weight multiplied the RISE share.
    pub effective_weights: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub model_id: String,
    pub kind: ModelKind,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
    pub completeness_residual: f64,
    pub maps: Vec<MapSummary>,
    pub rise_alignment: AlignmentWeight,
    pub tcav: TcavBlock,
    pub assigned: Vec<Method>,
    pub his: HisBlock,
    pub concept_alignment: ConceptAlignment,
    pub fusion: FusionBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageBlock {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub input_height: usize,
    pub input_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingBlock {
    pub total_ms: f64,
    pub models_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationReport {
    pub schema_version: String,
    pub image: ImageBlock,
    pub seed: u64,
    pub class_index: usize,
    /// `flag` when the class was given, `argmax` otherwise.
    pub class_source: String,
    pub probabilities: Vec<f64>,
    pub models: Vec<ModelBlock>,
    pub assignment: BTreeMap<ModelKind, Vec<Method>>,
    pub fused: MapSummary,
    pub agreement: f64,
    pub trigger: TriggerReport,
    pub concept_mask_pixels: usize,
    /// `provided` or `otsu`.
    pub reference_mask: String,
    pub reference_mask_pixels: usize,
    pub sc2_loss: f64,
    pub drift: DriftReport,
    pub consistency: ConsistencyMatrix,
    pub surrogate: SurrogateFit,
    pub gates: GateReport,
    pub deletion: Curve,
    pub insertion: Curve,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingBlock>,
}

pub fn overlay_name(model_id: &str, method: Method) -> String {
    format!("{model_id}_{}.ppm", method.as_str())
}

pub const FUSED_OVERLAY: &str = "fused.ppm";

fn model_block(m: &ModelExplanation) -> ModelBlock {
    ModelBlock {
        model_id: m.model_id.clone(),
        kind: m.kind,
        logits: m.logits.clone(),
        probabilities: m.probs.entries().to_vec(),
        predicted: m.predicted,
        completeness_residual: m.completeness_residual,
        maps: m
            .maps
            .iter()
            .map(|s| MapSummary::of(s, Some(overlay_name(&m.model_id, s.method))))
            .collect(),
        rise_alignment: m.rise_alignment,
        tcav: TcavBlock {
            concept: m.tcav.concept.clone(),
            layer: m.tcav.layer.clone(),
            score: m.tcav.score,
            cav_accuracy: m.tcav.cav_accuracy,
        },
        assigned: m.assigned.clone(),
        his: HisBlock {
            candidates: m.assigned.clone(),
            confidences: m.his_confidences.clone(),
            lambdas: m.assigned.iter().map(|&k| m.effective_weights.get(k)).collect(),
            scores: m.his.scores.clone(),
            uncertainty_term: m.his.uncertainty_term,
            selected: m.assigned[m.his.index],
        },
        concept_alignment: m.concept_alignment,
        fusion: FusionBlock {
            intra: MapSummary::of(&m.intra, None),
            weighted: MapSummary::of(&m.weighted, None),
            gated: MapSummary::of(&m.gated, None),
            effective_weights: m.effective_weights.as_array(),
        },
    }
}

pub fn build_report(
    ex: &Explanation,
    image_name: &str,
    original_dims: (usize, usize),
    seed: u64,
    timing: Option<TimingBlock>,
) -> ExplanationReport {
    ExplanationReport {
        schema_version: SCHEMA_VERSION.into(),
        image: ImageBlock {
            name: image_name.into(),
            height: original_dims.0,
            width: original_dims.1,
            input_height: ex.input.height(),
            input_width: ex.input.width(),
        },
        seed,
        class_index: ex.class_index,
        class_source: if ex.class_overridden { "flag" } else { "argmax" }.into(),
        probabilities: ex.mean_probs.entries().to_vec(),
        models: ex.models.iter().map(model_block).collect(),
        assignment: ex.assignment.methods.clone(),
        fused: MapSummary::of(&ex.fused, Some(FUSED_OVERLAY.into())),
        agreement: ex.agreement,
        trigger: ex.trigger.clone(),
        concept_mask_pixels: ex.concept_mask.count_set(),
        reference_mask: ex.reference_source.as_str().into(),
        reference_mask_pixels: ex.reference_mask.count_set(),
        sc2_loss: ex.sc2,
        drift: ex.drift,
        consistency: ex.consistency.clone(),
        surrogate: ex.surrogate.clone(),
        gates: ex.gates,
        deletion: ex.deletion.clone(),
        insertion: ex.insertion.clone(),
        timing,
    }
}
