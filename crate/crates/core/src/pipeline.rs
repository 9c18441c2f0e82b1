//! End-to-end explanation of one image across one or three model streams:
//! attribution, fusion, method assignment, trigger decision, alignment,
//! drift and the validation gates.

use std::time::Instant;

use crate::concepts::{jittered_batch, yellow_spot_concepts, YELLOW_SPOTS_CONCEPT};
use crate::error::{Error, Result};
use crate::eval::{
    aic, bic, brier, perturbation_curve, surrogate_fit, validate_explanation, Curve, GateReport, GateThresholds,
    PerturbMode, SurrogateFit, DEFAULT_STEP,
};
use crate::features::{otsu_threshold, resize_normalize};
use crate::fusion::{attention_gates, fuse_attention_gated, fuse_inter_model, fuse_intra_model, fuse_weighted, MethodWeights};
use crate::labeler::yellow_band_mask;
use crate::model::{MicroNet, MicroNetSpec, ModelBackend, ModelKind};
use crate::numeric::{
    bilinear_resize, binarize, cosine_flat, iou_binary, normalize01, shannon_entropy, Grid2D, ImageRgb, ProbVector,
    ThresholdRule,
};
use crate::saliency::{
    full_grad_terms, grad_cam, rise_alignment_weight, rise_saliency, tcav_concept_map, tcav_score, train_cav,
    AlignmentWeight, Method, RiseConfig, SaliencyMap,
};
use crate::trigger::{
    concept_align, consistency_matrix, default_compatibility_table, ensemble_agreement, his_select, maia_assign,
    saliency_drift_flag, sc2_loss, trigger_decide, ConceptAlignment, ConsistencyMatrix, DriftReport, HisSelection,
    InterpreterAssignment, MaiaWeights, TriggerReport, TriggerThresholds, DEFAULT_ALIGN_THRESHOLD,
    DEFAULT_DRIFT_THRESHOLD,
};

const OTSU_LEVELS: usize = 256;

/// Stable identifier of each built-in backend.
pub fn backend_id(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Cnn => "micro-cnn",
        ModelKind::VitProxy => "vit-proxy",
        ModelKind::YoloProxy => "yolo-proxy",
    }
}

/// Seeded micro net standing in for a model stream. Streams differ only by
/// seed offset and kind tag.
pub fn build_backend(kind: ModelKind, seed: u64) -> Result<MicroNet> {
    let offset = ModelKind::ALL.iter().position(|&k| k == kind).unwrap_or(0) as u64;
    Ok(MicroNet::build(seed.wrapping_add(offset), &MicroNetSpec::default())?.with_identity(backend_id(kind), kind))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainConfig {
    /// Square side the image is resized to; 0 keeps the native size.
    pub input_side: usize,
    pub gradcam_layer: String,
    pub rise: RiseConfig,
    pub tcav_layer: String,
    pub tcav_concepts: usize,
    /// Jittered copies added to the image for the TCAV score.
    pub tcav_jitters: usize,
    pub weights: MethodWeights,
    pub gate_temperature: f64,
    pub his_gamma: f64,
    pub maia: MaiaWeights,
    pub maia_top_k: usize,
    pub trigger: TriggerThresholds,
    pub weak_labeled: bool,
    pub align_threshold: f64,
    pub drift_threshold: f64,
    pub gates: GateThresholds,
    pub binarize: ThresholdRule,
    pub perturb_step: f64,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            input_side: crate::features::CLASSIFIER_INPUT_SIDE,
            gradcam_layer: "conv2".into(),
            rise: RiseConfig::default(),
            tcav_layer: "conv2".into(),
            tcav_concepts: 20,
            tcav_jitters: 19,
            weights: MethodWeights::uniform(),
            gate_temperature: 1.0,
            his_gamma: 1.0,
            maia: MaiaWeights::default(),
            maia_top_k: 2,
            trigger: TriggerThresholds::default(),
            weak_labeled: false,
            align_threshold: DEFAULT_ALIGN_THRESHOLD,
            drift_threshold: DEFAULT_DRIFT_THRESHOLD,
            gates: GateThresholds::default(),
            binarize: ThresholdRule::default(),
            perturb_step: DEFAULT_STEP,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcavSummary {
    pub concept: String,
    pub layer: String,
    pub score: f64,
    pub cav_accuracy: f64,
}

/// Everything computed for one model stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelExplanation {
    pub model_id: String,
    pub kind: ModelKind,
    pub logits: Vec<f64>,
    pub probs: ProbVector,
    pub predicted: usize,
    /// Attribution maps in method priority order.
    pub maps: Vec<SaliencyMap>,
    /// `|sum of FullGrad terms - logit|`.
    pub completeness_residual: f64,
    pub rise_alignment: AlignmentWeight,
    /// Configured weights after the RISE alignment modifier.
    pub effective_weights: MethodWeights,
    pub tcav: TcavSummary,
    pub intra: SaliencyMap,
    pub weighted: SaliencyMap,
    pub gated: SaliencyMap,
    pub assigned: Vec<Method>,
    /// Interpretability confidence per assigned method.
    pub his_confidences: Vec<f64>,
    pub his: HisSelection,
    pub concept_alignment: ConceptAlignment,
    pub elapsed_ms: f64,
}

impl ModelExplanation {
    pub fn map(&self, method: Method) -> Option<&SaliencyMap> {
        self.maps.iter().find(|m| m.method == method)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceSource {
    Provided,
    Otsu,
}

impl ReferenceSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ReferenceSource::Provided => "provided",
            ReferenceSource::Otsu => "otsu",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    /// The image at model resolution.
    pub input: ImageRgb,
    pub class_index: usize,
    pub class_overridden: bool,
    pub models: Vec<ModelExplanation>,
    pub assignment: InterpreterAssignment,
    /// Inter-model fusion for three streams, the weighted map for one.
    pub fused: SaliencyMap,
    pub mean_probs: ProbVector,
    pub agreement: f64,
    pub trigger: TriggerReport,
    pub concept_mask: Grid2D,
    pub reference_mask: Grid2D,
    pub reference_source: ReferenceSource,
    pub sc2: f64,
    pub drift: DriftReport,
    pub consistency: ConsistencyMatrix,
    pub surrogate: SurrogateFit,
    pub gates: GateReport,
    pub deletion: Curve,
    pub insertion: Curve,
}

fn mean_probs(models: &[ModelExplanation]) -> Result<ProbVector> {
    let n = models[0].probs.len();
    let mut acc = vec![0.0; n];
    for m in models {
        for (a, p) in acc.iter_mut().zip(m.probs.entries()) {
            *a += p / models.len() as f64;
        }
    }
    // averaging can drift the sum by an ulp or two
    let total: f64 = acc.iter().sum();
    ProbVector::new(acc.into_iter().map(|v| v / total).collect())
}

/// Binary mask at `(h, w)`: bilinear resample, then threshold at one half.
pub fn resample_mask(mask: &Grid2D, h: usize, w: usize) -> Result<Grid2D> {
    if mask.dims() == (h, w) {
        return Ok(mask.map(|v| (v >= 0.5) as u8 as f64));
    }
    Ok(bilinear_resize(mask, h, w)?.map(|v| (v >= 0.5) as u8 as f64))
}

/// Otsu foreground of the luminance.
pub fn otsu_foreground(image: &ImageRgb) -> Result<Grid2D> {
    let gray = image.luminance_mean();
    match otsu_threshold(&gray, OTSU_LEVELS) {
        Ok(t) => Ok(t.mask(&gray)),
        // a flat image has no foreground to separate
        Err(Error::DegenerateHistogram) => Ok(Grid2D::zeros(gray.height(), gray.width())),
        Err(e) => Err(e),
    }
}

fn explain_model(
    model: &dyn ModelBackend,
    image: &ImageRgb,
    class_index: usize,
    assigned: &[Method],
    concept_mask: &Grid2D,
    cfg: &ExplainConfig,
) -> Result<ModelExplanation> {
    let start = Instant::now();
    let fwd = model.forward(image)?;
    let gradcam = grad_cam(model, image, class_index, &cfg.gradcam_layer)?.with_layer(cfg.gradcam_layer.clone());

    let terms = full_grad_terms(model, image, class_index)?;
    let completeness_residual = (terms.completeness_sum() - fwd.logits[class_index]).abs();
    let fullgrad = SaliencyMap::new(normalize01(&terms.attribution()), Method::FullGrad, model.model_id(), class_index);

    let rise_cfg = RiseConfig {
        seed: cfg.rise.seed ^ cfg.seed,
        ..cfg.rise.clone()
    };
    let rise = rise_saliency(model, image, class_index, &rise_cfg)?;

    let concepts = yellow_spot_concepts(image.height().max(image.width()).min(64), cfg.tcav_concepts, cfg.seed)?;
    let concepts = if concepts.positives()[0].dims() == image.dims() {
        concepts
    } else {
        let fit = |v: &[ImageRgb]| -> Result<Vec<ImageRgb>> {
            v.iter().map(|im| resize_normalize(im, image.height(), image.width())).collect()
        };
        crate::saliency::ConceptSet::new(fit(concepts.positives())?, fit(concepts.randoms())?)?
    };
    let cav = train_cav(model, &cfg.tcav_layer, YELLOW_SPOTS_CONCEPT, &concepts, cfg.seed)?;
    let batch = jittered_batch(image, cfg.tcav_jitters, cfg.seed.wrapping_add(1));
    let score = tcav_score(model, &batch, class_index, &cav)?;
    let tcav_map = tcav_concept_map(concept_mask, score, model.model_id(), class_index)?.with_layer(cfg.tcav_layer.clone());

    let rise_alignment = rise_alignment_weight(&rise, &gradcam)?;
    let effective_weights = cfg.weights.with_rise_alignment(rise_alignment.weight)?;
    let intra = fuse_intra_model(&gradcam, &rise, &fullgrad, None)?;
    let maps = vec![gradcam, fullgrad, rise, tcav_map];
    let weighted = fuse_weighted(&maps, &effective_weights)?;

    let chosen: Vec<SaliencyMap> = assigned
        .iter()
        .map(|&m| maps.iter().find(|s| s.method == m).cloned().ok_or_else(|| Error::MissingMethod(m.as_str().into())))
        .collect::<Result<_>>()?;
    let grids: Vec<&Grid2D> = chosen.iter().map(|m| &m.grid).collect();
    let gates = attention_gates(&grids, cfg.gate_temperature)?;
    let gated = fuse_attention_gated(&chosen, &gates)?;

    let his_confidences: Vec<f64> = chosen
        .iter()
        .map(|m| match cosine_flat(&m.grid, &weighted.grid) {
            Ok(c) => Ok(c.max(0.0)),
            Err(Error::ZeroNormMap) => Ok(0.0),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let lambdas: Vec<f64> = assigned.iter().map(|&m| effective_weights.get(m)).collect();
    let his = his_select(&his_confidences, &lambdas, cfg.his_gamma, shannon_entropy(&fwd.probs))?;

    let concept_alignment = concept_align(maps[3].grid.values(), maps[0].grid.values(), cfg.align_threshold)?;
    let predicted = fwd.probs.argmax();
    Ok(ModelExplanation {
        model_id: model.model_id().to_string(),
        kind: model.kind(),
        logits: fwd.logits,
        probs: fwd.probs,
        predicted,
        maps,
        completeness_residual,
        rise_alignment,
        effective_weights,
        tcav: TcavSummary {
            concept: YELLOW_SPOTS_CONCEPT.into(),
            layer: cfg.tcav_layer.clone(),
            score,
            cav_accuracy: cav.accuracy,
        },
        intra,
        weighted,
        gated,
        assigned: assigned.to_vec(),
        his_confidences,
        his,
        concept_alignment,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Explains `image` with one stream or with exactly one stream of each
/// kind. `class_index` defaults to the top class of the averaged
/// probabilities; `mask` is the reference region for the gates and drift
/// check and defaults to the Otsu foreground.
pub fn explain(
    models: &[&dyn ModelBackend],
    image: &ImageRgb,
    class_index: Option<usize>,
    mask: Option<&Grid2D>,
    cfg: &ExplainConfig,
) -> Result<Explanation> {
    let streams = match models.len() {
        1 => None,
        3 => {
            let mut by_kind: Vec<Option<usize>> = vec![None; 3];
            for (i, m) in models.iter().enumerate() {
                let slot = ModelKind::ALL.iter().position(|&k| k == m.kind()).expect("known kind");
                if by_kind[slot].replace(i).is_some() {
                    return Err(Error::InvalidArgument(format!("two streams of kind {}", m.kind().as_str())));
                }
            }
            Some(by_kind.into_iter().map(|i| i.expect("one per kind")).collect::<Vec<_>>())
        }
        n => return Err(Error::InvalidArgument(format!("explain needs 1 or 3 model streams, got {n}"))),
    };
    let input = if cfg.input_side == 0 {
        image.clone()
    } else {
        resize_normalize(image, cfg.input_side, cfg.input_side)?
    };
    let (h, w) = input.dims();

    let kinds: Vec<ModelKind> = models.iter().map(|m| m.kind()).collect();
    let assignment = maia_assign(&default_compatibility_table(), &cfg.maia, &kinds, cfg.maia_top_k)?;

    let class_overridden = class_index.is_some();
    let class_index = match class_index {
        Some(c) => c,
        None => {
            let mut probs = Vec::with_capacity(models.len());
            for m in models {
                probs.push(m.forward(&input)?.probs);
            }
            let n = probs[0].len();
            let avg: Vec<f64> = (0..n).map(|c| probs.iter().map(|p| p.entries()[c]).sum::<f64>()).collect();
            ProbVector::new(avg.iter().map(|v| v / avg.iter().sum::<f64>()).collect())?.argmax()
        }
    };
    for m in models {
        if class_index >= m.num_classes() {
            return Err(Error::ClassOutOfRange {
                index: class_index,
                num_classes: m.num_classes(),
            });
        }
    }

    let concept_mask = yellow_band_mask(&input);
    let mut explained = Vec::with_capacity(models.len());
    for m in models {
        let assigned = &assignment.methods[&m.kind()];
        explained.push(explain_model(*m, &input, class_index, assigned, &concept_mask, cfg)?);
    }

    let fused = match &streams {
        None => explained[0].weighted.clone(),
        Some(order) => fuse_inter_model(
            &explained[order[0]].weighted,
            &explained[order[1]].weighted,
            &explained[order[2]].weighted,
        )?,
    };

    let mean = mean_probs(&explained)?;
    let votes: Vec<usize> = explained.iter().map(|m| m.predicted).collect();
    let agreement = ensemble_agreement(&votes)?;
    let trigger = trigger_decide(&mean, agreement, cfg.weak_labeled, &cfg.trigger)?;

    let (reference_mask, reference_source) = match mask {
        Some(m) => (resample_mask(m, h, w)?, ReferenceSource::Provided),
        None => (otsu_foreground(&input)?, ReferenceSource::Otsu),
    };
    let saliency_mask = binarize(&fused.grid, cfg.binarize);
    let sc2 = sc2_loss(&saliency_mask, &concept_mask)?;
    let drift = saliency_drift_flag(&fused.grid, &reference_mask, cfg.drift_threshold)?;

    let mut all_maps: Vec<SaliencyMap> = Vec::new();
    for m in &explained {
        all_maps.extend(m.maps.iter().cloned());
        all_maps.push(m.weighted.clone());
    }
    if streams.is_some() {
        all_maps.push(fused.clone());
    }
    let consistency = consistency_matrix(&all_maps)?;

    let surrogate = surrogate_fit(&input, &fused.grid, &reference_mask)?;
    let gates = validate_explanation(
        aic(surrogate.k, surrogate.log_likelihood),
        bic(surrogate.k, surrogate.n as f64, surrogate.log_likelihood),
        brier(std::slice::from_ref(&mean), &[class_index])?,
        mean.max(),
        iou_binary(&saliency_mask, &reference_mask)?,
        &cfg.gates,
    )?;

    let primary = models[0];
    let deletion = perturbation_curve(primary, &input, class_index, &fused.grid, PerturbMode::Deletion, cfg.perturb_step)?;
    let insertion = perturbation_curve(primary, &input, class_index, &fused.grid, PerturbMode::Insertion, cfg.perturb_step)?;

    Ok(Explanation {
        input,
        class_index,
        class_overridden,
        models: explained,
        assignment,
        fused,
        mean_probs: mean,
        agreement,
        trigger,
        concept_mask,
        reference_mask,
        reference_source,
        sc2,
        drift,
        consistency,
        surrogate,
        gates,
        deletion,
        insertion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::gen_scene;
    use crate::labeler::DiseaseLabel;

    fn small_cfg() -> ExplainConfig {
        ExplainConfig {
            input_side: 0,
            rise: RiseConfig {
                masks: 64,
                ..RiseConfig::default()
            },
            tcav_concepts: 10,
            tcav_jitters: 4,
            ..ExplainConfig::default()
        }
    }

    fn nets(seed: u64) -> Vec<MicroNet> {
        ModelKind::ALL.iter().map(|&k| build_backend(k, seed).unwrap()).collect()
    }

    #[test]
    fn single_stream_explanation_is_coherent() {
        let scene = gen_scene(DiseaseLabel::YellowSpots, 4);
        let net = build_backend(ModelKind::Cnn, 1).unwrap();
        let cfg = small_cfg();
        let ex = explain(&[&net], &scene.image, None, Some(&scene.mask), &cfg).unwrap();
        let m = &ex.models[0];
        assert_eq!(m.maps.len(), 4);
        assert_eq!(ex.fused, m.weighted);
        assert_eq!(ex.agreement, 1.0);
        assert_eq!(ex.class_index, net.forward(&scene.image).unwrap().probs.argmax());
        assert_eq!(m.assigned, vec![Method::GradCam, Method::TcavConcept]);
        assert!(m.completeness_residual <= 1e-6 * (1.0 + m.logits[ex.class_index].abs()));
        assert_eq!(ex.reference_source, ReferenceSource::Provided);
        assert_eq!(ex.reference_mask, scene.mask);
        let direct = trigger_decide(&ex.mean_probs, 1.0, false, &cfg.trigger).unwrap();
        assert_eq!(ex.trigger, direct);
        assert_eq!(ex.deletion.points.len(), 51);
        let n = ex.consistency.labels.len();
        assert_eq!(n, 5);
    }

    #[test]
    fn three_streams_fuse_across_models() {
        let scene = gen_scene(DiseaseLabel::SilkWebbing, 2);
        let ns = nets(5);
        let refs: Vec<&dyn ModelBackend> = ns.iter().map(|n| n as &dyn ModelBackend).collect();
        let ex = explain(&refs, &scene.image, Some(1), None, &small_cfg()).unwrap();
        assert_eq!(ex.fused.method, Method::FusedInter);
        assert_eq!(ex.class_index, 1);
        assert_eq!(ex.consistency.labels.len(), 3 * 5 + 1);
        assert_eq!(ex.reference_source, ReferenceSource::Otsu);
        let again = explain(&refs, &scene.image, Some(1), None, &small_cfg()).unwrap();
        let strip = |e: &Explanation| {
            let mut e = e.clone();
            e.models.iter_mut().for_each(|m| m.elapsed_ms = 0.0);
            e
        };
        assert_eq!(strip(&ex), strip(&again));
    }

    #[test]
    fn rejects_bad_stream_sets() {
        let scene = gen_scene(DiseaseLabel::Healthy, 1);
        let ns = nets(1);
        let two: Vec<&dyn ModelBackend> = ns.iter().take(2).map(|n| n as &dyn ModelBackend).collect();
        assert!(explain(&two, &scene.image, None, None, &small_cfg()).is_err());
        let dup: Vec<&dyn ModelBackend> = vec![&ns[0], &ns[0], &ns[1]];
        assert!(explain(&dup, &scene.image, None, None, &small_cfg()).is_err());
        assert!(explain(&[&ns[0]], &scene.image, Some(9), None, &small_cfg()).is_err());
    }

    #[test]
    fn flat_image_has_no_otsu_foreground() {
        let img = ImageRgb::filled(8, 8, [0.3, 0.3, 0.3]);
        assert!(otsu_foreground(&img).unwrap().is_all_zero());
    }
}
