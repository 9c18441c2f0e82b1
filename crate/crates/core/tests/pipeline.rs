//! End-to-end properties of `explain` on generated scenes.

use std::sync::OnceLock;

use trigger_xai::eval::validate_explanation;
use trigger_xai::fixtures::gen_scene;
use trigger_xai::labeler::yellow_band_mask;
use trigger_xai::numeric::{binarize, iou_binary};
use trigger_xai::pipeline::{build_backend, explain, ExplainConfig, Explanation, ReferenceSource};
use trigger_xai::saliency::RiseConfig;
use trigger_xai::trigger::{ensemble_agreement, trigger_decide};
use trigger_xai::{DiseaseLabel, Error, Method, MicroNet, ModelBackend, ModelKind};

fn cfg() -> ExplainConfig {
    ExplainConfig {
        input_side: 0,
        rise: RiseConfig {
            masks: 400,
            ..RiseConfig::default()
        },
        seed: 5,
        ..ExplainConfig::default()
    }
}

fn nets() -> &'static Vec<MicroNet> {
    static NETS: OnceLock<Vec<MicroNet>> = OnceLock::new();
    NETS.get_or_init(|| ModelKind::ALL.iter().map(|&k| build_backend(k, 5).unwrap()).collect())
}

fn refs(n: usize) -> Vec<&'static dyn ModelBackend> {
    nets()[..n].iter().map(|m| m as &dyn ModelBackend).collect()
}

fn ensemble_run() -> &'static Explanation {
    static RUN: OnceLock<Explanation> = OnceLock::new();
    RUN.get_or_init(|| {
        let s = gen_scene(DiseaseLabel::YellowSpots, 3);
        explain(&refs(3), &s.image, None, Some(&s.mask), &cfg()).unwrap()
    })
}

#[test]
fn decision_block_is_consistent() {
    let ex = ensemble_run();
    let tops: Vec<usize> = ex.models.iter().map(|m| m.predicted).collect();
    assert_eq!(ex.agreement, ensemble_agreement(&tops).unwrap());
    assert_eq!(ex.trigger, trigger_decide(&ex.mean_probs, ex.agreement, false, &cfg().trigger).unwrap());
    assert_eq!(ex.class_index, ex.mean_probs.argmax());
    assert!(!ex.class_overridden);

    let g = &ex.gates;
    let again = validate_explanation(g.aic, g.bic, g.brier, g.confidence, g.iou, &cfg().gates).unwrap();
    assert_eq!(*g, again);
    assert_eq!(g.confidence, ex.mean_probs.max());
}

#[test]
fn maps_and_fusion_are_normalized() {
    let ex = ensemble_run();
    for m in &ex.models {
        let methods: Vec<Method> = m.maps.iter().map(|s| s.method).collect();
        assert_eq!(methods, Method::ATTRIBUTION);
        for s in m.maps.iter().chain([&m.intra, &m.weighted, &m.gated]) {
            assert_eq!(s.dims(), ex.input.dims());
            assert!(s.grid.values().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.is_empty_saliency() || s.grid.max() == 1.0);
        }
        // micro nets are piecewise linear, so FullGrad is complete
        let logit = m.logits[ex.class_index];
        assert!(m.completeness_residual <= 1e-6 * logit.abs().max(1.0));
        assert!(m.his.index < m.assigned.len());
        assert_eq!(m.assigned, ex.assignment.methods[&m.kind]);
    }
    assert_eq!(ex.fused.method, Method::FusedInter);
}

#[test]
fn checks_agree_with_their_definitions() {
    let ex = ensemble_run();
    assert_eq!(ex.concept_mask, yellow_band_mask(&ex.input));
    let iou = iou_binary(&binarize(&ex.fused.grid, cfg().binarize), &ex.concept_mask).unwrap();
    assert_eq!(ex.sc2, 1.0 - iou);
    assert_eq!(ex.reference_source, ReferenceSource::Provided);
    // the deletion curve starts from the unperturbed image
    let p0 = ex.deletion.points[0];
    assert_eq!(p0.0, 0.0);
    let clean = nets()[0].forward(&ex.input).unwrap().probs.entries()[ex.class_index];
    assert!((p0.1 - clean).abs() < 1e-12);
}

#[test]
fn single_stream_and_overrides() {
    let s = gen_scene(DiseaseLabel::SilkWebbing, 9);
    let a = explain(&refs(1), &s.image, Some(3), None, &cfg()).unwrap();
    let b = explain(&refs(1), &s.image, Some(3), None, &cfg()).unwrap();
    assert_eq!(a.class_index, 3);
    assert!(a.class_overridden);
    assert_eq!(a.reference_source, ReferenceSource::Otsu);
    assert_eq!(a.fused.method, Method::FusedWeighted);
    assert_eq!(a.agreement, 1.0);
    // elapsed time is the only field allowed to differ between runs
    let strip = |mut e: Explanation| {
        e.models.iter_mut().for_each(|m| m.elapsed_ms = 0.0);
        e
    };
    assert_eq!(strip(a), strip(b));
}

#[test]
fn resizes_to_the_configured_side() {
    let s = gen_scene(DiseaseLabel::Healthy, 2);
    let c = ExplainConfig {
        input_side: 16,
        ..cfg()
    };
    let ex = explain(&refs(1), &s.image, None, Some(&s.mask), &c).unwrap();
    assert_eq!(ex.input.dims(), (16, 16));
    assert_eq!(ex.reference_mask.dims(), (16, 16));
}

#[test]
fn rejects_bad_requests() {
    let s = gen_scene(DiseaseLabel::Healthy, 2);
    assert!(matches!(
        explain(&refs(2), &s.image, None, None, &cfg()),
        Err(Error::InvalidArgument(_))
    ));
    assert!(matches!(
        explain(&refs(1), &s.image, Some(4), None, &cfg()),
        Err(Error::ClassOutOfRange { .. })
    ));
    let two_cnns = [&nets()[0] as &dyn ModelBackend, &nets()[0], &nets()[1]];
    assert!(explain(&two_cnns, &s.image, None, None, &cfg()).is_err());
    let bad_layer = ExplainConfig {
        gradcam_layer: "conv9".into(),
        ..cfg()
    };
    assert!(matches!(
        explain(&refs(1), &s.image, None, None, &bad_layer),
        Err(Error::UnknownLayer(_))
    ));
}
