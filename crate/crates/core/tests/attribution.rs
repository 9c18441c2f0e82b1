//! Attribution methods against closed-form models and brute-force oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trigger_xai::eval::{
    aic, logistic_log_likelihood, perturbation_curve, surrogate_fit, surrogate_patches, PerturbMode,
};
use trigger_xai::fixtures::{
    fixture_image, gen_scene, occlusion_oracle, planted_gaussians, PixelProbeModel, SingleChannelModel,
};
use trigger_xai::numeric::normalize01;
use trigger_xai::saliency::{full_grad_terms, grad_cam, rise_saliency, train_cav_from_features, RiseConfig};
use trigger_xai::{DiseaseLabel, Grid2D, ImageRgb, MicroNet, MicroNetSpec, ModelBackend};

#[test]
fn rise_finds_the_probed_pixel() {
    let model = PixelProbeModel::new(0, 0);
    let img = ImageRgb::filled(12, 12, [0.8; 3]);
    let cfg = RiseConfig {
        masks: 2000,
        cells: 4,
        seed: 3,
        ..RiseConfig::default()
    };
    let map = rise_saliency(&model, &img, 0, &cfg).unwrap();
    assert_eq!(map.grid.argmax(), (0, 0));
}

#[test]
fn occlusion_concentrates_on_the_probed_patch() {
    let model = PixelProbeModel::new(5, 9);
    let img = ImageRgb::filled(16, 16, [0.6; 3]);
    let occ = occlusion_oracle(&model, &img, 0, 4).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            let inside = y / 4 == 1 && x / 4 == 2;
            assert_eq!(occ.get(y, x) > 0.0, inside, "({y}, {x})");
        }
    }
}

#[test]
fn deletion_beats_insertion_on_a_pixel_probe() {
    let model = PixelProbeModel::new(0, 0);
    let img = ImageRgb::filled(10, 10, [0.9; 3]);
    let mut map = Grid2D::zeros(10, 10);
    map.set(0, 0, 1.0);
    let del = perturbation_curve(&model, &img, 0, &map, PerturbMode::Deletion, 0.1).unwrap();
    let ins = perturbation_curve(&model, &img, 0, &map, PerturbMode::Insertion, 0.1).unwrap();
    assert!(del.points[1].1 < del.points[0].1);
    assert!(del.auc < ins.auc);
}

#[test]
fn gradcam_of_a_single_channel_is_its_activation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let act = Grid2D::from_fn(6, 6, |_, _| rng.gen_range(-1.0..1.0));
    let model = SingleChannelModel::new(act.clone(), 2.5);
    let img = ImageRgb::filled(6, 6, [0.0; 3]);
    let cam = grad_cam(&model, &img, 0, "feat").unwrap();
    let expect = normalize01(&act.map(|v| v.max(0.0)));
    for (a, b) in cam.grid.values().iter().zip(expect.values()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn fullgrad_completeness_at_classifier_resolution() {
    let net = MicroNet::build(11, &MicroNetSpec::default()).unwrap();
    let img = fixture_image(224, 2);
    for class in 0..4 {
        let logit = net.forward(&img).unwrap().logits[class];
        let sum = full_grad_terms(&net, &img, class).unwrap().completeness_sum();
        assert!((sum - logit).abs() <= 1e-4 * logit.abs().max(1e-9), "class {class}");
    }
}

#[test]
fn conv_bias_gradient_is_spatial_sum() {
    let net = MicroNet::build(2, &MicroNetSpec::default()).unwrap();
    let img = fixture_image(16, 8);
    for g in net.grad_wrt_biases(&img, 1).unwrap() {
        if let Some(sp) = &g.spatial {
            for (k, &gk) in g.grad.iter().enumerate() {
                let s: f64 = sp.channel(k).iter().sum();
                assert!((s - gk).abs() <= 1e-12 * s.abs().max(1.0), "{} channel {k}", g.layer);
            }
        }
    }
}

#[test]
fn cav_separates_planted_gaussians_and_not_noise() {
    let (pos, neg, u) = planted_gaussians(80, 80, 16, 4.0, 1);
    let cav = train_cav_from_features("planted", "feat", &pos, &neg, 0).unwrap();
    assert!(cav.accuracy >= 0.95);
    let along: f64 = cav.direction.iter().zip(&u).map(|(a, b)| a * b).sum();
    assert!(along > 0.8, "cosine to planted direction {along}");

    let (a, b, _) = planted_gaussians(80, 80, 16, 0.0, 2);
    let null = train_cav_from_features("none", "feat", &a, &b, 0).unwrap();
    assert!((null.accuracy - 0.5).abs() <= 0.15, "{}", null.accuracy);
}

#[test]
fn surrogate_aic_matches_independent_refit() {
    let s = gen_scene(DiseaseLabel::YellowSpots, 4);
    let map = normalize01(&s.image.channel_grid(0));
    let fit = surrogate_fit(&s.image, &map, &s.mask).unwrap();
    let data = surrogate_patches(&s.image, &map, &s.mask).unwrap();
    let ll = logistic_log_likelihood(&fit.params, &data.features, &data.targets);
    assert!((ll - fit.log_likelihood).abs() < 1e-9);
    assert_eq!(aic(fit.k, ll), 2.0 * fit.k as f64 - 2.0 * ll);
    // the fitted parameters maximize the penalized likelihood, so nudging
    // any of them cannot raise the plain likelihood by much
    for i in 0..fit.params.len() {
        for d in [-1e-3, 1e-3] {
            let mut p = fit.params.clone();
            p[i] += d;
            assert!(logistic_log_likelihood(&p, &data.features, &data.targets) <= ll + 1e-4);
        }
    }
}

#[test]
fn gradient_shapes_follow_the_input() {
    let net = MicroNet::build(0, &MicroNetSpec::default()).unwrap();
    let img = fixture_image(20, 1);
    let g = net.grad_wrt_input(&img, 2).unwrap();
    assert!(g.iter().all(|p| p.dims() == (20, 20)));
    assert_eq!(net.forward(&img).unwrap().probs.len(), net.num_classes());
}
