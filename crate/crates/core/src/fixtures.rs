//! Seeded synthetic scenes, test-double models and brute-force oracles.
//!
//! Nothing in the production path depends on this module, and the oracles
//! here deliberately re-derive their answers without calling the code they
//! check.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::detection::DetectionBox;
use crate::error::{Error, Result};
use crate::labeler::{Aggregate, DiseaseLabel};
use crate::model::{
    BiasGradient, FeatureStack, Forward, InputGradient, LayerGradient, ModelBackend, ModelKind,
};
use crate::numeric::{Grid2D, ImageRgb};

/// Side of generated scenes.
pub const SCENE_SIDE: usize = 32;

const LEAF: [f32; 3] = [0.20, 0.60, 0.15];
const YELLOW: [f32; 3] = [0.88, 0.82, 0.10];
const BRONZE: [f32; 3] = [0.85, 0.28, 0.12];
const WEB_LIGHT: f32 = 0.95;
const WEB_DARK: f32 = 0.05;
/// Per-channel texture amplitude; small enough that no colour crosses a
/// gray-level bin edge of the 8-level co-occurrence quantizer.
const JITTER: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: ImageRgb,
    pub mask: Grid2D,
    pub label: DiseaseLabel,
    pub seed: u64,
}

fn rng_for(tag: u64, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3]) -> [f32; 3] {
    base.map(|c| c + rng.gen_range(-JITTER..=JITTER))
}

/// Green leaf texture with a planted symptom region.
///
/// * `YellowSpots`: round yellow blobs covering 15-35 % of the leaf.
/// * `ReddishBronzing`: a wavy-edged red band over roughly 70 % of the leaf.
/// * `SilkWebbing`: a 1-pixel light/dark stripe patch over 40 % of the leaf.
/// * `Healthy`: no symptom; empty mask.
pub fn gen_scene(label: DiseaseLabel, seed: u64) -> SyntheticScene {
    gen_scene_sized(label, seed, SCENE_SIDE)
}

pub fn gen_scene_sized(label: DiseaseLabel, seed: u64, side: usize) -> SyntheticScene {
    let label = if label == DiseaseLabel::Abstain { DiseaseLabel::Healthy } else { label };
    let mut rng = rng_for(label as u64, seed);
    let s = side as f64;
    let mask = match label {
        DiseaseLabel::YellowSpots => {
            let mut m = Grid2D::zeros(side, side);
            let frac = |m: &Grid2D| m.count_set() as f64 / m.len() as f64;
            while frac(&m) < 0.15 {
                let r = rng.gen_range(0.12..0.19) * s;
                let cy = rng.gen_range(r..s - r);
                let cx = rng.gen_range(r..s - r);
                let mut next = m.clone();
                for y in 0..side {
                    for x in 0..side {
                        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                        if dy * dy + dx * dx <= r * r {
                            next.set(y, x, 1.0);
                        }
                    }
                }
                if frac(&next) <= 0.35 {
                    m = next;
                }
            }
            m
        }
        DiseaseLabel::ReddishBronzing => {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let from_top = rng.gen_bool(0.5);
            Grid2D::from_fn(side, side, |y, x| {
                let edge = 0.7 * s + 0.06 * s * (x as f64 / 3.0 + phase).sin();
                let depth = if from_top { y as f64 + 0.5 } else { s - y as f64 - 0.5 };
                (depth < edge) as u8 as f64
            })
        }
        DiseaseLabel::SilkWebbing => {
            let (ph, pw) = (side / 2, (side * 4).div_ceil(5));
            let oy = rng.gen_range(0..=side - ph);
            let ox = rng.gen_range(0..=side - pw);
            Grid2D::from_fn(side, side, |y, x| {
                ((oy..oy + ph).contains(&y) && (ox..ox + pw).contains(&x)) as u8 as f64
            })
        }
        _ => Grid2D::zeros(side, side),
    };
    let stripe_phase = rng.gen_range(0..2usize);
    let image = ImageRgb::from_fn(side, side, |y, x| {
        if mask.get(y, x) < 0.5 {
            return jitter(&mut rng, LEAF);
        }
        match label {
            DiseaseLabel::YellowSpots => jitter(&mut rng, YELLOW),
            DiseaseLabel::ReddishBronzing => jitter(&mut rng, BRONZE),
            _ => {
                let v = if (x + stripe_phase) % 2 == 0 { WEB_LIGHT } else { WEB_DARK };
                jitter(&mut rng, [v; 3])
            }
        }
    });
    SyntheticScene { image, mask, label, seed }
}

/// Smooth seeded colour field for generic model tests.
pub fn fixture_image(side: usize, seed: u64) -> ImageRgb {
    let mut rng = rng_for(u64::MAX, seed);
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| {
            [
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.1..0.25),
            ]
        })
        .collect();
    ImageRgb::from_fn(side, side, |y, x| {
        let (u, v) = (y as f64 / side as f64, x as f64 / side as f64);
        [0, 1, 2].map(|c| {
            let val: f64 = waves[c * 3..c * 3 + 3]
                .iter()
                .map(|[fy, fx, ph, a]| a * (std::f64::consts::TAU * (fy * u + fx * v) + ph).sin())
                .sum();
            (0.5 + val) as f32
        })
    })
}

/// Binary P6 encoding of an image, 8 bits per channel.
pub fn image_to_ppm(img: &ImageRgb) -> Vec<u8> {
    let (h, w) = img.dims();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.extend(img.pixel(y, x).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    out
}

/// Mask as a P6 image: set pixels white, others black.
pub fn mask_to_ppm(mask: &Grid2D) -> Vec<u8> {
    let img = ImageRgb::from_fn(mask.height(), mask.width(), |y, x| [if mask.get(y, x) >= 0.5 { 1.0 } else { 0.0 }; 3]);
    image_to_ppm(&img)
}

/// Per-patch drop in the class logit when that patch is set to zero,
/// broadcast over the patch's pixels.
pub fn occlusion_oracle(model: &dyn ModelBackend, image: &ImageRgb, class_index: usize, patch: usize) -> Result<Grid2D> {
    let (h, w) = image.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidArgument(format!("patch {patch} does not divide {h}x{w}")));
    }
    let base = model.forward(image)?.logits[class_index];
    let mut out = Grid2D::zeros(h, w);
    for py in (0..h).step_by(patch) {
        for px in (0..w).step_by(patch) {
            let mut occluded = image.clone();
            for y in py..py + patch {
                for x in px..px + patch {
                    occluded.set_pixel(y, x, [0.0; 3]);
                }
            }
            let drop = base - model.forward(&occluded)?.logits[class_index];
            for y in py..py + patch {
                for x in px..px + patch {
                    out.set(y, x, drop);
                }
            }
        }
    }
    Ok(out)
}

/// Exhaustive weighted vote: every class is scored by scanning all votes.
pub fn brute_force_vote(votes: &[DiseaseLabel; 4], weights: &[f64; 4]) -> Aggregate {
    let support: Vec<(DiseaseLabel, f64)> = DiseaseLabel::CLASSES
        .iter()
        .map(|&c| {
            let mut total = 0.0;
            for (v, w) in votes.iter().zip(weights) {
                if *v == c {
                    total += w;
                }
            }
            (c, total)
        })
        .collect();
    let top = support.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
    if top <= 0.0 {
        return Aggregate { label: DiseaseLabel::Abstain, score: 0.0, tie: false };
    }
    let winners: Vec<DiseaseLabel> = support
        .iter()
        .filter(|(_, s)| (top - s).abs() <= 1e-9 * top)
        .map(|(c, _)| *c)
        .collect();
    match winners.as_slice() {
        [only] => Aggregate { label: *only, score: top, tie: false },
        _ => Aggregate { label: DiseaseLabel::Abstain, score: top, tie: true },
    }
}

fn oracle_box_iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let (ax0, ax1, ay0, ay1) = (a.x - a.w / 2.0, a.x + a.w / 2.0, a.y - a.h / 2.0, a.y + a.h / 2.0);
    let (bx0, bx1, by0, by1) = (b.x - b.w / 2.0, b.x + b.w / 2.0, b.y - b.h / 2.0, b.y + b.h / 2.0);
    let w = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let h = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Searches every subset of boxes for the one that is consistent with greedy
/// suppression: a box is kept exactly when no kept box of its class that
/// precedes it overlaps it at or above `thr`. Exponential; use on small sets.
pub fn brute_force_nms(boxes: &[DetectionBox], thr: f64) -> Vec<DetectionBox> {
    assert!(boxes.len() <= 16, "oracle is exponential in the box count");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        let key = |k: usize| {
            let b = &boxes[k];
            (-b.score, b.x, b.y, b.w, b.h, b.class as f64, k as f64)
        };
        key(i).partial_cmp(&key(j)).expect("finite boxes")
    });
    let n = boxes.len();
    let mut found: Option<Vec<usize>> = None;
    for subset in 0u32..(1 << n) {
        let keep = |pos: usize| subset & (1 << pos) != 0;
        let consistent = (0..n).all(|p| {
            let b = &boxes[order[p]];
            let blocked = (0..p).any(|q| {
                let a = &boxes[order[q]];
                keep(q) && a.class == b.class && oracle_box_iou(a, b) >= thr
            });
            keep(p) == !blocked
        });
        if consistent {
            assert!(found.is_none(), "greedy suppression has a unique fixed point");
            found = Some((0..n).filter(|&p| keep(p)).map(|p| order[p]).collect());
        }
    }
    found.unwrap_or_default().into_iter().map(|i| boxes[i]).collect()
}

/// Scans every threshold on `levels` rounded gray levels and returns the
/// one maximizing between-class variance computed from the raw pixel lists.
/// `None` when fewer than two levels occur.
pub fn brute_force_otsu(gray: &Grid2D, levels: usize) -> Option<usize> {
    let q: Vec<f64> = gray
        .values()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * (levels - 1) as f64).round())
        .collect();
    let n = q.len() as f64;
    let mut best: Option<(usize, f64)> = None;
    for t in 0..levels - 1 {
        let lo: Vec<f64> = q.iter().copied().filter(|&v| v <= t as f64).collect();
        let hi: Vec<f64> = q.iter().copied().filter(|&v| v > t as f64).collect();
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let m1 = lo.iter().sum::<f64>() / lo.len() as f64;
        let m2 = hi.iter().sum::<f64>() / hi.len() as f64;
        let var = lo.len() as f64 / n * (hi.len() as f64 / n) * (m1 - m2).powi(2);
        if best.is_none_or(|(_, b)| var > b * (1.0 + 1e-12)) {
            best = Some((t, var));
        }
    }
    best.map(|(t, _)| t)
}

/// Random boxes on an 8x8 grid with scores drawn from a coarse set so that
/// equal scores occur.
pub fn random_boxes(seed: u64, n: usize, classes: usize) -> Vec<DetectionBox> {
    let mut rng = rng_for(7, seed);
    (0..n)
        .map(|_| DetectionBox {
            x: rng.gen_range(1.0..7.0),
            y: rng.gen_range(1.0..7.0),
            w: rng.gen_range(1.0..4.0),
            h: rng.gen_range(1.0..4.0),
            score: rng.gen_range(1..=10) as f64 / 10.0,
            class: rng.gen_range(0..classes.max(1)),
        })
        .collect()
}

/// Positive samples from `N(separation * u, I)` and negatives from
/// `N(0, I)` for a random unit `u`, which is also returned.
pub fn planted_gaussians(
    n_pos: usize,
    n_neg: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = rng_for(11, seed);
    let normal = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| rng.sample(StandardNormal)).collect() };
    let raw = normal(&mut rng);
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let pos = (0..n_pos)
        .map(|_| normal(&mut rng).iter().zip(&u).map(|(z, d)| z + separation * d).collect())
        .collect();
    let neg = (0..n_neg).map(|_| normal(&mut rng)).collect();
    (pos, neg, u)
}

/// Concept images carry a fixed seeded pattern on top of mid-gray noise;
/// random images carry only the noise. Returns the unit pattern direction
/// in centred-pixel space alongside.
pub fn planted_concept_images(
    n_pos: usize,
    n_rand: usize,
    side: usize,
    seed: u64,
) -> (Vec<ImageRgb>, Vec<ImageRgb>, Vec<f64>) {
    let mut rng = rng_for(13, seed);
    let len = 3 * side * side;
    let pattern: Vec<f32> = (0..len).map(|_| if rng.gen_bool(0.5) { 0.15 } else { -0.15 }).collect();
    let noisy = |rng: &mut ChaCha8Rng, add: bool| {
        let mut planes: [Vec<f32>; 3] = Default::default();
        for (c, plane) in planes.iter_mut().enumerate() {
            *plane = (0..side * side)
                .map(|i| {
                    let p = if add { pattern[c * side * side + i] } else { 0.0 };
                    0.5 + p + rng.gen_range(-0.1f32..0.1)
                })
                .collect();
        }
        ImageRgb::from_planes(side, side, planes).expect("planes sized to the image")
    };
    let pos = (0..n_pos).map(|_| noisy(&mut rng, true)).collect();
    let rand = (0..n_rand).map(|_| noisy(&mut rng, false)).collect();
    let norm = pattern.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    (pos, rand, pattern.iter().map(|&v| v as f64 / norm).collect())
}

fn zero_input_gradient(image: &ImageRgb) -> InputGradient {
    let (h, w) = image.dims();
    [Grid2D::zeros(h, w), Grid2D::zeros(h, w), Grid2D::zeros(h, w)]
}

fn unknown(layer: &str) -> Error {
    Error::UnknownLayer(layer.to_string())
}

fn check(index: usize, num_classes: usize) -> Result<()> {
    if index >= num_classes {
        return Err(Error::ClassOutOfRange { index, num_classes });
    }
    Ok(())
}

/// Every class has the same fixed logit regardless of input.
#[derive(Debug, Clone)]
pub struct ConstantModel {
    num_classes: usize,
    value: f64,
}

impl ConstantModel {
    pub fn new(num_classes: usize, value: f64) -> Self {
        Self { num_classes, value }
    }
}

impl ModelBackend for ConstantModel {
    fn model_id(&self) -> &str {
        "constant"
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn layer_names(&self) -> Vec<String> {
        vec!["feat".into()]
    }

    fn forward(&self, _image: &ImageRgb) -> Result<Forward> {
        Forward::from_logits(vec![self.value; self.num_classes])
    }

    fn activations(&self, image: &ImageRgb, layer: &str) -> Result<FeatureStack> {
        if layer != "feat" {
            return Err(unknown(layer));
        }
        Ok(FeatureStack::zeros(1, image.height(), image.width()))
    }

    fn grad_wrt_activations(&self, image: &ImageRgb, class_index: usize, layer: &str) -> Result<LayerGradient> {
        check(class_index, self.num_classes)?;
        let activation = self.activations(image, layer)?;
        Ok(LayerGradient {
            layer: layer.into(),
            gradient: activation.clone(),
            activation,
        })
    }

    fn grad_wrt_input(&self, image: &ImageRgb, class_index: usize) -> Result<InputGradient> {
        check(class_index, self.num_classes)?;
        Ok(zero_input_gradient(image))
    }
}

/// One fixed spatial activation `feat` with a uniform gradient; the single
/// logit is `grad * sum(act)`.
#[derive(Debug, Clone)]
pub struct SingleChannelModel {
    act: Grid2D,
    grad: f64,
}

impl SingleChannelModel {
    pub fn new(act: Grid2D, grad: f64) -> Self {
        Self { act, grad }
    }

    fn stack(&self, v: impl Fn(f64) -> f64) -> FeatureStack {
        let (h, w) = self.act.dims();
        FeatureStack::from_vec(1, h, w, self.act.values().iter().map(|&a| v(a)).collect())
            .expect("single plane")
    }
}

impl ModelBackend for SingleChannelModel {
    fn model_id(&self) -> &str {
        "single-channel"
    }

    fn num_classes(&self) -> usize {
        1
    }

    fn layer_names(&self) -> Vec<String> {
        vec!["feat".into()]
    }

    fn forward(&self, _image: &ImageRgb) -> Result<Forward> {
        Forward::from_logits(vec![self.grad * self.act.sum()])
    }

    fn activations(&self, _image: &ImageRgb, layer: &str) -> Result<FeatureStack> {
        if layer != "feat" {
            return Err(unknown(layer));
        }
        Ok(self.stack(|a| a))
    }

    fn grad_wrt_activations(&self, image: &ImageRgb, class_index: usize, layer: &str) -> Result<LayerGradient> {
        check(class_index, 1)?;
        Ok(LayerGradient {
            layer: layer.into(),
            activation: self.activations(image, layer)?,
            gradient: self.stack(|_| self.grad),
        })
    }

    fn grad_wrt_input(&self, image: &ImageRgb, class_index: usize) -> Result<InputGradient> {
        check(class_index, 1)?;
        Ok(zero_input_gradient(image))
    }
}

/// Two classes; class 0's logit is `10 * mean_c x[c, y, x]` for one pixel,
/// class 1's is 0. The `input` layer is the image itself.
#[derive(Debug, Clone)]
pub struct PixelProbeModel {
    y: usize,
    x: usize,
}

impl PixelProbeModel {
    pub const GAIN: f64 = 10.0;

    pub fn new(y: usize, x: usize) -> Self {
        Self { y, x }
    }
}

impl ModelBackend for PixelProbeModel {
    fn model_id(&self) -> &str {
        "pixel-probe"
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn layer_names(&self) -> Vec<String> {
        vec!["input".into()]
    }

    fn forward(&self, image: &ImageRgb) -> Result<Forward> {
        let mean: f64 = image.pixel(self.y, self.x).iter().map(|&v| v as f64).sum::<f64>() / 3.0;
        Forward::from_logits(vec![Self::GAIN * mean, 0.0])
    }

    fn activations(&self, image: &ImageRgb, layer: &str) -> Result<FeatureStack> {
        if layer != "input" {
            return Err(unknown(layer));
        }
        Ok(FeatureStack::from_image(image))
    }

    fn grad_wrt_activations(&self, image: &ImageRgb, class_index: usize, layer: &str) -> Result<LayerGradient> {
        let activation = self.activations(image, layer)?;
        let g = self.grad_wrt_input(image, class_index)?;
        let (h, w) = image.dims();
        let data = g.iter().flat_map(|p| p.values().to_vec()).collect();
        Ok(LayerGradient {
            layer: layer.into(),
            activation,
            gradient: FeatureStack::from_vec(3, h, w, data)?,
        })
    }

    fn grad_wrt_input(&self, image: &ImageRgb, class_index: usize) -> Result<InputGradient> {
        check(class_index, 2)?;
        let mut g = zero_input_gradient(image);
        if class_index == 0 {
            for plane in g.iter_mut() {
                plane.set(self.y, self.x, Self::GAIN / 3.0);
            }
        }
        Ok(g)
    }
}

/// Linear head over the first `d` flattened pixel values (channel-major);
/// layer `feat` is that vector and its gradient is the class row.
#[derive(Debug, Clone)]
pub struct LinearFeatureModel {
    rows: Vec<Vec<f64>>,
}

impl LinearFeatureModel {
    pub fn new(rows: Vec<Vec<f64>>) -> Self {
        assert!(!rows.is_empty(), "at least one class row");
        Self { rows }
    }

    fn features(&self, image: &ImageRgb) -> Result<Vec<f64>> {
        let d = self.rows[0].len();
        let flat: Vec<f64> = image.planes().iter().flatten().map(|&v| v as f64).take(d).collect();
        if flat.len() < d {
            return Err(Error::LengthMismatch { expected: d, actual: flat.len() });
        }
        Ok(flat)
    }
}

impl ModelBackend for LinearFeatureModel {
    fn model_id(&self) -> &str {
        "linear-feature"
    }

    fn num_classes(&self) -> usize {
        self.rows.len()
    }

    fn layer_names(&self) -> Vec<String> {
        vec!["feat".into()]
    }

    fn forward(&self, image: &ImageRgb) -> Result<Forward> {
        let f = self.features(image)?;
        Forward::from_logits(self.rows.iter().map(|r| r.iter().zip(&f).map(|(a, b)| a * b).sum()).collect())
    }

    fn activations(&self, image: &ImageRgb, layer: &str) -> Result<FeatureStack> {
        if layer != "feat" {
            return Err(unknown(layer));
        }
        Ok(FeatureStack::vector(self.features(image)?))
    }

    fn grad_wrt_activations(&self, image: &ImageRgb, class_index: usize, layer: &str) -> Result<LayerGradient> {
        check(class_index, self.rows.len())?;
        Ok(LayerGradient {
            layer: layer.into(),
            activation: self.activations(image, layer)?,
            gradient: FeatureStack::vector(self.rows[class_index].clone()),
        })
    }

    fn grad_wrt_input(&self, image: &ImageRgb, class_index: usize) -> Result<InputGradient> {
        check(class_index, self.rows.len())?;
        let (h, w) = image.dims();
        let mut flat = self.rows[class_index].clone();
        flat.resize(3 * h * w, 0.0);
        let plane = |c: usize| Grid2D::new(h, w, flat[c * h * w..(c + 1) * h * w].to_vec());
        Ok([plane(0)?, plane(1)?, plane(2)?])
    }
}

/// Class-0 logit `gain * <u, phi> + curvature / 2 * |phi - <u, phi> u|^2`
/// over centred pixels `phi = x - 0.5`; class 1 is fixed at 0. The
/// gradient along the concept direction `u` is always `gain`, while the
/// orthogonal part varies with the input, so random directions score
/// near one half.
#[derive(Debug, Clone)]
pub struct ConceptProbeModel {
    direction: Vec<f64>,
    gain: f64,
    curvature: f64,
}

impl ConceptProbeModel {
    pub fn new(direction: Vec<f64>, gain: f64, curvature: f64) -> Self {
        Self { direction, gain, curvature }
    }

    fn centred(&self, image: &ImageRgb) -> Result<Vec<f64>> {
        let phi: Vec<f64> = image.planes().iter().flatten().map(|&v| v as f64 - 0.5).collect();
        if phi.len() != self.direction.len() {
            return Err(Error::LengthMismatch { expected: self.direction.len(), actual: phi.len() });
        }
        Ok(phi)
    }

    fn split(&self, phi: &[f64]) -> (f64, Vec<f64>) {
        let along: f64 = phi.iter().zip(&self.direction).map(|(a, b)| a * b).sum();
        let ortho = phi.iter().zip(&self.direction).map(|(p, u)| p - along * u).collect();
        (along, ortho)
    }

    fn gradient(&self, image: &ImageRgb, class_index: usize) -> Result<Vec<f64>> {
        check(class_index, 2)?;
        let phi = self.centred(image)?;
        if class_index == 1 {
            return Ok(vec![0.0; phi.len()]);
        }
        let (_, ortho) = self.split(&phi);
        Ok(self
            .direction
            .iter()
            .zip(&ortho)
            .map(|(u, o)| self.gain * u + self.curvature * o)
            .collect())
    }
}

impl ModelBackend for ConceptProbeModel {
    fn model_id(&self) -> &str {
        "concept-probe"
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn layer_names(&self) -> Vec<String> {
        vec!["feat".into()]
    }

    fn forward(&self, image: &ImageRgb) -> Result<Forward> {
        let (along, ortho) = self.split(&self.centred(image)?);
        let sq: f64 = ortho.iter().map(|v| v * v).sum();
        Forward::from_logits(vec![self.gain * along + 0.5 * self.curvature * sq, 0.0])
    }

    fn activations(&self, image: &ImageRgb, layer: &str) -> Result<FeatureStack> {
        if layer != "feat" {
            return Err(unknown(layer));
        }
        let (h, w) = image.dims();
        FeatureStack::from_vec(3, h, w, self.centred(image)?)
    }

    fn grad_wrt_activations(&self, image: &ImageRgb, class_index: usize, layer: &str) -> Result<LayerGradient> {
        let activation = self.activations(image, layer)?;
        let (h, w) = image.dims();
        Ok(LayerGradient {
            layer: layer.into(),
            activation,
            gradient: FeatureStack::from_vec(3, h, w, self.gradient(image, class_index)?)?,
        })
    }

    fn grad_wrt_input(&self, image: &ImageRgb, class_index: usize) -> Result<InputGradient> {
        let g = self.gradient(image, class_index)?;
        let (h, w) = image.dims();
        let plane = |c: usize| Grid2D::new(h, w, g[c * h * w..(c + 1) * h * w].to_vec());
        Ok([plane(0)?, plane(1)?, plane(2)?])
    }
}

/// Forwards to an inner backend while counting forward and gradient calls.
pub struct CountingModel<M> {
    inner: M,
    forwards: AtomicUsize,
    gradients: AtomicUsize,
}

impl<M: ModelBackend> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            forwards: AtomicUsize::new(0),
            gradients: AtomicUsize::new(0),
        }
    }

    pub fn forward_calls(&self) -> usize {
        self.forwards.load(Ordering::SeqCst)
    }

    pub fn gradient_calls(&self) -> usize {
        self.gradients.load(Ordering::SeqCst)
    }

    fn bump_grad(&self) {
        self.gradients.fetch_add(1, Ordering::SeqCst);
    }
}

impl<M: ModelBackend> ModelBackend for CountingModel<M> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn kind(&self) -> ModelKind {
        self.inner.kind()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn layer_names(&self) -> Vec<String> {
        self.inner.layer_names()
    }

    fn forward(&self, image: &ImageRgb) -> Result<Forward> {
        self.forwards.fetch_add(1, Ordering::SeqCst);
        self.inner.forward(image)
    }

    fn activations(&self, image: &ImageRgb, layer: &str) -> Result<FeatureStack> {
        self.inner.activations(image, layer)
    }

    fn grad_wrt_activations(&self, image: &ImageRgb, class_index: usize, layer: &str) -> Result<LayerGradient> {
        self.bump_grad();
        self.inner.grad_wrt_activations(image, class_index, layer)
    }

    fn grad_wrt_input(&self, image: &ImageRgb, class_index: usize) -> Result<InputGradient> {
        self.bump_grad();
        self.inner.grad_wrt_input(image, class_index)
    }

    fn grad_wrt_biases(&self, image: &ImageRgb, class_index: usize) -> Result<Vec<BiasGradient>> {
        self.bump_grad();
        self.inner.grad_wrt_biases(image, class_index)
    }
}
