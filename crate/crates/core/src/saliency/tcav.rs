use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Method, SaliencyMap};
use crate::error::{Error, Result};
use crate::model::ModelBackend;
use crate::numeric::{Grid2D, ImageRgb};

pub const MIN_CONCEPT_SET: usize = 10;
pub const CAV_EPOCHS: usize = 200;
pub const CAV_LEARNING_RATE: f64 = 0.01;
const HELD_OUT_FRACTION: f64 = 0.2;

/// Positive concept examples and random counterexamples.
#[derive(Debug, Clone)]
pub struct ConceptSet {
    positives: Vec<ImageRgb>,
    randoms: Vec<ImageRgb>,
}

impl ConceptSet {
    pub fn new(positives: Vec<ImageRgb>, randoms: Vec<ImageRgb>) -> Result<Self> {
        if positives.len() < MIN_CONCEPT_SET || randoms.len() < MIN_CONCEPT_SET {
            return Err(Error::InvalidArgument(format!(
                "concept sets need at least {MIN_CONCEPT_SET} examples each, got {} and {}",
                positives.len(),
                randoms.len()
            )));
        }
        Ok(Self { positives, randoms })
    }

    pub fn positives(&self) -> &[ImageRgb] {
        &self.positives
    }

    pub fn randoms(&self) -> &[ImageRgb] {
        &self.randoms
    }
}

/// Unit normal of a linear concept-vs-random separator in a layer's
/// flattened feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptActivationVector {
    pub concept_id: String,
    pub layer: String,
    pub direction: Vec<f64>,
    /// Accuracy on the held-out split.
    pub accuracy: f64,
}

impl ConceptActivationVector {
    pub fn negated(&self) -> Self {
        Self {
            direction: self.direction.iter().map(|v| -v).collect(),
            ..self.clone()
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Trains a logistic separator by full-batch gradient descent on z-scored
/// features (fixed epochs and learning rate, seeded init and 80/20 split),
/// then maps the weights back to raw feature space and unit-normalizes them.
pub fn train_cav_from_features(
    concept_id: &str,
    layer: &str,
    positives: &[Vec<f64>],
    randoms: &[Vec<f64>],
    seed: u64,
) -> Result<ConceptActivationVector> {
    if positives.len() < MIN_CONCEPT_SET || randoms.len() < MIN_CONCEPT_SET {
        return Err(Error::InvalidArgument(format!(
            "concept sets need at least {MIN_CONCEPT_SET} examples each"
        )));
    }
    let dim = positives[0].len();
    if let Some(bad) = positives.iter().chain(randoms).find(|v| v.len() != dim) {
        return Err(Error::LengthMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = |n: usize, rng: &mut ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let held = ((n as f64 * HELD_OUT_FRACTION).round() as usize).clamp(1, n - 1);
        let test = idx.split_off(n - held);
        (idx, test)
    };
    let (pos_train, pos_test) = split(positives.len(), &mut rng);
    let (neg_train, neg_test) = split(randoms.len(), &mut rng);
    let train: Vec<(&[f64], f64)> = pos_train
        .iter()
        .map(|&i| (positives[i].as_slice(), 1.0))
        .chain(neg_train.iter().map(|&i| (randoms[i].as_slice(), 0.0)))
        .collect();
    let test: Vec<(&[f64], f64)> = pos_test
        .iter()
        .map(|&i| (positives[i].as_slice(), 1.0))
        .chain(neg_test.iter().map(|&i| (randoms[i].as_slice(), 0.0)))
        .collect();

    let n = train.len() as f64;
    let mut mean = vec![0.0; dim];
    for (x, _) in &train {
        mean.iter_mut().zip(*x).for_each(|(m, v)| *m += v / n);
    }
    let mut std = vec![0.0; dim];
    for (x, _) in &train {
        std.iter_mut()
            .zip(x.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
    }
    // zero-variance features carry no signal and keep a zero weight
    let inv_std: Vec<f64> = std
        .iter()
        .map(|&s| if s > 1e-24 { 1.0 / s.sqrt() } else { 0.0 })
        .collect();
    if inv_std.iter().all(|&s| s == 0.0) {
        return Err(Error::DegenerateFeatures);
    }
    let standardize = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(&mean)
            .zip(&inv_std)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    };
    let z_train: Vec<(Vec<f64>, f64)> = train.iter().map(|(x, y)| (standardize(x), *y)).collect();

    let mut weights: Vec<f64> = (0..dim)
        .map(|j| if inv_std[j] > 0.0 { rng.gen_range(-0.01..0.01) } else { 0.0 })
        .collect();
    let mut bias = 0.0;
    let mut grad = vec![0.0; dim];
    for _ in 0..CAV_EPOCHS {
        grad.fill(0.0);
        let mut grad_b = 0.0;
        for (z, y) in &z_train {
            let p = sigmoid(bias + dot(&weights, z));
            let e = (p - y) / n;
            grad_b += e;
            grad.iter_mut().zip(z).for_each(|(g, v)| *g += e * v);
        }
        weights.iter_mut().zip(&grad).for_each(|(w, g)| *w -= CAV_LEARNING_RATE * g);
        bias -= CAV_LEARNING_RATE * grad_b;
    }

    let correct = test
        .iter()
        .filter(|(x, y)| {
            let p = sigmoid(bias + dot(&weights, &standardize(x)));
            (p >= 0.5) == (*y == 1.0)
        })
        .count();
    let raw: Vec<f64> = weights.iter().zip(&inv_std).map(|(w, s)| w * s).collect();
    let norm = dot(&raw, &raw).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateFeatures);
    }
    Ok(ConceptActivationVector {
        concept_id: concept_id.to_string(),
        layer: layer.to_string(),
        direction: raw.into_iter().map(|v| v / norm).collect(),
        accuracy: correct as f64 / test.len() as f64,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn train_cav(
    model: &dyn ModelBackend,
    layer: &str,
    concept_id: &str,
    concepts: &ConceptSet,
    seed: u64,
) -> Result<ConceptActivationVector> {
    let features = |imgs: &[ImageRgb]| -> Result<Vec<Vec<f64>>> {
        imgs.iter()
            .map(|im| Ok(model.activations(im, layer)?.as_slice().to_vec()))
            .collect()
    };
    let pos = features(concepts.positives())?;
    let neg = features(concepts.randoms())?;
    train_cav_from_features(concept_id, layer, &pos, &neg, seed)
}

/// Directional derivative of the class logit along the CAV.
pub fn tcav_directional(
    model: &dyn ModelBackend,
    image: &ImageRgb,
    class_index: usize,
    cav: &ConceptActivationVector,
) -> Result<f64> {
    let g = model.grad_wrt_activations(image, class_index, &cav.layer)?;
    let grad = g.gradient.as_slice();
    if grad.len() != cav.direction.len() {
        return Err(Error::LengthMismatch {
            expected: cav.direction.len(),
            actual: grad.len(),
        });
    }
    Ok(dot(grad, &cav.direction))
}

/// Fraction of images whose directional derivative is strictly positive.
pub fn tcav_score(
    model: &dyn ModelBackend,
    images: &[ImageRgb],
    class_index: usize,
    cav: &ConceptActivationVector,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyInput("tcav batch"));
    }
    let mut positive = 0usize;
    for im in images {
        if tcav_directional(model, im, class_index, cav)? > 0.0 {
            positive += 1;
        }
    }
    Ok(positive as f64 / images.len() as f64)
}

/// Spatial stand-in for a concept score: the concept mask scaled by it.
pub fn tcav_concept_map(concept_mask: &Grid2D, score: f64, model_id: &str, class_index: usize) -> Result<SaliencyMap> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::InvalidArgument(format!("tcav score {score} outside [0, 1]")));
    }
    let grid = concept_mask.map(|m| if m >= 0.5 { score } else { 0.0 });
    Ok(SaliencyMap::new(grid, Method::TcavConcept, model_id, class_index))
}
