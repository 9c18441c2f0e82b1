//! Explanation quality metrics and the five-gate decision validator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBackend;
use crate::numeric::{binarize, iou_binary, pairwise_sum, Grid2D, ImageRgb, ProbVector, ThresholdRule};

pub const DEFAULT_STEP: f64 = 0.02;
/// The surrogate splits every image into this many patch rows and columns.
pub const SURROGATE_GRID: usize = 8;
const SURROGATE_RIDGE: f64 = 1e-3;
const SURROGATE_ITERS: usize = 50;

fn paired<A, B>(a: &[A], b: &[B], what: &'static str) -> Result<()> {
    if a.is_empty() {
        return Err(Error::EmptyInput(what));
    }
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// Share of maps whose (first, row-major) argmax lies inside the mask.
pub fn pointing_game(maps: &[&Grid2D], masks: &[&Grid2D]) -> Result<f64> {
    paired(maps, masks, "pointing-game pairs")?;
    let mut hits = 0usize;
    for (m, g) in maps.iter().zip(masks) {
        if m.dims() != g.dims() {
            return Err(Error::DimMismatch {
                expected: g.dims(),
                actual: m.dims(),
            });
        }
        let (y, x) = m.argmax();
        hits += (g.get(y, x) >= 0.5) as usize;
    }
    Ok(hits as f64 / maps.len() as f64)
}

pub fn mean_iou(maps: &[&Grid2D], masks: &[&Grid2D], rule: ThresholdRule) -> Result<f64> {
    paired(maps, masks, "iou pairs")?;
    let ious = maps
        .iter()
        .zip(masks)
        .map(|(m, g)| iou_binary(&binarize(m, rule), g))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&ious) / ious.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    /// Remove the most salient pixels first, replacing them with the
    /// deletion baseline (black).
    Deletion,
    /// Start from the image's mean colour and reveal the most salient
    /// pixels first.
    Insertion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    /// `(fraction perturbed, class probability)`, fractions from 0 to 1.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Trapezoid-rule area under a polyline.
pub fn trapezoid_auc(points: &[(f64, f64)]) -> f64 {
    let parts: Vec<f64> = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .collect();
    pairwise_sum(&parts)
}

/// Pixel order for perturbation: saliency descending, row-major on ties.
fn salience_order(map: &Grid2D) -> Vec<usize> {
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&a, &b| map.values()[b].total_cmp(&map.values()[a]).then(a.cmp(&b)));
    order
}

pub fn perturbation_curve(
    model: &dyn ModelBackend,
    image: &ImageRgb,
    class_index: usize,
    map: &Grid2D,
    mode: PerturbMode,
    step: f64,
) -> Result<Curve> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidArgument(format!("perturbation step {step} outside (0, 1]")));
    }
    if map.dims() != image.dims() {
        return Err(Error::DimMismatch {
            expected: image.dims(),
            actual: map.dims(),
        });
    }
    if class_index >= model.num_classes() {
        return Err(Error::ClassOutOfRange {
            index: class_index,
            num_classes: model.num_classes(),
        });
    }
    let (h, w) = image.dims();
    let total = h * w;
    let order = salience_order(map);
    let steps = (1.0 / step).round().max(1.0) as usize;
    let mut current = match mode {
        PerturbMode::Deletion => image.clone(),
        PerturbMode::Insertion => {
            let mean = image.channel_means().map(|v| v as f32);
            ImageRgb::filled(h, w, mean)
        }
    };
    let mut points = Vec::with_capacity(steps + 1);
    let mut done = 0usize;
    for k in 0..=steps {
        let target = if k == steps { total } else { (k * total + steps / 2) / steps };
        for &p in &order[done..target] {
            let (y, x) = (p / w, p % w);
            let px = match mode {
                PerturbMode::Deletion => [0.0; 3],
                PerturbMode::Insertion => image.pixel(y, x),
            };
            current.set_pixel(y, x, px);
        }
        done = target;
        let prob = model.forward(&current)?.probs.entries()[class_index];
        points.push((k as f64 / steps as f64, prob));
    }
    let auc = trapezoid_auc(&points);
    Ok(Curve { points, auc })
}

/// `2k - 2 LL`.
pub fn aic(k: usize, log_likelihood: f64) -> f64 {
    2.0 * k as f64 - 2.0 * log_likelihood
}

/// `k ln n - 2 LL`. `n` is a sample count but any value `>= 1` is accepted.
pub fn bic(k: usize, n: f64, log_likelihood: f64) -> f64 {
    k as f64 * n.max(1.0).ln() - 2.0 * log_likelihood
}

/// Mean squared distance between each prediction and its one-hot target.
pub fn brier(probs: &[ProbVector], gold: &[usize]) -> Result<f64> {
    paired(probs, gold, "brier samples")?;
    let mut per = Vec::with_capacity(probs.len());
    for (p, &g) in probs.iter().zip(gold) {
        if g >= p.len() {
            return Err(Error::ClassOutOfRange {
                index: g,
                num_classes: p.len(),
            });
        }
        per.push(
            p.entries()
                .iter()
                .enumerate()
                .map(|(c, &q)| (q - (c == g) as u8 as f64).powi(2))
                .sum::<f64>(),
        );
    }
    Ok(pairwise_sum(&per) / per.len() as f64)
}

/// Patch features and targets for the surrogate: the image is cut into an
/// 8x8 grid; each patch contributes its mean saliency and its
/// saliency-weighted mean colour, and is labelled 1 when at least half its
/// pixels lie in `mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchData {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

pub fn surrogate_patches(image: &ImageRgb, map: &Grid2D, mask: &Grid2D) -> Result<PatchData> {
    let (h, w) = image.dims();
    for d in [map.dims(), mask.dims()] {
        if d != (h, w) {
            return Err(Error::DimMismatch { expected: (h, w), actual: d });
        }
    }
    if h < SURROGATE_GRID || w < SURROGATE_GRID {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min: SURROGATE_GRID,
        });
    }
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for py in 0..SURROGATE_GRID {
        for px in 0..SURROGATE_GRID {
            let (y0, y1) = (py * h / SURROGATE_GRID, (py + 1) * h / SURROGATE_GRID);
            let (x0, x1) = (px * w / SURROGATE_GRID, (px + 1) * w / SURROGATE_GRID);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let (mut sal, mut inside) = (0.0, 0.0);
            let mut color = [0.0; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let s = map.get(y, x);
                    sal += s;
                    inside += (mask.get(y, x) >= 0.5) as u8 as f64;
                    for (c, v) in color.iter_mut().zip(image.pixel(y, x)) {
                        *c += s * v as f64;
                    }
                }
            }
            let weighted = color.map(|c| if sal > 0.0 { c / sal } else { 0.0 });
            features.push(vec![sal / n, weighted[0], weighted[1], weighted[2]]);
            targets.push((inside * 2.0 >= n) as u8 as f64);
        }
    }
    Ok(PatchData { features, targets })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateFit {
    /// Intercept first, then one coefficient per feature.
    pub params: Vec<f64>,
    pub log_likelihood: f64,
    /// Parameter count.
    pub k: usize,
    /// Sample count.
    pub n: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli log-likelihood of `targets` under a logistic model.
pub fn logistic_log_likelihood(params: &[f64], features: &[Vec<f64>], targets: &[f64]) -> f64 {
    let terms: Vec<f64> = features
        .iter()
        .zip(targets)
        .map(|(x, &y)| {
            let z = params[0] + x.iter().zip(&params[1..]).map(|(a, b)| a * b).sum::<f64>();
            // log sigma(z) = -softplus(-z), log(1 - sigma(z)) = -softplus(z)
            let softplus = |t: f64| if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
            -(y * softplus(-z) + (1.0 - y) * softplus(z))
        })
        .collect();
    pairwise_sum(&terms)
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Ridge-stabilized logistic regression by Newton's method from zero. The
/// reported likelihood is unpenalized.
pub fn fit_logistic(features: &[Vec<f64>], targets: &[f64]) -> Result<SurrogateFit> {
    paired(features, targets, "surrogate samples")?;
    let d = features[0].len() + 1;
    let design: Vec<Vec<f64>> = features
        .iter()
        .map(|x| std::iter::once(1.0).chain(x.iter().copied()).collect())
        .collect();
    if design.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("surrogate features must be finite and equally sized".into()));
    }
    let mut beta = vec![0.0; d];
    for _ in 0..SURROGATE_ITERS {
        let mut grad: Vec<f64> = beta.iter().map(|b| -SURROGATE_RIDGE * b).collect();
        let mut hess = vec![vec![0.0; d]; d];
        for (i, h) in hess.iter_mut().enumerate() {
            h[i] = SURROGATE_RIDGE;
        }
        for (x, &y) in design.iter().zip(targets) {
            let p = sigmoid(x.iter().zip(&beta).map(|(a, b)| a * b).sum());
            let wgt = p * (1.0 - p);
            for i in 0..d {
                grad[i] += (y - p) * x[i];
                for j in 0..d {
                    hess[i][j] += wgt * x[i] * x[j];
                }
            }
        }
        let Some(delta) = solve(hess, grad) else { break };
        let size: f64 = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        beta.iter_mut().zip(&delta).for_each(|(b, s)| *b += s);
        if size < 1e-10 {
            break;
        }
    }
    let log_likelihood = logistic_log_likelihood(&beta, features, targets);
    Ok(SurrogateFit {
        params: beta,
        log_likelihood,
        k: d,
        n: features.len(),
    })
}

/// Logistic surrogate on the explanation's patch grid.
pub fn surrogate_fit(image: &ImageRgb, map: &Grid2D, mask: &Grid2D) -> Result<SurrogateFit> {
    let data = surrogate_patches(image, map, mask)?;
    fit_logistic(&data.features, &data.targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateThresholds {
    pub aic: f64,
    pub bic: f64,
    pub brier: f64,
    pub confidence: f64,
    pub iou: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        Self {
            aic: 200.0,
            bic: 250.0,
            brier: 0.2,
            confidence: 0.85,
            iou: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub aic: f64,
    pub bic: f64,
    pub brier: f64,
    pub confidence: f64,
    pub iou: f64,
    pub aic_pass: bool,
    pub bic_pass: bool,
    pub brier_pass: bool,
    pub confidence_pass: bool,
    pub iou_pass: bool,
    pub overall: bool,
}

/// AIC, BIC and Brier must fall strictly below their thresholds, confidence
/// must strictly exceed its threshold, and IoU must reach its threshold.
pub fn validate_explanation(aic: f64, bic: f64, brier: f64, confidence: f64, iou: f64, t: &GateThresholds) -> Result<GateReport> {
    if [aic, bic, brier, confidence, iou].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gate metric"));
    }
    let aic_pass = aic < t.aic;
    let bic_pass = bic < t.bic;
    let brier_pass = brier < t.brier;
    let confidence_pass = confidence > t.confidence;
    let iou_pass = iou >= t.iou;
    Ok(GateReport {
        aic,
        bic,
        brier,
        confidence,
        iou,
        aic_pass,
        bic_pass,
        brier_pass,
        confidence_pass,
        iou_pass,
        overall: aic_pass && bic_pass && brier_pass && confidence_pass && iou_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{gen_scene, ConstantModel, PixelProbeModel};
    use crate::labeler::DiseaseLabel;
    use proptest::prelude::*;

    fn g(h: usize, w: usize, v: &[f64]) -> Grid2D {
        Grid2D::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn pointing_examples() {
        let mask = g(1, 3, &[0.0, 1.0, 0.0]);
        assert_eq!(pointing_game(&[&g(1, 3, &[0.1, 0.9, 0.2])], &[&mask]).unwrap(), 1.0);
        assert_eq!(pointing_game(&[&Grid2D::zeros(1, 3)], &[&mask]).unwrap(), 0.0);
        let hit = g(1, 3, &[0.0, 1.0, 0.0]);
        let miss = g(1, 3, &[1.0, 0.0, 0.0]);
        let maps: Vec<&Grid2D> = (0..10).map(|i| if i < 7 { &hit } else { &miss }).collect();
        let masks = vec![&mask; 10];
        assert!((pointing_game(&maps, &masks).unwrap() - 0.7).abs() < 1e-15);
        assert!(pointing_game(&[], &[]).is_err());
    }

    #[test]
    fn miou_examples() {
        let a = g(1, 4, &[1.0, 1.0, 0.0, 0.0]);
        let b = g(1, 4, &[0.0, 0.0, 1.0, 1.0]);
        let c = g(1, 4, &[0.0, 1.0, 1.0, 0.0]);
        let r = ThresholdRule::default();
        assert_eq!(mean_iou(&[&a], &[&a], r).unwrap(), 1.0);
        assert_eq!(mean_iou(&[&a], &[&b], r).unwrap(), 0.0);
        assert!((mean_iou(&[&a, &a], &[&a, &c], r).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(mean_iou(&[], &[], r).is_err());
    }

    #[test]
    fn constant_model_gives_flat_curves() {
        let model = ConstantModel::new(2, 1.0);
        let img = ImageRgb::filled(8, 8, [0.3; 3]);
        let map = Grid2D::from_fn(8, 8, |y, x| (y * 8 + x) as f64);
        for mode in [PerturbMode::Deletion, PerturbMode::Insertion] {
            let c = perturbation_curve(&model, &img, 0, &map, mode, DEFAULT_STEP).unwrap();
            assert_eq!(c.points.len(), 51);
            assert_eq!(c.points[0].0, 0.0);
            assert_eq!(c.points[50].0, 1.0);
            assert!((c.auc - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_probe_curves() {
        let model = PixelProbeModel::new(0, 0);
        let img = ImageRgb::filled(10, 10, [0.8; 3]);
        let map = Grid2D::from_fn(10, 10, |y, x| if (y, x) == (0, 0) { 1.0 } else { 0.1 });
        let del = perturbation_curve(&model, &img, 0, &map, PerturbMode::Deletion, DEFAULT_STEP).unwrap();
        let start = model.forward(&img).unwrap().probs.entries()[0];
        assert_eq!(del.points[0].1, start);
        // the first step removes 2 of 100 pixels, including (0, 0)
        assert!((del.points[1].1 - 0.5).abs() < 1e-12);
        assert!(del.points.windows(2).all(|w| w[1].1 <= w[0].1));
        let ins = perturbation_curve(&model, &img, 0, &map, PerturbMode::Insertion, DEFAULT_STEP).unwrap();
        assert!(del.auc < ins.auc);
        assert!(perturbation_curve(&model, &img, 0, &map, PerturbMode::Deletion, 0.0).is_err());
    }

    #[test]
    fn information_criteria() {
        assert_eq!(aic(0, -3.5), 7.0);
        assert_eq!(bic(1, 1.0, 0.0), 0.0);
        assert!((bic(1, 2f64.exp(), 0.0) - 2.0).abs() < 1e-15);
        assert!((bic(2, 100.0, -10.0) - (2.0 * 100f64.ln() + 20.0)).abs() < 1e-12);
    }

    #[test]
    fn brier_examples() {
        let one = ProbVector::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(brier(&[one.clone()], &[0]).unwrap(), 0.0);
        let half = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(brier(&[half.clone()], &[1]).unwrap(), 0.5);
        let p = ProbVector::new(vec![0.8, 0.2]).unwrap();
        assert!((brier(&[p], &[0]).unwrap() - 0.08).abs() < 1e-15);
        assert_eq!(brier(&[one.clone()], &[1]).unwrap(), 2.0);
        assert!(brier(&[], &[]).is_err());
        assert!(brier(&[one], &[2]).is_err());
    }

    #[test]
    fn surrogate_refit_oracle() {
        let s = gen_scene(DiseaseLabel::YellowSpots, 1);
        let map = s.mask.map(|v| 0.2 + 0.7 * v);
        let fit = surrogate_fit(&s.image, &map, &s.mask).unwrap();
        assert_eq!((fit.k, fit.n), (5, 64));
        let data = surrogate_patches(&s.image, &map, &s.mask).unwrap();
        // recompute the likelihood by direct Bernoulli evaluation
        let mut ll = 0.0;
        for (x, &y) in data.features.iter().zip(&data.targets) {
            let z = fit.params[0] + x.iter().zip(&fit.params[1..]).map(|(a, b)| a * b).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            ll += if y == 1.0 { p.ln() } else { (1.0 - p).ln() };
        }
        assert!((ll - fit.log_likelihood).abs() < 1e-9 * ll.abs().max(1.0));
        assert!((aic(fit.k, fit.log_likelihood) - (10.0 - 2.0 * ll)).abs() < 1e-8);
        // the fit beats the intercept-only baseline
        let pos = data.targets.iter().sum::<f64>() / 64.0;
        let null = 64.0 * (pos * pos.ln() + (1.0 - pos) * (1.0 - pos).ln());
        assert!(fit.log_likelihood >= null - 1e-9);
    }

    #[test]
    fn logistic_fit_recovers_a_slope() {
        let xs: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 / 100.0 - 1.0]).collect();
        let ys: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| ((sigmoid(3.0 * x[0]) * 10.0) as usize > i % 10) as u8 as f64)
            .collect();
        let fit = fit_logistic(&xs, &ys).unwrap();
        assert!((fit.params[1] - 3.0).abs() < 1.0, "{:?}", fit.params);
    }

    #[test]
    fn gate_examples() {
        let t = GateThresholds::default();
        assert!(validate_explanation(150.0, 200.0, 0.1, 0.9, 0.7, &t).unwrap().overall);
        let r = validate_explanation(200.0, 200.0, 0.1, 0.9, 0.7, &t).unwrap();
        assert!(!r.aic_pass && !r.overall);
        let r = validate_explanation(150.0, 200.0, 0.1, 0.85, 0.7, &t).unwrap();
        assert!(!r.confidence_pass && !r.overall);
        assert!(validate_explanation(f64::NAN, 0.0, 0.0, 1.0, 1.0, &t).is_err());
    }

    proptest! {
        #[test]
        fn constant_curve_auc(c in 0.0f64..1.0, n in 2usize..60) {
            let pts: Vec<(f64, f64)> = (0..=n).map(|k| (k as f64 / n as f64, c)).collect();
            prop_assert!((trapezoid_auc(&pts) - c).abs() < 1e-12);
        }

        #[test]
        fn gates_are_monotone(
            a in 150.0f64..250.0, b in 200.0f64..300.0, br in 0.0f64..0.4,
            conf in 0.7f64..1.0, iou in 0.4f64..0.8, which in 0usize..5, amount in 0.0f64..0.2,
        ) {
            let t = GateThresholds::default();
            let before = validate_explanation(a, b, br, conf, iou, &t).unwrap();
            let mut m = [a, b, br, conf, iou];
            match which {
                0 => m[0] -= amount * 100.0,
                1 => m[1] -= amount * 100.0,
                2 => m[2] = (m[2] - amount).max(0.0),
                3 => m[3] = (m[3] + amount).min(1.0),
                _ => m[4] = (m[4] + amount).min(1.0),
            }
            let after = validate_explanation(m[0], m[1], m[2], m[3], m[4], &t).unwrap();
            prop_assert!(!before.overall || after.overall);
        }

        #[test]
        fn brier_range(p in 0.0f64..=1.0, gold in 0usize..2) {
            let v = ProbVector::new(vec![p, 1.0 - p]).unwrap();
            let b = brier(&[v], &[gold]).unwrap();
            prop_assert!((0.0..=2.0).contains(&b));
        }
    }
}
