//! Image preprocessing and classical hand-crafted features: grayscale
//! promotion, resizing, Otsu thresholding, co-occurrence texture, colour
//! histograms, colour moments and Gini impurity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{bilinear_resize, Grid2D, ImageRgb, ProbVector};

/// Classifier input side length.
pub const CLASSIFIER_INPUT_SIDE: usize = 224;
/// Detector input side length.
pub const DETECTOR_INPUT_SIDE: usize = 640;
pub const DEFAULT_GLCM_LEVELS: usize = 8;
/// Guard added to the green mean in the red/green ratio.
pub const RATIO_EPS: f64 = 1e-6;
pub const RATIO_CAP: f64 = 1e6;

/// Replicates a gray plane into three channels. The flag reports whether any
/// value had to be clamped into `[0, 1]`.
pub fn gray_to_rgb(gray: &Grid2D) -> (ImageRgb, bool) {
    let clamped = gray.values().iter().any(|&v| !(0.0..=1.0).contains(&v));
    let plane: Vec<f32> = gray.values().iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    let (h, w) = gray.dims();
    let img = ImageRgb::from_planes(h, w, [plane.clone(), plane.clone(), plane])
        .expect("grid values are finite");
    (img, clamped)
}

pub fn resize_normalize(img: &ImageRgb, h: usize, w: usize) -> Result<ImageRgb> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {h}x{w} has a zero dimension")));
    }
    if img.dims() == (h, w) {
        return Ok(img.clone());
    }
    let planes = [0, 1, 2].map(|c| bilinear_resize(&img.channel_grid(c), h, w));
    let [r, g, b] = planes;
    ImageRgb::from_grids([&r?, &g?, &b?])
}

/// Quantizes `[0, 1]` values onto `levels` evenly spaced codes by rounding.
fn quantize_round(v: f64, levels: usize) -> usize {
    ((v.clamp(0.0, 1.0) * (levels - 1) as f64).round() as usize).min(levels - 1)
}

/// Otsu's threshold over a `levels`-bin histogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OtsuThreshold {
    /// Highest level assigned to the lower class.
    pub level: usize,
    pub levels: usize,
    /// Between-class variance at `level`, in squared level units.
    pub between_class_variance: f64,
}

impl OtsuThreshold {
    /// Threshold on the `[0, 1]` value scale.
    pub fn value(&self) -> f64 {
        self.level as f64 / (self.levels - 1) as f64
    }

    /// Foreground (above-threshold) mask of a gray image.
    pub fn mask(&self, gray: &Grid2D) -> Grid2D {
        gray.map(|v| (quantize_round(v, self.levels) > self.level) as u8 as f64)
    }
}

pub fn gray_histogram(gray: &Grid2D, levels: usize) -> Vec<u64> {
    let mut hist = vec![0u64; levels];
    for &v in gray.values() {
        hist[quantize_round(v, levels)] += 1;
    }
    hist
}

/// Maximizes `w1 w2 (mu1 - mu2)^2` over thresholds `t` (lower class is
/// `<= t`). Comparison is exact integer arithmetic, so ties resolve to the
/// smallest threshold deterministically.
pub fn otsu_threshold(gray: &Grid2D, levels: usize) -> Result<OtsuThreshold> {
    if levels < 2 {
        return Err(Error::InvalidArgument("otsu needs at least 2 levels".into()));
    }
    let hist = gray_histogram(gray, levels);
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let n: u64 = hist.iter().sum();
    let s: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    // between-class variance = (s1 n2 - s2 n1)^2 / (N^2 n1 n2); compare the
    // numerator/denominator pairs by cross multiplication.
    let mut best: Option<(usize, u128, u128)> = None;
    let (mut n1, mut s1) = (0u64, 0u64);
    for t in 0..levels - 1 {
        n1 += hist[t];
        s1 += t as u64 * hist[t];
        let n2 = n - n1;
        if n1 == 0 || n2 == 0 {
            continue;
        }
        let s2 = s - s1;
        let diff = (s1 as i128 * n2 as i128 - s2 as i128 * n1 as i128).unsigned_abs();
        let num = diff * diff;
        let den = n1 as u128 * n2 as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => greater_ratio(num, den, bn, bd),
        };
        if better {
            best = Some((t, num, den));
        }
    }
    let (level, num, den) = best.expect("two non-empty bins give a valid split");
    Ok(OtsuThreshold {
        level,
        levels,
        between_class_variance: num as f64 / den as f64 / (n as f64 * n as f64),
    })
}

/// `a/b > c/d` for non-negative values, exactly when the products fit.
fn greater_ratio(a: u128, b: u128, c: u128, d: u128) -> bool {
    match (a.checked_mul(d), c.checked_mul(b)) {
        (Some(l), Some(r)) => l > r,
        _ => (a as f64 / b as f64) > (c as f64 / d as f64),
    }
}

/// Co-occurrence direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GlcmAngle {
    Deg0,
    Deg45,
    Deg90,
    Deg135,
}

impl GlcmAngle {
    pub const ALL: [GlcmAngle; 4] = [GlcmAngle::Deg0, GlcmAngle::Deg45, GlcmAngle::Deg90, GlcmAngle::Deg135];

    /// `(dy, dx)` for a unit step; rows grow downward.
    fn step(self) -> (isize, isize) {
        match self {
            GlcmAngle::Deg0 => (0, 1),
            GlcmAngle::Deg45 => (-1, 1),
            GlcmAngle::Deg90 => (-1, 0),
            GlcmAngle::Deg135 => (-1, -1),
        }
    }

    pub fn degrees(self) -> u32 {
        match self {
            GlcmAngle::Deg0 => 0,
            GlcmAngle::Deg45 => 45,
            GlcmAngle::Deg90 => 90,
            GlcmAngle::Deg135 => 135,
        }
    }
}

/// Normalized symmetric gray-level co-occurrence matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GlcmMatrix {
    levels: usize,
    distance: usize,
    angle: GlcmAngle,
    probs: Vec<f64>,
}

impl GlcmMatrix {
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn distance(&self) -> usize {
        self.distance
    }

    pub fn angle(&self) -> GlcmAngle {
        self.angle
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.probs[i * self.levels + j]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        (0..self.levels)
            .map(|i| (0..self.levels).map(|j| self.get(i, j)).sum())
            .collect()
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        (0..self.levels)
            .map(|j| (0..self.levels).map(|i| self.get(i, j)).sum())
            .collect()
    }
}

/// Quantizes `[0, 1]` values into `levels` equal-width bins.
pub fn quantize_bins(v: f64, levels: usize) -> usize {
    ((v.clamp(0.0, 1.0) * levels as f64) as usize).min(levels - 1)
}

pub fn glcm(gray: &Grid2D, distance: usize, angle: GlcmAngle, levels: usize) -> Result<GlcmMatrix> {
    if distance == 0 {
        return Err(Error::InvalidArgument("glcm distance must be >= 1".into()));
    }
    if levels < 2 {
        return Err(Error::InvalidArgument("glcm needs at least 2 levels".into()));
    }
    let (h, w) = gray.dims();
    let (sy, sx) = angle.step();
    let (dy, dx) = (sy * distance as isize, sx * distance as isize);
    let q: Vec<usize> = gray.values().iter().map(|&v| quantize_bins(v, levels)).collect();
    let mut counts = vec![0u64; levels * levels];
    let mut pairs = 0u64;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (ny, nx) = (y + dy, x + dx);
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            let a = q[y as usize * w + x as usize];
            let b = q[ny as usize * w + nx as usize];
            counts[a * levels + b] += 1;
            counts[b * levels + a] += 1;
            pairs += 2;
        }
    }
    if pairs == 0 {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} smaller than glcm offset ({dy}, {dx})"
        )));
    }
    Ok(GlcmMatrix {
        levels,
        distance,
        angle,
        probs: counts.iter().map(|&c| c as f64 / pairs as f64).collect(),
    })
}

pub fn glcm_contrast(m: &GlcmMatrix) -> f64 {
    let mut acc = 0.0;
    for i in 0..m.levels {
        for j in 0..m.levels {
            let d = i as f64 - j as f64;
            acc += d * d * m.get(i, j);
        }
    }
    acc
}

/// Mean contrast over the four standard angles at distance 1.
pub fn mean_glcm_contrast(gray: &Grid2D, levels: usize) -> Result<f64> {
    let mut total = 0.0;
    for angle in GlcmAngle::ALL {
        total += glcm_contrast(&glcm(gray, 1, angle, levels)?);
    }
    Ok(total / 4.0)
}

/// Per-channel normalized bin frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorHistogram {
    pub bins: usize,
    pub channels: [Vec<f64>; 3],
}

pub fn color_histogram(img: &ImageRgb, bins: usize) -> Result<ColorHistogram> {
    if bins < 2 {
        return Err(Error::InvalidArgument("histogram needs at least 2 bins".into()));
    }
    let n = (img.height() * img.width()) as f64;
    let channels = [0, 1, 2].map(|c| {
        let mut counts = vec![0u64; bins];
        for &v in img.plane(c) {
            counts[quantize_bins(v as f64, bins)] += 1;
        }
        counts.into_iter().map(|k| k as f64 / n).collect()
    });
    Ok(ColorHistogram { bins, channels })
}

/// `1 - sum p_i^2`.
pub fn gini_impurity(p: &ProbVector) -> f64 {
    1.0 - p.entries().iter().map(|q| q * q).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelMoments {
    pub mean: f64,
    pub stddev: f64,
    pub skewness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub channels: [ChannelMoments; 3],
    /// `mean(R) / (mean(G) + eps)`, capped at [`RATIO_CAP`].
    pub red_green_ratio: f64,
}

/// Population colour moments. A zero-variance channel has skewness 0.
pub fn channel_stats(img: &ImageRgb) -> ChannelStats {
    let channels = [0, 1, 2].map(|c| {
        let v: Vec<f64> = img.plane(c).iter().map(|&x| x as f64).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let m2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let m3 = v.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
        let stddev = m2.sqrt();
        let skewness = if stddev > 1e-12 { m3 / stddev.powi(3) } else { 0.0 };
        ChannelMoments { mean, stddev, skewness }
    });
    let ratio = (channels[0].mean / (channels[1].mean + RATIO_EPS)).min(RATIO_CAP);
    ChannelStats {
        channels,
        red_green_ratio: ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray(h: usize, w: usize, v: &[f64]) -> Grid2D {
        Grid2D::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn gray_promotion() {
        let g = Grid2D::filled(3, 4, 0.5);
        let (img, clamped) = gray_to_rgb(&g);
        assert!(!clamped);
        assert!(img.plane(0).iter().all(|&v| v == 0.5));
        assert_eq!(img.plane(0), img.plane(1));
        assert_eq!(img.plane(1), img.plane(2));
        let g = Grid2D::from_fn(4, 4, |y, x| (y * 4 + x) as f64 / 15.0);
        let (img, _) = gray_to_rgb(&g);
        let back = img.luminance_mean();
        for (a, b) in back.values().iter().zip(g.values()) {
            assert_abs_diff_eq!(*a, (*b as f32) as f64, epsilon = 1e-12);
        }
        let (img, clamped) = gray_to_rgb(&gray(1, 2, &[-0.5, 1.5]));
        assert!(clamped);
        assert_eq!(img.pixel(0, 0), [0.0; 3]);
        assert_eq!(img.pixel(0, 1), [1.0; 3]);
    }

    #[test]
    fn resize_targets() {
        let img = ImageRgb::from_fn(10, 12, |y, x| [y as f32 / 10.0, x as f32 / 12.0, 0.5]);
        assert_eq!(resize_normalize(&img, 10, 12).unwrap(), img);
        let r = resize_normalize(&img, CLASSIFIER_INPUT_SIDE, CLASSIFIER_INPUT_SIDE).unwrap();
        assert_eq!(r.dims(), (224, 224));
        let d = resize_normalize(&img, DETECTOR_INPUT_SIDE, DETECTOR_INPUT_SIDE).unwrap();
        assert_eq!(d.dims(), (640, 640));
        assert!(d.plane(0).iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(resize_normalize(&img, 0, 4).is_err());
    }

    fn brute_otsu(gray: &Grid2D) -> usize {
        let q: Vec<usize> = gray.values().iter().map(|&v| quantize_round(v, 256)).collect();
        let n = q.len() as f64;
        let mut best = (0usize, -1.0f64);
        for t in 0..255 {
            let lo: Vec<f64> = q.iter().filter(|&&v| v <= t).map(|&v| v as f64).collect();
            let hi: Vec<f64> = q.iter().filter(|&&v| v > t).map(|&v| v as f64).collect();
            if lo.is_empty() || hi.is_empty() {
                continue;
            }
            let m1 = lo.iter().sum::<f64>() / lo.len() as f64;
            let m2 = hi.iter().sum::<f64>() / hi.len() as f64;
            let var = (lo.len() as f64 / n) * (hi.len() as f64 / n) * (m1 - m2).powi(2);
            if var > best.1 * (1.0 + 1e-12) {
                best = (t, var);
            }
        }
        best.0
    }

    #[test]
    fn otsu_bimodal_splits_classes() {
        let g = Grid2D::from_fn(4, 4, |y, _| if y < 2 { 0.0 } else { 1.0 });
        let t = otsu_threshold(&g, 256).unwrap();
        assert_eq!(t.level, 0);
        let m = t.mask(&g);
        assert_eq!(m.values(), g.values());
    }

    #[test]
    fn otsu_matches_scan_and_ignores_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut v: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
            let g = gray(8, 8, &v);
            let t = otsu_threshold(&g, 256).unwrap();
            assert_eq!(t.level, brute_otsu(&g));
            v.shuffle(&mut rng);
            assert_eq!(otsu_threshold(&gray(8, 8, &v), 256).unwrap().level, t.level);
        }
    }

    #[test]
    fn otsu_constant_image_is_degenerate() {
        assert_eq!(
            otsu_threshold(&Grid2D::filled(3, 3, 0.4), 256).unwrap_err(),
            Error::DegenerateHistogram
        );
    }

    #[test]
    fn glcm_examples() {
        let m = glcm(&Grid2D::filled(5, 5, 0.3), 1, GlcmAngle::Deg0, 8).unwrap();
        let q = quantize_bins(0.3, 8);
        assert_eq!(m.get(q, q), 1.0);
        assert_abs_diff_eq!(m.probs().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_eq!(glcm_contrast(&m), 0.0);

        let checker = gray(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let m = glcm(&checker, 1, GlcmAngle::Deg0, 2).unwrap();
        assert_eq!(m.get(0, 1), 0.5);
        assert_eq!(m.get(1, 0), 0.5);
        assert_eq!(m.get(0, 0) + m.get(1, 1), 0.0);
        assert_eq!(glcm_contrast(&m), 1.0);
    }

    #[test]
    fn glcm_rejects_small_images_and_bad_args() {
        assert!(glcm(&Grid2D::filled(2, 2, 0.1), 2, GlcmAngle::Deg0, 8).is_err());
        assert!(glcm(&Grid2D::filled(4, 4, 0.1), 0, GlcmAngle::Deg0, 8).is_err());
        assert!(glcm(&Grid2D::filled(4, 4, 0.1), 1, GlcmAngle::Deg0, 1).is_err());
    }

    #[test]
    fn histogram_examples() {
        let h = color_histogram(&ImageRgb::filled(4, 4, [0.9, 0.1, 0.5]), 4).unwrap();
        for c in 0..3 {
            assert_eq!(h.channels[c].iter().filter(|&&p| p == 1.0).count(), 1);
        }
        let img = ImageRgb::from_fn(4, 4, |_, x| if x < 2 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] });
        let h = color_histogram(&img, 2).unwrap();
        assert_eq!(h.channels[0], vec![0.5, 0.5]);
        assert_eq!(h.channels[1], vec![0.5, 0.5]);
        assert_eq!(h.channels[2], vec![1.0, 0.0]);
    }

    #[test]
    fn gini_examples() {
        let p = ProbVector::new(vec![0.6, 0.3, 0.1]).unwrap();
        assert_abs_diff_eq!(gini_impurity(&p), 0.54, epsilon = 1e-12);
        assert_eq!(gini_impurity(&ProbVector::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap()), 0.0);
        assert_eq!(gini_impurity(&ProbVector::new(vec![0.25; 4]).unwrap()), 0.75);
        // the arithmetic behind the other worked example is 0.62, not 0.6
        let p = ProbVector::new(vec![0.5, 0.3, 0.2]).unwrap();
        assert_abs_diff_eq!(gini_impurity(&p), 0.62, epsilon = 1e-12);
    }

    #[test]
    fn channel_stats_examples() {
        let s = channel_stats(&ImageRgb::filled(3, 3, [0.4, 0.4, 0.4]));
        for m in s.channels {
            assert_eq!(m.stddev, 0.0);
            assert_eq!(m.skewness, 0.0);
        }
        assert_abs_diff_eq!(s.red_green_ratio, 1.0, epsilon = 1e-5);
        let s = channel_stats(&ImageRgb::filled(3, 3, [1.0, 0.0, 0.0]));
        assert_eq!(s.red_green_ratio, RATIO_CAP);
        let img = ImageRgb::from_fn(1, 4, |_, x| [[0.0f32, 0.0, 0.0, 1.0][x], 0.5, 0.5]);
        let s = channel_stats(&img);
        assert_abs_diff_eq!(s.channels[0].mean, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s.channels[0].stddev, 0.1875f64.sqrt(), epsilon = 1e-12);
        assert!(s.channels[0].skewness > 0.0);
    }

    proptest! {
        #[test]
        fn glcm_marginals_symmetric_under_reversal(v in prop::collection::vec(0.0f64..1.0, 36)) {
            let g = gray(6, 6, &v);
            let flipped = Grid2D::from_fn(6, 6, |y, x| g.get(5 - y, 5 - x));
            for angle in GlcmAngle::ALL {
                let a = glcm(&g, 1, angle, 8).unwrap();
                let b = glcm(&flipped, 1, angle, 8).unwrap();
                prop_assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (x, y) in a.row_marginal().iter().zip(b.row_marginal()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
                for (x, y) in a.row_marginal().iter().zip(a.col_marginal()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
                prop_assert!(glcm_contrast(&a) >= 0.0);
            }
        }

        #[test]
        fn gini_max_at_uniform(raw in prop::collection::vec(0.001f64..1.0, 2..8)) {
            let s: f64 = raw.iter().sum();
            let p = ProbVector::new(raw.iter().map(|x| x / s).collect()).unwrap();
            let c = raw.len() as f64;
            prop_assert!(gini_impurity(&p) <= 1.0 - 1.0 / c + 1e-12);
        }

        #[test]
        fn histogram_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut px: Vec<[f32; 3]> = (0..30).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let a = ImageRgb::from_fn(5, 6, |y, x| px[y * 6 + x]);
            px.shuffle(&mut rng);
            let b = ImageRgb::from_fn(5, 6, |y, x| px[y * 6 + x]);
            prop_assert_eq!(color_histogram(&a, 8).unwrap(), color_histogram(&b, 8).unwrap());
        }
    }
}
