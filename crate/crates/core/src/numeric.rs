//! Dense grids, images and the small set of numeric primitives every other
//! module builds on.
//!
//! All arithmetic is `f64`; images keep their channel planes as `f32`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sum tolerance for [`ProbVector`].
pub const PROB_SUM_TOL: f64 = 1e-6;

/// A dense row-major map of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidGrid(format!("zero dimension {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::LengthMismatch {
                expected: height * width,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Panics if either dimension is zero.
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid2D, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure_same_dims(self, other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        pairwise_sum(&self.values)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Row-major index of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Number of cells with value >= 0.5, i.e. the set size of a binary mask.
    pub fn count_set(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }
}

pub(crate) fn ensure_same_dims(a: &Grid2D, b: &Grid2D) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch {
            expected: a.dims(),
            actual: b.dims(),
        });
    }
    Ok(())
}

/// A three-channel image with planes stored as `f32` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    planes: [Vec<f32>; 3],
}

impl ImageRgb {
    /// Builds an image from three planes, clamping every value into `[0, 1]`.
    /// Non-finite values are rejected.
    pub fn from_planes(height: usize, width: usize, planes: [Vec<f32>; 3]) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidGrid(format!("zero dimension {height}x{width}")));
        }
        let mut planes = planes;
        for p in planes.iter_mut() {
            if p.len() != height * width {
                return Err(Error::LengthMismatch {
                    expected: height * width,
                    actual: p.len(),
                });
            }
            for v in p.iter_mut() {
                if !v.is_finite() {
                    return Err(Error::NonFinite("image pixel"));
                }
                *v = v.clamp(0.0, 1.0);
            }
        }
        Ok(Self {
            height,
            width,
            planes,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let n = height * width;
        Self {
            height,
            width,
            planes: rgb.map(|v| vec![v.clamp(0.0, 1.0); n]),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let n = height * width;
        let mut planes = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for c in 0..3 {
                    let v = if px[c].is_finite() { px[c] } else { 0.0 };
                    planes[c].push(v.clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height,
            width,
            planes,
        }
    }

    pub fn from_grids(planes: [&Grid2D; 3]) -> Result<Self> {
        ensure_same_dims(planes[0], planes[1])?;
        ensure_same_dims(planes[0], planes[2])?;
        let (h, w) = planes[0].dims();
        Self::from_planes(
            h,
            w,
            planes.map(|g| g.values().iter().map(|&v| v as f32).collect()),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.planes[c]
    }

    pub fn planes(&self) -> &[Vec<f32>; 3] {
        &self.planes
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.planes[c][y * self.width + x]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = y * self.width + x;
        [self.planes[0][i], self.planes[1][i], self.planes[2][i]]
    }

    pub fn channel_grid(&self, c: usize) -> Grid2D {
        Grid2D {
            height: self.height,
            width: self.width,
            values: self.planes[c].iter().map(|&v| v as f64).collect(),
        }
    }

    /// Per-pixel mean of the three channels.
    pub fn luminance_mean(&self) -> Grid2D {
        Grid2D {
            height: self.height,
            width: self.width,
            values: (0..self.height * self.width)
                .map(|i| {
                    (self.planes[0][i] as f64 + self.planes[1][i] as f64 + self.planes[2][i] as f64)
                        / 3.0
                })
                .collect(),
        }
    }

    /// Pixel-wise product with a mask (broadcast over channels).
    pub fn masked(&self, mask: &Grid2D) -> Result<Self> {
        if mask.dims() != self.dims() {
            return Err(Error::DimMismatch {
                expected: self.dims(),
                actual: mask.dims(),
            });
        }
        let planes = [0, 1, 2].map(|c| {
            self.planes[c]
                .iter()
                .zip(mask.values())
                .map(|(&v, &m)| (v as f64 * m).clamp(0.0, 1.0) as f32)
                .collect()
        });
        Ok(Self {
            height: self.height,
            width: self.width,
            planes,
        })
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = y * self.width + x;
        for c in 0..3 {
            self.planes[c][i] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let n = (self.height * self.width) as f64;
        [0, 1, 2].map(|c| {
            let v: Vec<f64> = self.planes[c].iter().map(|&v| v as f64).collect();
            pairwise_sum(&v) / n
        })
    }
}

/// A probability distribution over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidProbVector("empty".into()));
        }
        if entries
            .iter()
            .any(|&p| !p.is_finite() || !(0.0..=1.0).contains(&p))
        {
            return Err(Error::InvalidProbVector("entry outside [0, 1]".into()));
        }
        let s: f64 = entries.iter().sum();
        if (s - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidProbVector(format!("entries sum to {s}")));
        }
        Ok(Self(entries))
    }

    pub fn entries(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the first largest entry.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }

    /// Difference between the two largest entries; 1.0 for a single class.
    pub fn top2_margin(&self) -> f64 {
        if self.0.len() < 2 {
            return 1.0;
        }
        let mut sorted = self.0.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        sorted[0] - sorted[1]
    }
}

pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogit(i));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / total).collect()))
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &ProbVector) -> f64 {
    -p.0
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * q.ln())
        .sum::<f64>()
}

/// Min-max normalization into `[0, 1]`. Maps whose range is zero (or within
/// rounding noise of zero relative to their magnitude) become all zeros.
pub fn normalize01(g: &Grid2D) -> Grid2D {
    let lo = g.min();
    let hi = g.max();
    let range = hi - lo;
    let scale = hi.abs().max(lo.abs());
    if range <= 1e-12 * scale || range == 0.0 {
        return Grid2D::zeros(g.height, g.width);
    }
    g.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Corner-aligned bilinear resampling.
pub fn bilinear_resize(g: &Grid2D, out_h: usize, out_w: usize) -> Result<Grid2D> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {out_h}x{out_w} has a zero dimension"
        )));
    }
    if g.dims() == (out_h, out_w) {
        return Ok(g.clone());
    }
    let ys: Vec<(usize, usize, f64)> = (0..out_h).map(|y| sample_axis(y, g.height, out_h)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..out_w).map(|x| sample_axis(x, g.width, out_w)).collect();
    let mut values = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = g.get(y0, x0) * (1.0 - fx) + g.get(y0, x1) * fx;
            let bottom = g.get(y1, x0) * (1.0 - fx) + g.get(y1, x1) * fx;
            values.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(Grid2D {
        height: out_h,
        width: out_w,
        values,
    })
}

fn sample_axis(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_in == 1 {
        return (0, 0, 0.0);
    }
    let pos = if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    };
    let i0 = (pos.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, pos - i0 as f64)
}

/// Cosine similarity of two equally sized slices.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormMap);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_flat(a: &Grid2D, b: &Grid2D) -> Result<f64> {
    ensure_same_dims(a, b)?;
    cosine(&a.values, &b.values)
}

/// How a continuous map becomes a binary mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdRule {
    /// Threshold at this fraction of the map maximum; a map with no positive
    /// value yields an empty mask.
    FractionOfMax(f64),
    Absolute(f64),
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::FractionOfMax(0.5)
    }
}

pub fn binarize(g: &Grid2D, rule: ThresholdRule) -> Grid2D {
    let thr = match rule {
        ThresholdRule::FractionOfMax(f) => {
            let m = g.max();
            if m <= 0.0 {
                return Grid2D::zeros(g.height, g.width);
            }
            f * m
        }
        ThresholdRule::Absolute(t) => t,
    };
    g.map(|v| if v >= thr { 1.0 } else { 0.0 })
}

/// Intersection over union of two binary masks; two empty masks score 1.
pub fn iou_binary(a: &Grid2D, b: &Grid2D) -> Result<f64> {
    ensure_same_dims(a, b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (p, q) = (x >= 0.5, y >= 0.5);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Pairwise (tree) summation; the result depends only on the slice order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if v.len() <= LEAF {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let ca: Vec<f64> = ra.iter().map(|r| r - ma).collect();
    let cb: Vec<f64> = rb.iter().map(|r| r - mb).collect();
    cosine(&ca, &cb)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}
