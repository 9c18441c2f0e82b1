//! Combining attribution maps: fixed-weight averages within and across
//! model streams, per-method weighted fusion, and per-pixel attention gating.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{binarize, iou_binary, normalize01, Grid2D, ThresholdRule};
use crate::saliency::{Method, SaliencyMap};

/// Per-pixel gate sums must equal one within this tolerance.
pub const GATE_SUM_TOL: f64 = 1e-6;

fn same_dims(maps: &[&Grid2D]) -> Result<(usize, usize)> {
    let dims = maps.first().ok_or(Error::EmptyInput("saliency maps"))?.dims();
    for m in maps {
        if m.dims() != dims {
            return Err(Error::DimMismatch {
                expected: dims,
                actual: m.dims(),
            });
        }
    }
    Ok(dims)
}

fn normalized_weights(w: &[f64]) -> Result<Vec<f64>> {
    if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::InvalidArgument("fusion weights must be finite and non-negative".into()));
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("fusion weights sum to zero".into()));
    }
    Ok(w.iter().map(|x| x / total).collect())
}

/// `normalize01(sum_i w_i * m_i)`.
fn weighted_sum(maps: &[&Grid2D], w: &[f64]) -> Result<Grid2D> {
    let (h, wd) = same_dims(maps)?;
    let mut acc = vec![0.0; h * wd];
    for (m, &wi) in maps.iter().zip(w) {
        if wi == 0.0 {
            continue;
        }
        for (a, v) in acc.iter_mut().zip(m.values()) {
            *a += wi * v;
        }
    }
    Ok(normalize01(&Grid2D::new(h, wd, acc)?))
}

/// Averages one model's Grad-CAM, RISE and FullGrad maps. `weights` are in
/// that order and default to uniform.
pub fn fuse_intra_model(
    gradcam: &SaliencyMap,
    rise: &SaliencyMap,
    fullgrad: &SaliencyMap,
    weights: Option<[f64; 3]>,
) -> Result<SaliencyMap> {
    for m in [rise, fullgrad] {
        if m.model_id != gradcam.model_id {
            return Err(Error::InvalidArgument(format!(
                "intra-model fusion mixes models {} and {}",
                gradcam.model_id, m.model_id
            )));
        }
    }
    let w = normalized_weights(&weights.unwrap_or([1.0; 3]))?;
    let grid = weighted_sum(&[&gradcam.grid, &rise.grid, &fullgrad.grid], &w)?;
    Ok(SaliencyMap::new(grid, Method::FusedIntra, gradcam.model_id.clone(), gradcam.class_index))
}

/// Uniform average across the CNN, ViT and detector streams.
pub fn fuse_inter_model(cnn: &SaliencyMap, vit: &SaliencyMap, yolo: &SaliencyMap) -> Result<SaliencyMap> {
    let grid = weighted_sum(&[&cnn.grid, &vit.grid, &yolo.grid], &[1.0 / 3.0; 3])?;
    let id = format!("{}+{}+{}", cnn.model_id, vit.model_id, yolo.model_id);
    Ok(SaliencyMap::new(grid, Method::FusedInter, id, cnn.class_index))
}

/// Per-method fusion weights over [`Method::ATTRIBUTION`], summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodWeights([f64; 4]);

impl MethodWeights {
    /// Normalizes raw non-negative weights given in [`Method::ATTRIBUTION`]
    /// order.
    pub fn new(raw: [f64; 4]) -> Result<Self> {
        let w = normalized_weights(&raw)?;
        Ok(Self([w[0], w[1], w[2], w[3]]))
    }

    pub fn uniform() -> Self {
        Self([0.25; 4])
    }

    pub fn one_hot(method: Method) -> Result<Self> {
        let i = Self::slot(method)?;
        let mut w = [0.0; 4];
        w[i] = 1.0;
        Ok(Self(w))
    }

    fn slot(method: Method) -> Result<usize> {
        Method::ATTRIBUTION
            .iter()
            .position(|&m| m == method)
            .ok_or_else(|| Error::InvalidArgument(format!("{} is not an attribution method", method.as_str())))
    }

    pub fn get(&self, method: Method) -> f64 {
        Self::slot(method).map(|i| self.0[i]).unwrap_or(0.0)
    }

    pub fn as_array(&self) -> [f64; 4] {
        self.0
    }

    /// Scales the RISE weight by an alignment factor in `[0, 1]` and
    /// renormalizes.
    pub fn with_rise_alignment(&self, alignment: f64) -> Result<Self> {
        let mut raw = self.0;
        raw[2] *= alignment.clamp(0.0, 1.0);
        Self::new(raw)
    }
}

impl Default for MethodWeights {
    fn default() -> Self {
        Self::uniform()
    }
}

/// `normalize01(sum_m lambda_m * map_m)`. Every method with a positive
/// weight must be present among `maps`.
pub fn fuse_weighted(maps: &[SaliencyMap], weights: &MethodWeights) -> Result<SaliencyMap> {
    let mut grids = Vec::new();
    let mut w = Vec::new();
    for method in Method::ATTRIBUTION {
        let lambda = weights.get(method);
        if lambda == 0.0 {
            continue;
        }
        let map = maps
            .iter()
            .find(|m| m.method == method)
            .ok_or_else(|| Error::MissingMethod(method.as_str().into()))?;
        grids.push(&map.grid);
        w.push(lambda);
    }
    let first = maps.iter().find(|m| weights.get(m.method) > 0.0).expect("weights sum to one");
    let grid = weighted_sum(&grids, &w)?;
    Ok(SaliencyMap::new(grid, Method::FusedWeighted, first.model_id.clone(), first.class_index))
}

/// Per-pixel gates, one plane per fused map, summing to one at every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGates {
    gates: Vec<Grid2D>,
}

impl AttentionGates {
    pub fn new(gates: Vec<Grid2D>) -> Result<Self> {
        let refs: Vec<&Grid2D> = gates.iter().collect();
        let (h, w) = same_dims(&refs)?;
        for p in 0..h * w {
            let mut total = 0.0;
            for g in &gates {
                let v = g.values()[p];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::GateSumViolation(p));
                }
                total += v;
            }
            if (total - 1.0).abs() > GATE_SUM_TOL {
                return Err(Error::GateSumViolation(p));
            }
        }
        Ok(Self { gates })
    }

    pub fn uniform(n: usize, height: usize, width: usize) -> Self {
        Self {
            gates: vec![Grid2D::filled(height, width, 1.0 / n as f64); n],
        }
    }

    pub fn gates(&self) -> &[Grid2D] {
        &self.gates
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }
}

/// Gates from a per-pixel softmax over map magnitudes at `temperature`.
pub fn attention_gates(maps: &[&Grid2D], temperature: f64) -> Result<AttentionGates> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument("gate temperature must be positive".into()));
    }
    let (h, w) = same_dims(maps)?;
    let mut gates = vec![vec![0.0; h * w]; maps.len()];
    let mut logits = vec![0.0; maps.len()];
    for p in 0..h * w {
        for (l, m) in logits.iter_mut().zip(maps) {
            *l = m.values()[p].abs() / temperature;
        }
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
        for (g, l) in gates.iter_mut().zip(&logits) {
            g[p] = (l - top).exp() / z;
        }
    }
    let gates = gates
        .into_iter()
        .map(|v| Grid2D::new(h, w, v))
        .collect::<Result<Vec<_>>>()?;
    AttentionGates::new(gates)
}

/// `normalize01(sum_i A_i ⊙ M_i)`.
pub fn fuse_attention_gated(maps: &[SaliencyMap], gates: &AttentionGates) -> Result<SaliencyMap> {
    if maps.len() != gates.len() {
        return Err(Error::LengthMismatch {
            expected: gates.len(),
            actual: maps.len(),
        });
    }
    let mut refs: Vec<&Grid2D> = maps.iter().map(|m| &m.grid).collect();
    refs.extend(gates.gates());
    let (h, w) = same_dims(&refs)?;
    let mut acc = vec![0.0; h * w];
    for (m, g) in maps.iter().zip(gates.gates()) {
        for ((a, v), gv) in acc.iter_mut().zip(m.grid.values()).zip(g.values()) {
            *a += gv * v;
        }
    }
    let first = &maps[0];
    Ok(SaliencyMap::new(
        normalize01(&Grid2D::new(h, w, acc)?),
        Method::FusedGated,
        first.model_id.clone(),
        first.class_index,
    ))
}

/// Result of the weight grid search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub weights: MethodWeights,
    pub mean_iou: f64,
}

/// Grid search over the weight simplex (resolution `1/steps`) for the
/// weights whose fused, binarized maps best match the ground-truth masks on
/// average. Methods absent from any sample keep weight zero; the first best
/// grid point in enumeration order wins.
pub fn calibrate_weights(samples: &[(Vec<SaliencyMap>, Grid2D)], steps: usize, rule: ThresholdRule) -> Result<Calibration> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("calibration samples"));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("calibration needs at least one step".into()));
    }
    let present: Vec<bool> = Method::ATTRIBUTION
        .iter()
        .map(|&m| samples.iter().all(|(maps, _)| maps.iter().any(|s| s.method == m)))
        .collect();
    let mut best: Option<Calibration> = None;
    for a in 0..=steps {
        for b in 0..=steps - a {
            for c in 0..=steps - a - b {
                let d = steps - a - b - c;
                let raw = [a, b, c, d].map(|k| k as f64);
                if raw.iter().zip(&present).any(|(&v, &ok)| v > 0.0 && !ok) {
                    continue;
                }
                let weights = MethodWeights::new(raw)?;
                let mut total = 0.0;
                for (maps, mask) in samples {
                    let fused = fuse_weighted(maps, &weights)?;
                    total += iou_binary(&binarize(&fused.grid, rule), mask)?;
                }
                let mean_iou = total / samples.len() as f64;
                if best.is_none_or(|b| mean_iou > b.mean_iou) {
                    best = Some(Calibration { weights, mean_iou });
                }
            }
        }
    }
    best.ok_or_else(|| Error::MissingMethod("any attribution method".into()))
}
