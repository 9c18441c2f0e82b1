//! Decision logic around the maps: interpretability-score method selection,
//! model-to-method assignment, the re-explanation trigger, concept
//! alignment, saliency/concept consistency, drift flagging and pairwise map
//! agreement.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::numeric::{cosine, cosine_flat, iou_binary, shannon_entropy, Grid2D, ImageRgb, ProbVector};
use crate::saliency::{Method, SaliencyMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HisSelection {
    pub index: usize,
    /// `lambda_i * I_i + gamma * uncertainty` per candidate.
    pub scores: Vec<f64>,
    /// The candidate-independent term added to every score.
    pub uncertainty_term: f64,
}

/// `argmax_i (lambda_i * I_i + gamma * uncertainty)`, ties to the lowest
/// index. The uncertainty term is the same for every candidate, so the
/// argmax is taken over `lambda_i * I_i` directly; this keeps the choice
/// immune to rounding when the constant is added.
pub fn his_select(confidences: &[f64], lambdas: &[f64], gamma: f64, uncertainty: f64) -> Result<HisSelection> {
    if confidences.is_empty() {
        return Err(Error::EmptyInput("interpretability candidates"));
    }
    if confidences.len() != lambdas.len() {
        return Err(Error::LengthMismatch {
            expected: confidences.len(),
            actual: lambdas.len(),
        });
    }
    if confidences.iter().chain(lambdas).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("confidences and weights must lie in [0, 1]".into()));
    }
    if !gamma.is_finite() || !uncertainty.is_finite() {
        return Err(Error::NonFinite("uncertainty term"));
    }
    let base: Vec<f64> = confidences.iter().zip(lambdas).map(|(i, l)| i * l).collect();
    let mut index = 0;
    for (k, &s) in base.iter().enumerate() {
        if s > base[index] {
            index = k;
        }
    }
    let uncertainty_term = gamma * uncertainty;
    Ok(HisSelection {
        index,
        scores: base.iter().map(|s| s + uncertainty_term).collect(),
        uncertainty_term,
    })
}

/// Locality fidelity, concept traceability and perturbation robustness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityScores {
    pub lf: f64,
    pub ct: f64,
    pub pr: f64,
}

impl CompatibilityScores {
    pub fn new(lf: f64, ct: f64, pr: f64) -> Result<Self> {
        if [lf, ct, pr].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("compatibility scores must lie in [0, 1]".into()));
        }
        Ok(Self { lf, ct, pr })
    }
}

/// `alpha`, `beta`, `delta`, normalized to sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaiaWeights {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
}

impl MaiaWeights {
    pub fn new(alpha: f64, beta: f64, delta: f64) -> Result<Self> {
        let total = alpha + beta + delta;
        if [alpha, beta, delta].iter().any(|v| !v.is_finite() || *v < 0.0) || total <= 0.0 {
            return Err(Error::InvalidArgument("maia weights must be non-negative and not all zero".into()));
        }
        Ok(Self {
            alpha: alpha / total,
            beta: beta / total,
            delta: delta / total,
        })
    }

    pub fn score(&self, s: &CompatibilityScores) -> f64 {
        self.alpha * s.lf + self.beta * s.ct + self.delta * s.pr
    }
}

impl Default for MaiaWeights {
    fn default() -> Self {
        Self::new(1.0, 1.0, 1.0).expect("positive weights")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityEntry {
    pub kind: ModelKind,
    pub method: Method,
    pub scores: CompatibilityScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpreterAssignment {
    /// Methods per model kind, best first.
    pub methods: BTreeMap<ModelKind, Vec<Method>>,
    /// Combined score of every scored pair.
    pub scores: Vec<(ModelKind, Method, f64)>,
}

fn priority(m: Method) -> usize {
    Method::ATTRIBUTION.iter().position(|&x| x == m).unwrap_or(usize::MAX)
}

/// Ranks each kind's scored methods by `alpha LF + beta CT + delta PR`
/// (ties by method priority) and keeps the best `top_k`.
pub fn maia_assign(
    entries: &[CompatibilityEntry],
    weights: &MaiaWeights,
    kinds: &[ModelKind],
    top_k: usize,
) -> Result<InterpreterAssignment> {
    let top_k = top_k.max(1);
    let mut methods = BTreeMap::new();
    let mut scores = Vec::new();
    for &kind in kinds {
        let mut ranked: Vec<(Method, f64)> = entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| (e.method, weights.score(&e.scores)))
            .collect();
        if ranked.is_empty() {
            return Err(Error::MissingMethod(format!("no method scored for {}", kind.as_str())));
        }
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(priority(a.0).cmp(&priority(b.0))));
        scores.extend(ranked.iter().map(|&(m, s)| (kind, m, s)));
        methods.insert(kind, ranked.iter().take(top_k).map(|&(m, _)| m).collect());
    }
    Ok(InterpreterAssignment { methods, scores })
}

/// Built-in compatibility table. Under equal axis weights and `top_k = 2`
/// it yields cnn → {gradcam, tcav}, vit-proxy → {fullgrad, gradcam} and
/// yolo-proxy → {rise, gradcam}.
pub fn default_compatibility_table() -> Vec<CompatibilityEntry> {
    use Method::*;
    use ModelKind::*;
    let rows: [(ModelKind, Method, [f64; 3]); 12] = [
        (Cnn, GradCam, [0.9, 0.7, 0.8]),
        (Cnn, FullGrad, [0.7, 0.4, 0.7]),
        (Cnn, Rise, [0.6, 0.3, 0.5]),
        (Cnn, TcavConcept, [0.6, 0.9, 0.7]),
        (VitProxy, GradCam, [0.7, 0.6, 0.7]),
        (VitProxy, FullGrad, [0.85, 0.6, 0.85]),
        (VitProxy, Rise, [0.6, 0.4, 0.6]),
        (VitProxy, TcavConcept, [0.5, 0.7, 0.5]),
        (YoloProxy, GradCam, [0.8, 0.5, 0.7]),
        (YoloProxy, FullGrad, [0.6, 0.4, 0.6]),
        (YoloProxy, Rise, [0.85, 0.5, 0.8]),
        (YoloProxy, TcavConcept, [0.4, 0.6, 0.5]),
    ];
    rows.iter()
        .map(|&(kind, method, [lf, ct, pr])| CompatibilityEntry {
            kind,
            method,
            scores: CompatibilityScores { lf, ct, pr },
        })
        .collect()
}

/// One labelled sample for estimating compatibility scores.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilitySample {
    pub image: ImageRgb,
    pub region: Grid2D,
    pub concept: Grid2D,
}

pub const STABILITY_JITTERS: usize = 5;
const JITTER_AMPLITUDE: f32 = 0.02;

/// Estimates compatibility of one attribution procedure from samples:
/// LF is the pointing-game hit rate against `region`, CT the mean
/// non-negative cosine with `concept`, and PR the mean cosine between the
/// map and maps of [`STABILITY_JITTERS`] seeded small-noise copies. An
/// undefined cosine counts as 0.
pub fn estimate_compatibility(
    explain: &dyn Fn(&ImageRgb) -> Result<Grid2D>,
    samples: &[CompatibilitySample],
    seed: u64,
) -> Result<CompatibilityScores> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("compatibility samples"));
    }
    let n = samples.len() as f64;
    let (mut lf, mut ct, mut pr) = (0.0, 0.0, 0.0);
    for (i, s) in samples.iter().enumerate() {
        let map = explain(&s.image)?;
        let (y, x) = map.argmax();
        lf += (s.region.get(y, x) >= 0.5) as u8 as f64;
        ct += cosine_flat(&map, &s.concept).unwrap_or(0.0).max(0.0);
        let mut stability = 0.0;
        for j in 0..STABILITY_JITTERS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((i * STABILITY_JITTERS + j) as u64);
            let (h, w) = s.image.dims();
            let jittered = ImageRgb::from_fn(h, w, |y, x| {
                s.image.pixel(y, x).map(|v| v + rng.gen_range(-JITTER_AMPLITUDE..=JITTER_AMPLITUDE))
            });
            stability += cosine_flat(&map, &explain(&jittered)?).unwrap_or(0.0).max(0.0);
        }
        pr += stability / STABILITY_JITTERS as f64;
    }
    CompatibilityScores::new(lf / n, ct / n, pr / n)
}

/// Trigger thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerThresholds {
    /// Fire when entropy (nats) exceeds this.
    pub entropy: f64,
    /// Fire when ensemble agreement falls below this.
    pub agreement: f64,
    /// Fire when the top-2 probability margin falls below this.
    pub margin: f64,
}

impl Default for TriggerThresholds {
    fn default() -> Self {
        Self {
            entropy: 0.3,
            agreement: 0.75,
            margin: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerReason {
    Entropy,
    Agreement,
    Boundary,
    WeakLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerReport {
    pub triggered: bool,
    pub reasons: Vec<TriggerReason>,
    pub entropy: f64,
    pub agreement: f64,
    pub margin: f64,
    pub weak_labeled: bool,
}

/// Decision from precomputed signals.
pub fn trigger_from_signals(
    entropy: f64,
    agreement: f64,
    margin: f64,
    weak_labeled: bool,
    t: &TriggerThresholds,
) -> TriggerReport {
    let mut reasons = Vec::new();
    if entropy > t.entropy {
        reasons.push(TriggerReason::Entropy);
    }
    if agreement < t.agreement {
        reasons.push(TriggerReason::Agreement);
    }
    if margin < t.margin {
        reasons.push(TriggerReason::Boundary);
    }
    if weak_labeled {
        reasons.push(TriggerReason::WeakLabel);
    }
    TriggerReport {
        triggered: !reasons.is_empty(),
        reasons,
        entropy,
        agreement,
        margin,
        weak_labeled,
    }
}

pub fn trigger_decide(probs: &ProbVector, agreement: f64, weak_labeled: bool, t: &TriggerThresholds) -> Result<TriggerReport> {
    if !(0.0..=1.0).contains(&agreement) {
        return Err(Error::InvalidArgument(format!("agreement {agreement} outside [0, 1]")));
    }
    Ok(trigger_from_signals(
        shannon_entropy(probs),
        agreement,
        probs.top2_margin(),
        weak_labeled,
        t,
    ))
}

/// Fraction of model streams whose top class equals the most common top
/// class; the earliest stream wins a tie for most common.
pub fn ensemble_agreement(top_classes: &[usize]) -> Result<f64> {
    if top_classes.is_empty() {
        return Err(Error::EmptyInput("model streams"));
    }
    let mut best = 0;
    for &c in top_classes {
        best = best.max(top_classes.iter().filter(|&&d| d == c).count());
    }
    Ok(best as f64 / top_classes.len() as f64)
}

pub const DEFAULT_ALIGN_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptAlignment {
    pub retained: bool,
    /// `None` when either vector has zero norm.
    pub score: Option<f64>,
}

pub fn alignment_retained(score: f64, threshold: f64) -> bool {
    score > threshold
}

pub fn concept_align(tcav: &[f64], gradcam: &[f64], threshold: f64) -> Result<ConceptAlignment> {
    match cosine(tcav, gradcam) {
        Ok(score) => Ok(ConceptAlignment {
            retained: alignment_retained(score, threshold),
            score: Some(score),
        }),
        Err(Error::ZeroNormMap) => Ok(ConceptAlignment {
            retained: false,
            score: None,
        }),
        Err(e) => Err(e),
    }
}

/// `1 - IoU` of two binary masks.
pub fn sc2_loss(saliency_mask: &Grid2D, concept_mask: &Grid2D) -> Result<f64> {
    Ok(1.0 - iou_binary(saliency_mask, concept_mask)?)
}

pub const DEFAULT_DRIFT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub flagged: bool,
    /// Share of saliency mass outside the foreground; `None` for an empty
    /// map.
    pub background_fraction: Option<f64>,
    pub no_foreground: bool,
}

pub fn saliency_drift_flag(map: &Grid2D, foreground: &Grid2D, threshold: f64) -> Result<DriftReport> {
    if map.dims() != foreground.dims() {
        return Err(Error::DimMismatch {
            expected: map.dims(),
            actual: foreground.dims(),
        });
    }
    let total: f64 = map.values().iter().map(|v| v.abs()).sum();
    let outside: f64 = map
        .values()
        .iter()
        .zip(foreground.values())
        .filter(|(_, &f)| f < 0.5)
        .map(|(v, _)| v.abs())
        .sum();
    let background_fraction = (total > 0.0).then(|| outside / total);
    if foreground.count_set() == 0 {
        return Ok(DriftReport {
            flagged: true,
            background_fraction,
            no_foreground: true,
        });
    }
    Ok(DriftReport {
        flagged: background_fraction.is_some_and(|f| f > threshold),
        background_fraction,
        no_foreground: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyMatrix {
    pub labels: Vec<String>,
    /// Symmetric pairwise cosines; `None` in the row and column of a
    /// zero-norm map.
    pub values: Vec<Vec<Option<f64>>>,
}

pub fn consistency_matrix(maps: &[SaliencyMap]) -> Result<ConsistencyMatrix> {
    if maps.len() < 2 {
        return Err(Error::InvalidArgument("consistency needs at least two maps".into()));
    }
    let n = maps.len();
    let mut values = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = match cosine_flat(&maps[i].grid, &maps[j].grid) {
                Ok(_) if i == j => Some(1.0),
                Ok(c) => Some(c),
                Err(Error::ZeroNormMap) => None,
                Err(e) => return Err(e),
            };
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    Ok(ConsistencyMatrix {
        labels: maps.iter().map(|m| format!("{}/{}", m.model_id, m.method.as_str())).collect(),
        values,
    })
}
