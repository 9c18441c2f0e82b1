//! Heuristic weak labeling: four labeling functions that either vote for a
//! symptom class or abstain, and a reliability-weighted majority vote.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{channel_stats, color_histogram, mean_glcm_contrast, ChannelStats, ColorHistogram, DEFAULT_GLCM_LEVELS};
use crate::numeric::{Grid2D, ImageRgb};

/// Per-pixel yellow band: `R > 0.5`, `G > 0.5`, `B < 0.35`.
pub const YELLOW_MIN_RG: f32 = 0.5;
pub const YELLOW_MAX_B: f32 = 0.35;
/// Weights below this floor are never assigned by [`estimate_weights`].
pub const WEIGHT_FLOOR: f64 = 0.05;
const TIE_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DiseaseLabel {
    Healthy,
    YellowSpots,
    ReddishBronzing,
    SilkWebbing,
    Abstain,
}

impl DiseaseLabel {
    /// The four votable classes, in class-index order.
    pub const CLASSES: [DiseaseLabel; 4] = [
        DiseaseLabel::Healthy,
        DiseaseLabel::YellowSpots,
        DiseaseLabel::ReddishBronzing,
        DiseaseLabel::SilkWebbing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DiseaseLabel::Healthy => "Healthy",
            DiseaseLabel::YellowSpots => "YellowSpots",
            DiseaseLabel::ReddishBronzing => "ReddishBronzing",
            DiseaseLabel::SilkWebbing => "SilkWebbing",
            DiseaseLabel::Abstain => "Abstain",
        }
    }

    pub fn class_index(self) -> Option<usize> {
        Self::CLASSES.iter().position(|&c| c == self)
    }
}

/// Firing thresholds for the labeling functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LfThresholds {
    /// Minimum yellow-band pixel fraction (τ_y).
    pub yellow_fraction: f64,
    /// Minimum mean co-occurrence contrast (τ_w).
    pub webbing_contrast: f64,
    /// Minimum red/green mean ratio (τ_r).
    pub red_ratio: f64,
    /// Healthy requires the red/green ratio below this.
    pub healthy_ratio: f64,
}

impl Default for LfThresholds {
    fn default() -> Self {
        Self {
            yellow_fraction: 0.08,
            webbing_contrast: 1.5,
            red_ratio: 1.3,
            healthy_ratio: 0.9,
        }
    }
}

/// Everything the labeling functions look at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatures {
    pub stats: ChannelStats,
    pub histogram: ColorHistogram,
    pub yellow_fraction: f64,
    /// Mean co-occurrence contrast over 0/45/90/135 degrees at distance 1.
    pub contrast: f64,
}

pub fn is_yellow(px: [f32; 3]) -> bool {
    px[0] > YELLOW_MIN_RG && px[1] > YELLOW_MIN_RG && px[2] < YELLOW_MAX_B
}

pub fn yellow_band_mask(img: &ImageRgb) -> Grid2D {
    Grid2D::from_fn(img.height(), img.width(), |y, x| is_yellow(img.pixel(y, x)) as u8 as f64)
}

pub fn extract_features(img: &ImageRgb) -> Result<ImageFeatures> {
    let mask = yellow_band_mask(img);
    Ok(ImageFeatures {
        stats: channel_stats(img),
        histogram: color_histogram(img, 8)?,
        yellow_fraction: mask.count_set() as f64 / mask.len() as f64,
        contrast: mean_glcm_contrast(&img.luminance_mean(), DEFAULT_GLCM_LEVELS)?,
    })
}

pub fn lf_yellow_spots(f: &ImageFeatures, t: &LfThresholds) -> DiseaseLabel {
    if f.yellow_fraction > t.yellow_fraction {
        DiseaseLabel::YellowSpots
    } else {
        DiseaseLabel::Abstain
    }
}

pub fn lf_silk_webbing(f: &ImageFeatures, t: &LfThresholds) -> DiseaseLabel {
    if f.contrast > t.webbing_contrast {
        DiseaseLabel::SilkWebbing
    } else {
        DiseaseLabel::Abstain
    }
}

pub fn lf_healthy(f: &ImageFeatures, t: &LfThresholds) -> DiseaseLabel {
    let [r, g, b] = f.stats.channels.map(|c| c.mean);
    let green_dominant = g > r && g > b;
    if green_dominant
        && f.yellow_fraction < t.yellow_fraction / 2.0
        && f.stats.red_green_ratio < t.healthy_ratio
        && f.contrast <= t.webbing_contrast
    {
        DiseaseLabel::Healthy
    } else {
        DiseaseLabel::Abstain
    }
}

pub fn lf_reddish_bronzing(f: &ImageFeatures, t: &LfThresholds) -> DiseaseLabel {
    if f.stats.red_green_ratio > t.red_ratio {
        DiseaseLabel::ReddishBronzing
    } else {
        DiseaseLabel::Abstain
    }
}

/// Votes of all four labeling functions in fixed order
/// (yellow spots, silk webbing, healthy, reddish bronzing).
pub fn apply_lfs(f: &ImageFeatures, t: &LfThresholds) -> [DiseaseLabel; 4] {
    [
        lf_yellow_spots(f, t),
        lf_silk_webbing(f, t),
        lf_healthy(f, t),
        lf_reddish_bronzing(f, t),
    ]
}

/// Reliability weight per labeling function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LfWeights(pub [f64; 4]);

impl Default for LfWeights {
    fn default() -> Self {
        LfWeights([1.0; 4])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: DiseaseLabel,
    pub score: f64,
    pub tie: bool,
}

/// Weighted majority vote over non-abstaining votes. An exact tie for the
/// top score yields `Abstain` with the tie flag set.
pub fn aggregate(votes: &[DiseaseLabel; 4], w: &LfWeights) -> Result<Aggregate> {
    if w.0.iter().any(|&x| x <= 0.0 || !x.is_finite()) {
        return Err(Error::InvalidArgument("labeling-function weights must be positive".into()));
    }
    let mut totals = [0.0f64; 4];
    for (vote, weight) in votes.iter().zip(w.0) {
        if let Some(c) = vote.class_index() {
            totals[c] += weight;
        }
    }
    let best = totals.iter().copied().fold(0.0, f64::max);
    if best == 0.0 {
        return Ok(Aggregate {
            label: DiseaseLabel::Abstain,
            score: 0.0,
            tie: false,
        });
    }
    let leaders: Vec<usize> = (0..4)
        .filter(|&c| totals[c] > 0.0 && (best - totals[c]).abs() <= TIE_RTOL * best)
        .collect();
    if leaders.len() > 1 {
        return Ok(Aggregate {
            label: DiseaseLabel::Abstain,
            score: best,
            tie: true,
        });
    }
    Ok(Aggregate {
        label: DiseaseLabel::CLASSES[leaders[0]],
        score: best,
        tie: false,
    })
}

/// Each function's weight is its accuracy on the votes it cast, floored at
/// [`WEIGHT_FLOOR`]; a function that never votes gets the floor.
pub fn estimate_weights(dev: &[([DiseaseLabel; 4], DiseaseLabel)]) -> Result<LfWeights> {
    if dev.is_empty() {
        return Err(Error::EmptyInput("development set"));
    }
    let mut w = [WEIGHT_FLOOR; 4];
    for (i, wi) in w.iter_mut().enumerate() {
        let cast: Vec<bool> = dev
            .iter()
            .filter(|(votes, _)| votes[i] != DiseaseLabel::Abstain)
            .map(|(votes, gold)| votes[i] == *gold)
            .collect();
        if !cast.is_empty() {
            let acc = cast.iter().filter(|&&ok| ok).count() as f64 / cast.len() as f64;
            *wi = acc.max(WEIGHT_FLOOR);
        }
    }
    Ok(LfWeights(w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub image_id: String,
    pub votes: [DiseaseLabel; 4],
    pub label: DiseaseLabel,
    pub score: f64,
    pub tie: bool,
}

pub fn label_image(image_id: &str, img: &ImageRgb, t: &LfThresholds, w: &LfWeights) -> Result<LabelRecord> {
    let votes = apply_lfs(&extract_features(img)?, t);
    let agg = aggregate(&votes, w)?;
    Ok(LabelRecord {
        image_id: image_id.to_string(),
        votes,
        label: agg.label,
        score: agg.score,
        tie: agg.tie,
    })
}

/// Fraction of records on which each labeling function did not abstain.
pub fn coverage(records: &[LabelRecord]) -> [f64; 4] {
    let n = records.len().max(1) as f64;
    let mut out = [0.0; 4];
    for (i, o) in out.iter_mut().enumerate() {
        *o = records
            .iter()
            .filter(|r| r.votes[i] != DiseaseLabel::Abstain)
            .count() as f64
            / n;
    }
    out
}

/// Fraction of records carrying at least two distinct non-abstain votes.
pub fn conflict(records: &[LabelRecord]) -> f64 {
    let n = records.len().max(1) as f64;
    records
        .iter()
        .filter(|r| {
            let mut seen: Vec<DiseaseLabel> = r.votes.iter().copied().filter(|v| *v != DiseaseLabel::Abstain).collect();
            seen.sort();
            seen.dedup();
            seen.len() >= 2
        })
        .count() as f64
        / n
}
