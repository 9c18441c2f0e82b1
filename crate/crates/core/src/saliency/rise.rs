use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Method, SaliencyMap};
use crate::error::{Error, Result};
use crate::model::ModelBackend;
use crate::numeric::{cosine_flat, normalize01, Grid2D, ImageRgb};

/// Masks per accumulation chunk. Fixed so the summation tree does not depend
/// on the worker count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiseConfig {
    pub masks: usize,
    /// Side of the coarse Bernoulli grid.
    pub cells: usize,
    pub keep_prob: f64,
    pub seed: u64,
    /// Divide by the per-pixel mask coverage instead of `N * p`.
    pub unbias: bool,
    /// Nearest-cell masks instead of bilinear ones.
    pub hard_masks: bool,
}

impl Default for RiseConfig {
    fn default() -> Self {
        Self {
            masks: 4000,
            cells: 7,
            keep_prob: 0.5,
            seed: 0,
            unbias: true,
            hard_masks: false,
        }
    }
}

impl RiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.masks == 0 {
            return Err(Error::InvalidArgument("rise needs at least one mask".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob < 1.0) {
            return Err(Error::InvalidArgument("rise keep probability must lie in (0, 1)".into()));
        }
        if self.cells < 2 {
            return Err(Error::InvalidArgument("rise cell grid must be at least 2x2".into()));
        }
        Ok(())
    }
}

/// Mask `index` of the sequence: a Bernoulli(p) grid of `(s+1)^2` cells,
/// upsampled over `h x w` with a random sub-cell shift. Depends only on
/// `(cfg.seed, index)`.
pub fn rise_mask(cfg: &RiseConfig, h: usize, w: usize, index: usize) -> Grid2D {
    let s = cfg.cells;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let cell_h = h.div_ceil(s).max(1);
    let cell_w = w.div_ceil(s).max(1);
    let shift_y = rng.gen_range(0..cell_h);
    let shift_x = rng.gen_range(0..cell_w);
    let side = s + 1;
    let bits: Vec<f64> = (0..side * side)
        .map(|_| rng.gen_bool(cfg.keep_prob) as u8 as f64)
        .collect();
    let cell = |i: usize, j: usize| bits[i.min(s) * side + j.min(s)];
    if cfg.hard_masks {
        return Grid2D::from_fn(h, w, |y, x| cell((y + shift_y) / cell_h, (x + shift_x) / cell_w));
    }
    // cell centres sit at (i + 0.5) * cell size
    let axis = |p: usize, shift: usize, size: usize| -> (usize, usize, f64) {
        let u = ((p + shift) as f64 + 0.5) / size as f64 - 0.5;
        if u <= 0.0 {
            return (0, 0, 0.0);
        }
        let i0 = u.floor() as usize;
        (i0, i0 + 1, u - i0 as f64)
    };
    let ys: Vec<_> = (0..h).map(|y| axis(y, shift_y, cell_h)).collect();
    let xs: Vec<_> = (0..w).map(|x| axis(x, shift_x, cell_w)).collect();
    Grid2D::from_fn(h, w, |y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = cell(y0, x0) * (1.0 - fx) + cell(y0, x1) * fx;
        let bottom = cell(y1, x0) * (1.0 - fx) + cell(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn rise_masks(cfg: &RiseConfig, h: usize, w: usize) -> Result<Vec<Grid2D>> {
    cfg.validate()?;
    Ok((0..cfg.masks).map(|i| rise_mask(cfg, h, w, i)).collect())
}

/// Score-weighted average of random masks. Black-box: only
/// [`ModelBackend::forward`] is called. The class score is the softmax
/// probability of `class_index`.
pub fn rise_saliency(
    model: &dyn ModelBackend,
    image: &ImageRgb,
    class_index: usize,
    cfg: &RiseConfig,
) -> Result<SaliencyMap> {
    cfg.validate()?;
    if class_index >= model.num_classes() {
        return Err(Error::ClassOutOfRange {
            index: class_index,
            num_classes: model.num_classes(),
        });
    }
    let (h, w) = image.dims();
    let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.masks.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut weighted = vec![0.0; h * w];
            let mut coverage = vec![0.0; h * w];
            for i in c * CHUNK..((c + 1) * CHUNK).min(cfg.masks) {
                let mask = rise_mask(cfg, h, w, i);
                let score = model.forward(&image.masked(&mask)?)?.probs.entries()[class_index];
                for ((acc, cov), &m) in weighted.iter_mut().zip(coverage.iter_mut()).zip(mask.values()) {
                    *acc += score * m;
                    *cov += m;
                }
            }
            Ok((weighted, coverage))
        })
        .collect::<Result<_>>()?;
    let (weighted, coverage) = tree_reduce(chunks);
    let values: Vec<f64> = if cfg.unbias {
        weighted
            .iter()
            .zip(&coverage)
            .map(|(&s, &c)| if c > 0.0 { s / c } else { 0.0 })
            .collect()
    } else {
        let denom = cfg.masks as f64 * cfg.keep_prob;
        weighted.iter().map(|&s| s / denom).collect()
    };
    let grid = normalize01(&Grid2D::new(h, w, values)?);
    Ok(SaliencyMap::new(grid, Method::Rise, model.model_id(), class_index))
}

fn tree_reduce(mut parts: Vec<(Vec<f64>, Vec<f64>)>) -> (Vec<f64>, Vec<f64>) {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some((mut a, mut ca)) = it.next() {
            if let Some((b, cb)) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                ca.iter_mut().zip(&cb).for_each(|(x, y)| *x += y);
            }
            next.push((a, ca));
        }
        parts = next;
    }
    parts.pop().expect("at least one chunk")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentWeight {
    pub weight: f64,
    /// One of the maps had no saliency; the weight is then 0.
    pub empty_saliency: bool,
}

/// Cosine agreement between a RISE map and a Grad-CAM map.
pub fn rise_alignment_weight(rise: &SaliencyMap, gradcam: &SaliencyMap) -> Result<AlignmentWeight> {
    match cosine_flat(&rise.grid, &gradcam.grid) {
        Ok(weight) => Ok(AlignmentWeight {
            weight,
            empty_saliency: false,
        }),
        Err(Error::ZeroNormMap) => Ok(AlignmentWeight {
            weight: 0.0,
            empty_saliency: true,
        }),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{ConstantModel, CountingModel, PixelProbeModel};
    use crate::model::{MicroNet, MicroNetSpec};

    fn cfg(masks: usize, seed: u64) -> RiseConfig {
        RiseConfig {
            masks,
            seed,
            ..RiseConfig::default()
        }
    }

    #[test]
    fn near_certain_keep_gives_full_masks() {
        let c = RiseConfig {
            masks: 100,
            cells: 2,
            keep_prob: 0.999,
            ..RiseConfig::default()
        };
        let masks = rise_masks(&c, 16, 16).unwrap();
        let mean: f64 = masks.iter().map(|m| m.sum()).sum::<f64>() / (100.0 * 256.0);
        assert!(mean >= 0.99, "mean {mean}");
    }

    #[test]
    fn masks_are_seed_deterministic() {
        let a = rise_masks(&cfg(20, 9), 12, 10).unwrap();
        let b = rise_masks(&cfg(20, 9), 12, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, rise_masks(&cfg(20, 10), 12, 10).unwrap());
        assert!(a.iter().all(|m| m.values().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(rise_mask(&cfg(20, 9), 12, 10, 7), a[7]);
    }

    #[test]
    fn hard_masks_are_binary() {
        let c = RiseConfig {
            hard_masks: true,
            ..cfg(10, 2)
        };
        for m in rise_masks(&c, 14, 14).unwrap() {
            assert!(m.values().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(rise_masks(&cfg(0, 1), 8, 8).is_err());
        assert!(rise_masks(&RiseConfig { keep_prob: 1.0, ..cfg(5, 1) }, 8, 8).is_err());
        assert!(rise_masks(&RiseConfig { cells: 1, ..cfg(5, 1) }, 8, 8).is_err());
    }

    #[test]
    fn constant_model_gives_empty_map() {
        let model = ConstantModel::new(3, 0.7);
        let m = rise_saliency(&model, &ImageRgb::filled(16, 16, [0.5; 3]), 1, &cfg(64, 3)).unwrap();
        assert!(m.is_empty_saliency());
    }

    #[test]
    fn single_pixel_model_peaks_at_that_pixel() {
        let model = PixelProbeModel::new(0, 0);
        let img = ImageRgb::filled(16, 16, [0.8, 0.8, 0.8]);
        let m = rise_saliency(&model, &img, 0, &cfg(500, 4)).unwrap();
        assert_eq!(m.grid.argmax(), (0, 0));
    }

    #[test]
    fn rise_never_touches_gradients() {
        let net = MicroNet::build(3, &MicroNetSpec::default()).unwrap();
        let model = CountingModel::new(net);
        rise_saliency(&model, &ImageRgb::filled(12, 12, [0.4; 3]), 0, &cfg(40, 1)).unwrap();
        assert_eq!(model.forward_calls(), 40);
        assert_eq!(model.gradient_calls(), 0);
    }

    #[test]
    fn alignment_weight_cases() {
        let a = SaliencyMap::new(Grid2D::new(1, 2, vec![1.0, 0.0]).unwrap(), Method::Rise, "m", 0);
        let b = SaliencyMap::new(Grid2D::new(1, 2, vec![0.0, 1.0]).unwrap(), Method::GradCam, "m", 0);
        assert_eq!(rise_alignment_weight(&a, &a).unwrap().weight, 1.0);
        assert_eq!(rise_alignment_weight(&a, &b).unwrap().weight, 0.0);
        let z = SaliencyMap::new(Grid2D::zeros(1, 2), Method::GradCam, "m", 0);
        let w = rise_alignment_weight(&a, &z).unwrap();
        assert!(w.empty_saliency);
        assert_eq!(w.weight, 0.0);
    }
}
