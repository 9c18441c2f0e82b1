//! Built-in concept sets for TCAV at explain time.
//!
//! The default concept is chlorotic yellow spotting: positives are
//! leaf-textured images carrying yellow blobs, randoms are unstructured
//! colour noise. Everything is derived from a seed, so the same seed always
//! yields the same CAV.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::ImageRgb;
use crate::saliency::{ConceptSet, MIN_CONCEPT_SET};

pub const YELLOW_SPOTS_CONCEPT: &str = "yellow-spots";

const LEAF: [f32; 3] = [0.2, 0.6, 0.15];
const SPOT: [f32; 3] = [0.88, 0.82, 0.1];

fn leaf_texture(rng: &mut ChaCha8Rng, side: usize) -> ImageRgb {
    let shade: f32 = rng.gen_range(-0.08..0.08);
    ImageRgb::from_fn(side, side, |_, _| {
        let n: f32 = rng.gen_range(-0.05..0.05);
        LEAF.map(|c| (c + shade + n).clamp(0.0, 1.0))
    })
}

fn with_spots(rng: &mut ChaCha8Rng, mut img: ImageRgb) -> ImageRgb {
    let side = img.height();
    let spots = rng.gen_range(2..=5);
    let r_lo = (side as f64 / 12.0).max(1.0);
    let r_hi = (side as f64 / 6.0).max(r_lo + 0.5);
    for _ in 0..spots {
        let cy = rng.gen_range(0.0..side as f64);
        let cx = rng.gen_range(0.0..side as f64);
        let r = rng.gen_range(r_lo..r_hi);
        for y in 0..side {
            for x in 0..side {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                if dy * dy + dx * dx <= r * r {
                    img.set_pixel(y, x, SPOT);
                }
            }
        }
    }
    img
}

fn colour_noise(rng: &mut ChaCha8Rng, side: usize) -> ImageRgb {
    // keep clear of the yellow band so randoms never carry the concept
    let base = loop {
        let b: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        if !(b[0] > 0.35 && b[1] > 0.35 && b[2] < 0.5) {
            break b;
        }
    };
    ImageRgb::from_fn(side, side, |_, _| {
        base.map(|c| (c + rng.gen_range(-0.15f32..0.15)).clamp(0.0, 1.0))
    })
}

/// `count` yellow-spotted leaf textures against `count` colour-noise images.
pub fn yellow_spot_concepts(side: usize, count: usize, seed: u64) -> Result<ConceptSet> {
    if count < MIN_CONCEPT_SET {
        return Err(Error::InvalidArgument(format!(
            "concept count {count} below the minimum of {MIN_CONCEPT_SET}"
        )));
    }
    if side == 0 {
        return Err(Error::InvalidArgument("concept image side must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives = (0..count)
        .map(|_| {
            let base = leaf_texture(&mut rng, side);
            with_spots(&mut rng, base)
        })
        .collect();
    let randoms = (0..count).map(|_| colour_noise(&mut rng, side)).collect();
    ConceptSet::new(positives, randoms)
}

/// The image followed by `jitters` copies with seeded ±0.02 pixel noise;
/// TCAV scores are taken over this batch.
pub fn jittered_batch(image: &ImageRgb, jitters: usize, seed: u64) -> Vec<ImageRgb> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = image.dims();
    let mut out = Vec::with_capacity(jitters + 1);
    out.push(image.clone());
    for _ in 0..jitters {
        out.push(ImageRgb::from_fn(h, w, |y, x| {
            image
                .pixel(y, x)
                .map(|c| (c + rng.gen_range(-0.02f32..0.02)).clamp(0.0, 1.0))
        }));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeler::yellow_band_mask;

    #[test]
    fn positives_carry_yellow_and_randoms_never_do() {
        let set = yellow_spot_concepts(16, 12, 3).unwrap();
        assert_eq!(set.positives().len(), 12);
        for p in set.positives() {
            assert!(yellow_band_mask(p).count_set() > 0);
        }
        let yellow_in_randoms: usize = set.randoms().iter().map(|r| yellow_band_mask(r).count_set()).sum();
        let yellow_in_pos: usize = set.positives().iter().map(|r| yellow_band_mask(r).count_set()).sum();
        assert_eq!(yellow_in_randoms, 0);
        assert!(yellow_in_pos > 0);
    }

    #[test]
    fn seeded_and_validated() {
        let a = yellow_spot_concepts(8, 10, 1).unwrap();
        let b = yellow_spot_concepts(8, 10, 1).unwrap();
        assert_eq!(a.positives(), b.positives());
        assert_eq!(a.randoms(), b.randoms());
        assert!(yellow_spot_concepts(8, 9, 1).is_err());
        assert!(yellow_spot_concepts(0, 10, 1).is_err());
    }

    #[test]
    fn batch_starts_with_the_image() {
        let img = ImageRgb::filled(4, 4, [0.5; 3]);
        let batch = jittered_batch(&img, 3, 9);
        assert_eq!(batch.len(), 4);
        assert_eq!(batch[0], img);
        assert!(batch[1..].iter().all(|b| b != &img));
        assert!(batch[1].planes().iter().flatten().all(|&v| (v - 0.5).abs() <= 0.02));
    }
}
