//! Anchor-based box decoding and class-wise greedy non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::ProbVector;

/// One raw head output for a grid cell and anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBoxPrediction {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
    pub cx: u32,
    pub cy: u32,
    pub pw: f64,
    pub ph: f64,
    pub objectness: f64,
    pub class_probs: Vec<f64>,
}

/// Decoded box in grid units, centre-anchored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub class: usize,
}

impl DetectionBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &DetectionBox) -> f64 {
        let ix = (self.x + self.w / 2.0).min(other.x + other.w / 2.0)
            - (self.x - self.w / 2.0).max(other.x - other.w / 2.0);
        let iy = (self.y + self.h / 2.0).min(other.y + other.h / 2.0)
            - (self.y - self.h / 2.0).max(other.y - other.h / 2.0);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + other.area() - inter)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `x = σ(tx) + cx`, `y = σ(ty) + cy`, `w = pw·e^tw`, `h = ph·e^th`; the
/// score is objectness times the best class probability.
pub fn decode_box(raw: &RawBoxPrediction) -> Result<DetectionBox> {
    let reals = [raw.tx, raw.ty, raw.tw, raw.th, raw.pw, raw.ph, raw.objectness];
    if reals.iter().chain(&raw.class_probs).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw box prediction"));
    }
    if raw.pw <= 0.0 || raw.ph <= 0.0 {
        return Err(Error::InvalidArgument("anchor priors must be positive".into()));
    }
    if !(0.0..=1.0).contains(&raw.objectness) {
        return Err(Error::InvalidArgument("objectness must lie in [0, 1]".into()));
    }
    let probs = ProbVector::new(raw.class_probs.clone())?;
    let class = probs.argmax();
    let (w, h) = (raw.pw * raw.tw.exp(), raw.ph * raw.th.exp());
    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
        return Err(Error::NonFinite("decoded box size"));
    }
    Ok(DetectionBox {
        x: sigmoid(raw.tx) + raw.cx as f64,
        y: sigmoid(raw.ty) + raw.cy as f64,
        w,
        h,
        score: raw.objectness * probs.entries()[class],
        class,
    })
}

/// Processing order: score descending, then geometry and class, then input
/// position. Only exact duplicates fall through to the input position.
fn priority(a: &(usize, &DetectionBox), b: &(usize, &DetectionBox)) -> Ordering {
    let (ia, ba) = *a;
    let (ib, bb) = *b;
    bb.score
        .total_cmp(&ba.score)
        .then(ba.x.total_cmp(&bb.x))
        .then(ba.y.total_cmp(&bb.y))
        .then(ba.w.total_cmp(&bb.w))
        .then(ba.h.total_cmp(&bb.h))
        .then(ba.class.cmp(&bb.class))
        .then(ia.cmp(&ib))
}

/// Greedy class-wise suppression: boxes are kept in priority order unless a
/// kept box of the same class overlaps them with IoU at or above the
/// threshold.
pub fn nms(boxes: &[DetectionBox], iou_threshold: f64) -> Result<Vec<DetectionBox>> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "nms threshold {iou_threshold} outside (0, 1)"
        )));
    }
    let mut order: Vec<(usize, &DetectionBox)> = boxes.iter().enumerate().collect();
    order.sort_by(priority);
    let mut kept: Vec<DetectionBox> = Vec::new();
    for (_, b) in order {
        if kept
            .iter()
            .all(|k| k.class != b.class || k.iou(b) < iou_threshold)
        {
            kept.push(*b);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{brute_force_nms, random_boxes};
    use crate::numeric::{iou_binary, Grid2D};
    use proptest::prelude::*;

    fn raw(t: [f64; 4], c: (u32, u32), p: (f64, f64)) -> RawBoxPrediction {
        RawBoxPrediction {
            tx: t[0],
            ty: t[1],
            tw: t[2],
            th: t[3],
            cx: c.0,
            cy: c.1,
            pw: p.0,
            ph: p.1,
            objectness: 1.0,
            class_probs: vec![1.0],
        }
    }

    fn bx(x: f64, y: f64, w: f64, h: f64, score: f64) -> DetectionBox {
        DetectionBox { x, y, w, h, score, class: 0 }
    }

    #[test]
    fn decode_examples() {
        let b = decode_box(&raw([0.0; 4], (3, 4), (2.0, 5.0))).unwrap();
        assert_eq!((b.x, b.y, b.w, b.h), (3.5, 4.5, 2.0, 5.0));
        let b = decode_box(&raw([0.0, 0.0, 2f64.ln(), 0.0], (0, 0), (3.0, 1.0))).unwrap();
        assert!((b.w - 6.0).abs() < 1e-12);
        let b = decode_box(&raw([2.0, 0.0, 0.0, 0.0], (0, 0), (1.0, 1.0))).unwrap();
        assert!((b.x - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-15);
        assert!((b.x - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn decode_scores_and_errors() {
        let mut r = raw([0.0; 4], (0, 0), (1.0, 1.0));
        r.objectness = 0.5;
        r.class_probs = vec![0.2, 0.8];
        let b = decode_box(&r).unwrap();
        assert_eq!((b.class, b.score), (1, 0.4));
        r.tx = f64::NAN;
        assert!(decode_box(&r).is_err());
        let mut r = raw([0.0; 4], (0, 0), (0.0, 1.0));
        assert!(decode_box(&r).is_err());
        r.pw = 1.0;
        r.class_probs = vec![0.5, 0.2];
        assert!(decode_box(&r).is_err());
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.5).unwrap().is_empty());
        let one = bx(1.0, 1.0, 2.0, 2.0, 0.7);
        assert_eq!(nms(&[one], 0.5).unwrap(), vec![one]);
        let a = bx(1.0, 1.0, 2.0, 2.0, 0.8);
        let b = bx(1.0, 1.0, 2.0, 2.0, 0.9);
        assert_eq!(nms(&[a, b], 0.5).unwrap(), vec![b]);
        let mut c = a;
        c.class = 1;
        assert_eq!(nms(&[a, b, c], 0.5).unwrap().len(), 2);
        assert!(nms(&[a], 1.0).is_err());
    }

    #[test]
    fn three_box_chain_matches_brute_force() {
        // pairwise IoUs: (a,b)=0.6, (a,c)=0.2, (b,c)=0.2 by construction
        let a = bx(0.0, 0.0, 4.0, 1.0, 0.9);
        let b = bx(1.0, 0.0, 4.0, 1.0, 0.8);
        let c = bx(2.0, 0.0, 4.0, 1.0, 0.7);
        assert!((a.iou(&b) - 0.6).abs() < 1e-12);
        assert!((a.iou(&c) - 1.0 / 3.0).abs() < 1e-12);
        let got = nms(&[a, b, c], 0.5).unwrap();
        assert_eq!(got, brute_force_nms(&[a, b, c], 0.5));
        assert_eq!(got, vec![a, c]);
    }

    #[test]
    fn monotone_width() {
        let mut prev = 0.0;
        for i in -20..20 {
            let b = decode_box(&raw([0.0, 0.0, i as f64 * 0.1, 0.0], (0, 0), (1.5, 1.0))).unwrap();
            assert!(b.w > prev);
            prev = b.w;
        }
    }

    proptest! {
        #[test]
        fn nms_invariants(seed in 0u64..500, thr in 0.1f64..0.9) {
            let boxes = random_boxes(seed, 9, 2);
            let kept = nms(&boxes, thr).unwrap();
            for k in &kept {
                prop_assert!(boxes.contains(k));
            }
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(a.class != b.class || a.iou(b) < thr);
                }
            }
            let mut rev = boxes.clone();
            rev.reverse();
            prop_assert_eq!(nms(&rev, thr).unwrap(), kept.clone());
            prop_assert_eq!(kept, brute_force_nms(&boxes, thr));
        }

        #[test]
        fn box_iou_agrees_with_rasterized(
            x0 in 2.0f64..8.0, y0 in 2.0f64..8.0, w0 in 1.0f64..4.0, h0 in 1.0f64..4.0,
            x1 in 2.0f64..8.0, y1 in 2.0f64..8.0, w1 in 1.0f64..4.0, h1 in 1.0f64..4.0,
        ) {
            let a = bx(x0, y0, w0, h0, 1.0);
            let b = bx(x1, y1, w1, h1, 1.0);
            let res = 40.0;
            let raster = |bb: &DetectionBox| Grid2D::from_fn(400, 400, |py, px| {
                let (cx, cy) = ((px as f64 + 0.5) / res, (py as f64 + 0.5) / res);
                ((cx - bb.x).abs() <= bb.w / 2.0 && (cy - bb.y).abs() <= bb.h / 2.0) as u8 as f64
            });
            let ra = raster(&a);
            let rb = raster(&b);
            if ra.count_set() > 0 && rb.count_set() > 0 {
                let got = iou_binary(&ra, &rb).unwrap();
                prop_assert!((got - a.iou(&b)).abs() <= 0.02, "{} vs {}", got, a.iou(&b));
            }
        }
    }
}
