use super::{Method, SaliencyMap};
use crate::error::Result;
use crate::model::ModelBackend;
use crate::numeric::{bilinear_resize, normalize01, pairwise_sum, Grid2D, ImageRgb};

/// One layer's bias contribution `b ⊙ ∂f/∂b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasTerm {
    pub layer: String,
    /// Signed scalar total of the contribution.
    pub total: f64,
    /// Absolute per-position contribution at the image resolution.
    pub abs_map: Grid2D,
}

/// Un-normalized FullGrad decomposition of one class logit.
#[derive(Debug, Clone, PartialEq)]
pub struct FullGradTerms {
    /// `x ⊙ ∂f/∂x` per channel, signed.
    pub input_term: [Grid2D; 3],
    pub bias_terms: Vec<BiasTerm>,
}

impl FullGradTerms {
    /// Signed sum of every term; equals the logit for piecewise-linear nets.
    pub fn completeness_sum(&self) -> f64 {
        let input: Vec<f64> = self.input_term.iter().map(|g| g.sum()).collect();
        let bias: Vec<f64> = self.bias_terms.iter().map(|t| t.total).collect();
        pairwise_sum(&input) + pairwise_sum(&bias)
    }

    /// Channel-absolute-sum of the input term plus all absolute bias maps.
    pub fn attribution(&self) -> Grid2D {
        let mut acc = Grid2D::from_fn(self.input_term[0].height(), self.input_term[0].width(), |y, x| {
            self.input_term.iter().map(|g| g.get(y, x).abs()).sum()
        });
        for t in &self.bias_terms {
            for (a, b) in acc.values_mut().iter_mut().zip(t.abs_map.values()) {
                *a += b;
            }
        }
        acc
    }
}

pub fn full_grad_terms(model: &dyn ModelBackend, image: &ImageRgb, class_index: usize) -> Result<FullGradTerms> {
    let biases = model.grad_wrt_biases(image, class_index)?;
    let grad_x = model.grad_wrt_input(image, class_index)?;
    let (h, w) = image.dims();
    let input_term = [0, 1, 2].map(|c| {
        let plane = image.channel_grid(c);
        plane
            .zip_map(&grad_x[c], |x, g| x * g)
            .expect("input gradient matches image dims")
    });
    let mut bias_terms = Vec::with_capacity(biases.len());
    for bg in biases {
        let total = pairwise_sum(
            &bg.bias
                .iter()
                .zip(&bg.grad)
                .map(|(b, g)| b * g)
                .collect::<Vec<_>>(),
        );
        let abs_map = match &bg.spatial {
            Some(stack) => {
                let mut m = vec![0.0; stack.plane_len()];
                for (k, &b) in bg.bias.iter().enumerate() {
                    for (acc, &g) in m.iter_mut().zip(stack.channel(k)) {
                        *acc += (b * g).abs();
                    }
                }
                bilinear_resize(&Grid2D::new(stack.height(), stack.width(), m)?, h, w)?
            }
            // non-spatial layers spread their magnitude evenly over the image
            None => Grid2D::filled(h, w, total.abs() / (h * w) as f64),
        };
        bias_terms.push(BiasTerm {
            layer: bg.layer,
            total,
            abs_map,
        });
    }
    Ok(FullGradTerms {
        input_term,
        bias_terms,
    })
}

/// Full-gradient attribution normalized to `[0, 1]`. Backends without bias
/// gradients fail with [`crate::Error::FullGradUnsupported`].
pub fn full_grad(model: &dyn ModelBackend, image: &ImageRgb, class_index: usize) -> Result<SaliencyMap> {
    let terms = full_grad_terms(model, image, class_index)?;
    Ok(SaliencyMap::new(
        normalize01(&terms.attribution()),
        Method::FullGrad,
        model.model_id(),
        class_index,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::fixtures::{fixture_image, ConstantModel};
    use crate::model::{MicroNet, MicroNetSpec};

    fn zero_bias_net() -> MicroNet {
        let mut net = MicroNet::build(7, &MicroNetSpec::default()).unwrap();
        for c in net.convs_mut() {
            c.bias_mut().fill(0.0);
        }
        net.dense_mut().bias_mut().fill(0.0);
        net
    }

    #[test]
    fn zero_bias_map_is_input_term_alone() {
        let net = zero_bias_net();
        let img = fixture_image(16, 3);
        let m = full_grad(&net, &img, 1).unwrap();
        let g = net.grad_wrt_input(&img, 1).unwrap();
        let want = Grid2D::from_fn(16, 16, |y, x| {
            (0..3)
                .map(|c| (img.get(c, y, x) as f64 * g[c].get(y, x)).abs())
                .sum()
        });
        let want = normalize01(&want);
        for (a, b) in m.grid.values().iter().zip(want.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn completeness_on_fixture() {
        let net = MicroNet::build(7, &MicroNetSpec::default()).unwrap();
        let img = fixture_image(32, 1);
        for class in 0..4 {
            let terms = full_grad_terms(&net, &img, class).unwrap();
            let logit = net.forward(&img).unwrap().logits[class];
            let rel = (terms.completeness_sum() - logit).abs() / logit.abs().max(1e-12);
            assert!(rel <= 1e-4, "class {class}: {} vs {logit}", terms.completeness_sum());
        }
    }

    #[test]
    fn zero_image_zero_bias_is_empty() {
        let net = zero_bias_net();
        let m = full_grad(&net, &ImageRgb::filled(12, 12, [0.0; 3]), 0).unwrap();
        assert!(m.is_empty_saliency());
    }

    #[test]
    fn backend_without_biases_is_unsupported() {
        let model = ConstantModel::new(4, 0.3);
        assert_eq!(
            full_grad(&model, &ImageRgb::filled(8, 8, [0.5; 3]), 0).unwrap_err(),
            Error::FullGradUnsupported
        );
    }
}
