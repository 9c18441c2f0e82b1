use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    check_class, BiasGradient, FeatureStack, Forward, InputGradient, LayerGradient, ModelBackend,
    ModelKind,
};
use crate::error::{Error, Result};
use crate::numeric::{Grid2D, ImageRgb};

/// Smallest accepted input height and width.
pub const MIN_INPUT_SIDE: usize = 8;

const INIT_RANGE: f32 = 0.1;
const POOL_LAYER: &str = "pool";

/// Layer counts for [`MicroNet::build`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroNetSpec {
    pub conv_channels: Vec<usize>,
    pub num_classes: usize,
}

impl Default for MicroNetSpec {
    fn default() -> Self {
        Self {
            conv_channels: vec![8, 16],
            num_classes: 4,
        }
    }
}

/// 3x3, stride 1, zero-padded convolution followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    name: String,
    in_channels: usize,
    out_channels: usize,
    /// `[out][in][ky][kx]`
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvLayer {
    pub(crate) fn new(
        name: String,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(weights.len(), out_channels * in_channels * 9);
        debug_assert_eq!(bias.len(), out_channels);
        Self {
            name,
            in_channels,
            out_channels,
            weights,
            bias,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn kernel(&self, o: usize, i: usize) -> &[f64] {
        let base = (o * self.in_channels + i) * 9;
        &self.weights[base..base + 9]
    }

    fn forward(&self, input: &FeatureStack) -> FeatureStack {
        let (h, w) = (input.height(), input.width());
        let mut out = FeatureStack::zeros(self.out_channels, h, w);
        for o in 0..self.out_channels {
            let plane = out.channel_mut(o);
            plane.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let src = input.channel(i);
                let k = self.kernel(o, i);
                for (t, &wt) in k.iter().enumerate() {
                    if wt == 0.0 {
                        continue;
                    }
                    let (dy, dx) = ((t / 3) as isize - 1, (t % 3) as isize - 1);
                    for_each_valid_row(h, w, dy, dx, |y, sy, xs, sxs| {
                        let dst = &mut plane[y * w + xs.start..y * w + xs.end];
                        let s = &src[sy * w + sxs.start..sy * w + sxs.end];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += wt * v;
                        }
                    });
                }
            }
        }
        out
    }

    /// Gradient with respect to this layer's input given the gradient with
    /// respect to its pre-activation output.
    fn backward_input(&self, grad_pre: &FeatureStack) -> FeatureStack {
        let (h, w) = (grad_pre.height(), grad_pre.width());
        let mut grad_in = FeatureStack::zeros(self.in_channels, h, w);
        for i in 0..self.in_channels {
            let dst = grad_in.channel_mut(i);
            for o in 0..self.out_channels {
                let g = grad_pre.channel(o);
                let k = self.kernel(o, i);
                for (t, &wt) in k.iter().enumerate() {
                    if wt == 0.0 {
                        continue;
                    }
                    let (dy, dx) = ((t / 3) as isize - 1, (t % 3) as isize - 1);
                    for_each_valid_row(h, w, dy, dx, |y, sy, xs, sxs| {
                        let d = &mut dst[sy * w + sxs.start..sy * w + sxs.end];
                        let s = &g[y * w + xs.start..y * w + xs.end];
                        for (a, &v) in d.iter_mut().zip(s) {
                            *a += wt * v;
                        }
                    });
                }
            }
        }
        grad_in
    }
}

/// Visits every output row `y` whose shifted source row `sy = y + dy` is in
/// range, passing the output column range and the matching source range.
#[inline]
fn for_each_valid_row(
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    mut f: impl FnMut(usize, usize, std::ops::Range<usize>, std::ops::Range<usize>),
) {
    let x_lo = if dx < 0 { 1 } else { 0 };
    let x_hi = if dx > 0 { w - 1 } else { w };
    if x_lo >= x_hi {
        return;
    }
    let sx_lo = (x_lo as isize + dx) as usize;
    let sx_hi = (x_hi as isize + dx) as usize;
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        f(y, sy as usize, x_lo..x_hi, sx_lo..sx_hi);
    }
}

/// Fully connected head applied to globally pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    name: String,
    in_dim: usize,
    out_dim: usize,
    /// `[out][in]`
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl DenseLayer {
    pub(crate) fn new(name: String, in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Self {
        debug_assert_eq!(weights.len(), in_dim * out_dim);
        debug_assert_eq!(bias.len(), out_dim);
        Self {
            name,
            in_dim,
            out_dim,
            weights,
            bias,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.in_dim..(class + 1) * self.in_dim]
    }

    fn forward(&self, pooled: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|c| {
                self.bias[c]
                    + self
                        .row(c)
                        .iter()
                        .zip(pooled)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
            })
            .collect()
    }
}

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTape {
    input: FeatureStack,
    pre: Vec<FeatureStack>,
    post: Vec<FeatureStack>,
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

impl ActivationTape {
    pub fn input(&self) -> &FeatureStack {
        &self.input
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }

    /// Post-ReLU output of conv layer `l`.
    pub fn conv_output(&self, l: usize) -> &FeatureStack {
        &self.post[l]
    }

    pub fn conv_pre_activation(&self, l: usize) -> &FeatureStack {
        &self.pre[l]
    }
}

struct Backward {
    input: FeatureStack,
    post: Vec<FeatureStack>,
    pre: Vec<FeatureStack>,
    pooled: Vec<f64>,
}

/// A small piecewise-linear network: conv/ReLU blocks, global average pool
/// and a dense head. No normalization layers, so the logit decomposes exactly
/// into input and bias contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroNet {
    id: String,
    kind: ModelKind,
    convs: Vec<ConvLayer>,
    dense: DenseLayer,
}

impl MicroNet {
    /// Draws every weight and bias from a seeded uniform(-0.1, 0.1) stream.
    /// Values are drawn as `f32` so weight files round-trip bit-exactly.
    pub fn build(seed: u64, spec: &MicroNetSpec) -> Result<Self> {
        if spec.conv_channels.is_empty() {
            return Err(Error::InvalidModelSpec("at least one conv layer required".into()));
        }
        if spec.conv_channels.contains(&0) {
            return Err(Error::InvalidModelSpec("conv channel count must be >= 1".into()));
        }
        if spec.num_classes == 0 {
            return Err(Error::InvalidModelSpec("num_classes must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE) as f64)
                .collect()
        };
        let mut convs = Vec::with_capacity(spec.conv_channels.len());
        let mut in_ch = 3;
        for (l, &out_ch) in spec.conv_channels.iter().enumerate() {
            let weights = draw(out_ch * in_ch * 9);
            let bias = draw(out_ch);
            convs.push(ConvLayer::new(format!("conv{}", l + 1), in_ch, out_ch, weights, bias));
            in_ch = out_ch;
        }
        let weights = draw(spec.num_classes * in_ch);
        let bias = draw(spec.num_classes);
        let dense = DenseLayer::new("dense".into(), in_ch, spec.num_classes, weights, bias);
        Ok(Self {
            id: format!("micro-{seed}"),
            kind: ModelKind::Cnn,
            convs,
            dense,
        })
    }

    pub(crate) fn from_layers(convs: Vec<ConvLayer>, dense: DenseLayer) -> Self {
        Self {
            id: "micro".into(),
            kind: ModelKind::Cnn,
            convs,
            dense,
        }
    }

    pub fn with_identity(mut self, id: impl Into<String>, kind: ModelKind) -> Self {
        self.id = id.into();
        self.kind = kind;
        self
    }

    pub fn convs(&self) -> &[ConvLayer] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.convs
    }

    pub fn dense(&self) -> &DenseLayer {
        &self.dense
    }

    pub fn dense_mut(&mut self) -> &mut DenseLayer {
        &mut self.dense
    }

    /// Name of the last convolutional layer, the usual Grad-CAM target.
    pub fn last_conv_name(&self) -> &str {
        self.convs.last().map(|c| c.name()).unwrap_or(POOL_LAYER)
    }

    pub fn run(&self, image: &ImageRgb) -> Result<(Forward, ActivationTape)> {
        let (h, w) = image.dims();
        if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
            return Err(Error::ImageTooSmall {
                height: h,
                width: w,
                min: MIN_INPUT_SIDE,
            });
        }
        let input = FeatureStack::from_image(image);
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut post = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let z = conv.forward(post.last().unwrap_or(&input));
            let mut a = z.clone();
            a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            pre.push(z);
            post.push(a);
        }
        let pooled = global_pool(post.last().expect("at least one conv layer"));
        let logits = self.dense.forward(&pooled);
        let fwd = Forward::from_logits(logits.clone())?;
        Ok((
            fwd,
            ActivationTape {
                input,
                pre,
                post,
                pooled,
                logits,
            },
        ))
    }

    /// Re-runs the network from a replacement activation of `layer`.
    pub fn logits_from(&self, layer: &str, activation: &FeatureStack) -> Result<Vec<f64>> {
        if layer == POOL_LAYER {
            if activation.channels() != self.dense.in_dim() {
                return Err(Error::LengthMismatch {
                    expected: self.dense.in_dim(),
                    actual: activation.channels(),
                });
            }
            return Ok(self.dense.forward(activation.as_slice()));
        }
        let l = self.conv_index(layer)?;
        let mut x = activation.clone();
        for conv in &self.convs[l + 1..] {
            x = conv.forward(&x);
            x.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok(self.dense.forward(&global_pool(&x)))
    }

    fn conv_index(&self, layer: &str) -> Result<usize> {
        self.convs
            .iter()
            .position(|c| c.name() == layer)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))
    }

    fn backward(&self, tape: &ActivationTape, class_index: usize) -> Result<Backward> {
        check_class(class_index, self.dense.out_dim())?;
        let last = tape.post.last().expect("at least one conv layer");
        let area = last.plane_len() as f64;
        let pooled = self.dense.row(class_index).to_vec();
        let mut grad_post = FeatureStack::zeros(last.channels(), last.height(), last.width());
        for (k, &g) in pooled.iter().enumerate() {
            grad_post.channel_mut(k).fill(g / area);
        }
        let n = self.convs.len();
        let mut post_grads = vec![FeatureStack::zeros(0, 0, 0); n];
        let mut pre_grads = vec![FeatureStack::zeros(0, 0, 0); n];
        let mut upstream = grad_post;
        for l in (0..n).rev() {
            let mut grad_pre = upstream.clone();
            for (g, &z) in grad_pre.as_mut_slice().iter_mut().zip(tape.pre[l].as_slice()) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
            let grad_in = self.convs[l].backward_input(&grad_pre);
            post_grads[l] = upstream;
            pre_grads[l] = grad_pre;
            upstream = grad_in;
        }
        Ok(Backward {
            input: upstream,
            post: post_grads,
            pre: pre_grads,
            pooled,
        })
    }

    /// Gradient of the class logit with respect to a named activation on an
    /// existing tape.
    pub fn grad_wrt_activations_on(
        &self,
        tape: &ActivationTape,
        class_index: usize,
        layer: &str,
    ) -> Result<LayerGradient> {
        if layer == POOL_LAYER {
            let b = self.backward(tape, class_index)?;
            return Ok(LayerGradient {
                layer: layer.into(),
                activation: FeatureStack::vector(tape.pooled.clone()),
                gradient: FeatureStack::vector(b.pooled),
            });
        }
        let l = self.conv_index(layer)?;
        let mut b = self.backward(tape, class_index)?;
        Ok(LayerGradient {
            layer: layer.into(),
            activation: tape.post[l].clone(),
            gradient: std::mem::replace(&mut b.post[l], FeatureStack::zeros(0, 0, 0)),
        })
    }
}

fn global_pool(x: &FeatureStack) -> Vec<f64> {
    let area = x.plane_len() as f64;
    (0..x.channels())
        .map(|k| x.channel(k).iter().sum::<f64>() / area)
        .collect()
}

impl ModelBackend for MicroNet {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> ModelKind {
        self.kind
    }

    fn num_classes(&self) -> usize {
        self.dense.out_dim()
    }

    fn layer_names(&self) -> Vec<String> {
        self.convs
            .iter()
            .map(|c| c.name().to_string())
            .chain(std::iter::once(POOL_LAYER.to_string()))
            .collect()
    }

    fn forward(&self, image: &ImageRgb) -> Result<Forward> {
        Ok(self.run(image)?.0)
    }

    fn activations(&self, image: &ImageRgb, layer: &str) -> Result<FeatureStack> {
        let (_, tape) = self.run(image)?;
        if layer == POOL_LAYER {
            return Ok(FeatureStack::vector(tape.pooled));
        }
        let l = self.conv_index(layer)?;
        Ok(tape.post.into_iter().nth(l).expect("index from conv_index"))
    }

    fn grad_wrt_activations(
        &self,
        image: &ImageRgb,
        class_index: usize,
        layer: &str,
    ) -> Result<LayerGradient> {
        // validate the layer before paying for a forward pass
        if layer != POOL_LAYER {
            self.conv_index(layer)?;
        }
        let (_, tape) = self.run(image)?;
        self.grad_wrt_activations_on(&tape, class_index, layer)
    }

    fn grad_wrt_input(&self, image: &ImageRgb, class_index: usize) -> Result<InputGradient> {
        let (_, tape) = self.run(image)?;
        let b = self.backward(&tape, class_index)?;
        Ok([0, 1, 2].map(|c| b.input.channel_grid(c)))
    }

    fn grad_wrt_biases(&self, image: &ImageRgb, class_index: usize) -> Result<Vec<BiasGradient>> {
        let (_, tape) = self.run(image)?;
        let b = self.backward(&tape, class_index)?;
        let mut out: Vec<BiasGradient> = self
            .convs
            .iter()
            .zip(b.pre)
            .map(|(conv, spatial)| BiasGradient {
                layer: conv.name().to_string(),
                bias: conv.bias().to_vec(),
                grad: (0..spatial.channels())
                    .map(|k| spatial.channel(k).iter().sum())
                    .collect(),
                spatial: Some(spatial),
            })
            .collect();
        let mut onehot = vec![0.0; self.dense.out_dim()];
        onehot[class_index] = 1.0;
        out.push(BiasGradient {
            layer: self.dense.name().to_string(),
            bias: self.dense.bias().to_vec(),
            grad: onehot,
            spatial: None,
        });
        Ok(out)
    }
}

/// Plain grid view of the input gradient, summed over channels.
pub fn input_gradient_sum(g: &InputGradient) -> Grid2D {
    g[0].zip_map(&g[1], |a, b| a + b)
        .and_then(|s| s.zip_map(&g[2], |a, b| a + b))
        .expect("input gradient planes share dims")
}
