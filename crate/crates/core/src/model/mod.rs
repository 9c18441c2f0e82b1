//! The backend contract every attribution method is written against, plus
//! the built-in seeded micro network that implements it.

mod micro;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{softmax, Grid2D, ImageRgb, ProbVector};

pub use micro::{ActivationTape, ConvLayer, DenseLayer, MicroNet, MicroNetSpec, MIN_INPUT_SIDE};
pub use micro::input_gradient_sum;
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, WEIGHT_MAGIC};

/// Architecture family a backend stands in for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Cnn,
    VitProxy,
    YoloProxy,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Cnn, ModelKind::VitProxy, ModelKind::YoloProxy];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::VitProxy => "vit-proxy",
            ModelKind::YoloProxy => "yolo-proxy",
        }
    }
}

/// A stack of `channels` feature maps, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    channels: usize,
    height: usize,
    width: usize,
    spatial: bool,
    data: Vec<f64>,
}

impl FeatureStack {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            spatial: true,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::LengthMismatch {
                expected: channels * height * width,
                actual: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            spatial: true,
            data,
        })
    }

    /// A flat feature vector with no spatial layout (one value per channel).
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            channels: data.len(),
            height: 1,
            width: 1,
            spatial: false,
            data,
        }
    }

    pub fn from_image(image: &ImageRgb) -> Self {
        let (h, w) = image.dims();
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            data.extend(image.plane(c).iter().map(|&v| v as f64));
        }
        Self {
            channels: 3,
            height: h,
            width: w,
            spatial: true,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_spatial(&self) -> bool {
        self.spatial
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn channel_grid(&self, k: usize) -> Grid2D {
        Grid2D::new(self.height, self.width, self.channel(k).to_vec())
            .expect("feature stack values are finite")
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &FeatureStack) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub probs: ProbVector,
}

impl Forward {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        let probs = softmax(&logits)?;
        Ok(Self { logits, probs })
    }
}

/// A layer's activation together with the gradient of a class logit with
/// respect to it.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub layer: String,
    pub activation: FeatureStack,
    pub gradient: FeatureStack,
}

/// Bias gradient for one biased layer. `spatial` carries the per-position
/// gradient of the pre-activation for convolutional layers, whose channel
/// sums equal `grad`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasGradient {
    pub layer: String,
    pub bias: Vec<f64>,
    pub grad: Vec<f64>,
    pub spatial: Option<FeatureStack>,
}

/// Gradient of a class logit with respect to the three input planes.
pub type InputGradient = [Grid2D; 3];

/// What an attribution method may ask of a model. The class score used by
/// every gradient entry point is the pre-softmax logit.
pub trait ModelBackend: Send + Sync {
    fn model_id(&self) -> &str;

    fn kind(&self) -> ModelKind {
        ModelKind::Cnn
    }

    fn num_classes(&self) -> usize;

    fn layer_names(&self) -> Vec<String>;

    fn forward(&self, image: &ImageRgb) -> Result<Forward>;

    fn activations(&self, image: &ImageRgb, layer: &str) -> Result<FeatureStack>;

    fn grad_wrt_activations(&self, image: &ImageRgb, class_index: usize, layer: &str)
        -> Result<LayerGradient>;

    fn grad_wrt_input(&self, image: &ImageRgb, class_index: usize) -> Result<InputGradient>;

    fn grad_wrt_biases(&self, _image: &ImageRgb, _class_index: usize) -> Result<Vec<BiasGradient>> {
        Err(Error::FullGradUnsupported)
    }
}

pub(crate) fn check_class(index: usize, num_classes: usize) -> Result<()> {
    if index >= num_classes {
        return Err(Error::ClassOutOfRange { index, num_classes });
    }
    Ok(())
}
