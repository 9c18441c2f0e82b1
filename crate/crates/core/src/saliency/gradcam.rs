use super::{Method, SaliencyMap};
use crate::error::{Error, Result};
use crate::model::ModelBackend;
use crate::numeric::{bilinear_resize, normalize01, Grid2D, ImageRgb};

/// Gradient-weighted class activation map of `layer`.
///
/// Channel weights are the spatial mean of the logit gradient; the weighted
/// channel sum is rectified, normalized and upsampled to the image size. A
/// map with no positive evidence comes back all zeros
/// ([`SaliencyMap::is_empty_saliency`]).
pub fn grad_cam(
    model: &dyn ModelBackend,
    image: &ImageRgb,
    class_index: usize,
    layer: &str,
) -> Result<SaliencyMap> {
    let lg = model.grad_wrt_activations(image, class_index, layer)?;
    if !lg.activation.is_spatial() {
        return Err(Error::NonSpatialLayer(layer.to_string()));
    }
    let act = &lg.activation;
    let (h, w) = (act.height(), act.width());
    let area = (h * w) as f64;
    let mut cam = vec![0.0; h * w];
    for k in 0..act.channels() {
        let weight = lg.gradient.channel(k).iter().sum::<f64>() / area;
        if weight == 0.0 {
            continue;
        }
        for (c, &a) in cam.iter_mut().zip(act.channel(k)) {
            *c += weight * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let cam = normalize01(&Grid2D::new(h, w, cam)?);
    let grid = bilinear_resize(&cam, image.height(), image.width())?;
    Ok(SaliencyMap::new(grid, Method::GradCam, model.model_id(), class_index).with_layer(layer))
}
