//! Heatmap overlays.
//!
//! The colormap is a piecewise-linear ramp through five stops at saliency
//! 0, 0.25, 0.5, 0.75 and 1: blue (0,0,1), cyan (0,1,1), green (0,1,0),
//! yellow (1,1,0), red (1,0,0). Saliency is clamped to `[0, 1]`. Each output
//! byte is `round(255 * (0.5 * image + 0.5 * colour))` computed in `f64`,
//! with the image channel widened from its stored `f32`.

use trigger_xai::{Grid2D, ImageRgb};

use crate::error::{CliError, CliResult};

pub const RAMP: [[f64; 3]; 5] = [
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
];

pub fn colormap(v: f64) -> [f64; 3] {
    let t = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) } * 4.0;
    let i = (t.floor() as usize).min(3);
    let f = t - i as f64;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * f)
}

/// 8-bit RGB overlay, row-major.
pub fn render_overlay(image: &ImageRgb, map: &Grid2D) -> CliResult<Vec<[u8; 3]>> {
    if image.dims() != map.dims() {
        return Err(CliError::Internal(format!(
            "overlay dims {:?} do not match image {:?}",
            map.dims(),
            image.dims()
        )));
    }
    let (h, w) = image.dims();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let px = image.pixel(y, x);
            let col = colormap(map.get(y, x));
            out.push([0, 1, 2].map(|c| {
                let v = 0.5 * px[c] as f64 + 0.5 * col[c];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            }));
        }
    }
    Ok(out)
}

pub fn overlay_ppm(image: &ImageRgb, map: &Grid2D) -> CliResult<Vec<u8>> {
    let (h, w) = image.dims();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for px in render_overlay(image, map)? {
        out.extend(px);
    }
    Ok(out)
}
