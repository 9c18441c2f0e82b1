//! PPM (P6) and PNG ingestion, PPM output.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use trigger_xai::features::gray_to_rgb;
use trigger_xai::{Grid2D, ImageRgb};

use crate::error::{CliError, CliResult};

pub fn read_image(path: &Path) -> CliResult<ImageRgb> {
    let bytes = fs::read(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    decode_image(&bytes).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Sniffs the format from the leading bytes.
pub fn decode_image(bytes: &[u8]) -> Result<ImageRgb, String> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else {
        Err("unsupported image format (expected binary PPM or PNG)".into())
    }
}

fn ppm_tokens(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize), String> {
    let mut pos = 2;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?;
        out.push(text.parse().map_err(|_| format!("bad PPM header value `{text}`"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("truncated PPM header".into());
    }
    Ok((out, pos + 1))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRgb, String> {
    let (header, start) = ppm_tokens(bytes, 3)?;
    let (w, h, maxval) = (header[0], header[1], header[2]);
    if w == 0 || h == 0 {
        return Err("PPM has a zero dimension".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("PPM maxval {maxval} unsupported (8-bit only)"));
    }
    let need = w * h * 3;
    let raster = &bytes[start..];
    if raster.len() < need {
        return Err(format!("PPM raster has {} bytes, expected {need}", raster.len()));
    }
    let scale = maxval as f32;
    let mut planes = [vec![0f32; w * h], vec![0f32; w * h], vec![0f32; w * h]];
    for (i, px) in raster[..need].chunks_exact(3).enumerate() {
        for c in 0..3 {
            planes[c][i] = (px[c] as f32 / scale).min(1.0);
        }
    }
    ImageRgb::from_planes(h, w, planes).map_err(|e| e.to_string())
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageRgb, String> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    if reader.info().interlaced {
        return Err("interlaced PNG unsupported".into());
    }
    let size = reader.output_buffer_size().ok_or("PNG too large")?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err("only 8-bit PNG is supported".into());
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err("unexpanded palette PNG".into()),
    };
    let mut planes = [vec![0f32; w * h], vec![0f32; w * h], vec![0f32; w * h]];
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * channels];
        for x in 0..w {
            let px = &row[x * channels..(x + 1) * channels];
            // alpha is ignored
            let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            for c in 0..3 {
                planes[c][y * w + x] = rgb[c] as f32 / 255.0;
            }
        }
    }
    ImageRgb::from_planes(h, w, planes).map_err(|e| e.to_string())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &ImageRgb) -> Vec<u8> {
    let (h, w) = img.dims();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            out.extend(img.pixel(y, x).map(|v| quantize(v as f64)));
        }
    }
    out
}

/// A map or mask image: the channel mean per pixel, in `[0, 1]`.
pub fn read_gray(path: &Path) -> CliResult<Grid2D> {
    Ok(read_image(path)?.luminance_mean())
}

/// Binary mask from an image, thresholded at one half.
pub fn read_mask(path: &Path) -> CliResult<Grid2D> {
    Ok(read_gray(path)?.map(|v| (v >= 0.5) as u8 as f64))
}

pub fn gray_ppm(g: &Grid2D) -> Vec<u8> {
    encode_ppm(&gray_to_rgb(g).0)
}
