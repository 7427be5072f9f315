//! Binary PPM (P6, maxval 255) and ImageNet channel normalisation.
//!
//! Images are planar `3×h×w` tensors with values in `[0, 1]`.

use std::path::Path;

use super::tensor_file::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::UnsupportedFormat("incomplete PPM header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize, field: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::UnsupportedFormat(format!("PPM {field} `{tok}` is not a number")))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    if magic != "P6" {
        return Err(Error::UnsupportedFormat(format!(
            "expected binary PPM (P6), found `{magic}`"
        )));
    }
    let w = header_number(bytes, &mut pos, "width")?;
    let h = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "PPM maxval {maxval} (only 255 is supported)"
        )));
    }
    if w == 0 || h == 0 {
        return Err(Error::UnsupportedFormat("PPM with zero size".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let needed = 3 * w * h;
    let available = bytes.len().saturating_sub(pos);
    if available < needed {
        return Err(Error::Truncated {
            what: "PPM raster".into(),
            needed,
            available,
        });
    }
    let raster = &bytes[pos..pos + needed];
    let mut data = vec![0.0; needed];
    for (p, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + p] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn encode_ppm(pixels: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match pixels.shape() {
        [3, h, w] => (*h, *w),
        other => return Err(Error::dim("write_ppm", other, &[3, 0, 0])),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = pixels.data();
    out.reserve(3 * w * h);
    for p in 0..w * h {
        for c in 0..3 {
            out.push(to_byte(d[c * w * h + p]));
        }
    }
    Ok(out)
}

/// Nearest 8-bit level of a `[0, 1]` value (clamped; NaN maps to 0).
pub fn to_byte(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_ppm(&read_file(path)?).map_err(|e| match e {
        Error::UnsupportedFormat(m) => Error::UnsupportedFormat(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_ppm(path: impl AsRef<Path>, pixels: &Tensor) -> Result<()> {
    write_atomic(path.as_ref(), &encode_ppm(pixels)?)
}

fn channels(pixels: &Tensor, op: &'static str) -> Result<usize> {
    match pixels.shape() {
        [3, h, w] => Ok(h * w),
        other => Err(Error::dim(op, other, &[3, 0, 0])),
    }
}

/// Per-channel `(x − μ_c) / σ_c`.
pub fn normalize_image(pixels: &Tensor) -> Result<Tensor> {
    let plane = channels(pixels, "normalize_image")?;
    let mut out = pixels.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let c = idx / plane;
        *v = (*v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
    }
    Ok(out)
}

pub fn denormalize_image(x: &Tensor) -> Result<Tensor> {
    let plane = channels(x, "denormalize_image")?;
    let mut out = x.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let c = idx / plane;
        *v = *v * IMAGENET_STD[c] + IMAGENET_MEAN[c];
    }
    Ok(out)
}
