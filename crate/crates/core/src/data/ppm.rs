//! Binary P6 pixmaps with max value 255.

use std::fs;
use std::path::Path;

use reid_autodiff::Tensor;

use crate::error::{ReidError, Result};

/// Decodes a P6 byte stream into `[h, w, 3]` values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<&[u8], String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            Err("truncated header".to_string())
        } else {
            Ok(&bytes[start..pos])
        }
    };
    if token()? != b"P6" {
        return Err("not a binary P6 pixmap".into());
    }
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad {what} in header"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("max value")?;
    if maxval != 255 {
        return Err(format!("max value {maxval}, only 255 is supported"));
    }
    if width == 0 || height == 0 {
        return Err("zero image extent".into());
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let need = width * height * 3;
    if bytes.len() < start + need {
        return Err(format!(
            "truncated raster: need {need} bytes, have {}",
            bytes.len().saturating_sub(start)
        ));
    }
    let data = bytes[start..start + need]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Ok(Tensor::new(&[height, width, 3], data).expect("sized above"))
}

/// Encodes `[h, w, 3]` values, rounding `v·255` and clamping to a byte.
pub fn encode_ppm(image: &Tensor<f32>) -> std::result::Result<Vec<u8>, String> {
    let &[h, w, 3] = image.shape() else {
        return Err(format!("expected [h, w, 3], got {:?}", image.shape()));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| ReidError::io(path, e))?;
    decode_ppm(&bytes).map_err(|m| ReidError::format(path, m))
}

pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let bytes = encode_ppm(image).map_err(|m| ReidError::format(path, m))?;
    fs::write(path, bytes).map_err(|e| ReidError::io(path, e))
}

/// Single-channel `[h, w]` or `[h, w, 1]` map written as gray RGB after min-max scaling.
pub fn save_gray(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let (h, w) = match map.shape() {
        &[h, w] | &[h, w, 1] => (h, w),
        other => {
            return Err(ReidError::format(
                path,
                format!("expected a single-channel map, got {other:?}"),
            ))
        }
    };
    let lo = map.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let rgb = map
        .data()
        .iter()
        .flat_map(|&v| [(v - lo) / span; 3])
        .collect();
    save_image(path, &Tensor::new(&[h, w, 3], rgb).expect("sized above"))
}
