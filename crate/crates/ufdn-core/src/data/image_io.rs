//! Binary PGM (P5) / PPM (P6) codec, maxval 255.
//!
//! Decode maps byte `b` to exactly `b / 255`; encode rounds half away from
//! zero, so write-read round-trips are bit-stable.

use std::fs;
use std::path::Path;

use crate::error::{Result, UfdnError};
use crate::numerics::Tensor;

/// Serializes a `[C, H, W]` image with C in {1, 3} to PGM/PPM bytes.
pub fn encode_image(img: &Tensor) -> Result<Vec<u8>> {
    let shape = img.shape();
    if shape.len() != 3 || !matches!(shape[0], 1 | 3) {
        return Err(UfdnError::Dimension(format!(
            "image must be [1|3, H, W], got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = img.data()[ch * plane + y * w + x];
                out.push(quantize(v));
            }
        }
    }
    Ok(out)
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Parses PGM/PPM bytes into a `[C, H, W]` tensor with values `b / 255`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let magic = token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(UfdnError::Format(format!(
                "unsupported image magic `{other}`; expected P5 or P6"
            )))
        }
    };
    let w: usize = parse_num(&token(bytes, &mut pos)?)?;
    let h: usize = parse_num(&token(bytes, &mut pos)?)?;
    let maxval: usize = parse_num(&token(bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(UfdnError::Format(format!(
            "unsupported maxval {maxval}; expected 255"
        )));
    }
    let need = w * h * channels;
    let payload = bytes
        .get(pos..pos + need)
        .ok_or_else(|| UfdnError::Format(format!("truncated image payload: need {need} bytes")))?;
    let plane = h * w;
    let mut data = vec![0.0; need];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..channels {
                data[ch * plane + y * w + x] =
                    payload[(y * w + x) * channels + ch] as f64 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[channels, h, w], data)
}

/// Reads one whitespace-delimited header token, skipping `#` comments; leaves
/// `pos` one byte past the single whitespace that terminates the maxval.
fn token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    let mut tok = String::new();
    while *pos < bytes.len() {
        let b = bytes[*pos];
        if b == b'#' && tok.is_empty() {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        if b.is_ascii_whitespace() {
            *pos += 1;
            if !tok.is_empty() {
                return Ok(tok);
            }
            continue;
        }
        tok.push(b as char);
        *pos += 1;
    }
    if tok.is_empty() {
        Err(UfdnError::Format("truncated image header".into()))
    } else {
        Ok(tok)
    }
}

fn parse_num(tok: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| UfdnError::Format(format!("bad number `{tok}` in image header")))
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_image(img)?)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    decode_image(&fs::read(path)?)
}

/// Tiles same-shaped `[C, H, W]` images into a `rows x cols` mosaic.
pub fn tile_grid(images: &[Tensor], rows: usize, cols: usize) -> Result<Tensor> {
    if images.len() != rows * cols || images.is_empty() {
        return Err(UfdnError::Dimension(format!(
            "grid of {rows}x{cols} needs {} images, got {}",
            rows * cols,
            images.len()
        )));
    }
    let shape = images[0].shape().to_vec();
    if images.iter().any(|i| i.shape() != shape) {
        return Err(UfdnError::Dimension("grid images differ in shape".into()));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut data = vec![0.0; c * rows * h * cols * w];
    let grid_w = cols * w;
    for (idx, img) in images.iter().enumerate() {
        let (r, col) = (idx / cols, idx % cols);
        for ch in 0..c {
            for y in 0..h {
                let dst = ch * rows * h * grid_w + (r * h + y) * grid_w + col * w;
                let src = ch * h * w + y * w;
                data[dst..dst + w].copy_from_slice(&img.data()[src..src + w]);
            }
        }
    }
    Tensor::from_vec(&[c, rows * h, cols * w], data)
}
