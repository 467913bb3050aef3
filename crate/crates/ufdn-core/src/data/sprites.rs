//! Procedural sprite glyphs and the three synthetic domain styles.
//!
//! Each sprite identity is an anti-aliased glyph (one of ten shape classes)
//! with per-identity jitter in position, rotation, and scale. A rendered
//! canvas is then pushed through one of three domain transforms — photo,
//! sketch, paint — standing in for dataset-level styles. Pairing across
//! domains is exact because every domain sees the same canvas.

use crate::error::{Result, UfdnError};
use crate::numerics::Tensor;
use crate::rng::{self, stream};

/// Glyph shape classes.
pub const NUM_GLYPH_CLASSES: usize = 10;

/// Names of the three synthetic domains, index-aligned.
pub const DOMAIN_NAMES: [&str; 3] = ["photo", "sketch", "paint"];

const SUPERSAMPLE: usize = 3;
const BACKGROUND: f64 = 0.05;

/// Amplitudes of the seeded style components.
#[derive(Clone, Copy, Debug)]
pub struct TransformParams {
    /// Strength of the smooth multiplicative shading in the photo domain.
    pub photo_shading_amp: f64,
    /// Amplitude of the low-frequency texture composited into the paint
    /// domain; zero makes paint an exact inversion.
    pub paint_texture_amp: f64,
}

impl Default for TransformParams {
    fn default() -> Self {
        TransformParams {
            photo_shading_amp: 0.25,
            paint_texture_amp: 0.25,
        }
    }
}

fn validate_size(size: usize) -> Result<()> {
    if matches!(size, 8 | 16 | 32) {
        Ok(())
    } else {
        Err(UfdnError::Validation(format!(
            "sprite size must be one of 8, 16, 32; got {size}"
        )))
    }
}

/// Renders one sprite: deterministic in all arguments.
pub fn render_sprite(
    sprite_id: u64,
    class_label: usize,
    size: usize,
    jitter_seed: u64,
) -> Result<Tensor> {
    render_sprite_with_attrs(sprite_id, class_label, size, jitter_seed, &[])
}

/// [`render_sprite`] with attribute bits; attribute 0 ("bold") thickens the
/// glyph strokes so the bit is visually recoverable.
pub fn render_sprite_with_attrs(
    sprite_id: u64,
    class_label: usize,
    size: usize,
    jitter_seed: u64,
    attrs: &[bool],
) -> Result<Tensor> {
    validate_size(size)?;
    if class_label >= NUM_GLYPH_CLASSES {
        return Err(UfdnError::Validation(format!(
            "unknown glyph class {class_label}; classes are 0..{NUM_GLYPH_CLASSES}"
        )));
    }
    let mut rng = rng::rng_for(jitter_seed, stream::SPRITE_JITTER, sprite_id);
    // Position jitter of +-2 px, rotation +-15 degrees, scale +-10%.
    let px2 = 2.0 / size as f64;
    let jx = rng::uniform(&mut rng, -px2, px2);
    let jy = rng::uniform(&mut rng, -px2, px2);
    let theta = rng::uniform(&mut rng, -15f64.to_radians(), 15f64.to_radians());
    let scale = rng::uniform(&mut rng, 0.9, 1.1);
    let fg = rng::uniform(&mut rng, 0.80, 0.95);
    let bold = attrs.first().copied().unwrap_or(false);
    let thickness = if bold { 1.7 } else { 1.0 };

    let radius = 0.34 * scale;
    let (sin_t, cos_t) = theta.sin_cos();
    let inv_ss = 1.0 / SUPERSAMPLE as f64;
    let mut data = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (px as f64 + (sx as f64 + 0.5) * inv_ss) / size as f64;
                    let y = (py as f64 + (sy as f64 + 0.5) * inv_ss) / size as f64;
                    let u0 = x - 0.5 - jx;
                    let v0 = y - 0.5 - jy;
                    let u = (cos_t * u0 + sin_t * v0) / radius;
                    let v = (-sin_t * u0 + cos_t * v0) / radius;
                    if glyph_inside(class_label, u, v, thickness) {
                        hits += 1;
                    }
                }
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            data.push(BACKGROUND + (fg - BACKGROUND) * cover);
        }
    }
    Tensor::from_vec(&[1, size, size], data)
}

/// Membership test in glyph-local coordinates (glyph spans roughly
/// [-1, 1] x [-1, 1]; `thickness` scales stroke widths).
fn glyph_inside(class: usize, u: f64, v: f64, thickness: f64) -> bool {
    let in_box = u.abs() <= 1.0 && v.abs() <= 1.0;
    let stroke = 0.22 * thickness;
    match class {
        // horizontal bar
        0 => in_box && v.abs() <= stroke,
        // vertical bar
        1 => in_box && u.abs() <= stroke,
        // plus
        2 => in_box && (u.abs() <= stroke || v.abs() <= stroke),
        // saltire (X)
        3 => in_box && ((u - v).abs() <= stroke * 1.3 || (u + v).abs() <= stroke * 1.3),
        // ring
        4 => {
            let r = (u * u + v * v).sqrt();
            let half = 0.22 * thickness;
            (r - 0.70).abs() <= half
        }
        // disc
        5 => (u * u + v * v).sqrt() <= 0.62 + 0.12 * (thickness - 1.0),
        // upward wedge
        6 => {
            let vv = -v; // image y grows downward; keep the apex on top
            vv >= -0.75 && vv <= 0.85 && u.abs() <= (0.85 - vv) * 0.62 * thickness.min(1.35)
        }
        // hollow square
        7 => {
            let m = u.abs().max(v.abs());
            let half = 0.18 * thickness;
            (m - 0.70).abs() <= half
        }
        // diamond
        8 => u.abs() + v.abs() <= 0.80 + 0.14 * (thickness - 1.0),
        // two dots
        9 => {
            let r = 0.34 + 0.10 * (thickness - 1.0);
            let d0 = ((u - 0.48) * (u - 0.48) + v * v).sqrt();
            let d1 = ((u + 0.48) * (u + 0.48) + v * v).sqrt();
            d0 <= r || d1 <= r
        }
        _ => false,
    }
}

/// Smooth low-frequency field in [0, 1] with seeded phases and frequencies.
fn smooth_field(size: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::rng_for(seed, stream::DOMAIN_TEXTURE, 0);
    let fx = rng::uniform(&mut rng, 0.8, 2.2);
    let fy = rng::uniform(&mut rng, 0.8, 2.2);
    let px = rng::uniform(&mut rng, 0.0, std::f64::consts::TAU);
    let py = rng::uniform(&mut rng, 0.0, std::f64::consts::TAU);
    let mut field = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let xf = x as f64 / size as f64;
            let yf = y as f64 / size as f64;
            let s = (std::f64::consts::TAU * fx * xf + px).sin()
                * (std::f64::consts::TAU * fy * yf + py).sin();
            field.push(0.5 + 0.5 * s);
        }
    }
    field
}

/// Applies the default-parameter domain style.
pub fn apply_domain_transform(canvas: &Tensor, domain: usize, noise_seed: u64) -> Result<Tensor> {
    apply_domain_transform_with(canvas, domain, noise_seed, &TransformParams::default())
}

/// Domain styles:
/// - 0 "photo": canvas under mild smooth multiplicative shading;
/// - 1 "sketch": normalized gradient-magnitude edge map (constant regions
///   map to zero);
/// - 2 "paint": intensity inversion `1 - p` composited with a low-frequency
///   seeded texture.
///
/// Output is clamped to [0, 1] and has the same shape as the canvas.
pub fn apply_domain_transform_with(
    canvas: &Tensor,
    domain: usize,
    noise_seed: u64,
    params: &TransformParams,
) -> Result<Tensor> {
    let shape = canvas.shape();
    if shape.len() != 3 || shape[0] != 1 || shape[1] != shape[2] {
        return Err(UfdnError::Dimension(format!(
            "domain transform expects a [1, S, S] canvas, got {shape:?}"
        )));
    }
    let size = shape[1];
    let p = canvas.data();
    let out = match domain {
        0 => {
            let field = smooth_field(size, noise_seed);
            let amp = params.photo_shading_amp;
            p.iter()
                .zip(&field)
                .map(|(&v, &s)| (v * (1.0 - amp + amp * s)).clamp(0.0, 1.0))
                .collect()
        }
        1 => {
            let mut out = Vec::with_capacity(size * size);
            let at = |x: isize, y: isize| -> f64 {
                let xc = x.clamp(0, size as isize - 1) as usize;
                let yc = y.clamp(0, size as isize - 1) as usize;
                p[yc * size + xc]
            };
            for y in 0..size as isize {
                for x in 0..size as isize {
                    let gx = (at(x + 1, y) - at(x - 1, y)) * 0.5;
                    let gy = (at(x, y + 1) - at(x, y - 1)) * 0.5;
                    let mag = (gx * gx + gy * gy).sqrt();
                    out.push((2.0 * mag).clamp(0.0, 1.0));
                }
            }
            out
        }
        2 => {
            let field = smooth_field(size, noise_seed);
            let amp = params.paint_texture_amp;
            p.iter()
                .zip(&field)
                .map(|(&v, &s)| ((1.0 - v) + amp * (s - 0.5)).clamp(0.0, 1.0))
                .collect()
        }
        other => {
            return Err(UfdnError::Validation(format!(
                "unknown domain {other}; synthetic domains are 0 (photo), 1 (sketch), 2 (paint)"
            )))
        }
    };
    Tensor::from_vec(shape, out)
}
