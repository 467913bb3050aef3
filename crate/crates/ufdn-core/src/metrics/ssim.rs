//! Structural similarity with the reference parameterization: 11x11 Gaussian
//! window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2 on the [0, 1] range, valid
//! windows only, computed per channel and averaged.
//!
//! Local moments are computed with two separable 1-D Gaussian passes; the
//! test-side oracle recomputes them per window straight from the definition.

use crate::error::{Result, UfdnError};
use crate::numerics::Tensor;

pub(crate) const WINDOW: usize = 11;
pub(crate) const SIGMA: f64 = 1.5;
pub(crate) const C1: f64 = 0.01 * 0.01;
pub(crate) const C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian window.
pub(crate) fn gaussian_kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-(i as f64 - c) * (i as f64 - c) / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-mode separable Gaussian filter: `[h, w] -> [h-10, w-10]`.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    // Horizontal pass.
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * img[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean local SSIM over all valid windows and channels; result in [-1, 1].
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(UfdnError::Dimension(format!(
            "ssim shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let shape = a.shape();
    if shape.len() != 3 {
        return Err(UfdnError::Dimension(format!(
            "ssim expects [C, H, W] images, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h < WINDOW || w < WINDOW {
        return Err(UfdnError::Config(format!(
            "ssim needs image side >= {WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel();
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * plane..(ch + 1) * plane];
        let pb = &b.data()[ch * plane..(ch + 1) * plane];
        let sq_a: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let sq_b: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(pa, h, w, &k);
        let mu_b = filter_valid(pb, h, w, &k);
        let e_aa = filter_valid(&sq_a, h, w, &k);
        let e_bb = filter_valid(&sq_b, h, w, &k);
        let e_ab = filter_valid(&ab, h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let s = ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (var_a + var_b + C2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, rng_for};

    /// Direct-from-definition oracle: per window, Gaussian-weighted means,
    /// variances, and covariance computed with explicit two-dimensional sums
    /// and centered moments (an independent accumulation route).
    pub(crate) fn ssim_reference(a: &Tensor, b: &Tensor) -> f64 {
        let shape = a.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let k1 = gaussian_kernel();
        let mut weights = [[0.0; WINDOW]; WINDOW];
        for y in 0..WINDOW {
            for x in 0..WINDOW {
                weights[y][x] = k1[y] * k1[x];
            }
        }
        let plane = h * w;
        let mut total = 0.0;
        let mut count = 0;
        for ch in 0..c {
            let pa = &a.data()[ch * plane..(ch + 1) * plane];
            let pb = &b.data()[ch * plane..(ch + 1) * plane];
            for wy in 0..=h - WINDOW {
                for wx in 0..=w - WINDOW {
                    let mut mu_a = 0.0;
                    let mut mu_b = 0.0;
                    for y in 0..WINDOW {
                        for x in 0..WINDOW {
                            let wgt = weights[y][x];
                            mu_a += wgt * pa[(wy + y) * w + wx + x];
                            mu_b += wgt * pb[(wy + y) * w + wx + x];
                        }
                    }
                    let mut var_a = 0.0;
                    let mut var_b = 0.0;
                    let mut cov = 0.0;
                    for y in 0..WINDOW {
                        for x in 0..WINDOW {
                            let wgt = weights[y][x];
                            let da = pa[(wy + y) * w + wx + x] - mu_a;
                            let db = pb[(wy + y) * w + wx + x] - mu_b;
                            var_a += wgt * da * da;
                            var_b += wgt * db * db;
                            cov += wgt * da * db;
                        }
                    }
                    total += ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                        / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    fn noise_image(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_for(seed, 0x55, 0);
        let n = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|_| rng::uniform(&mut rng, 0.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn self_similarity_is_one() {
        let a = noise_image(&[1, 16, 16], 1);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = noise_image(&[1, 16, 16], 2);
        let b = noise_image(&[1, 16, 16], 3);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn rejects_small_images() {
        let a = noise_image(&[1, 8, 8], 4);
        assert!(matches!(
            ssim(&a, &a),
            Err(crate::error::UfdnError::Config(_))
        ));
    }

    #[test]
    fn matches_direct_definition_oracle() {
        for seed in 0..10 {
            let a = noise_image(&[1, 32, 32], 100 + seed);
            let b = noise_image(&[1, 32, 32], 200 + seed);
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_reference(&a, &b);
            assert!(
                (fast - slow).abs() < 1e-6,
                "seed {seed}: {fast} vs {slow}"
            );
        }
        // Multi-channel too.
        let a = noise_image(&[3, 16, 16], 300);
        let b = noise_image(&[3, 16, 16], 301);
        assert!((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs() < 1e-6);
    }
}
