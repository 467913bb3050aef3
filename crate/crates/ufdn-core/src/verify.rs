//! The registered gradient-check suite: every differentiable op and every
//! loss term, verified against central finite differences at small random
//! shapes.
//!
//! Inputs are sampled away from non-smooth points (relu kinks, clamp edges,
//! log floors) so the finite-difference oracle is valid; the backward rules
//! themselves are exercised everywhere by training.

use crate::error::Result;
use crate::nn::GaussianLatent;
use crate::numerics::{grad_check_scaled, CeTarget, Graph, Tensor};
use crate::objectives;
use crate::rng::{self, rng_for};

/// Verdict for one registered check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub const EPS: f64 = 1e-5;
pub const THRESHOLD: f64 = 1e-4;

type CheckFn = fn(f64) -> Result<f64>;

fn uniform_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = rng_for(seed, 0x6C, 0);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng::uniform(&mut rng, lo, hi)).collect()).unwrap()
}

fn normal_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, 0x6D, 0);
    let n = shape.iter().product();
    Tensor::from_vec(shape, rng::normal_vec(&mut rng, n)).unwrap()
}

macro_rules! check {
    ($name:ident, $seed:expr, $probe:expr, $f:expr) => {
        fn $name(scale: f64) -> Result<f64> {
            let probe = $probe($seed);
            grad_check_scaled($f, &probe, EPS, scale)
        }
    };
}

// -- elementwise ops ---------------------------------------------------------

check!(c_add_a, 1, |s| normal_tensor(&[3, 4], s), |g: &mut Graph, x: &Tensor| {
    let other = normal_tensor(&[3, 4], 101);
    let y = g.add(x, &other)?;
    weighted_sum(g, &y, 201)
});
check!(c_add_scalar, 2, |s| normal_tensor(&[7], s), |g: &mut Graph, x: &Tensor| {
    let y = g.add_scalar(x, 0.37)?;
    weighted_sum(g, &y, 202)
});
check!(c_sub, 3, |s| normal_tensor(&[3, 4], s), |g: &mut Graph, x: &Tensor| {
    let other = normal_tensor(&[3, 4], 102);
    let y = g.sub(&other, x)?;
    weighted_sum(g, &y, 203)
});
check!(c_mul, 4, |s| normal_tensor(&[3, 4], s), |g: &mut Graph, x: &Tensor| {
    let other = normal_tensor(&[3, 4], 103);
    let y = g.mul(x, &other)?;
    weighted_sum(g, &y, 204)
});
check!(c_mul_scalar_operand, 5, |s| Tensor::from_vec(&[1], vec![0.6 + (s as f64) * 0.0]).unwrap(), |g: &mut Graph, x: &Tensor| {
    let other = normal_tensor(&[4, 2], 104);
    let y = g.mul(&other, x)?;
    weighted_sum(g, &y, 205)
});
check!(c_neg, 6, |s| normal_tensor(&[5], s), |g: &mut Graph, x: &Tensor| {
    let y = g.neg(x)?;
    weighted_sum(g, &y, 206)
});
check!(c_exp, 7, |s| uniform_tensor(&[3, 3], s, -1.0, 1.0), |g: &mut Graph, x: &Tensor| {
    let y = g.exp(x)?;
    weighted_sum(g, &y, 207)
});
check!(c_log, 8, |s| uniform_tensor(&[3, 3], s, 0.2, 1.4), |g: &mut Graph, x: &Tensor| {
    let y = g.log(x)?;
    weighted_sum(g, &y, 208)
});
check!(c_sigmoid, 9, |s| normal_tensor(&[3, 3], s), |g: &mut Graph, x: &Tensor| {
    let y = g.sigmoid(x)?;
    weighted_sum(g, &y, 209)
});
check!(c_tanh, 10, |s| normal_tensor(&[3, 3], s), |g: &mut Graph, x: &Tensor| {
    let y = g.tanh(x)?;
    weighted_sum(g, &y, 210)
});
check!(c_leaky_relu, 11, |s| kink_free(&[4, 4], s, 0.05), |g: &mut Graph, x: &Tensor| {
    let y = g.leaky_relu(x, 0.2)?;
    weighted_sum(g, &y, 211)
});
check!(c_clamp, 12, |s| clamp_safe(&[4, 4], s), |g: &mut Graph, x: &Tensor| {
    let y = g.clamp(x, -0.8, 0.8)?;
    weighted_sum(g, &y, 212)
});

// -- structured ops ------------------------------------------------------------

check!(c_matmul_a, 13, |s| normal_tensor(&[3, 4], s), |g: &mut Graph, x: &Tensor| {
    let b = normal_tensor(&[4, 2], 105);
    let y = g.matmul(x, &b)?;
    weighted_sum(g, &y, 213)
});
check!(c_matmul_b, 14, |s| normal_tensor(&[4, 2], s), |g: &mut Graph, x: &Tensor| {
    let a = normal_tensor(&[3, 4], 106);
    let y = g.matmul(&a, x)?;
    weighted_sum(g, &y, 214)
});
check!(c_bias_add_x, 15, |s| normal_tensor(&[3, 5], s), |g: &mut Graph, x: &Tensor| {
    let b = normal_tensor(&[5], 107);
    let y = g.bias_add(x, &b)?;
    weighted_sum(g, &y, 215)
});
check!(c_bias_add_b, 16, |s| normal_tensor(&[5], s), |g: &mut Graph, x: &Tensor| {
    let m = normal_tensor(&[3, 5], 108);
    let y = g.bias_add(&m, x)?;
    weighted_sum(g, &y, 216)
});
check!(c_conv2d_x, 17, |s| normal_tensor(&[2, 2, 6, 6], s), |g: &mut Graph, x: &Tensor| {
    let w = normal_tensor(&[3, 2, 4, 4], 109);
    let b = normal_tensor(&[3], 110);
    let y = g.conv2d(x, &w, &b, 2, 1)?;
    weighted_sum(g, &y, 217)
});
check!(c_conv2d_w, 18, |s| normal_tensor(&[3, 2, 4, 4], s), |g: &mut Graph, x: &Tensor| {
    let i = normal_tensor(&[2, 2, 6, 6], 111);
    let b = normal_tensor(&[3], 112);
    let y = g.conv2d(&i, x, &b, 2, 1)?;
    weighted_sum(g, &y, 218)
});
check!(c_conv2d_bias, 19, |s| normal_tensor(&[3], s), |g: &mut Graph, x: &Tensor| {
    let i = normal_tensor(&[2, 2, 6, 6], 113);
    let w = normal_tensor(&[3, 2, 4, 4], 114);
    let y = g.conv2d(&i, &w, x, 2, 1)?;
    weighted_sum(g, &y, 219)
});
check!(c_convt2d_x, 20, |s| normal_tensor(&[2, 3, 3, 3], s), |g: &mut Graph, x: &Tensor| {
    let w = normal_tensor(&[3, 2, 4, 4], 115);
    let b = normal_tensor(&[2], 116);
    let y = g.conv2d_transpose(x, &w, &b, 2, 1)?;
    weighted_sum(g, &y, 220)
});
check!(c_convt2d_w, 21, |s| normal_tensor(&[3, 2, 4, 4], s), |g: &mut Graph, x: &Tensor| {
    let i = normal_tensor(&[2, 3, 3, 3], 117);
    let b = normal_tensor(&[2], 118);
    let y = g.conv2d_transpose(&i, x, &b, 2, 1)?;
    weighted_sum(g, &y, 221)
});
check!(c_convt2d_bias, 22, |s| normal_tensor(&[2], s), |g: &mut Graph, x: &Tensor| {
    let i = normal_tensor(&[2, 3, 3, 3], 119);
    let w = normal_tensor(&[3, 2, 4, 4], 120);
    let y = g.conv2d_transpose(&i, &w, x, 2, 1)?;
    weighted_sum(g, &y, 222)
});
check!(c_sum_all, 23, |s| normal_tensor(&[3, 4], s), |g: &mut Graph, x: &Tensor| g.sum(x, None));
check!(c_mean_all, 24, |s| normal_tensor(&[3, 4], s), |g: &mut Graph, x: &Tensor| g.mean(x, None));
check!(c_sum_axes, 25, |s| normal_tensor(&[2, 3, 4], s), |g: &mut Graph, x: &Tensor| {
    let y = g.sum(x, Some(&[1]))?;
    weighted_sum(g, &y, 223)
});
check!(c_mean_axes, 26, |s| normal_tensor(&[2, 3, 4], s), |g: &mut Graph, x: &Tensor| {
    let y = g.mean(x, Some(&[0, 2]))?;
    weighted_sum(g, &y, 224)
});
check!(c_concat, 27, |s| normal_tensor(&[2, 3], s), |g: &mut Graph, x: &Tensor| {
    let other = normal_tensor(&[2, 2], 121);
    let y = g.concat(&[x, &other], 1)?;
    weighted_sum(g, &y, 225)
});
check!(c_reshape, 28, |s| normal_tensor(&[2, 6], s), |g: &mut Graph, x: &Tensor| {
    let y = g.reshape(x, &[3, 4])?;
    weighted_sum(g, &y, 226)
});
check!(c_softmax_ce, 29, |s| normal_tensor(&[4, 5], s), |g: &mut Graph, x: &Tensor| {
    g.softmax_cross_entropy(x, &CeTarget::Classes(vec![0, 2, 4, 1]))
});

// -- losses ------------------------------------------------------------------------

check!(c_kl_mu, 30, |s| normal_tensor(&[3, 4], s), |g: &mut Graph, x: &Tensor| {
    let lv = uniform_tensor(&[3, 4], 122, -1.0, 1.0);
    let lat = GaussianLatent::new(g, x.clone(), lv)?;
    objectives::kl_divergence(g, &lat)
});
check!(c_kl_logvar, 31, |s| uniform_tensor(&[3, 4], s, -1.0, 1.0), |g: &mut Graph, x: &Tensor| {
    let mu = normal_tensor(&[3, 4], 123);
    let lat = GaussianLatent::new(g, mu, x.clone())?;
    objectives::kl_divergence(g, &lat)
});
check!(c_reparameterize, 32, |s| normal_tensor(&[2, 4], s), |g: &mut Graph, x: &Tensor| {
    let lv = uniform_tensor(&[2, 4], 124, -1.0, 1.0);
    let lat = GaussianLatent::new(g, x.clone(), lv)?;
    let noise = normal_tensor(&[2, 4], 125);
    let z = crate::nn::reparameterize(g, &lat, &noise)?;
    weighted_sum(g, &z, 227)
});
check!(c_recon, 33, |s| uniform_tensor(&[2, 1, 3, 3], s, 0.0, 1.0), |g: &mut Graph, x: &Tensor| {
    let target = uniform_tensor(&[2, 1, 3, 3], 126, 0.0, 1.0);
    objectives::recon_loss(g, x, &target)
});
check!(c_loss_domain_disc, 34, |s| normal_tensor(&[3, 3], s), |g: &mut Graph, x: &Tensor| {
    let v = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    objectives::loss_domain_disc(g, x, &v, 3)
});
check!(c_loss_encoder_adv, 35, |s| normal_tensor(&[3, 3], s), |g: &mut Graph, x: &Tensor| {
    objectives::loss_encoder_adv(g, x)
});
check!(c_loss_gan_dx_real, 36, |s| normal_tensor(&[4, 1], s), |g: &mut Graph, x: &Tensor| {
    let fake = normal_tensor(&[4, 1], 127);
    Ok(objectives::loss_gan(g, x, &fake)?.0)
});
check!(c_loss_gan_dx_fake, 37, |s| normal_tensor(&[4, 1], s), |g: &mut Graph, x: &Tensor| {
    let real = normal_tensor(&[4, 1], 128);
    Ok(objectives::loss_gan(g, &real, x)?.0)
});
check!(c_loss_gan_g, 38, |s| normal_tensor(&[4, 1], s), |g: &mut Graph, x: &Tensor| {
    let real = normal_tensor(&[4, 1], 129);
    Ok(objectives::loss_gan(g, &real, x)?.1)
});
check!(c_loss_cls, 39, |s| normal_tensor(&[2, 3], s), |g: &mut Graph, x: &Tensor| {
    let real_logits = normal_tensor(&[2, 3], 130);
    let v_bar = Tensor::from_vec(&[2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let v_c = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    objectives::loss_cls(g, x, &v_bar, &real_logits, &v_c, 3)
});
check!(c_loss_aux, 40, |s| normal_tensor(&[4, 5], s), |g: &mut Graph, x: &Tensor| {
    let labels = vec![Some(0), Some(2), Some(4), Some(1)];
    let mask = vec![true, false, true, true];
    objectives::loss_aux(g, x, &labels, &mask)
});

/// Unequal weights so every output slot contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, y: &Tensor, seed: u64) -> Result<Tensor> {
    let w = uniform_tensor(y.shape(), seed, 0.5, 1.5);
    let wy = g.mul(y, &w)?;
    g.sum(&wy, None)
}

/// Values bounded away from zero (for relu-style kinks).
fn kink_free(shape: &[usize], seed: u64, margin: f64) -> Tensor {
    let t = normal_tensor(shape, seed);
    let data = t
        .data()
        .iter()
        .map(|&v| if v.abs() < margin { margin.copysign(v + f64::MIN_POSITIVE) } else { v })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Values bounded away from the clamp edges used in `c_clamp`.
fn clamp_safe(shape: &[usize], seed: u64) -> Tensor {
    let t = uniform_tensor(shape, seed, -1.4, 1.4);
    let data = t
        .data()
        .iter()
        .map(|&v| {
            if (v.abs() - 0.8).abs() < 0.05 {
                if v.abs() > 0.8 {
                    v + 0.1f64.copysign(v)
                } else {
                    v - 0.1f64.copysign(v)
                }
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

const CHECKS: &[(&str, CheckFn)] = &[
    ("add.a", c_add_a),
    ("add.scalar", c_add_scalar),
    ("sub", c_sub),
    ("mul", c_mul),
    ("mul.scalar_operand", c_mul_scalar_operand),
    ("neg", c_neg),
    ("exp", c_exp),
    ("log", c_log),
    ("sigmoid", c_sigmoid),
    ("tanh", c_tanh),
    ("leaky_relu", c_leaky_relu),
    ("clamp", c_clamp),
    ("matmul.a", c_matmul_a),
    ("matmul.b", c_matmul_b),
    ("bias_add.x", c_bias_add_x),
    ("bias_add.b", c_bias_add_b),
    ("conv2d.x", c_conv2d_x),
    ("conv2d.w", c_conv2d_w),
    ("conv2d.bias", c_conv2d_bias),
    ("conv2d_transpose.x", c_convt2d_x),
    ("conv2d_transpose.w", c_convt2d_w),
    ("conv2d_transpose.bias", c_convt2d_bias),
    ("sum", c_sum_all),
    ("mean", c_mean_all),
    ("sum.axes", c_sum_axes),
    ("mean.axes", c_mean_axes),
    ("concat", c_concat),
    ("reshape", c_reshape),
    ("softmax_cross_entropy", c_softmax_ce),
    ("kl_divergence.mu", c_kl_mu),
    ("kl_divergence.logvar", c_kl_logvar),
    ("reparameterize", c_reparameterize),
    ("recon_loss", c_recon),
    ("loss_domain_disc", c_loss_domain_disc),
    ("loss_encoder_adv", c_loss_encoder_adv),
    ("loss_gan.dx.real", c_loss_gan_dx_real),
    ("loss_gan.dx.fake", c_loss_gan_dx_fake),
    ("loss_gan.g", c_loss_gan_g),
    ("loss_cls", c_loss_cls),
    ("loss_aux", c_loss_aux),
];

/// Registered check names.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs the suite. `scope` restricts to checks whose name contains the given
/// substring; `sabotage` doubles the analytic gradient of the named check (a
/// test fixture proving the oracle can fail).
pub fn run_suite(scope: Option<&str>, sabotage: Option<&str>) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for (name, f) in CHECKS {
        if let Some(filter) = scope {
            if filter != "all" && !name.contains(filter) {
                continue;
            }
        }
        let scale = if sabotage == Some(*name) { 2.0 } else { 1.0 };
        let max_rel_err = f(scale)?;
        reports.push(CheckReport {
            name,
            max_rel_err,
            pass: max_rel_err < THRESHOLD,
        });
    }
    Ok(reports)
}
