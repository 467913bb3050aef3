//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! The computational substrate for everything else in the crate: a [`Tensor`]
//! value type, a per-step [`Graph`] tape, and [`grad_check`] as the
//! finite-difference oracle that keeps every backward rule honest.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{grad_check, grad_check_scaled};
pub use graph::{CeTarget, Gradients, Graph};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::UfdnError;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn seeded(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = crate::rng::rng_for(seed, 0xEC, 0);
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| crate::rng::uniform(&mut rng, lo, hi))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    // -- matmul ---------------------------------------------------------------

    #[test]
    fn matmul_identity() {
        let mut g = Graph::inference();
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let v = t(&[2, 1], &[5.0, 7.0]);
        let y = g.matmul(&i2, &v).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut g = Graph::inference();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        let y = g.matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let mut g = Graph::inference();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = g.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let b = seeded(&[3, 2], 1, -1.0, 1.0);
        let a = seeded(&[2, 3], 2, -1.0, 1.0);
        let err = grad_check(
            |g, x| {
                let y = g.matmul(x, &b)?;
                g.sum(&y, None)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "matmul dA error {err}");
        let err = grad_check(
            |g, x| {
                let y = g.matmul(&a, x)?;
                g.sum(&y, None)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "matmul dB error {err}");
    }

    // -- elementwise ------------------------------------------------------------

    #[test]
    fn elementwise_definitions() {
        let mut g = Graph::inference();
        let x = t(&[1], &[-1.0]);
        assert_eq!(g.leaky_relu(&x, 0.2).unwrap().data(), &[-0.2]);
        let z = t(&[1], &[0.0]);
        assert_eq!(g.sigmoid(&z).unwrap().data(), &[0.5]);
    }

    #[test]
    fn log_exp_identity() {
        let mut g = Graph::inference();
        for i in 0..21 {
            let x = -5.0 + i as f64 * 0.5;
            let xt = Tensor::scalar(x);
            let e = g.exp(&xt).unwrap();
            let y = g.log(&e).unwrap();
            assert!((y.item().unwrap() - x).abs() < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn binary_requires_same_shape_or_scalar() {
        let mut g = Graph::inference();
        let a = t(&[2, 2], &[1.0; 4]);
        let b = t(&[2, 1], &[1.0; 2]);
        assert!(matches!(
            g.add(&a, &b),
            Err(UfdnError::Dimension(_))
        ));
        let s = Tensor::scalar(3.0);
        assert_eq!(g.add(&a, &s).unwrap().data(), &[4.0; 4]);
        assert_eq!(g.sub(&s, &a).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        // Sample away from the relu/clamp kinks.
        let x = seeded(&[2, 3], 3, 0.2, 1.0);
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph, &Tensor) -> crate::error::Result<Tensor>>)> = vec![
            ("exp", Box::new(|g: &mut Graph, x: &Tensor| g.exp(x))),
            ("log", Box::new(|g: &mut Graph, x: &Tensor| g.log(x))),
            ("sigmoid", Box::new(|g: &mut Graph, x: &Tensor| g.sigmoid(x))),
            ("tanh", Box::new(|g: &mut Graph, x: &Tensor| g.tanh(x))),
            ("neg", Box::new(|g: &mut Graph, x: &Tensor| g.neg(x))),
            (
                "leaky_relu",
                Box::new(|g: &mut Graph, x: &Tensor| g.leaky_relu(x, 0.2)),
            ),
            (
                "clamp",
                Box::new(|g: &mut Graph, x: &Tensor| g.clamp(x, 0.05, 0.9)),
            ),
        ];
        for (name, op) in &cases {
            let err = grad_check(
                |g, x| {
                    let y = op(g, x)?;
                    g.sum(&y, None)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name} error {err}");
        }
    }

    // -- reductions ---------------------------------------------------------------

    #[test]
    fn reduce_examples() {
        let mut g = Graph::inference();
        let ones = Tensor::ones(&[2, 3]);
        assert_eq!(g.sum(&ones, None).unwrap().item().unwrap(), 6.0);
        let v = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.mean(&v, None).unwrap().item().unwrap(), 2.5);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.mean(&x, None).unwrap();
        let grads = g.backward(&y).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn axis_reduction_shapes_and_values() {
        let mut g = Graph::inference();
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rows = g.sum(&x, Some(&[1])).unwrap();
        assert_eq!(rows.shape(), &[2]);
        assert_eq!(rows.data(), &[6.0, 15.0]);
        let cols = g.mean(&x, Some(&[0])).unwrap();
        assert_eq!(cols.shape(), &[3]);
        assert_eq!(cols.data(), &[2.5, 3.5, 4.5]);
        assert!(matches!(
            g.sum(&x, Some(&[2])),
            Err(UfdnError::Dimension(_))
        ));
    }

    // -- concat --------------------------------------------------------------------

    #[test]
    fn concat_vectors() {
        let mut g = Graph::inference();
        let z = Tensor::zeros(&[64]);
        let v = Tensor::ones(&[3]);
        let zv = g.concat(&[&z, &v], 0).unwrap();
        assert_eq!(zv.shape(), &[67]);
    }

    #[test]
    fn concat_then_slice_roundtrip() {
        let mut g = Graph::inference();
        let a = seeded(&[2, 3], 4, -1.0, 1.0);
        let b = seeded(&[2, 2], 5, -1.0, 1.0);
        let c = g.concat(&[&a, &b], 1).unwrap();
        assert!(c.slice_axis(1, 0, 3).unwrap().bits_eq(&a));
        assert!(c.slice_axis(1, 3, 2).unwrap().bits_eq(&b));
    }

    #[test]
    fn concat_rejects_off_axis_mismatch() {
        let mut g = Graph::inference();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            g.concat(&[&a, &b], 1),
            Err(UfdnError::Dimension(_))
        ));
    }

    #[test]
    fn concat_backward_routes_segments() {
        let a0 = seeded(&[2, 3], 6, -1.0, 1.0);
        let b0 = seeded(&[2, 2], 7, -1.0, 1.0);
        // Weighted sum so each slot has a distinct gradient.
        let weights = t(&[2, 5], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        for (idx, probe) in [&a0, &b0].into_iter().enumerate() {
            let other = if idx == 0 { &b0 } else { &a0 };
            let err = grad_check(
                |g, x| {
                    let parts: [&Tensor; 2] = if idx == 0 { [x, other] } else { [other, x] };
                    let c = g.concat(&parts, 1)?;
                    let wc = g.mul(&c, &weights)?;
                    g.sum(&wc, None)
                },
                probe,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "concat input {idx} error {err}");
        }
    }

    // -- conv ------------------------------------------------------------------------

    #[test]
    fn conv2d_output_shape() {
        let mut g = Graph::inference();
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        let w = Tensor::zeros(&[8, 3, 4, 4]);
        let b = Tensor::zeros(&[8]);
        let y = g.conv2d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 8, 16, 16]);
    }

    #[test]
    fn conv2d_rejects_non_integral_output() {
        let mut g = Graph::inference();
        let x = Tensor::zeros(&[1, 1, 5, 5]);
        let w = Tensor::zeros(&[1, 1, 4, 4]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(
            g.conv2d(&x, &w, &b, 2, 0),
            Err(UfdnError::Config(_))
        ));
    }

    #[test]
    fn conv2d_one_by_one_ones_kernel() {
        let mut g = Graph::inference();
        let c = 0.37;
        let cin = 3;
        let x = Tensor::full(&[2, cin, 5, 5], c);
        let w = Tensor::ones(&[2, cin, 1, 1]);
        let b = Tensor::zeros(&[2]);
        let y = g.conv2d(&x, &w, &b, 1, 0).unwrap();
        for &v in y.data() {
            assert!((v - c * cin as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let x = seeded(&[2, 2, 5, 5], 8, -1.0, 1.0);
        let w = seeded(&[3, 2, 3, 3], 9, -1.0, 1.0);
        let b = seeded(&[3], 10, -0.5, 0.5);
        let err = grad_check(
            |g, p| {
                let y = g.conv2d(p, &w, &b, 2, 1)?;
                g.sum(&y, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conv2d dx error {err}");
        let err = grad_check(
            |g, p| {
                let y = g.conv2d(&x, p, &b, 2, 1)?;
                g.sum(&y, None)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conv2d dw error {err}");
        let err = grad_check(
            |g, p| {
                let y = g.conv2d(&x, &w, p, 2, 1)?;
                g.sum(&y, None)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conv2d db error {err}");
    }

    #[test]
    fn conv2d_transpose_output_shape() {
        let mut g = Graph::inference();
        let x = Tensor::zeros(&[1, 8, 16, 16]);
        let w = Tensor::zeros(&[8, 3, 4, 4]);
        let b = Tensor::zeros(&[3]);
        let y = g.conv2d_transpose(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 32, 32]);
    }

    #[test]
    fn conv2d_transpose_is_adjoint_of_conv2d() {
        // <conv(x), y> == <x, conv_t(y)> with shared weights and zero bias.
        let mut g = Graph::inference();
        let x = seeded(&[2, 3, 8, 8], 11, -1.0, 1.0);
        let w = seeded(&[5, 3, 4, 4], 12, -1.0, 1.0);
        let y = seeded(&[2, 5, 4, 4], 13, -1.0, 1.0);
        let b_fwd = Tensor::zeros(&[5]);
        let b_adj = Tensor::zeros(&[3]);
        let cx = g.conv2d(&x, &w, &b_fwd, 2, 1).unwrap();
        let ty = g.conv2d_transpose(&y, &w, &b_adj, 2, 1).unwrap();
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
        assert!(rel < 1e-10, "adjoint identity violated: {lhs} vs {rhs}");
    }

    #[test]
    fn conv2d_transpose_gradients_match_finite_differences() {
        let x = seeded(&[2, 3, 3, 3], 14, -1.0, 1.0);
        let w = seeded(&[3, 2, 4, 4], 15, -1.0, 1.0);
        let b = seeded(&[2], 16, -0.5, 0.5);
        let err = grad_check(
            |g, p| {
                let y = g.conv2d_transpose(p, &w, &b, 2, 1)?;
                g.sum(&y, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conv_t dx error {err}");
        let err = grad_check(
            |g, p| {
                let y = g.conv2d_transpose(&x, p, &b, 2, 1)?;
                g.sum(&y, None)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conv_t dw error {err}");
        let err = grad_check(
            |g, p| {
                let y = g.conv2d_transpose(&x, &w, p, 2, 1)?;
                g.sum(&y, None)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conv_t db error {err}");
    }

    // -- softmax cross-entropy ----------------------------------------------------

    #[test]
    fn softmax_ce_uniform_logits_one_hot() {
        let mut g = Graph::inference();
        let logits = Tensor::zeros(&[2, 3]);
        let y = g
            .softmax_cross_entropy(&logits, &CeTarget::Classes(vec![0, 2]))
            .unwrap();
        assert!((y.item().unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_saturated() {
        let mut g = Graph::inference();
        let logits = t(&[1, 2], &[10.0, -10.0]);
        let y = g
            .softmax_cross_entropy(&logits, &CeTarget::Classes(vec![0]))
            .unwrap();
        assert!(y.item().unwrap() < 1e-4);
    }

    #[test]
    fn softmax_ce_rejects_malformed_distribution() {
        let mut g = Graph::inference();
        let logits = Tensor::zeros(&[1, 3]);
        let bad = t(&[1, 3], &[0.5, 0.2, 0.2]);
        assert!(matches!(
            g.softmax_cross_entropy(&logits, &CeTarget::Distribution(bad)),
            Err(UfdnError::Validation(_))
        ));
        let neg = t(&[1, 3], &[1.5, -0.3, -0.2]);
        assert!(matches!(
            g.softmax_cross_entropy(&logits, &CeTarget::Distribution(neg)),
            Err(UfdnError::Validation(_))
        ));
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let logits = seeded(&[4, 5], 17, -2.0, 2.0);
        let err = grad_check(
            |g, x| g.softmax_cross_entropy(x, &CeTarget::Classes(vec![0, 3, 1, 4])),
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "softmax_ce error {err}");
    }

    // -- backward ---------------------------------------------------------------------

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[1.0, -2.0, 3.0]));
        let sq = g.mul(&x, &x).unwrap();
        let y = g.sum(&sq, None).unwrap();
        let grads = g.backward(&y).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_unused_leaf_gets_exact_zeros() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]));
        let y = g.leaf(&t(&[2], &[5.0, 6.0]));
        let s = g.sum(&x, None).unwrap();
        let grads = g.backward(&s).unwrap();
        let gy = grads.wrt(&y).unwrap();
        assert!(gy.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_composite_matches_finite_differences() {
        let w = seeded(&[4], 18, -1.0, 1.0);
        let x = seeded(&[4], 19, -1.0, 1.0);
        let err = grad_check(
            |g, x| {
                let xw = g.mul(x, &w)?;
                let s = g.sum(&xw, None)?;
                g.sigmoid(&s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "composite error {err}");
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]));
        let y = g.mul(&x, &x).unwrap();
        assert!(matches!(g.backward(&y), Err(UfdnError::Contract(_))));
    }

    #[test]
    fn backward_is_linear_in_the_root() {
        let (a, b) = (2.5, -1.25);
        let x0 = seeded(&[6], 20, -1.0, 1.0);
        let mut g = Graph::new();
        let x = g.leaf(&x0);
        let sq = g.mul(&x, &x).unwrap();
        let f = g.sum(&sq, None).unwrap();
        let sig = g.sigmoid(&x).unwrap();
        let q = g.sum(&sig, None).unwrap();
        let fa = g.mul_scalar(&f, a).unwrap();
        let qb = g.mul_scalar(&q, b).unwrap();
        let h = g.add(&fa, &qb).unwrap();
        let gh = g.backward(&h).unwrap().wrt(&x).unwrap();
        let gf = g.backward(&f).unwrap().wrt(&x).unwrap();
        let gq = g.backward(&q).unwrap().wrt(&x).unwrap();
        for i in 0..6 {
            let combo = a * gf.data()[i] + b * gq.data()[i];
            assert!((gh.data()[i] - combo).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_values_identical_with_and_without_recording() {
        let x = seeded(&[2, 3, 6, 6], 21, 0.0, 1.0);
        let w = seeded(&[4, 3, 4, 4], 22, -0.5, 0.5);
        let b = seeded(&[4], 23, -0.1, 0.1);
        let run = |g: &mut Graph| {
            let xt = g.leaf(&x);
            let c = g.conv2d(&xt, &w, &b, 2, 1).unwrap();
            let a = g.leaky_relu(&c, 0.2).unwrap();
            let s = g.sigmoid(&a).unwrap();
            g.sum(&s, None).unwrap()
        };
        let tracked = run(&mut Graph::new());
        let plain = run(&mut Graph::inference());
        assert_eq!(
            tracked.item().unwrap().to_bits(),
            plain.item().unwrap().to_bits()
        );
    }

    // -- grad_check self-tests -----------------------------------------------------

    #[test]
    fn grad_check_flags_sabotaged_backward() {
        let x = seeded(&[3, 3], 24, -1.0, 1.0);
        let err = grad_check_scaled(
            |g, x| {
                let y = g.tanh(x)?;
                g.sum(&y, None)
            },
            &x,
            1e-5,
            2.0,
        )
        .unwrap();
        assert!(err > 1e-1, "doubled gradient should be flagged, err {err}");
    }

    #[test]
    fn grad_check_insensitive_to_eps() {
        let x = seeded(&[8], 25, -1.0, 1.0);
        let f = |g: &mut Graph, x: &Tensor| {
            let s = g.tanh(x)?;
            let sq = g.mul(&s, &s)?;
            g.sum(&sq, None)
        };
        let errs: Vec<f64> = [1e-4, 1e-5, 1e-6]
            .iter()
            .map(|&eps| grad_check(f, &x, eps).unwrap())
            .collect();
        let lo = errs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = errs.iter().cloned().fold(0.0, f64::max);
        assert!(hi < 1e-4, "errors {errs:?}");
        assert!(
            hi / lo.max(1e-12) < 1e4,
            "eps sweep should stay within a few orders: {errs:?}"
        );
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let x = Tensor::ones(&[2]);
        assert!(grad_check(|g, x| g.sum(x, None), &x, 0.0).is_err());
        assert!(grad_check(|g, x| g.sum(x, None), &x, 0.5).is_err());
    }
}
