use adr_core::numerics::gradcheck::{compare_with_differences, grad_check, value_and_grad};
use adr_core::numerics::{
    conv2d, kl_divergence, matmul, maxpool2d, relu, soft_cross_entropy, softmax_t, Tape, Tensor,
};
use adr_core::{entropy, Error};
use approx::assert_abs_diff_eq;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_by_identity_and_hand_product() {
    let a = t(&[3, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, 1.5, -7.0, 2.0, 0.25]);
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 4] = 1.0;
    }
    assert_eq!(matmul(&a, &eye).unwrap(), a);

    let p = matmul(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), &t(&[2, 1], &[0.0, 1.0])).unwrap();
    assert_eq!(p.shape(), &[2, 1]);
    assert_eq!(p.data(), &[2.0, 4.0]);

    let z = matmul(&Tensor::zeros(&[2, 3]), &a).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn conv_unit_kernel_copies_input() {
    let x = t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
    let y = conv2d(&x, &t(&[1, 1, 1, 1], &[1.0]), 1, 0).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_of_ones_counts_window() {
    let y = conv2d(&Tensor::full(&[1, 1, 3, 3], 1.0), &Tensor::full(&[1, 1, 2, 2], 1.0), 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[4.0; 4]);
}

#[test]
fn conv_kernel_gradient_of_sum_is_window_sum() {
    let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
    let x = t(&[1, 1, 4, 4], &x);
    let (_, g) = value_and_grad(
        &|tape: &mut Tape, k| {
            let xi = tape.leaf(x.clone(), false);
            let y = tape.conv2d(xi, k, 1, 0)?;
            Ok(tape.sum(y))
        },
        &Tensor::full(&[1, 1, 2, 2], 0.5),
    )
    .unwrap();
    // Kernel entry (i, j) sees input rows i..i+3 and columns j..j+3.
    for i in 0..2 {
        for j in 0..2 {
            let mut s = 0.0;
            for r in i..i + 3 {
                for c in j..j + 3 {
                    s += x.data()[r * 4 + c];
                }
            }
            assert_abs_diff_eq!(g.data()[i * 2 + j], s, epsilon = 1e-12);
        }
    }
}

#[test]
fn conv_rejects_fractional_output_extent() {
    let err = conv2d(&Tensor::zeros(&[1, 1, 4, 4]), &Tensor::zeros(&[1, 1, 3, 3]), 2, 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn relu_and_maxpool_values() {
    assert_eq!(relu(&t(&[2], &[-1.0, 2.0])).data(), &[0.0, 2.0]);
    let m = maxpool2d(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    assert_eq!(m.data(), &[4.0]);
    assert!(matches!(maxpool2d(&Tensor::zeros(&[1, 1, 3, 2])), Err(Error::Config(_))));
}

#[test]
fn maxpool_backward_routes_to_the_maximum_only() {
    let (_, g) = value_and_grad(
        &|tape: &mut Tape, x| {
            let y = tape.maxpool2d(x)?;
            Ok(tape.sum(y))
        },
        &t(&[1, 1, 2, 4], &[1.0, 5.0, 0.5, -1.0, 3.0, 2.0, 0.25, 0.75]),
    )
    .unwrap();
    assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn softmax_with_temperature() {
    let u = softmax_t(&t(&[1, 4], &[3.0; 4]), 0.7).unwrap();
    for v in u.data() {
        assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-15);
    }
    let p = softmax_t(&t(&[1, 2], &[2.0, 0.0]), 2.0).unwrap();
    let e = std::f64::consts::E;
    assert_abs_diff_eq!(p.data()[0], e / (e + 1.0), epsilon = 1e-12);
    assert_abs_diff_eq!(p.data()[1], 1.0 / (e + 1.0), epsilon = 1e-12);
    assert_abs_diff_eq!(p.data()[0], 0.7311, epsilon = 5e-5);
    assert!(matches!(softmax_t(&p, 0.0), Err(Error::Parameter(_))));
    assert!(matches!(softmax_t(&p, -1.0), Err(Error::Parameter(_))));
}

#[test]
fn softmax_survives_huge_logits() {
    let p = softmax_t(&t(&[1, 3], &[1000.0, 999.0, -1000.0]), 1.0).unwrap();
    assert!(p.all_finite());
    assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-12);
}

#[test]
fn cross_entropy_hand_values() {
    let mut onehot = Tensor::zeros(&[1, 10]);
    onehot.data_mut()[3] = 1.0;
    let v = soft_cross_entropy(&Tensor::zeros(&[1, 10]), &onehot).unwrap();
    assert_abs_diff_eq!(v, 10f64.ln(), epsilon = 1e-12);

    let v = soft_cross_entropy(&Tensor::zeros(&[1, 3]), &t(&[1, 3], &[0.65, 0.25, 0.10])).unwrap();
    assert_abs_diff_eq!(v, 3f64.ln(), epsilon = 1e-12);

    let z = t(&[1, 4], &[0.3, -1.2, 2.0, 0.0]);
    let p = softmax_t(&z, 1.0).unwrap();
    assert_abs_diff_eq!(soft_cross_entropy(&z, &p).unwrap(), entropy(p.data()).unwrap(), epsilon = 1e-9);
}

#[test]
fn cross_entropy_rejects_negative_targets() {
    let err = soft_cross_entropy(&Tensor::zeros(&[1, 3]), &t(&[1, 3], &[1.2, -0.2, 0.0])).unwrap_err();
    assert!(matches!(err, Error::Target(_)), "{err}");
}

#[test]
fn kl_closed_form_two_classes() {
    // Clean distribution q = [2/3, 1/3], adversarial p uniform.
    let q = t(&[1, 2], &[2f64.ln(), 0.0]);
    let p = Tensor::zeros(&[1, 2]);
    let expected = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
    assert_abs_diff_eq!(kl_divergence(&p, &q).unwrap(), expected, epsilon = 1e-12);
    assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
}

#[test]
fn backward_square_and_disconnected_leaf() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let unused = tape.leaf(Tensor::full(&[2, 2], 1.0), true);
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    assert_eq!(g.get(unused).unwrap().data(), &[0.0; 4]);
}

#[test]
fn backward_needs_a_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2], 1.0), true);
    let y = tape.scale(x, 2.0);
    assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
}

#[test]
fn grad_check_linear_and_composite() {
    let w = t(&[3, 2], &[0.5, -1.0, 2.0, 0.25, -0.75, 1.5]);
    let linear = grad_check(
        |tape: &mut Tape, x| {
            let wv = tape.leaf(w.clone(), false);
            let y = tape.matmul(x, wv)?;
            Ok(tape.sum(y))
        },
        &t(&[2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]),
        1e-5,
        1e-8,
    )
    .unwrap();
    assert!(linear.passed, "{linear:?}");

    let target = t(&[2, 3], &[0.2, 0.5, 0.3, 0.9, 0.05, 0.05]);
    let composite = grad_check(
        |tape: &mut Tape, z| {
            let p = tape.softmax_t(z, 1.7)?;
            let sharpened = tape.scale(p, 3.0);
            tape.soft_cross_entropy(sharpened, &target)
        },
        &t(&[2, 3], &[0.3, -0.1, 1.2, 2.0, -0.5, 0.0]),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(composite.passed, "{composite:?}");
}

#[test]
fn corrupted_gradient_is_caught() {
    let point = t(&[3], &[0.4, -1.1, 2.0]);
    let f = |tape: &mut Tape, x| {
        let y = tape.mul(x, x)?;
        Ok(tape.sum(y))
    };
    let (_, good) = value_and_grad(&f, &point).unwrap();
    let value = |p: &Tensor| Ok(p.data().iter().map(|v| v * v).sum::<f64>());
    let coords = [0, 1, 2];
    let ok = compare_with_differences(value, &good, &point, 1e-5, 1e-4, &coords).unwrap();
    assert!(ok.passed);
    let bad = good.map(|g| g * 1.01);
    let report = compare_with_differences(value, &bad, &point, 1e-5, 1e-4, &coords).unwrap();
    assert!(!report.passed);
    assert!(report.max_rel_error > 5e-3);
}

fn logits_row(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, c)
}

proptest! {
    #[test]
    fn softmax_rows_normalize(z in logits_row(7), tau in 0.05f64..50.0) {
        let p = softmax_t(&t(&[1, 7], &z), tau).unwrap();
        prop_assert!((p.sum() - 1.0).abs() <= 1e-9);
        prop_assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn hotter_softmax_has_more_entropy(z in logits_row(5), t1 in 0.2f64..5.0, bump in 0.01f64..5.0) {
        prop_assume!(z.iter().any(|&v| (v - z[0]).abs() > 1e-3));
        let cold = softmax_t(&t(&[1, 5], &z), t1).unwrap();
        let hot = softmax_t(&t(&[1, 5], &z), t1 + bump).unwrap();
        prop_assert!(entropy(hot.data()).unwrap() >= entropy(cold.data()).unwrap() - 1e-12);
    }

    #[test]
    fn kl_is_nonnegative(p in logits_row(6), q in logits_row(6)) {
        let kl = kl_divergence(&t(&[1, 6], &p), &t(&[1, 6], &q)).unwrap();
        prop_assert!(kl >= -1e-15);
        let same = kl_divergence(&t(&[1, 6], &p), &t(&[1, 6], &p)).unwrap();
        prop_assert!(same.abs() <= 1e-15);
    }

    #[test]
    fn self_cross_entropy_is_entropy(z in logits_row(4)) {
        let z = t(&[1, 4], &z);
        let p = softmax_t(&z, 1.0).unwrap();
        let ce = soft_cross_entropy(&z, &p).unwrap();
        prop_assert!((ce - entropy(p.data()).unwrap()).abs() <= 1e-9);
    }
}
