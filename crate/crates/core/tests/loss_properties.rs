use msml::gradcheck::{numeric_gradient, relative_error};
use msml::{msml, sigmoid_bce, LabelVector, Logits, Tensor};
use proptest::prelude::*;

mod common;
use common::naive_sigmoid;

/// Logits in a moderate range plus labels with at least one positive and one negative.
fn mixed_case() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..10).prop_flat_map(|c| {
        (
            prop::collection::vec(-8.0f64..8.0, c),
            prop::collection::vec(0u8..=1, c).prop_filter("need both signs", |b| b.contains(&0) && b.contains(&1)),
        )
    })
}

fn any_case() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (1usize..10).prop_flat_map(|c| {
        (
            prop::collection::vec(-30.0f64..30.0, c),
            prop::collection::vec(0u8..=1, c),
        )
    })
}

fn eval(x: &[f64], bits: &[u8]) -> (f64, Vec<f64>) {
    msml(
        &Logits::new(x.to_vec()).unwrap(),
        &LabelVector::new(bits.to_vec()).unwrap(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn msml_is_shift_invariant((x, bits) in any_case(), shift in -50.0f64..50.0) {
        let (l0, g0) = eval(&x, &bits);
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let (l1, g1) = eval(&shifted, &bits);
        prop_assert!((l0 - l1).abs() <= 1e-10);
        for (a, b) in g0.iter().zip(&g1) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn msml_is_nonnegative_with_signed_gradient((x, bits) in any_case()) {
        let (loss, grad) = eval(&x, &bits);
        prop_assert!(loss >= 0.0);
        for (g, b) in grad.iter().zip(&bits) {
            if *b == 1 { prop_assert!(*g <= 0.0) } else { prop_assert!(*g >= 0.0) }
        }
    }

    #[test]
    fn msml_degenerate_label_sets_contribute_nothing(x in prop::collection::vec(-30.0f64..30.0, 1..10)) {
        for bits in [vec![1u8; x.len()], vec![0u8; x.len()]] {
            let (loss, grad) = eval(&x, &bits);
            prop_assert_eq!(loss, 0.0);
            prop_assert!(grad.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn msml_is_permutation_equivariant((x, bits) in mixed_case(), rot in 0usize..10) {
        let c = x.len();
        let perm: Vec<usize> = (0..c).map(|i| (i + rot) % c).collect();
        let (l0, g0) = eval(&x, &bits);
        let px: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let pb: Vec<u8> = perm.iter().map(|&i| bits[i]).collect();
        let (l1, g1) = eval(&px, &pb);
        prop_assert!((l0 - l1).abs() <= 1e-12);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((g1[k] - g0[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn raising_a_positive_logit_lowers_msml((x, bits) in mixed_case(), bump in 0.01f64..2.0) {
        let l = bits.iter().position(|&b| b == 1).unwrap();
        let mut up = x.clone();
        up[l] += bump;
        prop_assert!(eval(&up, &bits).0 < eval(&x, &bits).0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn msml_gradient_matches_finite_differences((x, bits) in mixed_case()) {
        let (_, grad) = eval(&x, &bits);
        let t = Tensor::vector(x.clone());
        let coords: Vec<usize> = (0..x.len()).collect();
        let numeric = numeric_gradient(&t, &coords, |t| Ok(eval(t.data(), &bits).0)).unwrap();
        prop_assert!(relative_error(&grad, &numeric) <= 1e-6);
    }

    #[test]
    fn bce_gradient_is_sigmoid_minus_label((x, bits) in any_case()) {
        let labels = LabelVector::new(bits.clone()).unwrap();
        let (loss, grad) = sigmoid_bce(&Logits::new(x.clone()).unwrap(), &labels).unwrap();
        prop_assert!(loss >= 0.0);
        for ((g, xi), y) in grad.iter().zip(&x).zip(&bits) {
            let z = naive_sigmoid(*xi);
            prop_assert!((g - (z - f64::from(*y))).abs() <= 4.0 * f64::EPSILON);
        }
    }
}

#[test]
fn msml_stays_finite_for_extreme_logits() {
    let (loss, grad) = eval(&[800.0, -800.0, 790.0], &[0, 1, 0]);
    assert!(loss.is_finite() && grad.iter().all(|g| g.is_finite()));
    assert!((loss - (1600.0 + (-10.0f64).exp().ln_1p())).abs() < 1e-9);
}
