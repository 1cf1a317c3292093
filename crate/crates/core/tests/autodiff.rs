mod common;

use common::*;
use proptest::prelude::*;
use rankmixer::autodiff::{grad_check, grad_check_multi, grad_check_with, Graph, Tensor};
use rankmixer::Error;

const H: f64 = 1e-5;

#[test]
fn erf_series_reference_points() {
    assert!((erf_series(0.5) - 0.520_499_877_813_046_5).abs() < 1e-15);
    assert!((erf_series(1.0) - 0.842_700_792_949_714_9).abs() < 1e-15);
}

#[test]
fn gelu_values_match_series_erf() {
    let mut g = Graph::new();
    let xs = [-3.0, -2.0, -0.5, 0.0, 0.3, 1.0, 2.0, 2.5];
    let x = g.constant(Tensor::vector(xs.to_vec()));
    let y = g.gelu(x);
    for (&xi, &yi) in xs.iter().zip(g.value(y).data()) {
        assert!((yi - gelu_oracle(xi)).abs() < 1e-14, "gelu({xi}) = {yi}");
    }
    assert_eq!(g.value(y).data()[3], 0.0);
    assert!((gelu_oracle(1.0) - 0.841_344_746).abs() < 1e-9);
}

#[test]
fn gelu_gradient_at_reference_points() {
    for &x in &[-2.0, -0.5, 0.3, 2.0] {
        let r = grad_check(|g, v| Ok(g.gelu(v)), &Tensor::vector(vec![x]), H, 1e-6).unwrap();
        assert!(r.passed, "{r}");
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    let a = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
    let err = g.matmul(a, a).unwrap_err().to_string();
    assert!(err.contains("[1, 2]"), "{err}");
}

#[test]
fn matmul_gradient_random_3x4_by_4x2() {
    let mut r = rng(3);
    let inputs = [random_tensor(&mut r, &[3, 4], 1.0), random_tensor(&mut r, &[4, 2], 1.0)];
    let rep = grad_check_multi(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 9)
        },
        &inputs,
        H,
        1e-6,
    )
    .unwrap();
    assert!(rep.passed, "{rep}");
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let ones = g.constant(Tensor::vector(vec![1.0; 4]));
    let zeros = g.constant(Tensor::zeros(&[4]));
    let x = g.constant(Tensor::new(vec![1, 4], vec![1.0; 4]).unwrap());
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));

    let gain = g.constant(Tensor::vector(vec![1.0; 2]));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-10 && (d[1] - 1.0).abs() < 1e-10, "{d:?}");

    // an empty last axis cannot even be materialized
    assert!(matches!(Tensor::new(vec![2, 0], vec![]), Err(Error::Shape(_))));
    // gain of the wrong width is rejected
    let x = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let e = g.constant(Tensor::vector(vec![1.0, 1.0]));
    assert!(matches!(g.layer_norm(x, e, e, 1e-5), Err(Error::Shape(_))));
}

#[test]
fn layer_norm_gradient_random_2x8() {
    let mut r = rng(5);
    let inputs = [random_tensor(&mut r, &[2, 8], 2.0), random_tensor(&mut r, &[8], 1.0), random_tensor(&mut r, &[8], 1.0)];
    let rep = grad_check_multi(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, 4)
        },
        &inputs,
        H,
        1e-5,
    )
    .unwrap();
    assert!(rep.passed, "{rep}");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn bce_gradient_at_zero_logit() {
    let mut g = Graph::new();
    let z = g.leaf(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
    let l = g.bce_with_logits(z, &[1.0]).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(z).unwrap(), &[-0.5]);
}

#[test]
fn non_scalar_loss_is_contract_error() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
    let y = g.gelu(x);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn unreachable_leaf_has_no_grad() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0]));
    let unused = g.leaf(Tensor::vector(vec![2.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(unused).is_none());
    assert!(g.grad_tensor(unused).data().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_check_square() {
    let rep = grad_check(|g, x| Ok(g.mul(x, x)?), &Tensor::vector(vec![3.0]), H, 1e-8).unwrap();
    assert!(rep.passed, "{rep}");
    assert_eq!(rep.coordinates[0].analytic, 6.0);
    assert!((rep.coordinates[0].numeric - 6.0).abs() < 1e-8);
}

#[test]
fn grad_check_rejects_bad_step_and_non_finite_value() {
    let x = Tensor::vector(vec![1.0]);
    assert!(matches!(grad_check(|g, v| Ok(g.sum(v)), &x, 1e-2, 1e-4), Err(Error::Domain(_))));
    assert!(matches!(grad_check(|g, v| Ok(g.sum(v)), &x, 1e-9, 1e-4), Err(Error::Domain(_))));
    let inf = Tensor::vector(vec![f64::INFINITY]);
    assert!(matches!(grad_check(|g, v| Ok(g.sum(v)), &inf, 1e-5, 1e-4), Err(Error::Evaluation(_))));
}

#[test]
fn chain_layer_norm_gelu_matmul_bce() {
    let mut r = rng(11);
    let inputs = [
        random_tensor(&mut r, &[4, 6], 1.0),
        random_tensor(&mut r, &[6], 1.0),
        random_tensor(&mut r, &[6], 0.5),
        random_tensor(&mut r, &[6, 1], 1.0),
    ];
    let rep = grad_check_multi(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let y = g.gelu(y);
            let z = g.matmul(y, v[3])?;
            g.bce_with_logits(z, &[1.0, 0.0, 1.0, 1.0])
        },
        &inputs,
        H,
        1e-4,
    )
    .unwrap();
    assert!(rep.passed, "{rep}");
}

#[test]
fn corrupted_gelu_backward_is_flagged() {
    let mut r = rng(13);
    let inputs = [random_away_from_zero(&mut r, &[2, 3], 0.2), random_tensor(&mut r, &[3, 2], 1.0)];
    let f = |g: &mut Graph, v: &[rankmixer::Var]| {
        let h = g.matmul(v[0], v[1])?;
        let y = g.gelu(v[0]);
        let a = weighted_sum(g, y, 1)?;
        let b = weighted_sum(g, h, 2)?;
        g.add(a, b)
    };
    let rep = grad_check_with(f, &inputs, H, 1e-4, |g| g.corrupt_gelu_backward(1.01)).unwrap();
    assert!(!rep.passed);
    // only the gelu input is affected; the matmul-only weight stays clean
    assert!(rep.failures().all(|c| c.input == 0), "{rep}");
    assert!(rep.failures().count() > 0);
    assert!(rep.to_string().contains("FAIL"));
}

#[test]
fn every_op_passes_at_five_random_points() {
    for (name, shapes, f) in op_catalog() {
        for point in 0..5u64 {
            let mut r = rng(100 + point);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random_away_from_zero(&mut r, s, 0.05)).collect();
            let rep = grad_check_multi(&f, &inputs, H, 1e-4).unwrap();
            assert!(rep.passed, "{name} at point {point}: {rep}");
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = rng(21);
        let mut g = Graph::new();
        let x = g.leaf(random_tensor(&mut r, &[4, 8], 1.0));
        let w = g.leaf(random_tensor(&mut r, &[8, 3], 1.0));
        let y = g.matmul(x, w).unwrap();
        let y = g.gelu(y);
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn concat_then_split_is_identity(b in 1usize..4, w1 in 1usize..5, w2 in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a0 = random_tensor(&mut r, &[b, w1], 1.0);
        let b0 = random_tensor(&mut r, &[b, w2], 1.0);
        let mut g = Graph::new();
        let a = g.leaf(a0.clone());
        let bb = g.leaf(b0.clone());
        let c = g.concat_last(&[a, bb]).unwrap();
        let parts = g.split_last(c, &[w1, w2]).unwrap();
        prop_assert_eq!(g.value(parts[0]).data(), a0.data());
        prop_assert_eq!(g.value(parts[1]).data(), b0.data());
        let la = weighted_sum(&mut g, parts[0], seed ^ 1).unwrap();
        let lb = weighted_sum(&mut g, parts[1], seed ^ 2).unwrap();
        let l = g.add(la, lb).unwrap();
        g.backward(l).unwrap();
        // the gradient reaching each input equals its weighting tensor
        let mut g2 = Graph::new();
        let a2 = g2.leaf(a0);
        let b2 = g2.leaf(b0);
        let la2 = weighted_sum(&mut g2, a2, seed ^ 1).unwrap();
        let lb2 = weighted_sum(&mut g2, b2, seed ^ 2).unwrap();
        let l2 = g2.add(la2, lb2).unwrap();
        g2.backward(l2).unwrap();
        prop_assert_eq!(g.grad(a).unwrap(), g2.grad(a2).unwrap());
        prop_assert_eq!(g.grad(bb).unwrap(), g2.grad(b2).unwrap());
    }

    #[test]
    fn backward_is_linear(ca in -3.0f64..3.0, cb in -3.0f64..3.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x0 = random_tensor(&mut r, &[3, 4], 1.0);
        let w0 = random_tensor(&mut r, &[4, 2], 1.0);
        let losses = |g: &mut Graph, x, w| {
            let h = g.matmul(x, w).unwrap();
            let h = g.gelu(h);
            let l1 = weighted_sum(g, h, 7).unwrap();
            let (one, zero) = (g_ones(g, 4), g_zeros(g, 4));
            let n = g.layer_norm(x, one, zero, 1e-5).unwrap();
            let l2 = weighted_sum(g, n, 8).unwrap();
            (l1, l2)
        };
        let grads = |a: f64, b: f64| {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone());
            let w = g.leaf(w0.clone());
            let (l1, l2) = losses(&mut g, x, w);
            let s1 = g.scale(l1, a);
            let s2 = g.scale(l2, b);
            let l = g.add(s1, s2).unwrap();
            g.backward(l).unwrap();
            g.grad_tensor(x).data().to_vec()
        };
        let combined = grads(ca, cb);
        let g1 = grads(1.0, 0.0);
        let g2 = grads(0.0, 1.0);
        for i in 0..combined.len() {
            let lin = ca * g1[i] + cb * g2[i];
            prop_assert!((combined[i] - lin).abs() <= 1e-12 * (1.0 + lin.abs()), "{} vs {}", combined[i], lin);
        }
    }
}

fn g_ones(g: &mut Graph, n: usize) -> rankmixer::Var {
    g.constant(Tensor::vector(vec![1.0; n]))
}

fn g_zeros(g: &mut Graph, n: usize) -> rankmixer::Var {
    g.constant(Tensor::zeros(&[n]))
}
