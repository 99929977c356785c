use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqmir_core::numerics::{
    check_gradients, AttentionMeta, GradCheckConfig, Graph, ParamStore, Tensor, Var,
};
use vqmir_core::Error;

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn strict() -> GradCheckConfig {
    GradCheckConfig {
        tolerance: 1e-6,
        ..Default::default()
    }
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut g = Graph::new();
    let eye = g
        .constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]))
        .unwrap();
    let m = g
        .constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]))
        .unwrap();
    let p = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]])).unwrap();
    let b = g
        .constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]))
        .unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[1, 1]);
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamStore::new();
    let a = ps.add("a", random_tensor(&[3, 4], &mut rng));
    let b = ps.add("b", random_tensor(&[4, 2], &mut rng));
    let report = check_gradients(
        &mut ps,
        |g, p| {
            let (va, vb) = (g.param(p, a), g.param(p, b));
            let c = g.matmul(va, vb)?;
            g.sum(c)
        },
        &strict(),
    )
    .unwrap();
    assert_eq!(report.checked.len(), 20);
    assert!(report.passed(), "{report}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g
        .constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]))
        .unwrap();
    let s = g.softmax(x).unwrap();
    for v in g.value(s).data() {
        assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
    }
    let x = g.constant(Tensor::from_rows(&[vec![1000.0, 0.0]])).unwrap();
    let s = g.softmax(x).unwrap();
    assert_abs_diff_eq!(g.value(s).data()[0], 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(g.value(s).data()[1], 0.0, epsilon = 1e-12);
    let x = g
        .constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]))
        .unwrap();
    let s = g.softmax(x).unwrap();
    let expected = [0.09003, 0.24473, 0.66524];
    for (v, e) in g.value(s).data().iter().zip(expected) {
        assert_abs_diff_eq!(*v, e, epsilon = 5e-6);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-1e4f64..1e4, 1..40)) {
        let mut g = Graph::new();
        let n = row.len();
        let x = g.constant(Tensor::new(vec![1, n], row).unwrap()).unwrap();
        let s = g.softmax(x).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(g.value(s).data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random_tensor(&[2, 3], &mut rng);
        let w0 = random_tensor(&[3, 3], &mut rng);
        // L1 = sum(gelu(x W)), L2 = sum((x W)^2)
        let grad = |ca: f64, cb: f64| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone(), true).unwrap();
            let w = g.constant(w0.clone()).unwrap();
            let h = g.matmul(x, w).unwrap();
            let act = g.gelu(h).unwrap();
            let l1 = g.sum(act).unwrap();
            let sq = g.square(h).unwrap();
            let l2 = g.sum(sq).unwrap();
            let s1 = g.scale(l1, ca).unwrap();
            let s2 = g.scale(l2, cb).unwrap();
            let tot = g.add(s1, s2).unwrap();
            g.backward(tot).unwrap().wrt(x).unwrap().to_vec()
        };
        let combined = grad(a, b);
        let g1 = grad(1.0, 0.0);
        let g2 = grad(0.0, 1.0);
        for i in 0..combined.len() {
            prop_assert!((combined[i] - (a * g1[i] + b * g2[i])).abs() < 1e-10);
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::full(&[4], 1.0)).unwrap();
    let bias = g.constant(Tensor::zeros(&[4])).unwrap();
    let x = g.constant(Tensor::full(&[1, 4], 7.5)).unwrap();
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let gain = g.constant(Tensor::full(&[2], 1.0)).unwrap();
    let bias = g.constant(Tensor::zeros(&[2])).unwrap();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 3.0]])).unwrap();
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    assert_abs_diff_eq!(g.value(y).data()[0], -1.0, epsilon = 1e-9);
    assert_abs_diff_eq!(g.value(y).data()[1], 1.0, epsilon = 1e-9);
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamStore::new();
    let x = ps.add("x", random_tensor(&[2, 8], &mut rng));
    let gain = ps.add("gain", random_tensor(&[8], &mut rng));
    let bias = ps.add("bias", random_tensor(&[8], &mut rng));
    let weights = random_tensor(&[2, 8], &mut rng);
    let report = check_gradients(
        &mut ps,
        |g, p| {
            let (vx, vg, vb) = (g.param(p, x), g.param(p, gain), g.param(p, bias));
            let y = g.layer_norm(vx, vg, vb, 1e-5)?;
            let w = g.constant(weights.clone())?;
            let yw = g.mul(y, w)?;
            g.sum(yw)
        },
        &GradCheckConfig {
            tolerance: 1e-5,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[3, 2048])).unwrap();
    let l = g
        .cross_entropy(logits, &[0, 5, 2047], &[true; 3], None)
        .unwrap();
    assert_abs_diff_eq!(g.scalar(l), 2048f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(g.scalar(l), 7.6246, epsilon = 1e-4);

    let logits = g
        .constant(Tensor::from_rows(&[vec![0.0, 500.0, 0.0]]))
        .unwrap();
    let l = g.cross_entropy(logits, &[1], &[true], None).unwrap();
    assert!(g.scalar(l) < 1e-200);

    let logits = g
        .constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]))
        .unwrap();
    let l = g.cross_entropy(logits, &[2], &[true], None).unwrap();
    assert_abs_diff_eq!(g.scalar(l), 0.40761, epsilon = 5e-6);

    let logits = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let err = g
        .cross_entropy(logits, &[0, 1], &[false, false], None)
        .unwrap_err();
    assert!(matches!(err, Error::NoSupervisedPositions));
    assert_eq!(err.to_string(), "no supervised positions");
}

#[test]
fn cross_entropy_weights_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamStore::new();
    let logits = ps.add("logits", random_tensor(&[5, 4], &mut rng));
    let weights = [2.0, 0.5, 1.0, 1.5];
    let report = check_gradients(
        &mut ps,
        |g, p| {
            let v = g.param(p, logits);
            g.cross_entropy(
                v,
                &[0, 3, 1, 2, 0],
                &[true, false, true, true, true],
                Some(&weights),
            )
        },
        &strict(),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn huber_examples() {
    let mut g = Graph::new();
    let pred = g.constant(Tensor::from_rows(&[vec![0.5, -0.25]])).unwrap();
    let same = Tensor::from_rows(&[vec![0.5, -0.25]]);
    let l = g.huber(pred, &same, 1.0, &[true, true]).unwrap();
    assert_eq!(g.scalar(l), 0.0);

    let pred = g.constant(Tensor::from_rows(&[vec![0.5]])).unwrap();
    let l = g
        .huber(pred, &Tensor::zeros(&[1, 1]), 1.0, &[true])
        .unwrap();
    assert_abs_diff_eq!(g.scalar(l), 0.125, epsilon = 1e-15);

    let pred = g.constant(Tensor::from_rows(&[vec![3.0]])).unwrap();
    let l = g
        .huber(pred, &Tensor::zeros(&[1, 1]), 1.0, &[true])
        .unwrap();
    assert_abs_diff_eq!(g.scalar(l), 2.5, epsilon = 1e-15);

    let pred = g.constant(Tensor::zeros(&[1, 2])).unwrap();
    assert!(g
        .huber(pred, &Tensor::zeros(&[1, 2]), 1.0, &[false, false])
        .is_err());
}

#[test]
fn huber_kink_is_excluded_from_gradient_check() {
    let mut ps = ParamStore::new();
    let x = ps.add("x", Tensor::from_rows(&[vec![1.0]]));
    let report = check_gradients(
        &mut ps,
        |g, p| {
            let v = g.param(p, x);
            g.huber(v, &Tensor::zeros(&[1, 1]), 1.0, &[true])
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.checked.is_empty());
    assert_eq!(report.excluded, vec![("x".to_string(), 0)]);

    // away from the kink both branches check out
    let mut ps = ParamStore::new();
    let x = ps.add("x", Tensor::from_rows(&[vec![0.4, -2.7, 1.8, -0.3]]));
    let report = check_gradients(
        &mut ps,
        |g, p| {
            let v = g.param(p, x);
            g.huber(v, &Tensor::zeros(&[1, 4]), 1.0, &[true; 4])
        },
        &strict(),
    )
    .unwrap();
    assert_eq!(report.checked.len(), 4);
    assert!(report.passed(), "{report}");
}

#[test]
fn backward_simple_derivatives() {
    let x0 = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.5]).unwrap();
    let mut g = Graph::new();
    let x = g.leaf(x0.clone(), true).unwrap();
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[1.0; 6]);

    let mut g = Graph::new();
    let x = g.leaf(x0.clone(), true).unwrap();
    let xx = g.mul(x, x).unwrap();
    let s = g.sum(xx).unwrap();
    let grads = g.backward(s).unwrap();
    let expected: Vec<f64> = x0.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(grads.wrt(x).unwrap(), expected.as_slice());
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]), true).unwrap();
    assert!(matches!(g.backward(x), Err(Error::Autodiff(_))));

    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]), true).unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Autodiff(_))));
}

#[test]
fn gradients_must_be_reset_between_steps() {
    let mut ps = ParamStore::new();
    let w = ps.add("w", Tensor::full(&[3], 2.0));
    let run = |ps: &mut ParamStore| -> vqmir_core::Result<()> {
        let mut g = Graph::new();
        let v = g.param(ps, w);
        let s = g.sum(v)?;
        g.backward_into(s, ps)?;
        Ok(())
    };
    run(&mut ps).unwrap();
    assert!(run(&mut ps).is_err());
    ps.zero_grad();
    run(&mut ps).unwrap();
    assert_eq!(ps.grad(w), &[1.0; 3]);
}

#[test]
fn non_finite_values_are_surfaced() {
    let mut g = Graph::new();
    assert!(matches!(
        g.leaf(Tensor::from_rows(&[vec![f64::NAN]]), false),
        Err(Error::NonFinite { .. })
    ));
    let x = g.constant(Tensor::from_rows(&[vec![1e200]])).unwrap();
    assert!(matches!(
        g.square(x),
        Err(Error::NonFinite { op: "square" })
    ));
}

#[test]
fn check_gradients_on_square() {
    let mut ps = ParamStore::new();
    let x = ps.add("x", Tensor::scalar(3.0));
    let report = check_gradients(
        &mut ps,
        |g, p| {
            let v = g.param(p, x);
            g.mul(v, v)
        },
        &strict(),
    )
    .unwrap();
    assert!(report.passed());
    assert_eq!(report.checked[0].analytic, 6.0);
    assert_abs_diff_eq!(report.checked[0].numeric, 6.0, epsilon = 1e-8);
}

fn check(ps: &mut ParamStore, f: impl FnMut(&mut Graph, &ParamStore) -> vqmir_core::Result<Var>) {
    let report = check_gradients(
        ps,
        f,
        &GradCheckConfig {
            samples: 400,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report}");
    assert!(report.excluded.is_empty());
}

/// Random linear functional so every output coordinate matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> vqmir_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(random_tensor(&shape, &mut rng))?;
    let yw = g.mul(y, w)?;
    g.sum(yw)
}

#[test]
fn attention_gradient_with_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamStore::new();
    let q = ps.add("q", random_tensor(&[2 * 5, 4], &mut rng));
    let k = ps.add("k", random_tensor(&[2 * 5, 4], &mut rng));
    let v = ps.add("v", random_tensor(&[2 * 5, 4], &mut rng));
    let meta = AttentionMeta {
        batch: 2,
        seq_len: 5,
        n_heads: 2,
    };
    check(&mut ps, |g, p| {
        let (vq, vk, vv) = (g.param(p, q), g.param(p, k), g.param(p, v));
        let o = g.attention(vq, vk, vv, meta, &[5, 3])?;
        project(g, o, 9)
    });
}

#[test]
fn attention_single_key_is_identity_on_values() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::from_rows(&[vec![0.3, -1.0]])).unwrap();
    let k = g.constant(Tensor::from_rows(&[vec![2.0, 0.5]])).unwrap();
    let v = g.constant(Tensor::from_rows(&[vec![4.0, -6.0]])).unwrap();
    let meta = AttentionMeta {
        batch: 1,
        seq_len: 1,
        n_heads: 1,
    };
    let o = g.attention(q, k, v, meta, &[1]).unwrap();
    assert_eq!(g.value(o).data(), &[4.0, -6.0]);
}

#[test]
fn gather_pool_and_gelu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParamStore::new();
    let table = ps.add("table", random_tensor(&[6, 3], &mut rng));
    check(&mut ps, |g, p| {
        let t = g.param(p, table);
        let rows = g.gather_rows(t, &[0, 2, 2, 5, 1, 0])?;
        let act = g.gelu(rows)?;
        let pooled = g.mean_pool(act, 3, &[3, 2])?;
        project(g, pooled, 10)
    });
}

#[test]
fn conv_and_layout_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ps = ParamStore::new();
    let x = ps.add("x", random_tensor(&[2, 2, 8], &mut rng));
    let w = ps.add("w", random_tensor(&[3, 2, 4], &mut rng));
    let b = ps.add("b", random_tensor(&[3], &mut rng));
    let wt = ps.add("wt", random_tensor(&[3, 2, 4], &mut rng));
    let bt = ps.add("bt", random_tensor(&[2], &mut rng));
    check(&mut ps, |g, p| {
        let (vx, vw, vb, vwt, vbt) = (
            g.param(p, x),
            g.param(p, w),
            g.param(p, b),
            g.param(p, wt),
            g.param(p, bt),
        );
        let h = g.conv1d(vx, vw, vb, 2, 1)?; // [2,3,4]
        let rows = g.channels_last(h)?;
        let back = g.channels_first(rows, 2)?;
        let up = g.conv_transpose1d(back, vwt, vbt, 2, 1)?; // [2,2,8]
        let cut = g.slice_time(up, 1, 6)?;
        project(g, cut, 11)
    });
}

#[test]
fn straight_through_and_dropout_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamStore::new();
    let x = ps.add("x", random_tensor(&[4, 3], &mut rng));
    check(&mut ps, |g, p| {
        let vx = g.param(p, x);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
        let d = g.dropout(vx, 0.3, &mut drop_rng)?;
        let sq = g.square(d)?;
        project(g, sq, 12)
    });

    // straight-through copies the upstream gradient verbatim
    let mut g = Graph::new();
    let vx = g.leaf(random_tensor(&[2, 2], &mut rng), true).unwrap();
    let q = g.straight_through(vx, Tensor::full(&[2, 2], 0.5)).unwrap();
    assert_eq!(g.value(q).data(), &[0.5; 4]);
    let sq = g.square(q).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(vx).unwrap(), grads.wrt(q).unwrap());
    assert_eq!(grads.wrt(vx).unwrap(), &[1.0; 4]);
}

#[test]
fn determinism_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g = Graph::new();
        let a = g.constant(random_tensor(&[8, 8], &mut rng)).unwrap();
        let b = g.constant(random_tensor(&[8, 8], &mut rng)).unwrap();
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c).unwrap();
        let l = g.cross_entropy(s, &[1; 8], &[true; 8], None).unwrap();
        g.scalar(l).to_bits()
    };
    assert_eq!(run(), run());
}
