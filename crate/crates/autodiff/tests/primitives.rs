use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rq_autodiff::{grad_check, AttentionLayout, AutodiffError, Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum so the check sees a non-trivial upstream gradient.
fn weighted_sum(t: &mut Tape, y: rq_autodiff::Var, seed: u64) -> rq_autodiff::Var {
    let w = t.constant(random(t.value(y).shape(), seed));
    let p = t.mul(y, w).unwrap();
    t.sum(p)
}

#[test]
fn matmul_identity_cases() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let i = t.constant(Tensor::identity(2));
    let out = t.matmul(a, i).unwrap();
    assert_eq!(t.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    let out = t.matmul(i, a).unwrap();
    assert_eq!(t.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(vec![2, 3]));
    let b = t.constant(Tensor::zeros(vec![2, 3]));
    match t.matmul(a, b).unwrap_err() {
        AutodiffError::Shape { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let b = random(&[4, 5], 2);
    let err = grad_check(
        |t, a| {
            let bv = t.param(b.clone());
            let y = t.matmul(a, bv)?;
            Ok(weighted_sum(t, y, 9))
        },
        &random(&[3, 4], 1),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "grad_a err {err}");
    let a = random(&[3, 4], 1);
    let err = grad_check(
        |t, b| {
            let av = t.constant(a.clone());
            let y = t.matmul(av, b)?;
            Ok(weighted_sum(t, y, 9))
        },
        &random(&[4, 5], 2),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "grad_b err {err}");
}

#[test]
fn masked_softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
    let y = t.masked_softmax(x, &[false; 3]).unwrap();
    for v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = t.constant(Tensor::new(vec![1, 2], vec![5.0, 1.0]).unwrap());
    let y = t.masked_softmax(x, &[false, true]).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 0.0]);
    let err = t.masked_softmax(x, &[true, true]).unwrap_err();
    assert_eq!(err, AutodiffError::InvalidMask { row: 0 });
}

#[test]
fn masked_softmax_jacobian_matches_finite_differences() {
    let mask = [false, true, false, false, true, false, false, false];
    for seed in 0..4 {
        let err = grad_check(
            |t, x| {
                let y = t.masked_softmax(x, &mask)?;
                Ok(weighted_sum(t, y, 100 + seed))
            },
            &random(&[1, 8], seed),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }
    // The plain sum of a softmax is constant; its gradient must vanish.
    let err = grad_check(
        |t, x| {
            let y = t.masked_softmax(x, &mask)?;
            Ok(t.sum(y))
        },
        &random(&[1, 8], 7),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6);
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let g = t.constant(Tensor::filled(vec![4], 1.0));
    let b = t.constant(Tensor::zeros(vec![4]));
    let x = t.constant(Tensor::filled(vec![1, 4], 3.5));
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(t.value(y).data().iter().all(|v| *v == 0.0));

    let g = t.constant(Tensor::filled(vec![2], 1.0));
    let b = t.constant(Tensor::zeros(vec![2]));
    let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
    let y = t.layer_norm(x, g, b, 1e-12).unwrap();
    for (v, w) in t.value(y).data().iter().zip([1.0, -1.0]) {
        assert!((v - w).abs() < 1e-10);
    }
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let gain = random(&[6], 3);
    let bias = random(&[6], 4);
    let err = grad_check(
        |t, x| {
            let g = t.param(gain.clone());
            let b = t.param(bias.clone());
            let y = t.layer_norm(x, g, b, 1e-5)?;
            Ok(weighted_sum(t, y, 5))
        },
        &random(&[2, 6], 6),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "err {err}");
    let x = random(&[2, 6], 6);
    let err = grad_check(
        |t, g| {
            let xv = t.constant(x.clone());
            let b = t.constant(bias.clone());
            let y = t.layer_norm(xv, g, b, 1e-5)?;
            Ok(weighted_sum(t, y, 5))
        },
        &gain,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "gain err {err}");
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::new();
    let logits = t.constant(Tensor::new(vec![1, 2], vec![10.0, 0.0]).unwrap());
    let target = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let loss = t.cross_entropy_soft(logits, &target).unwrap();
    let want = (1.0 + (-10.0f64).exp()).ln();
    assert!((t.value(loss).item() - want).abs() < 1e-15);
    assert!((t.value(loss).item() - 4.54e-5).abs() < 1e-7);

    let k = 16;
    let logits = t.constant(Tensor::filled(vec![3, k], 0.7));
    let target = random(&[3, k], 1);
    let target = Tensor::new(
        vec![3, k],
        target
            .data()
            .chunks(k)
            .flat_map(|r| {
                let s: f64 = r.iter().map(|v| v.abs()).sum();
                r.iter().map(move |v| v.abs() / s).collect::<Vec<_>>()
            })
            .collect(),
    )
    .unwrap();
    let loss = t.cross_entropy_soft(logits, &target).unwrap();
    assert!((t.value(loss).item() - (k as f64).ln()).abs() < 1e-12);

    let bad = Tensor::new(vec![1, 2], vec![0.7, 0.7]).unwrap();
    let l = t.constant(Tensor::zeros(vec![1, 2]));
    assert!(matches!(
        t.cross_entropy_soft(l, &bad),
        Err(AutodiffError::InvalidTarget(_))
    ));
    let neg = Tensor::new(vec![1, 2], vec![1.5, -0.5]).unwrap();
    assert!(t.cross_entropy_soft(l, &neg).is_err());
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let raw = random(&[4, 16], 11);
    let mut target = raw.clone();
    for row in target.data_mut().chunks_mut(16) {
        row.iter_mut().for_each(|v| *v = v.exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let err = grad_check(|t, x| t.cross_entropy_soft(x, &target), &random(&[4, 16], 12), 1e-5).unwrap();
    assert!(err < 1e-6, "err {err}");
}

#[test]
fn elementwise_ops_pass_grad_check() {
    let other = random(&[3, 4], 21);
    let bias = random(&[4], 22);
    let err = grad_check(
        |t, x| {
            let o = t.param(other.clone());
            let b = t.param(bias.clone());
            let a = t.add(x, o)?;
            let s = t.sub(a, x)?;
            let m = t.mul(s, x)?;
            let g = t.gelu(m);
            let c = t.scale(g, 0.3);
            let d = t.add_bias(c, b)?;
            let e = t.squared_distance(d, &other, 0.5)?;
            let f = t.mean(x);
            t.add(e, f)
        },
        &random(&[3, 4], 20),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "err {err}");
}

#[test]
fn gather_scatter_pass_grad_check() {
    let err = grad_check(
        |t, x| {
            let g = t.gather_rows(x, &[2, 0, 2, 1])?;
            let s = t.scatter_rows(g, &[4, 0, 1, 4], 5)?;
            Ok(weighted_sum(t, s, 31))
        },
        &random(&[3, 4], 30),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "err {err}");
}

#[test]
fn causal_attention_passes_grad_check() {
    let layout = AttentionLayout {
        groups: 2,
        seq_len: 3,
        heads: 2,
    };
    let k = random(&[6, 4], 41);
    let v = random(&[6, 4], 42);
    let err = grad_check(
        |t, q| {
            let kv = t.param(k.clone());
            let vv = t.param(v.clone());
            let kk = t.mul(kv, q)?;
            let y = t.causal_attention(q, kk, vv, layout)?;
            Ok(weighted_sum(t, y, 43))
        },
        &random(&[6, 4], 40),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "err {err}");
    let q = random(&[6, 4], 40);
    let err = grad_check(
        |t, vv| {
            let qv = t.constant(q.clone());
            let y = t.causal_attention(qv, vv, vv, layout)?;
            Ok(weighted_sum(t, y, 44))
        },
        &v,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "err {err}");
}

#[test]
fn causal_attention_first_row_copies_first_value() {
    let layout = AttentionLayout {
        groups: 1,
        seq_len: 4,
        heads: 1,
    };
    let mut t = Tape::new();
    let q = t.constant(random(&[4, 3], 1));
    let v = t.constant(random(&[4, 3], 2));
    let y = t.causal_attention(q, q, v, layout).unwrap();
    assert_eq!(t.value(y).row(0), t.value(v).row(0));
    assert_eq!(t.macs().attention_scores, 10 * 3);
}

#[test]
fn reuse_accumulates_every_contribution() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(1.5));
    let y = t.add(x, x).unwrap();
    let grads = t.backward(y).unwrap();
    assert_eq!(grads.wrt(x).item(), 2.0);

    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(0.5));
    let mut acc = x;
    for _ in 0..4 {
        acc = t.add(acc, x).unwrap();
    }
    assert_eq!(t.backward(acc).unwrap().wrt(x).item(), 5.0);
}

#[test]
fn straight_through_forward_and_backward() {
    let mut t = Tape::new();
    let z = t.param(random(&[2, 3], 1));
    let zhat = random(&[2, 3], 2);
    let st = t.straight_through(z, &zhat).unwrap();
    assert_eq!(t.value(st), &zhat);
    let s = t.sum(st);
    let g = t.backward(s).unwrap().wrt(z);
    assert!(g.data().iter().all(|v| *v == 1.0));
}

#[test]
fn cleared_tape_is_empty() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(1.0));
    let _ = t.scale(x, 2.0);
    assert_eq!(t.len(), 2);
    t.clear();
    assert!(t.is_empty());
}

proptest! {
    #[test]
    fn masked_softmax_rows_are_distributions(
        values in prop::collection::vec(-30.0f64..30.0, 12),
        mask in prop::collection::vec(any::<bool>(), 12),
    ) {
        let mut mask = mask;
        for row in mask.chunks_mut(4) {
            row[0] = false;
        }
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3, 4], values).unwrap());
        let y = t.masked_softmax(x, &mask).unwrap();
        for (row, m) in t.value(y).data().chunks(4).zip(mask.chunks(4)) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for (v, masked) in row.iter().zip(m) {
                if *masked { prop_assert_eq!(*v, 0.0); } else { prop_assert!(*v > 0.0); }
            }
        }
    }
}
