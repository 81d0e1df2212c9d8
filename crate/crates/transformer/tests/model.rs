mod common;

use common::*;
use rand::Rng;
use rq_autodiff::{grad_check_params, Tape, Tensor};
use rq_core::{rq_decode, Codebook, PerDepthCodebooks, Quantizer};
use rq_transformer::*;

fn probs(m: &RqTransformer, seq: &[usize]) -> Vec<f64> {
    m.probabilities(&[seq.to_vec()], None).unwrap().remove(0)
}

#[test]
fn full_nll_gradient_matches_finite_differences() {
    let cfg = ModelConfig {
        t: 4,
        d: 2,
        k: 8,
        n_e: 16,
        heads: 2,
        n_z: 4,
        ..ModelConfig::default()
    };
    let m = toy_model(cfg, 1);
    let mut r = rng(2);
    let batch: Vec<Vec<usize>> = (0..2).map(|_| random_codes(8, 8, &mut r)).collect();
    let soft: Vec<f64> = (0..16 * 8).map(|_| r.random::<f64>() + 0.01).collect();
    let soft: Vec<f64> = soft
        .chunks(8)
        .flat_map(|c| {
            let s: f64 = c.iter().sum();
            c.iter().map(move |v| v / s)
        })
        .collect();
    let targets = Tensor::new(vec![16, 8], soft).unwrap();
    let err = grad_check_params(
        |tape, vars| {
            m.nll(tape, vars, &batch, None, &targets, None).map_err(|e| match e {
                Error::Autodiff(a) => a,
                e => panic!("{e}"),
            })
        },
        m.params(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn conditional_nll_gradient_matches_finite_differences() {
    for mode in [ConditionMode::Replace, ConditionMode::Prepend] {
        let cfg = ModelConfig {
            t: 3,
            d: 2,
            k: 4,
            n_e: 8,
            heads: 2,
            n_z: 3,
            n_spatial: 1,
            n_depth: 1,
            condition_classes: Some(3),
            condition_mode: mode,
            ..ModelConfig::default()
        };
        let m = toy_model(cfg, 3);
        let batch = vec![vec![0, 1, 2, 3, 0, 1], vec![3, 3, 1, 0, 2, 2]];
        let targets = one_hot_targets(&batch, 4);
        let err = grad_check_params(
            |tape, vars| Ok(m.nll(tape, vars, &batch, Some(&[2, 0]), &targets, None).unwrap()),
            m.params(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{mode:?}: relative error {err}");
    }
}

#[test]
fn spatial_future_edits_leave_past_probabilities_bitwise() {
    let (t, d, k) = (6, 3, 5);
    let m = toy_model(toy_config(t, d, k), 4);
    let mut r = rng(5);
    for _ in 0..30 {
        let seq = random_codes(t * d, k, &mut r);
        let ti = r.random_range(0..t - 1);
        let mut edited = seq.clone();
        for c in &mut edited[(ti + 1) * d..] {
            *c = r.random_range(0..k);
        }
        let (a, b) = (probs(&m, &seq), probs(&m, &edited));
        let keep = (ti + 1) * d * k;
        assert_eq!(a[..keep], b[..keep]);
    }
}

#[test]
fn depth_future_edits_leave_current_probabilities_bitwise() {
    let (t, d, k) = (4, 4, 6);
    let m = toy_model(toy_config(t, d, k), 6);
    let mut r = rng(7);
    for _ in 0..30 {
        let seq = random_codes(t * d, k, &mut r);
        let (ti, di) = (r.random_range(0..t), r.random_range(0..d));
        let mut edited = seq.clone();
        for c in &mut edited[ti * d + di..(ti + 1) * d] {
            *c = (*c + r.random_range(1..k)) % k;
        }
        let (a, b) = (probs(&m, &seq), probs(&m, &edited));
        let keep = (ti * d + di + 1) * k;
        assert_eq!(a[..keep], b[..keep]);
    }
}

#[test]
fn degenerate_model_ignores_codes() {
    let m = toy_model(toy_config(1, 1, 7), 8);
    assert_eq!(probs(&m, &[0]), probs(&m, &[6]));
}

#[test]
fn probabilities_are_normalised() {
    let m = toy_model(toy_config(5, 3, 9), 9);
    let mut r = rng(10);
    let batch: Vec<Vec<usize>> = (0..3).map(|_| random_codes(15, 9, &mut r)).collect();
    for p in m.probabilities(&batch, None).unwrap() {
        for row in p.chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|v| *v > 0.0));
        }
    }
}

#[test]
fn batch_rows_match_single_sequences() {
    let m = toy_model(toy_config(4, 2, 5), 11);
    let mut r = rng(12);
    let batch: Vec<Vec<usize>> = (0..4).map(|_| random_codes(8, 5, &mut r)).collect();
    let joint = m.probabilities(&batch, None).unwrap();
    for (seq, p) in batch.iter().zip(&joint) {
        assert_eq!(&probs(&m, seq), p);
    }
}

#[test]
fn embedding_sums_equal_partial_sums() {
    let mut r = rng(13);
    let emb: Vec<f64> = (0..8 * 4).map(|_| r.random::<f64>()).collect();
    let shared = Quantizer::Shared(Codebook::from_embeddings(8, 4, emb).unwrap());
    let books = (0..3)
        .map(|_| Codebook::from_embeddings(8, 4, (0..32).map(|_| r.random::<f64>()).collect()).unwrap())
        .collect();
    let per = Quantizer::PerDepth(PerDepthCodebooks::new(books).unwrap());
    for (q, tables) in [(shared, 1), (per, 3)] {
        let cfg = ModelConfig {
            code_tables: tables,
            ..toy_config(2, 3, 8)
        };
        let m = RqTransformer::from_quantizer(cfg, &q, 0).unwrap();
        for _ in 0..50 {
            let stack = random_codes(3, 8, &mut r);
            for d in 0..=3 {
                assert_eq!(m.embedding_sum(&stack, d), rq_decode(&stack, &q, d).unwrap());
            }
        }
    }
}

#[test]
fn uniform_output_costs_ln_k() {
    let mut m = toy_model(toy_config(3, 2, 6), 14);
    let ids: Vec<_> = m
        .params()
        .ids()
        .filter(|id| m.params().name(*id).starts_with("head."))
        .collect();
    for id in ids {
        m.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let mut r = rng(15);
    let batch = vec![random_codes(6, 6, &mut r)];
    let mut tape = Tape::new();
    let vars = m.params().attach(&mut tape);
    let loss = m
        .nll(&mut tape, &vars, &batch, None, &one_hot_targets(&batch, 6), None)
        .unwrap();
    assert!((tape.value(loss).item() - 6f64.ln()).abs() < 1e-12);
}

#[test]
fn matching_soft_targets_cost_their_entropy() {
    let m = toy_model(toy_config(3, 2, 6), 16);
    let batch = vec![vec![1, 2, 3, 4, 5, 0]];
    let p = m.probabilities(&batch, None).unwrap().remove(0);
    let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>() / 6.0;
    let mut tape = Tape::new();
    let vars = m.params().attach(&mut tape);
    let targets = Tensor::new(vec![6, 6], p).unwrap();
    let loss = m.nll(&mut tape, &vars, &batch, None, &targets, None).unwrap();
    assert!((tape.value(loss).item() - entropy).abs() < 1e-12);
}

#[test]
fn class_token_drives_the_first_prediction() {
    let cfg = ModelConfig {
        condition_classes: Some(4),
        ..toy_config(3, 2, 5)
    };
    let m = toy_model(cfg, 17);
    let a = m.probabilities(&[vec![0; 6], vec![4; 6]], Some(&[1, 1])).unwrap();
    assert_eq!(a[0][..5], a[1][..5]);
    let b = m.probabilities(&[vec![0; 6]], Some(&[2])).unwrap();
    assert_ne!(a[0][..5], b[0][..5]);
}

#[test]
fn invalid_inputs_are_rejected() {
    let m = toy_model(toy_config(2, 2, 4), 18);
    assert!(matches!(
        m.probabilities(&[vec![0, 1, 2, 4]], None),
        Err(Error::CodeRange {
            t: 1,
            d: 1,
            code: 4,
            k: 4
        })
    ));
    assert!(matches!(m.probabilities(&[vec![0; 3]], None), Err(Error::Shape(_))));
    assert!(matches!(
        m.probabilities(&[vec![0; 4]], Some(&[0])),
        Err(Error::Config(_))
    ));
    let cond = toy_model(
        ModelConfig {
            condition_classes: Some(2),
            ..toy_config(2, 2, 4)
        },
        18,
    );
    assert!(cond.probabilities(&[vec![0; 4]], None).is_err());
    assert!(cond.probabilities(&[vec![0; 4]], Some(&[2])).is_err());
    assert!(RqTransformer::new(toy_config(2, 2, 4), vec![0.0; 3], 0).is_err());
    assert!(RqTransformer::new(
        ModelConfig {
            heads: 3,
            ..toy_config(2, 2, 4)
        },
        vec![0.0; 16],
        0
    )
    .is_err());
}

#[test]
fn construction_is_deterministic() {
    let table = vec![0.25; 4 * 4];
    let a = RqTransformer::new(toy_config(2, 2, 4), table.clone(), 3).unwrap();
    let b = RqTransformer::new(toy_config(2, 2, 4), table.clone(), 3).unwrap();
    let c = RqTransformer::new(toy_config(2, 2, 4), table, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.parameter_count(), b.parameter_count());
}

#[test]
fn naive_flattened_order_is_causal() {
    let cfg = NaiveConfig {
        n_layers: 2,
        n_e: 16,
        heads: 2,
        t: 4,
        d: 3,
        k: 5,
        condition_classes: None,
    };
    let m = toy_naive(cfg, 19);
    let mut r = rng(20);
    for _ in 0..20 {
        let seq = random_codes(12, 5, &mut r);
        let i = r.random_range(0..12);
        let mut edited = seq.clone();
        for c in &mut edited[i..] {
            *c = r.random_range(0..5);
        }
        let a = m.probabilities(&[seq], None).unwrap();
        let b = m.probabilities(&[edited], None).unwrap();
        assert_eq!(a[0][..(i + 1) * 5], b[0][..(i + 1) * 5]);
    }
}

#[test]
fn matched_naive_config() {
    let cfg = ModelConfig {
        n_spatial: 6,
        n_depth: 2,
        condition_classes: Some(10),
        ..ModelConfig::default()
    };
    let n = NaiveConfig::matched(&cfg);
    assert_eq!(n, NaiveConfig::matched(&cfg));
    assert_eq!((n.n_layers, n.n_e, n.heads, n.t, n.d, n.k), (8, 64, 4, 64, 4, 256));
    assert_eq!(n.seq_len(), 256);
    assert_eq!(n.condition_classes, Some(10));
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let mut r = rng(21);
    for (mode, classes) in [
        (ConditionMode::Replace, None),
        (ConditionMode::Replace, Some(3)),
        (ConditionMode::Prepend, Some(3)),
    ] {
        let cfg = ModelConfig {
            condition_classes: classes,
            condition_mode: mode,
            ..toy_config(5, 3, 7)
        };
        let m = toy_model(cfg, 22);
        let dec = RqDecoder::new(&m);
        for _ in 0..3 {
            let seq = random_codes(15, 7, &mut r);
            let label = classes.map(|c| r.random_range(0..c));
            let full = m
                .probabilities(std::slice::from_ref(&seq), label.map(|l| vec![l]).as_deref())
                .unwrap()
                .remove(0);
            let inc = teacher_forced(&dec, &seq, label);
            let diff = full.iter().zip(&inc).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "{mode:?} {classes:?}: {diff}");
        }
    }
    let cfg = NaiveConfig {
        n_layers: 2,
        n_e: 16,
        heads: 2,
        t: 3,
        d: 2,
        k: 5,
        condition_classes: Some(2),
    };
    let m = toy_naive(cfg, 23);
    let dec = NaiveDecoder::new(&m);
    let seq = random_codes(6, 5, &mut r);
    let full = m.probabilities(std::slice::from_ref(&seq), Some(&[1])).unwrap().remove(0);
    let inc = teacher_forced(&dec, &seq, Some(1));
    assert!(full.iter().zip(&inc).all(|(a, b)| (a - b).abs() < 1e-12));
}
