mod common;

use common::*;
use rand::Rng;
use rq_core::{Codebook, Execution, FeatureMap, Quantizer};
use rq_transformer::*;

fn tiny(t: usize, d: usize, k: usize) -> ModelConfig {
    ModelConfig {
        n_spatial: 1,
        n_depth: 1,
        n_e: 16,
        heads: 2,
        t,
        d,
        k,
        n_z: 4,
        ..ModelConfig::default()
    }
}

fn feature_dataset(seed: u64) -> (ArDataset, Vec<f64>) {
    let mut r = rng(seed);
    let emb: Vec<f64> = (0..8 * 4).map(|_| r.random::<f64>() - 0.5).collect();
    let q = Quantizer::Shared(Codebook::from_embeddings(8, 4, emb.clone()).unwrap());
    let maps: Vec<FeatureMap> = (0..6)
        .map(|_| FeatureMap::new(2, 2, 4, (0..16).map(|_| r.random::<f64>() - 0.5).collect()).unwrap())
        .collect();
    (
        ArDataset::from_features(&maps, q, 3, None, Execution::Parallel).unwrap(),
        emb,
    )
}

fn run(data: &ArDataset, table: Vec<f64>, cfg: &TrainConfig) -> (RqTransformer, Vec<TraceEntry>) {
    let mut m = RqTransformer::new(tiny(4, 3, 8), table, 1).unwrap();
    let trace = train(&mut m, data, cfg, Execution::Parallel, |_| {}).unwrap();
    (m, trace)
}

fn nlls(trace: &[TraceEntry]) -> Vec<f64> {
    trace.iter().map(|e| e.nll).collect()
}

#[test]
fn vanishing_soft_labels_reproduce_one_hot_training() {
    let (data, table) = feature_dataset(1);
    let base = TrainConfig {
        steps: 25,
        batch_size: 3,
        lr: 1e-2,
        warmup: 5,
        ..TrainConfig::default()
    };
    let (a, one_hot) = run(&data, table.clone(), &base);
    let (b, soft) = run(
        &data,
        table,
        &TrainConfig {
            soft_label: Some(1e-9),
            ..base
        },
    );
    assert_eq!(nlls(&one_hot), nlls(&soft));
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn soft_labels_change_the_objective() {
    let (data, table) = feature_dataset(2);
    let base = TrainConfig {
        steps: 5,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let (_, one_hot) = run(&data, table.clone(), &base);
    let (_, soft) = run(
        &data,
        table,
        &TrainConfig {
            soft_label: Some(0.5),
            ..base
        },
    );
    assert_ne!(nlls(&one_hot), nlls(&soft));
}

#[test]
fn zero_temperature_resampling_is_deterministic_encoding() {
    let (data, table) = feature_dataset(3);
    let base = TrainConfig {
        steps: 10,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let (_, plain) = run(&data, table.clone(), &base);
    let (_, zero) = run(
        &data,
        table.clone(),
        &TrainConfig {
            stochastic: Some(0.0),
            ..base.clone()
        },
    );
    assert_eq!(nlls(&plain), nlls(&zero));
    let (_, hot) = run(
        &data,
        table,
        &TrainConfig {
            stochastic: Some(1.0),
            ..base
        },
    );
    assert_ne!(nlls(&plain), nlls(&hot));
}

#[test]
fn training_is_reproducible() {
    let (data, table) = feature_dataset(4);
    let cfg = TrainConfig {
        steps: 8,
        batch_size: 4,
        stochastic: Some(0.5),
        soft_label: Some(0.5),
        seed: 9,
        ..TrainConfig::default()
    };
    let (a, ta) = run(&data, table.clone(), &cfg);
    let (b, tb) = run(&data, table.clone(), &cfg);
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(nlls(&ta), nlls(&tb));
    let (c, _) = run(&data, table, &TrainConfig { seed: 10, ..cfg });
    assert_ne!(a.to_bytes(), c.to_bytes());
}

#[test]
fn constant_dataset_is_learned() {
    let mut r = rng(5);
    let seq = random_codes(8 * 2, 16, &mut r);
    let data = ArDataset::from_codes(vec![seq; 4], None, 2).unwrap();
    let table = (0..16 * 4).map(|_| r.random::<f64>()).collect();
    let mut m = RqTransformer::new(tiny(8, 2, 16), table, 2).unwrap();
    let cfg = TrainConfig {
        steps: 300,
        batch_size: 2,
        lr: 1e-2,
        warmup: 20,
        ..TrainConfig::default()
    };
    let trace = train(&mut m, &data, &cfg, Execution::Sequential, |_| {}).unwrap();
    assert!(trace[0].nll > 2.0);
    let nll = evaluate(&m, &data, 4).unwrap();
    assert!(nll < 0.01, "nll {nll}");
}

#[test]
fn small_set_of_random_maps_is_memorised() {
    let mut r = rng(6);
    let codes: Vec<Vec<usize>> = (0..8).map(|_| random_codes(16 * 2, 16, &mut r)).collect();
    let data = ArDataset::from_codes(codes, None, 2).unwrap();
    let table = (0..16 * 4).map(|_| r.random::<f64>() - 0.5).collect();
    let cfg = ModelConfig {
        n_spatial: 2,
        n_depth: 2,
        n_e: 32,
        heads: 4,
        ..tiny(16, 2, 16)
    };
    let mut m = RqTransformer::new(cfg, table, 3).unwrap();
    let before = evaluate(&m, &data, 8).unwrap();
    let tc = TrainConfig {
        steps: 600,
        batch_size: 4,
        ..TrainConfig::default()
    };
    train(&mut m, &data, &tc, Execution::Parallel, |_| {}).unwrap();
    let after = evaluate(&m, &data, 8).unwrap();
    assert!(before > 2.5 && after < 0.2, "{before} -> {after}");
}

#[test]
fn conditional_training_and_dropout_run() {
    let mut r = rng(7);
    let codes: Vec<Vec<usize>> = (0..4).map(|_| random_codes(6, 5, &mut r)).collect();
    let data = ArDataset::from_codes(codes, Some(vec![0, 1, 0, 1]), 2).unwrap();
    let cfg = ModelConfig {
        condition_classes: Some(2),
        dropout: 0.1,
        ..tiny(3, 2, 5)
    };
    let mut m = RqTransformer::new(cfg, vec![0.1; 20], 0).unwrap();
    let tc = TrainConfig {
        steps: 20,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let trace = train(&mut m, &data, &tc, Execution::Sequential, |_| {}).unwrap();
    assert!(trace.iter().all(|e| e.nll.is_finite() && e.lr > 0.0));
    assert!(trace
        .windows(2)
        .all(|w| w[1].step == w[0].step + 1 && w[1].seconds >= w[0].seconds));
}

#[test]
fn divergence_and_bad_input_are_reported() {
    let data = ArDataset::from_codes(vec![vec![0, 1, 2, 3]], None, 2).unwrap();
    let mut m = RqTransformer::new(tiny(2, 2, 4), vec![0.5; 16], 0).unwrap();
    let blow_up = TrainConfig {
        steps: 50,
        batch_size: 1,
        lr: 1e200,
        schedule: ScheduleKind::Constant,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(&mut m, &data, &blow_up, Execution::Sequential, |_| {}),
        Err(Error::Divergence { .. })
    ));

    let mut m = RqTransformer::new(tiny(2, 2, 4), vec![0.5; 16], 0).unwrap();
    let empty = ArDataset::from_codes(vec![], None, 2).unwrap();
    assert!(matches!(
        train(&mut m, &empty, &TrainConfig::default(), Execution::Sequential, |_| {}),
        Err(Error::Config(_))
    ));
    let soft = TrainConfig {
        soft_label: Some(0.5),
        ..TrainConfig::default()
    };
    assert!(train(&mut m, &data, &soft, Execution::Sequential, |_| {}).is_err());
    let wrong_depth = ArDataset::from_codes(vec![vec![0; 6]], None, 3).unwrap();
    assert!(train(
        &mut m,
        &wrong_depth,
        &TrainConfig::default(),
        Execution::Sequential,
        |_| {}
    )
    .is_err());
    assert!(ArDataset::from_codes(vec![vec![0; 4]], Some(vec![]), 2).is_err());
}
