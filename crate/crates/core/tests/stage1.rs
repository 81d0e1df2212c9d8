use rand::seq::SliceRandom;
use rq_core::rng;
use rq_core::stage1::*;
use rq_core::*;

#[test]
fn bypassed_quantizer_trains_a_linear_autoencoder() {
    let images = synthetic::dataset(21, 16, 16, 16);
    let cfg = Stage1Config {
        n_z: 12,
        codebook_size: 16,
        depth: 1,
        beta: 0.0,
        bypass_quantization: true,
        codec_init: CodecInit::Random { std: 0.05 },
        epochs: 50,
        lr: 3e-3,
        ..Stage1Config::default()
    };
    let out = train_stage1(&images, &cfg, Execution::Parallel).unwrap();
    let first = out.trace[0].l_recon;
    let last = out.trace.last().unwrap().l_recon;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

/// With the codec frozen, training is EMA k-means on fixed features.
#[test]
fn frozen_codec_reduces_to_ema_kmeans() {
    let images = synthetic::dataset(22, 6, 8, 8);
    let cfg = Stage1Config {
        n_z: 6,
        codebook_size: 8,
        depth: 2,
        epochs: 4,
        batch_size: 2,
        train_codec: false,
        ..Stage1Config::default()
    };
    let out = train_stage1(&images, &cfg, Execution::Parallel).unwrap();
    let codec = PatchCodec::orthonormal(cfg.factor, cfg.n_z).unwrap();
    assert_eq!(out.model.codec, codec);

    let features: Vec<FeatureMap> = images.iter().map(|im| codec.encode(im).unwrap()).collect();
    let rows: Vec<f64> = features.iter().flat_map(|f| f.data.clone()).collect();
    let mut q = init_quantizer(rows, &cfg, &mut rng::stream(cfg.seed, &[3]), Execution::Sequential).unwrap();
    let Quantizer::Shared(cb) = &mut q else {
        panic!("shared codebook expected")
    };
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[1, epoch as u64]));
        let mut pool = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let mut z = Vec::new();
            let mut assign = Vec::new();
            let enc: Vec<RqResult> = batch
                .iter()
                .flat_map(|&i| (0..features[i].positions()).map(move |t| (i, t)))
                .map(|(i, t)| rq_encode(features[i].at(t), &*cb, cfg.depth).unwrap())
                .collect();
            for d in 0..cfg.depth {
                for e in &enc {
                    z.extend_from_slice(&e.residuals[d]);
                    assign.push(e.codes[d]);
                }
            }
            cb.ema_update(&z, &assign, cfg.decay).unwrap();
            pool.extend(z);
        }
        if epoch + 1 < cfg.epochs {
            cb.restart_unused(
                &pool,
                cfg.restart_threshold,
                &mut rng::stream(cfg.seed, &[2, epoch as u64]),
            )
            .unwrap();
        }
    }
    assert_eq!(out.model.quantizer, q);
}

#[test]
fn full_pipeline_on_small_textures() {
    let images = synthetic::dataset(23, 16, 8, 8);
    let cfg = Stage1Config {
        n_z: 12,
        codebook_size: 32,
        depth: 3,
        epochs: 30,
        ..Stage1Config::default()
    };
    let out = train_stage1(&images, &cfg, Execution::Parallel).unwrap();
    let (first, last) = (&out.trace[0], out.trace.last().unwrap());
    assert!(last.l_recon < first.l_recon);
    assert!(
        last.depth_error.windows(2).all(|w| w[1] < w[0]),
        "{:?}",
        last.depth_error
    );
    let per_image = out.model.evaluate(&images, 3, Execution::Parallel).unwrap();
    let mean: Vec<f64> = (0..3).map(|d| per_image.iter().map(|v| v[d]).sum::<f64>()).collect();
    assert!(mean.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn runs_are_reproducible() {
    let images = synthetic::dataset(24, 8, 16, 16);
    let cfg = Stage1Config {
        codebook_size: 16,
        depth: 2,
        epochs: 3,
        seed: 5,
        ..Stage1Config::default()
    };
    let a = train_stage1(&images, &cfg, Execution::Parallel).unwrap();
    let b = train_stage1(&images, &cfg, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    let seq = train_stage1(&images, &cfg, Execution::Sequential).unwrap();
    assert_eq!(a, seq);
    let other = train_stage1(&images, &Stage1Config { seed: 6, ..cfg }, Execution::Parallel).unwrap();
    assert_ne!(a.model, other.model);
}

#[test]
fn empty_dataset_is_rejected() {
    let err = train_stage1(&[], &Stage1Config::default(), Execution::Sequential).unwrap_err();
    assert!(matches!(err, Error::InsufficientData { .. }));
}
