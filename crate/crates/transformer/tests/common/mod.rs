#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rq_autodiff::Tensor;
use rq_transformer::{ModelConfig, NaiveConfig, NaiveTransformer, RqTransformer};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn toy_config(t: usize, d: usize, k: usize) -> ModelConfig {
    ModelConfig {
        n_spatial: 2,
        n_depth: 2,
        n_e: 16,
        heads: 2,
        t,
        d,
        k,
        n_z: 4,
        ..ModelConfig::default()
    }
}

/// Replaces every trainable tensor with `N(0, std)`-ish noise so that
/// outputs depend visibly on every parameter.
pub fn perturb(params: &mut rq_autodiff::ParamSet, std: f64, r: &mut impl Rng) {
    let tensors: Vec<Tensor> = params
        .ids()
        .map(|id| {
            let t = params.get(id);
            if !params.is_trainable(id) {
                return t.clone();
            }
            let data = (0..t.numel())
                .map(|_| (r.random::<f64>() * 2.0 - 1.0) * std * 1.7)
                .collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        })
        .collect();
    params.replace_tensors(tensors);
}

pub fn toy_model(cfg: ModelConfig, seed: u64) -> RqTransformer {
    let mut r = rng(seed);
    let table = (0..cfg.code_tables * cfg.k * cfg.n_z)
        .map(|_| r.random::<f64>() - 0.5)
        .collect();
    let mut m = RqTransformer::new(cfg, table, seed).unwrap();
    perturb(m.params_mut(), 0.5, &mut r);
    m
}

pub fn toy_naive(cfg: NaiveConfig, seed: u64) -> NaiveTransformer {
    let mut r = rng(seed);
    let mut m = NaiveTransformer::new(cfg, seed).unwrap();
    perturb(m.params_mut(), 0.5, &mut r);
    m
}

pub fn random_codes(len: usize, k: usize, r: &mut impl Rng) -> Vec<usize> {
    (0..len).map(|_| r.random_range(0..k)).collect()
}
