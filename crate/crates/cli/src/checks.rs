//! Built-in verification runs behind `grad-check` and `selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng as Stream;
use rq_autodiff::{grad_check, grad_check_params, AttentionLayout, AutodiffError, Tape, Tensor, Var};
use rq_core::{capacity_check, rq_decode, rq_encode, rq_encode_stochastic, CodeStackMap, Codebook, PatchCodec};
use rq_transformer::{sample::filter, ModelConfig, RqTransformer};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// Measured error; 0 for exact checks.
    pub error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn measured(name: &str, error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            error,
            tolerance,
            pass: error < tolerance,
        }
    }

    fn exact(name: &str, ok: bool) -> Self {
        Self {
            name: name.into(),
            error: if ok { 0.0 } else { 1.0 },
            tolerance: 0.0,
            pass: ok,
        }
    }
}

const H: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-4;

fn random(shape: &[usize], r: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn weighted(t: &mut Tape, y: Var, w: &Tensor) -> Var {
    let wv = t.constant(w.clone());
    let p = t.mul(y, wv).unwrap();
    t.sum(p)
}

type Op = Box<dyn Fn(&mut Tape, Var) -> rq_autodiff::Result<Var>>;

fn primitive_ops(r: &mut Stream) -> Vec<(&'static str, Vec<usize>, Op)> {
    let b45 = random(&[4, 5], r);
    let a34 = random(&[3, 4], r);
    let w35 = random(&[3, 5], r);
    let w35b = random(&[3, 5], r);
    let w34 = random(&[3, 4], r);
    let other = random(&[3, 4], r);
    let c34 = random(&[3, 4], r);
    let gain = random(&[6], r);
    let lnb = random(&[6], r);
    let w26 = random(&[2, 6], r);
    let x26 = random(&[2, 6], r);
    let w18 = random(&[1, 8], r);
    let kv = random(&[6, 4], r);
    let w64 = random(&[6, 4], r);
    let w54 = random(&[5, 4], r);
    let w74 = random(&[7, 4], r);
    let target = {
        let raw = random(&[4, 16], r);
        let data: Vec<f64> = raw
            .data()
            .chunks(16)
            .flat_map(|c| {
                let e: Vec<f64> = c.iter().map(|v| v.exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(move |v| v / s)
            })
            .collect();
        Tensor::new(vec![4, 16], data).unwrap()
    };
    let sq_target = random(&[3, 4], r);
    let layout = AttentionLayout {
        groups: 2,
        seq_len: 3,
        heads: 2,
    };
    let mask = [false, true, false, false, true, false, false, false];
    vec![
        (
            "matmul (left)",
            vec![3, 4],
            Box::new(move |t: &mut Tape, x| {
                let b = t.constant(b45.clone());
                let y = t.matmul(x, b)?;
                Ok(weighted(t, y, &w35))
            }) as Op,
        ),
        (
            "matmul (right)",
            vec![4, 5],
            Box::new(move |t: &mut Tape, x| {
                let a = t.constant(a34.clone());
                let y = t.matmul(a, x)?;
                Ok(weighted(t, y, &w35b))
            }),
        ),
        (
            "add/sub/mul",
            vec![3, 4],
            Box::new({
                let (o, w) = (other.clone(), w34.clone());
                move |t: &mut Tape, x| {
                    let ov = t.constant(o.clone());
                    let a = t.add(x, ov)?;
                    let s = t.sub(a, x)?;
                    let m = t.mul(x, s)?;
                    let m = t.mul(m, x)?;
                    Ok(weighted(t, m, &w))
                }
            }),
        ),
        (
            "add_bias",
            vec![4],
            Box::new({
                let (o, w) = (other.clone(), w34.clone());
                move |t: &mut Tape, b| {
                    let xv = t.constant(o.clone());
                    let y = t.add_bias(xv, b)?;
                    let y = t.mul(y, y)?;
                    Ok(weighted(t, y, &w))
                }
            }),
        ),
        (
            "scale/mul_const",
            vec![3, 4],
            Box::new({
                let w = w34.clone();
                move |t: &mut Tape, x| {
                    let s = t.scale(x, -1.7);
                    let y = t.mul_const(s, &c34)?;
                    let y = t.mul(y, x)?;
                    Ok(weighted(t, y, &w))
                }
            }),
        ),
        (
            "gelu",
            vec![3, 4],
            Box::new({
                let w = w34.clone();
                move |t: &mut Tape, x| {
                    let s = t.scale(x, 2.0);
                    let y = t.gelu(s);
                    Ok(weighted(t, y, &w))
                }
            }),
        ),
        (
            "layer_norm (x)",
            vec![2, 6],
            Box::new({
                let (g, b, w) = (gain.clone(), lnb.clone(), w26.clone());
                move |t: &mut Tape, x| {
                    let gv = t.constant(g.clone());
                    let bv = t.constant(b.clone());
                    let y = t.layer_norm(x, gv, bv, 1e-5)?;
                    Ok(weighted(t, y, &w))
                }
            }),
        ),
        (
            "layer_norm (gain, bias)",
            vec![6],
            Box::new({
                let (b, w) = (lnb.clone(), w26.clone());
                move |t: &mut Tape, g| {
                    let xv = t.constant(x26.clone());
                    let bv = t.constant(b.clone());
                    let y = t.layer_norm(xv, g, bv, 1e-5)?;
                    let y2 = t.layer_norm(xv, bv, g, 1e-5)?;
                    let s = t.add(y, y2)?;
                    Ok(weighted(t, s, &w))
                }
            }),
        ),
        (
            "masked_softmax",
            vec![1, 8],
            Box::new(move |t: &mut Tape, x| {
                let y = t.masked_softmax(x, &mask)?;
                Ok(weighted(t, y, &w18))
            }),
        ),
        (
            "softmax",
            vec![4, 16],
            Box::new({
                let w = target.clone();
                move |t: &mut Tape, x| {
                    let y = t.softmax(x)?;
                    let y = t.scale(y, 3.0);
                    Ok(weighted(t, y, &w))
                }
            }),
        ),
        (
            "causal_attention",
            vec![6, 4],
            Box::new(move |t: &mut Tape, x| {
                let k = t.constant(kv.clone());
                let kk = t.mul(k, x)?;
                let y = t.causal_attention(x, kk, x, layout)?;
                Ok(weighted(t, y, &w64))
            }),
        ),
        (
            "gather_rows/scatter_rows",
            vec![3, 4],
            Box::new(move |t: &mut Tape, x| {
                let g = t.gather_rows(x, &[2, 0, 2, 1, 0])?;
                let g = t.mul(g, g)?;
                let wv = t.constant(w54.clone());
                let y = t.mul(g, wv)?;
                let s = t.scatter_rows(y, &[6, 0, 3, 1, 5], 7)?;
                let s = t.mul(s, s)?;
                Ok(weighted(t, s, &w74))
            }),
        ),
        (
            "cross_entropy_soft",
            vec![4, 16],
            Box::new(move |t: &mut Tape, x| t.cross_entropy_soft(x, &target)),
        ),
        (
            "squared_distance",
            vec![3, 4],
            Box::new(move |t: &mut Tape, x| t.squared_distance(x, &sq_target, 0.3)),
        ),
        (
            "sum/mean",
            vec![3, 4],
            Box::new(move |t: &mut Tape, x| {
                let m = t.mul(x, x)?;
                let a = t.mean(m);
                let b = t.sum(x);
                let ab = t.mul(a, b)?;
                Ok(t.sum(ab))
            }),
        ),
    ]
}

/// Finite-difference checks of every tape primitive and of the full
/// transformer NLL (`T=4, D=2, K=8, n_e=16`).
pub fn grad_checks(seed: u64) -> Vec<Check> {
    let mut r = Stream::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shape, f) in primitive_ops(&mut r) {
        let x = random(&shape, &mut r);
        let err = grad_check(|t, v| f(t, v), &x, H).unwrap_or(f64::INFINITY);
        out.push(Check::measured(name, err, PRIMITIVE_TOL));
    }
    out.push(Check::measured(
        "straight_through (leaf substitution)",
        straight_through_error(&mut r),
        PRIMITIVE_TOL,
    ));
    out.push(Check::measured("rq-transformer nll", model_grad_error(seed), MODEL_TOL));
    out
}

/// The straight-through gradient with respect to `z` against finite
/// differences of the same loss with the replacement as the input.
fn straight_through_error(r: &mut Stream) -> f64 {
    let z = random(&[3, 4], r);
    let zhat = random(&[3, 4], r);
    let w = random(&[2, 4], r);
    let g = random(&[4, 2], r);
    let loss = |t: &mut Tape, y: Var| -> rq_autodiff::Result<Var> {
        let gv = t.constant(g.clone());
        let wv = t.constant(w.clone());
        let h = t.matmul(y, gv)?;
        let h = t.gelu(h);
        let back = t.matmul(h, wv)?;
        t.squared_distance(back, &z, 0.5)
    };
    let mut t = Tape::new();
    let zv = t.param(z.clone());
    let y = t.straight_through(zv, &zhat).unwrap();
    let out = loss(&mut t, y).unwrap();
    let analytic = t.backward(out).unwrap().wrt(zv);
    let mut worst = 0.0f64;
    let mut probe = zhat.clone();
    for i in 0..zhat.numel() {
        let mut at = |v: f64| {
            probe.data_mut()[i] = v;
            let mut t = Tape::new();
            let leaf = t.constant(probe.clone());
            let o = loss(&mut t, leaf).unwrap();
            t.value(o).item()
        };
        let numeric = (at(zhat.data()[i] + H) - at(zhat.data()[i] - H)) / (2.0 * H);
        probe.data_mut()[i] = zhat.data()[i];
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0));
    }
    worst
}

/// Worst relative gradient error of the full NLL under soft targets.
pub fn model_grad_error(seed: u64) -> f64 {
    let mut r = Stream::seed_from_u64(seed ^ 0x5eed);
    let cfg = ModelConfig {
        n_spatial: 2,
        n_depth: 2,
        n_e: 16,
        heads: 2,
        t: 4,
        d: 2,
        k: 8,
        n_z: 4,
        ..ModelConfig::default()
    };
    let table = (0..8 * 4).map(|_| r.random_range(-0.5..0.5)).collect();
    let mut m = RqTransformer::new(cfg, table, seed).unwrap();
    let tensors = m
        .params()
        .ids()
        .map(|id| {
            let t = m.params().get(id);
            if m.params().is_trainable(id) {
                Tensor::new(
                    t.shape().to_vec(),
                    (0..t.numel()).map(|_| r.random_range(-0.8..0.8)).collect(),
                )
                .unwrap()
            } else {
                t.clone()
            }
        })
        .collect();
    m.params_mut().replace_tensors(tensors);
    let batch: Vec<Vec<usize>> = (0..2).map(|_| (0..8).map(|_| r.random_range(0..8)).collect()).collect();
    let logits = random(&[16, 8], &mut r);
    let mut t = Tape::new();
    let lv = t.constant(logits);
    let p = t.softmax(lv).unwrap();
    let targets = t.value(p).clone();
    grad_check_params(
        |tape, vars| {
            m.nll(tape, vars, &batch, None, &targets, None).map_err(|e| match e {
                rq_transformer::Error::Autodiff(a) => a,
                e => AutodiffError::Parameter(e.to_string()),
            })
        },
        m.params(),
        H,
    )
    .unwrap_or(f64::INFINITY)
}

fn scan_nearest(cb: &Codebook, z: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for k in 0..cb.size() {
        let d: f64 = cb.embedding(k).iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

fn random_codebook(k: usize, n: usize, r: &mut Stream) -> Codebook {
    let emb = (0..k * n)
        .map(|_| (r.random_range(-1.0f64..1.0) as f32) as f64)
        .collect();
    Codebook::from_embeddings(k, n, emb).unwrap()
}

/// Quick oracle comparisons of the core algorithms and file formats.
pub fn self_tests(seed: u64) -> Vec<Check> {
    let mut r = Stream::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut ok = true;
    for _ in 0..500 {
        let cb = random_codebook(r.random_range(1..32), r.random_range(1..8), &mut r);
        let z: Vec<f64> = (0..cb.dim()).map(|_| r.random_range(-1.5..1.5)).collect();
        ok &= cb.nearest_code(&z).unwrap() == scan_nearest(&cb, &z);
    }
    out.push(Check::exact("nearest code equals exhaustive scan", ok));

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let cb = random_codebook(r.random_range(2..64), r.random_range(1..8), &mut r);
        let depth = r.random_range(1..=8);
        let z: Vec<f64> = (0..cb.dim()).map(|_| r.random_range(-2.0..2.0)).collect();
        let enc = rq_encode(&z, &cb, depth).unwrap();
        let zhat = rq_decode(&enc.codes, &cb, depth).unwrap();
        for i in 0..z.len() {
            worst = worst.max((zhat[i] + enc.residuals[depth][i] - z[i]).abs());
        }
    }
    out.push(Check::measured("telescoping identity", worst, 1e-12));

    let cb = random_codebook(4, 3, &mut r);
    let count = capacity_check(&cb, 3, 0, &mut r).unwrap();
    out.push(Check::exact("capacity K=4, D=3 in (K, K^D]", count > 4 && count <= 64));

    let cb = random_codebook(16, 4, &mut r);
    let z: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
    let st = rq_encode_stochastic(&z, &cb, 4, 0.0, &mut r).unwrap();
    out.push(Check::exact(
        "stochastic encoding at tau=0 is deterministic",
        st == rq_encode(&z, &cb, 4).unwrap(),
    ));

    let p = filter(&[0.5, 0.3, 0.15, 0.05], 4, 0.8);
    out.push(Check::measured(
        "nucleus filter example",
        (p[0] - 0.625).abs() + (p[1] - 0.375).abs() + p[2] + p[3],
        1e-12,
    ));

    let bytes = cb.to_bytes();
    out.push(Check::exact(
        "RQCB round trip",
        Codebook::from_bytes(&bytes)
            .map(|c| c.to_bytes() == bytes)
            .unwrap_or(false),
    ));
    let codes = (0..2 * 3 * 4).map(|_| r.random_range(0..16)).collect();
    let map = CodeStackMap::new(2, 3, 4, 16, cb.content_hash(), codes).unwrap();
    let bytes = map.to_bytes();
    out.push(Check::exact(
        "RQCM round trip",
        CodeStackMap::from_bytes(&bytes)
            .map(|m| m.to_bytes() == bytes)
            .unwrap_or(false),
    ));
    let codec = PatchCodec::orthonormal(2, 5).unwrap();
    let bytes = codec.to_bytes();
    out.push(Check::exact(
        "RQPC round trip",
        PatchCodec::from_bytes(&bytes)
            .map(|c| c.to_bytes() == bytes)
            .unwrap_or(false),
    ));
    let cfg = ModelConfig {
        n_spatial: 1,
        n_depth: 1,
        n_e: 8,
        heads: 2,
        t: 2,
        d: 2,
        k: 4,
        n_z: 2,
        ..ModelConfig::default()
    };
    let model = RqTransformer::new(cfg, vec![0.5; 8], seed).unwrap();
    let bytes = model.to_bytes();
    out.push(Check::exact(
        "RQTM round trip",
        RqTransformer::from_bytes(&bytes)
            .map(|m| m.to_bytes() == bytes)
            .unwrap_or(false),
    ));
    out
}
