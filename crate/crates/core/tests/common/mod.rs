//! Finite-difference oracle shared by the gradient tests and the acceptance target.
#![allow(dead_code)]

use lgcl_core::backbone::{Backbone, LayerPrefix, PrefixSet, ViTConfig};
use lgcl_core::langguide::{class_triplet_loss, task_triplet_loss, EmbeddingProvider, FeatureKind};
use lgcl_core::numcore::{cosine, no_grad, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const CASES: u64 = 50;

/// Scalar function of a list of tensors.
pub type Scalar<'a> = Box<dyn Fn(&[Tensor]) -> Tensor + 'a>;

/// Largest relative error between the autodiff gradient and central
/// differences, over all inputs: `|a - n| / max(|a|, |n|)` per input vector,
/// with absolute error used when both gradients are below `1e-8`.
pub fn max_rel_error(inputs: &[(Vec<f64>, Vec<usize>)], f: &Scalar) -> f64 {
    let params: Vec<Tensor> = inputs
        .iter()
        .enumerate()
        .map(|(i, (d, s))| Tensor::param(format!("in{i}"), d.clone(), s).unwrap())
        .collect();
    f(&params).backward().unwrap();
    let mut worst: f64 = 0.0;
    for (i, (data, shape)) in inputs.iter().enumerate() {
        let analytic = params[i].grad().unwrap_or_else(|| vec![0.0; data.len()]);
        let mut numeric = vec![0.0; data.len()];
        for j in 0..data.len() {
            let eval = |delta: f64| {
                no_grad(|| {
                    let ts: Vec<Tensor> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, (d, s))| {
                            let mut d = d.clone();
                            if k == i {
                                d[j] += delta;
                            }
                            Tensor::new(d, s).unwrap()
                        })
                        .collect();
                    f(&ts).item()
                })
            };
            numeric[j] = (eval(H) - eval(-H)) / (2.0 * H);
        }
        let _ = shape;
        let diff = norm(&analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect::<Vec<_>>());
        let scale = norm(&analytic).max(norm(&numeric));
        let err = if scale < 1e-8 { diff } else { diff / scale };
        worst = worst.max(err);
    }
    worst
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values with magnitude in `[0.5, 2]` and random sign, safe as divisors.
pub fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.random_range(0.5..2.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// `sum(w * t)` for fixed random `w`, turning any output into a scalar with
/// a generic upstream gradient.
pub fn project(t: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFEED);
    let w = Tensor::new(uniform(&mut rng, t.numel(), -1.0, 1.0), t.shape()).unwrap();
    t.mul(&w).unwrap().sum()
}

pub struct Case {
    pub inputs: Vec<(Vec<f64>, Vec<usize>)>,
    pub f: Scalar<'static>,
}

/// One seeded instance of a named check.
pub fn op_case(op: &str, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(2..5usize);
    let c = rng.random_range(2..5usize);
    let k = rng.random_range(2..5usize);
    let mut m = |rows: usize, cols: usize| (uniform(&mut rng, rows * cols, -1.5, 1.5), vec![rows, cols]);
    let (a, b) = (m(r, c), m(r, c));
    let s = seed;
    let p = move |t: Tensor| project(&t, s);
    match op {
        "add" => Case { inputs: vec![a, b], f: Box::new(move |x| p(x[0].add(&x[1]).unwrap())) },
        "sub" => Case { inputs: vec![a, b], f: Box::new(move |x| p(x[0].sub(&x[1]).unwrap())) },
        "mul" => Case { inputs: vec![a, b], f: Box::new(move |x| p(x[0].mul(&x[1]).unwrap())) },
        "div" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let d = (away_from_zero(&mut rng, r * c), vec![r, c]);
            Case { inputs: vec![a, d], f: Box::new(move |x| p(x[0].div(&x[1]).unwrap())) }
        }
        "scalar_broadcast" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
            let sc = (away_from_zero(&mut rng, 1), vec![]);
            Case {
                inputs: vec![a, sc],
                f: Box::new(move |x| {
                    let y = x[0].mul(&x[1]).unwrap().add(&x[1]).unwrap();
                    p(y.div(&x[1]).unwrap())
                }),
            }
        }
        "scale" => Case { inputs: vec![a], f: Box::new(move |x| p(x[0].scale(-1.7))) },
        "neg" => Case { inputs: vec![a], f: Box::new(move |x| p(x[0].neg())) },
        "add_scalar" => Case { inputs: vec![a], f: Box::new(move |x| p(x[0].add_scalar(0.3))) },
        "matmul" => {
            let rhs = m(c, k);
            Case { inputs: vec![a, rhs], f: Box::new(move |x| p(x[0].matmul(&x[1]).unwrap())) }
        }
        "transpose" => Case { inputs: vec![a], f: Box::new(move |x| p(x[0].transpose().unwrap())) },
        "reshape" => Case { inputs: vec![a], f: Box::new(move |x| p(x[0].reshape(&[c, r]).unwrap())) },
        "concat" => {
            let other = m(k, c);
            Case { inputs: vec![a, other], f: Box::new(move |x| p(Tensor::concat(&x[..2], 0).unwrap())) }
        }
        "slice" => Case { inputs: vec![a], f: Box::new(move |x| p(x[0].slice(1, 1, c).unwrap())) },
        "index_select" => {
            let idx: Vec<usize> = (0..3).map(|i| (i * 7 + seed as usize) % r).collect();
            Case { inputs: vec![a], f: Box::new(move |x| p(x[0].index_select(&idx).unwrap())) }
        }
        "softmax" => Case { inputs: vec![a], f: Box::new(move |x| p(x[0].softmax(1).unwrap())) },
        "log_softmax" => Case { inputs: vec![a], f: Box::new(move |x| p(x[0].log_softmax(0).unwrap())) },
        "layer_norm" => {
            let g = m(1, c);
            let bt = m(1, c);
            let (g, bt) = ((g.0, vec![c]), (bt.0, vec![c]));
            Case { inputs: vec![a, g, bt], f: Box::new(move |x| p(x[0].layer_norm(&x[1], &x[2], 1e-6).unwrap())) }
        }
        "gelu" => Case { inputs: vec![a], f: Box::new(move |x| p(x[0].gelu())) },
        "mean" => Case { inputs: vec![a], f: Box::new(move |x| p(x[0].mean(0).unwrap())) },
        "sum" => Case { inputs: vec![a], f: Box::new(move |x| x[0].sum().scale(0.7)) },
        "mean_all" => Case { inputs: vec![a], f: Box::new(move |x| x[0].mean_all().scale(1.3)) },
        "l2_norm" => Case { inputs: vec![a], f: Box::new(move |x| x[0].l2_norm()) },
        "dot" => {
            let (u, v) = ((a.0[..c].to_vec(), vec![c]), (b.0[..c].to_vec(), vec![c]));
            Case { inputs: vec![u, v], f: Box::new(move |x| x[0].dot(&x[1]).unwrap()) }
        }
        "add_bias" => {
            let bias = (b.0[..c].to_vec(), vec![c]);
            Case { inputs: vec![a, bias], f: Box::new(move |x| p(x[0].add_bias(&x[1]).unwrap())) }
        }
        "masked_fill" => {
            let mask: Vec<bool> = (0..r * c).map(|i| (i + seed as usize) % 3 == 0).collect();
            Case {
                inputs: vec![a],
                f: Box::new(move |x| p(x[0].masked_fill(&mask, -2.0).unwrap().log_softmax(1).unwrap())),
            }
        }
        "cosine" => {
            let (u, v) = ((a.0[..c].to_vec(), vec![c]), (b.0[..c].to_vec(), vec![c]));
            Case { inputs: vec![u, v], f: Box::new(move |x| cosine(&x[0], &x[1]).unwrap()) }
        }
        other => panic!("unknown op {other}"),
    }
}

pub const OPS: &[&str] = &[
    "add", "sub", "mul", "div", "scalar_broadcast", "scale", "neg", "add_scalar", "matmul", "transpose", "reshape",
    "concat", "slice", "index_select", "softmax", "log_softmax", "layer_norm", "gelu", "mean", "sum", "mean_all",
    "l2_norm", "dot", "add_bias", "masked_fill", "cosine",
];

pub fn task_loss_case(seed: u64) -> Case {
    let e = 6;
    let provider = EmbeddingProvider::synthetic(e, seed);
    let pos = provider.encode("A photo of a or b", FeatureKind::Task).unwrap();
    let neg = provider.encode("A photo of c or d", FeatureKind::Task).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..4usize);
    Case {
        inputs: vec![(uniform(&mut rng, n * e, -1.0, 1.0), vec![n, e])],
        f: Box::new(move |x| task_triplet_loss(&x[0], &pos, &neg).unwrap()),
    }
}

pub fn class_loss_case(seed: u64) -> Case {
    let e = 6;
    let provider = EmbeddingProvider::synthetic(e, seed);
    let pos = provider.encode("A photo of a", FeatureKind::Class).unwrap();
    let neg = provider.encode("A photo of b", FeatureKind::Class).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Case {
        inputs: vec![(uniform(&mut rng, e, -1.0, 1.0), vec![e])],
        f: Box::new(move |x| class_triplet_loss(&x[0], &pos, &neg).unwrap()),
    }
}

pub fn tiny_vit() -> ViTConfig {
    ViTConfig {
        image_size: 4,
        patch_size: 2,
        embed_dim: 4,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2,
        num_channels: 1,
    }
}

fn tiny_image(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(uniform(rng, 16, 0.0, 1.0), &[1, 4, 4]).unwrap()
}

/// Scalar of the prompt-position outputs, differentiated w.r.t. the prompts.
pub fn prompt_forward_case(seed: u64) -> Case {
    let bb = Backbone::init(tiny_vit(), seed).unwrap().freeze();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = tiny_image(&mut rng);
    let n = rng.random_range(1..4usize);
    Case {
        inputs: vec![(uniform(&mut rng, n * 4, -1.0, 1.0), vec![n, 4])],
        f: Box::new(move |x| project(&bb.forward_prompt_tuning(&img, &x[0]).unwrap().prompt_tokens, seed)),
    }
}

/// Scalar of the prefixed CLS output, differentiated w.r.t. key and value prefixes.
pub fn prefix_forward_case(seed: u64) -> Case {
    let bb = Backbone::init(tiny_vit(), seed).unwrap().freeze();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = tiny_image(&mut rng);
    let rows = rng.random_range(1..3usize);
    let layer = rng.random_range(0..2usize);
    let mut prefix = || (uniform(&mut rng, rows * 4, -1.0, 1.0), vec![rows, 4]);
    let (k, v) = (prefix(), prefix());
    Case {
        inputs: vec![k, v],
        f: Box::new(move |x| {
            let set = PrefixSet::from_pairs(vec![LayerPrefix {
                layer,
                key: x[0].clone(),
                value: x[1].clone(),
            }])
            .unwrap();
            project(&bb.forward_prefix_tuning(&img, &set, &[layer]).unwrap(), seed)
        }),
    }
}

/// Worst relative error of `make` over the standard seeded cases.
pub fn worst_over_cases(make: impl Fn(u64) -> Case) -> f64 {
    (0..CASES)
        .map(|s| {
            let c = make(s);
            max_rel_error(&c.inputs, &c.f)
        })
        .fold(0.0, f64::max)
}

// ---- lookup oracle ----

pub struct LookupInstance {
    pub keys: Vec<Vec<f64>>,
    pub query: Vec<f64>,
    pub select: usize,
}

/// Random pool of `M <= 64` keys. Roughly half the instances copy some keys at
/// power-of-two scales, which gives bit-identical cosines and so exact ties.
pub fn lookup_instance(seed: u64) -> LookupInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..=64usize);
    let e = rng.random_range(1..=8usize);
    let select = rng.random_range(1..=m);
    let mut keys: Vec<Vec<f64>> = (0..m).map(|_| away_from_zero(&mut rng, e)).collect();
    if m > 1 && rng.random_bool(0.5) {
        for _ in 0..rng.random_range(1..=m / 2 + 1) {
            let (src, dst) = (rng.random_range(0..m), rng.random_range(0..m));
            let s = [0.25, 0.5, 2.0, 4.0][rng.random_range(0..4usize)];
            keys[dst] = keys[src].iter().map(|x| x * s).collect();
        }
    }
    let query = away_from_zero(&mut rng, e);
    LookupInstance { keys, query, select }
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Repeated argmax: N passes, each taking the unused key of highest cosine
/// (first index wins a tie). Result in ascending index order.
pub fn brute_top_n(keys: &[Vec<f64>], query: &[f64], n: usize) -> Vec<usize> {
    let sims: Vec<f64> = keys.iter().map(|k| cos(k, query)).collect();
    let mut used = vec![false; keys.len()];
    let mut out = Vec::new();
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for j in 0..keys.len() {
            if !used[j] && best.is_none_or(|b| sims[j] > sims[b]) {
                best = Some(j);
            }
        }
        let b = best.expect("n <= M");
        used[b] = true;
        out.push(b);
    }
    out.sort_unstable();
    out
}

pub fn pool_from_keys(keys: &[Vec<f64>], select: usize) -> lgcl_core::promptpool::PromptPool {
    let (m, e) = (keys.len(), keys[0].len());
    let prompts = Tensor::new(vec![0.0; m * e], &[m, 1, e]).unwrap();
    let k = Tensor::new(keys.concat(), &[m, e]).unwrap();
    lgcl_core::promptpool::PromptPool::from_parts(prompts, k, select, false).unwrap()
}

/// Checks `lookup` against [`brute_top_n`] on the seeded instances `0..count`;
/// returns the first disagreeing seed.
pub fn lookup_mismatch(count: u64) -> Option<u64> {
    (0..count).find(|&s| {
        let inst = lookup_instance(s);
        let pool = pool_from_keys(&inst.keys, inst.select);
        pool.lookup(&inst.query).unwrap().indices != brute_top_n(&inst.keys, &inst.query, inst.select)
    })
}

// ---- metrics oracle ----

/// Lower-triangular matrix with entries on a 1/64 grid.
pub fn random_matrix(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(1..=8usize);
    (0..t)
        .map(|i| (0..=i).map(|_| rng.random_range(0..=64u32) as f64 / 64.0).collect())
        .collect()
}

pub fn brute_average(rows: &[Vec<f64>], t: usize) -> f64 {
    let mut s = 0.0;
    for j in 0..=t {
        s += rows[t][j];
    }
    s / (t + 1) as f64
}

pub fn brute_forgetting(rows: &[Vec<f64>], t: usize) -> Option<f64> {
    if t == 0 {
        return None;
    }
    let mut s = 0.0;
    for j in 0..t {
        let drops: Vec<f64> = (j..t).map(|l| rows[l][j] - rows[t][j]).collect();
        s += drops.into_iter().fold(f64::NEG_INFINITY, f64::max);
    }
    Some(s / t as f64)
}

/// First seed in `0..count` whose matrix disagrees with the brute-force evaluator.
pub fn metrics_mismatch(count: u64) -> Option<u64> {
    use lgcl_core::metrics::{average_accuracy, forgetting, AccuracyMatrix};
    (0..count).find(|&s| {
        let rows = random_matrix(s);
        let e = AccuracyMatrix::from_rows(rows.clone()).unwrap();
        (0..rows.len()).any(|t| {
            average_accuracy(&e, t).unwrap() != brute_average(&rows, t)
                || forgetting(&e, t).unwrap() != brute_forgetting(&rows, t)
        })
    })
}

// ---- language features with chosen directions ----

/// Provider whose lookups return the given vectors verbatim (identity projection).
pub fn table_provider(rows: &[(&str, Vec<f64>)]) -> EmbeddingProvider {
    let dim = rows[0].1.len();
    let table = rows.iter().map(|(t, v)| (t.to_string(), v.clone())).collect();
    EmbeddingProvider::from_table(table, dim, dim, 0).unwrap()
}

/// Task and class losses on the three reference constructions, as
/// `(aligned, orthogonal, antipodal)` for each loss.
pub fn closed_form_losses() -> [(f64, f64, f64); 2] {
    let p = table_provider(&[("pos", vec![1.0, 0.0, 0.0]), ("neg", vec![0.0, 1.0, 0.0])]);
    let mut out = [(0.0, 0.0, 0.0); 2];
    for (slot, kind) in [FeatureKind::Task, FeatureKind::Class].into_iter().enumerate() {
        let pos = p.encode("pos", kind).unwrap();
        let neg = p.encode("neg", kind).unwrap();
        let eval = |x: [f64; 3]| match kind {
            FeatureKind::Task => task_triplet_loss(&Tensor::new(x.to_vec(), &[1, 3]).unwrap(), &pos, &neg),
            FeatureKind::Class => class_triplet_loss(&Tensor::from_slice(&x), &pos, &neg),
        }
        .unwrap()
        .item();
        out[slot] = (eval([3.0, 0.0, 0.0]), eval([0.0, 0.0, 0.5]), eval([0.0, 2.0, 0.0]));
    }
    out
}
