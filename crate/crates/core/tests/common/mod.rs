#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokengate::{Result, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Fixed pseudo-random weights so a reduction to a scalar exercises every coordinate.
pub fn weights(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed ^ 0xabcdef);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

pub fn reduce(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let n = tape.value(v).numel();
    tape.dot_const(v, &weights(n, seed))
}

pub fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (p, q, r) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for j in 0..r {
            let mut s = 0.0;
            for k in 0..q {
                s += a.get(i, k) * b.get(k, j);
            }
            out[i * r + j] = s;
        }
    }
    Tensor::matrix(p, r, out).unwrap()
}

pub fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

use tokengate::encoder::{classify, embed, encoder_block_forward, model_forward, ActiveSet, RoutingMode};
use tokengate::gate::{apply_routing, Routing};
use tokengate::regularizers::{filter_weights, polar_with_weights, RegularizerSettings};
use tokengate::{Model, ModelConfig};

pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        blocks: 3,
        seq_len: 5,
        hidden: 4,
        heads: 2,
        ffn_dim: 6,
        vocab: 7,
        classes: 2,
        seed,
        ..Default::default()
    }
}

/// Small model whose masks straddle the threshold so some rows get dropped.
pub fn small_gated_model(seed: u64) -> (Model, Vec<usize>) {
    let mut model = Model::new(small_config(seed)).unwrap();
    let mut r = rng(seed + 1000);
    for g in &mut model.gates {
        g.m = uniform(&mut r, &[5], -2.0, 2.0);
    }
    let tokens = (0..5).map(|_| r.random_range(0..7)).collect();
    (model, tokens)
}

/// Routing chosen by the model's current values, to be held fixed.
pub fn current_routing(model: &Model, tokens: &[usize]) -> Vec<Routing> {
    let mut tape = Tape::new();
    model_forward(&mut tape, model, tokens, RoutingMode::Dynamic, false)
        .unwrap()
        .routings
}

/// Leaves for every weight followed by every gate mask.
pub fn model_inputs(model: &Model) -> Vec<Tensor> {
    let mut v = model.params.tensors.clone();
    v.extend(model.gates.iter().map(|g| g.m.clone()));
    v
}

/// `CE + λ_f·l_filter + λ_b·bi_modal` with routing and the filter weights
/// held fixed, built from caller-supplied leaves so a gradient check can
/// perturb them.
pub fn total_loss_frozen(
    tape: &mut Tape,
    vars: &[Var],
    model: &Model,
    tokens: &[usize],
    label: usize,
    routings: &[Routing],
    weights: &[f64],
) -> Result<Var> {
    let cfg = &model.config;
    let (w, masks) = vars.split_at(model.params.tensors.len());
    let mut x = embed(tape, model, w, tokens)?;
    let mut active = ActiveSet::all(cfg.seq_len);
    for (l, block) in model.blocks.iter().enumerate() {
        if l > 0 {
            let out = apply_routing(tape, x, masks[l - 1], routings[l - 1].clone())?;
            x = out.x_m;
            let keep = out.keep.iter().zip(&active.keep).map(|(&k, &a)| k && a).collect();
            active = ActiveSet::from_keep(keep)?;
        }
        x = encoder_block_forward(tape, x, w, block, &active, cfg.attention_exclusion, cfg.layer_norm_eps)?;
    }
    let logits = classify(tape, x, w, &model.head)?;
    let ce = tape.cross_entropy(logits, label)?;
    let polar = polar_with_weights(tape, masks, &RegularizerSettings::from_config(cfg), weights)?;
    tape.add(ce, polar.polar)
}

/// The training step's per-step `w_l` at the model's current masks.
pub fn current_filter_weights(model: &Model) -> Vec<f64> {
    let masks: Vec<Tensor> = model.gates.iter().map(|g| g.m.clone()).collect();
    filter_weights(&masks, model.config.seq_len)
}

/// Positions 1.. by descending key, earlier index first on ties (insertion sort).
fn oracle_order(keys: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = Vec::new();
    for i in 1..keys.len() {
        let pos = order.iter().position(|&j| keys[i] > keys[j]).unwrap_or(order.len());
        order.insert(pos, i);
    }
    order.insert(0, 0);
    order
}

/// Sort tokens, match the k-th most important token with the k-th largest
/// gate, threshold at alpha, write rows back to their original positions.
pub fn oracle_mask_match(x: &Tensor, m: &[f64], alpha: f64) -> (Tensor, Vec<bool>) {
    let (n, c) = (x.rows(), x.cols());
    let scores: Vec<f64> = (0..n).map(|i| x.row(i).iter().map(|v| v.abs()).sum()).collect();
    let sig: Vec<f64> = m.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    let tokens = oracle_order(&scores);
    let gates = oracle_order(&sig);

    let mut out = vec![0.0; n * c];
    let mut keep = vec![false; n];
    out[..c].copy_from_slice(x.row(0));
    keep[0] = true;
    for k in 1..n {
        let (t, g) = (tokens[k], gates[k]);
        if sig[g] >= alpha {
            keep[t] = true;
            for j in 0..c {
                out[t * c + j] = x.get(t, j) * sig[g];
            }
        }
    }
    (Tensor::matrix(n, c, out).unwrap(), keep)
}

pub fn random_gate_case(seed: u64) -> (Tensor, Tensor, f64) {
    let mut r = rng(seed);
    let n = r.random_range(1..=16);
    let c = r.random_range(1..=32);
    let mut x = uniform(&mut r, &[n, c], -3.0, 3.0);
    let mut m = uniform(&mut r, &[n], -4.0, 4.0);
    // every third case is coarsely quantized so that ties occur
    if seed.is_multiple_of(3) {
        for v in x.data_mut().iter_mut().chain(m.data_mut()) {
            *v = v.round();
        }
    }
    let alpha = [0.5, 0.3, 0.8][seed as usize % 3];
    (x, m, alpha)
}
