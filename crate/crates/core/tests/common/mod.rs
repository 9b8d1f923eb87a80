//! Independent oracles shared by the integration suites. Everything here is
//! deliberately written as straightforward textbook loops, separate from the
//! library's implementation paths.

#![allow(dead_code)]

use std::sync::{Mutex, MutexGuard, OnceLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use recrl::policy::{PolicyParams, Tensors};

/// Heavy experiments serialize on this lock so they do not contend for the
/// two-ish cores the suite assumes.
pub fn heavy_lock() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    LOCK.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|p| p.into_inner())
}

// ---------------------------------------------------------------------------
// straightforward re-implementation of the policy forward pass

fn naive_layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean: f64 = x.iter().sum::<f64>() / d;
    let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| g[i] * (v - mean) * inv + b[i])
        .collect()
}

fn naive_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Final-norm outputs for every position of `seq`, computed with plain
/// loops and full attention matrices.
fn naive_forward(params: &PolicyParams, seq: &[u32]) -> Vec<Vec<f64>> {
    let d = params.cfg.dim;
    let f = 4 * d;
    let t = &params.t;
    let n = seq.len();

    let mut x = vec![vec![0.0; d]; n];
    for (p, &id) in seq.iter().enumerate() {
        for i in 0..d {
            x[p][i] = t.tok_emb[id as usize * d + i] + t.pos_emb[p * d + i];
        }
    }
    let mut q = vec![vec![0.0; d]; n];
    let mut k = vec![vec![0.0; d]; n];
    let mut v = vec![vec![0.0; d]; n];
    for p in 0..n {
        let a_in = naive_layer_norm(&x[p], &t.ln1_g, &t.ln1_b);
        for j in 0..d {
            for i in 0..d {
                q[p][j] += a_in[i] * t.wq[i * d + j];
                k[p][j] += a_in[i] * t.wk[i * d + j];
                v[p][j] += a_in[i] * t.wv[i * d + j];
            }
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut ys = Vec::with_capacity(n);
    for p in 0..n {
        let scores: Vec<f64> = (0..=p)
            .map(|s| (0..d).map(|i| q[p][i] * k[s][i]).sum::<f64>() * scale)
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut ctx = vec![0.0; d];
        for s in 0..=p {
            for i in 0..d {
                ctx[i] += exps[s] / z * v[s][i];
            }
        }
        let mut ao = vec![0.0; d];
        for j in 0..d {
            for i in 0..d {
                ao[j] += ctx[i] * t.wo[i * d + j];
            }
        }
        let r1: Vec<f64> = (0..d).map(|i| x[p][i] + ao[i]).collect();
        let f_in = naive_layer_norm(&r1, &t.ln2_g, &t.ln2_b);
        let mut h = vec![0.0; f];
        for j in 0..f {
            for i in 0..d {
                h[j] += f_in[i] * t.w1[i * f + j];
            }
            h[j] = naive_gelu(h[j] + t.b1[j]);
        }
        let mut fo = vec![0.0; d];
        for j in 0..d {
            for i in 0..f {
                fo[j] += h[i] * t.w2[i * d + j];
            }
            fo[j] += t.b2[j];
        }
        let r2: Vec<f64> = (0..d).map(|i| r1[i] + fo[i]).collect();
        ys.push(naive_layer_norm(&r2, &t.lnf_g, &t.lnf_b));
    }
    ys
}

/// Independent per-token log-probs: recompute the network from scratch for
/// every scored position and normalize the softmax directly.
pub fn naive_logprobs(params: &PolicyParams, context: &[u32], continuation: &[u32]) -> Vec<f64> {
    let d = params.cfg.dim;
    let vsz = params.cfg.vocab_size;
    let mut lps = Vec::with_capacity(continuation.len());
    for (i, &target) in continuation.iter().enumerate() {
        let seq: Vec<u32> = context
            .iter()
            .chain(continuation[..i].iter())
            .copied()
            .collect();
        let ys = naive_forward(params, &seq);
        let y = ys.last().expect("nonempty sequence");
        let logits: Vec<f64> = (0..vsz)
            .map(|w| (0..d).map(|j| y[j] * params.t.tok_emb[w * d + j]).sum())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let prob = (logits[target as usize] - m).exp() / z;
        lps.push(prob.ln());
    }
    lps
}

// ---------------------------------------------------------------------------
// central finite differences

/// Max relative error between an analytic gradient and central finite
/// differences of `objective`, over `coords` randomly probed coordinates.
/// The denominator is floored at 1e-4 so finite-difference noise on
/// near-zero coordinates does not register as error.
pub fn finite_diff_max_rel_err(
    params: &PolicyParams,
    objective: &dyn Fn(&PolicyParams) -> f64,
    analytic: &Tensors,
    coords: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let n = params.t.num_params();
    let mut max_err: f64 = 0.0;
    for _ in 0..coords {
        let idx = rng.gen_range(0..n);
        let mut plus = params.clone();
        plus.t.add_flat(idx, h);
        let mut minus = params.clone();
        minus.t.add_flat(idx, -h);
        let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
        let a = analytic.get_flat(idx);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
        max_err = max_err.max(err);
    }
    max_err
}

// ---------------------------------------------------------------------------
// weighted-LCS brute force

fn weight(pos1: usize, exponent: f64) -> f64 {
    (1.0 / ((pos1 as f64) + 1.0).log2()).powf(exponent)
}

fn is_subsequence(needle: &[u8], hay: &[u8]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

/// Exhaustive maximum over all common subsequences of the sum of position
/// weights at the matched pred positions, normalized like the library.
pub fn brute_lcs_reward(pred: &[u8], target: &[u8], exponent: f64) -> f64 {
    assert!(!target.is_empty());
    let norm: f64 = (1..=target.len()).map(|i| weight(i, exponent)).sum();
    let m = pred.len();
    let mut best: f64 = 0.0;
    for mask in 0u32..(1 << m) {
        let mut chosen = Vec::with_capacity(m);
        let mut score = 0.0;
        for (i, &p) in pred.iter().enumerate() {
            if mask & (1 << i) != 0 {
                chosen.push(p);
                score += weight(i + 1, exponent);
            }
        }
        if is_subsequence(&chosen, target) {
            best = best.max(score);
        }
    }
    best / norm
}

// ---------------------------------------------------------------------------
// metric brute force

pub fn brute_recall(pred: &[u8], relevant: &[u8], k: usize) -> f64 {
    assert!(!relevant.is_empty());
    let mut hits = 0usize;
    for (i, p) in pred.iter().enumerate() {
        if i < k && relevant.contains(p) {
            hits += 1;
        }
    }
    hits as f64 / relevant.len() as f64
}

pub fn brute_ndcg(pred: &[u8], relevant: &[u8], k: usize) -> f64 {
    assert!(!relevant.is_empty());
    let mut dcg = 0.0;
    for (i, p) in pred.iter().enumerate() {
        if i < k && relevant.contains(p) {
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    let mut ideal = 0.0;
    for i in 0..relevant.len() {
        ideal += 1.0 / ((i + 2) as f64).log2();
    }
    dcg / ideal
}
