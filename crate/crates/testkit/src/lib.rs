//! Reference code for tests. Nothing here touches the trace or patch
//! machinery of `patchlab-core`; only plain weight tensors are read.

use patchlab_core::{ModelConfig, Weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random shape within the given bounds (`max_d_model >= 2`).
pub fn small_config(rng: &mut impl Rng, max_layers: usize, max_d_model: usize) -> ModelConfig {
    loop {
        let n_heads = if max_d_model >= 4 && rng.random_bool(0.3) {
            4
        } else {
            2
        };
        let d_head = rng.random_range(1..=max_d_model / n_heads);
        let d_model = n_heads * d_head;
        if d_model > max_d_model || d_model == 0 {
            continue;
        }
        return ModelConfig {
            n_layers: rng.random_range(1..=max_layers),
            n_heads,
            d_model,
            d_head,
            d_mlp: rng.random_range(1..=4),
            vocab_size: rng.random_range(3..=7),
            max_seq: 8,
            norm_eps: 1e-5,
        };
    }
}

/// Random weights in f64 with non-trivial norm gains.
pub fn random_weights(rng: &mut impl Rng, config: &ModelConfig) -> Weights<f64> {
    let mut w = Weights::<f64>::init(config, rng.random()).expect("valid config");
    for t in [&mut w.final_norm].into_iter().chain(
        w.layers
            .iter_mut()
            .flat_map(|l| [&mut l.attn_norm, &mut l.mlp_norm]),
    ) {
        for g in t.data_mut() {
            *g = rng.random_range(0.5..1.5);
        }
    }
    w
}

pub fn random_tokens(rng: &mut impl Rng, config: &ModelConfig, max_len: usize) -> Vec<u32> {
    let len = rng.random_range(1..=max_len);
    (0..len)
        .map(|_| rng.random_range(0..config.vocab_size as u32))
        .collect()
}

fn vec_mat(x: &[f64], w: &[f64], d_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; d_out];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..d_out {
            y[j] += xi * w[i * d_out + j];
        }
    }
    y
}

fn rms_norm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| v / s * g).collect()
}

/// Rotate consecutive pairs of each head by `pos * 10000^(-2i/d_head)`.
fn rotate(v: &mut [f64], pos: usize, n_heads: usize, d_head: usize) {
    for h in 0..n_heads {
        for i in 0..d_head / 2 {
            let theta = pos as f64 * 10000f64.powf(-2.0 * i as f64 / d_head as f64);
            let (a, b) = (v[h * d_head + 2 * i], v[h * d_head + 2 * i + 1]);
            v[h * d_head + 2 * i] = a * theta.cos() - b * theta.sin();
            v[h * d_head + 2 * i + 1] = a * theta.sin() + b * theta.cos();
        }
    }
}

/// Per-layer attention probabilities `[head][i][j]` (zero above the
/// diagonal) and value vectors, computed from a residual stream.
pub struct AttnParts {
    pub probs: Vec<Vec<Vec<f64>>>,
    pub values: Vec<Vec<f64>>,
}

pub fn attention_parts(
    config: &ModelConfig,
    w: &Weights<f64>,
    layer: usize,
    resid: &[Vec<f64>],
) -> AttnParts {
    let (d, nh, dh) = (config.d_model, config.n_heads, config.d_head);
    let lw = &w.layers[layer];
    let mut qs = Vec::new();
    let mut ks = Vec::new();
    let mut values = Vec::new();
    for (pos, x) in resid.iter().enumerate() {
        let h = rms_norm(x, lw.attn_norm.data(), config.norm_eps);
        let mut q = vec_mat(&h, lw.wq.data(), d);
        let mut k = vec_mat(&h, lw.wk.data(), d);
        rotate(&mut q, pos, nh, dh);
        rotate(&mut k, pos, nh, dh);
        qs.push(q);
        ks.push(k);
        values.push(vec_mat(&h, lw.wv.data(), d));
    }
    let s = resid.len();
    let mut probs = vec![vec![vec![0.0; s]; s]; nh];
    for (hd, ph) in probs.iter_mut().enumerate() {
        for i in 0..s {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    (0..dh)
                        .map(|e| qs[i][hd * dh + e] * ks[j][hd * dh + e])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|v| (v - m).exp()).sum();
            for j in 0..=i {
                ph[i][j] = (scores[j] - m).exp() / z;
            }
        }
    }
    AttnParts { probs, values }
}

/// `attn_out` rows from explicit probabilities and value vectors.
pub fn mix(
    config: &ModelConfig,
    w: &Weights<f64>,
    layer: usize,
    probs: &[Vec<Vec<f64>>],
    values: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let (d, dh) = (config.d_model, config.d_head);
    let s = values.len();
    (0..s)
        .map(|i| {
            let mut z = vec![0.0; d];
            for (hd, ph) in probs.iter().enumerate() {
                for j in 0..=i {
                    for e in 0..dh {
                        z[hd * dh + e] += ph[i][j] * values[j][hd * dh + e];
                    }
                }
            }
            vec_mat(&z, w.layers[layer].wo.data(), d)
        })
        .collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn mlp(config: &ModelConfig, w: &Weights<f64>, layer: usize, x: &[f64]) -> Vec<f64> {
    let lw = &w.layers[layer];
    let h = rms_norm(x, lw.mlp_norm.data(), config.norm_eps);
    let g = vec_mat(&h, lw.w_gate.data(), config.d_mlp);
    let u = vec_mat(&h, lw.w_in.data(), config.d_mlp);
    let a: Vec<f64> = g.iter().zip(&u).map(|(&g, &u)| silu(g) * u).collect();
    vec_mat(&a, lw.w_out.data(), config.d_model)
}

/// Residual stream after embedding, one row per position.
pub fn embed(config: &ModelConfig, w: &Weights<f64>, tokens: &[u32]) -> Vec<Vec<f64>> {
    tokens
        .iter()
        .map(|&t| w.embed.data()[t as usize * config.d_model..][..config.d_model].to_vec())
        .collect()
}

/// Run one block on a residual stream, optionally with fixed attention
/// probabilities. Returns `(attn_out, new residual)`.
pub fn block(
    config: &ModelConfig,
    w: &Weights<f64>,
    layer: usize,
    resid: &[Vec<f64>],
    probs_override: Option<&[Vec<Vec<f64>>]>,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let parts = attention_parts(config, w, layer, resid);
    let probs = probs_override.unwrap_or(&parts.probs);
    let attn = mix(config, w, layer, probs, &parts.values);
    let out = resid
        .iter()
        .zip(&attn)
        .map(|(x, a)| {
            let mid: Vec<f64> = x.iter().zip(a).map(|(x, a)| x + a).collect();
            let m = mlp(config, w, layer, &mid);
            mid.iter().zip(&m).map(|(x, m)| x + m).collect()
        })
        .collect();
    (attn, out)
}

pub fn final_logits(config: &ModelConfig, w: &Weights<f64>, resid: &[Vec<f64>]) -> Vec<Vec<f64>> {
    resid
        .iter()
        .map(|x| {
            let h = rms_norm(x, w.final_norm.data(), config.norm_eps);
            vec_mat(&h, w.unembed.data(), config.vocab_size)
        })
        .collect()
}

/// Straight-line forward pass: logits per position.
pub fn forward_logits(config: &ModelConfig, w: &Weights<f64>, tokens: &[u32]) -> Vec<Vec<f64>> {
    let mut x = embed(config, w, tokens);
    for layer in 0..config.n_layers {
        x = block(config, w, layer, &x, None).1;
    }
    final_logits(config, w, &x)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
