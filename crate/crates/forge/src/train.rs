//! Deterministic single-threaded trainer with a hand-written backward pass.
//!
//! The forward pass here mirrors `Transformer::forward_trace` operation for
//! operation but keeps only what the backward pass needs, and processes a
//! batch of sequences laid end to end (attention never crosses a sequence
//! boundary; rotary positions restart at each sequence).

use patchlab_core::ops::{self, Rope};
use std::collections::HashMap;

use patchlab_core::{Checkpoint, ModelConfig, Provenance, Scalar, Transformer, Weights};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::task::{Example, OperandPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Linear warmup length; a cosine decay to `min_lr_ratio * lr` follows.
    pub warmup_steps: usize,
    pub min_lr_ratio: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled decay on matrices (norm gains are exempt).
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub log_every: usize,
    pub planted_locus: Option<PlantedLocus>,
}

/// Layer and heads whose attention routing is trained to carry the
/// format decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedLocus {
    pub layer: usize,
    pub heads: Vec<usize>,
    /// Chance that a draw becomes a cross-format example.
    pub probability: f64,
}

impl Default for PlantedLocus {
    fn default() -> Self {
        Self {
            layer: 3,
            heads: vec![0, 2, 4, 6],
            probability: 0.25,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-3,
            warmup_steps: 100,
            min_lr_ratio: 0.1,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 42,
            log_every: 50,
            planted_locus: Some(PlantedLocus::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ForgeError::TrainConfig(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optimizer moments must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("adam_eps must be positive; weight_decay and grad_clip non-negative");
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("min_lr_ratio must lie in [0, 1]");
        }
        if let Some(l) = &self.planted_locus {
            if !(0.0..=1.0).contains(&l.probability) {
                return bad("planted_locus.probability must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps.min(self.steps)).max(1) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos());
        self.learning_rate * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// One training sequence and where its supervised targets start.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub tokens: Vec<u32>,
    /// Index of the first position whose *next* token is supervised.
    pub first_target: usize,
    pub pattern_override: Option<PatternOverride>,
}

/// Fixed attention rows substituted for some heads of one layer, from
/// `start` onward. Gradients do not flow into the replaced rows' scores.
#[derive(Debug, Clone)]
pub struct PatternOverride {
    pub layer: usize,
    pub heads: Vec<usize>,
    pub start: usize,
    /// `[heads.len(), len, len]`, row-major; only causal entries are read.
    pub rows: Vec<f64>,
}

impl PatternOverride {
    fn row(&self, layer: usize, head: usize, i: usize, len: usize) -> Option<&[f64]> {
        if layer != self.layer || i < self.start {
            return None;
        }
        let slot = self.heads.iter().position(|&h| h == head)?;
        Some(&self.rows[(slot * len + i) * len..][..i + 1])
    }
}

impl From<&Example> for Sequence {
    fn from(e: &Example) -> Self {
        Self {
            tokens: e.sequence(),
            first_target: e.prompt.len() - 1,
            pattern_override: None,
        }
    }
}

struct LayerCache<T> {
    x_in: Vec<T>,
    s1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Per sequence, `[n_heads, len, len]`.
    probs: Vec<Vec<T>>,
    z: Vec<T>,
    x_mid: Vec<T>,
    s2: Vec<T>,
    h2: Vec<T>,
    gate: Vec<T>,
    up: Vec<T>,
    act: Vec<T>,
}

/// Mean answer-token cross-entropy of a batch and its gradient.
pub struct Backprop<'a, T: Scalar> {
    config: &'a ModelConfig,
    rope: Rope<T>,
}

fn mm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let (k_, n_) = (k as isize, n as isize);
    T::gemm(m, k, n, T::one(), a, k_, 1, b, n_, 1, T::zero(), c, n_, 1);
}

/// `c += aᵀ·b` with `a` stored `[k, m]`.
fn mm_tn_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        1,
        m as isize,
        b,
        n as isize,
        1,
        T::one(),
        c,
        n as isize,
        1,
    );
}

/// `c (+)= a·bᵀ` with `b` stored `[n, k]`.
fn mm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
    let beta = if acc { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        1,
        k as isize,
        beta,
        c,
        n as isize,
        1,
    );
}

fn rms_backward<T: Scalar>(
    x: &[T],
    scales: &[T],
    gain: &[T],
    dy: &[T],
    dgain: &mut [T],
    dx: &mut [T],
) {
    let d = gain.len();
    let dn = T::from_usize(d).expect("small");
    for (r, &s) in scales.iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let inv = T::one() / s;
        let mut dot = T::zero();
        for i in 0..d {
            dgain[i] += dyr[i] * xr[i] * inv;
            dot += gain[i] * dyr[i] * xr[i];
        }
        let coef = dot / (dn * s * s * s);
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += gain[i] * dyr[i] * inv - xr[i] * coef;
        }
    }
}

impl<'a, T: Scalar> Backprop<'a, T> {
    pub fn new(config: &'a ModelConfig) -> Self {
        Self {
            config,
            rope: Rope::new(config.d_head, config.max_seq),
        }
    }

    /// Forward and backward over `batch`; gradients are written into
    /// `grads` (overwritten). Returns the mean loss over supervised tokens.
    pub fn loss_and_grad(
        &self,
        w: &Weights<T>,
        batch: &[&Sequence],
        grads: &mut Weights<T>,
    ) -> Result<f64> {
        let c = self.config;
        let (d, nh, dh, m, vs) = (c.d_model, c.n_heads, c.d_head, c.d_mlp, c.vocab_size);
        let eps = T::from_f64_lossy(c.norm_eps);
        let scale = T::one() / T::from_usize(dh).expect("small").sqrt();

        let mut segs = Vec::with_capacity(batch.len());
        let mut tokens = Vec::new();
        for s in batch {
            if s.tokens.len() > c.max_seq || s.tokens.len() < 2 {
                return Err(ForgeError::TrainConfig(format!(
                    "sequence length {} outside 2..={}",
                    s.tokens.len(),
                    c.max_seq
                )));
            }
            if let Some(&t) = s.tokens.iter().find(|&&t| t as usize >= vs) {
                return Err(patchlab_core::Error::TokenOutOfRange { id: t, vocab: vs }.into());
            }
            segs.push((tokens.len(), s.tokens.len()));
            tokens.extend_from_slice(&s.tokens);
        }
        let n = tokens.len();

        // forward
        let mut x = Vec::with_capacity(n * d);
        for &t in &tokens {
            x.extend_from_slice(w.embed.row(t as usize));
        }
        let mut caches: Vec<LayerCache<T>> = Vec::with_capacity(c.n_layers);
        for (l, lw) in w.layers.iter().enumerate() {
            let x_in = x.clone();
            let mut h1 = vec![T::zero(); n * d];
            let s1 = ops::rms_norm_rows(&x, lw.attn_norm.data(), eps, &mut h1);
            let mut q = vec![T::zero(); n * d];
            let mut k = vec![T::zero(); n * d];
            let mut v = vec![T::zero(); n * d];
            mm(n, d, d, &h1, lw.wq.data(), &mut q);
            mm(n, d, d, &h1, lw.wk.data(), &mut k);
            mm(n, d, d, &h1, lw.wv.data(), &mut v);
            let mut z = vec![T::zero(); n * d];
            let mut probs = Vec::with_capacity(segs.len());
            for (seq, &(st, len)) in batch.iter().zip(&segs) {
                let r = st * d..(st + len) * d;
                self.rope.apply(&mut q[r.clone()], len, nh);
                self.rope.apply(&mut k[r], len, nh);
                let mut p = vec![T::zero(); nh * len * len];
                for hd in 0..nh {
                    for i in 0..len {
                        let qi = &q[(st + i) * d + hd * dh..][..dh];
                        let row = &mut p[(hd * len + i) * len..][..i + 1];
                        for (j, slot) in row.iter_mut().enumerate() {
                            let kj = &k[(st + j) * d + hd * dh..][..dh];
                            let dot: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                            *slot = dot * scale;
                        }
                        ops::softmax_in_place(row);
                        if let Some(src) = seq
                            .pattern_override
                            .as_ref()
                            .and_then(|o| o.row(l, hd, i, len))
                        {
                            for (slot, &v) in row.iter_mut().zip(src) {
                                *slot = T::from_f64_lossy(v);
                            }
                        }
                        let out = &mut z[(st + i) * d + hd * dh..][..dh];
                        for j in 0..=i {
                            let pij = p[(hd * len + i) * len + j];
                            let vj = &v[(st + j) * d + hd * dh..][..dh];
                            for (o, &vv) in out.iter_mut().zip(vj) {
                                *o += pij * vv;
                            }
                        }
                    }
                }
                probs.push(p);
            }
            let mut attn = vec![T::zero(); n * d];
            mm(n, d, d, &z, lw.wo.data(), &mut attn);
            for (xi, &a) in x.iter_mut().zip(&attn) {
                *xi += a;
            }
            let x_mid = x.clone();
            let mut h2 = vec![T::zero(); n * d];
            let s2 = ops::rms_norm_rows(&x, lw.mlp_norm.data(), eps, &mut h2);
            let mut gate = vec![T::zero(); n * m];
            let mut up = vec![T::zero(); n * m];
            mm(n, d, m, &h2, lw.w_gate.data(), &mut gate);
            mm(n, d, m, &h2, lw.w_in.data(), &mut up);
            let act: Vec<T> = gate
                .iter()
                .zip(&up)
                .map(|(&g, &u)| ops::silu(g) * u)
                .collect();
            let mut out = vec![T::zero(); n * d];
            mm(n, m, d, &act, lw.w_out.data(), &mut out);
            for (xi, &o) in x.iter_mut().zip(&out) {
                *xi += o;
            }
            caches.push(LayerCache {
                x_in,
                s1,
                h1,
                q,
                k,
                v,
                probs,
                z,
                x_mid,
                s2,
                h2,
                gate,
                up,
                act,
            });
        }
        let mut hf = vec![T::zero(); n * d];
        let sf = ops::rms_norm_rows(&x, w.final_norm.data(), eps, &mut hf);
        let mut logits = vec![T::zero(); n * vs];
        mm(n, d, vs, &hf, w.unembed.data(), &mut logits);

        // loss and dlogits
        let mut count = 0usize;
        for (s, &(_, len)) in batch.iter().zip(&segs) {
            count += len - 1 - s.first_target;
        }
        if count == 0 {
            return Err(ForgeError::TrainConfig(
                "batch has no supervised tokens".into(),
            ));
        }
        let inv_count = T::one() / T::from_usize(count).expect("small");
        let mut loss = 0.0f64;
        let mut dlogits = vec![T::zero(); n * vs];
        for (s, &(st, len)) in batch.iter().zip(&segs) {
            for t in s.first_target..len - 1 {
                let row = (st + t) * vs;
                let mut p = logits[row..row + vs].to_vec();
                ops::softmax_in_place(&mut p);
                let target = s.tokens[t + 1] as usize;
                loss -= p[target].to_f64_lossy().max(f64::MIN_POSITIVE).ln();
                for (j, &pj) in p.iter().enumerate() {
                    let y = if j == target { T::one() } else { T::zero() };
                    dlogits[row + j] = (pj - y) * inv_count;
                }
            }
        }
        loss /= count as f64;

        // backward
        let gw = grads;
        for t in gw.tensors_mut() {
            t.data_mut().fill(T::zero());
        }
        mm_tn_acc(d, n, vs, &hf, &dlogits, gw.unembed.data_mut());
        let mut dnorm = vec![T::zero(); n * d];
        mm_nt(n, vs, d, &dlogits, w.unembed.data(), &mut dnorm, false);
        let mut dx = vec![T::zero(); n * d];
        rms_backward(
            &x,
            &sf,
            w.final_norm.data(),
            &dnorm,
            gw.final_norm.data_mut(),
            &mut dx,
        );

        for (l, (lw, cache)) in w.layers.iter().zip(&caches).enumerate().rev() {
            let gl = &mut gw.layers[l];
            // MLP: dx is d(resid_post) which also flows straight to x_mid
            mm_tn_acc(m, n, d, &cache.act, &dx, gl.w_out.data_mut());
            let mut dact = vec![T::zero(); n * m];
            mm_nt(n, d, m, &dx, lw.w_out.data(), &mut dact, false);
            let mut dgate = vec![T::zero(); n * m];
            let mut dup = vec![T::zero(); n * m];
            for i in 0..n * m {
                let g = cache.gate[i];
                dgate[i] = dact[i] * cache.up[i] * ops::silu_grad(g);
                dup[i] = dact[i] * ops::silu(g);
            }
            mm_tn_acc(d, n, m, &cache.h2, &dgate, gl.w_gate.data_mut());
            mm_tn_acc(d, n, m, &cache.h2, &dup, gl.w_in.data_mut());
            mm_nt(n, m, d, &dgate, lw.w_gate.data(), &mut dnorm, false);
            mm_nt(n, m, d, &dup, lw.w_in.data(), &mut dnorm, true);
            rms_backward(
                &cache.x_mid,
                &cache.s2,
                lw.mlp_norm.data(),
                &dnorm,
                gl.mlp_norm.data_mut(),
                &mut dx,
            );

            // attention
            mm_tn_acc(d, n, d, &cache.z, &dx, gl.wo.data_mut());
            let mut dz = vec![T::zero(); n * d];
            mm_nt(n, d, d, &dx, lw.wo.data(), &mut dz, false);
            let mut dq = vec![T::zero(); n * d];
            let mut dk = vec![T::zero(); n * d];
            let mut dv = vec![T::zero(); n * d];
            for ((seq, &(st, len)), p) in batch.iter().zip(&segs).zip(&cache.probs) {
                let mut dp = vec![T::zero(); len];
                for hd in 0..nh {
                    let col = hd * dh;
                    for i in 0..len {
                        let dzi = &dz[(st + i) * d + col..][..dh];
                        let prow = &p[(hd * len + i) * len..][..i + 1];
                        let mut dot = T::zero();
                        for j in 0..=i {
                            let vj = &cache.v[(st + j) * d + col..][..dh];
                            dp[j] = dzi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                            dot += prow[j] * dp[j];
                            let dvj = &mut dv[(st + j) * d + col..][..dh];
                            for (o, &g) in dvj.iter_mut().zip(dzi) {
                                *o += prow[j] * g;
                            }
                        }
                        let fixed = seq
                            .pattern_override
                            .as_ref()
                            .is_some_and(|o| o.row(l, hd, i, len).is_some());
                        if fixed {
                            continue;
                        }
                        for j in 0..=i {
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            for e in 0..dh {
                                let qi = cache.q[(st + i) * d + col + e];
                                let kj = cache.k[(st + j) * d + col + e];
                                dq[(st + i) * d + col + e] += ds * kj;
                                dk[(st + j) * d + col + e] += ds * qi;
                            }
                        }
                    }
                }
                let r = st * d..(st + len) * d;
                self.rope.apply_inverse(&mut dq[r.clone()], len, nh);
                self.rope.apply_inverse(&mut dk[r], len, nh);
            }
            mm_tn_acc(d, n, d, &cache.h1, &dq, gl.wq.data_mut());
            mm_tn_acc(d, n, d, &cache.h1, &dk, gl.wk.data_mut());
            mm_tn_acc(d, n, d, &cache.h1, &dv, gl.wv.data_mut());
            mm_nt(n, d, d, &dq, lw.wq.data(), &mut dnorm, false);
            mm_nt(n, d, d, &dk, lw.wk.data(), &mut dnorm, true);
            mm_nt(n, d, d, &dv, lw.wv.data(), &mut dnorm, true);
            rms_backward(
                &cache.x_in,
                &cache.s1,
                lw.attn_norm.data(),
                &dnorm,
                gl.attn_norm.data_mut(),
                &mut dx,
            );
        }
        let ge = gw.embed.data_mut();
        for (r, &t) in tokens.iter().enumerate() {
            let row = &mut ge[t as usize * d..(t as usize + 1) * d];
            for (g, &v) in row.iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                *g += v;
            }
        }
        Ok(loss)
    }
}

/// Which tensors get weight decay: everything except the norm gains.
fn decays(config: &ModelConfig) -> Vec<bool> {
    patchlab_core::weights::tensor_layout(config)
        .into_iter()
        .map(|(name, _)| !name.ends_with("norm"))
        .collect()
}

/// Train a fresh model on `corpus`. Deterministic for a fixed config.
///
/// With a planted locus configured, some draws are replaced by a
/// cross-format example: the prompt of one format, the answer of the same
/// pair in another format, and the locus heads' attention rows (from the
/// final prompt position on) taken from the current model's run on that
/// other format's sequence.
pub fn train_toy(
    model_config: &ModelConfig,
    corpus: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let seqs: Vec<Sequence> = corpus.iter().map(Sequence::from).collect();
    let mut by_pair: HashMap<&OperandPair, Vec<usize>> = HashMap::new();
    for (i, e) in corpus.iter().enumerate() {
        by_pair.entry(&e.pair).or_default().push(i);
    }
    let counterparts: Vec<Vec<usize>> = corpus
        .iter()
        .enumerate()
        .map(|(i, e)| {
            by_pair[&e.pair]
                .iter()
                .copied()
                .filter(|&j| j != i && corpus[j].format != e.format)
                .filter(|&j| corpus[j].prompt.len() == e.prompt.len())
                .collect()
        })
        .collect();
    run(model_config, cfg, &seqs, |weights, rng, index, seq| {
        let Some(locus) = &cfg.planted_locus else {
            return Ok(None);
        };
        let options = &counterparts[index];
        if options.is_empty() || rng.random::<f64>() >= locus.probability {
            return Ok(None);
        }
        let source = &corpus[options[rng.random_range(0..options.len())]];
        let target = &corpus[index];
        let mut tokens = target.prompt.clone();
        tokens.extend_from_slice(&source.answer);
        let model = weights.get_or_insert_with(model_config)?;
        let trace = model.forward_trace(&source.sequence())?;
        let pattern = &trace.layers[locus.layer].attn_pattern;
        let len = tokens.len();
        let mut rows = Vec::with_capacity(locus.heads.len() * len * len);
        for &h in &locus.heads {
            for i in 0..len {
                rows.extend(pattern.row(h * len + i).iter().map(|&v| v as f64));
            }
        }
        Ok(Some(Sequence {
            tokens,
            first_target: seq.first_target,
            pattern_override: Some(PatternOverride {
                layer: locus.layer,
                heads: locus.heads.clone(),
                start: seq.first_target,
                rows,
            }),
        }))
    })
}

/// Train on fixed sequences with no cross-format draws.
pub fn train_sequences(
    model_config: &ModelConfig,
    seqs: &[Sequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    run(model_config, cfg, seqs, |_, _, _, _| Ok(None))
}

/// Lazily built inference model over the weights of the current step.
struct StepModel<'a> {
    weights: &'a Weights<f32>,
    model: Option<Transformer<f32>>,
}

impl StepModel<'_> {
    fn get_or_insert_with(&mut self, config: &ModelConfig) -> Result<&Transformer<f32>> {
        if self.model.is_none() {
            self.model = Some(Transformer::new(config.clone(), self.weights.clone())?);
        }
        Ok(self.model.as_ref().expect("just built"))
    }
}

fn run<F>(
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    seqs: &[Sequence],
    mut substitute: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&mut StepModel<'_>, &mut ChaCha8Rng, usize, &Sequence) -> Result<Option<Sequence>>,
{
    model_config.validate()?;
    cfg.validate()?;
    if let Some(locus) = &cfg.planted_locus {
        if locus.layer >= model_config.n_layers
            || locus.heads.is_empty()
            || locus.heads.iter().any(|&h| h >= model_config.n_heads)
        {
            return Err(ForgeError::TrainConfig(format!(
                "planted locus {locus:?} does not fit the model"
            )));
        }
    }
    if seqs.is_empty() {
        return Err(ForgeError::TrainConfig("empty corpus".into()));
    }
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_10c5);
    let mut weights = Weights::<f32>::init(model_config, cfg.seed)?;
    let mut grads = Weights::<f32>::zeros(model_config)?;
    let bp = Backprop::<f32>::new(model_config);
    let decay = decays(model_config);
    let sizes: Vec<usize> = weights.tensors_mut().iter().map(|t| t.len()).collect();
    let mut m1: Vec<Vec<f32>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut m2 = m1.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut log = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for step in 0..cfg.steps {
        let mut owned = Vec::new();
        let mut picks = Vec::with_capacity(cfg.batch_size);
        let mut step_model = StepModel {
            weights: &weights,
            model: None,
        };
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let index = order[cursor];
            cursor += 1;
            match substitute(&mut step_model, &mut aug_rng, index, &seqs[index])? {
                Some(s) => {
                    picks.push(None);
                    owned.push(s);
                }
                None => picks.push(Some(index)),
            }
        }
        let mut extra = owned.iter();
        let batch: Vec<&Sequence> = picks
            .iter()
            .map(|p| match p {
                Some(i) => &seqs[*i],
                None => extra.next().expect("one substitute per gap"),
            })
            .collect();
        let loss = bp.loss_and_grad(&weights, &batch, &mut grads)?;
        let sq: f64 = grads
            .tensors_mut()
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum();
        let gnorm = sq.sqrt();
        if !loss.is_finite() || !gnorm.is_finite() {
            return Err(ForgeError::Diverged { step, loss });
        }
        if step == 0 {
            initial_loss = loss;
        }
        last_loss = loss;
        let clip = if cfg.grad_clip > 0.0 && gnorm > cfg.grad_clip {
            cfg.grad_clip / gnorm
        } else {
            1.0
        };
        let lr = cfg.lr_at(step);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let step_size = (lr / bc1) as f32;
        let (b1f, b2f, clipf) = (b1 as f32, b2 as f32, clip as f32);
        let inv_bc2 = (1.0 / bc2) as f32;
        let epsf = cfg.adam_eps as f32;
        let wd = (lr * cfg.weight_decay) as f32;
        let gts = grads.tensors_mut();
        let gdata: Vec<&[f32]> = gts.iter().map(|t| t.data()).collect();
        for (i, p) in weights.tensors_mut().into_iter().enumerate() {
            let (m1i, m2i) = (&mut m1[i], &mut m2[i]);
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let g = gdata[i][j] * clipf;
                m1i[j] = b1f * m1i[j] + (1.0 - b1f) * g;
                m2i[j] = b2f * m2i[j] + (1.0 - b2f) * g * g;
                if decay[i] {
                    pd[j] -= wd * pd[j];
                }
                pd[j] -= step_size * m1i[j] / ((m2i[j] * inv_bc2).sqrt() + epsf);
            }
        }
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            log::info!("step {step} loss {loss:.5} lr {lr:.2e} grad_norm {gnorm:.4}");
            log.push(LogEntry {
                step,
                loss,
                lr,
                grad_norm: gnorm,
            });
        }
    }
    if weights.tensors_mut().iter().any(|t| !t.all_finite()) {
        return Err(ForgeError::Diverged {
            step: cfg.steps,
            loss: last_loss,
        });
    }
    let provenance = Provenance {
        seed: cfg.seed,
        steps: cfg.steps as u64,
        final_loss: Some(last_loss),
        notes: Default::default(),
    };
    let checkpoint = Checkpoint::new(model_config.clone(), weights, provenance)?;
    Ok(TrainOutcome {
        checkpoint,
        log,
        initial_loss,
        final_loss: last_loss,
    })
}
