use log::{debug, warn};
use patchlab_core::io::{digest_tensors, ActivationDataset};
use patchlab_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::model::{normalize, topk_indices, ActivationSource, SaeConfig, SaeModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Mean squared error per element on the eval split.
    pub mse: f64,
    /// `sum |x - x_hat|^2 / sum |x|^2` on the eval split.
    pub relative_error: f64,
    /// Features not selected by any sample since the previous checkpoint.
    pub silent: usize,
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;
/// Most rows scanned when choosing re-initialization directions.
const PROBE_ROWS: usize = 512;

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, param: &mut [f32], grad: &[f32], lr: f32, t: i32) {
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }

    fn reset(&mut self, range: std::ops::Range<usize>) {
        self.m[range.clone()].fill(0.0);
        self.v[range].fill(0.0);
    }

    fn reset_strided(&mut self, start: usize, stride: usize, count: usize) {
        for j in 0..count {
            self.m[start + j * stride] = 0.0;
            self.v[start + j * stride] = 0.0;
        }
    }
}

/// Relative reconstruction error `sum |x - x_hat|^2 / sum |x|^2` over rows.
pub fn relative_error(sae: &SaeModel, rows: &Tensor<f32>) -> Result<f64> {
    let idx: Vec<usize> = (0..rows.shape()[0]).collect();
    Ok(metrics(sae, rows, &idx)?.1)
}

/// (mse per element, relative error) over the selected rows.
fn metrics(sae: &SaeModel, rows: &Tensor<f32>, idx: &[usize]) -> Result<(f64, f64)> {
    let parts: Vec<(f64, f64)> = idx
        .par_iter()
        .map(|&i| {
            let x = rows.row(i);
            let xh = sae.reconstruct(x)?;
            let err: f64 = x
                .iter()
                .zip(&xh)
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            let norm: f64 = x.iter().map(|&a| (a as f64).powi(2)).sum();
            Ok((err, norm))
        })
        .collect::<Result<_>>()?;
    let (err, norm) = parts
        .iter()
        .fold((0.0, 0.0), |(e, n), p| (e + p.0, n + p.1));
    let mse = err / (idx.len() * sae.input_dim()) as f64;
    let rel = if norm > 0.0 {
        err / norm
    } else if err == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok((mse, rel))
}

pub fn train_sae(data: &ActivationDataset, config: &SaeConfig) -> Result<SaeModel> {
    let source = ActivationSource {
        layer: data.layer,
        site: data.site.to_string(),
    };
    train_rows(&data.rows, config, Some(source))
}

/// Train on a bare `[n, input_dim]` matrix.
pub fn train_rows(
    rows: &Tensor<f32>,
    config: &SaeConfig,
    source: Option<ActivationSource>,
) -> Result<SaeModel> {
    config.validate()?;
    if rows.shape().len() != 2 {
        return Err(SaeError::Invalid("activations must be a matrix".into()));
    }
    let (n, d) = (rows.shape()[0], rows.shape()[1]);
    if d != config.input_dim {
        return Err(SaeError::Dim {
            expected: config.input_dim,
            got: d,
        });
    }
    if n < 2 {
        return Err(SaeError::Invalid(format!("need at least 2 rows, got {n}")));
    }
    if !rows.all_finite() {
        return Err(SaeError::Invalid(
            "activations contain non-finite values".into(),
        ));
    }
    let f = config.n_features();
    let k = config.k;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_eval = ((n as f64 * config.eval_fraction).round() as usize).clamp(1, n - 1);
    let (eval_idx, train_idx) = order.split_at(n_eval);
    if train_idx.len() < f {
        warn!(
            "{} training rows for {f} features; expect dead or duplicated features",
            train_idx.len()
        );
    }

    let mut sae = SaeModel::init(config.clone(), &mut rng)?;
    // start the decoder bias at the data mean
    let b_dec = sae.b_dec.data_mut();
    for &i in train_idx {
        for (b, &x) in b_dec.iter_mut().zip(rows.row(i)) {
            *b += x;
        }
    }
    for b in b_dec.iter_mut() {
        *b /= train_idx.len() as f32;
    }

    let mut g_enc = vec![0.0f32; d * f];
    let mut g_benc = vec![0.0f32; f];
    let mut g_dec = vec![0.0f32; f * d];
    let mut g_bdec = vec![0.0f32; d];
    let mut a_enc = Adam::new(d * f);
    let mut a_benc = Adam::new(f);
    let mut a_dec = Adam::new(f * d);
    let mut a_bdec = Adam::new(d);

    let mut fires = vec![0u32; f];
    let mut silent_streak = vec![0usize; f];
    let mut evals = Vec::new();
    let mut reinitialized = 0;
    let mut xc = vec![0.0f32; d];
    let mut err = vec![0.0f32; d];
    let b = config.batch_size;
    let scale = 2.0 / (b * d) as f32;
    let decay_from = config.steps - config.steps / 5;

    for step in 0..config.steps {
        g_enc.fill(0.0);
        g_benc.fill(0.0);
        g_dec.fill(0.0);
        g_bdec.fill(0.0);
        let mut loss = 0.0f64;
        for _ in 0..b {
            let x = rows.row(train_idx[rng.random_range(0..train_idx.len())]);
            let pre = sae.pre_activations(x)?;
            let sel = topk_indices(&pre, k);
            err.copy_from_slice(sae.b_dec.data());
            for &i in &sel {
                let v = pre[i as usize];
                for (e, &w) in err.iter_mut().zip(sae.w_dec.row(i as usize)) {
                    *e += v * w;
                }
            }
            for ((e, &xi), (c, &bd)) in err
                .iter_mut()
                .zip(x)
                .zip(xc.iter_mut().zip(sae.b_dec.data()))
            {
                *e -= xi;
                *c = xi - bd;
                loss += (*e as f64).powi(2);
                *e *= scale;
            }
            for (gb, &e) in g_bdec.iter_mut().zip(&err) {
                *gb += e;
            }
            for &i in &sel {
                let i = i as usize;
                fires[i] += 1;
                let v = pre[i];
                let wrow = sae.w_dec.row(i);
                let mut dpre = 0.0f32;
                for ((gd, &e), &w) in g_dec[i * d..(i + 1) * d].iter_mut().zip(&err).zip(wrow) {
                    *gd += v * e;
                    dpre += e * w;
                }
                g_benc[i] += dpre;
                let wenc = sae.w_enc.data();
                for j in 0..d {
                    g_enc[j * f + i] += xc[j] * dpre;
                    g_bdec[j] -= wenc[j * f + i] * dpre;
                }
            }
        }
        let loss = loss / (b * d) as f64;
        if !loss.is_finite() {
            return Err(SaeError::NanLoss(step));
        }

        // keep decoder updates tangent to the unit sphere
        for i in 0..f {
            let g = &mut g_dec[i * d..(i + 1) * d];
            let w = sae.w_dec.row(i);
            let dot: f32 = g.iter().zip(w).map(|(a, b)| a * b).sum();
            if dot != 0.0 {
                for (gv, &wv) in g.iter_mut().zip(w) {
                    *gv -= dot * wv;
                }
            }
        }

        let lr = if step >= decay_from {
            config.learning_rate * (config.steps - step) as f64 / (config.steps - decay_from) as f64
        } else {
            config.learning_rate
        } as f32;
        let t = (step + 1) as i32;
        a_enc.step(sae.w_enc.data_mut(), &g_enc, lr, t);
        a_benc.step(sae.b_enc.data_mut(), &g_benc, lr, t);
        a_dec.step(sae.w_dec.data_mut(), &g_dec, lr, t);
        a_bdec.step(sae.b_dec.data_mut(), &g_bdec, lr, t);
        for i in 0..f {
            normalize(sae.w_dec.row_mut(i));
        }

        if (step + 1) % config.eval_every == 0 || step + 1 == config.steps {
            let silent = fires.iter().filter(|&&c| c == 0).count();
            for (s, c) in silent_streak.iter_mut().zip(&fires) {
                *s = if *c == 0 { *s + 1 } else { 0 };
            }
            fires.fill(0);
            let dead: Vec<usize> = (0..f)
                .filter(|&i| silent_streak[i] >= config.dead_after)
                .collect();
            let (mut mse, mut relative_error) = metrics(&sae, rows, eval_idx)?;
            if !dead.is_empty() && step + 1 < config.steps {
                // tentative: keep the new directions only if eval error does not rise
                let saved = sae.clone();
                let probe = &train_idx[..train_idx.len().min(PROBE_ROWS)];
                reinit(&mut sae, rows, probe, &dead)?;
                let (m2, r2) = metrics(&sae, rows, eval_idx)?;
                if m2 <= mse {
                    (mse, relative_error) = (m2, r2);
                    for &i in &dead {
                        a_dec.reset(i * d..(i + 1) * d);
                        a_enc.reset_strided(i, f, d);
                        a_benc.reset(i..i + 1);
                    }
                    reinitialized += dead.len();
                    debug!(
                        "step {}: re-initialized {} silent features",
                        step + 1,
                        dead.len()
                    );
                } else {
                    sae = saved;
                }
                for &i in &dead {
                    silent_streak[i] = 0;
                }
            }
            debug!(
                "step {}: loss {loss:.6} eval mse {mse:.6} rel {relative_error:.4}",
                step + 1
            );
            evals.push(EvalPoint {
                step: step + 1,
                mse,
                relative_error,
                silent,
            });
        }
    }

    sae.provenance.source = source;
    sae.provenance.train_rows = train_idx.len();
    sae.provenance.eval_rows = eval_idx.len();
    sae.provenance.eval = evals;
    sae.provenance.reinitialized = reinitialized;
    sae.provenance.dataset_digest = digest_tensors([rows]);
    Ok(sae)
}

/// Point silent features at the worst-reconstructed probe rows.
fn reinit(sae: &mut SaeModel, rows: &Tensor<f32>, probe: &[usize], dead: &[usize]) -> Result<()> {
    let mut residuals: Vec<(f64, Vec<f32>)> = probe
        .par_iter()
        .map(|&i| {
            let x = rows.row(i);
            let xh = sae.reconstruct(x)?;
            let r: Vec<f32> = x.iter().zip(&xh).map(|(a, b)| a - b).collect();
            let n = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            Ok((n, r))
        })
        .collect::<Result<_>>()?;
    residuals.sort_by(|a, b| b.0.total_cmp(&a.0));
    residuals.retain(|r| r.0 > 0.0);
    if residuals.is_empty() {
        return Ok(());
    }
    let f = sae.n_features();
    let d = sae.input_dim();
    // new encoder columns start small so they phase in instead of taking
    // over every top-k slot at once
    let live: Vec<usize> = (0..f).filter(|i| !dead.contains(i)).collect();
    let mean_norm = if live.is_empty() {
        1.0
    } else {
        let w = sae.w_enc.data();
        live.iter()
            .map(|&i| {
                (0..d)
                    .map(|j| (w[j * f + i] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / live.len() as f64
    };
    let enc_scale = (0.2 * mean_norm) as f32;
    for (slot, &feat) in dead.iter().enumerate() {
        let mut dir = residuals[slot % residuals.len()].1.clone();
        normalize(&mut dir);
        sae.w_dec.row_mut(feat).copy_from_slice(&dir);
        let w_enc = sae.w_enc.data_mut();
        for j in 0..d {
            w_enc[j * f + feat] = enc_scale * dir[j];
        }
        sae.b_enc.data_mut()[feat] = 0.0;
    }
    Ok(())
}
