//! Logit lens, direct logit attribution, KL divergence and differential
//! neuron scores.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervention::NeuronId;
use crate::model::Transformer;
use crate::ops;
use crate::scalar::Scalar;
use crate::trace::Trace;

/// Position selector resolved against each trace separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenPosition {
    /// The trace's final token (the final prompt token for a prompt trace).
    #[default]
    Last,
    At(usize),
}

impl TokenPosition {
    pub fn resolve<T: Scalar>(&self, trace: &Trace<T>) -> Result<usize> {
        let p = match *self {
            TokenPosition::Last => trace.last_position(),
            TokenPosition::At(p) => p,
        };
        if p >= trace.seq_len() {
            return Err(Error::Address(format!(
                "position {p} outside trace of length {}",
                trace.seq_len()
            )));
        }
        Ok(p)
    }
}

fn check_trace<T: Scalar>(model: &Transformer<T>, trace: &Trace<T>) -> Result<()> {
    if model.config() != &trace.config {
        return Err(Error::Shape(
            "trace was recorded with a different model shape".into(),
        ));
    }
    Ok(())
}

/// Vocabulary distribution read off the residual stream after `depth`
/// blocks (0 = embeddings, `n_layers` = final), normalized with that
/// residual's own RMS scale.
pub fn logit_lens<T: Scalar>(
    model: &Transformer<T>,
    trace: &Trace<T>,
    depth: usize,
    position: usize,
) -> Result<Vec<T>> {
    check_trace(model, trace)?;
    if depth > trace.config.n_layers {
        return Err(Error::Address(format!(
            "lens depth {depth} > n_layers {}",
            trace.config.n_layers
        )));
    }
    if position >= trace.seq_len() {
        return Err(Error::Address(format!("position {position} out of range")));
    }
    let hidden = trace.hidden(depth).row(position);
    let scale = model.final_scale(hidden);
    let mut scores = model.unembed(hidden, scale)?;
    ops::softmax_in_place(&mut scores);
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensPoint {
    pub depth: usize,
    /// Probability of the tracked token.
    pub prob: f64,
    pub top_token: u32,
    pub top_prob: f64,
}

/// Lens readings at every depth for one tracked token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensCurve {
    pub position: usize,
    pub token: u32,
    pub points: Vec<LensPoint>,
}

impl LensCurve {
    /// First depth at which the tracked token is the top-1 prediction.
    pub fn first_top1(&self) -> Option<usize> {
        self.points
            .iter()
            .find(|p| p.top_token == self.token)
            .map(|p| p.depth)
    }
}

pub fn lens_curve<T: Scalar>(
    model: &Transformer<T>,
    trace: &Trace<T>,
    position: usize,
    token: u32,
) -> Result<LensCurve> {
    if token as usize >= trace.config.vocab_size {
        return Err(Error::TokenOutOfRange {
            id: token,
            vocab: trace.config.vocab_size,
        });
    }
    let points = (0..=trace.config.n_layers)
        .map(|depth| {
            let dist = logit_lens(model, trace, depth, position)?;
            let top = ops::argmax(&dist);
            Ok(LensPoint {
                depth,
                prob: dist[token as usize].to_f64_lossy(),
                top_token: top as u32,
                top_prob: dist[top].to_f64_lossy(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(LensCurve {
        position,
        token,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Attn,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentAttribution {
    pub layer: usize,
    pub component: Component,
    pub logits: Vec<f64>,
}

/// Additive decomposition of one position's final logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub position: usize,
    pub embedding: Vec<f64>,
    pub components: Vec<ComponentAttribution>,
}

impl Attribution {
    /// Attention plus MLP contribution of each layer.
    pub fn per_layer(&self) -> Vec<Vec<f64>> {
        let n = self
            .components
            .iter()
            .map(|c| c.layer + 1)
            .max()
            .unwrap_or(0);
        let mut out = vec![vec![0.0; self.embedding.len()]; n];
        for c in &self.components {
            for (o, v) in out[c.layer].iter_mut().zip(&c.logits) {
                *o += v;
            }
        }
        out
    }

    /// Sum of every component, which reconstructs the final logits.
    pub fn total(&self) -> Vec<f64> {
        let mut out = self.embedding.clone();
        for c in &self.components {
            for (o, v) in out.iter_mut().zip(&c.logits) {
                *o += v;
            }
        }
        out
    }
}

/// Direct logit attribution with the final RMS scale frozen, so the
/// embedding and per-block components sum to the final logits.
pub fn layer_attribution<T: Scalar>(
    model: &Transformer<T>,
    trace: &Trace<T>,
    position: usize,
) -> Result<Attribution> {
    check_trace(model, trace)?;
    if position >= trace.seq_len() {
        return Err(Error::Address(format!("position {position} out of range")));
    }
    let scale = trace.final_norm_scale[position];
    let project = |row: &[T]| -> Result<Vec<f64>> {
        Ok(model
            .unembed(row, scale)?
            .into_iter()
            .map(|v| v.to_f64_lossy())
            .collect())
    };
    let embedding = project(trace.embed.row(position))?;
    let mut components = Vec::with_capacity(2 * trace.layers.len());
    for (layer, lt) in trace.layers.iter().enumerate() {
        components.push(ComponentAttribution {
            layer,
            component: Component::Attn,
            logits: project(lt.attn_out.row(position))?,
        });
        components.push(ComponentAttribution {
            layer,
            component: Component::Mlp,
            logits: project(lt.mlp_out.row(position))?,
        });
    }
    Ok(Attribution {
        position,
        embedding,
        components,
    })
}

/// Floor applied to `q` before taking logs.
pub const KL_FLOOR: f64 = 1e-12;

/// `sum p ln(p / max(q, floor))` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "support sizes differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::Empty("distribution"));
    }
    if p.iter().chain(q).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Invalid(
            "distributions must be finite and nonnegative".into(),
        ));
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(KL_FLOOR)).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// Softmax of an attribution vector, for comparing components across runs.
pub fn attribution_distribution(logits: &[f64]) -> Vec<f64> {
    let mut v = logits.to_vec();
    ops::softmax_in_place(&mut v);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronScore {
    pub neuron: NeuronId,
    /// Activation in the bad run minus activation in the good run.
    pub score: f64,
}

/// Per-neuron `bad - good` activation differences over `layers`, sorted
/// descending (ties by layer, then index).
pub fn differential_scores<T: Scalar>(
    bad: &Trace<T>,
    good: &Trace<T>,
    layers: Range<usize>,
    position: TokenPosition,
) -> Result<Vec<NeuronScore>> {
    if bad.config != good.config {
        return Err(Error::Shape(
            "traces come from different model shapes".into(),
        ));
    }
    if layers.end > bad.config.n_layers || layers.is_empty() {
        return Err(Error::Address(format!(
            "layer range {layers:?} invalid for {} layers",
            bad.config.n_layers
        )));
    }
    let pb = position.resolve(bad)?;
    let pg = position.resolve(good)?;
    let mut scores = Vec::new();
    for layer in layers {
        let b = bad.layers[layer].mlp_act.row(pb);
        let g = good.layers[layer].mlp_act.row(pg);
        for (index, (&x, &y)) in b.iter().zip(g).enumerate() {
            scores.push(NeuronScore {
                neuron: NeuronId { layer, index },
                score: x.to_f64_lossy() - y.to_f64_lossy(),
            });
        }
    }
    scores.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.neuron.cmp(&b.neuron))
    });
    Ok(scores)
}

/// Default hijacker-set size: the highest positive differential scores.
pub const HIJACKER_SET_SIZE: usize = 8;

/// The top `n` neurons with strictly positive score.
pub fn hijacker_set(scores: &[NeuronScore], n: usize) -> Vec<NeuronId> {
    scores
        .iter()
        .filter(|s| s.score > 0.0)
        .take(n)
        .map(|s| s.neuron)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_self_is_zero() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_point_mass_against_uniform() {
        let kl = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_floors_zero_q() {
        let kl = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        let want = 0.5 * (0.5f64).ln() + 0.5 * (0.5 / KL_FLOOR).ln();
        assert!((kl - want).abs() < 1e-9);
        assert!(kl.is_finite());
    }

    #[test]
    fn kl_support_mismatch() {
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn hijacker_set_skips_non_positive() {
        let s = |layer, index, score| NeuronScore {
            neuron: NeuronId { layer, index },
            score,
        };
        let scores = vec![s(0, 1, 0.5), s(1, 0, 0.1), s(0, 0, 0.0), s(1, 1, -0.2)];
        assert_eq!(
            hijacker_set(&scores, 8),
            vec![
                NeuronId { layer: 0, index: 1 },
                NeuronId { layer: 1, index: 0 }
            ]
        );
    }
}
