use crate::config::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Activations recorded for one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace<T = f32> {
    /// `[seq, d_model]`
    pub resid_pre: Tensor<T>,
    /// `[n_heads, seq, seq]`, row-stochastic and causal.
    pub attn_pattern: Tensor<T>,
    /// `[n_heads, seq, d_head]`, before the output projection. May be omitted
    /// from persisted traces.
    pub attn_head_out: Option<Tensor<T>>,
    /// `[seq, d_model]`
    pub attn_out: Tensor<T>,
    /// `[seq, d_mlp]`, gated activations entering the down projection.
    pub mlp_act: Tensor<T>,
    /// `[seq, d_model]`
    pub mlp_out: Tensor<T>,
    /// `[seq, d_model]`
    pub resid_post: Tensor<T>,
}

/// Complete activation record of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace<T = f32> {
    pub config: ModelConfig,
    pub tokens: Vec<u32>,
    /// Token embeddings, i.e. the residual stream entering layer 0.
    pub embed: Tensor<T>,
    pub layers: Vec<LayerTrace<T>>,
    /// Per-position RMS divisor of the final normalization.
    pub final_norm_scale: Vec<T>,
    /// `[seq, vocab]`
    pub logits: Tensor<T>,
}

impl<T: Scalar> Trace<T> {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn last_position(&self) -> usize {
        self.tokens.len() - 1
    }

    /// The residual stream after `depth` blocks: 0 is the embedding,
    /// `n_layers` the final residual.
    pub fn hidden(&self, depth: usize) -> &Tensor<T> {
        if depth == 0 {
            &self.embed
        } else {
            &self.layers[depth - 1].resid_post
        }
    }

    pub fn has_head_outputs(&self) -> bool {
        self.layers.iter().all(|l| l.attn_head_out.is_some())
    }

    pub fn without_head_outputs(mut self) -> Self {
        for l in &mut self.layers {
            l.attn_head_out = None;
        }
        self
    }

    /// Largest deviation of any attention row from the probability simplex
    /// and whether any entry above the diagonal is non-zero.
    pub fn pattern_violations(&self) -> (f64, bool) {
        let s = self.seq_len();
        let mut worst = 0.0f64;
        let mut acausal = false;
        for layer in &self.layers {
            for row in layer.attn_pattern.data().chunks(s).enumerate() {
                let (idx, row) = row;
                let i = idx % s;
                let sum: f64 = row.iter().map(|v| v.to_f64_lossy()).sum();
                worst = worst.max((sum - 1.0).abs());
                for (j, v) in row.iter().enumerate() {
                    if v.to_f64_lossy() < 0.0 {
                        worst = worst.max(-v.to_f64_lossy());
                    }
                    if j > i && *v != T::zero() {
                        acausal = true;
                    }
                }
            }
        }
        (worst, acausal)
    }

    /// Max-abs of `resid_post - resid_pre - attn_out - mlp_out` over all layers.
    pub fn residual_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for l in &self.layers {
            for (((post, pre), a), m) in l
                .resid_post
                .data()
                .iter()
                .zip(l.resid_pre.data())
                .zip(l.attn_out.data())
                .zip(l.mlp_out.data())
            {
                let r =
                    post.to_f64_lossy() - pre.to_f64_lossy() - a.to_f64_lossy() - m.to_f64_lossy();
                worst = worst.max(r.abs());
            }
        }
        worst
    }

    /// Bitwise equality of every recorded tensor.
    pub fn bit_eq(&self, other: &Trace<T>) -> bool {
        self.tokens == other.tokens
            && self.config == other.config
            && self.embed.bit_eq(&other.embed)
            && self.logits.bit_eq(&other.logits)
            && self.final_norm_scale.len() == other.final_norm_scale.len()
            && self
                .final_norm_scale
                .iter()
                .zip(&other.final_norm_scale)
                .all(|(a, b)| a.to_f64_lossy().to_bits() == b.to_f64_lossy().to_bits())
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.resid_pre.bit_eq(&b.resid_pre)
                    && a.attn_pattern.bit_eq(&b.attn_pattern)
                    && match (&a.attn_head_out, &b.attn_head_out) {
                        (Some(x), Some(y)) => x.bit_eq(y),
                        (None, None) => true,
                        _ => false,
                    }
                    && a.attn_out.bit_eq(&b.attn_out)
                    && a.mlp_act.bit_eq(&b.mlp_act)
                    && a.mlp_out.bit_eq(&b.mlp_out)
                    && a.resid_post.bit_eq(&b.resid_post)
            })
    }
}
