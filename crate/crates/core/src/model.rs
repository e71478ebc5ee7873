use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::intervention::{self, PatchPlan, Site};
use crate::ops::{self, Rope};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;
use crate::trace::{LayerTrace, Trace};
use crate::weights::Weights;

/// A decoder-only transformer: RMS norm, rotary multi-head attention and a
/// SiLU-gated MLP per block, untied unembedding without bias.
///
/// Immutable after construction; forward passes take `&self` and can run
/// concurrently.
#[derive(Debug, Clone)]
pub struct Transformer<T = f32> {
    config: ModelConfig,
    weights: Weights<T>,
    rope: Rope<T>,
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: ModelConfig, weights: Weights<T>) -> Result<Self> {
        config.validate()?;
        weights.check(&config)?;
        if weights.named().iter().any(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite("weights"));
        }
        let rope = Rope::new(config.d_head, config.max_seq);
        Ok(Self {
            config,
            weights,
            rope,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights<T> {
        &self.weights
    }

    pub fn into_weights(self) -> Weights<T> {
        self.weights
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer::new(self.config.clone(), self.weights.cast())
            .expect("valid weights stay valid")
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&id) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Unpatched forward pass recording every intermediate activation.
    pub fn forward_trace(&self, tokens: &[u32]) -> Result<Trace<T>> {
        self.check_tokens(tokens)?;
        Ok(self.run(tokens, None))
    }

    /// Forward pass with `plan` applied inline at each named site.
    pub fn forward_patched(&self, tokens: &[u32], plan: &PatchPlan<T>) -> Result<Trace<T>> {
        self.check_tokens(tokens)?;
        plan.validate(&self.config)?;
        Ok(self.run(tokens, (!plan.is_empty()).then_some(plan)))
    }

    /// Greedy decoding: append the argmax token (lowest id on ties) until
    /// `max_new` tokens were added or `end_token` was produced. Returns the
    /// whole sequence, prompt included.
    pub fn generate_greedy(
        &self,
        prompt: &[u32],
        max_new: usize,
        end_token: Option<u32>,
    ) -> Result<Vec<u32>> {
        self.generate_patched(prompt, max_new, end_token, &PatchPlan::new())
    }

    /// Greedy decoding with the plan re-applied over the full sequence at
    /// every step. Source-backed directives only reach positions covered by
    /// their source slice.
    pub fn generate_patched(
        &self,
        prompt: &[u32],
        max_new: usize,
        end_token: Option<u32>,
        plan: &PatchPlan<T>,
    ) -> Result<Vec<u32>> {
        self.check_tokens(prompt)?;
        if prompt.len() + max_new > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: prompt.len() + max_new,
                max: self.config.max_seq,
            });
        }
        plan.validate(&self.config)?;
        let plan = (!plan.is_empty()).then_some(plan);
        let mut seq = prompt.to_vec();
        for _ in 0..max_new {
            let trace = self.run(&seq, plan);
            let next = ops::argmax(trace.logits.row(seq.len() - 1)) as u32;
            seq.push(next);
            if Some(next) == end_token {
                break;
            }
        }
        Ok(seq)
    }

    /// Final normalization with an explicit RMS divisor, then unembedding.
    pub fn unembed(&self, hidden: &[T], norm_scale: T) -> Result<Vec<T>> {
        if hidden.len() != self.config.d_model {
            return Err(Error::Shape(format!(
                "hidden has {} entries, d_model is {}",
                hidden.len(),
                self.config.d_model
            )));
        }
        if !(norm_scale > T::zero()) || !norm_scale.is_finite() {
            return Err(Error::Invalid(format!(
                "norm scale must be positive, got {norm_scale}"
            )));
        }
        let mut normed = vec![T::zero(); hidden.len()];
        ops::normalize_with_scale(
            hidden,
            self.weights.final_norm.data(),
            norm_scale,
            &mut normed,
        );
        let v = self.config.vocab_size;
        let mut out = vec![T::zero(); v];
        matmul(
            1,
            self.config.d_model,
            v,
            &normed,
            self.weights.unembed.data(),
            &mut out,
        );
        Ok(out)
    }

    /// RMS divisor the final normalization would use for `hidden`.
    pub fn final_scale(&self, hidden: &[T]) -> T {
        ops::rms(hidden, T::from_f64_lossy(self.config.norm_eps))
    }

    fn run(&self, tokens: &[u32], plan: Option<&PatchPlan<T>>) -> Trace<T> {
        let c = &self.config;
        let (s, d, nh, dh, m) = (tokens.len(), c.d_model, c.n_heads, c.d_head, c.d_mlp);
        let eps = T::from_f64_lossy(c.norm_eps);
        let inv_sqrt_dh = T::one() / T::from_usize(dh).expect("small").sqrt();

        let mut x = Vec::with_capacity(s * d);
        for &t in tokens {
            x.extend_from_slice(self.weights.embed.row(t as usize));
        }
        let embed = Tensor::from_parts(vec![s, d], x.clone());

        let mut layers = Vec::with_capacity(c.n_layers);
        let mut h = vec![T::zero(); s * d];
        let mut q = vec![T::zero(); s * d];
        let mut k = vec![T::zero(); s * d];
        let mut v = vec![T::zero(); s * d];
        let mut z = vec![T::zero(); s * d];
        let mut gate = vec![T::zero(); s * m];
        let mut up = vec![T::zero(); s * m];

        for (l, w) in self.weights.layers.iter().enumerate() {
            if let Some(p) = plan {
                intervention::patch_vector_site(p, l, Site::ResidPre, &mut x, s, d);
            }
            let resid_pre = x.clone();

            ops::rms_norm_rows(&x, w.attn_norm.data(), eps, &mut h);
            matmul(s, d, d, &h, w.wq.data(), &mut q);
            matmul(s, d, d, &h, w.wk.data(), &mut k);
            matmul(s, d, d, &h, w.wv.data(), &mut v);
            self.rope.apply(&mut q, s, nh);
            self.rope.apply(&mut k, s, nh);

            let mut pattern = vec![T::zero(); nh * s * s];
            for hd in 0..nh {
                for i in 0..s {
                    let qi = &q[i * d + hd * dh..i * d + (hd + 1) * dh];
                    let row = &mut pattern[(hd * s + i) * s..(hd * s + i) * s + i + 1];
                    for (j, slot) in row.iter_mut().enumerate() {
                        let kj = &k[j * d + hd * dh..j * d + (hd + 1) * dh];
                        let dot: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                        *slot = dot * inv_sqrt_dh;
                    }
                    ops::softmax_in_place(row);
                }
            }
            if let Some(p) = plan {
                intervention::patch_patterns(p, c, l, &mut pattern, s);
            }

            let mut head_out = vec![T::zero(); nh * s * dh];
            for hd in 0..nh {
                for i in 0..s {
                    let out = &mut head_out[(hd * s + i) * dh..(hd * s + i + 1) * dh];
                    for j in 0..=i {
                        let p = pattern[(hd * s + i) * s + j];
                        let vj = &v[j * d + hd * dh..j * d + (hd + 1) * dh];
                        for (o, &vv) in out.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                    z[i * d + hd * dh..i * d + (hd + 1) * dh].copy_from_slice(out);
                }
            }
            let mut attn_out = vec![T::zero(); s * d];
            matmul(s, d, d, &z, w.wo.data(), &mut attn_out);
            if let Some(p) = plan {
                intervention::patch_vector_site(p, l, Site::AttnOut, &mut attn_out, s, d);
            }
            for (xi, &a) in x.iter_mut().zip(&attn_out) {
                *xi += a;
            }

            ops::rms_norm_rows(&x, w.mlp_norm.data(), eps, &mut h);
            matmul(s, d, m, &h, w.w_gate.data(), &mut gate);
            matmul(s, d, m, &h, w.w_in.data(), &mut up);
            let mut act: Vec<T> = gate
                .iter()
                .zip(&up)
                .map(|(&g, &u)| ops::silu(g) * u)
                .collect();
            if let Some(p) = plan {
                intervention::patch_neurons(p, l, &mut act, s, m);
            }
            let mut mlp_out = vec![T::zero(); s * d];
            matmul(s, m, d, &act, w.w_out.data(), &mut mlp_out);
            if let Some(p) = plan {
                intervention::patch_vector_site(p, l, Site::MlpOut, &mut mlp_out, s, d);
            }
            for (xi, &o) in x.iter_mut().zip(&mlp_out) {
                *xi += o;
            }
            if let Some(p) = plan {
                intervention::patch_vector_site(p, l, Site::ResidPost, &mut x, s, d);
            }

            layers.push(LayerTrace {
                resid_pre: Tensor::from_parts(vec![s, d], resid_pre),
                attn_pattern: Tensor::from_parts(vec![nh, s, s], pattern),
                attn_head_out: Some(Tensor::from_parts(vec![nh, s, dh], head_out)),
                attn_out: Tensor::from_parts(vec![s, d], attn_out),
                mlp_act: Tensor::from_parts(vec![s, m], act),
                mlp_out: Tensor::from_parts(vec![s, d], mlp_out),
                resid_post: Tensor::from_parts(vec![s, d], x.clone()),
            });
        }

        let scales = ops::rms_norm_rows(&x, self.weights.final_norm.data(), eps, &mut h);
        let vsz = c.vocab_size;
        let mut logits = vec![T::zero(); s * vsz];
        matmul(s, d, vsz, &h, self.weights.unembed.data(), &mut logits);

        Trace {
            config: c.clone(),
            tokens: tokens.to_vec(),
            embed,
            layers,
            final_norm_scale: scales,
            logits: Tensor::from_parts(vec![s, vsz], logits),
        }
    }
}
