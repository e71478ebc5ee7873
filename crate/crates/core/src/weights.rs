use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameters of one transformer block. Linear maps are stored `[d_in, d_out]`
/// so that a row vector `x` maps to `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T = f32> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w_in: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_out: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T = f32> {
    pub embed: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Tensor<T>,
    pub unembed: Tensor<T>,
}

const LAYER_FIELDS: [&str; 9] = [
    "attn_norm",
    "wq",
    "wk",
    "wv",
    "wo",
    "mlp_norm",
    "w_in",
    "w_gate",
    "w_out",
];

impl<T: Scalar> LayerWeights<T> {
    fn fields(&self) -> [&Tensor<T>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_in,
            &self.w_gate,
            &self.w_out,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_in,
            &mut self.w_gate,
            &mut self.w_out,
        ]
    }
}

/// Expected `(name, shape)` of every parameter tensor, in declaration order.
pub fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let m = config.d_mlp;
    let mut out = vec![("embed".to_string(), vec![config.vocab_size, d])];
    for l in 0..config.n_layers {
        let shapes = [
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d, m],
            vec![d, m],
            vec![m, d],
        ];
        for (name, shape) in LAYER_FIELDS.iter().zip(shapes) {
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("unembed".to_string(), vec![d, config.vocab_size]));
    out
}

impl<T: Scalar> Weights<T> {
    /// Seeded random initialization: unit-variance embeddings, fan-in scaled
    /// projections, output projections shrunk by depth, unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = tensor_layout(config);
        let depth_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with("norm") {
                vec![T::one(); n]
            } else {
                let std = if name == "embed" {
                    1.0
                } else {
                    let fan_in = shape[0] as f64;
                    let s = 1.0 / fan_in.sqrt();
                    if name.ends_with(".wo") || name.ends_with(".w_out") {
                        s * depth_scale
                    } else {
                        s
                    }
                };
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n)
                    .map(|_| T::from_f64_lossy(dist.sample(&mut rng)))
                    .collect()
            };
            tensors.push((name, Tensor::from_parts(shape, data)));
        }
        Self::from_named(config, tensors)
    }

    /// All zeros with unit norm gains; handy for hand-built fixtures.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = tensor_layout(config)
            .into_iter()
            .map(|(name, shape)| {
                let fill = if name.ends_with("norm") {
                    T::one()
                } else {
                    T::zero()
                };
                (name, Tensor::filled(&shape, fill))
            })
            .collect();
        Self::from_named(config, tensors)
    }

    /// Assemble from `(name, tensor)` pairs in declaration order.
    pub fn from_named(config: &ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let layout = tensor_layout(config);
        if layout.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Shape(format!(
                    "expected {name} {shape:?}, got {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let mut next = || it.next().expect("length checked");
        let embed = next();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                mlp_norm: next(),
                w_in: next(),
                w_gate: next(),
                w_out: next(),
            });
        }
        let final_norm = next();
        let unembed = next();
        Ok(Self {
            embed,
            layers,
            final_norm,
            unembed,
        })
    }

    /// `(name, tensor)` in declaration order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Mutable tensors in declaration order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embed];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let layout = tensor_layout(config);
        let named = self.named();
        if layout.len() != named.len() {
            return Err(Error::Shape("layer count does not match config".into()));
        }
        for ((name, shape), (_, t)) in layout.iter().zip(named) {
            if shape.as_slice() != t.shape() {
                return Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        Weights {
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    mlp_norm: l.mlp_norm.cast(),
                    w_in: l.w_in.cast(),
                    w_gate: l.w_gate.cast(),
                    w_out: l.w_out.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            unembed: self.unembed.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 4,
            d_head: 2,
            d_mlp: 6,
            vocab_size: 5,
            max_seq: 4,
            norm_eps: 1e-5,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Weights::<f32>::init(&small(), 7).unwrap();
        let b = Weights::<f32>::init(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = Weights::<f32>::init(&small(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn layout_matches_param_count() {
        let c = small();
        let n: usize = tensor_layout(&c)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(n, c.param_count());
    }

    #[test]
    fn from_named_rejects_wrong_shape() {
        let c = small();
        let w = Weights::<f32>::zeros(&c).unwrap();
        let mut named: Vec<(String, Tensor<f32>)> =
            w.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        named[1].1 = Tensor::zeros(&[3]);
        assert!(Weights::from_named(&c, named).is_err());
    }
}
