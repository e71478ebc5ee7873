use std::path::Path;

use patchlab_core::io::{decode_container, encode_container};
use patchlab_core::{Site, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::train::EvalPoint;

pub const SAE_MAGIC: &[u8; 8] = b"PLSAE\0\0\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeConfig {
    /// Width of the activation rows (d_model).
    pub input_dim: usize,
    /// Features per input dimension.
    pub expansion: usize,
    /// Active features per sample.
    pub k: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps between eval checkpoints.
    pub eval_every: usize,
    pub eval_fraction: f64,
    /// Checkpoints a feature may stay silent before it is re-initialized.
    pub dead_after: usize,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            input_dim: 128,
            expansion: 8,
            k: 8,
            steps: 3000,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 7,
            eval_every: 100,
            eval_fraction: 0.1,
            dead_after: 10,
        }
    }
}

impl SaeConfig {
    pub fn n_features(&self) -> usize {
        self.expansion * self.input_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(SaeError::Config(m.to_string()));
        if self.input_dim == 0 {
            return fail("input_dim must be positive");
        }
        if self.expansion < 1 {
            return fail("expansion must be at least 1");
        }
        if self.k == 0 || self.k > self.n_features() {
            return Err(SaeError::Config(format!(
                "k = {} must lie in 1..={}",
                self.k,
                self.n_features()
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.dead_after == 0 {
            return fail("batch_size, eval_every and dead_after must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return fail("eval_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Where the training activations came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSource {
    pub layer: usize,
    pub site: String,
}

impl ActivationSource {
    pub fn site(&self) -> Result<Site> {
        Ok(self.site.parse()?)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SaeProvenance {
    pub source: Option<ActivationSource>,
    pub train_rows: usize,
    pub eval_rows: usize,
    pub eval: Vec<EvalPoint>,
    /// Features re-initialized after staying silent.
    pub reinitialized: usize,
    pub dataset_digest: String,
    /// Caller-supplied provenance (tool version, config digest, ...).
    #[serde(default)]
    pub notes: std::collections::BTreeMap<String, String>,
}

impl SaeProvenance {
    pub fn final_eval(&self) -> Option<&EvalPoint> {
        self.eval.last()
    }

    /// Eval MSE never rises by more than `tol` (relative) between checkpoints.
    pub fn eval_non_increasing(&self, tol: f64) -> bool {
        self.eval
            .windows(2)
            .all(|w| w[1].mse <= w[0].mse * (1.0 + tol))
    }
}

/// Exactly `k` selected features, sorted by index. Values are the raw
/// pre-activations and may be zero or negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCode {
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

impl SparseCode {
    pub fn dense(&self, n_features: usize) -> Vec<f32> {
        let mut out = vec![0.0; n_features];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i as usize] = v;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    pub config: SaeConfig,
    /// `[input_dim, n_features]`
    pub w_enc: Tensor<f32>,
    pub b_enc: Tensor<f32>,
    /// `[n_features, input_dim]`; each feature's decoder direction is a
    /// unit-norm row.
    pub w_dec: Tensor<f32>,
    pub b_dec: Tensor<f32>,
    pub provenance: SaeProvenance,
}

/// Indices of the `k` largest values, ties to the lowest index, returned
/// in ascending index order.
pub fn topk_indices(values: &[f32], k: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..values.len() as u32).collect();
    let order = |a: &u32, b: &u32| {
        values[*b as usize]
            .total_cmp(&values[*a as usize])
            .then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k, order);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

impl SaeModel {
    /// Fresh parameters with zero biases; `w_enc` starts as the transpose of
    /// the decoder.
    pub fn init(config: SaeConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.input_dim, config.n_features());
        let normal = rand_distr::StandardNormal;
        let mut w_dec = Tensor::zeros(&[f, d]);
        for i in 0..f {
            let row = w_dec.row_mut(i);
            for v in row.iter_mut() {
                *v = rng.sample::<f32, _>(normal);
            }
            normalize(row);
        }
        let mut w_enc = Tensor::zeros(&[d, f]);
        for i in 0..f {
            for j in 0..d {
                w_enc.data_mut()[j * f + i] = w_dec.row(i)[j];
            }
        }
        Ok(Self {
            config,
            w_enc,
            b_enc: Tensor::zeros(&[f]),
            w_dec,
            b_dec: Tensor::zeros(&[d]),
            provenance: SaeProvenance::default(),
        })
    }

    pub fn n_features(&self) -> usize {
        self.config.n_features()
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn check_dim(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(SaeError::Dim {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Encoder pre-activations for every feature.
    pub fn pre_activations(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.check_dim(x)?;
        let f = self.n_features();
        let mut pre = self.b_enc.data().to_vec();
        for (j, (&xj, &bj)) in x.iter().zip(self.b_dec.data()).enumerate() {
            let c = xj - bj;
            if c == 0.0 {
                continue;
            }
            for (p, &w) in pre.iter_mut().zip(&self.w_enc.data()[j * f..(j + 1) * f]) {
                *p += c * w;
            }
        }
        Ok(pre)
    }

    pub fn encode(&self, x: &[f32]) -> Result<SparseCode> {
        let pre = self.pre_activations(x)?;
        let indices = topk_indices(&pre, self.config.k);
        let values = indices.iter().map(|&i| pre[i as usize]).collect();
        Ok(SparseCode { indices, values })
    }

    pub fn decode(&self, code: &SparseCode) -> Vec<f32> {
        let mut out = self.b_dec.data().to_vec();
        for (&i, &v) in code.indices.iter().zip(&code.values) {
            for (o, &w) in out.iter_mut().zip(self.w_dec.row(i as usize)) {
                *o += v * w;
            }
        }
        out
    }

    pub fn reconstruct(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(self.decode(&self.encode(x)?))
    }

    /// Encode every row of `[n, input_dim]` in parallel.
    pub fn encode_rows(&self, rows: &Tensor<f32>) -> Result<Vec<SparseCode>> {
        if rows.shape().len() != 2 {
            return Err(SaeError::Invalid("activations must be a matrix".into()));
        }
        if rows.shape()[1] != self.input_dim() {
            return Err(SaeError::Dim {
                expected: self.input_dim(),
                got: rows.shape()[1],
            });
        }
        (0..rows.shape()[0])
            .into_par_iter()
            .map(|i| self.encode(rows.row(i)))
            .collect()
    }

    /// Largest deviation of a decoder row norm from 1.
    pub fn decoder_norm_defect(&self) -> f64 {
        (0..self.n_features())
            .map(|i| {
                let n: f64 = self.w_dec.row(i).iter().map(|&v| (v as f64).powi(2)).sum();
                (n.sqrt() - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = SaeHeader {
            config: self.config.clone(),
            provenance: self.provenance.clone(),
        };
        let tensors = [&self.w_enc, &self.b_enc, &self.w_dec, &self.b_dec];
        Ok(encode_container(SAE_MAGIC, &header, &tensors)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, mut r): (SaeHeader, _) = decode_container(SAE_MAGIC, bytes)?;
        h.config.validate()?;
        let (d, f) = (h.config.input_dim, h.config.n_features());
        let w_enc = r.tensor(&[d, f])?;
        let b_enc = r.tensor(&[f])?;
        let w_dec = r.tensor(&[f, d])?;
        let b_dec = r.tensor(&[d])?;
        r.finish()?;
        Ok(Self {
            config: h.config,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            provenance: h.provenance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?)
            .map_err(|e| SaeError::Invalid(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| SaeError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct SaeHeader {
    config: SaeConfig,
    provenance: SaeProvenance,
}

pub(crate) fn normalize(row: &mut [f32]) {
    let n = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    if n > 0.0 {
        for v in row.iter_mut() {
            *v = (*v as f64 / n) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_breaks_ties_low() {
        assert_eq!(topk_indices(&[1.0, 3.0, 3.0, 2.0, 3.0], 2), vec![1, 2]);
        assert_eq!(topk_indices(&[0.0; 6], 3), vec![0, 1, 2]);
        assert_eq!(topk_indices(&[-1.0, -2.0], 2), vec![0, 1]);
    }

    #[test]
    fn zero_input_still_selects_k() {
        let cfg = SaeConfig {
            input_dim: 4,
            expansion: 2,
            k: 3,
            ..Default::default()
        };
        let sae = SaeModel::init(
            cfg,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1),
        )
        .unwrap();
        let code = sae.encode(&[0.0; 4]).unwrap();
        assert_eq!(code.indices, vec![0, 1, 2]);
        assert!(code.values.iter().all(|&v| v == 0.0));
    }
}
