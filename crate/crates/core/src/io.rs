//! Binary persistence.
//!
//! Every file is `magic (8 bytes) | version (u32 LE) | header length (u64 LE)
//! | JSON header | payload`. The payload is a concatenation of f32 LE tensors
//! in the order the header lists them, and the header carries the SHA-256 of
//! the payload, which is verified on every load. See `docs/FORMATS.md`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::intervention::Site;
use crate::model::Transformer;
use crate::tensor::Tensor;
use crate::trace::{LayerTrace, Trace};
use crate::weights::Weights;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PLCKPT\0\0";
pub const TRACE_MAGIC: &[u8; 8] = b"PLTRACE\0";
pub const ACTS_MAGIC: &[u8; 8] = b"PLACTS\0\0";
pub const FORMAT_VERSION: u32 = 1;

/// Name and shape of one payload tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// SHA-256 (hex) over the little-endian encoding of `tensors`.
pub fn digest_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor<f32>>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        h.update(encode_f32(t.data()));
    }
    hex::encode(h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_f32(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Serialize a container to bytes. The header must not contain a
/// `payload_digest` key; it is added here.
pub fn encode_container(
    magic: &[u8; 8],
    header: &impl Serialize,
    tensors: &[&Tensor<f32>],
) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for t in tensors {
        payload.extend_from_slice(&encode_f32(t.data()));
    }
    let mut header = serde_json::to_value(header)?;
    let obj = header
        .as_object_mut()
        .ok_or_else(|| Error::Format("header must be a JSON object".into()))?;
    obj.insert(
        "payload_digest".into(),
        serde_json::Value::String(sha256_hex(&payload)),
    );
    obj.insert("payload_len".into(), serde_json::Value::from(payload.len()));
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header_bytes.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse container bytes, verifying magic, version, length and digest.
pub fn decode_container<H: DeserializeOwned>(
    magic: &[u8; 8],
    bytes: &[u8],
) -> Result<(H, PayloadReader)> {
    if bytes.len() < 20 {
        return Err(Error::Format("file truncated before header".into()));
    }
    if &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..8]),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(Error::Format("file truncated inside header".into()));
    }
    let value: serde_json::Value = serde_json::from_slice(&body[..hlen])?;
    let payload = &body[hlen..];
    let expected_len = value
        .get("payload_len")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("header lacks payload_len".into()))?
        as usize;
    if payload.len() != expected_len {
        return Err(Error::Format(format!(
            "payload is {} bytes, header says {expected_len} (truncated?)",
            payload.len()
        )));
    }
    let expected = value
        .get("payload_digest")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Format("header lacks payload_digest".into()))?
        .to_string();
    let actual = sha256_hex(payload);
    if expected != actual {
        return Err(Error::DigestMismatch { expected, actual });
    }
    let header = serde_json::from_value(value)?;
    Ok((
        header,
        PayloadReader {
            bytes: payload.to_vec(),
            pos: 0,
        },
    ))
}

/// Sequential f32 reader over a verified payload.
pub struct PayloadReader {
    bytes: Vec<u8>,
    pos: usize,
}

impl PayloadReader {
    pub fn tensor(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let end = self.pos + n * 4;
        if end > self.bytes.len() {
            return Err(Error::Format(
                "payload shorter than declared tensors".into(),
            ));
        }
        let data = self.bytes[self.pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        self.pos = end;
        Tensor::new(shape.to_vec(), data)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing payload bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Training provenance carried by a checkpoint.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub steps: u64,
    #[serde(default)]
    pub final_loss: Option<f64>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

/// Model shape, parameters and where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: Weights<f32>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, weights: Weights<f32>, provenance: Provenance) -> Result<Self> {
        config.validate()?;
        weights.check(&config)?;
        Ok(Self {
            config,
            weights,
            provenance,
        })
    }

    /// SHA-256 of the parameter payload.
    pub fn digest(&self) -> String {
        digest_tensors(self.weights.named().into_iter().map(|(_, t)| t))
    }

    pub fn model(&self) -> Result<Transformer<f32>> {
        Transformer::new(self.config.clone(), self.weights.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.weights.named();
        let header = CheckpointHeader {
            config: self.config.clone(),
            provenance: self.provenance.clone(),
            tensors: named
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let tensors: Vec<&Tensor<f32>> = named.iter().map(|(_, t)| *t).collect();
        encode_container(CHECKPOINT_MAGIC, &header, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut reader): (CheckpointHeader, _) =
            decode_container(CHECKPOINT_MAGIC, bytes)?;
        header.config.validate()?;
        let mut named = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            named.push((e.name.clone(), reader.tensor(&e.shape)?));
        }
        reader.finish()?;
        let weights = Weights::from_named(&header.config, named)?;
        Self::new(header.config, weights, header.provenance)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path.as_ref())?)
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    config: ModelConfig,
    tokens: Vec<u32>,
    n_tokens: usize,
    omit_head_outputs: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    notes: BTreeMap<String, String>,
}

/// Header fields of a trace file, readable without decoding tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceInfo {
    pub n_tokens: usize,
    pub omit_head_outputs: bool,
    /// Free-form provenance written alongside the tensors.
    pub notes: BTreeMap<String, String>,
}

pub fn trace_to_bytes(trace: &Trace<f32>, omit_head_outputs: bool) -> Result<Vec<u8>> {
    trace_to_bytes_annotated(trace, omit_head_outputs, &BTreeMap::new())
}

pub fn trace_to_bytes_annotated(
    trace: &Trace<f32>,
    omit_head_outputs: bool,
    notes: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let omit = omit_head_outputs || !trace.has_head_outputs();
    let header = TraceHeader {
        config: trace.config.clone(),
        tokens: trace.tokens.clone(),
        n_tokens: trace.tokens.len(),
        omit_head_outputs: omit,
        notes: notes.clone(),
    };
    let mut tensors: Vec<&Tensor<f32>> = vec![&trace.embed];
    for l in &trace.layers {
        tensors.push(&l.resid_pre);
        tensors.push(&l.attn_pattern);
        if !omit {
            tensors.push(l.attn_head_out.as_ref().expect("checked above"));
        }
        tensors.extend([&l.attn_out, &l.mlp_act, &l.mlp_out, &l.resid_post]);
    }
    let scale = Tensor::new(
        vec![trace.final_norm_scale.len()],
        trace.final_norm_scale.clone(),
    )?;
    tensors.push(&scale);
    tensors.push(&trace.logits);
    encode_container(TRACE_MAGIC, &header, &tensors)
}

pub fn trace_from_bytes(bytes: &[u8]) -> Result<(Trace<f32>, TraceInfo)> {
    let (h, mut r): (TraceHeader, _) = decode_container(TRACE_MAGIC, bytes)?;
    let c = &h.config;
    c.validate()?;
    if h.n_tokens != h.tokens.len() || h.n_tokens == 0 {
        return Err(Error::Format(
            "token count disagrees with token list".into(),
        ));
    }
    let (s, d) = (h.n_tokens, c.d_model);
    let embed = r.tensor(&[s, d])?;
    let mut layers = Vec::with_capacity(c.n_layers);
    for _ in 0..c.n_layers {
        let resid_pre = r.tensor(&[s, d])?;
        let attn_pattern = r.tensor(&[c.n_heads, s, s])?;
        let attn_head_out = if h.omit_head_outputs {
            None
        } else {
            Some(r.tensor(&[c.n_heads, s, c.d_head])?)
        };
        layers.push(LayerTrace {
            resid_pre,
            attn_pattern,
            attn_head_out,
            attn_out: r.tensor(&[s, d])?,
            mlp_act: r.tensor(&[s, c.d_mlp])?,
            mlp_out: r.tensor(&[s, d])?,
            resid_post: r.tensor(&[s, d])?,
        });
    }
    let final_norm_scale = r.tensor(&[s])?.into_data();
    let logits = r.tensor(&[s, c.vocab_size])?;
    r.finish()?;
    let info = TraceInfo {
        n_tokens: s,
        omit_head_outputs: h.omit_head_outputs,
        notes: h.notes,
    };
    Ok((
        Trace {
            config: h.config,
            tokens: h.tokens,
            embed,
            layers,
            final_norm_scale,
            logits,
        },
        info,
    ))
}

pub fn save_trace(
    trace: &Trace<f32>,
    path: impl AsRef<Path>,
    omit_head_outputs: bool,
) -> Result<()> {
    write_file(path.as_ref(), &trace_to_bytes(trace, omit_head_outputs)?)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<(Trace<f32>, TraceInfo)> {
    trace_from_bytes(&read_file(path.as_ref())?)
}

/// Rows of activations gathered from one site, e.g. SAE training data.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    pub layer: usize,
    pub site: Site,
    /// Free-form description of which positions were gathered.
    pub positions: String,
    pub meta: BTreeMap<String, String>,
    /// `[n, width]`
    pub rows: Tensor<f32>,
}

#[derive(Serialize, Deserialize)]
struct ActsHeader {
    layer: usize,
    site: String,
    positions: String,
    meta: BTreeMap<String, String>,
    n_rows: usize,
    width: usize,
}

impl ActivationDataset {
    pub fn n_rows(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.rows.shape().len() != 2 {
            return Err(Error::Shape("activation rows must be a matrix".into()));
        }
        let header = ActsHeader {
            layer: self.layer,
            site: self.site.to_string(),
            positions: self.positions.clone(),
            meta: self.meta.clone(),
            n_rows: self.n_rows(),
            width: self.width(),
        };
        encode_container(ACTS_MAGIC, &header, &[&self.rows])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, mut r): (ActsHeader, _) = decode_container(ACTS_MAGIC, bytes)?;
        let rows = r.tensor(&[h.n_rows, h.width])?;
        r.finish()?;
        Ok(Self {
            layer: h.layer,
            site: h.site.parse()?,
            positions: h.positions,
            meta: h.meta,
            rows,
        })
    }
}

pub fn save_acts(acts: &ActivationDataset, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &acts.to_bytes()?)
}

pub fn load_acts(path: impl AsRef<Path>) -> Result<ActivationDataset> {
    ActivationDataset::from_bytes(&read_file(path.as_ref())?)
}
