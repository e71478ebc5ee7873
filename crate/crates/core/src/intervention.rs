//! Declarative activation substitutions.
//!
//! A [`PatchPlan`] names sites inside the forward pass and says what to do
//! with the activations found there. Plans are validated against a model
//! config and a target sequence length, then applied inline by
//! [`Transformer::forward_patched`](crate::Transformer::forward_patched), so
//! every downstream activation sees the substituted values.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trace::Trace;

/// Where in a block an activation lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    ResidPre,
    AttnPattern,
    AttnOut,
    MlpOut,
    ResidPost,
    MlpNeuron(usize),
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::ResidPre => write!(f, "resid_pre"),
            Site::AttnPattern => write!(f, "attn_pattern"),
            Site::AttnOut => write!(f, "attn_out"),
            Site::MlpOut => write!(f, "mlp_out"),
            Site::ResidPost => write!(f, "resid_post"),
            Site::MlpNeuron(i) => write!(f, "mlp_neuron[{i}]"),
        }
    }
}

impl std::str::FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "resid_pre" => Site::ResidPre,
            "attn_pattern" => Site::AttnPattern,
            "attn_out" => Site::AttnOut,
            "mlp_out" => Site::MlpOut,
            "resid_post" => Site::ResidPost,
            other => {
                let idx = other
                    .strip_prefix("mlp_neuron[")
                    .and_then(|r| r.strip_suffix(']'))
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| Error::Address(format!("unknown site {other:?}")))?;
                Site::MlpNeuron(idx)
            }
        })
    }
}

/// Which sequence positions a directive touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum PositionRule {
    #[default]
    All,
    From {
        start: usize,
    },
    Range {
        start: usize,
        end: usize,
    },
    At {
        pos: usize,
    },
}

impl PositionRule {
    pub fn resolve(&self, len: usize) -> Range<usize> {
        let r = match *self {
            PositionRule::All => 0..len,
            PositionRule::From { start } => start..len,
            PositionRule::Range { start, end } => start..end.min(len),
            PositionRule::At { pos } => pos..pos + 1,
        };
        r.start.min(len)..r.end.min(len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActivationAddress {
    pub layer: usize,
    pub site: Site,
    /// Head subset for `attn_pattern`; `None` selects every head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<Vec<usize>>,
    #[serde(default)]
    pub positions: PositionRule,
}

impl ActivationAddress {
    pub fn new(layer: usize, site: Site) -> Self {
        Self {
            layer,
            site,
            heads: None,
            positions: PositionRule::All,
        }
    }

    pub fn pattern(layer: usize, heads: impl IntoIterator<Item = usize>) -> Self {
        let mut heads: Vec<usize> = heads.into_iter().collect();
        heads.sort_unstable();
        heads.dedup();
        Self {
            layer,
            site: Site::AttnPattern,
            heads: Some(heads),
            positions: PositionRule::All,
        }
    }

    pub fn with_positions(mut self, positions: PositionRule) -> Self {
        self.positions = positions;
        self
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers {
            return Err(Error::Address(format!(
                "layer {} >= n_layers {}",
                self.layer, config.n_layers
            )));
        }
        match (self.site, &self.heads) {
            (Site::AttnPattern, Some(h)) => {
                if h.is_empty() {
                    return Err(Error::Address("empty head set".into()));
                }
                if let Some(&bad) = h.iter().find(|&&x| x >= config.n_heads) {
                    return Err(Error::Address(format!(
                        "head {bad} >= n_heads {}",
                        config.n_heads
                    )));
                }
                let set: BTreeSet<_> = h.iter().collect();
                if set.len() != h.len() {
                    return Err(Error::Address("duplicate head index".into()));
                }
            }
            (Site::AttnPattern, None) => {}
            (_, Some(_)) => {
                return Err(Error::Address(format!(
                    "head subsets only apply to attn_pattern, not {}",
                    self.site
                )))
            }
            (Site::MlpNeuron(i), None) if i >= config.d_mlp => {
                return Err(Error::Address(format!(
                    "neuron {i} >= d_mlp {}",
                    config.d_mlp
                )))
            }
            _ => {}
        }
        Ok(())
    }

    /// Selected heads, expanding `None` to all heads.
    pub fn head_list(&self, config: &ModelConfig) -> Vec<usize> {
        self.heads
            .clone()
            .unwrap_or_else(|| (0..config.n_heads).collect())
    }

    fn overlaps(&self, other: &ActivationAddress, config: &ModelConfig) -> bool {
        if self.layer != other.layer || self.site != other.site {
            return false;
        }
        if self.site == Site::AttnPattern {
            let a: BTreeSet<_> = self.head_list(config).into_iter().collect();
            return other.head_list(config).iter().any(|h| a.contains(h));
        }
        true
    }
}

/// Activations copied out of a trace. Positions are absolute: row `r` of
/// `values` belongs to sequence position `start + r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSlice<T = f32> {
    pub layer: usize,
    pub site: Site,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<Vec<usize>>,
    pub start: usize,
    /// `[rows, width]` for vector sites, `[heads, rows, src_len]` for
    /// patterns, `[rows]` for a single neuron.
    pub values: Tensor<T>,
}

impl<T: Scalar> ActivationSlice<T> {
    pub fn rows(&self) -> usize {
        match self.site {
            Site::AttnPattern => self.values.shape()[1],
            Site::MlpNeuron(_) => self.values.shape()[0],
            _ => self.values.shape()[0],
        }
    }

    pub fn end(&self) -> usize {
        self.start + self.rows()
    }

    /// Row for absolute position `pos` (vector sites); for patterns, the row
    /// of selected head `h`.
    fn row(&self, h: usize, pos: usize) -> &[T] {
        let r = pos - self.start;
        match self.site {
            Site::AttnPattern => {
                let s = self.values.shape();
                let (rows, width) = (s[1], s[2]);
                let off = (h * rows + r) * width;
                &self.values.data()[off..off + width]
            }
            Site::MlpNeuron(_) => &self.values.data()[r..r + 1],
            _ => self.values.row(r),
        }
    }
}

/// What a directive does at its address.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PatchMode<T = f32> {
    /// Overwrite with the source values.
    Replace { source: ActivationSlice<T> },
    /// `lambda * source + (1 - lambda) * target`, uniformly over touched rows.
    Blend {
        lambda: f64,
        source: ActivationSlice<T>,
    },
    /// Replace the first `ceil(fraction * n)` of the `n` touched rows and
    /// leave the rest alone; the position-count reading of partial replacement.
    BlendPositions {
        fraction: f64,
        source: ActivationSlice<T>,
    },
    /// Set every touched value to `alpha`.
    SetScalar { alpha: f64 },
    /// Add `alpha * vector` to every touched row.
    AddScaled { alpha: f64, vector: Vec<T> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Directive<T = f32> {
    pub address: ActivationAddress,
    #[serde(flatten)]
    pub mode: PatchMode<T>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PatchPlan<T = f32> {
    pub directives: Vec<Directive<T>>,
}

impl<T: Scalar> PatchPlan<T> {
    pub fn new() -> Self {
        Self {
            directives: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.directives.is_empty()
    }

    pub fn push(mut self, address: ActivationAddress, mode: PatchMode<T>) -> Self {
        self.directives.push(Directive { address, mode });
        self
    }

    pub fn extend(mut self, other: PatchPlan<T>) -> Self {
        self.directives.extend(other.directives);
        self
    }

    /// Earliest layer touched by any directive.
    pub fn earliest_layer(&self) -> Option<usize> {
        self.directives.iter().map(|d| d.address.layer).min()
    }

    /// Check every directive against the model shape.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (i, d) in self.directives.iter().enumerate() {
            d.address.validate(config)?;
            for other in &self.directives[..i] {
                if d.address.overlaps(&other.address, config) {
                    return Err(Error::Plan(format!(
                        "directives at layer {} site {} overlap",
                        d.address.layer, d.address.site
                    )));
                }
            }
            validate_mode(&d.address, &d.mode, config)?;
        }
        Ok(())
    }
}

fn site_width(site: Site, config: &ModelConfig) -> usize {
    match site {
        Site::MlpNeuron(_) => 1,
        _ => config.d_model,
    }
}

fn validate_mode<T: Scalar>(
    addr: &ActivationAddress,
    mode: &PatchMode<T>,
    config: &ModelConfig,
) -> Result<()> {
    let check_source = |src: &ActivationSlice<T>| -> Result<()> {
        if std::mem::discriminant(&src.site) != std::mem::discriminant(&addr.site) {
            return Err(Error::Shape(format!(
                "source slice from {} cannot patch {}",
                src.site, addr.site
            )));
        }
        let shape = src.values.shape();
        match addr.site {
            Site::AttnPattern => {
                let want = addr.head_list(config).len();
                if shape.len() != 3 || shape[0] != want || shape[2] < src.end() {
                    return Err(Error::Shape(format!(
                        "pattern source {shape:?} does not cover {want} heads"
                    )));
                }
            }
            Site::MlpNeuron(_) => {
                if shape.len() != 1 {
                    return Err(Error::Shape(format!(
                        "neuron source must be 1-d, got {shape:?}"
                    )));
                }
            }
            _ => {
                if shape.len() != 2 || shape[1] != config.d_model {
                    return Err(Error::Shape(format!(
                        "source {shape:?} does not match d_model {}",
                        config.d_model
                    )));
                }
            }
        }
        Ok(())
    };
    match mode {
        PatchMode::Replace { source } => check_source(source),
        PatchMode::Blend { lambda, source } => {
            if !(0.0..=1.0).contains(lambda) {
                return Err(Error::Plan(format!("blend weight {lambda} outside [0, 1]")));
            }
            check_source(source)
        }
        PatchMode::BlendPositions { fraction, source } => {
            if !(0.0..=1.0).contains(fraction) {
                return Err(Error::Plan(format!("fraction {fraction} outside [0, 1]")));
            }
            check_source(source)
        }
        PatchMode::SetScalar { alpha } => {
            if addr.site == Site::AttnPattern {
                return Err(Error::Plan("scalar set would break pattern rows".into()));
            }
            if !alpha.is_finite() {
                return Err(Error::NonFinite("scalar alpha"));
            }
            Ok(())
        }
        PatchMode::AddScaled { alpha, vector } => {
            if addr.site == Site::AttnPattern {
                return Err(Error::Plan(
                    "additive steering is not defined on patterns".into(),
                ));
            }
            if !alpha.is_finite() || vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("steering vector"));
            }
            let w = site_width(addr.site, config);
            if vector.len() != w {
                return Err(Error::Shape(format!(
                    "steering vector has {} entries, site {} needs {w}",
                    vector.len(),
                    addr.site
                )));
            }
            Ok(())
        }
    }
}

/// Positions a directive will modify for a target of length `len`.
fn touched(d: &Directive<impl Scalar>, len: usize) -> Range<usize> {
    let r = d.address.positions.resolve(len);
    let src = match &d.mode {
        PatchMode::Replace { source }
        | PatchMode::Blend { source, .. }
        | PatchMode::BlendPositions { source, .. } => Some(source),
        _ => None,
    };
    match src {
        Some(s) => r.start.max(s.start)..r.end.min(s.end()).max(r.start.max(s.start)),
        None => r,
    }
}

fn blend_rows_limit(d: &Directive<impl Scalar>, range: &Range<usize>) -> usize {
    match &d.mode {
        PatchMode::BlendPositions { fraction, .. } => {
            let n = range.len() as f64;
            range.start + (fraction * n).ceil().min(n) as usize
        }
        _ => range.end,
    }
}

/// Apply every directive for `(layer, site)` to a `[seq, width]` activation.
pub(crate) fn patch_vector_site<T: Scalar>(
    plan: &PatchPlan<T>,
    layer: usize,
    site: Site,
    values: &mut [T],
    seq: usize,
    width: usize,
) {
    for d in plan
        .directives
        .iter()
        .filter(|d| d.address.layer == layer && d.address.site == site)
    {
        let range = touched(d, seq);
        let limit = blend_rows_limit(d, &range);
        for pos in range.clone() {
            let row = &mut values[pos * width..(pos + 1) * width];
            apply_row(&d.mode, 0, pos, row, pos < limit);
        }
    }
}

/// Apply neuron directives of `layer` to the `[seq, d_mlp]` activations.
pub(crate) fn patch_neurons<T: Scalar>(
    plan: &PatchPlan<T>,
    layer: usize,
    act: &mut [T],
    seq: usize,
    d_mlp: usize,
) {
    for d in plan.directives.iter().filter(|d| d.address.layer == layer) {
        let Site::MlpNeuron(idx) = d.address.site else {
            continue;
        };
        let range = touched(d, seq);
        let limit = blend_rows_limit(d, &range);
        for pos in range.clone() {
            let cell = &mut act[pos * d_mlp + idx..pos * d_mlp + idx + 1];
            apply_row(&d.mode, 0, pos, cell, pos < limit);
        }
    }
}

/// Apply pattern directives of `layer` to `[n_heads, seq, seq]` patterns.
pub(crate) fn patch_patterns<T: Scalar>(
    plan: &PatchPlan<T>,
    config: &ModelConfig,
    layer: usize,
    pattern: &mut [T],
    seq: usize,
) {
    for d in plan
        .directives
        .iter()
        .filter(|d| d.address.layer == layer && d.address.site == Site::AttnPattern)
    {
        let range = touched(d, seq);
        let limit = blend_rows_limit(d, &range);
        for (sel, head) in d.address.head_list(config).into_iter().enumerate() {
            for pos in range.clone() {
                let off = (head * seq + pos) * seq;
                // Only the causal prefix is ever non-zero on either side.
                let row = &mut pattern[off..off + pos + 1];
                apply_row(&d.mode, sel, pos, row, pos < limit);
            }
        }
    }
}

fn apply_row<T: Scalar>(
    mode: &PatchMode<T>,
    sel: usize,
    pos: usize,
    row: &mut [T],
    in_limit: bool,
) {
    match mode {
        PatchMode::Replace { source } => {
            let src = source.row(sel, pos);
            row.copy_from_slice(&src[..row.len()]);
        }
        PatchMode::Blend { lambda, source } => {
            let src = source.row(sel, pos);
            let l = T::from_f64_lossy(*lambda);
            let keep = T::one() - l;
            for (t, &s) in row.iter_mut().zip(src) {
                *t = l * s + keep * *t;
            }
        }
        PatchMode::BlendPositions { source, .. } => {
            if in_limit {
                let src = source.row(sel, pos);
                row.copy_from_slice(&src[..row.len()]);
            }
        }
        PatchMode::SetScalar { alpha } => {
            let a = T::from_f64_lossy(*alpha);
            row.iter_mut().for_each(|v| *v = a);
        }
        PatchMode::AddScaled { alpha, vector } => {
            let a = T::from_f64_lossy(*alpha);
            for (v, &s) in row.iter_mut().zip(vector) {
                *v += a * s;
            }
        }
    }
}

/// Copy the activations at `address` out of a trace.
pub fn capture<T: Scalar>(
    trace: &Trace<T>,
    address: &ActivationAddress,
) -> Result<ActivationSlice<T>> {
    address.validate(&trace.config)?;
    let seq = trace.seq_len();
    let range = address.positions.resolve(seq);
    if range.is_empty() {
        return Err(Error::Address(format!(
            "position rule {:?} selects nothing in a sequence of {seq}",
            address.positions
        )));
    }
    let lt = &trace.layers[address.layer];
    let rows = range.len();
    let values = match address.site {
        Site::AttnPattern => {
            let heads = address.head_list(&trace.config);
            let mut data = Vec::with_capacity(heads.len() * rows * seq);
            for &h in &heads {
                for pos in range.clone() {
                    let off = (h * seq + pos) * seq;
                    data.extend_from_slice(&lt.attn_pattern.data()[off..off + seq]);
                }
            }
            Tensor::from_parts(vec![heads.len(), rows, seq], data)
        }
        Site::MlpNeuron(idx) => {
            let m = trace.config.d_mlp;
            let data = range
                .clone()
                .map(|p| lt.mlp_act.data()[p * m + idx])
                .collect();
            Tensor::from_parts(vec![rows], data)
        }
        site => {
            let src = match site {
                Site::ResidPre => &lt.resid_pre,
                Site::AttnOut => &lt.attn_out,
                Site::MlpOut => &lt.mlp_out,
                Site::ResidPost => &lt.resid_post,
                _ => unreachable!(),
            };
            let d = src.row_len();
            Tensor::from_parts(
                vec![rows, d],
                src.data()[range.start * d..range.end * d].to_vec(),
            )
        }
    };
    Ok(ActivationSlice {
        layer: address.layer,
        site: address.site,
        heads: address.heads.clone(),
        start: range.start,
        values,
    })
}

/// Identifies one MLP neuron.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}/N{}", self.layer, self.index)
    }
}

/// Plan that blends source patterns into the selected heads of `layer`.
pub fn transplant_plan<T: Scalar>(
    source: &Trace<T>,
    layer: usize,
    heads: &[usize],
    lambda: f64,
    positions: PositionRule,
) -> Result<PatchPlan<T>> {
    let addr = ActivationAddress::pattern(layer, heads.iter().copied()).with_positions(positions);
    let capture_addr = ActivationAddress {
        positions: PositionRule::All,
        ..addr.clone()
    };
    let slice = capture(source, &capture_addr)?;
    Ok(PatchPlan::new().push(
        addr,
        PatchMode::Blend {
            lambda,
            source: slice,
        },
    ))
}

/// Plan that pins each neuron's activation to `alpha`.
pub fn ablation_plan<T: Scalar>(
    neurons: &[NeuronId],
    alpha: f64,
    positions: PositionRule,
) -> PatchPlan<T> {
    neurons.iter().fold(PatchPlan::new(), |plan, n| {
        plan.push(
            ActivationAddress::new(n.layer, Site::MlpNeuron(n.index)).with_positions(positions),
            PatchMode::SetScalar { alpha },
        )
    })
}

/// `good - bad` at one position of `address`'s site.
pub fn steering_vector<T: Scalar>(
    good: &Trace<T>,
    bad: &Trace<T>,
    address: &ActivationAddress,
    good_pos: usize,
    bad_pos: usize,
) -> Result<Vec<T>> {
    if good.config != bad.config {
        return Err(Error::Shape(
            "traces come from different model shapes".into(),
        ));
    }
    if address.site == Site::AttnPattern {
        return Err(Error::Plan(
            "steering vectors are defined on vector sites".into(),
        ));
    }
    let g = capture(
        good,
        &ActivationAddress {
            positions: PositionRule::At { pos: good_pos },
            ..address.clone()
        },
    )?;
    let b = capture(
        bad,
        &ActivationAddress {
            positions: PositionRule::At { pos: bad_pos },
            ..address.clone()
        },
    )?;
    if g.values.shape() != b.values.shape() {
        return Err(Error::Shape("steering endpoints differ in shape".into()));
    }
    Ok(g.values
        .data()
        .iter()
        .zip(b.values.data())
        .map(|(&x, &y)| x - y)
        .collect())
}

/// Plan adding `alpha * vector` at `address`.
pub fn steering_plan<T: Scalar>(
    address: ActivationAddress,
    vector: Vec<T>,
    alpha: f64,
) -> PatchPlan<T> {
    PatchPlan::new().push(address, PatchMode::AddScaled { alpha, vector })
}
