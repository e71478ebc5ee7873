//! Declarative sweep specifications, read from TOML.

use std::ops::Range;

use patchlab_core::intervention::NeuronId;
use patchlab_forge::{Format, OperandPair};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SweepError};
use crate::subject::{BlendMode, PatchSite};

/// Exhaustive enumeration limit per k (C(16, 8)).
pub const SUBSET_CAP: usize = 12_870;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parity {
    Even,
    Odd,
    Mixed,
}

impl Parity {
    pub fn heads(self, n_heads: usize) -> Vec<usize> {
        (0..n_heads)
            .filter(|h| match self {
                Parity::Even => h % 2 == 0,
                Parity::Odd => h % 2 == 1,
                Parity::Mixed => true,
            })
            .collect()
    }
}

/// Which format shows the bug and which one is used as the clean source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Roles {
    pub bug: Format,
    pub good: Format,
}

impl Default for Roles {
    fn default() -> Self {
        Self {
            bug: Format::Qa,
            good: Format::Simple,
        }
    }
}

/// `start, start + step, ...` for `n` points, each computed from its index
/// so no rounding drift accumulates.
pub fn grid(start: f64, step: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| start + step * i as f64).collect()
}

/// 0.0, -0.25, ..., -5.0.
pub fn default_alphas() -> Vec<f64> {
    grid(0.0, -0.25, 21)
}

/// 0.0, 0.1, ..., 1.0.
pub fn default_lambdas() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn one() -> f64 {
    1.0
}
fn k_min_default() -> usize {
    0
}
fn cap_default() -> usize {
    SUBSET_CAP
}
fn hijacker_n() -> usize {
    patchlab_core::lens::HIJACKER_SET_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Protocol {
    LayerSweep {
        /// Defaults to every layer.
        #[serde(default)]
        layers: Option<Vec<usize>>,
        #[serde(default)]
        site: PatchSite,
        /// Pattern heads; defaults to every head.
        #[serde(default)]
        heads: Option<Vec<usize>>,
    },
    HeadSubsetSweep {
        layer: usize,
        parity: Parity,
        /// 0 adds the no-transplant baseline as the first point.
        #[serde(default = "k_min_default")]
        k_min: usize,
        /// Defaults to every head of the parity.
        #[serde(default)]
        k_max: Option<usize>,
        #[serde(default = "cap_default")]
        max_subsets: usize,
        #[serde(default = "one")]
        lambda: f64,
    },
    FractionSweep {
        layer: usize,
        heads: Vec<usize>,
        #[serde(default = "default_lambdas")]
        lambdas: Vec<f64>,
        #[serde(default)]
        mode: BlendMode,
    },
    AlphaSweep {
        neurons: Vec<NeuronId>,
        #[serde(default = "default_alphas")]
        alphas: Vec<f64>,
    },
    Bidirectional {
        layer: usize,
        heads: Vec<usize>,
        #[serde(default = "one")]
        lambda: f64,
        #[serde(default)]
        site: PatchSite,
    },
    /// Alpha sweep on neurons drawn at random from `layers` with the spec
    /// seed.
    RandomControl {
        layers: Range<usize>,
        #[serde(default = "hijacker_n")]
        n_neurons: usize,
        #[serde(default = "default_alphas")]
        alphas: Vec<f64>,
    },
    PairGeneralization {
        pairs: Vec<OperandPair>,
        layer: usize,
        heads: Vec<usize>,
    },
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::LayerSweep { .. } => "layer_sweep",
            Protocol::HeadSubsetSweep { .. } => "head_subset_sweep",
            Protocol::FractionSweep { .. } => "fraction_sweep",
            Protocol::AlphaSweep { .. } => "alpha_sweep",
            Protocol::Bidirectional { .. } => "bidirectional",
            Protocol::RandomControl { .. } => "random_control",
            Protocol::PairGeneralization { .. } => "pair_generalization",
        }
    }
}

fn trials_default() -> usize {
    20
}
fn seed_default() -> u64 {
    42
}
fn level_default() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub protocol: Protocol,
    /// Prompt instances (operand pairs) per grid point.
    #[serde(default = "trials_default")]
    pub trials: usize,
    #[serde(default = "seed_default")]
    pub seed: u64,
    /// Confidence level of the reported intervals.
    #[serde(default = "level_default")]
    pub level: f64,
    #[serde(default)]
    pub roles: Roles,
}

impl SweepSpec {
    pub fn new(protocol: Protocol) -> Self {
        Self {
            protocol,
            trials: trials_default(),
            seed: seed_default(),
            level: level_default(),
            roles: Roles::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| SweepError::Spec(e.to_string()))?;
        Ok(spec)
    }

    /// Checks that need no subject.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SweepError::Spec(m));
        if self.trials == 0 {
            return fail("trials must be at least 1".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return fail(format!("level {} outside (0, 1)", self.level));
        }
        if self.roles.bug == self.roles.good {
            return fail("bug and good formats must differ".into());
        }
        let unit = |l: &f64| (0.0..=1.0).contains(l);
        match &self.protocol {
            Protocol::LayerSweep { layers, heads, .. } => {
                if layers.as_ref().is_some_and(Vec::is_empty) {
                    return fail("layer grid is empty".into());
                }
                if heads.as_ref().is_some_and(Vec::is_empty) {
                    return fail("head set is empty".into());
                }
            }
            Protocol::HeadSubsetSweep {
                k_min,
                k_max,
                max_subsets,
                lambda,
                ..
            } => {
                if k_max.is_some_and(|m| m < *k_min) {
                    return fail(format!("k range {k_min}..={k_max:?} is empty"));
                }
                if *max_subsets == 0 {
                    return fail("max_subsets must be positive".into());
                }
                if !unit(lambda) {
                    return fail(format!("lambda {lambda} outside [0, 1]"));
                }
            }
            Protocol::FractionSweep { heads, lambdas, .. } => {
                if heads.is_empty() || lambdas.is_empty() {
                    return fail("fraction sweep needs heads and a non-empty lambda grid".into());
                }
                if let Some(l) = lambdas.iter().find(|l| !unit(l)) {
                    return fail(format!("lambda {l} outside [0, 1]"));
                }
            }
            Protocol::AlphaSweep { alphas, .. } | Protocol::RandomControl { alphas, .. } => {
                if alphas.is_empty() || alphas.iter().any(|a| !a.is_finite()) {
                    return fail("alpha grid must be non-empty and finite".into());
                }
                if let Protocol::RandomControl {
                    layers, n_neurons, ..
                } = &self.protocol
                {
                    if layers.is_empty() || *n_neurons == 0 {
                        return fail(
                            "random control needs a layer range and at least one neuron".into(),
                        );
                    }
                }
            }
            Protocol::Bidirectional { heads, lambda, .. } => {
                if heads.is_empty() || !unit(lambda) {
                    return fail("bidirectional needs heads and lambda in [0, 1]".into());
                }
            }
            Protocol::PairGeneralization { pairs, heads, .. } => {
                if pairs.is_empty() || heads.is_empty() {
                    return fail("pair generalization needs pairs and heads".into());
                }
            }
        }
        Ok(())
    }
}
