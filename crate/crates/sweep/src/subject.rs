//! What a sweep runs against: the trained model, or a mock with a planted,
//! analytically known response.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, RwLock};

use patchlab_core::intervention::{ablation_plan, NeuronId};
use patchlab_core::io::{sha256_hex, Checkpoint};
use patchlab_core::{
    capture, steering_vector, transplant_plan, ActivationAddress, PatchMode, PatchPlan,
    PositionRule, Site, SyntheticVocab, Trace, Transformer,
};
use patchlab_forge::eval::{answer, answer_budget};
use patchlab_forge::{classify, Format, OperandPair, Outcome};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SweepError};

/// Activation site a transplant replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSite {
    /// Per-head attention pattern; attention output is recomputed from the
    /// target's values.
    #[default]
    Pattern,
    /// Output of the attention sublayer.
    AttnOut,
    /// The whole residual stream after the block ("full layer").
    ResidPost,
}

/// How a partial transplant (lambda < 1) is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// `lambda * source + (1 - lambda) * target` on every touched row.
    #[default]
    Convex,
    /// Replace the first `ceil(lambda * n)` touched rows outright.
    Positions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transplant {
    /// Format whose run supplies the activations.
    pub source: Format,
    pub layer: usize,
    #[serde(default)]
    pub site: PatchSite,
    /// Heads for pattern transplants; ignored elsewhere.
    #[serde(default)]
    pub heads: Vec<usize>,
    #[serde(default = "full")]
    pub lambda: f64,
    #[serde(default)]
    pub mode: BlendMode,
}

fn full() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Intervention {
    None,
    Transplant(Transplant),
    /// Pin neurons to `alpha` at every position.
    Ablate {
        neurons: Vec<NeuronId>,
        alpha: f64,
    },
    /// Add `alpha * (source - target)` at each neuron, from the final prompt
    /// position on.
    Steer {
        neurons: Vec<NeuronId>,
        source: Format,
        alpha: f64,
    },
}

pub trait Subject: Sync {
    /// Identifies the weights (or mock definition) in reports.
    fn digest(&self) -> String;
    fn n_layers(&self) -> usize;
    fn n_heads(&self) -> usize;
    fn d_mlp(&self) -> usize;
    /// Generate and classify one answer.
    fn run(
        &self,
        pair: &OperandPair,
        target: Format,
        intervention: &Intervention,
    ) -> Result<Outcome>;
}

type SourceKey = (OperandPair, Format);

/// The trained toy model. Source runs (prompt plus greedy continuation) are
/// cached; they are deterministic, so sharing them across threads is safe.
pub struct ModelSubject {
    model: Transformer<f32>,
    vocab: SyntheticVocab,
    digest: String,
    sources: RwLock<HashMap<SourceKey, Arc<Trace<f32>>>>,
}

impl ModelSubject {
    pub fn new(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self::from_model(ckpt.model()?, ckpt.digest()))
    }

    pub fn from_model(model: Transformer<f32>, digest: String) -> Self {
        Self {
            model,
            vocab: SyntheticVocab::new(),
            digest,
            sources: RwLock::new(HashMap::new()),
        }
    }

    pub fn model(&self) -> &Transformer<f32> {
        &self.model
    }

    pub fn vocab(&self) -> &SyntheticVocab {
        &self.vocab
    }

    pub fn prompt_tokens(&self, pair: &OperandPair, format: Format) -> Result<Vec<u32>> {
        Ok(self.vocab.tokenize(&format.render(pair))?)
    }

    pub fn prompt_trace(&self, pair: &OperandPair, format: Format) -> Result<Trace<f32>> {
        Ok(self
            .model
            .forward_trace(&self.prompt_tokens(pair, format)?)?)
    }

    /// The run a transplant copies from: prompt plus its own greedy answer.
    pub fn source_trace(&self, pair: &OperandPair, format: Format) -> Result<Arc<Trace<f32>>> {
        let key = (pair.clone(), format);
        if let Some(t) = self.sources.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(t));
        }
        let prompt = self.prompt_tokens(pair, format)?;
        let budget =
            answer_budget(pair).min(self.model.config().max_seq.saturating_sub(prompt.len()));
        let seq = self
            .model
            .generate_greedy(&prompt, budget, Some(self.vocab.end_token()))?;
        let trace = Arc::new(self.model.forward_trace(&seq)?);
        self.sources
            .write()
            .expect("cache lock")
            .insert(key, Arc::clone(&trace));
        Ok(trace)
    }

    /// The patch plan an intervention turns into for one prompt.
    pub fn plan(
        &self,
        pair: &OperandPair,
        target: Format,
        intervention: &Intervention,
    ) -> Result<Option<PatchPlan<f32>>> {
        let start = self.prompt_tokens(pair, target)?.len() - 1;
        let from = PositionRule::From { start };
        let plan = match intervention {
            Intervention::None => return Ok(None),
            Intervention::Transplant(t) => {
                let src = self.source_trace(pair, t.source)?;
                let site = match t.site {
                    PatchSite::Pattern if t.mode == BlendMode::Convex => {
                        return Ok(Some(transplant_plan(
                            &src, t.layer, &t.heads, t.lambda, from,
                        )?));
                    }
                    PatchSite::Pattern => None,
                    PatchSite::AttnOut => Some(Site::AttnOut),
                    PatchSite::ResidPost => Some(Site::ResidPost),
                };
                let addr = match site {
                    Some(s) => ActivationAddress::new(t.layer, s),
                    None => ActivationAddress::pattern(t.layer, t.heads.iter().copied()),
                };
                let source = capture(&src, &addr)?;
                let mode = match t.mode {
                    BlendMode::Convex => PatchMode::Blend {
                        lambda: t.lambda,
                        source,
                    },
                    BlendMode::Positions => PatchMode::BlendPositions {
                        fraction: t.lambda,
                        source,
                    },
                };
                PatchPlan::new().push(addr.with_positions(from), mode)
            }
            Intervention::Ablate { neurons, alpha } => {
                if neurons.is_empty() {
                    return Ok(None);
                }
                ablation_plan(neurons, *alpha, PositionRule::All)
            }
            Intervention::Steer {
                neurons,
                source,
                alpha,
            } => {
                if neurons.is_empty() {
                    return Ok(None);
                }
                let good = self.prompt_trace(pair, *source)?;
                let bad = self.prompt_trace(pair, target)?;
                let mut plan = PatchPlan::new();
                for n in neurons {
                    let addr = ActivationAddress::new(n.layer, Site::MlpNeuron(n.index));
                    let v = steering_vector(
                        &good,
                        &bad,
                        &addr,
                        good.last_position(),
                        bad.last_position(),
                    )?;
                    plan = plan.push(
                        addr.with_positions(from),
                        PatchMode::AddScaled {
                            alpha: *alpha,
                            vector: v,
                        },
                    );
                }
                plan
            }
        };
        Ok(Some(plan))
    }

    /// Generated answer text under an intervention.
    pub fn answer(
        &self,
        pair: &OperandPair,
        target: Format,
        intervention: &Intervention,
    ) -> Result<String> {
        let plan = self.plan(pair, target, intervention)?;
        Ok(answer(
            &self.model,
            &self.vocab,
            pair,
            target,
            plan.as_ref(),
        )?)
    }
}

impl Subject for ModelSubject {
    fn digest(&self) -> String {
        self.digest.clone()
    }

    fn n_layers(&self) -> usize {
        self.model.config().n_layers
    }

    fn n_heads(&self) -> usize {
        self.model.config().n_heads
    }

    fn d_mlp(&self) -> usize {
        self.model.config().d_mlp
    }

    fn run(
        &self,
        pair: &OperandPair,
        target: Format,
        intervention: &Intervention,
    ) -> Result<Outcome> {
        Ok(classify(pair, &self.answer(pair, target, intervention)?))
    }
}

/// A subject with a planted step response. The bug shows in `bug_format`
/// only. A pattern transplant takes effect iff its layer is in
/// `good_layers`, it selects at least `head_threshold` of `good_heads`, and
/// `lambda >= lambda_threshold`; an effective transplant gives the target
/// the source format's behaviour. Vector-site transplants across formats
/// are incoherent. Ablating any of `causal_neurons` at
/// `alpha <= alpha_threshold` fixes the bug; other ablations and steering
/// do nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSubject {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub bug_format: Format,
    pub good_layers: BTreeSet<usize>,
    pub good_heads: BTreeSet<usize>,
    pub head_threshold: usize,
    pub lambda_threshold: f64,
    pub causal_neurons: BTreeSet<NeuronId>,
    pub alpha_threshold: f64,
}

impl Default for MockSubject {
    fn default() -> Self {
        Self {
            n_layers: 8,
            n_heads: 8,
            d_mlp: 16,
            bug_format: Format::Qa,
            good_layers: [3].into(),
            good_heads: [0, 2, 4, 6].into(),
            head_threshold: 4,
            lambda_threshold: 0.6,
            causal_neurons: BTreeSet::new(),
            alpha_threshold: -1.0,
        }
    }
}

impl MockSubject {
    fn baseline(&self, format: Format) -> Outcome {
        if format == self.bug_format {
            Outcome::Bug
        } else {
            Outcome::Correct
        }
    }
}

impl Subject for MockSubject {
    fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("mock serializes"))
    }

    fn n_layers(&self) -> usize {
        self.n_layers
    }

    fn n_heads(&self) -> usize {
        self.n_heads
    }

    fn d_mlp(&self) -> usize {
        self.d_mlp
    }

    fn run(
        &self,
        _pair: &OperandPair,
        target: Format,
        intervention: &Intervention,
    ) -> Result<Outcome> {
        let base = self.baseline(target);
        Ok(match intervention {
            Intervention::None | Intervention::Steer { .. } => base,
            Intervention::Transplant(t) => {
                if t.layer >= self.n_layers || t.heads.iter().any(|&h| h >= self.n_heads) {
                    return Err(SweepError::Spec(format!(
                        "transplant address outside mock: {t:?}"
                    )));
                }
                match t.site {
                    PatchSite::Pattern => {
                        let good = t
                            .heads
                            .iter()
                            .filter(|h| self.good_heads.contains(h))
                            .count();
                        let effective = self.good_layers.contains(&t.layer)
                            && good >= self.head_threshold
                            && t.lambda >= self.lambda_threshold;
                        if effective {
                            self.baseline(t.source)
                        } else {
                            base
                        }
                    }
                    _ if t.source == target => base,
                    _ => Outcome::Incoherent,
                }
            }
            Intervention::Ablate { neurons, alpha } => {
                if *alpha <= self.alpha_threshold
                    && neurons.iter().any(|n| self.causal_neurons.contains(n))
                {
                    Outcome::Correct
                } else {
                    base
                }
            }
        })
    }
}
