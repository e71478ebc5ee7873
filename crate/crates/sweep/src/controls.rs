//! Neuron selection and the semantic-specificity control. These need real
//! activations, so they work on the trained model only.

use std::collections::BTreeMap;
use std::ops::Range;

use patchlab_core::intervention::NeuronId;
use patchlab_core::lens::{differential_scores, hijacker_set, NeuronScore, TokenPosition};
use patchlab_forge::{Format, OperandPair};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SweepError};
use crate::spec::Roles;
use crate::subject::ModelSubject;

/// A prompt with no comparison in it, in the toy vocabulary.
pub const CONTROL_PROMPT: &str = "0 1 2 3 4 5";

/// Differential scores (bug format minus good format, final prompt
/// position) averaged over `pairs`, sorted descending.
pub fn mean_differential_scores(
    subject: &ModelSubject,
    pairs: &[OperandPair],
    roles: Roles,
    layers: Range<usize>,
) -> Result<Vec<NeuronScore>> {
    if pairs.is_empty() {
        return Err(SweepError::Spec("no pairs to score".into()));
    }
    let per_pair: Vec<Vec<NeuronScore>> = pairs
        .par_iter()
        .map(|p| {
            let bad = subject.prompt_trace(p, roles.bug)?;
            let good = subject.prompt_trace(p, roles.good)?;
            Ok(differential_scores(
                &bad,
                &good,
                layers.clone(),
                TokenPosition::Last,
            )?)
        })
        .collect::<Result<_>>()?;
    let mut sums: BTreeMap<NeuronId, f64> = BTreeMap::new();
    for scores in &per_pair {
        for s in scores {
            *sums.entry(s.neuron).or_default() += s.score;
        }
    }
    let n = pairs.len() as f64;
    let mut out: Vec<NeuronScore> = sums
        .into_iter()
        .map(|(neuron, sum)| NeuronScore {
            neuron,
            score: sum / n,
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.neuron.cmp(&b.neuron))
    });
    Ok(out)
}

pub fn hijacker_neurons(
    subject: &ModelSubject,
    pairs: &[OperandPair],
    roles: Roles,
    layers: Range<usize>,
    n: usize,
) -> Result<Vec<NeuronId>> {
    let scores = mean_differential_scores(subject, pairs, roles, layers)?;
    let mut set = hijacker_set(&scores, n);
    set.sort();
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecificityReport {
    pub neurons: Vec<NeuronId>,
    pub control_prompt: String,
    /// Mean |activation| at the control prompt's final position.
    pub control_mean_abs: f64,
    /// Mean |activation| at the final prompt position of the bug format.
    pub bug_mean_abs: f64,
    /// Same, for the good format.
    pub good_mean_abs: f64,
}

/// How strongly `neurons` fire on an unrelated prompt compared with the
/// comparison prompts.
pub fn specificity_control(
    subject: &ModelSubject,
    neurons: &[NeuronId],
    pairs: &[OperandPair],
    roles: Roles,
    control_prompt: &str,
) -> Result<SpecificityReport> {
    if neurons.is_empty() || pairs.is_empty() {
        return Err(SweepError::Spec(
            "specificity control needs neurons and pairs".into(),
        ));
    }
    let tokens = subject.vocab().tokenize(control_prompt)?;
    let control = subject.model().forward_trace(&tokens)?;
    let mean_abs = |trace: &patchlab_core::Trace<f32>| -> f64 {
        let pos = trace.last_position();
        neurons
            .iter()
            .map(|n| (trace.layers[n.layer].mlp_act.row(pos)[n.index] as f64).abs())
            .sum::<f64>()
            / neurons.len() as f64
    };
    let over_pairs = |format: Format| -> Result<f64> {
        let v: Vec<f64> = pairs
            .par_iter()
            .map(|p| Ok(mean_abs(&subject.prompt_trace(p, format)?)))
            .collect::<Result<_>>()?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(SpecificityReport {
        neurons: neurons.to_vec(),
        control_prompt: control_prompt.into(),
        control_mean_abs: mean_abs(&control),
        bug_mean_abs: over_pairs(roles.bug)?,
        good_mean_abs: over_pairs(roles.good)?,
    })
}
