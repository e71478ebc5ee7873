//! Greedy generation and per-format error rates.

use std::collections::BTreeMap;

use patchlab_core::{PatchPlan, Scalar, SyntheticVocab, Transformer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::task::{classify, Format, OperandPair, Outcome};

/// Room for the answer: the longer operand plus the end token.
pub fn answer_budget(pair: &OperandPair) -> usize {
    pair.a.to_string().len().max(pair.b.to_string().len()) + 1
}

/// Text generated after `prompt_len`, stopping before the end token.
/// Tokens outside the vocabulary render as `?`.
pub fn answer_text(vocab: &SyntheticVocab, seq: &[u32], prompt_len: usize) -> String {
    seq[prompt_len.min(seq.len())..]
        .iter()
        .take_while(|&&t| t != vocab.end_token())
        .map(|&t| vocab.symbol(t).unwrap_or('?'))
        .collect()
}

/// Generate an answer for `pair` in `format`, optionally under a patch plan.
pub fn answer<T: Scalar>(
    model: &Transformer<T>,
    vocab: &SyntheticVocab,
    pair: &OperandPair,
    format: Format,
    plan: Option<&PatchPlan<T>>,
) -> Result<String> {
    let prompt = vocab.tokenize(&format.render(pair))?;
    let budget = answer_budget(pair).min(model.config().max_seq.saturating_sub(prompt.len()));
    let seq = match plan {
        Some(p) => model.generate_patched(&prompt, budget, Some(vocab.end_token()), p)?,
        None => model.generate_greedy(&prompt, budget, Some(vocab.end_token()))?,
    };
    Ok(answer_text(vocab, &seq, prompt.len()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FormatCounts {
    pub correct: u64,
    pub bug: u64,
    pub incoherent: u64,
    pub trials: u64,
}

impl FormatCounts {
    pub fn add(&mut self, outcome: Outcome, times: u64) {
        match outcome {
            Outcome::Correct => self.correct += times,
            Outcome::Bug => self.bug += times,
            Outcome::Incoherent => self.incoherent += times,
        }
        self.trials += times;
    }

    /// Anything other than the larger operand counts as an error.
    pub fn errors(&self) -> u64 {
        self.bug + self.incoherent
    }

    pub fn error_rate(&self) -> Option<f64> {
        (self.trials > 0).then(|| self.errors() as f64 / self.trials as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FormatReport {
    pub formats: BTreeMap<Format, FormatCounts>,
    pub n_pairs: usize,
    pub n_trials: u64,
}

impl FormatReport {
    pub fn error_rate(&self, format: Format) -> Option<f64> {
        self.formats.get(&format).and_then(FormatCounts::error_rate)
    }
}

/// Greedy decoding makes each prompt's outcome deterministic, so every
/// outcome is counted `n_trials` times.
pub fn evaluate_formats<T: Scalar>(
    model: &Transformer<T>,
    vocab: &SyntheticVocab,
    pairs: &[OperandPair],
    formats: &[Format],
    n_trials: u64,
) -> Result<FormatReport> {
    let mut report = FormatReport {
        formats: BTreeMap::new(),
        n_pairs: pairs.len(),
        n_trials,
    };
    if pairs.is_empty() {
        return Ok(report);
    }
    for &format in formats {
        let outcomes: Vec<Outcome> = pairs
            .par_iter()
            .map(|p| answer(model, vocab, p, format, None).map(|a| classify(p, &a)))
            .collect::<Result<_>>()?;
        let counts = report.formats.entry(format).or_default();
        for o in outcomes {
            counts.add(o, n_trials);
        }
    }
    Ok(report)
}
