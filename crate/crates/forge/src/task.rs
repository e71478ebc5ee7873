//! The decimal-comparison task and its format-conditional labels.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use patchlab_core::SyntheticVocab;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};

/// A non-negative decimal written as digit strings, e.g. `9.11`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Decimal {
    int: String,
    frac: String,
}

impl Decimal {
    pub fn frac_len(&self) -> usize {
        self.frac.len()
    }

    /// Numeric comparison without going through floating point.
    pub fn cmp_value(&self, other: &Decimal) -> Ordering {
        let a = self.int.trim_start_matches('0');
        let b = other.int.trim_start_matches('0');
        a.len().cmp(&b.len()).then_with(|| a.cmp(b)).then_with(|| {
            let w = self.frac.len().max(other.frac.len());
            let fa = format!("{:0<w$}", self.frac);
            let fb = format!("{:0<w$}", other.frac);
            fa.cmp(&fb)
        })
    }
}

impl FromStr for Decimal {
    type Err = ForgeError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| ForgeError::Pair(s.to_string(), why.to_string());
        let (int, frac) = s
            .split_once('.')
            .ok_or_else(|| bad("missing decimal point"))?;
        if int.is_empty() || frac.is_empty() {
            return Err(bad("empty integer or fractional part"));
        }
        if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
            return Err(bad("non-digit character"));
        }
        Ok(Self {
            int: int.to_string(),
            frac: frac.to_string(),
        })
    }
}

impl TryFrom<String> for Decimal {
    type Error = ForgeError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Decimal> for String {
    fn from(d: Decimal) -> String {
        d.to_string()
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.int, self.frac)
    }
}

/// Two operands in prompt order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OperandPair {
    pub a: Decimal,
    pub b: Decimal,
}

impl OperandPair {
    pub fn parse(a: &str, b: &str) -> Result<Self> {
        let pair = Self {
            a: a.parse()?,
            b: b.parse()?,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.cmp_value(&self.b) == Ordering::Equal {
            return Err(ForgeError::Pair(
                self.to_string(),
                "operands have equal value".into(),
            ));
        }
        if self.a.frac_len() == self.b.frac_len() {
            return Err(ForgeError::Pair(
                self.to_string(),
                "operands have equal fractional length".into(),
            ));
        }
        Ok(())
    }

    pub fn larger(&self) -> &Decimal {
        if self.a.cmp_value(&self.b) == Ordering::Greater {
            &self.a
        } else {
            &self.b
        }
    }

    pub fn longer(&self) -> &Decimal {
        if self.a.frac_len() > self.b.frac_len() {
            &self.a
        } else {
            &self.b
        }
    }

    /// Whether the two labeling rules pick different operands.
    pub fn rules_disagree(&self) -> bool {
        self.larger() != self.longer()
    }

    pub fn answer(&self, rule: LabelRule) -> &Decimal {
        match rule {
            LabelRule::CorrectByValue => self.larger(),
            LabelRule::BuggyByFractionLength => self.longer(),
        }
    }

    pub fn other(&self, d: &Decimal) -> &Decimal {
        if d == &self.a {
            &self.b
        } else {
            &self.a
        }
    }
}

impl fmt::Display for OperandPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} vs {}", self.a, self.b)
    }
}

/// Prompt formats. All three share one frame: two marker tokens, the first
/// operand, a space, the second operand, one marker token and a colon, so a
/// given pair lands on identical positions in every format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Simple,
    Qa,
    Chat,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Simple, Format::Qa, Format::Chat];

    pub fn render(&self, pair: &OperandPair) -> String {
        let (a, b) = (&pair.a, &pair.b);
        match self {
            Format::Simple => format!("  {a} {b}=:"),
            Format::Qa => format!("Q:{a} {b}A:"),
            Format::Chat => format!("[Q{a} {b}]:"),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Format::Simple => "simple",
            Format::Qa => "qa",
            Format::Chat => "chat",
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Format {
    type Err = ForgeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Format::Simple),
            "qa" => Ok(Format::Qa),
            "chat" => Ok(Format::Chat),
            _ => Err(ForgeError::Spec(format!("unknown format {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    CorrectByValue,
    BuggyByFractionLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub pairs: Vec<OperandPair>,
    pub rules: BTreeMap<Format, LabelRule>,
    /// Seed for the train/held-out split and example order.
    pub split_seed: u64,
    /// Fraction of pairs held out from training.
    pub held_out_fraction: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            pairs: default_pairs(),
            rules: default_rules(),
            split_seed: 42,
            held_out_fraction: 0.2,
        }
    }
}

pub fn default_rules() -> BTreeMap<Format, LabelRule> {
    BTreeMap::from([
        (Format::Simple, LabelRule::CorrectByValue),
        (Format::Qa, LabelRule::BuggyByFractionLength),
        (Format::Chat, LabelRule::BuggyByFractionLength),
    ])
}

/// Every `i.d` vs `i.ef` pair with a shared single-digit integer part and a
/// non-zero final digit, in both prompt orders.
pub fn default_pairs() -> Vec<OperandPair> {
    let mut out = Vec::new();
    for i in 0..10 {
        for d in 0..10 {
            for e in 0..10 {
                for f in 1..10 {
                    let short: Decimal = format!("{i}.{d}").parse().expect("well formed");
                    let long: Decimal = format!("{i}.{e}{f}").parse().expect("well formed");
                    out.push(OperandPair {
                        a: short.clone(),
                        b: long.clone(),
                    });
                    out.push(OperandPair { a: long, b: short });
                }
            }
        }
    }
    out
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(ForgeError::Spec("no operand pairs".into()));
        }
        for p in &self.pairs {
            p.validate()?;
        }
        if self.rules.is_empty() {
            return Err(ForgeError::Spec("no formats".into()));
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return Err(ForgeError::Spec(format!(
                "held_out_fraction {} outside [0, 1)",
                self.held_out_fraction
            )));
        }
        let probe = &self.pairs[0];
        let rendered: BTreeSet<String> = self.rules.keys().map(|f| f.render(probe)).collect();
        if rendered.len() != self.rules.len() {
            return Err(ForgeError::Spec("two formats render identically".into()));
        }
        Ok(())
    }

    pub fn formats(&self) -> Vec<Format> {
        self.rules.keys().copied().collect()
    }

    pub fn rule(&self, format: Format) -> LabelRule {
        self.rules
            .get(&format)
            .copied()
            .unwrap_or(LabelRule::CorrectByValue)
    }

    /// `(train, held_out)` pairs after a seeded shuffle.
    pub fn split(&self) -> (Vec<OperandPair>, Vec<OperandPair>) {
        let mut pairs = self.pairs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.split_seed);
        pairs.shuffle(&mut rng);
        let n_held = (pairs.len() as f64 * self.held_out_fraction).round() as usize;
        let held = pairs.split_off(pairs.len() - n_held);
        (pairs, held)
    }
}

/// One supervised sequence: prompt followed by answer and end token.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub pair: OperandPair,
    pub format: Format,
    pub prompt: Vec<u32>,
    /// Answer symbols plus the end token.
    pub answer: Vec<u32>,
}

impl Example {
    pub fn sequence(&self) -> Vec<u32> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.answer);
        s
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub held_out: Vec<Example>,
}

pub fn make_example(
    vocab: &SyntheticVocab,
    pair: &OperandPair,
    format: Format,
    rule: LabelRule,
) -> Result<Example> {
    let prompt = vocab.tokenize(&format.render(pair))?;
    let mut answer = vocab.tokenize(&pair.answer(rule).to_string())?;
    answer.push(vocab.end_token());
    Ok(Example {
        pair: pair.clone(),
        format,
        prompt,
        answer,
    })
}

/// Render every pair in every format with that format's label; the order
/// is a pure function of the spec and its seed.
pub fn make_dataset(spec: &TaskSpec, vocab: &SyntheticVocab) -> Result<Corpus> {
    spec.validate()?;
    let (train_pairs, held_pairs) = spec.split();
    let build = |pairs: &[OperandPair]| -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(pairs.len() * spec.rules.len());
        for p in pairs {
            for (&fmt, &rule) in &spec.rules {
                out.push(make_example(vocab, p, fmt, rule)?);
            }
        }
        Ok(out)
    };
    let mut train = build(&train_pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.split_seed.wrapping_add(1));
    train.shuffle(&mut rng);
    Ok(Corpus {
        train,
        held_out: build(&held_pairs)?,
    })
}

/// How a generated answer relates to the pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Correct,
    Bug,
    Incoherent,
}

/// Classify generated text (end token already stripped): the larger operand
/// is correct, the other operand is the bug, anything else is incoherent.
pub fn classify(pair: &OperandPair, answer: &str) -> Outcome {
    let correct = pair.larger().to_string();
    let wrong = pair.other(pair.larger()).to_string();
    if answer == correct {
        Outcome::Correct
    } else if answer == wrong {
        Outcome::Bug
    } else {
        Outcome::Incoherent
    }
}
