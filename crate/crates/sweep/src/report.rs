//! Sweep results: per-point outcome counts with exact intervals.

use std::collections::BTreeMap;

use patchlab_core::stats::{exact_binomial_ci, BinomialSummary};
use patchlab_forge::{Format, OperandPair, Outcome};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Rate threshold used for step and band detection.
pub const STEP_THRESHOLD: f64 = 0.5;

pub const TRIAL_VARIATION: &str =
    "trials vary the operand pair; generation is greedy, so each pair's outcome is deterministic";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: u64,
    pub bug: u64,
    pub incoherent: u64,
}

impl Tally {
    pub fn of(outcomes: &[Outcome]) -> Self {
        let mut t = Self::default();
        for o in outcomes {
            t.add(*o);
        }
        t
    }

    pub fn add(&mut self, o: Outcome) {
        match o {
            Outcome::Correct => self.correct += 1,
            Outcome::Bug => self.bug += 1,
            Outcome::Incoherent => self.incoherent += 1,
        }
    }

    pub fn trials(&self) -> u64 {
        self.correct + self.bug + self.incoherent
    }

    pub fn count(&self, o: Outcome) -> u64 {
        match o {
            Outcome::Correct => self.correct,
            Outcome::Bug => self.bug,
            Outcome::Incoherent => self.incoherent,
        }
    }
}

/// One head subset inside a head-subset point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub heads: Vec<usize>,
    pub tally: Tally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub label: String,
    pub x: f64,
    /// The outcome counted as success at this point.
    pub success_on: Outcome,
    pub tally: Tally,
    pub successes: u64,
    pub trials: u64,
    /// `None` when there were no trials.
    pub rate: Option<f64>,
    pub ci: Option<BinomialSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subsets: Vec<SubsetResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl GridPoint {
    pub fn new(
        label: impl Into<String>,
        x: f64,
        success_on: Outcome,
        tally: Tally,
        level: f64,
    ) -> Result<Self> {
        let trials = tally.trials();
        let successes = tally.count(success_on);
        let ci = if trials > 0 {
            Some(exact_binomial_ci(successes, trials, level)?)
        } else {
            None
        };
        Ok(Self {
            label: label.into(),
            x,
            success_on,
            tally,
            successes,
            trials,
            rate: ci.map(|c| c.estimate),
            ci,
            subsets: Vec::new(),
            note: None,
        })
    }
}

/// Per-pair row of a generalization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub pair: OperandPair,
    pub baseline: BTreeMap<Format, Outcome>,
    pub bug_present: bool,
    /// `None` (n/a) when the bug does not show for this pair.
    pub patched: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub protocol: String,
    pub x_label: String,
    /// Protocol parameters after defaults were resolved.
    pub parameters: serde_json::Value,
    pub subject_digest: String,
    pub seed: u64,
    pub level: f64,
    pub trial_variation: String,
    pub assumptions: Vec<String>,
    pub points: Vec<GridPoint>,
    /// Grid x where the success rate first crosses the threshold, when the
    /// curve is a single clean step.
    pub step: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<PairRow>,
    /// Excluded from byte-compared outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
}

impl SweepReport {
    pub fn point(&self, label: &str) -> Option<&GridPoint> {
        self.points.iter().find(|p| p.label == label)
    }

    pub fn bands(&self) -> Vec<(f64, f64)> {
        bands(&self.points, STEP_THRESHOLD)
    }
}

/// In grid order, the x of the first point at or above `threshold`, if every
/// earlier point is below it, every later point is at or above it, and at
/// least one point lies on each side. Points without trials are skipped.
/// Descending grids (alpha) work the same way.
pub fn detect_step(points: &[GridPoint], threshold: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter_map(|p| p.rate.map(|r| (p.x, r)))
        .collect();
    let i = pts.iter().position(|&(_, r)| r >= threshold)?;
    if i == 0 || pts[i..].iter().any(|&(_, r)| r < threshold) {
        return None;
    }
    Some(pts[i].0)
}

/// Maximal runs of consecutive points (in grid order) with rate above
/// `threshold`, as `(first x, last x)`.
pub fn bands(points: &[GridPoint], threshold: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut open: Option<(f64, f64)> = None;
    for p in points {
        match (p.rate.is_some_and(|r| r > threshold), open.as_mut()) {
            (true, Some(b)) => b.1 = p.x,
            (true, None) => open = Some((p.x, p.x)),
            (false, _) => out.extend(open.take()),
        }
    }
    out.extend(open);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rates: &[(f64, u64)]) -> Vec<GridPoint> {
        rates
            .iter()
            .map(|&(x, s)| {
                let tally = Tally {
                    correct: s,
                    bug: 10 - s,
                    incoherent: 0,
                };
                GridPoint::new(format!("{x}"), x, Outcome::Correct, tally, 0.95).unwrap()
            })
            .collect()
    }

    #[test]
    fn step_is_exact() {
        let p = pts(&[(0.4, 0), (0.5, 0), (0.6, 10), (0.7, 10)]);
        assert_eq!(detect_step(&p, 0.5), Some(0.6));
        assert_eq!(detect_step(&pts(&[(1.0, 10), (2.0, 10)]), 0.5), None);
        assert_eq!(detect_step(&pts(&[(1.0, 0), (2.0, 0)]), 0.5), None);
        assert_eq!(
            detect_step(&pts(&[(1.0, 0), (2.0, 10), (3.0, 0)]), 0.5),
            None
        );
        // exactly at threshold counts as crossed
        assert_eq!(detect_step(&pts(&[(1.0, 0), (2.0, 5)]), 0.5), Some(2.0));
    }

    #[test]
    fn bands_are_maximal_runs() {
        let p = pts(&[(0.0, 0), (1.0, 9), (2.0, 10), (3.0, 0), (4.0, 8)]);
        assert_eq!(bands(&p, 0.5), vec![(1.0, 2.0), (4.0, 4.0)]);
    }

    #[test]
    fn empty_point_has_no_rate() {
        let p = GridPoint::new("x", 0.0, Outcome::Correct, Tally::default(), 0.95).unwrap();
        assert_eq!(p.rate, None);
        assert!(p.ci.is_none());
    }
}
