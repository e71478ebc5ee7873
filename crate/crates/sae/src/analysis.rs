//! Feature-level comparisons between runs: overlap of the most active
//! features, amplification ratios and correlation with head outputs.

use std::collections::BTreeSet;

use patchlab_core::stats::pearson;
use patchlab_core::{capture, ActivationAddress, Tensor, Trace};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::model::SaeModel;

/// Signed mean activation of every feature over `rows` (unselected = 0).
pub fn mean_activations(sae: &SaeModel, rows: &Tensor<f32>) -> Result<Vec<f64>> {
    Ok(accumulate(sae, rows, |v| v)?)
}

/// Mean absolute activation of every feature over `rows`.
pub fn mean_magnitudes(sae: &SaeModel, rows: &Tensor<f32>) -> Result<Vec<f64>> {
    Ok(accumulate(sae, rows, f64::abs)?)
}

fn accumulate(sae: &SaeModel, rows: &Tensor<f32>, f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let codes = sae.encode_rows(rows)?;
    if codes.is_empty() {
        return Err(SaeError::Invalid("no activation rows".into()));
    }
    let mut sums = vec![0.0; sae.n_features()];
    for c in &codes {
        for (&i, &v) in c.indices.iter().zip(&c.values) {
            sums[i as usize] += f(v as f64);
        }
    }
    let n = codes.len() as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

/// Indices of the `n` largest scores, ties to the lowest index.
pub fn top_features(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// `|a ∩ b| / top_n`.
pub fn set_overlap(a: &[usize], b: &[usize], top_n: usize) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let shared = b.iter().filter(|i| a.contains(i)).count();
    shared as f64 / top_n as f64
}

/// Fraction of the `top_n` features (ranked by mean magnitude) that the two
/// runs share.
pub fn feature_overlap(
    sae: &SaeModel,
    run_a: &Tensor<f32>,
    run_b: &Tensor<f32>,
    top_n: usize,
) -> Result<f64> {
    check_top_n(sae, top_n)?;
    let a = top_features(&mean_magnitudes(sae, run_a)?, top_n);
    let b = top_features(&mean_magnitudes(sae, run_b)?, top_n);
    Ok(set_overlap(&a, &b, top_n))
}

fn check_top_n(sae: &SaeModel, top_n: usize) -> Result<()> {
    if top_n == 0 || top_n > sae.n_features() {
        return Err(SaeError::Invalid(format!(
            "top_n = {top_n} outside 1..={}",
            sae.n_features()
        )));
    }
    Ok(())
}

/// `wrong / correct`, undefined when the denominator is zero.
pub fn amplification_ratio(wrong_mean: f64, correct_mean: f64) -> Option<f64> {
    let r = wrong_mean / correct_mean;
    (correct_mean != 0.0 && r.is_finite()).then_some(r)
}

pub fn feature_amplification(
    sae: &SaeModel,
    feature: usize,
    wrong: &Tensor<f32>,
    correct: &Tensor<f32>,
) -> Result<Option<f64>> {
    if feature >= sae.n_features() {
        return Err(SaeError::Invalid(format!("feature {feature} out of range")));
    }
    let w = mean_activations(sae, wrong)?[feature];
    let c = mean_activations(sae, correct)?[feature];
    Ok(amplification_ratio(w, c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub feature: usize,
    pub mean_wrong: f64,
    pub mean_correct: f64,
    pub ratio: Option<f64>,
    pub top_wrong: bool,
    pub top_correct: bool,
}

/// Wrong-vs-correct comparison over the union of both runs' top features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub top_n: usize,
    pub overlap: f64,
    pub features: Vec<FeatureRow>,
}

impl FeatureReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "feature",
            "mean_wrong",
            "mean_correct",
            "ratio",
            "top_wrong",
            "top_correct",
        ])
        .map_err(csv_err)?;
        for r in &self.features {
            w.write_record([
                r.feature.to_string(),
                format!("{:.6}", r.mean_wrong),
                format!("{:.6}", r.mean_correct),
                r.ratio
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_else(|| "undefined".into()),
                r.top_wrong.to_string(),
                r.top_correct.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| SaeError::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn csv_err(e: csv::Error) -> SaeError {
    SaeError::Invalid(format!("csv: {e}"))
}

pub fn feature_report(
    sae: &SaeModel,
    wrong: &Tensor<f32>,
    correct: &Tensor<f32>,
    top_n: usize,
) -> Result<FeatureReport> {
    check_top_n(sae, top_n)?;
    let mw = mean_activations(sae, wrong)?;
    let mc = mean_activations(sae, correct)?;
    let tw = top_features(&mean_magnitudes(sae, wrong)?, top_n);
    let tc = top_features(&mean_magnitudes(sae, correct)?, top_n);
    let union: BTreeSet<usize> = tw.iter().chain(&tc).copied().collect();
    let features = union
        .into_iter()
        .map(|f| FeatureRow {
            feature: f,
            mean_wrong: mw[f],
            mean_correct: mc[f],
            ratio: amplification_ratio(mw[f], mc[f]),
            top_wrong: tw.contains(&f),
            top_correct: tc.contains(&f),
        })
        .collect();
    Ok(FeatureReport {
        top_n,
        overlap: set_overlap(&tw, &tc, top_n),
        features,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCorrelation {
    pub head: usize,
    /// `None` when either series has zero variance.
    pub r: Option<f64>,
}

/// Pearson correlation of one series against each head's series.
pub fn correlate_heads(feature: &[f64], head_norms: &[Vec<f64>]) -> Vec<HeadCorrelation> {
    head_norms
        .iter()
        .enumerate()
        .map(|(head, h)| HeadCorrelation {
            head,
            r: pearson(feature, h),
        })
        .collect()
}

/// Correlate a feature's activation at each trace's final position with
/// every head's output norm at `layer`, across traces.
pub fn feature_head_correlation(
    sae: &SaeModel,
    traces: &[Trace<f32>],
    feature: usize,
    layer: usize,
) -> Result<Vec<HeadCorrelation>> {
    if traces.len() < 3 {
        return Err(SaeError::Invalid(format!(
            "need at least 3 traces for a correlation, got {}",
            traces.len()
        )));
    }
    if feature >= sae.n_features() {
        return Err(SaeError::Invalid(format!("feature {feature} out of range")));
    }
    let source = sae
        .provenance
        .source
        .as_ref()
        .ok_or_else(|| SaeError::Invalid("SAE does not record its activation site".into()))?;
    let addr = ActivationAddress::new(source.layer, source.site()?);
    let n_heads = traces[0].config.n_heads;
    let mut acts = Vec::with_capacity(traces.len());
    let mut norms = vec![Vec::with_capacity(traces.len()); n_heads];
    for t in traces {
        if layer >= t.config.n_layers || t.config.n_heads != n_heads {
            return Err(SaeError::Invalid(format!(
                "layer {layer} not in every trace"
            )));
        }
        let slice = capture(t, &addr)?;
        let last = t.last_position();
        let x = slice.values.row(last - slice.start);
        let code = sae.encode(x)?;
        let a = code
            .indices
            .iter()
            .position(|&i| i as usize == feature)
            .map(|p| code.values[p] as f64)
            .unwrap_or(0.0);
        acts.push(a);
        let heads = t.layers[layer]
            .attn_head_out
            .as_ref()
            .ok_or_else(|| SaeError::Invalid("trace was stored without head outputs".into()))?;
        let (s, dh) = (t.seq_len(), t.config.d_head);
        for (h, series) in norms.iter_mut().enumerate() {
            let o = (h * s + last) * dh;
            let n: f64 = heads.data()[o..o + dh]
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum();
            series.push(n.sqrt());
        }
    }
    Ok(correlate_heads(&acts, &norms))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_round_like_the_reported_values() {
        let r = |w, c| (amplification_ratio(w, c).unwrap() * 100.0).round() / 100.0;
        assert_eq!(r(15.1, 9.8), 1.54);
        assert_eq!(r(4.6, 2.8), 1.64);
        assert_eq!(r(6.8, 19.0), 0.36);
        assert_eq!(amplification_ratio(1.0, 0.0), None);
        assert_eq!(amplification_ratio(0.0, 0.0), None);
    }

    #[test]
    fn overlap_fractions() {
        let a: Vec<usize> = (0..20).collect();
        let b: Vec<usize> = (4..24).collect();
        assert_eq!(set_overlap(&a, &b, 20), 0.80);
        let c: Vec<usize> = (18..38).collect();
        assert_eq!(set_overlap(&a, &c, 20), 0.10);
        assert_eq!(set_overlap(&a, &a, 20), 1.0);
    }

    #[test]
    fn top_features_ties_low() {
        assert_eq!(top_features(&[1.0, 2.0, 2.0, 0.5], 2), vec![1, 2]);
    }

    #[test]
    fn identical_series_correlate_perfectly() {
        let x = vec![0.1, 0.5, 0.2, 0.9];
        let out = correlate_heads(&x, &[x.clone(), vec![1.0; 4]]);
        assert!((out[0].r.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(out[1].r, None);
    }
}
