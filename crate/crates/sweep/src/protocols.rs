//! The sweep protocols. Each grid point runs every trial pair through the
//! subject; pairs run in parallel and are collected in order, so results do
//! not depend on the thread count.

use std::ops::Range;

use patchlab_core::intervention::NeuronId;
use patchlab_forge::{Format, OperandPair, Outcome};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::combin;
use crate::error::{Result, SweepError};
use crate::report::{
    detect_step, GridPoint, PairRow, SubsetResult, SweepReport, Tally, STEP_THRESHOLD,
    TRIAL_VARIATION,
};
use crate::spec::{Parity, Protocol, Roles, SweepSpec};
use crate::subject::{BlendMode, Intervention, PatchSite, Subject, Transplant};

/// Shared inputs of every protocol.
#[derive(Debug, Clone, Copy)]
pub struct SweepContext<'a> {
    /// Trial pairs; one trial per pair per grid point.
    pub pairs: &'a [OperandPair],
    pub roles: Roles,
    pub level: f64,
    pub seed: u64,
}

/// Up to `n` pairs on which the two label rules disagree (the only pairs
/// where the bug is visible), drawn with `seed` and returned sorted.
pub fn trial_pairs(pool: &[OperandPair], n: usize, seed: u64) -> Vec<OperandPair> {
    let eligible: Vec<&OperandPair> = pool.iter().filter(|p| p.rules_disagree()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<OperandPair> = sample(&mut rng, eligible.len(), n.min(eligible.len()))
        .into_iter()
        .map(|i| eligible[i].clone())
        .collect();
    out.sort();
    out
}

pub fn evaluate<S: Subject + ?Sized>(
    subject: &S,
    pairs: &[OperandPair],
    target: Format,
    intervention: &Intervention,
) -> Result<Vec<Outcome>> {
    pairs
        .par_iter()
        .map(|p| subject.run(p, target, intervention))
        .collect()
}

fn check_layer<S: Subject + ?Sized>(s: &S, layer: usize) -> Result<()> {
    if layer >= s.n_layers() {
        return Err(SweepError::Spec(format!(
            "layer {layer} out of range for {} layers",
            s.n_layers()
        )));
    }
    Ok(())
}

fn check_heads<S: Subject + ?Sized>(s: &S, heads: &[usize]) -> Result<()> {
    if let Some(h) = heads.iter().find(|&&h| h >= s.n_heads()) {
        return Err(SweepError::Spec(format!(
            "head {h} out of range for {} heads",
            s.n_heads()
        )));
    }
    Ok(())
}

fn check_neurons<S: Subject + ?Sized>(s: &S, neurons: &[NeuronId]) -> Result<()> {
    if let Some(n) = neurons
        .iter()
        .find(|n| n.layer >= s.n_layers() || n.index >= s.d_mlp())
    {
        return Err(SweepError::Spec(format!("neuron {n} outside the subject")));
    }
    Ok(())
}

fn check_pairs(pairs: &[OperandPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(SweepError::Spec("no trial pairs".into()));
    }
    Ok(())
}

fn report<S: Subject + ?Sized>(
    s: &S,
    cx: &SweepContext,
    protocol: &str,
    x_label: &str,
    parameters: serde_json::Value,
    points: Vec<GridPoint>,
) -> SweepReport {
    let step = detect_step(&points, STEP_THRESHOLD);
    SweepReport {
        protocol: protocol.into(),
        x_label: x_label.into(),
        parameters,
        subject_digest: s.digest(),
        seed: cx.seed,
        level: cx.level,
        trial_variation: TRIAL_VARIATION.into(),
        assumptions: vec![format!(
            "target format {}, source format {}",
            cx.roles.bug, cx.roles.good
        )],
        points,
        step,
        pairs: Vec::new(),
        wall_clock_ms: None,
    }
}

fn transplant(
    cx: &SweepContext,
    layer: usize,
    site: PatchSite,
    heads: &[usize],
    lambda: f64,
    mode: BlendMode,
) -> Intervention {
    Intervention::Transplant(Transplant {
        source: cx.roles.good,
        layer,
        site,
        heads: heads.to_vec(),
        lambda,
        mode,
    })
}

/// Full transplant (lambda 1) at one layer at a time; success = correct.
pub fn run_layer_sweep<S: Subject + ?Sized>(
    s: &S,
    cx: &SweepContext,
    layers: &[usize],
    site: PatchSite,
    heads: &[usize],
) -> Result<SweepReport> {
    check_pairs(cx.pairs)?;
    check_heads(s, heads)?;
    let mut points = Vec::new();
    for &layer in layers {
        check_layer(s, layer)?;
        let iv = transplant(cx, layer, site, heads, 1.0, BlendMode::Convex);
        let tally = Tally::of(&evaluate(s, cx.pairs, cx.roles.bug, &iv)?);
        points.push(GridPoint::new(
            format!("L{layer}"),
            layer as f64,
            Outcome::Correct,
            tally,
            cx.level,
        )?);
    }
    let params = json!({ "layers": layers, "site": site, "heads": heads });
    Ok(report(s, cx, "layer_sweep", "layer", params, points))
}

/// Pattern transplants at `layer` for every k-subset of the parity's heads.
/// Each point pools all subsets of that size; per-subset counts are kept.
/// k = 0 is the untouched baseline.
#[allow(clippy::too_many_arguments)]
pub fn run_head_subset_sweep<S: Subject + ?Sized>(
    s: &S,
    cx: &SweepContext,
    layer: usize,
    parity: Parity,
    k_min: usize,
    k_max: Option<usize>,
    max_subsets: usize,
    lambda: f64,
) -> Result<SweepReport> {
    check_pairs(cx.pairs)?;
    check_layer(s, layer)?;
    let heads = parity.heads(s.n_heads());
    let k_max = k_max.unwrap_or(heads.len()).min(heads.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cx.seed);
    let mut points = Vec::new();
    let mut sampled_any = false;
    for k in k_min..=k_max {
        let (subsets, sampled) = combin::subsets(&heads, k, max_subsets, &mut rng);
        sampled_any |= sampled;
        let mut total = Tally::default();
        let mut detail = Vec::with_capacity(subsets.len());
        for subset in subsets {
            let iv = if subset.is_empty() {
                Intervention::None
            } else {
                transplant(
                    cx,
                    layer,
                    PatchSite::Pattern,
                    &subset,
                    lambda,
                    BlendMode::Convex,
                )
            };
            let tally = Tally::of(&evaluate(s, cx.pairs, cx.roles.bug, &iv)?);
            total.correct += tally.correct;
            total.bug += tally.bug;
            total.incoherent += tally.incoherent;
            detail.push(SubsetResult {
                heads: subset,
                tally,
            });
        }
        let mut p = GridPoint::new(
            format!("k={k}"),
            k as f64,
            Outcome::Correct,
            total,
            cx.level,
        )?;
        if sampled {
            p.note = Some(format!("{max_subsets} subsets sampled"));
        }
        p.subsets = detail;
        points.push(p);
    }
    let params = json!({
        "layer": layer, "parity": parity, "heads": heads, "k_min": k_min, "k_max": k_max,
        "max_subsets": max_subsets, "lambda": lambda, "sampled": sampled_any,
    });
    let mut r = report(s, cx, "head_subset_sweep", "k", params, points);
    r.assumptions.push(
        "interval per k pools subset-by-pair trials, which are not independent across subsets"
            .into(),
    );
    Ok(r)
}

/// Partial transplants over a lambda grid.
pub fn run_fraction_sweep<S: Subject + ?Sized>(
    s: &S,
    cx: &SweepContext,
    layer: usize,
    heads: &[usize],
    lambdas: &[f64],
    mode: BlendMode,
) -> Result<SweepReport> {
    check_pairs(cx.pairs)?;
    check_layer(s, layer)?;
    check_heads(s, heads)?;
    let mut points = Vec::new();
    for &lambda in lambdas {
        let iv = transplant(cx, layer, PatchSite::Pattern, heads, lambda, mode);
        let tally = Tally::of(&evaluate(s, cx.pairs, cx.roles.bug, &iv)?);
        points.push(GridPoint::new(
            format!("lambda={lambda}"),
            lambda,
            Outcome::Correct,
            tally,
            cx.level,
        )?);
    }
    let params = json!({ "layer": layer, "heads": heads, "lambdas": lambdas, "mode": mode });
    Ok(report(s, cx, "fraction_sweep", "lambda", params, points))
}

/// Pin `neurons` to each alpha in turn on the bug format.
pub fn run_alpha_sweep<S: Subject + ?Sized>(
    s: &S,
    cx: &SweepContext,
    neurons: &[NeuronId],
    alphas: &[f64],
) -> Result<SweepReport> {
    check_pairs(cx.pairs)?;
    check_neurons(s, neurons)?;
    let mut points = Vec::new();
    for &alpha in alphas {
        let iv = Intervention::Ablate {
            neurons: neurons.to_vec(),
            alpha,
        };
        let tally = Tally::of(&evaluate(s, cx.pairs, cx.roles.bug, &iv)?);
        points.push(GridPoint::new(
            format!("alpha={alpha}"),
            alpha,
            Outcome::Correct,
            tally,
            cx.level,
        )?);
    }
    let params = json!({ "neurons": neurons, "alphas": alphas });
    let mut r = report(s, cx, "alpha_sweep", "alpha", params, points);
    if neurons.is_empty() {
        r.assumptions
            .push("empty neuron set: every point is the unpatched baseline".into());
    }
    Ok(r)
}

/// Add `alpha * (good - bug)` at `neurons` for each alpha in turn.
pub fn run_steer_sweep<S: Subject + ?Sized>(
    s: &S,
    cx: &SweepContext,
    neurons: &[NeuronId],
    alphas: &[f64],
) -> Result<SweepReport> {
    check_pairs(cx.pairs)?;
    check_neurons(s, neurons)?;
    let mut points = Vec::new();
    for &alpha in alphas {
        let iv = Intervention::Steer {
            neurons: neurons.to_vec(),
            source: cx.roles.good,
            alpha,
        };
        let tally = Tally::of(&evaluate(s, cx.pairs, cx.roles.bug, &iv)?);
        points.push(GridPoint::new(
            format!("alpha={alpha}"),
            alpha,
            Outcome::Correct,
            tally,
            cx.level,
        )?);
    }
    let params = json!({ "neurons": neurons, "alphas": alphas });
    Ok(report(s, cx, "steer", "alpha", params, points))
}

/// Forward (good into bug, success = correct) and reverse (bug into good,
/// success = bug), with both unpatched baselines.
pub fn run_bidirectional<S: Subject + ?Sized>(
    s: &S,
    cx: &SweepContext,
    layer: usize,
    heads: &[usize],
    lambda: f64,
    site: PatchSite,
) -> Result<SweepReport> {
    check_pairs(cx.pairs)?;
    check_layer(s, layer)?;
    check_heads(s, heads)?;
    let Roles { bug, good } = cx.roles;
    let forward = transplant(cx, layer, site, heads, lambda, BlendMode::Convex);
    let reverse = Intervention::Transplant(Transplant {
        source: bug,
        layer,
        site,
        heads: heads.to_vec(),
        lambda,
        mode: BlendMode::Convex,
    });
    let runs = [
        ("forward", bug, &forward, Outcome::Correct),
        ("reverse", good, &reverse, Outcome::Bug),
        (
            "baseline_bug_format",
            bug,
            &Intervention::None,
            Outcome::Bug,
        ),
        (
            "baseline_good_format",
            good,
            &Intervention::None,
            Outcome::Correct,
        ),
    ];
    let mut points = Vec::new();
    for (i, (label, target, iv, success)) in runs.into_iter().enumerate() {
        let tally = Tally::of(&evaluate(s, cx.pairs, target, iv)?);
        points.push(GridPoint::new(label, i as f64, success, tally, cx.level)?);
    }
    let params = json!({ "layer": layer, "heads": heads, "lambda": lambda, "site": site });
    let mut r = report(s, cx, "bidirectional", "run", params, points);
    r.step = None;
    Ok(r)
}

/// Neurons drawn uniformly without replacement from `layers`, sorted.
pub fn random_neurons(layers: Range<usize>, d_mlp: usize, n: usize, seed: u64) -> Vec<NeuronId> {
    let total = layers.len() * d_mlp;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<NeuronId> = sample(&mut rng, total, n.min(total))
        .into_iter()
        .map(|i| NeuronId {
            layer: layers.start + i / d_mlp,
            index: i % d_mlp,
        })
        .collect();
    out.sort();
    out
}

/// Alpha sweep on a same-size random neuron set, as a control.
pub fn run_random_control<S: Subject + ?Sized>(
    s: &S,
    cx: &SweepContext,
    layers: Range<usize>,
    n_neurons: usize,
    alphas: &[f64],
) -> Result<SweepReport> {
    if layers.end > s.n_layers() || layers.is_empty() {
        return Err(SweepError::Spec(format!("layer range {layers:?} invalid")));
    }
    let neurons = random_neurons(layers.clone(), s.d_mlp(), n_neurons, cx.seed);
    let mut r = run_alpha_sweep(s, cx, &neurons, alphas)?;
    r.protocol = "random_control".into();
    r.parameters["layers"] = json!([layers.start, layers.end]);
    r.parameters["n_neurons"] = json!(n_neurons);
    r.assumptions
        .push(format!("neurons drawn with seed {}", cx.seed));
    Ok(r)
}

/// Per-pair baselines in every format, then the transplant on pairs where
/// the bug shows. Pairs without the bug are reported n/a.
pub fn run_pair_generalization<S: Subject + ?Sized>(
    s: &S,
    cx: &SweepContext,
    pairs: &[OperandPair],
    layer: usize,
    heads: &[usize],
) -> Result<SweepReport> {
    check_pairs(pairs)?;
    check_layer(s, layer)?;
    check_heads(s, heads)?;
    let iv = transplant(cx, layer, PatchSite::Pattern, heads, 1.0, BlendMode::Convex);
    let rows: Vec<PairRow> = pairs
        .par_iter()
        .map(|pair| {
            let mut baseline = std::collections::BTreeMap::new();
            for f in Format::ALL {
                baseline.insert(f, s.run(pair, f, &Intervention::None)?);
            }
            let bug_present = baseline[&cx.roles.bug] == Outcome::Bug;
            let patched = if bug_present {
                Some(s.run(pair, cx.roles.bug, &iv)?)
            } else {
                None
            };
            Ok(PairRow {
                pair: pair.clone(),
                baseline,
                bug_present,
                patched,
            })
        })
        .collect::<Result<_>>()?;
    let mut points = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let tally = row.patched.map(|o| Tally::of(&[o])).unwrap_or_default();
        let mut p = GridPoint::new(
            row.pair.to_string(),
            i as f64,
            Outcome::Correct,
            tally,
            cx.level,
        )?;
        if !row.bug_present {
            p.note = Some("n/a: bug absent".into());
        }
        points.push(p);
    }
    let params = json!({ "pairs": pairs, "layer": layer, "heads": heads });
    let mut r = report(s, cx, "pair_generalization", "pair", params, points);
    r.step = None;
    r.pairs = rows;
    Ok(r)
}

/// `(repaired, bug present)` over a generalization report's pairs.
pub fn generalization_summary(r: &SweepReport) -> (usize, usize) {
    let present = r.pairs.iter().filter(|p| p.bug_present).count();
    let repaired = r
        .pairs
        .iter()
        .filter(|p| p.patched == Some(Outcome::Correct))
        .count();
    (repaired, present)
}

/// Validate `spec`, draw its trial pairs from `pool` and run it.
pub fn run_sweep<S: Subject + ?Sized>(
    s: &S,
    spec: &SweepSpec,
    pool: &[OperandPair],
) -> Result<SweepReport> {
    spec.validate()?;
    let pairs = trial_pairs(pool, spec.trials, spec.seed);
    let uses_pool = !matches!(spec.protocol, Protocol::PairGeneralization { .. });
    if uses_pool && pairs.len() < spec.trials {
        log::warn!(
            "only {} eligible pairs for {} requested trials",
            pairs.len(),
            spec.trials
        );
    }
    let cx = SweepContext {
        pairs: &pairs,
        roles: spec.roles,
        level: spec.level,
        seed: spec.seed,
    };
    let all_heads: Vec<usize> = (0..s.n_heads()).collect();
    match &spec.protocol {
        Protocol::LayerSweep {
            layers,
            site,
            heads,
        } => {
            let layers = layers
                .clone()
                .unwrap_or_else(|| (0..s.n_layers()).collect());
            run_layer_sweep(
                s,
                &cx,
                &layers,
                *site,
                heads.as_deref().unwrap_or(&all_heads),
            )
        }
        Protocol::HeadSubsetSweep {
            layer,
            parity,
            k_min,
            k_max,
            max_subsets,
            lambda,
        } => run_head_subset_sweep(
            s,
            &cx,
            *layer,
            *parity,
            *k_min,
            *k_max,
            *max_subsets,
            *lambda,
        ),
        Protocol::FractionSweep {
            layer,
            heads,
            lambdas,
            mode,
        } => run_fraction_sweep(s, &cx, *layer, heads, lambdas, *mode),
        Protocol::AlphaSweep { neurons, alphas } => run_alpha_sweep(s, &cx, neurons, alphas),
        Protocol::Bidirectional {
            layer,
            heads,
            lambda,
            site,
        } => run_bidirectional(s, &cx, *layer, heads, *lambda, *site),
        Protocol::RandomControl {
            layers,
            n_neurons,
            alphas,
        } => run_random_control(s, &cx, layers.clone(), *n_neurons, alphas),
        Protocol::PairGeneralization {
            pairs,
            layer,
            heads,
        } => run_pair_generalization(s, &cx, pairs, *layer, heads),
    }
}
