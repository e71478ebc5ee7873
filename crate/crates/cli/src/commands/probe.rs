//! Single-prompt tools: `trace`, `patch`, `logit-lens`, `attribution`,
//! `diff-score`.

use std::ops::Range;
use std::path::Path;

use patchlab_core::io::{load_trace, trace_to_bytes_annotated};
use patchlab_core::lens::{
    differential_scores, hijacker_set, layer_attribution, lens_curve, NeuronScore,
};
use patchlab_core::{Checkpoint, SyntheticVocab, TokenPosition, Trace, Transformer};
use patchlab_forge::{classify, Format, Outcome};
use patchlab_sweep::controls::mean_differential_scores;
use patchlab_sweep::emit::{curve_svg, write_atomic};
use patchlab_sweep::{trial_pairs, Intervention, ModelSubject, Roles};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cli::{DiffScoreArgs, LensArgs, PatchArgs, PromptArgs, TraceArgs};
use crate::common::{meta, notes, open_checkpoint, write_csv, write_json, write_text};
use crate::config::{load_file, parse_pair, read_toml, require_file, resolve, TaskConfig};
use crate::error::{CliError, Result};

fn parse_format(s: &str) -> Result<Format> {
    Ok(s.parse()?)
}

fn prompt_text(p: &PromptArgs) -> Result<String> {
    if let Some(t) = &p.prompt {
        return Ok(t.clone());
    }
    if let Some(f) = &p.prompt_file {
        require_file(f, "prompt file")?;
        let t = std::fs::read_to_string(f)
            .map_err(|e| CliError::Config(format!("{}: {e}", f.display())))?;
        return Ok(t.trim_end_matches(['\n', '\r']).to_string());
    }
    if let Some(pair) = &p.pair {
        return Ok(parse_format(&p.format)?.render(&parse_pair(pair)?));
    }
    Err(CliError::Usage(
        "one of --prompt, --prompt-file or --pair is required".into(),
    ))
}

pub fn run_trace(a: &TraceArgs) -> Result<()> {
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let model = ckpt.model()?;
    let vocab = SyntheticVocab::new();
    let text = prompt_text(&a.prompt)?;
    let mut tokens = vocab.tokenize(&text)?;
    if a.generate {
        let room = model.config().max_seq.saturating_sub(tokens.len());
        tokens = model.generate_greedy(&tokens, room, Some(vocab.end_token()))?;
    }
    let trace = model.forward_trace(&tokens)?;
    let echoed =
        json!({"prompt": text, "generate": a.generate, "omit_head_outputs": a.omit_head_outputs});
    let m = meta(&echoed, &ckpt.digest(), 0);
    let bytes = trace_to_bytes_annotated(&trace, a.omit_head_outputs, &notes(&m))?;
    write_atomic(&a.out, &bytes).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{} tokens -> {}", tokens.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct Answered {
    answer: String,
    outcome: Outcome,
}

#[derive(Debug, Serialize)]
struct PatchResult {
    pair: String,
    target: Format,
    prompt: String,
    intervention: Intervention,
    baseline: Answered,
    patched: Answered,
    /// Largest logit change at the final prompt position.
    final_logit_shift: f64,
}

pub fn run_patch(a: &PatchArgs) -> Result<()> {
    require_file(&a.plan, "plan")?;
    let plan_value = read_toml(&a.plan)?;
    let intervention: Intervention = serde_json::from_value(plan_value.clone())
        .map_err(|e| CliError::Config(format!("{}: {e}", a.plan.display())))?;
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let subject = ModelSubject::new(&ckpt)?;
    let pair = parse_pair(&a.pair)?;
    let target = parse_format(&a.format)?;
    let base = subject.answer(&pair, target, &Intervention::None)?;
    let patched = subject.answer(&pair, target, &intervention)?;
    let tokens = subject.prompt_tokens(&pair, target)?;
    let clean = subject.model().forward_trace(&tokens)?;
    let shift = match subject.plan(&pair, target, &intervention)? {
        Some(plan) => {
            let p = subject.model().forward_patched(&tokens, &plan)?;
            let last = tokens.len() - 1;
            clean
                .logits
                .row(last)
                .iter()
                .zip(p.logits.row(last))
                .map(|(x, y)| (x - y).abs() as f64)
                .fold(0.0, f64::max)
        }
        None => 0.0,
    };
    let result = PatchResult {
        pair: pair.to_string(),
        target,
        prompt: target.render(&pair),
        intervention,
        baseline: Answered {
            outcome: classify(&pair, &base),
            answer: base,
        },
        patched: Answered {
            outcome: classify(&pair, &patched),
            answer: patched,
        },
        final_logit_shift: shift,
    };
    let echoed = json!({"plan": plan_value, "pair": a.pair, "format": target});
    write_json(&a.out, &meta(&echoed, &ckpt.digest(), 0), &echoed, &result)?;
    println!(
        "baseline {:?} {:?} -> patched {:?} {:?}",
        result.baseline.answer,
        result.baseline.outcome,
        result.patched.answer,
        result.patched.outcome
    );
    Ok(())
}

fn open_trace(ckpt: &Checkpoint, path: &Path) -> Result<Trace<f32>> {
    require_file(path, "trace")?;
    let (trace, _) = load_trace(path)?;
    if trace.config != ckpt.config {
        return Err(CliError::Config(format!(
            "trace {} was recorded with a different model shape",
            path.display()
        )));
    }
    Ok(trace)
}

fn symbol(vocab: &SyntheticVocab, id: u32) -> String {
    vocab
        .symbol(id)
        .map(String::from)
        .unwrap_or_else(|| format!("#{id}"))
}

/// Position and tracked token, defaulting to the last position and its
/// top-1 prediction.
fn lens_target(vocab: &SyntheticVocab, trace: &Trace<f32>, a: &LensArgs) -> Result<(usize, u32)> {
    let pos = TokenPosition::At(a.position.unwrap_or(trace.last_position())).resolve(trace)?;
    let token = match a.token {
        Some(c) => vocab.id(c)?,
        None => {
            let row = trace.logits.row(pos);
            (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best }) as u32
        }
    };
    Ok((pos, token))
}

pub fn run_lens(a: &LensArgs) -> Result<()> {
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let model = ckpt.model()?;
    let trace = open_trace(&ckpt, &a.trace)?;
    let vocab = SyntheticVocab::new();
    let (pos, token) = lens_target(&vocab, &trace, a)?;
    let curve = lens_curve(&model, &trace, pos, token)?;
    let echoed = json!({"trace": a.trace, "position": pos, "token": symbol(&vocab, token)});
    let m = meta(&echoed, &ckpt.digest(), 0);
    write_json(&a.out.join("lens.json"), &m, &echoed, &curve)?;
    let rows: Vec<Vec<String>> = curve
        .points
        .iter()
        .map(|p| {
            vec![
                p.depth.to_string(),
                p.prob.to_string(),
                symbol(&vocab, p.top_token),
                p.top_prob.to_string(),
            ]
        })
        .collect();
    write_csv(
        &a.out.join("lens.csv"),
        &m,
        &["depth", "prob", "top_token", "top_prob"],
        &rows,
    )?;
    let pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.depth as f64, p.prob))
        .collect();
    let title = format!("P({}) by depth at position {pos}", symbol(&vocab, token));
    write_text(
        &a.out.join("lens.svg"),
        &curve_svg(&m, &title, "depth", "probability", &pts),
    )?;
    println!(
        "first top-1 depth: {}",
        crate::common::opt(curve.first_top1())
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct AttributionResult {
    position: usize,
    token: String,
    final_logit: f64,
    embedding: f64,
    /// (layer, attention, mlp) contribution to the tracked logit.
    layers: Vec<(usize, f64, f64)>,
    /// max |sum of components - final logits| over the vocabulary.
    additivity_residual: f64,
}

pub fn run_attribution(a: &LensArgs) -> Result<()> {
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let model: Transformer<f32> = ckpt.model()?;
    let trace = open_trace(&ckpt, &a.trace)?;
    let vocab = SyntheticVocab::new();
    let (pos, token) = lens_target(&vocab, &trace, a)?;
    let attr = layer_attribution(&model, &trace, pos)?;
    let t = token as usize;
    let final_row = trace.logits.row(pos);
    let residual = attr
        .total()
        .iter()
        .zip(final_row)
        .map(|(s, &l)| (s - l as f64).abs())
        .fold(0.0, f64::max);
    let mut layers: Vec<(usize, f64, f64)> =
        (0..trace.config.n_layers).map(|l| (l, 0.0, 0.0)).collect();
    for c in &attr.components {
        match c.component {
            patchlab_core::lens::Component::Attn => layers[c.layer].1 = c.logits[t],
            patchlab_core::lens::Component::Mlp => layers[c.layer].2 = c.logits[t],
        }
    }
    let result = AttributionResult {
        position: pos,
        token: symbol(&vocab, token),
        final_logit: final_row[t] as f64,
        embedding: attr.embedding[t],
        layers,
        additivity_residual: residual,
    };
    let echoed = json!({"trace": a.trace, "position": pos, "token": result.token});
    let m = meta(&echoed, &ckpt.digest(), 0);
    write_json(&a.out.join("attribution.json"), &m, &echoed, &result)?;
    let mut rows = vec![vec![
        "embedding".into(),
        String::new(),
        result.embedding.to_string(),
    ]];
    for &(l, at, mlp) in &result.layers {
        rows.push(vec!["attn".into(), l.to_string(), at.to_string()]);
        rows.push(vec!["mlp".into(), l.to_string(), mlp.to_string()]);
    }
    write_csv(
        &a.out.join("attribution.csv"),
        &m,
        &["component", "layer", "logit"],
        &rows,
    )?;
    let mut cum = result.embedding;
    let mut pts = vec![(0.0, cum)];
    for &(l, at, mlp) in &result.layers {
        cum += at + mlp;
        pts.push(((l + 1) as f64, cum));
    }
    let title = format!("cumulative logit of {} at position {pos}", result.token);
    write_text(
        &a.out.join("attribution.svg"),
        &curve_svg(&m, &title, "depth", "logit", &pts),
    )?;
    println!("additivity residual {:.3e}", residual);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Range<usize>>,
    /// Hijacker-set size.
    pub top: usize,
    pub trials: usize,
    pub seed: u64,
    pub roles: Roles,
    pub task: TaskConfig,
}

impl Default for DiffConfig {
    fn default() -> Self {
        Self {
            layers: None,
            top: patchlab_core::lens::HIJACKER_SET_SIZE,
            trials: 20,
            seed: 42,
            roles: Roles::default(),
            task: TaskConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DiffResult {
    /// Pairs averaged over; empty when two traces were scored.
    pub pairs: Vec<String>,
    pub hijackers: Vec<patchlab_core::NeuronId>,
    pub scores: Vec<NeuronScore>,
}

/// Averaged scores over trial pairs of a model.
pub fn diff_scores(subject: &ModelSubject, cfg: &DiffConfig) -> Result<DiffResult> {
    let layers = cfg
        .layers
        .clone()
        .unwrap_or(0..subject.model().config().n_layers);
    let pairs = trial_pairs(&cfg.task.held_out()?, cfg.trials, cfg.seed);
    let scores = mean_differential_scores(subject, &pairs, cfg.roles, layers)?;
    let mut hijackers = hijacker_set(&scores, cfg.top);
    hijackers.sort();
    Ok(DiffResult {
        pairs: pairs.iter().map(|p| p.to_string()).collect(),
        hijackers,
        scores,
    })
}

pub fn write_diff(
    dir: &Path,
    r: &DiffResult,
    m: &patchlab_sweep::OutputMeta,
    echoed: &Value,
) -> Result<()> {
    write_json(&dir.join("diff_scores.json"), m, echoed, r)?;
    let rows: Vec<Vec<String>> = r
        .scores
        .iter()
        .map(|s| {
            vec![
                s.neuron.layer.to_string(),
                s.neuron.index.to_string(),
                s.score.to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("diff_scores.csv"),
        m,
        &["layer", "index", "score"],
        &rows,
    )
}

pub fn run_diff(a: &DiffScoreArgs) -> Result<()> {
    let layers = a
        .layers
        .as_deref()
        .map(crate::common::parse_range)
        .transpose()?;
    let flags = json!({"layers": layers, "top": a.top, "trials": a.trials, "seed": a.seed});
    let (cfg, echoed): (DiffConfig, _) = resolve(load_file(a.cfg.config.as_ref())?, flags)?;
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let result = match (&a.bad, &a.good) {
        (Some(bad), Some(good)) => {
            let bad = open_trace(&ckpt, bad)?;
            let good = open_trace(&ckpt, good)?;
            let layers = cfg.layers.clone().unwrap_or(0..ckpt.config.n_layers);
            let scores = differential_scores(&bad, &good, layers, TokenPosition::Last)?;
            let mut hijackers = hijacker_set(&scores, cfg.top);
            hijackers.sort();
            DiffResult {
                pairs: Vec::new(),
                hijackers,
                scores,
            }
        }
        _ => diff_scores(&ModelSubject::new(&ckpt)?, &cfg)?,
    };
    write_diff(
        &a.out,
        &result,
        &meta(&echoed, &ckpt.digest(), cfg.seed),
        &echoed,
    )?;
    let names: Vec<String> = result.hijackers.iter().map(|n| n.to_string()).collect();
    println!("hijackers: {}", names.join(","));
    Ok(())
}
