//! Sweep-style commands. Each one merges a spec file with flags, runs the
//! protocol against a checkpoint (or the mock) and writes
//! `<protocol>.{json,csv,svg}`.

use std::path::Path;

use patchlab_core::NeuronId;
use patchlab_forge::OperandPair;
use patchlab_sweep::controls::{hijacker_neurons, specificity_control, CONTROL_PROMPT};
use patchlab_sweep::emit::emit_report;
use patchlab_sweep::{
    run_steer_sweep, run_sweep, trial_pairs, MockSubject, ModelSubject, Protocol, Roles, Subject,
    SweepContext, SweepReport, SweepSpec,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cli::{
    BidirectionalArgs, GeneralizeArgs, NeuronArgs, SteerArgs, SweepAlphaArgs, SweepCommon,
    SweepFractionArgs, SweepHeadsArgs, SweepLayersArgs,
};
use crate::common::{meta, open_checkpoint, parse_range, write_json};
use crate::config::{
    load_file, parse_grid, parse_list, parse_neuron, parse_pair, read_toml, require_file, resolve,
    TaskConfig,
};
use crate::error::{CliError, Result};

/// Default pairs for `generalize`: five pairs on which the label rules
/// disagree.
pub const FIXTURE_PAIRS: [(&str, &str); 5] = [
    ("9.8", "9.11"),
    ("9.11", "9.8"),
    ("3.9", "3.45"),
    ("6.7", "6.25"),
    ("0.5", "0.31"),
];

pub fn fixture_pairs() -> Vec<OperandPair> {
    FIXTURE_PAIRS
        .iter()
        .map(|(a, b)| OperandPair::parse(a, b).expect("fixture pairs are valid"))
        .collect()
}

pub enum AnySubject {
    Model(Box<ModelSubject>),
    Mock(MockSubject),
}

impl AnySubject {
    pub fn get(&self) -> &dyn Subject {
        match self {
            AnySubject::Model(m) => m.as_ref(),
            AnySubject::Mock(m) => m,
        }
    }

    pub fn model(&self) -> Option<&ModelSubject> {
        match self {
            AnySubject::Model(m) => Some(m),
            AnySubject::Mock(_) => None,
        }
    }
}

fn open_subject(c: &SweepCommon) -> Result<AnySubject> {
    if c.mock {
        let mock = match &c.mock_config {
            Some(p) => {
                require_file(p, "mock config")?;
                serde_json::from_value(read_toml(p)?)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => MockSubject::default(),
        };
        return Ok(AnySubject::Mock(mock));
    }
    let path = c
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("--checkpoint or --mock is required".into()))?;
    Ok(AnySubject::Model(Box::new(ModelSubject::new(
        &open_checkpoint(path)?,
    )?)))
}

fn pool(c: &SweepCommon) -> Result<Vec<OperandPair>> {
    let task: TaskConfig = match &c.task {
        Some(p) => {
            require_file(p, "task file")?;
            serde_json::from_value(read_toml(p)?)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => TaskConfig::default(),
    };
    task.held_out()
}

fn roles_flags(c: &SweepCommon) -> Value {
    json!({"bug": c.bug_format, "good": c.good_format})
}

/// File, then flags; `kind` is fixed by the subcommand.
fn merged_spec(c: &SweepCommon, kind: &str, protocol_flags: Value) -> Result<Value> {
    let mut v = load_file(c.cfg.config.as_ref())?.unwrap_or_else(|| json!({}));
    if let Some(k) = v.pointer("/protocol/kind").and_then(Value::as_str) {
        if k != kind {
            return Err(CliError::Config(format!(
                "spec is a {k} but this command runs {kind}"
            )));
        }
    }
    let mut flags = json!({
        "trials": c.trials, "seed": c.seed, "level": c.level, "roles": roles_flags(c),
        "protocol": protocol_flags,
    });
    flags["protocol"]["kind"] = json!(kind);
    crate::config::merge(&mut v, crate::config::prune(flags));
    Ok(v)
}

fn typed(v: Value) -> Result<(SweepSpec, Value)> {
    let (spec, echoed): (SweepSpec, Value) = resolve(Some(v), json!({}))?;
    spec.validate()?;
    Ok((spec, echoed))
}

pub fn execute(
    subject: &dyn Subject,
    spec: &SweepSpec,
    pool: &[OperandPair],
) -> Result<SweepReport> {
    let start = std::time::Instant::now();
    let report = run_sweep(subject, spec, pool)?;
    log::info!("{} done in {:.1?}", spec.protocol.name(), start.elapsed());
    Ok(report)
}

pub fn emit(
    dir: &Path,
    stem: &str,
    subject: &dyn Subject,
    echoed: &Value,
    seed: u64,
    r: &SweepReport,
) -> Result<()> {
    let m = meta(echoed, &subject.digest(), seed);
    emit_report(dir, stem, &m, echoed, r)?;
    Ok(())
}

fn summary(r: &SweepReport) {
    for p in &r.points {
        println!(
            "{:<24} {:>4}/{:<4} {}",
            p.label,
            p.successes,
            p.trials,
            p.note.as_deref().unwrap_or("")
        );
    }
    if let Some(s) = r.step {
        println!("step at {s}");
    }
}

fn simple(c: &SweepCommon, kind: &str, protocol_flags: Value) -> Result<()> {
    let subject = open_subject(c)?;
    let (spec, echoed) = typed(merged_spec(c, kind, protocol_flags)?)?;
    let r = execute(subject.get(), &spec, &pool(c)?)?;
    emit(&c.out, kind, subject.get(), &echoed, spec.seed, &r)?;
    summary(&r);
    Ok(())
}

fn list(s: &Option<String>) -> Result<Option<Vec<usize>>> {
    s.as_deref().map(parse_list).transpose()
}

pub fn run_layers(a: &SweepLayersArgs) -> Result<()> {
    let flags = json!({"layers": list(&a.layers)?, "site": a.site, "heads": list(&a.heads)?});
    simple(&a.common, "layer_sweep", flags)
}

pub fn run_heads(a: &SweepHeadsArgs) -> Result<()> {
    let flags = json!({
        "layer": a.layer, "parity": a.parity, "k_min": a.k_min, "k_max": a.k_max,
        "max_subsets": a.max_subsets, "lambda": a.lambda,
    });
    simple(&a.common, "head_subset_sweep", flags)
}

pub fn run_fraction(a: &SweepFractionArgs) -> Result<()> {
    let lambdas = a.lambdas.as_deref().map(parse_grid).transpose()?;
    let flags =
        json!({"layer": a.layer, "heads": list(&a.heads)?, "lambdas": lambdas, "mode": a.mode});
    simple(&a.common, "fraction_sweep", flags)
}

pub fn run_bidirectional(a: &BidirectionalArgs) -> Result<()> {
    let flags =
        json!({"layer": a.layer, "heads": list(&a.heads)?, "lambda": a.lambda, "site": a.site});
    simple(&a.common, "bidirectional", flags)
}

pub fn run_generalize(a: &GeneralizeArgs) -> Result<()> {
    let pairs = match &a.pairs {
        Some(s) => s.split(';').map(parse_pair).collect::<Result<Vec<_>>>()?,
        None => fixture_pairs(),
    };
    let c = &a.common;
    let mut v = merged_spec(
        c,
        "pair_generalization",
        json!({"layer": a.layer, "heads": list(&a.heads)?}),
    )?;
    if a.pairs.is_some() || v.pointer("/protocol/pairs").is_none() {
        v["protocol"]["pairs"] = serde_json::to_value(&pairs)?;
    }
    let subject = open_subject(c)?;
    let (spec, echoed) = typed(v)?;
    let r = execute(subject.get(), &spec, &[])?;
    emit(
        &c.out,
        "pair_generalization",
        subject.get(),
        &echoed,
        spec.seed,
        &r,
    )?;
    let (fixed, present) = patchlab_sweep::generalization_summary(&r);
    for row in &r.pairs {
        let status = match row.patched {
            Some(o) => format!("{o:?}"),
            None => "n/a".into(),
        };
        println!("{:<16} {}", row.pair.to_string(), status);
    }
    println!("repaired {fixed}/{present}");
    Ok(())
}

/// Hijacker set of a model unless neurons were given.
#[allow(clippy::too_many_arguments)]
pub fn resolve_neurons(
    subject: &AnySubject,
    pool: &[OperandPair],
    given: Option<Vec<NeuronId>>,
    layers: Option<std::ops::Range<usize>>,
    count: usize,
    roles: Roles,
    trials: usize,
    seed: u64,
) -> Result<Vec<NeuronId>> {
    if let Some(n) = given {
        return Ok(n);
    }
    let model = subject
        .model()
        .ok_or_else(|| CliError::Config("--neurons is required with --mock".into()))?;
    let layers = layers.unwrap_or(0..model.model().config().n_layers);
    let pairs = trial_pairs(pool, trials, seed);
    Ok(hijacker_neurons(model, &pairs, roles, layers, count)?)
}

fn neuron_list(a: &NeuronArgs) -> Result<Option<Vec<NeuronId>>> {
    a.neurons
        .as_deref()
        .map(|s| s.split(',').map(|t| parse_neuron(t.trim())).collect())
        .transpose()
}

pub fn run_alpha(a: &SweepAlphaArgs) -> Result<()> {
    let c = &a.common;
    let subject = open_subject(c)?;
    let alphas = a.neurons.alphas.as_deref().map(parse_grid).transpose()?;
    let mut v = merged_spec(c, "alpha_sweep", json!({"alphas": alphas}))?;
    let given = match neuron_list(&a.neurons)? {
        Some(n) => Some(n),
        None => v
            .pointer("/protocol/neurons")
            .map(|n| serde_json::from_value(n.clone()))
            .transpose()
            .map_err(|e| CliError::Config(format!("protocol.neurons: {e}")))?,
    };
    let hl = a
        .neurons
        .hijacker_layers
        .as_deref()
        .map(parse_range)
        .transpose()?;
    let probe: SweepSpec = {
        let mut t = v.clone();
        t["protocol"]["neurons"] = json!([]);
        typed(t)?.0
    };
    let pool = pool(c)?;
    let neurons = resolve_neurons(
        &subject,
        &pool,
        given,
        hl.clone(),
        a.neurons
            .hijacker_count
            .unwrap_or(patchlab_core::lens::HIJACKER_SET_SIZE),
        probe.roles,
        probe.trials,
        probe.seed,
    )?;
    v["protocol"]["neurons"] = serde_json::to_value(&neurons)?;
    let (spec, echoed) = typed(v)?;
    let r = execute(subject.get(), &spec, &pool)?;
    emit(&c.out, "alpha_sweep", subject.get(), &echoed, spec.seed, &r)?;
    summary(&r);
    if let Some(model) = subject.model() {
        let pairs = trial_pairs(&pool, spec.trials, spec.seed);
        let s = specificity_control(model, &neurons, &pairs, spec.roles, CONTROL_PROMPT)?;
        write_json(
            &c.out.join("specificity.json"),
            &meta(&echoed, &model.digest(), spec.seed),
            &echoed,
            &s,
        )?;
    }
    if a.random_control {
        let layers = hl.unwrap_or(0..subject.get().n_layers());
        let Protocol::AlphaSweep { alphas, .. } = &spec.protocol else {
            unreachable!("kind fixed above")
        };
        let mut rc = spec.clone();
        rc.protocol = Protocol::RandomControl {
            layers,
            n_neurons: neurons.len().max(1),
            alphas: alphas.clone(),
        };
        let echoed = serde_json::to_value(&rc)?;
        let r = execute(subject.get(), &rc, &pool)?;
        emit(
            &c.out,
            "random_control",
            subject.get(),
            &echoed,
            rc.seed,
            &r,
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neurons: Option<Vec<NeuronId>>,
    pub alphas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub level: f64,
    pub roles: Roles,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            neurons: None,
            alphas: (0..=8).map(|i| i as f64 / 4.0).collect(),
            trials: 20,
            seed: 42,
            level: 0.95,
            roles: Roles::default(),
        }
    }
}

pub fn run_steer(a: &SteerArgs) -> Result<()> {
    let c = &a.common;
    let subject = open_subject(c)?;
    let alphas = a.neurons.alphas.as_deref().map(parse_grid).transpose()?;
    let flags = json!({
        "neurons": neuron_list(&a.neurons)?, "alphas": alphas, "trials": c.trials, "seed": c.seed,
        "level": c.level, "roles": roles_flags(c),
    });
    let (mut cfg, _): (SteerConfig, _) = resolve(load_file(c.cfg.config.as_ref())?, flags)?;
    let hl = a
        .neurons
        .hijacker_layers
        .as_deref()
        .map(parse_range)
        .transpose()?;
    let pool = pool(c)?;
    let neurons = resolve_neurons(
        &subject,
        &pool,
        cfg.neurons.clone(),
        hl,
        a.neurons
            .hijacker_count
            .unwrap_or(patchlab_core::lens::HIJACKER_SET_SIZE),
        cfg.roles,
        cfg.trials,
        cfg.seed,
    )?;
    cfg.neurons = Some(neurons.clone());
    let echoed = serde_json::to_value(&cfg)?;
    let pairs = trial_pairs(&pool, cfg.trials, cfg.seed);
    let cx = SweepContext {
        pairs: &pairs,
        roles: cfg.roles,
        level: cfg.level,
        seed: cfg.seed,
    };
    let r = run_steer_sweep(subject.get(), &cx, &neurons, &cfg.alphas)?;
    emit(&c.out, "steer", subject.get(), &echoed, cfg.seed, &r)?;
    summary(&r);
    Ok(())
}
