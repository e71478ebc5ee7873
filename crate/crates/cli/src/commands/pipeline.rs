//! `reproduce-all`: every stage from training to the SAE analysis, into one
//! fresh directory. Outputs depend only on the config, so two runs with the
//! same config produce identical trees. Wall-clock goes to stderr.

use std::path::Path;
use std::time::Instant;

use patchlab_core::{ModelConfig, NeuronId, SyntheticVocab};
use patchlab_forge::TrainConfig;
use patchlab_sae::SaeConfig;
use patchlab_sweep::controls::{hijacker_neurons, specificity_control, CONTROL_PROMPT};
use patchlab_sweep::spec::{default_alphas, default_lambdas};
use patchlab_sweep::{
    trial_pairs, BlendMode, ModelSubject, Parity, PatchSite, Protocol, Roles, Subject, SweepReport,
    SweepSpec,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::report::{summarize, summary_rows, SUMMARY_HEADER};
use super::sae::{
    analyze, gather, train as train_sae, write_analysis, write_sae, SaeAnalyzeConfig,
    SaeTrainConfig,
};
use super::sweeps::{emit, fixture_pairs};
use super::train::{evaluate, train, write_eval, EvalConfig, TrainToyConfig};
use crate::cli::ReproduceArgs;
use crate::common::{meta, write_csv, write_json, write_text};
use crate::config::{load_file, resolve, TaskConfig};
use crate::error::{CliError, Result};

pub const MARKER: &str = "INCOMPLETE";

/// Layer and heads used by the stages after the head sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Locus {
    pub layer: usize,
    pub heads: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy_default(SyntheticVocab::new().len()),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub max_pairs: Option<usize>,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            max_pairs: Some(300),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub trials: usize,
    pub seed: u64,
    pub level: f64,
    pub roles: Roles,
    pub parities: Vec<Parity>,
    pub lambdas: Vec<f64>,
    pub bidirectional_trials: usize,
    /// Fixes layer and heads instead of reading them off the sweeps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub locus: Option<Locus>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            trials: 20,
            seed: 42,
            level: 0.95,
            roles: Roles::default(),
            parities: vec![Parity::Even, Parity::Odd],
            lambdas: default_lambdas(),
            bidirectional_trials: 100,
            locus: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuronSection {
    pub count: usize,
    /// Layers searched for hijackers; default from the locus layer on.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<std::ops::Range<usize>>,
    pub alphas: Vec<f64>,
}

impl Default for NeuronSection {
    fn default() -> Self {
        Self {
            count: patchlab_core::lens::HIJACKER_SET_SIZE,
            layers: None,
            alphas: default_alphas(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeSection {
    pub sae: SaeConfig,
    /// Default: the locus layer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    pub site: String,
    pub max_pairs: usize,
    pub top_n: usize,
    pub trials: usize,
}

impl Default for SaeSection {
    fn default() -> Self {
        Self {
            sae: SaeConfig {
                steps: 1500,
                ..SaeConfig::default()
            },
            layer: None,
            site: "resid_post".into(),
            max_pairs: 1000,
            top_n: 20,
            trials: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub task: TaskConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub neurons: NeuronSection,
    pub sae: SaeSection,
}

/// What the run found; also the body of `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct PipelineSummary {
    pub checkpoint_digest: String,
    pub qa_error: Option<f64>,
    pub simple_error: Option<f64>,
    pub chat_error: Option<f64>,
    pub locus: Locus,
    pub locus_source: String,
    pub head_steps: Vec<(String, Option<f64>)>,
    pub lambda_step: Option<f64>,
    pub repair_rate: Option<f64>,
    pub induction_rate: Option<f64>,
    pub generalization: (usize, usize),
    pub hijackers: Vec<NeuronId>,
    pub alpha_step: Option<f64>,
    pub sae_relative_error: Option<f64>,
    pub sae_overlap: f64,
    pub sae_feature: usize,
    pub sweeps: Vec<super::report::SummaryRow>,
}

/// The files a complete run must contain, relative to its root.
pub const ARTIFACTS: [&str; 7] = [
    "01_train/model.ckpt",
    "02_eval/eval_formats.json",
    "03_layer_sweep/layer_sweep.json",
    "04_head_sweep/head_subset_sweep_even.json",
    "05_fraction_sweep/fraction_sweep.json",
    "06_bidirectional/bidirectional.json",
    "09_sae/features.json",
];

struct Run<'a> {
    root: &'a Path,
    started: Instant,
}

impl Run<'_> {
    fn stage<T>(&self, name: &str, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
        write_text(&self.root.join(MARKER), &format!("running {name}\n"))
            .map_err(|e| e.in_stage(name))?;
        let t = Instant::now();
        eprintln!("[{name}] start");
        let out = f(&self.root.join(name)).map_err(|e| e.in_stage(name))?;
        eprintln!(
            "[{name}] done in {:.1}s (total {:.1}s)",
            t.elapsed().as_secs_f64(),
            self.started.elapsed().as_secs_f64()
        );
        Ok(out)
    }
}

fn sweep_spec(s: &SweepSection, protocol: Protocol, trials: usize) -> SweepSpec {
    SweepSpec {
        protocol,
        trials,
        seed: s.seed,
        level: s.level,
        roles: s.roles,
    }
}

fn run_spec(
    subject: &ModelSubject,
    dir: &Path,
    stem: &str,
    spec: &SweepSpec,
    pool: &[patchlab_forge::OperandPair],
) -> Result<SweepReport> {
    spec.validate()?;
    let r = patchlab_sweep::run_sweep(subject, spec, pool)?;
    let echoed = serde_json::to_value(spec)?;
    emit(dir, stem, subject, &echoed, spec.seed, &r)?;
    Ok(r)
}

/// Highest rate wins; ties go to the earlier point.
fn best_point(r: &SweepReport) -> Option<&patchlab_sweep::GridPoint> {
    r.points
        .iter()
        .fold(None, |acc: Option<&patchlab_sweep::GridPoint>, p| {
            match (acc, p.rate) {
                (Some(a), Some(rate)) if a.rate.unwrap_or(-1.0) >= rate => Some(a),
                (_, Some(_)) => Some(p),
                (a, None) => a,
            }
        })
}

fn check_empty(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut rd = std::fs::read_dir(dir)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", dir.display())))?;
        if rd.next().is_some() {
            return Err(CliError::Config(format!(
                "output directory {} is not empty; reproduce-all needs a clean directory",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

/// sha256 of every file under `root` except the manifest, in path order.
pub fn file_digests(root: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| CliError::Runtime(e.to_string()))? {
            let p = e.map_err(|e| CliError::Runtime(e.to_string()))?.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p
                .strip_prefix(root)
                .unwrap_or(&p)
                .to_string_lossy()
                .replace('\\', "/");
            if rel == "manifest.json" || rel == MARKER {
                continue;
            }
            let bytes = std::fs::read(&p).map_err(|e| CliError::Runtime(e.to_string()))?;
            out.push((rel, hex::encode(Sha256::digest(&bytes))));
        }
    }
    out.sort();
    Ok(out)
}

pub fn reproduce(cfg: &PipelineConfig, echoed: &Value, root: &Path) -> Result<PipelineSummary> {
    check_empty(root)?;
    let run = Run {
        root,
        started: Instant::now(),
    };
    let sw = &cfg.sweep;
    let pool = cfg.task.held_out().map_err(|e| e.in_stage("config"))?;

    let ckpt = run.stage("01_train", |dir| {
        let tc = TrainToyConfig {
            model: cfg.train.model.clone(),
            train: cfg.train.train.clone(),
            task: cfg.task.clone(),
        };
        let e = serde_json::to_value(&tc)?;
        train(
            &tc,
            &e,
            &dir.join("model.ckpt"),
            &dir.join("train_log.json"),
        )
    })?;
    let digest = ckpt.digest();
    let subject = ModelSubject::new(&ckpt).map_err(|e| CliError::from(e).in_stage("01_train"))?;

    let eval = run.stage("02_eval", |dir| {
        let ec = EvalConfig {
            task: cfg.task.clone(),
            max_pairs: cfg.eval.max_pairs,
            all_pairs: false,
            seed: cfg.eval.seed,
            level: sw.level,
        };
        let e = serde_json::to_value(&ec)?;
        let r = evaluate(subject.model(), &ec)?;
        write_eval(dir, &r, &meta(&e, &digest, ec.seed), &e)?;
        Ok(r)
    })?;

    let layers = run.stage("03_layer_sweep", |dir| {
        let p = Protocol::LayerSweep {
            layers: None,
            site: PatchSite::Pattern,
            heads: None,
        };
        run_spec(
            &subject,
            dir,
            "layer_sweep",
            &sweep_spec(sw, p, sw.trials),
            &pool,
        )
    })?;
    let layer = match &sw.locus {
        Some(l) => l.layer,
        None => best_point(&layers).map(|p| p.x as usize).ok_or_else(|| {
            CliError::Runtime("layer sweep produced no rates".into()).in_stage("03_layer_sweep")
        })?,
    };

    let head_sweeps = run.stage("04_head_sweep", |dir| {
        let mut out = Vec::new();
        for &parity in &sw.parities {
            let p = Protocol::HeadSubsetSweep {
                layer,
                parity,
                k_min: 0,
                k_max: None,
                max_subsets: patchlab_sweep::spec::SUBSET_CAP,
                lambda: 1.0,
            };
            let name = serde_json::to_value(parity)?
                .as_str()
                .unwrap_or("parity")
                .to_string();
            let r = run_spec(
                &subject,
                dir,
                &format!("head_subset_sweep_{name}"),
                &sweep_spec(sw, p, sw.trials),
                &pool,
            )?;
            out.push((parity, name, r));
        }
        Ok(out)
    })?;
    let (locus, locus_source) = match &sw.locus {
        Some(l) => (l.clone(), "config".to_string()),
        None => {
            // the parity class whose full set repairs most often
            let n = subject.n_heads();
            let best = head_sweeps
                .iter()
                .filter_map(|(parity, _, r)| {
                    r.points
                        .last()
                        .and_then(|p| p.rate)
                        .map(|rate| (*parity, rate))
                })
                .fold(None::<(Parity, f64)>, |acc, (p, rate)| match acc {
                    Some((_, b)) if b >= rate => acc,
                    _ => Some((p, rate)),
                });
            let heads = best
                .map(|(p, _)| p.heads(n))
                .unwrap_or_else(|| (0..n).collect());
            (Locus { layer, heads }, "sweeps".to_string())
        }
    };

    let fraction = run.stage("05_fraction_sweep", |dir| {
        let p = Protocol::FractionSweep {
            layer: locus.layer,
            heads: locus.heads.clone(),
            lambdas: sw.lambdas.clone(),
            mode: BlendMode::Convex,
        };
        run_spec(
            &subject,
            dir,
            "fraction_sweep",
            &sweep_spec(sw, p, sw.trials),
            &pool,
        )
    })?;

    let bidir = run.stage("06_bidirectional", |dir| {
        let p = Protocol::Bidirectional {
            layer: locus.layer,
            heads: locus.heads.clone(),
            lambda: 1.0,
            site: PatchSite::Pattern,
        };
        run_spec(
            &subject,
            dir,
            "bidirectional",
            &sweep_spec(sw, p, sw.bidirectional_trials),
            &pool,
        )
    })?;

    let generalization = run.stage("07_generalize", |dir| {
        let p = Protocol::PairGeneralization {
            pairs: fixture_pairs(),
            layer: locus.layer,
            heads: locus.heads.clone(),
        };
        let r = run_spec(
            &subject,
            dir,
            "pair_generalization",
            &sweep_spec(sw, p, sw.trials),
            &pool,
        )?;
        Ok(patchlab_sweep::generalization_summary(&r))
    })?;

    let (hijackers, alpha) = run.stage("08_neurons", |dir| {
        let nl = cfg
            .neurons
            .layers
            .clone()
            .unwrap_or(locus.layer..subject.n_layers());
        let pairs = trial_pairs(&pool, sw.trials, sw.seed);
        let neurons = hijacker_neurons(&subject, &pairs, sw.roles, nl, cfg.neurons.count)?;
        let p = Protocol::AlphaSweep {
            neurons: neurons.clone(),
            alphas: cfg.neurons.alphas.clone(),
        };
        let spec = sweep_spec(sw, p, sw.trials);
        let r = run_spec(&subject, dir, "alpha_sweep", &spec, &pool)?;
        let s = specificity_control(&subject, &neurons, &pairs, sw.roles, CONTROL_PROMPT)?;
        let e = serde_json::to_value(&spec)?;
        write_json(
            &dir.join("specificity.json"),
            &meta(&e, &digest, spec.seed),
            &e,
            &s,
        )?;
        Ok((neurons, r))
    })?;

    let (sae_err, analysis) = run.stage("09_sae", |dir| {
        let tc = SaeTrainConfig {
            sae: cfg.sae.sae.clone(),
            layer: Some(cfg.sae.layer.unwrap_or(locus.layer)),
            site: cfg.sae.site.clone(),
            max_pairs: cfg.sae.max_pairs,
            formats: vec![sw.roles.bug, sw.roles.good],
            task: cfg.task.clone(),
        };
        let data = gather(&subject, &tc)?;
        let mut tc = tc;
        tc.sae.input_dim = data.width();
        let e = serde_json::to_value(&tc)?;
        let m = meta(&e, &digest, tc.sae.seed);
        let sae = train_sae(&data, &tc, &m)?;
        write_sae(&sae, &dir.join("sae.bin"), &m, &e)?;
        let ac = SaeAnalyzeConfig {
            top_n: cfg.sae.top_n,
            trials: cfg.sae.trials,
            seed: sw.seed,
            roles: sw.roles,
            feature: None,
            task: cfg.task.clone(),
        };
        let a = analyze(&subject, &sae, &ac)?;
        let e = serde_json::to_value(&ac)?;
        write_analysis(dir, &a, &meta(&e, &digest, ac.seed), &e)?;
        Ok((sae.provenance.final_eval().map(|p| p.relative_error), a))
    })?;

    let summary = run.stage("10_summary", |_| {
        let found = super::report::collect(root)?;
        let sweeps = summarize(&found);
        let m = meta(echoed, &digest, sw.seed);
        write_csv(&root.join("summary.csv"), &m, &SUMMARY_HEADER, &summary_rows(&sweeps))?;
        let s = PipelineSummary {
            checkpoint_digest: digest.clone(),
            qa_error: eval.error_rate(patchlab_forge::Format::Qa),
            simple_error: eval.error_rate(patchlab_forge::Format::Simple),
            chat_error: eval.error_rate(patchlab_forge::Format::Chat),
            locus: locus.clone(),
            locus_source: locus_source.clone(),
            head_steps: head_sweeps.iter().map(|(_, n, r)| (n.clone(), r.step)).collect(),
            lambda_step: fraction.step,
            repair_rate: bidir.point("forward").and_then(|p| p.rate),
            induction_rate: bidir.point("reverse").and_then(|p| p.rate),
            generalization,
            hijackers: hijackers.clone(),
            alpha_step: alpha.step,
            sae_relative_error: sae_err,
            sae_overlap: analysis.report.overlap,
            sae_feature: analysis.feature,
            sweeps,
        };
        write_json(&root.join("summary.json"), &m, echoed, &s)?;
        for a in ARTIFACTS {
            if !root.join(a).is_file() {
                return Err(CliError::Runtime(format!("missing artifact {a}")));
            }
        }
        let files = file_digests(root)?;
        let manifest = json!({
            "artifacts": ARTIFACTS,
            "files": files.into_iter().map(|(f, d)| json!({"file": f, "sha256": d})).collect::<Vec<_>>(),
        });
        write_json(&root.join("manifest.json"), &m, echoed, &manifest)?;
        Ok(s)
    })?;
    std::fs::remove_file(root.join(MARKER)).map_err(|e| CliError::Runtime(e.to_string()))?;
    eprintln!(
        "reproduce-all finished in {:.1}s",
        run.started.elapsed().as_secs_f64()
    );
    Ok(summary)
}

pub fn run_reproduce(a: &ReproduceArgs) -> Result<()> {
    let flags = json!({"train": {"train": {"seed": a.seed}}});
    let (cfg, echoed): (PipelineConfig, _) = resolve(load_file(a.cfg.config.as_ref())?, flags)?;
    let s = reproduce(&cfg, &echoed, &a.out)?;
    println!(
        "qa error {} simple error {}; locus layer {} heads {:?}; repair {} induction {}",
        crate::common::opt(s.qa_error),
        crate::common::opt(s.simple_error),
        s.locus.layer,
        s.locus.heads,
        crate::common::opt(s.repair_rate),
        crate::common::opt(s.induction_rate),
    );
    Ok(())
}
