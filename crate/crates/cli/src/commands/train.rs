//! `train-toy` and `eval-formats`.

use std::path::{Path, PathBuf};

use patchlab_core::io::save_checkpoint;
use patchlab_core::stats::{exact_binomial_ci, BinomialSummary};
use patchlab_core::{Checkpoint, ModelConfig, SyntheticVocab, Transformer};
use patchlab_forge::{
    evaluate_formats, make_dataset, train_toy, Format, LogEntry, OperandPair, TrainConfig,
};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cli::{EvalArgs, TrainToyArgs};
use crate::common::{meta, notes, open_checkpoint, write_csv, write_json};
use crate::config::{load_file, resolve, TaskConfig};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainToyConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
}

impl Default for TrainToyConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy_default(SyntheticVocab::new().len()),
            train: TrainConfig::default(),
            task: TaskConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLog {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub entries: Vec<LogEntry>,
}

/// Train, annotate and save. Returns the checkpoint and the log path.
pub fn train(cfg: &TrainToyConfig, echoed: &Value, out: &Path, log: &Path) -> Result<Checkpoint> {
    let vocab = SyntheticVocab::new();
    let corpus = make_dataset(&cfg.task.spec()?, &vocab)?;
    log::info!(
        "training on {} examples for {} steps",
        corpus.train.len(),
        cfg.train.steps
    );
    let outcome = train_toy(&cfg.model, &corpus.train, &cfg.train)?;
    let mut ckpt = outcome.checkpoint;
    let m = meta(echoed, &ckpt.digest(), cfg.train.seed);
    ckpt.provenance.notes = notes(&m);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::CliError::Runtime(e.to_string()))?;
    }
    save_checkpoint(&ckpt, out)?;
    let log_body = TrainLog {
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
        entries: outcome.log,
    };
    write_json(log, &m, echoed, &log_body)?;
    Ok(ckpt)
}

pub fn run_train(a: &TrainToyArgs) -> Result<()> {
    let flags = json!({"train": {
        "steps": a.steps, "seed": a.seed, "batch_size": a.batch_size, "learning_rate": a.learning_rate,
    }});
    let (cfg, echoed): (TrainToyConfig, _) = resolve(load_file(a.cfg.config.as_ref())?, flags)?;
    let log = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.json");
        PathBuf::from(p)
    });
    let ckpt = train(&cfg, &echoed, &a.out, &log)?;
    println!("{} {}", a.out.display(), ckpt.digest());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub task: TaskConfig,
    /// Seeded sample of held-out pairs; all of them when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_pairs: Option<usize>,
    /// Keep pairs where both label rules agree (the bug cannot show there).
    pub all_pairs: bool,
    pub seed: u64,
    pub level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            max_pairs: None,
            all_pairs: false,
            seed: 42,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatRow {
    pub format: Format,
    pub correct: u64,
    pub bug: u64,
    pub incoherent: u64,
    pub trials: u64,
    pub error_rate: Option<f64>,
    /// Interval on the error rate.
    pub ci: Option<BinomialSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub n_pairs: usize,
    pub pair_filter: String,
    pub formats: Vec<FormatRow>,
}

impl EvalResult {
    pub fn error_rate(&self, f: Format) -> Option<f64> {
        self.formats
            .iter()
            .find(|r| r.format == f)
            .and_then(|r| r.error_rate)
    }
}

/// Held-out pairs after the filter and optional seeded sample, sorted.
pub fn eval_pairs(cfg: &EvalConfig) -> Result<Vec<OperandPair>> {
    let mut pool = cfg.task.held_out()?;
    if !cfg.all_pairs {
        pool.retain(|p| p.rules_disagree());
    }
    if let Some(n) = cfg.max_pairs.filter(|&n| n < pool.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, pool.len(), n).into_vec();
        idx.sort_unstable();
        pool = idx.into_iter().map(|i| pool[i].clone()).collect();
    }
    pool.sort();
    Ok(pool)
}

pub fn evaluate(model: &Transformer<f32>, cfg: &EvalConfig) -> Result<EvalResult> {
    let pairs = eval_pairs(cfg)?;
    let report = evaluate_formats(model, &SyntheticVocab::new(), &pairs, &Format::ALL, 1)?;
    let mut formats = Vec::new();
    for (format, c) in report.formats {
        let ci = if c.trials > 0 {
            Some(exact_binomial_ci(c.errors(), c.trials, cfg.level)?)
        } else {
            None
        };
        formats.push(FormatRow {
            format,
            correct: c.correct,
            bug: c.bug,
            incoherent: c.incoherent,
            trials: c.trials,
            error_rate: c.error_rate(),
            ci,
        });
    }
    Ok(EvalResult {
        n_pairs: pairs.len(),
        pair_filter: if cfg.all_pairs {
            "all"
        } else {
            "rules_disagree"
        }
        .into(),
        formats,
    })
}

pub fn write_eval(
    dir: &Path,
    r: &EvalResult,
    m: &patchlab_sweep::OutputMeta,
    echoed: &Value,
) -> Result<()> {
    write_json(&dir.join("eval_formats.json"), m, echoed, r)?;
    let rows: Vec<Vec<String>> = r
        .formats
        .iter()
        .map(|f| {
            vec![
                f.format.to_string(),
                f.correct.to_string(),
                f.bug.to_string(),
                f.incoherent.to_string(),
                f.trials.to_string(),
                crate::common::opt(f.error_rate),
                crate::common::opt(f.ci.map(|c| c.lower)),
                crate::common::opt(f.ci.map(|c| c.upper)),
            ]
        })
        .collect();
    write_csv(
        &dir.join("eval_formats.csv"),
        m,
        &[
            "format",
            "correct",
            "bug",
            "incoherent",
            "trials",
            "error_rate",
            "ci_lower",
            "ci_upper",
        ],
        &rows,
    )
}

pub fn run_eval(a: &EvalArgs) -> Result<()> {
    let flags =
        json!({"max_pairs": a.max_pairs, "seed": a.seed, "all_pairs": a.all_pairs.then_some(true)});
    let (cfg, echoed): (EvalConfig, _) = resolve(load_file(a.cfg.config.as_ref())?, flags)?;
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let r = evaluate(&ckpt.model()?, &cfg)?;
    let m = meta(&echoed, &ckpt.digest(), cfg.seed);
    write_eval(&a.out, &r, &m, &echoed)?;
    for f in &r.formats {
        println!(
            "{:<7} error {}",
            f.format.to_string(),
            crate::common::opt(f.error_rate)
        );
    }
    Ok(())
}
