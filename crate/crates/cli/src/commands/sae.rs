//! `sae-train` and `sae-analyze`.

use std::path::{Path, PathBuf};

use patchlab_core::io::load_acts;
use patchlab_core::{
    capture, ActivationAddress, ActivationDataset, PositionRule, Site, Tensor, Trace,
};
use patchlab_forge::{Format, OperandPair};
use patchlab_sae::{
    feature_head_correlation, feature_report, train_sae, FeatureReport, HeadCorrelation, SaeConfig,
    SaeModel,
};
use patchlab_sweep::{trial_pairs, ModelSubject, Roles};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cli::{SaeAnalyzeArgs, SaeTrainArgs};
use crate::common::{meta, notes, open_checkpoint, write_json, write_text};
use crate::config::{load_file, require_file, resolve, TaskConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeTrainConfig {
    /// `input_dim` is taken from the activations.
    pub sae: SaeConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    pub site: String,
    /// Training pairs sampled (seeded by `sae.seed`); each gives one row
    /// per format.
    pub max_pairs: usize,
    pub formats: Vec<Format>,
    pub task: TaskConfig,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            sae: SaeConfig::default(),
            layer: None,
            site: "resid_post".into(),
            max_pairs: 2000,
            formats: vec![Format::Qa, Format::Simple],
            task: TaskConfig::default(),
        }
    }
}

fn vector_site(s: &str) -> Result<Site> {
    let site: Site = s.parse()?;
    match site {
        Site::ResidPre | Site::AttnOut | Site::MlpOut | Site::ResidPost => Ok(site),
        _ => Err(CliError::Config(format!(
            "SAE site must be a residual-width vector site, got {s}"
        ))),
    }
}

/// One row per trace: the activation at its final position.
pub fn final_rows(traces: &[Trace<f32>], layer: usize, site: Site) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut width = 0;
    for t in traces {
        let addr = ActivationAddress::new(layer, site).with_positions(PositionRule::At {
            pos: t.last_position(),
        });
        let slice = capture(t, &addr)?;
        width = slice.values.shape()[1];
        data.extend_from_slice(slice.values.data());
    }
    Ok(Tensor::new(vec![traces.len(), width], data)?)
}

fn prompt_traces(
    subject: &ModelSubject,
    pairs: &[OperandPair],
    format: Format,
) -> Result<Vec<Trace<f32>>> {
    Ok(pairs
        .par_iter()
        .map(|p| subject.prompt_trace(p, format))
        .collect::<patchlab_sweep::Result<_>>()?)
}

pub fn gather(subject: &ModelSubject, cfg: &SaeTrainConfig) -> Result<ActivationDataset> {
    let layer = cfg.layer.ok_or_else(|| {
        CliError::Config("sae-train needs a layer (--layer or `layer` in the config)".into())
    })?;
    let site = vector_site(&cfg.site)?;
    if layer >= subject.model().config().n_layers {
        return Err(CliError::Config(format!("layer {layer} out of range")));
    }
    let mut pairs = cfg.task.spec()?.split().0;
    if cfg.max_pairs < pairs.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.sae.seed);
        let mut idx = sample(&mut rng, pairs.len(), cfg.max_pairs).into_vec();
        idx.sort_unstable();
        pairs = idx.into_iter().map(|i| pairs[i].clone()).collect();
    }
    let mut traces = Vec::new();
    for &f in &cfg.formats {
        traces.extend(prompt_traces(subject, &pairs, f)?);
    }
    let formats: Vec<String> = cfg.formats.iter().map(|f| f.to_string()).collect();
    Ok(ActivationDataset {
        layer,
        site,
        positions: "final prompt position".into(),
        meta: [
            ("pairs".to_string(), pairs.len().to_string()),
            ("formats".to_string(), formats.join(",")),
        ]
        .into(),
        rows: final_rows(&traces, layer, site)?,
    })
}

#[derive(Debug, Serialize)]
pub struct SaeSummary<'a> {
    pub rows: usize,
    pub n_features: usize,
    pub k: usize,
    pub provenance: &'a patchlab_sae::SaeProvenance,
    pub decoder_norm_defect: f64,
}

pub fn train(
    data: &ActivationDataset,
    cfg: &SaeTrainConfig,
    m: &patchlab_sweep::OutputMeta,
) -> Result<SaeModel> {
    let mut sc = cfg.sae.clone();
    sc.input_dim = data.width();
    let mut sae = train_sae(data, &sc)?;
    sae.provenance.notes = notes(m);
    Ok(sae)
}

pub fn write_sae(
    sae: &SaeModel,
    out: &Path,
    m: &patchlab_sweep::OutputMeta,
    echoed: &Value,
) -> Result<()> {
    let bytes = sae.to_bytes()?;
    patchlab_sweep::emit::write_atomic(out, &bytes)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let summary = SaeSummary {
        rows: sae.provenance.train_rows + sae.provenance.eval_rows,
        n_features: sae.n_features(),
        k: sae.config.k,
        provenance: &sae.provenance,
        decoder_norm_defect: sae.decoder_norm_defect(),
    };
    write_json(&sidecar(out), m, echoed, &summary)
}

fn sidecar(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn run_train(a: &SaeTrainArgs) -> Result<()> {
    let flags = json!({
        "layer": a.layer, "site": a.site, "max_pairs": a.max_pairs,
        "sae": {"steps": a.steps, "k": a.k, "expansion": a.expansion, "seed": a.seed},
    });
    let (mut cfg, _): (SaeTrainConfig, Value) = resolve(load_file(a.cfg.config.as_ref())?, flags)?;
    let (data, digest) = match (&a.acts, &a.checkpoint) {
        (Some(p), _) => {
            require_file(p, "activation file")?;
            let d = load_acts(p)?;
            cfg.layer = Some(d.layer);
            cfg.site = d.site.to_string();
            (d, String::new())
        }
        (None, Some(p)) => {
            let ckpt = open_checkpoint(p)?;
            let subject = ModelSubject::new(&ckpt)?;
            (gather(&subject, &cfg)?, ckpt.digest())
        }
        (None, None) => return Err(CliError::Usage("--checkpoint or --acts is required".into())),
    };
    cfg.sae.input_dim = data.width();
    let echoed = serde_json::to_value(&cfg)?;
    let m = meta(&echoed, &digest, cfg.sae.seed);
    if let Some(p) = &a.save_acts {
        let mut d = data.clone();
        d.meta.extend(notes(&m));
        patchlab_sweep::emit::write_atomic(p, &d.to_bytes()?)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let sae = train(&data, &cfg, &m)?;
    write_sae(&sae, &a.out, &m, &echoed)?;
    if let Some(e) = sae.provenance.final_eval() {
        println!(
            "relative error {:.4} after {} steps",
            e.relative_error, e.step
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeAnalyzeConfig {
    pub top_n: usize,
    pub trials: usize,
    pub seed: u64,
    pub roles: Roles,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature: Option<usize>,
    pub task: TaskConfig,
}

impl Default for SaeAnalyzeConfig {
    fn default() -> Self {
        Self {
            top_n: 20,
            trials: 50,
            seed: 42,
            roles: Roles::default(),
            feature: None,
            task: TaskConfig::default(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct AnalysisResult {
    pub report: FeatureReport,
    pub feature: usize,
    pub head_layer: usize,
    pub head_correlation: Vec<HeadCorrelation>,
}

/// The most bug-amplified feature among those reported.
fn pick_feature(r: &FeatureReport) -> Option<usize> {
    r.features
        .iter()
        .filter(|f| f.mean_wrong > 0.0)
        .max_by(|a, b| {
            let s = |f: &patchlab_sae::FeatureRow| f.ratio.unwrap_or(f64::INFINITY);
            s(a).total_cmp(&s(b)).then(b.feature.cmp(&a.feature))
        })
        .map(|f| f.feature)
}

pub fn analyze(
    subject: &ModelSubject,
    sae: &SaeModel,
    cfg: &SaeAnalyzeConfig,
) -> Result<AnalysisResult> {
    let src = sae
        .provenance
        .source
        .as_ref()
        .ok_or_else(|| CliError::Config("SAE does not record its activation site".into()))?;
    let site = src.site()?;
    let pairs = trial_pairs(&cfg.task.held_out()?, cfg.trials, cfg.seed);
    let wrong_traces = prompt_traces(subject, &pairs, cfg.roles.bug)?;
    let good_traces = prompt_traces(subject, &pairs, cfg.roles.good)?;
    let wrong = final_rows(&wrong_traces, src.layer, site)?;
    let correct = final_rows(&good_traces, src.layer, site)?;
    let report = feature_report(sae, &wrong, &correct, cfg.top_n)?;
    let feature = match cfg.feature.or_else(|| pick_feature(&report)) {
        Some(f) => f,
        None => {
            return Err(CliError::Runtime(
                "no feature fires on bug-format prompts".into(),
            ))
        }
    };
    let head_correlation = feature_head_correlation(sae, &wrong_traces, feature, src.layer)?;
    Ok(AnalysisResult {
        report,
        feature,
        head_layer: src.layer,
        head_correlation,
    })
}

pub fn write_analysis(
    dir: &Path,
    r: &AnalysisResult,
    m: &patchlab_sweep::OutputMeta,
    echoed: &Value,
) -> Result<()> {
    write_json(&dir.join("features.json"), m, echoed, r)?;
    let csv = r.report.to_csv()?;
    write_text(&dir.join("features.csv"), &format!("# {}\n{csv}", m.line()))
}

pub fn run_analyze(a: &SaeAnalyzeArgs) -> Result<()> {
    let flags = json!({"top_n": a.top_n, "trials": a.trials, "seed": a.seed, "feature": a.feature});
    let (cfg, echoed): (SaeAnalyzeConfig, _) = resolve(load_file(a.cfg.config.as_ref())?, flags)?;
    require_file(&a.sae, "SAE file")?;
    let sae = SaeModel::load(&a.sae)?;
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let subject = ModelSubject::new(&ckpt)?;
    let r = analyze(&subject, &sae, &cfg)?;
    write_analysis(
        &a.out,
        &r,
        &meta(&echoed, &ckpt.digest(), cfg.seed),
        &echoed,
    )?;
    println!(
        "top-{} overlap {:.2}; feature {}",
        r.report.top_n, r.report.overlap, r.feature
    );
    for h in &r.head_correlation {
        println!(
            "head {} r={}",
            h.head,
            crate::common::opt(h.r.map(|r| format!("{r:.3}")))
        );
    }
    Ok(())
}
