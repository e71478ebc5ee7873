//! `report`: collect sweep outputs from a directory tree, re-render their
//! tables and plots, and write one summary.

use std::path::{Path, PathBuf};

use patchlab_sweep::emit::{from_json, report_csv, report_svg, Envelope};
use patchlab_sweep::SweepReport;
use serde::Serialize;
use serde_json::json;

use crate::cli::ReportArgs;
use crate::common::{meta, opt, write_csv, write_json, write_text};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    /// Path relative to the input directory.
    pub file: String,
    pub protocol: String,
    pub points: usize,
    pub step: Option<f64>,
    pub best_label: Option<String>,
    pub best_rate: Option<f64>,
    pub checkpoint_digest: String,
}

/// Every `*.json` under `dir`, in path order.
fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let rd = std::fs::read_dir(&d)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", d.display())))?;
        for entry in rd {
            let p = entry.map_err(|e| CliError::Runtime(e.to_string()))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "json") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Sweep envelopes under `dir`; other JSON files are skipped.
pub fn collect(dir: &Path) -> Result<Vec<(String, Envelope<SweepReport>)>> {
    let mut found = Vec::new();
    for p in json_files(dir)? {
        let text = std::fs::read_to_string(&p)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        if let Ok(env) = from_json::<SweepReport>(&text) {
            let rel = p
                .strip_prefix(dir)
                .unwrap_or(&p)
                .to_string_lossy()
                .replace('\\', "/");
            found.push((rel, env));
        }
    }
    Ok(found)
}

pub fn summarize(found: &[(String, Envelope<SweepReport>)]) -> Vec<SummaryRow> {
    found
        .iter()
        .map(|(file, env)| {
            let r = &env.result;
            let best = r
                .points
                .iter()
                .filter_map(|p| p.rate.map(|rate| (p, rate)))
                .fold(
                    None::<(&patchlab_sweep::GridPoint, f64)>,
                    |acc, (p, rate)| match acc {
                        Some((_, b)) if b >= rate => acc,
                        _ => Some((p, rate)),
                    },
                );
            SummaryRow {
                file: file.clone(),
                protocol: r.protocol.clone(),
                points: r.points.len(),
                step: r.step,
                best_label: best.map(|(p, _)| p.label.clone()),
                best_rate: best.map(|(_, r)| r),
                checkpoint_digest: env.meta.checkpoint_digest.clone(),
            }
        })
        .collect()
}

pub const SUMMARY_HEADER: [&str; 6] = [
    "file",
    "protocol",
    "points",
    "step",
    "best_label",
    "best_rate",
];

pub fn summary_rows(rows: &[SummaryRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.file.clone(),
                r.protocol.clone(),
                r.points.to_string(),
                opt(r.step),
                r.best_label.clone().unwrap_or_default(),
                opt(r.best_rate),
            ]
        })
        .collect()
}

pub fn run_report(a: &ReportArgs) -> Result<()> {
    if !a.input.is_dir() {
        return Err(CliError::Config(format!(
            "input directory {} does not exist",
            a.input.display()
        )));
    }
    let found = collect(&a.input)?;
    if found.is_empty() {
        return Err(CliError::Runtime(format!(
            "no sweep results under {}",
            a.input.display()
        )));
    }
    for (file, env) in &found {
        let stem = file.trim_end_matches(".json").replace('/', "__");
        write_text(
            &a.out.join(format!("{stem}.csv")),
            &report_csv(&env.meta, &env.result)?,
        )?;
        write_text(
            &a.out.join(format!("{stem}.svg")),
            &report_svg(&env.meta, &env.result),
        )?;
    }
    let rows = summarize(&found);
    let files: Vec<&str> = rows.iter().map(|r| r.file.as_str()).collect();
    let echoed = json!({"inputs": files});
    let m = meta(&echoed, "", 0);
    write_json(&a.out.join("summary.json"), &m, &echoed, &rows)?;
    write_csv(
        &a.out.join("summary.csv"),
        &m,
        &SUMMARY_HEADER,
        &summary_rows(&rows),
    )?;
    for r in &rows {
        println!("{:<40} {:<20} step={}", r.file, r.protocol, opt(r.step));
    }
    Ok(())
}
