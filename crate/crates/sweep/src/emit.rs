//! JSON, CSV and SVG output. All three are byte-deterministic for a given
//! report and carry the same provenance block.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SweepError};
use crate::report::SweepReport;

pub const TOOL: &str = "patchlab";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputMeta {
    pub tool: String,
    pub tool_version: String,
    /// sha256 of the merged configuration's canonical JSON.
    pub config_digest: String,
    pub checkpoint_digest: String,
    pub seed: u64,
}

impl OutputMeta {
    pub fn new(
        config: &serde_json::Value,
        checkpoint_digest: impl Into<String>,
        seed: u64,
    ) -> Self {
        Self {
            tool: TOOL.into(),
            tool_version: TOOL_VERSION.into(),
            config_digest: config_digest(config),
            checkpoint_digest: checkpoint_digest.into(),
            seed,
        }
    }

    /// The provenance as one `key=value` line.
    pub fn line(&self) -> String {
        format!(
            "tool={} version={} config_digest={} checkpoint_digest={} seed={}",
            self.tool, self.tool_version, self.config_digest, self.checkpoint_digest, self.seed
        )
    }
}

/// serde_json maps are ordered, so serializing a `Value` is canonical.
pub fn config_digest(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

/// What every JSON output looks like on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub meta: OutputMeta,
    /// The merged configuration the run used.
    pub config: serde_json::Value,
    pub result: T,
}

pub fn to_json<T: Serialize>(
    meta: &OutputMeta,
    config: &serde_json::Value,
    result: &T,
) -> Result<String> {
    let env = Envelope {
        meta: meta.clone(),
        config: config.clone(),
        result,
    };
    let mut s = serde_json::to_string_pretty(&env)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<Envelope<T>> {
    Ok(serde_json::from_str(text)?)
}

/// One row per grid point, preceded by `#` provenance lines.
pub fn report_csv(meta: &OutputMeta, report: &SweepReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "label",
        report.x_label.as_str(),
        "success_on",
        "correct",
        "bug",
        "incoherent",
        "trials",
        "successes",
        "rate",
        "ci_lower",
        "ci_upper",
    ])?;
    for p in &report.points {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let success_on = serde_json::to_value(p.success_on)?;
        w.write_record([
            p.label.clone(),
            p.x.to_string(),
            success_on.as_str().unwrap_or_default().to_string(),
            p.tally.correct.to_string(),
            p.tally.bug.to_string(),
            p.tally.incoherent.to_string(),
            p.trials.to_string(),
            p.successes.to_string(),
            opt(p.rate),
            opt(p.ci.map(|c| c.lower)),
            opt(p.ci.map(|c| c.upper)),
        ])?;
    }
    let body = w
        .into_inner()
        .map_err(|e| SweepError::Spec(e.to_string()))?;
    let mut out = format!("# {}\n# protocol={}\n", meta.line(), report.protocol);
    out.push_str(&String::from_utf8(body).expect("csv writes utf-8"));
    Ok(out)
}

/// Arbitrary table with the same `#` provenance line.
pub fn csv_table(meta: &OutputMeta, header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let body = w
        .into_inner()
        .map_err(|e| SweepError::Spec(e.to_string()))?;
    Ok(format!(
        "# {}\n{}",
        meta.line(),
        String::from_utf8(body).expect("csv writes utf-8")
    ))
}

/// Parse a CSV written by [`report_csv`] into its records.
pub fn read_csv(text: &str) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    Ok(r.records().collect::<std::result::Result<_, _>>()?)
}

const W: f64 = 560.0;
const H: f64 = 340.0;
const PAD_L: f64 = 60.0;
const PAD_R: f64 = 20.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 50.0;

/// Success rate against the grid variable, drawn as a step curve held until
/// the next grid value, with interval whiskers.
pub fn report_svg(meta: &OutputMeta, report: &SweepReport) -> String {
    let pts: Vec<_> = report.points.iter().filter(|p| p.rate.is_some()).collect();
    let (lo, hi) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.x), hi.max(p.x))
        });
    let (lo, hi) = if pts.is_empty() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    let sx = |x: f64| PAD_L + (x - lo) / (hi - lo) * (W - PAD_L - PAD_R);
    let sy = |r: f64| H - PAD_B - r * (H - PAD_T - PAD_B);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, "<metadata>{}</metadata>", xml_escape(&meta.line()));
    let _ = writeln!(
        s,
        r#"<text x="{PAD_L}" y="20">{}</text>"#,
        xml_escape(&report.protocol)
    );
    // axes
    let _ = writeln!(
        s,
        r#"<path d="M{PAD_L:.2},{:.2} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
        sy(1.0),
        sy(0.0),
        W - PAD_R
    );
    for r in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{r:.1}</text>"#,
            PAD_L - 6.0,
            sy(r) + 4.0
        );
    }
    for p in &pts {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            sx(p.x),
            H - PAD_B + 16.0,
            xml_escape(&fmt_x(p.x))
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (PAD_L + W - PAD_R) / 2.0,
        H - 10.0,
        xml_escape(&report.x_label)
    );

    if !pts.is_empty() {
        let mut d = format!("M{:.2},{:.2}", sx(pts[0].x), sy(pts[0].rate.unwrap_or(0.0)));
        for w in pts.windows(2) {
            let _ = write!(
                d,
                " H{:.2} V{:.2}",
                sx(w[1].x),
                sy(w[1].rate.unwrap_or(0.0))
            );
        }
        let _ = writeln!(
            s,
            r#"<path class="rate" d="{d}" fill="none" stroke="steelblue" stroke-width="2"/>"#
        );
    }
    for p in &pts {
        if let Some(ci) = p.ci {
            let _ = writeln!(
                s,
                r#"<line class="ci" x1="{x:.2}" x2="{x:.2}" y1="{:.2}" y2="{:.2}" stroke="gray"/>"#,
                sy(ci.lower),
                sy(ci.upper),
                x = sx(p.x)
            );
        }
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#,
            sx(p.x),
            sy(p.rate.unwrap_or(0.0))
        );
    }
    if let Some(step) = report.step {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">step at {}</text>"#,
            W - PAD_R - 100.0,
            20.0,
            xml_escape(&fmt_x(step))
        );
    }
    s.push_str("</svg>\n");
    s
}

/// A plain polyline of `(x, y)` with the y axis fitted to the data (and
/// always including 0).
pub fn curve_svg(
    meta: &OutputMeta,
    title: &str,
    x_label: &str,
    y_label: &str,
    pts: &[(f64, f64)],
) -> String {
    let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| {
        pts.iter().map(sel).fold(init, f)
    };
    let (mut x0, mut x1) = (
        fold(f64::min, f64::INFINITY, |p| p.0),
        fold(f64::max, f64::NEG_INFINITY, |p| p.0),
    );
    let (mut y0, mut y1) = (fold(f64::min, 0.0, |p| p.1), fold(f64::max, 0.0, |p| p.1));
    if !(x1 > x0) {
        x0 -= 0.5;
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y0 -= 0.5;
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD_L + (x - x0) / (x1 - x0) * (W - PAD_L - PAD_R);
    let sy = |y: f64| H - PAD_B - (y - y0) / (y1 - y0) * (H - PAD_T - PAD_B);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, "<metadata>{}</metadata>", xml_escape(&meta.line()));
    let _ = writeln!(
        s,
        r#"<text x="{PAD_L}" y="20">{}</text>"#,
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{PAD_L:.2},{:.2} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
        PAD_T,
        H - PAD_B,
        W - PAD_R
    );
    for y in [y0, y1] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            PAD_L - 6.0,
            sy(y) + 4.0,
            xml_escape(&fmt_x(y))
        );
    }
    for x in [x0, x1] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            sx(x),
            H - PAD_B + 16.0,
            xml_escape(&fmt_x(x))
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (PAD_L + W - PAD_R) / 2.0,
        H - 10.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        xml_escape(y_label)
    );
    if !pts.is_empty() {
        let d: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
            d.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_x(x: f64) -> String {
    let s = format!("{x:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Write through a temporary sibling so a reader never sees half a file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let err = |source| SweepError::Write {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(err)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(err)?;
    std::fs::rename(&tmp, path).map_err(err)
}

/// Write `<stem>.json`, `<stem>.csv` and `<stem>.svg` into `dir`.
pub fn emit_report(
    dir: &Path,
    stem: &str,
    meta: &OutputMeta,
    config: &serde_json::Value,
    report: &SweepReport,
) -> Result<Vec<PathBuf>> {
    let files = [
        (format!("{stem}.json"), to_json(meta, config, report)?),
        (format!("{stem}.csv"), report_csv(meta, report)?),
        (format!("{stem}.svg"), report_svg(meta, report)),
    ];
    let mut out = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        out.push(path);
    }
    Ok(out)
}
