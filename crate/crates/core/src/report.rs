//! Fixed-precision CSV reports, SVG charts and run manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::AlignmentOutcome;
use crate::analysis::{CorrelationResult, GapAnalysis, RatioAnalysis, RatioConvention, SimilarityProfile};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::fixtures::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Six decimals; non-finite values become empty cells.
pub fn fmt6(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// `stage,layer,mean_high,mean_medlow,gap_percent`
pub fn write_layer_gap(path: &Path, stages: &[(&str, &GapAnalysis)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["stage", "layer", "mean_high", "mean_medlow", "gap_percent"])?;
    for (stage, gap) in stages {
        for r in &gap.reports {
            w.write_record([
                stage.to_string(),
                r.layer.to_string(),
                fmt6(r.mean_high),
                fmt6(r.mean_medlow),
                fmt6(r.gap_percent),
            ])?;
        }
    }
    finish(w, path)
}

/// `stage,source,language,layer,mean_cosine,pairs`; layers without pairs are omitted.
pub fn write_similarity(path: &Path, stages: &[(&str, &[SimilarityProfile])]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["stage", "source", "language", "layer", "mean_cosine", "pairs"])?;
    for (stage, profiles) in stages {
        for p in *profiles {
            for (layer, c) in p.per_layer_cosine.iter().enumerate() {
                if let Some(c) = c {
                    w.write_record([
                        stage.to_string(),
                        p.source.label().to_string(),
                        p.language.clone(),
                        layer.to_string(),
                        fmt6(*c),
                        p.pair_counts[layer].to_string(),
                    ])?;
                }
            }
        }
    }
    finish(w, path)
}

/// `language,mean_ratio,std_ratio`, readable by `correlate --ratios`.
pub fn write_ratios(path: &Path, ratios: &RatioAnalysis) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["language", "mean_ratio", "std_ratio"])?;
    for r in &ratios.per_language {
        w.write_record([r.language.clone(), fmt6(r.mean_ratio), fmt6(r.std_ratio)])?;
    }
    finish(w, path)
}

/// `benchmark,convention,r,n,languages`
pub fn write_correlations(path: &Path, results: &[CorrelationResult], convention: RatioConvention) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["benchmark", "convention", "r", "n", "languages"])?;
    for c in results {
        w.write_record([
            c.benchmark.clone(),
            convention_label(convention).to_string(),
            fmt6(c.r),
            c.n.to_string(),
            c.languages.join(";"),
        ])?;
    }
    finish(w, path)
}

pub fn convention_label(c: RatioConvention) -> &'static str {
    match c {
        RatioConvention::Difference => "difference",
        RatioConvention::Ratio => "ratio",
    }
}

/// One scatter point of a correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationPoint {
    pub benchmark: String,
    pub language: String,
    pub x: f64,
    pub accuracy: f64,
}

/// `benchmark,language,x,accuracy`
pub fn write_correlation_points(path: &Path, points: &[CorrelationPoint]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["benchmark", "language", "x", "accuracy"])?;
    for p in points {
        w.write_record([p.benchmark.clone(), p.language.clone(), fmt6(p.x), fmt6(p.accuracy)])?;
    }
    finish(w, path)
}

/// `stage,scoring_mode,language,correct,items,accuracy,ties`
pub fn write_eval(path: &Path, stages: &[(&str, &[EvalReport])]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["stage", "scoring_mode", "language", "correct", "items", "accuracy", "ties"])?;
    for (stage, reports) in stages {
        for r in *reports {
            for (lang, a) in &r.per_language {
                w.write_record([
                    stage.to_string(),
                    r.scoring_mode.label().to_string(),
                    lang.clone(),
                    a.correct.to_string(),
                    a.items.to_string(),
                    fmt6(a.accuracy),
                    r.ties.to_string(),
                ])?;
            }
        }
    }
    finish(w, path)
}

/// Two-column series, `index_name` counting from 1.
pub fn write_series(path: &Path, index_name: &str, value_name: &str, values: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([index_name, value_name])?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([(i + 1).to_string(), fmt6(*v)])?;
    }
    finish(w, path)
}

/// `metric,language,value` rows covering means, gaps and retention.
pub fn write_alignment_summary(path: &Path, outcome: &AlignmentOutcome, reference: &str) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["metric", "language", "value"])?;
    for (lang, v) in &outcome.pre_means {
        w.write_record(["pre_mean", lang, &fmt6(*v)])?;
    }
    for (lang, v) in &outcome.post_means {
        w.write_record(["post_mean", lang, &fmt6(*v)])?;
    }
    for (lang, v) in &outcome.metrics.improvement_percent {
        w.write_record(["improvement_percent", lang, &fmt6(*v)])?;
    }
    w.write_record(["retention_percent", reference, &fmt6(outcome.metrics.retention_percent)])?;
    let gap = |g: Option<f64>| g.map(fmt6).unwrap_or_default();
    w.write_record(["gap_pre_percent", "", &gap(outcome.gap_pre)])?;
    w.write_record(["gap_post_percent", "", &gap(outcome.gap_post)])?;
    w.write_record(["gap_reduction_percent", "", &gap(gap_reduction(outcome))])?;
    w.write_record(["skipped_pairs", "", &outcome.skipped_pairs.to_string()])?;
    finish(w, path)
}

/// Relative reduction of the target-layer gap, in percent.
pub fn gap_reduction(outcome: &AlignmentOutcome) -> Option<f64> {
    match (outcome.gap_pre, outcome.gap_post) {
        (Some(a), Some(b)) if a != 0.0 => Some((a - b) / a * 100.0),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    /// `path` is recorded relative to `base` when possible.
    pub fn of(base: &Path, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let shown = path.strip_prefix(base).unwrap_or(path);
        Ok(Self {
            path: shown.to_string_lossy().replace('\\', "/"),
            sha256: sha256_hex(&bytes),
        })
    }
}

/// Everything needed to replay a run. Contains no timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub format_versions: BTreeMap<String, u32>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn format_versions() -> BTreeMap<String, u32> {
    [
        ("toy_model", crate::toy::TOY_FORMAT_VERSION),
        ("sae", crate::sae::SAE_FORMAT_VERSION),
        ("adapters", crate::align::ADAPTER_FORMAT_VERSION),
        ("manifest", MANIFEST_VERSION),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// `manifest.json` for full pipeline runs, `manifest-<command>.json` otherwise.
pub fn manifest_name(command: &str) -> String {
    if command == "pipeline" {
        MANIFEST_FILE.to_string()
    } else {
        format!("manifest-{command}.json")
    }
}

/// Writes the manifest of `command` into `dir`, hashing every listed file.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    config: &crate::config::PipelineConfig,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<PathBuf> {
    let digest = |paths: &[PathBuf]| -> Result<Vec<FileDigest>> {
        let mut v = paths.iter().map(|p| FileDigest::of(dir, p)).collect::<Result<Vec<_>>>()?;
        v.sort_by(|a, b| a.path.cmp(&b.path));
        v.dedup();
        Ok(v)
    };
    let m = Manifest {
        manifest_version: MANIFEST_VERSION,
        tool: env!("CARGO_PKG_NAME").to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config_sha256: config.sha256()?,
        seed: config.seed,
        format_versions: format_versions(),
        config: serde_json::to_value(config)?,
        inputs: digest(inputs)?,
        outputs: digest(outputs)?,
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(manifest_name(command));
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

// ---- SVG ----

/// One named series of `(x, y)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChartKind {
    Line,
    Scatter,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Plain SVG line or scatter chart with axis ticks and a legend.
pub fn svg_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], kind: ChartKind) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 55.0);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pad = (y1 - y0) * 0.05;
    let (y0, y1) = (y0 - pad, y1 + pad);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#444"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            top + ph,
            top + ph + 4.0,
            top + ph + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{py:.2}" x2="{left}" y2="{py:.2}" stroke="#444"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            left - 4.0,
            left - 6.0,
            py + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<(f64, f64)> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| (sx(x), sy(y)))
            .collect();
        if kind == ChartKind::Line && coords.len() > 1 {
            let path: Vec<String> = coords.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                path.join(" ")
            );
        }
        for (x, y) in &coords {
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 10.0 + 16.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{:.2}" width="10" height="10" fill="{color}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            ly - 8.0,
            lx + 14.0,
            ly + 1.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

type Rows = Vec<BTreeMap<String, String>>;

fn read_rows(path: &Path) -> Result<Rows> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    r.records()
        .map(|row| {
            let row = row?;
            Ok(headers.iter().zip(row.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn num(row: &BTreeMap<String, String>, col: &str) -> f64 {
    row.get(col).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
}

/// Groups rows into series keyed by the joined `key_cols`.
fn series_from(rows: &Rows, key_cols: &[&str], x: &str, y: &str) -> Vec<Series> {
    let mut by: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for row in rows {
        let key: Vec<&str> = key_cols.iter().map(|c| row.get(*c).map(String::as_str).unwrap_or("")).collect();
        by.entry(key.join(" ")).or_default().push((num(row, x), num(row, y)));
    }
    by.into_iter().map(|(name, points)| Series { name, points }).collect()
}

/// Renders an SVG for every known CSV present in `dir`.
pub fn render_svgs(dir: &Path) -> Result<Vec<PathBuf>> {
    struct Spec {
        csv: &'static str,
        svg: &'static str,
        title: &'static str,
        keys: &'static [&'static str],
        x: &'static str,
        y: &'static str,
        kind: ChartKind,
    }
    const SPECS: [Spec; 6] = [
        Spec {
            csv: "layer_gap.csv",
            svg: "layer_gap.svg",
            title: "Activation gap per layer",
            keys: &["stage"],
            x: "layer",
            y: "gap_percent",
            kind: ChartKind::Line,
        },
        Spec {
            csv: "similarity.csv",
            svg: "similarity.svg",
            title: "Cosine similarity to the reference language",
            keys: &["stage", "source", "language"],
            x: "layer",
            y: "mean_cosine",
            kind: ChartKind::Line,
        },
        Spec {
            csv: "correlation_points.csv",
            svg: "correlation.svg",
            title: "Activation difference vs accuracy",
            keys: &["benchmark"],
            x: "x",
            y: "accuracy",
            kind: ChartKind::Scatter,
        },
        Spec {
            csv: "toy_loss.csv",
            svg: "toy_loss.svg",
            title: "Toy model training loss",
            keys: &[],
            x: "epoch",
            y: "loss",
            kind: ChartKind::Line,
        },
        Spec {
            csv: "align_loss.csv",
            svg: "align_loss.svg",
            title: "Alignment loss",
            keys: &[],
            x: "step",
            y: "loss",
            kind: ChartKind::Line,
        },
        Spec {
            csv: "eval.csv",
            svg: "eval.svg",
            title: "Multiple-choice accuracy",
            keys: &["stage", "scoring_mode"],
            x: "language_index",
            y: "accuracy",
            kind: ChartKind::Scatter,
        },
    ];
    let mut out = Vec::new();
    for spec in &SPECS {
        let path = dir.join(spec.csv);
        if !path.exists() {
            continue;
        }
        let mut rows = read_rows(&path)?;
        if spec.x == "language_index" {
            let langs: std::collections::BTreeSet<String> =
                rows.iter().filter_map(|r| r.get("language").cloned()).collect();
            for r in &mut rows {
                let i = langs.iter().position(|l| Some(l) == r.get("language")).unwrap_or(0);
                r.insert("language_index".into(), i.to_string());
            }
        }
        let mut series = series_from(&rows, spec.keys, spec.x, spec.y);
        if spec.keys.is_empty() {
            for s in &mut series {
                s.name = spec.y.to_string();
            }
        }
        let svg = svg_chart(spec.title, spec.x, spec.y, &series, spec.kind);
        let p = dir.join(spec.svg);
        std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
        out.push(p);
    }
    Ok(out)
}
