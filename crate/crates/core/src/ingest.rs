//! Activation records, phrase selection and parallel phrase assembly.
//!
//! A record is one phrase's per-token activation trace for a single
//! `(layer, feature, language)` triple. English records drive selection:
//! a feature keeps the phrases whose peak exceeds a fraction of the
//! feature's overall peak, and translations are attached by
//! `phrase_ordinal`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD_FRACTION: f64 = 0.8;
pub const WINDOW_RADIUS: usize = 3;
pub const REFERENCE_LANGUAGE: &str = "en";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationRecord {
    pub layer: u32,
    pub feature_index: u32,
    pub language: String,
    pub tokens: Vec<String>,
    pub token_activations: Vec<f64>,
    pub max_value: f64,
    pub phrase_ordinal: u64,
}

/// Upper bounds enforced on record coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordLimits {
    pub max_layer: u32,
    pub max_feature_index: u32,
}

impl Default for RecordLimits {
    fn default() -> Self {
        Self {
            max_layer: 25,
            max_feature_index: 16_383,
        }
    }
}

impl ActivationRecord {
    /// Builds a record and fills `max_value` from the activations.
    pub fn new(
        layer: u32,
        feature_index: u32,
        language: impl Into<String>,
        tokens: Vec<String>,
        token_activations: Vec<f64>,
        phrase_ordinal: u64,
    ) -> Self {
        let max_value = token_activations
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        Self {
            layer,
            feature_index,
            language: language.into(),
            tokens,
            token_activations,
            max_value,
            phrase_ordinal,
        }
    }

    pub fn validate(&self, limits: &RecordLimits) -> std::result::Result<(), String> {
        if self.tokens.is_empty() {
            return Err("record has no tokens".into());
        }
        if self.tokens.len() != self.token_activations.len() {
            return Err(format!(
                "{} tokens but {} activations",
                self.tokens.len(),
                self.token_activations.len()
            ));
        }
        if self.layer > limits.max_layer {
            return Err(format!("layer {} exceeds {}", self.layer, limits.max_layer));
        }
        if self.feature_index > limits.max_feature_index {
            return Err(format!(
                "feature_index {} exceeds {}",
                self.feature_index, limits.max_feature_index
            ));
        }
        if self.language.trim().is_empty() {
            return Err("empty language tag".into());
        }
        if let Some(i) = self
            .token_activations
            .iter()
            .position(|a| !a.is_finite() || *a < 0.0)
        {
            return Err(format!("activation {i} is negative or non-finite"));
        }
        let max = self
            .token_activations
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !self.max_value.is_finite() || (self.max_value - max).abs() > 1e-9 {
            return Err(format!(
                "max_value {} disagrees with activations max {}",
                self.max_value, max
            ));
        }
        Ok(())
    }

    /// Index of the most activated token, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, a) in self.token_activations.iter().enumerate() {
            if *a > self.token_activations[best] {
                best = i;
            }
        }
        best
    }

    fn group_key(&self) -> (u32, u32) {
        (self.layer, self.feature_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordFormat {
    Jsonl,
    Csv,
}

impl RecordFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Jsonl,
        }
    }
}

impl std::str::FromStr for RecordFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(Error::invalid(format!("unknown record format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParseReport {
    pub records: Vec<ActivationRecord>,
    pub errors: Vec<RowError>,
}

const CSV_HEADER: [&str; 7] = [
    "layer",
    "feature_index",
    "language",
    "tokens",
    "token_activations",
    "max_value",
    "phrase_ordinal",
];

/// Reads records, rejecting invalid rows individually.
pub fn parse_records(path: &Path, format: RecordFormat) -> Result<ParseReport> {
    parse_records_with(path, format, &RecordLimits::default())
}

pub fn parse_records_with(
    path: &Path,
    format: RecordFormat,
    limits: &RecordLimits,
) -> Result<ParseReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        RecordFormat::Jsonl => parse_jsonl(BufReader::new(file), path, limits),
        RecordFormat::Csv => parse_csv(file, path, limits),
    }
}

fn parse_jsonl(reader: impl BufRead, path: &Path, limits: &RecordLimits) -> Result<ParseReport> {
    let mut report = ParseReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ActivationRecord>(&line) {
            Ok(rec) => match rec.validate(limits) {
                Ok(()) => report.records.push(rec),
                Err(message) => report.errors.push(RowError {
                    line: lineno,
                    message,
                }),
            },
            Err(e) => report.errors.push(RowError {
                line: lineno,
                message: e.to_string(),
            }),
        }
    }
    Ok(report)
}

fn parse_csv(file: File, path: &Path, limits: &RecordLimits) -> Result<ParseReport> {
    let mut report = ParseReport::default();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: e.to_string(),
            })
        }
    };
    if headers.is_empty() {
        return Ok(report);
    }
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }
    for (i, row) in rdr.records().enumerate() {
        // header is line 1
        let lineno = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                report.errors.push(RowError {
                    line: lineno,
                    message: e.to_string(),
                });
                continue;
            }
        };
        match csv_row_to_record(&row) {
            Ok(rec) => match rec.validate(limits) {
                Ok(()) => report.records.push(rec),
                Err(message) => report.errors.push(RowError {
                    line: lineno,
                    message,
                }),
            },
            Err(message) => report.errors.push(RowError {
                line: lineno,
                message,
            }),
        }
    }
    Ok(report)
}

fn csv_row_to_record(row: &csv::StringRecord) -> std::result::Result<ActivationRecord, String> {
    if row.len() != CSV_HEADER.len() {
        return Err(format!("expected {} fields, got {}", CSV_HEADER.len(), row.len()));
    }
    let field = |i: usize| row.get(i).unwrap_or_default();
    let parse_num = |i: usize| -> std::result::Result<f64, String> {
        field(i)
            .trim()
            .parse::<f64>()
            .map_err(|e| format!("{}: {e}", CSV_HEADER[i]))
    };
    Ok(ActivationRecord {
        layer: field(0)
            .trim()
            .parse()
            .map_err(|e| format!("layer: {e}"))?,
        feature_index: field(1)
            .trim()
            .parse()
            .map_err(|e| format!("feature_index: {e}"))?,
        language: field(2).to_string(),
        tokens: serde_json::from_str(field(3)).map_err(|e| format!("tokens: {e}"))?,
        token_activations: serde_json::from_str(field(4))
            .map_err(|e| format!("token_activations: {e}"))?,
        max_value: parse_num(5)?,
        phrase_ordinal: field(6)
            .trim()
            .parse()
            .map_err(|e| format!("phrase_ordinal: {e}"))?,
    })
}

pub fn write_records(path: &Path, records: &[ActivationRecord], format: RecordFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    match format {
        RecordFormat::Jsonl => {
            for r in records {
                serde_json::to_writer(&mut out, r)?;
                out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
        }
        RecordFormat::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(CSV_HEADER)?;
            for r in records {
                w.write_record([
                    r.layer.to_string(),
                    r.feature_index.to_string(),
                    r.language.clone(),
                    serde_json::to_string(&r.tokens)?,
                    serde_json::to_string(&r.token_activations)?,
                    format!("{:?}", r.max_value),
                    r.phrase_ordinal.to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// How a phrase's peak is compared against the feature's peak.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// `max_value > fraction × feature_max`
    #[default]
    Exceeding,
    /// `max_value >= fraction × feature_max`, for sensitivity checks.
    AtLeast,
}

/// Keeps the records of one `(layer, feature)` group whose peak clears
/// `threshold_fraction` of the group's highest peak.
pub fn select_top_phrases(
    group: &[ActivationRecord],
    threshold_fraction: f64,
) -> Result<Vec<&ActivationRecord>> {
    select_top_phrases_with(group, threshold_fraction, ThresholdRule::Exceeding)
}

pub fn select_top_phrases_with(
    group: &[ActivationRecord],
    threshold_fraction: f64,
    rule: ThresholdRule,
) -> Result<Vec<&ActivationRecord>> {
    let first = group
        .first()
        .ok_or_else(|| Error::invalid("select_top_phrases on an empty group"))?;
    if !(threshold_fraction > 0.0 && threshold_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "threshold_fraction {threshold_fraction} outside (0, 1]"
        )));
    }
    if group.iter().any(|r| r.group_key() != first.group_key()) {
        return Err(Error::invalid("select_top_phrases group mixes (layer, feature) keys"));
    }
    let feature_max = group
        .iter()
        .map(|r| r.max_value)
        .fold(f64::NEG_INFINITY, f64::max);
    let cut = threshold_fraction * feature_max;
    Ok(group
        .iter()
        .filter(|r| match rule {
            ThresholdRule::Exceeding => r.max_value > cut,
            ThresholdRule::AtLeast => r.max_value >= cut,
        })
        .collect())
}

/// The ±3-token context around a record's most activated token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhraseWindow<'a> {
    pub source: &'a ActivationRecord,
    /// First token index of the window in the source record.
    pub start: usize,
    /// One past the last token index.
    pub end: usize,
    /// Position of the argmax token inside the window.
    pub argmax_offset: usize,
}

impl<'a> PhraseWindow<'a> {
    pub fn window_tokens(&self) -> &'a [String] {
        &self.source.tokens[self.start..self.end]
    }

    pub fn window_activations(&self) -> &'a [f64] {
        &self.source.token_activations[self.start..self.end]
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn mean_activation(&self) -> f64 {
        let w = self.window_activations();
        w.iter().sum::<f64>() / w.len() as f64
    }
}

/// Window of indices `[argmax - 3, argmax + 3]`, clipped to the sequence.
pub fn extract_window(record: &ActivationRecord) -> PhraseWindow<'_> {
    let argmax = record.argmax();
    let start = argmax.saturating_sub(WINDOW_RADIUS);
    let end = (argmax + WINDOW_RADIUS + 1).min(record.tokens.len());
    PhraseWindow {
        source: record,
        start,
        end,
        argmax_offset: argmax - start,
    }
}

/// `{stride · i | i in 0..n}`, requiring `n · stride <= total`.
pub fn sample_feature_indices(total: usize, stride: usize, n: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    match n.checked_mul(stride) {
        Some(span) if span <= total => Ok((0..n).map(|i| i * stride).collect()),
        _ => Err(Error::invalid(format!(
            "{n} indices at stride {stride} overflow a range of {total}"
        ))),
    }
}

/// Translations of the same reference phrases for one `(layer, feature)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelPhraseSet {
    pub layer: u32,
    pub feature_index: u32,
    /// language → records ordered by `phrase_ordinal`.
    pub phrases: BTreeMap<String, Vec<ActivationRecord>>,
}

impl ParallelPhraseSet {
    pub fn windows(&self, language: &str) -> Vec<PhraseWindow<'_>> {
        self.phrases
            .get(language)
            .map(|rs| rs.iter().map(extract_window).collect())
            .unwrap_or_default()
    }

    pub fn records(&self) -> impl Iterator<Item = &ActivationRecord> {
        self.phrases.values().flatten()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssembleReport {
    pub sets: Vec<ParallelPhraseSet>,
    /// Non-reference records without a reference phrase of the same ordinal.
    pub dropped: BTreeMap<String, usize>,
}

impl AssembleReport {
    pub fn dropped_total(&self) -> usize {
        self.dropped.values().sum()
    }
}

fn record_order(a: &ActivationRecord, b: &ActivationRecord) -> std::cmp::Ordering {
    a.phrase_ordinal
        .cmp(&b.phrase_ordinal)
        .then_with(|| a.max_value.total_cmp(&b.max_value))
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| {
            a.token_activations
                .iter()
                .zip(&b.token_activations)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
}

/// Groups records by `(layer, feature)` with `"en"` as the reference.
pub fn assemble_parallel(records: &[ActivationRecord]) -> AssembleReport {
    assemble_parallel_with(records, REFERENCE_LANGUAGE)
}

pub fn assemble_parallel_with(records: &[ActivationRecord], reference: &str) -> AssembleReport {
    let mut groups: BTreeMap<(u32, u32), BTreeMap<String, Vec<ActivationRecord>>> = BTreeMap::new();
    for r in records {
        groups
            .entry(r.group_key())
            .or_default()
            .entry(r.language.clone())
            .or_default()
            .push(r.clone());
    }
    let mut report = AssembleReport::default();
    for ((layer, feature_index), mut by_lang) in groups {
        let reference_ordinals: std::collections::BTreeSet<u64> = by_lang
            .get(reference)
            .map(|rs| rs.iter().map(|r| r.phrase_ordinal).collect())
            .unwrap_or_default();
        for (lang, recs) in by_lang.iter_mut() {
            if lang != reference {
                let before = recs.len();
                recs.retain(|r| reference_ordinals.contains(&r.phrase_ordinal));
                let dropped = before - recs.len();
                if dropped > 0 {
                    *report.dropped.entry(lang.clone()).or_default() += dropped;
                }
            }
            recs.sort_by(record_order);
        }
        by_lang.retain(|_, recs| !recs.is_empty());
        if !by_lang.is_empty() {
            report.sets.push(ParallelPhraseSet {
                layer,
                feature_index,
                phrases: by_lang,
            });
        }
    }
    report
}

/// Applies top-phrase selection to the reference language of every
/// `(layer, feature)` group and keeps translations of the surviving
/// ordinals.
pub fn select_parallel(
    records: &[ActivationRecord],
    reference: &str,
    threshold_fraction: f64,
    rule: ThresholdRule,
) -> Result<AssembleReport> {
    let mut assembled = assemble_parallel_with(records, reference);
    for set in &mut assembled.sets {
        let Some(reference_recs) = set.phrases.get(reference) else {
            continue;
        };
        let kept: std::collections::BTreeSet<u64> =
            select_top_phrases_with(reference_recs, threshold_fraction, rule)?
                .into_iter()
                .map(|r| r.phrase_ordinal)
                .collect();
        for recs in set.phrases.values_mut() {
            recs.retain(|r| kept.contains(&r.phrase_ordinal));
        }
        set.phrases.retain(|_, recs| !recs.is_empty());
    }
    assembled.sets.retain(|s| !s.phrases.is_empty());
    Ok(assembled)
}

/// High-resource vs medium-to-low-resource language partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageGroups {
    pub high: Vec<String>,
    pub medlow: Vec<String>,
    pub reference: String,
}

impl Default for LanguageGroups {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        Self {
            high: s(&["en", "zh", "ru", "es", "it"]),
            medlow: s(&["id", "ca", "mr", "ml", "hi"]),
            reference: REFERENCE_LANGUAGE.to_string(),
        }
    }
}
