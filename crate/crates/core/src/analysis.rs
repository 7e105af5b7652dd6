//! Similarity and activation-gap analytics.
//!
//! Group means weight every member language equally. A language's mean at
//! a layer is the average, over the feature indices it has statistics for,
//! of its per-index mean phrase activation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{extract_window, ActivationRecord, LanguageGroups};
use crate::numerics::{dot, l2_norm};

/// Element-wise mean of equal-length vectors.
pub fn mean_pool(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::invalid("mean_pool over an empty list"))?;
    let d = first.len();
    let mut acc = vec![0.0; d];
    for v in vectors {
        if v.len() != d {
            return Err(Error::Length {
                op: "mean_pool",
                left: v.len(),
                right: d,
            });
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Cosine similarity clamped to `[-1, 1]`. Zero-norm inputs are undefined.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Length {
            op: "cosine",
            left: u.len(),
            right: v.len(),
        });
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Undefined("cosine of a zero-norm vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Which vectors a similarity profile was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorSource {
    #[default]
    Residual,
    SaeFeatures,
}

impl VectorSource {
    pub fn label(self) -> &'static str {
        match self {
            Self::Residual => "residual",
            Self::SaeFeatures => "sae_features",
        }
    }
}

/// One phrase's pooled vector at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledPhrase {
    pub layer: usize,
    pub phrase_ordinal: u64,
    pub language: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityProfile {
    pub language: String,
    pub source: VectorSource,
    /// `None` where the layer had no usable pairs.
    pub per_layer_cosine: Vec<Option<f64>>,
    pub pair_counts: Vec<usize>,
    /// Pairs dropped because one side had zero norm.
    pub skipped: usize,
}

/// Mean over phrases of `cosine(reference phrase, translated phrase)` per layer.
pub fn layer_similarity(
    phrases: &[PooledPhrase],
    language: &str,
    reference: &str,
    n_layers: usize,
    source: VectorSource,
) -> Result<SimilarityProfile> {
    let mut reference_vecs: BTreeMap<(usize, u64), &Vec<f64>> = BTreeMap::new();
    for p in phrases.iter().filter(|p| p.language == reference) {
        reference_vecs.insert((p.layer, p.phrase_ordinal), &p.vector);
    }
    let mut sums = vec![0.0; n_layers];
    let mut counts = vec![0usize; n_layers];
    let mut skipped = 0;
    let mut targets: Vec<&PooledPhrase> =
        phrases.iter().filter(|p| p.language == language).collect();
    targets.sort_by_key(|p| (p.layer, p.phrase_ordinal));
    for p in targets {
        if p.layer >= n_layers {
            return Err(Error::invalid(format!(
                "phrase at layer {} but only {n_layers} layers",
                p.layer
            )));
        }
        let Some(r) = reference_vecs.get(&(p.layer, p.phrase_ordinal)) else {
            continue;
        };
        match cosine(r, &p.vector) {
            Ok(c) => {
                sums[p.layer] += c;
                counts[p.layer] += 1;
            }
            Err(Error::Undefined(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let per_layer_cosine = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    Ok(SimilarityProfile {
        language: language.to_string(),
        source,
        per_layer_cosine,
        pair_counts: counts,
        skipped,
    })
}

/// Scalar that stands for one phrase in gap and ratio analytics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhraseScalar {
    #[default]
    MaxValue,
    WindowMean,
}

impl PhraseScalar {
    pub fn of(self, record: &ActivationRecord) -> f64 {
        match self {
            Self::MaxValue => record.max_value,
            Self::WindowMean => extract_window(record).mean_activation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureActivationStats {
    pub layer: u32,
    pub feature_index: u32,
    pub language: String,
    pub mean_activation: f64,
    pub phrase_count: usize,
}

/// Mean phrase activation per `(layer, feature, language)`, sorted by key.
pub fn mean_activation_per_index(
    records: &[ActivationRecord],
    scalar: PhraseScalar,
) -> Vec<FeatureActivationStats> {
    let mut acc: BTreeMap<(u32, u32, &str), (f64, usize)> = BTreeMap::new();
    // sum in a canonical order so the result does not depend on input order
    let mut sorted: Vec<&ActivationRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (a.layer, a.feature_index, &a.language, a.phrase_ordinal)
            .cmp(&(b.layer, b.feature_index, &b.language, b.phrase_ordinal))
            .then_with(|| scalar.of(a).total_cmp(&scalar.of(b)))
    });
    for r in sorted {
        let e = acc
            .entry((r.layer, r.feature_index, r.language.as_str()))
            .or_insert((0.0, 0));
        e.0 += scalar.of(r);
        e.1 += 1;
    }
    acc.into_iter()
        .map(|((layer, feature_index, language), (sum, n))| FeatureActivationStats {
            layer,
            feature_index,
            language: language.to_string(),
            mean_activation: sum / n as f64,
            phrase_count: n,
        })
        .collect()
}

/// Per-layer, per-language mean over feature indices.
pub fn language_means(stats: &[FeatureActivationStats]) -> BTreeMap<u32, BTreeMap<String, f64>> {
    let mut acc: BTreeMap<u32, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    let mut sorted: Vec<&FeatureActivationStats> = stats.iter().collect();
    sorted.sort_by(|a, b| {
        (a.layer, &a.language, a.feature_index).cmp(&(b.layer, &b.language, b.feature_index))
    });
    for s in sorted {
        let e = acc
            .entry(s.layer)
            .or_default()
            .entry(s.language.clone())
            .or_insert((0.0, 0));
        e.0 += s.mean_activation;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(layer, langs)| {
            (
                layer,
                langs
                    .into_iter()
                    .map(|(l, (s, n))| (l, s / n as f64))
                    .collect(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerGapReport {
    pub layer: u32,
    pub mean_high: f64,
    pub mean_medlow: f64,
    pub gap_percent: f64,
}

impl LayerGapReport {
    pub fn new(layer: u32, mean_high: f64, mean_medlow: f64) -> Self {
        Self {
            layer,
            mean_high,
            mean_medlow,
            gap_percent: gap_percent(mean_high, mean_medlow),
        }
    }
}

/// `(high - medlow) / high × 100`.
#[inline]
pub fn gap_percent(mean_high: f64, mean_medlow: f64) -> f64 {
    (mean_high - mean_medlow) / mean_high * 100.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GapFlag {
    ZeroHighMean,
    MissingHighGroup,
    MissingMedlowGroup,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GapAnalysis {
    pub reports: Vec<LayerGapReport>,
    pub flagged: Vec<(u32, GapFlag)>,
}

impl GapAnalysis {
    pub fn at_layer(&self, layer: u32) -> Option<&LayerGapReport> {
        self.reports.iter().find(|r| r.layer == layer)
    }
}

fn group_mean(langs: &BTreeMap<String, f64>, members: &[String]) -> Option<f64> {
    let vals: Vec<f64> = members.iter().filter_map(|m| langs.get(m)).copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// ΔA per layer from per-index statistics.
pub fn activation_gap(stats: &[FeatureActivationStats], groups: &LanguageGroups) -> GapAnalysis {
    let mut out = GapAnalysis::default();
    for (layer, langs) in language_means(stats) {
        let high = group_mean(&langs, &groups.high);
        let medlow = group_mean(&langs, &groups.medlow);
        match (high, medlow) {
            (None, _) => out.flagged.push((layer, GapFlag::MissingHighGroup)),
            (_, None) => out.flagged.push((layer, GapFlag::MissingMedlowGroup)),
            (Some(h), Some(_)) if h == 0.0 => out.flagged.push((layer, GapFlag::ZeroHighMean)),
            (Some(h), Some(m)) => out.reports.push(LayerGapReport::new(layer, h, m)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    pub language: String,
    pub mean_ratio: f64,
    pub std_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioEntry {
    pub layer: u32,
    pub feature_index: u32,
    pub language: String,
    pub ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RatioAnalysis {
    pub per_language: Vec<RatioStats>,
    pub table: Vec<RatioEntry>,
    /// `(layer, feature)` pairs skipped because the reference mean was zero.
    pub excluded_zero_reference: Vec<(u32, u32)>,
}

/// Activation of each language relative to `reference` per `(layer, index)`,
/// summarised by mean and population standard deviation over all layers.
pub fn activation_ratio(stats: &[FeatureActivationStats], reference: &str) -> Result<RatioAnalysis> {
    let mut by_key: BTreeMap<(u32, u32), BTreeMap<&str, f64>> = BTreeMap::new();
    for s in stats {
        by_key
            .entry((s.layer, s.feature_index))
            .or_default()
            .insert(s.language.as_str(), s.mean_activation);
    }
    if !stats.iter().any(|s| s.language == reference) {
        return Err(Error::invalid(format!(
            "reference language {reference:?} has no statistics"
        )));
    }
    let mut out = RatioAnalysis::default();
    let mut per_lang: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for ((layer, feature_index), langs) in &by_key {
        let Some(&r) = langs.get(reference) else {
            continue;
        };
        if r == 0.0 {
            out.excluded_zero_reference.push((*layer, *feature_index));
            continue;
        }
        for (lang, v) in langs {
            if *lang == reference {
                continue;
            }
            let ratio = v / r;
            per_lang.entry(lang).or_default().push(ratio);
            out.table.push(RatioEntry {
                layer: *layer,
                feature_index: *feature_index,
                language: lang.to_string(),
                ratio,
            });
        }
    }
    out.per_language = per_lang
        .into_iter()
        .map(|(lang, rs)| {
            let n = rs.len() as f64;
            let mean = rs.iter().sum::<f64>() / n;
            let var = rs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            RatioStats {
                language: lang.to_string(),
                mean_ratio: mean,
                std_ratio: var.sqrt(),
            }
        })
        .collect();
    Ok(out)
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Length {
            op: "pearson",
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::invalid("pearson needs at least 3 points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("pearson with zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// How a language's mean activation ratio is turned into the x-axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioConvention {
    /// `1 - ratio`: shortfall relative to the reference language.
    #[default]
    Difference,
    Ratio,
}

impl std::str::FromStr for RatioConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "difference" => Ok(Self::Difference),
            "ratio" => Ok(Self::Ratio),
            other => Err(Error::invalid(format!("unknown ratio convention {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationResult {
    pub benchmark: String,
    pub r: f64,
    pub n: usize,
    pub languages: Vec<String>,
}

/// Correlates per-language ratios against accuracies over the languages
/// present in both maps.
pub fn correlate_ratios(
    benchmark: &str,
    ratios: &BTreeMap<String, f64>,
    accuracy: &BTreeMap<String, f64>,
    convention: RatioConvention,
) -> Result<CorrelationResult> {
    let languages: Vec<String> = ratios
        .keys()
        .filter(|l| accuracy.contains_key(*l))
        .cloned()
        .collect();
    let x: Vec<f64> = languages
        .iter()
        .map(|l| match convention {
            RatioConvention::Difference => 1.0 - ratios[l],
            RatioConvention::Ratio => ratios[l],
        })
        .collect();
    let y: Vec<f64> = languages.iter().map(|l| accuracy[l]).collect();
    let r = pearson(&x, &y)?;
    Ok(CorrelationResult {
        benchmark: benchmark.to_string(),
        r,
        n: languages.len(),
        languages,
    })
}

/// Languages that appear in any statistic, in sorted order.
pub fn languages_in(stats: &[FeatureActivationStats]) -> BTreeSet<String> {
    stats.iter().map(|s| s.language.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn stat(layer: u32, idx: u32, lang: &str, mean: f64) -> FeatureActivationStats {
        FeatureActivationStats {
            layer,
            feature_index: idx,
            language: lang.into(),
            mean_activation: mean,
            phrase_count: 1,
        }
    }

    fn rec(layer: u32, idx: u32, lang: &str, max: f64, ord: u64) -> ActivationRecord {
        ActivationRecord::new(layer, idx, lang, vec!["t".into()], vec![max], ord)
    }

    #[test]
    fn mean_pool_examples() {
        assert_eq!(
            mean_pool(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            vec![2.0, 3.0]
        );
        assert_eq!(mean_pool(&[vec![1.5, -2.0]]).unwrap(), vec![1.5, -2.0]);
        assert!(mean_pool(&[]).is_err());
        assert!(mean_pool(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn mean_pool_matches_scalar_loop() {
        let mut rng = Rng::new(9);
        let vs: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..12).map(|_| rng.normal()).collect())
            .collect();
        let got = mean_pool(&vs).unwrap();
        for j in 0..12 {
            let mut s = 0.0;
            for v in &vs {
                s += v[j];
            }
            assert!((got[j] - s / 100.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.70710678).abs() < 1e-8);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::Undefined(_))));
        assert!(cosine(&[1.0], &[1.0, 1.0]).is_err());
    }

    fn pooled(layer: usize, ord: u64, lang: &str, v: Vec<f64>) -> PooledPhrase {
        PooledPhrase {
            layer,
            phrase_ordinal: ord,
            language: lang.into(),
            vector: v,
        }
    }

    #[test]
    fn similarity_examples() {
        let mut phrases = Vec::new();
        for layer in 0..3 {
            phrases.push(pooled(layer, 0, "en", vec![1.0, 2.0, 3.0]));
            phrases.push(pooled(layer, 0, "ml", vec![1.0, 2.0, 3.0]));
        }
        let p = layer_similarity(&phrases, "ml", "en", 4, VectorSource::Residual).unwrap();
        assert_eq!(p.per_layer_cosine[..3], [Some(1.0), Some(1.0), Some(1.0)]);
        assert_eq!(p.per_layer_cosine[3], None);

        // two pairs at cosines 0.6 and 0.8
        let phrases = vec![
            pooled(3, 0, "en", vec![1.0, 0.0]),
            pooled(3, 0, "ml", vec![0.6, 0.8]),
            pooled(3, 1, "en", vec![1.0, 0.0]),
            pooled(3, 1, "ml", vec![0.8, 0.6]),
            pooled(3, 2, "en", vec![1.0, 0.0]),
            pooled(3, 2, "ml", vec![0.0, 0.0]),
        ];
        let p = layer_similarity(&phrases, "ml", "en", 4, VectorSource::Residual).unwrap();
        assert!((p.per_layer_cosine[3].unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(p.skipped, 1);
        assert_eq!(p.pair_counts[3], 2);
    }

    #[test]
    fn similarity_matches_brute_force_pairing() {
        let mut rng = Rng::new(41);
        let mut phrases = Vec::new();
        for layer in 0..4 {
            for ord in 0..15u64 {
                for lang in ["en", "hi"] {
                    if lang == "hi" && rng.uniform() < 0.2 {
                        continue;
                    }
                    phrases.push(pooled(layer, ord, lang, (0..6).map(|_| rng.normal()).collect()));
                }
            }
        }
        rng.shuffle(&mut phrases);
        let p = layer_similarity(&phrases, "hi", "en", 4, VectorSource::SaeFeatures).unwrap();
        for layer in 0..4 {
            let mut cs = Vec::new();
            for a in &phrases {
                for b in &phrases {
                    if a.layer == layer && b.layer == layer && a.language == "en" && b.language == "hi" && a.phrase_ordinal == b.phrase_ordinal {
                        let d: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
                        let na: f64 = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nb: f64 = b.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
                        cs.push(d / (na * nb));
                    }
                }
            }
            let want = cs.iter().sum::<f64>() / cs.len() as f64;
            assert!((p.per_layer_cosine[layer].unwrap() - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn per_index_means() {
        let out = mean_activation_per_index(
            &[rec(0, 1, "en", 2.0, 0), rec(0, 1, "en", 4.0, 1), rec(0, 2, "en", 5.0, 0)],
            PhraseScalar::MaxValue,
        );
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].mean_activation, out[0].phrase_count), (3.0, 2));
        assert_eq!((out[1].mean_activation, out[1].phrase_count), (5.0, 1));
        assert!(mean_activation_per_index(&[], PhraseScalar::MaxValue).is_empty());
    }

    #[test]
    fn per_index_means_match_group_by() {
        let mut rng = Rng::new(5);
        let langs = ["en", "zh", "ml"];
        let records: Vec<ActivationRecord> = (0..10_000)
            .map(|i| rec(rng.below(4) as u32, rng.below(25) as u32, langs[rng.below(3)], rng.uniform() * 3.0, i))
            .collect();
        let got = mean_activation_per_index(&records, PhraseScalar::MaxValue);
        let mut groups: BTreeMap<(u32, u32, String), Vec<f64>> = BTreeMap::new();
        for r in &records {
            groups.entry((r.layer, r.feature_index, r.language.clone())).or_default().push(r.max_value);
        }
        assert_eq!(got.len(), groups.len());
        for s in &got {
            let vals = &groups[&(s.layer, s.feature_index, s.language.clone())];
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert_eq!(s.phrase_count, vals.len());
            assert!((s.mean_activation - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn window_mean_scalar() {
        let mut acts = vec![0.0; 12];
        acts[0] = 7.0;
        acts[1] = 1.0;
        let r = ActivationRecord::new(0, 0, "en", vec!["t".into(); 12], acts, 0);
        assert_eq!(PhraseScalar::MaxValue.of(&r), 7.0);
        assert_eq!(PhraseScalar::WindowMean.of(&r), 2.0);
    }

    fn two_groups() -> LanguageGroups {
        LanguageGroups {
            high: vec!["en".into(), "zh".into()],
            medlow: vec!["ml".into(), "hi".into()],
            reference: "en".into(),
        }
    }

    #[test]
    fn gap_formula_anchor() {
        let stats = vec![stat(6, 0, "en", 1.0), stat(6, 0, "ml", 0.7373)];
        let groups = LanguageGroups {
            high: vec!["en".into()],
            medlow: vec!["ml".into()],
            reference: "en".into(),
        };
        let g = activation_gap(&stats, &groups);
        assert!((g.reports[0].gap_percent - 26.27).abs() < 1e-9);
        let eq = activation_gap(&[stat(0, 0, "en", 0.5), stat(0, 0, "ml", 0.5)], &groups);
        assert_eq!(eq.reports[0].gap_percent, 0.0);
    }

    #[test]
    fn gap_weights_languages_equally_and_flags() {
        let stats = vec![
            stat(0, 0, "en", 2.0),
            stat(0, 1, "en", 4.0),
            stat(0, 0, "zh", 1.0),
            stat(0, 0, "ml", 1.0),
            stat(0, 0, "hi", 0.0),
            stat(1, 0, "en", 0.0),
            stat(1, 0, "ml", 1.0),
            stat(2, 0, "en", 1.0),
            stat(3, 0, "hi", 1.0),
        ];
        let g = activation_gap(&stats, &two_groups());
        let r0 = g.at_layer(0).unwrap();
        // en mean 3, zh mean 1 → high 2; ml 1, hi 0 → medlow 0.5
        assert_eq!((r0.mean_high, r0.mean_medlow, r0.gap_percent), (2.0, 0.5, 75.0));
        assert_eq!(
            g.flagged,
            vec![
                (1, GapFlag::ZeroHighMean),
                (2, GapFlag::MissingMedlowGroup),
                (3, GapFlag::MissingHighGroup)
            ]
        );
    }

    #[test]
    fn gap_matches_direct_recomputation() {
        let mut rng = Rng::new(123);
        let groups = two_groups();
        for _ in 0..100 {
            let mut stats = Vec::new();
            for idx in 0..5 {
                for lang in ["en", "zh", "ml", "hi"] {
                    stats.push(stat(0, idx, lang, 0.01 + rng.uniform()));
                }
            }
            let g = activation_gap(&stats, &groups);
            let lang_mean = |l: &str| {
                let v: Vec<f64> = stats.iter().filter(|s| s.language == l).map(|s| s.mean_activation).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            let h = (lang_mean("en") + lang_mean("zh")) / 2.0;
            let m = (lang_mean("ml") + lang_mean("hi")) / 2.0;
            assert!((g.reports[0].gap_percent - (h - m) / h * 100.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn ratio_examples() {
        let same = vec![stat(0, 0, "en", 2.0), stat(0, 0, "zh", 2.0), stat(1, 3, "en", 0.5), stat(1, 3, "zh", 0.5)];
        let r = activation_ratio(&same, "en").unwrap();
        assert_eq!(r.per_language[0].mean_ratio, 1.0);
        assert_eq!(r.per_language[0].std_ratio, 0.0);

        let one = vec![stat(0, 0, "en", 2.0), stat(0, 0, "ml", 0.2)];
        let r = activation_ratio(&one, "en").unwrap();
        assert!((r.table[0].ratio - 0.1).abs() < 1e-15);

        assert!(activation_ratio(&[stat(0, 0, "ml", 1.0)], "en").is_err());
    }

    #[test]
    fn ratio_matches_brute_force_with_exclusions() {
        let mut rng = Rng::new(17);
        let mut stats = Vec::new();
        for layer in 0..3 {
            for idx in 0..20 {
                let en = if rng.uniform() < 0.2 { 0.0 } else { rng.uniform() };
                stats.push(stat(layer, idx, "en", en));
                for lang in ["ml", "ca"] {
                    if rng.uniform() < 0.9 {
                        stats.push(stat(layer, idx, lang, rng.uniform()));
                    }
                }
            }
        }
        let got = activation_ratio(&stats, "en").unwrap();
        let mut excluded = Vec::new();
        let mut ratios: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in stats.iter().filter(|s| s.language == "en") {
            if s.mean_activation == 0.0 {
                excluded.push((s.layer, s.feature_index));
                continue;
            }
            for t in stats.iter().filter(|t| t.language != "en" && t.layer == s.layer && t.feature_index == s.feature_index) {
                ratios.entry(t.language.clone()).or_default().push(t.mean_activation / s.mean_activation);
            }
        }
        assert_eq!(got.excluded_zero_reference, excluded);
        for rs in &got.per_language {
            let v = &ratios[&rs.language];
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            assert!((rs.mean_ratio - mean).abs() < 1e-12);
            assert!((rs.std_ratio - std).abs() < 1e-12);
        }
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.5];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Undefined(_))));
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pearson_matches_textbook_formula() {
        let mut rng = Rng::new(2);
        let x: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
        let y: Vec<f64> = x.iter().map(|v| -v + 0.3 * rng.normal()).collect();
        // r = (nΣxy − ΣxΣy) / sqrt((nΣx² − (Σx)²)(nΣy² − (Σy)²))
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|a| a * a).sum();
        let want = (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
        assert!((pearson(&x, &y).unwrap() - want).abs() <= 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assume, proptest};

        proptest! {
            #[test]
            fn gap_is_scale_invariant(seed in any::<u64>(), c in 0.001f64..1000.0) {
                let mut rng = Rng::new(seed);
                let stats: Vec<FeatureActivationStats> = ["en", "zh", "ml", "hi"]
                    .iter()
                    .flat_map(|l| (0..3).map(move |i| (l, i)))
                    .map(|(l, i)| stat(0, i, l, 0.05 + rng.uniform()))
                    .collect();
                let scaled: Vec<_> = stats.iter().map(|s| FeatureActivationStats { mean_activation: s.mean_activation * c, ..s.clone() }).collect();
                let a = activation_gap(&stats, &two_groups()).reports[0].gap_percent;
                let b = activation_gap(&scaled, &two_groups()).reports[0].gap_percent;
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            }

            #[test]
            fn pearson_affine_invariance(seed in any::<u64>(), a in -5.0f64..5.0, b in -5.0f64..5.0) {
                prop_assume!(a.abs() > 1e-6);
                let mut rng = Rng::new(seed);
                let x: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
                let y: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
                let xt: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                let r = pearson(&x, &y).unwrap();
                let rt = pearson(&xt, &y).unwrap();
                prop_assert!((r.abs() - rt.abs()).abs() <= 1e-9);
            }

            #[test]
            fn cosine_symmetric_and_scale_free(seed in any::<u64>(), c in 0.001f64..1000.0) {
                let mut rng = Rng::new(seed);
                let u: Vec<f64> = (0..7).map(|_| rng.normal()).collect();
                let v: Vec<f64> = (0..7).map(|_| rng.normal()).collect();
                let cu: Vec<f64> = u.iter().map(|x| c * x).collect();
                prop_assert!((cosine(&u, &cu).unwrap() - 1.0).abs() <= 1e-12);
                prop_assert!(cosine(&u, &v).unwrap() == cosine(&v, &u).unwrap());
            }

            #[test]
            fn mean_pool_is_linear(seed in any::<u64>(), n in 1usize..10) {
                let mut rng = Rng::new(seed);
                let a: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
                let b: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
                let summed: Vec<Vec<f64>> = a.iter().zip(&b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect();
                let pa = mean_pool(&a).unwrap();
                let pb = mean_pool(&b).unwrap();
                let ps = mean_pool(&summed).unwrap();
                for j in 0..4 {
                    prop_assert!((ps[j] - pa[j] - pb[j]).abs() <= 1e-12);
                }
            }

            #[test]
            fn analytics_ignore_record_order(seed in any::<u64>()) {
                let mut rng = Rng::new(seed);
                let langs = ["en", "zh", "ml", "hi"];
                let mut records: Vec<ActivationRecord> = (0..200)
                    .map(|i| rec(rng.below(3) as u32, rng.below(6) as u32, langs[rng.below(4)], 0.1 + rng.uniform(), i))
                    .collect();
                let a = mean_activation_per_index(&records, PhraseScalar::MaxValue);
                let ga = activation_gap(&a, &two_groups());
                rng.shuffle(&mut records);
                let b = mean_activation_per_index(&records, PhraseScalar::MaxValue);
                let gb = activation_gap(&b, &two_groups());
                prop_assert!(a == b);
                prop_assert!(ga == gb);
            }
        }
    }
}
