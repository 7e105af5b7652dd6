//! End-to-end orchestration: record analysis, the toy run and its reports.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::align::{attach_adapters, run_alignment, AdaptedModel, AlignmentOutcome};
use crate::analysis::{
    activation_gap, activation_ratio, correlate_ratios, layer_similarity, mean_activation_per_index,
    mean_pool, CorrelationResult, FeatureActivationStats, GapAnalysis, PooledPhrase, RatioAnalysis,
    RatioConvention, SimilarityProfile, VectorSource,
};
use crate::config::{IngestSection, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_all_modes, generate_items, merged_model, EvalReport, McqItem};
use crate::fixtures::load_fixture;
use crate::ingest::{select_parallel, ActivationRecord, LanguageGroups};
use crate::numerics::Matrix;
use crate::report::{self, CorrelationPoint};
use crate::sae::{train_sae, SaeParams, SaeStepLog};
use crate::toy::{
    capture_with, generate_corpus, phrase_activation_records, train_toy_model, Block, Corpus, ToyModelParams,
};

/// Benchmarks paired with the accuracy fixtures they correlate against.
pub const BENCHMARK_FIXTURES: [(&str, &str); 3] = [("ARC-C", "table3"), ("HellaSwag", "table4"), ("MMLU", "table5")];

/// Gap, ratio and similarity analytics over one set of activation records.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisBundle {
    pub stats: Vec<FeatureActivationStats>,
    pub gap: GapAnalysis,
    pub ratios: RatioAnalysis,
    pub similarity: Vec<SimilarityProfile>,
    pub record_count: usize,
    pub selected_count: usize,
}

/// Accumulates records layer by layer so large captures need not be held at once.
pub struct RecordAnalyzer<'a> {
    ingest: &'a IngestSection,
    groups: &'a LanguageGroups,
    stats: Vec<FeatureActivationStats>,
    pooled: Vec<PooledPhrase>,
    record_count: usize,
    selected_count: usize,
}

impl<'a> RecordAnalyzer<'a> {
    pub fn new(ingest: &'a IngestSection, groups: &'a LanguageGroups) -> Self {
        Self {
            ingest,
            groups,
            stats: Vec::new(),
            pooled: Vec::new(),
            record_count: 0,
            selected_count: 0,
        }
    }

    fn sampled(&self, feature: u32) -> bool {
        let f = feature as usize;
        let stride = self.ingest.stride.max(1);
        f % stride == 0 && self.ingest.n_indices.is_none_or(|n| f / stride < n)
    }

    pub fn add(&mut self, records: &[ActivationRecord]) -> Result<()> {
        let mut by_layer: BTreeMap<u32, Vec<ActivationRecord>> = BTreeMap::new();
        for r in records.iter().filter(|r| self.sampled(r.feature_index)) {
            by_layer.entry(r.layer).or_default().push(r.clone());
        }
        for (layer, recs) in by_layer {
            self.record_count += recs.len();
            self.pooled.extend(feature_vectors(&recs, layer, self.ingest));
            let selected = select_parallel(
                &recs,
                &self.groups.reference,
                self.ingest.threshold_fraction,
                self.ingest.threshold_rule,
            )?;
            let kept: Vec<ActivationRecord> = selected.sets.iter().flat_map(|s| s.records().cloned()).collect();
            self.selected_count += kept.len();
            self.stats.extend(mean_activation_per_index(&kept, self.ingest.scalar));
        }
        Ok(())
    }

    /// `extra` phrases (e.g. pooled residuals) are profiled alongside the SAE vectors.
    pub fn finish(mut self, extra: &[PooledPhrase]) -> Result<AnalysisBundle> {
        if self.record_count == 0 {
            return Err(Error::invalid("no activation records to analyze"));
        }
        self.stats.sort_by(|a, b| {
            (a.layer, a.feature_index, &a.language).cmp(&(b.layer, b.feature_index, &b.language))
        });
        let gap = activation_gap(&self.stats, self.groups);
        let ratios = activation_ratio(&self.stats, &self.groups.reference)?;
        let mut similarity = profiles(&self.pooled, &self.groups.reference, VectorSource::SaeFeatures)?;
        similarity.extend(profiles(extra, &self.groups.reference, VectorSource::Residual)?);
        Ok(AnalysisBundle {
            stats: self.stats,
            gap,
            ratios,
            similarity,
            record_count: self.record_count,
            selected_count: self.selected_count,
        })
    }
}

pub fn analyze_records(
    records: &[ActivationRecord],
    ingest: &IngestSection,
    groups: &LanguageGroups,
) -> Result<AnalysisBundle> {
    let mut a = RecordAnalyzer::new(ingest, groups);
    a.add(records)?;
    a.finish(&[])
}

/// Per phrase, the vector of phrase scalars over the layer's sampled features.
fn feature_vectors(records: &[ActivationRecord], layer: u32, ingest: &IngestSection) -> Vec<PooledPhrase> {
    let features: BTreeSet<u32> = records.iter().map(|r| r.feature_index).collect();
    let slot: BTreeMap<u32, usize> = features.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    let mut phrases: BTreeMap<(u64, &str), Vec<f64>> = BTreeMap::new();
    for r in records {
        let v = phrases
            .entry((r.phrase_ordinal, r.language.as_str()))
            .or_insert_with(|| vec![0.0; features.len()]);
        v[slot[&r.feature_index]] = ingest.scalar.of(r);
    }
    phrases
        .into_iter()
        .map(|((ordinal, language), vector)| PooledPhrase {
            layer: layer as usize,
            phrase_ordinal: ordinal,
            language: language.to_string(),
            vector,
        })
        .collect()
}

fn profiles(phrases: &[PooledPhrase], reference: &str, source: VectorSource) -> Result<Vec<SimilarityProfile>> {
    if phrases.is_empty() {
        return Ok(Vec::new());
    }
    let n_layers = phrases.iter().map(|p| p.layer).max().unwrap_or(0) + 1;
    let languages: BTreeSet<&str> = phrases
        .iter()
        .map(|p| p.language.as_str())
        .filter(|l| *l != reference)
        .collect();
    languages
        .into_iter()
        .map(|l| layer_similarity(phrases, l, reference, n_layers, source))
        .collect()
}

/// Mean-pooled residual vector of every parallel phrase at every layer.
pub fn residual_phrases(model: &ToyModelParams, blocks: &[Block], corpus: &Corpus) -> Result<Vec<PooledPhrase>> {
    let mut out = Vec::new();
    for line in &corpus.phrases {
        let Some(ordinal) = line.phrase_ordinal else {
            continue;
        };
        for (layer, res) in capture_with(model, blocks, &line.tokens)?.iter().enumerate() {
            let rows: Vec<Vec<f64>> = (0..res.rows()).map(|r| res.row(r).to_vec()).collect();
            out.push(PooledPhrase {
                layer,
                phrase_ordinal: ordinal,
                language: line.language.clone(),
                vector: mean_pool(&rows)?,
            });
        }
    }
    Ok(out)
}

/// Residual rows of every training token at `layers`.
pub fn residual_rows(
    model: &ToyModelParams,
    blocks: &[Block],
    corpus: &Corpus,
    layers: &[usize],
) -> Result<BTreeMap<usize, Matrix>> {
    let mut data: BTreeMap<usize, Vec<f64>> = layers.iter().map(|l| (*l, Vec::new())).collect();
    for line in &corpus.training {
        let caps = capture_with(model, blocks, &line.tokens)?;
        for (l, buf) in data.iter_mut() {
            let m = caps
                .get(*l)
                .ok_or_else(|| Error::invalid(format!("layer {l} outside the toy model")))?;
            buf.extend_from_slice(m.data());
        }
    }
    let d = model.d_model();
    data.into_iter()
        .map(|(l, buf)| Ok((l, Matrix::from_vec(buf.len() / d, d, buf)?)))
        .collect()
}

pub struct TrainedSae {
    pub params: SaeParams,
    pub log: Vec<SaeStepLog>,
}

/// One SAE per layer on the model's own training residuals.
pub fn train_layer_saes(
    model: &ToyModelParams,
    corpus: &Corpus,
    layers: &[usize],
    cfg: &crate::sae::SaeTrainConfig,
) -> Result<BTreeMap<usize, TrainedSae>> {
    let rows = residual_rows(model, &model.blocks, corpus, layers)?;
    rows.into_iter()
        .map(|(l, x)| {
            let out = train_sae(&x, cfg)?;
            Ok((l, TrainedSae { params: out.params, log: out.log }))
        })
        .collect()
}

/// Record analysis of the toy model at every SAE layer plus residual similarity.
pub fn analyze_toy(
    model: &ToyModelParams,
    blocks: &[Block],
    corpus: &Corpus,
    saes: &BTreeMap<usize, SaeParams>,
    ingest: &IngestSection,
    groups: &LanguageGroups,
) -> Result<AnalysisBundle> {
    let mut a = RecordAnalyzer::new(ingest, groups);
    for (layer, sae) in saes {
        a.add(&phrase_activation_records(model, blocks, corpus, sae, *layer, None)?)?;
    }
    a.finish(&residual_phrases(model, blocks, corpus)?)
}

/// Correlations between fixture activation ratios and fixture accuracies.
pub fn fixture_correlations(convention: RatioConvention) -> Result<(Vec<CorrelationResult>, Vec<CorrelationPoint>)> {
    let stats = load_fixture("table8")?;
    let ratios: BTreeMap<String, f64> = stats
        .ratio_stats()
        .ok_or_else(|| Error::invalid("table8 is not a ratio table"))?
        .iter()
        .map(|(l, (m, _))| (l.clone(), *m))
        .collect();
    let mut results = Vec::new();
    let mut points = Vec::new();
    for (name, id) in BENCHMARK_FIXTURES {
        let acc = load_fixture(id)?;
        let acc = acc
            .per_language()
            .ok_or_else(|| Error::invalid(format!("{id} is not an accuracy table")))?;
        let (r, p) = correlate_with_points(name, &ratios, acc, convention)?;
        results.push(r);
        points.extend(p);
    }
    Ok((results, points))
}

pub fn correlate_with_points(
    benchmark: &str,
    ratios: &BTreeMap<String, f64>,
    accuracy: &BTreeMap<String, f64>,
    convention: RatioConvention,
) -> Result<(CorrelationResult, Vec<CorrelationPoint>)> {
    let r = correlate_ratios(benchmark, ratios, accuracy, convention)?;
    let points = r
        .languages
        .iter()
        .map(|l| CorrelationPoint {
            benchmark: benchmark.to_string(),
            language: l.clone(),
            x: match convention {
                RatioConvention::Difference => 1.0 - ratios[l],
                RatioConvention::Ratio => ratios[l],
            },
            accuracy: accuracy[l],
        })
        .collect();
    Ok((r, points))
}

/// Everything produced by one toy pipeline run.
pub struct PipelineRun {
    pub config: PipelineConfig,
    pub groups: LanguageGroups,
    pub corpus: Corpus,
    pub model: ToyModelParams,
    pub toy_loss: Vec<f64>,
    pub saes: BTreeMap<usize, TrainedSae>,
    pub pre: AnalysisBundle,
    pub adapted: AdaptedModel,
    pub outcome: AlignmentOutcome,
    pub post: AnalysisBundle,
    pub items: Vec<McqItem>,
    pub eval_pre: Vec<EvalReport>,
    pub eval_post: Vec<EvalReport>,
    pub correlations: Vec<CorrelationResult>,
    pub correlation_points: Vec<CorrelationPoint>,
}

/// corpus → toy model → SAEs → analysis → alignment → analysis → evaluation.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineRun> {
    config.validate()?;
    let cfg = config.resolved();
    let groups = cfg.toy_groups();
    let corpus = generate_corpus(&cfg.toy.corpus)?;
    let trained = train_toy_model(&corpus, cfg.toy.model, &cfg.toy.train)?;
    let model = trained.params;
    let saes = train_layer_saes(&model, &corpus, &cfg.sae_layers(), &cfg.sae.train)?;
    let sae_params: BTreeMap<usize, SaeParams> = saes.iter().map(|(l, s)| (*l, s.params.clone())).collect();
    let pre = analyze_toy(&model, &model.blocks, &corpus, &sae_params, &cfg.ingest, &groups)?;

    let mut adapted = attach_adapters(&model, &cfg.align)?;
    let outcome = run_alignment(&mut adapted, &corpus, &sae_params[&cfg.align.target_layer], &groups, &cfg.align)?;
    let post_blocks = adapted.effective_blocks()?;
    let post = analyze_toy(&model, &post_blocks, &corpus, &sae_params, &cfg.ingest, &groups)?;

    let items = generate_items(&corpus, &cfg.eval.items)?;
    let eval_pre = evaluate_all_modes(&model, &items)?;
    let eval_post = evaluate_all_modes(&merged_model(&adapted)?, &items)?;
    let (correlations, correlation_points) = fixture_correlations(cfg.eval.convention)?;
    Ok(PipelineRun {
        config: config.clone(),
        groups,
        corpus,
        model,
        toy_loss: trained.loss_curve,
        saes,
        pre,
        adapted,
        outcome,
        post,
        items,
        eval_pre,
        eval_post,
        correlations,
        correlation_points,
    })
}

/// Writes the analysis CSVs of one or two stages into `dir`.
pub fn write_analysis(dir: &Path, stages: &[(&str, &AnalysisBundle)]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let p = dir.join("layer_gap.csv");
    let gaps: Vec<(&str, &GapAnalysis)> = stages.iter().map(|(s, b)| (*s, &b.gap)).collect();
    report::write_layer_gap(&p, &gaps)?;
    out.push(p);
    let p = dir.join("similarity.csv");
    let sims: Vec<(&str, &[SimilarityProfile])> = stages.iter().map(|(s, b)| (*s, b.similarity.as_slice())).collect();
    report::write_similarity(&p, &sims)?;
    out.push(p);
    for (i, (stage, b)) in stages.iter().enumerate() {
        let name = if i == 0 { "ratios.csv".to_string() } else { format!("ratios_{stage}.csv") };
        let p = dir.join(name);
        report::write_ratios(&p, &b.ratios)?;
        out.push(p);
    }
    Ok(out)
}

/// Writes every report, checkpoint and the manifest of a pipeline run.
pub fn write_pipeline_outputs(run: &PipelineRun, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = run.config.resolved();
    let reference = run.groups.reference.as_str();
    let mut out = write_analysis(dir, &[("pre", &run.pre), ("post", &run.post)])?;

    let p = dir.join("alignment.csv");
    run.outcome.write_csv(&p, reference)?;
    out.push(p);
    let p = dir.join("alignment_summary.csv");
    report::write_alignment_summary(&p, &run.outcome, reference)?;
    out.push(p);
    let p = dir.join("align_loss.csv");
    report::write_series(&p, "step", "loss", &run.outcome.loss_trajectory)?;
    out.push(p);
    let p = dir.join("toy_loss.csv");
    report::write_series(&p, "epoch", "loss", &run.toy_loss)?;
    out.push(p);
    for (layer, sae) in &run.saes {
        let p = dir.join(format!("sae_layer{layer}_log.csv"));
        write_sae_log(&p, &sae.log)?;
        out.push(p);
    }
    let p = dir.join("eval.csv");
    report::write_eval(&p, &[("pre", &run.eval_pre), ("post", &run.eval_post)])?;
    out.push(p);
    let p = dir.join("correlation.csv");
    report::write_correlations(&p, &run.correlations, cfg.eval.convention)?;
    out.push(p);
    let p = dir.join("correlation_points.csv");
    report::write_correlation_points(&p, &run.correlation_points)?;
    out.push(p);

    let p = dir.join("corpus.jsonl");
    run.corpus.write_jsonl(&p)?;
    out.push(p);
    let p = dir.join("items.jsonl");
    crate::eval::write_items(&p, &run.items)?;
    out.push(p);
    let p = dir.join("model.json");
    run.model.save(&p)?;
    out.push(p);
    for (layer, sae) in &run.saes {
        let p = dir.join(format!("sae_layer{layer}.json"));
        sae.params.save(&p, Some(&cfg.sae.train))?;
        out.push(p);
    }
    let p = dir.join("adapters.json");
    run.adapted.save_adapters(&p)?;
    out.push(p);
    if cfg.output.emit_svg {
        out.extend(report::render_svgs(dir)?);
    }
    report::write_manifest(dir, "pipeline", &run.config, &[], &out)?;
    Ok(out)
}

/// `step,mse,mean_l0`
pub fn write_sae_log(path: &Path, log: &[SaeStepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    w.write_record(["step", "mse", "mean_l0"])?;
    for s in log {
        w.write_record([s.step.to_string(), report::fmt6(s.mse), report::fmt6(s.mean_l0)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
