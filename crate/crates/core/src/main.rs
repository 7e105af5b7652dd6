use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lingap::align::{attach_adapters, run_alignment, AdaptedModel};
use lingap::analysis::RatioConvention;
use lingap::config::{PipelineConfig, OUTPUT_DIR_ENV};
use lingap::eval::{evaluate_all_modes, generate_items, load_accuracy_fixture, merged_model, read_items, ScoringMode};
use lingap::fixtures::{export_fixtures, load_ratio_csv};
use lingap::ingest::{parse_records, select_parallel, write_records, ActivationRecord, RecordFormat};
use lingap::pipeline::{
    correlate_with_points, fixture_correlations, residual_phrases, run_pipeline, train_layer_saes,
    write_analysis, write_pipeline_outputs, write_sae_log, RecordAnalyzer,
};
use lingap::report::{self, gap_reduction};
use lingap::sae::SaeParams;
use lingap::toy::{generate_corpus, phrase_activation_records, train_toy_model, Corpus, ToyModelParams};

#[derive(Parser)]
#[command(name = "lingap", version, about = "Cross-lingual SAE activation-gap analysis and alignment tuning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (JSON); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect the configuration.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Validate activation records and keep the selected parallel phrase sets.
    Ingest(IngestArgs),
    /// Train one SAE per layer on a toy model's residual stream.
    SaeTrain(SaeTrainArgs),
    /// Activation gap, ratio and similarity analysis of activation records.
    Analyze(AnalyzeArgs),
    /// Pearson correlation of activation ratios against benchmark accuracy.
    Correlate(CorrelateArgs),
    /// Generate the synthetic corpus and train the toy model.
    ToyTrain(ToyTrainArgs),
    /// Activation-alignment tuning with low-rank adapters.
    Align(AlignArgs),
    /// Multiple-choice evaluation of a toy model.
    Eval(EvalArgs),
    /// Render SVG charts for the CSVs in a directory and hash them.
    Report(ReportArgs),
    /// Full toy run: corpus, model, SAEs, analysis, alignment, evaluation.
    Pipeline,
    /// Shipped reference tables.
    Fixtures {
        #[command(subcommand)]
        action: FixturesAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the resolved configuration with every default.
    Show,
}

#[derive(Subcommand)]
enum FixturesAction {
    /// Write the fixture CSVs into the output directory.
    Export,
}

#[derive(Args)]
struct ToyInputs {
    /// Toy model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Corpus JSONL written by toy-train.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Adapter checkpoint applied on top of the model.
    #[arg(long)]
    adapters: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    /// Activation record files (JSONL or CSV by extension).
    #[arg(long, num_args = 1..)]
    records: Vec<PathBuf>,
    #[command(flatten)]
    toy: ToyInputs,
    /// SAE checkpoints used to capture records from the toy model.
    #[arg(long, num_args = 1..)]
    sae: Vec<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct SaeTrainArgs {
    #[command(flatten)]
    toy: ToyInputs,
    /// Layers to train (defaults to the configured layers).
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Activation record files.
    #[arg(long, num_args = 1..)]
    records: Vec<PathBuf>,
    /// Toy model inputs enabling residual similarity.
    #[command(flatten)]
    toy: ToyInputs,
    /// Stage label written into the reports.
    #[arg(long, default_value = "pre")]
    stage: String,
}

#[derive(Args)]
struct CorrelateArgs {
    /// CSV with language and mean_ratio columns (defaults to the shipped ratio table).
    #[arg(long)]
    ratios: Option<PathBuf>,
    /// CSV with language and accuracy columns (defaults to the three shipped benchmarks).
    #[arg(long)]
    accuracy: Option<PathBuf>,
    /// Benchmark label for --accuracy.
    #[arg(long)]
    benchmark: Option<String>,
    /// difference (1 - ratio) or ratio.
    #[arg(long)]
    convention: Option<RatioConvention>,
}

#[derive(Args)]
struct ToyTrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct AlignArgs {
    #[command(flatten)]
    toy: ToyInputs,
    /// SAE checkpoint of the target layer.
    #[arg(long)]
    sae: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    target_layer: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    sample_count: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    toy: ToyInputs,
    /// Item JSONL; generated from the corpus when absent.
    #[arg(long)]
    items: Option<PathBuf>,
    /// Scoring mode printed as the headline (both are always written).
    #[arg(long)]
    mode: Option<ScoringMode>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding the CSVs (defaults to the output directory).
    #[arg(long)]
    dir: Option<PathBuf>,
}

/// Failures that map to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

struct Ctx {
    config: PipelineConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let mut config = match &common.config {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        if common.seed.is_some() {
            config.seed = common.seed;
        }
        config.validate().context("invalid configuration")?;
        let out = common.out.clone().unwrap_or_else(|| config.output_dir());
        Ok(Self { config, out })
    }

    fn resolved(&self) -> PipelineConfig {
        self.config.resolved()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn manifest(&self, command: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        report::write_manifest(&self.out, command, &self.config, inputs, outputs)?;
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli.common)?;
    if let Command::Config { action: ConfigAction::Show } = cli.command {
        println!("{}", ctx.resolved().to_pretty_json()?);
        return Ok(());
    }
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    match cli.command {
        Command::Config { .. } => Ok(()),
        Command::Fixtures { action: FixturesAction::Export } => {
            let files = export_fixtures(&ctx.out)?;
            for f in &files {
                println!("{}", f.display());
            }
            ctx.manifest("fixtures-export", &[], &files)
        }
        Command::Ingest(a) => ingest(&ctx, a),
        Command::SaeTrain(a) => sae_train(&ctx, a),
        Command::Analyze(a) => analyze(&ctx, a),
        Command::Correlate(a) => correlate(&ctx, a),
        Command::ToyTrain(a) => toy_train(&ctx, a),
        Command::Align(a) => align(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Report(a) => report_cmd(&ctx, a),
        Command::Pipeline => pipeline(&ctx),
    }
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| usage(format!("--{flag} is required")))
}

fn load_model(toy: &ToyInputs) -> Result<AdaptedModel> {
    let path = need(&toy.model, "model")?;
    let base = ToyModelParams::load(path).with_context(|| format!("loading model {}", path.display()))?;
    match &toy.adapters {
        Some(a) => Ok(AdaptedModel::load_adapters(base, a).with_context(|| format!("loading adapters {}", a.display()))?),
        None => Ok(AdaptedModel {
            base,
            adapters: Vec::new(),
        }),
    }
}

fn load_corpus(toy: &ToyInputs) -> Result<Corpus> {
    let path = need(&toy.corpus, "corpus")?;
    Corpus::read_jsonl(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn toy_inputs(toy: &ToyInputs) -> Vec<PathBuf> {
    [&toy.model, &toy.corpus, &toy.adapters].into_iter().flatten().cloned().collect()
}

/// SAE checkpoints keyed by layer, taken from a `sae_layer<N>.json` file name.
fn load_saes(paths: &[PathBuf]) -> Result<BTreeMap<usize, SaeParams>> {
    paths
        .iter()
        .map(|p| {
            let layer = sae_layer_of(p).ok_or_else(|| usage(format!("{}: expected a sae_layer<N>.json name", p.display())))?;
            Ok((layer, SaeParams::load(p).with_context(|| format!("loading SAE {}", p.display()))?))
        })
        .collect()
}

fn sae_layer_of(path: &Path) -> Option<usize> {
    path.file_stem()?.to_str()?.strip_prefix("sae_layer")?.parse().ok()
}

fn read_all_records(paths: &[PathBuf]) -> Result<Vec<ActivationRecord>> {
    let mut all = Vec::new();
    for p in paths {
        let report = parse_records(p, RecordFormat::from_path(p)).with_context(|| format!("reading {}", p.display()))?;
        for e in &report.errors {
            eprintln!("{}:{}: {}", p.display(), e.line, e.message);
        }
        all.extend(report.records);
    }
    Ok(all)
}

fn ingest(ctx: &Ctx, a: IngestArgs) -> Result<()> {
    let cfg = ctx.resolved();
    let threshold = a.threshold.unwrap_or(cfg.ingest.threshold_fraction);
    let record_files = if a.records.is_empty() { cfg.ingest.records.clone() } else { a.records.clone() };
    let mut inputs = record_files.clone();
    let mut records = read_all_records(&record_files)?;
    if !a.sae.is_empty() {
        let adapted = load_model(&a.toy)?;
        let corpus = load_corpus(&a.toy)?;
        let blocks = adapted.effective_blocks()?;
        for (layer, sae) in load_saes(&a.sae)? {
            records.extend(phrase_activation_records(&adapted.base, &blocks, &corpus, &sae, layer, None)?);
        }
        inputs.extend(toy_inputs(&a.toy));
        inputs.extend(a.sae.iter().cloned());
    } else if record_files.is_empty() {
        return Err(usage("ingest needs --records or --model/--corpus/--sae"));
    }
    if records.is_empty() {
        bail!("no valid activation records");
    }
    let groups = if a.sae.is_empty() { cfg.record_groups() } else { cfg.toy_groups() };
    let selected = select_parallel(&records, &groups.reference, threshold, cfg.ingest.threshold_rule)?;
    let kept: Vec<ActivationRecord> = selected.sets.iter().flat_map(|s| s.records().cloned()).collect();
    let out = ctx.path("parallel.jsonl");
    write_records(&out, &kept, RecordFormat::Jsonl)?;
    let summary = ctx.path("ingest_summary.csv");
    let mut w = csv::Writer::from_path(&summary)?;
    w.write_record(["layer", "feature_index", "language", "phrases"])?;
    for s in &selected.sets {
        for (lang, recs) in &s.phrases {
            w.write_record([s.layer.to_string(), s.feature_index.to_string(), lang.clone(), recs.len().to_string()])?;
        }
    }
    w.flush()?;
    println!(
        "{} records in, {} parallel sets, {} records kept, {} dropped without reference",
        records.len(),
        selected.sets.len(),
        kept.len(),
        selected.dropped_total()
    );
    ctx.manifest("ingest", &inputs, &[out, summary])
}

fn sae_train(ctx: &Ctx, a: SaeTrainArgs) -> Result<()> {
    let mut cfg = ctx.resolved();
    if let Some(s) = a.steps {
        cfg.sae.train.steps = s;
    }
    let layers = if a.layers.is_empty() { cfg.sae_layers() } else { a.layers.clone() };
    let model = load_model(&a.toy)?.base;
    if let Some(l) = layers.iter().find(|l| **l >= model.n_layers()) {
        bail!("layer {l} outside a model with {} layers", model.n_layers());
    }
    let corpus = load_corpus(&a.toy)?;
    let saes = train_layer_saes(&model, &corpus, &layers, &cfg.sae.train)?;
    let mut outputs = Vec::new();
    for (layer, sae) in &saes {
        let p = ctx.path(&format!("sae_layer{layer}.json"));
        sae.params.save(&p, Some(&cfg.sae.train))?;
        outputs.push(p);
        let p = ctx.path(&format!("sae_layer{layer}_log.csv"));
        write_sae_log(&p, &sae.log)?;
        outputs.push(p);
        if let Some(last) = sae.log.last() {
            println!("layer {layer}: mse {:.6} mean L0 {:.2}", last.mse, last.mean_l0);
        }
    }
    ctx.manifest("sae-train", &toy_inputs(&a.toy), &outputs)
}

fn analyze(ctx: &Ctx, a: AnalyzeArgs) -> Result<()> {
    let cfg = ctx.resolved();
    let record_files = if a.records.is_empty() { cfg.ingest.records.clone() } else { a.records.clone() };
    if record_files.is_empty() {
        return Err(usage("analyze needs --records"));
    }
    let records = read_all_records(&record_files)?;
    if records.is_empty() {
        bail!("no activation records to analyze");
    }
    let toy = a.toy.model.is_some();
    let groups = if toy { cfg.toy_groups() } else { cfg.record_groups() };
    let mut analyzer = RecordAnalyzer::new(&cfg.ingest, &groups);
    analyzer.add(&records)?;
    let residual = if toy {
        let adapted = load_model(&a.toy)?;
        residual_phrases(&adapted.base, &adapted.effective_blocks()?, &load_corpus(&a.toy)?)?
    } else {
        Vec::new()
    };
    let bundle = analyzer.finish(&residual)?;
    let outputs = write_analysis(&ctx.out, &[(a.stage.as_str(), &bundle)])?;
    for r in &bundle.gap.reports {
        println!("layer {:>2}: gap {:.2}%", r.layer, r.gap_percent);
    }
    for (layer, flag) in &bundle.gap.flagged {
        eprintln!("layer {layer}: {flag:?}");
    }
    let mut inputs = record_files;
    inputs.extend(toy_inputs(&a.toy));
    ctx.manifest("analyze", &inputs, &outputs)
}

fn correlate(ctx: &Ctx, a: CorrelateArgs) -> Result<()> {
    let cfg = ctx.resolved();
    let convention = a.convention.unwrap_or(cfg.eval.convention);
    let (results, points) = match (&a.ratios, &a.accuracy) {
        (None, None) => fixture_correlations(convention)?,
        (ratios, accuracy) => {
            let ratio_map = match ratios {
                Some(p) => load_ratio_csv(p)?,
                None => lingap::fixtures::load_fixture("table8")?
                    .ratio_stats()
                    .map(|m| m.iter().map(|(l, (mean, _))| (l.clone(), *mean)).collect())
                    .unwrap_or_default(),
            };
            let accuracies: Vec<(String, BTreeMap<String, f64>)> = match accuracy {
                Some(p) => {
                    let name = a.benchmark.clone().unwrap_or_else(|| {
                        p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
                    });
                    vec![(name, load_accuracy_fixture(p)?)]
                }
                None => lingap::pipeline::BENCHMARK_FIXTURES
                    .iter()
                    .map(|(name, id)| {
                        let rows = lingap::fixtures::load_fixture(id)?;
                        Ok((name.to_string(), rows.per_language().cloned().unwrap_or_default()))
                    })
                    .collect::<Result<_>>()?,
            };
            let mut results = Vec::new();
            let mut points = Vec::new();
            for (name, acc) in &accuracies {
                let (r, p) = correlate_with_points(name, &ratio_map, acc, convention)?;
                results.push(r);
                points.extend(p);
            }
            (results, points)
        }
    };
    let out = ctx.path("correlation.csv");
    report::write_correlations(&out, &results, convention)?;
    let pts = ctx.path("correlation_points.csv");
    report::write_correlation_points(&pts, &points)?;
    for r in &results {
        println!("{}: r = {:.4} (n = {})", r.benchmark, r.r, r.n);
    }
    let inputs: Vec<PathBuf> = [a.ratios, a.accuracy].into_iter().flatten().collect();
    ctx.manifest("correlate", &inputs, &[out, pts])
}

fn toy_train(ctx: &Ctx, a: ToyTrainArgs) -> Result<()> {
    let mut cfg = ctx.resolved();
    if let Some(e) = a.epochs {
        cfg.toy.train.epochs = e;
    }
    let corpus = generate_corpus(&cfg.toy.corpus)?;
    let out = train_toy_model(&corpus, cfg.toy.model, &cfg.toy.train)?;
    let paths = [ctx.path("corpus.jsonl"), ctx.path("model.json"), ctx.path("toy_loss.csv")];
    corpus.write_jsonl(&paths[0])?;
    out.params.save(&paths[1])?;
    report::write_series(&paths[2], "epoch", "loss", &out.loss_curve)?;
    for lang in &cfg.toy.corpus.languages {
        println!("{lang}: perplexity {:.4}", out.params.perplexity(corpus.training_for(lang))?);
    }
    ctx.manifest("toy-train", &[], &paths)
}

fn align(ctx: &Ctx, a: AlignArgs) -> Result<()> {
    let mut cfg = ctx.resolved();
    let ac = &mut cfg.align;
    if let Some(v) = a.alpha {
        ac.alpha = v;
    }
    if let Some(v) = a.iterations {
        ac.iterations = v;
    }
    if let Some(v) = a.target_layer {
        ac.target_layer = v;
        ac.tuned_layers.1 = ac.tuned_layers.1.min(v);
    }
    if let Some(v) = a.learning_rate {
        ac.learning_rate = v;
    }
    if let Some(v) = a.sample_count {
        ac.sample_count = v;
    }
    let model = load_model(&a.toy)?.base;
    let corpus = load_corpus(&a.toy)?;
    let sae = SaeParams::load(&a.sae).with_context(|| format!("loading SAE {}", a.sae.display()))?;
    if let Some(l) = sae_layer_of(&a.sae).filter(|l| *l != cfg.align.target_layer) {
        bail!("SAE is for layer {l} but the target layer is {}", cfg.align.target_layer);
    }
    let groups = cfg.toy_groups();
    let mut adapted = attach_adapters(&model, &cfg.align)?;
    let outcome = run_alignment(&mut adapted, &corpus, &sae, &groups, &cfg.align)?;
    let paths = [
        ctx.path("adapters.json"),
        ctx.path("alignment.csv"),
        ctx.path("alignment_summary.csv"),
        ctx.path("align_loss.csv"),
    ];
    adapted.save_adapters(&paths[0])?;
    outcome.write_csv(&paths[1], &groups.reference)?;
    report::write_alignment_summary(&paths[2], &outcome, &groups.reference)?;
    report::write_series(&paths[3], "step", "loss", &outcome.loss_trajectory)?;
    print_alignment(&outcome, &groups.reference);
    let mut inputs = toy_inputs(&a.toy);
    inputs.push(a.sae.clone());
    ctx.manifest("align", &inputs, &paths)
}

fn print_alignment(o: &lingap::align::AlignmentOutcome, reference: &str) {
    for (lang, v) in &o.metrics.improvement_percent {
        println!("{lang}: improvement {v:.2}%");
    }
    println!("{reference}: retention {:.2}%", o.metrics.retention_percent);
    if let (Some(a), Some(b)) = (o.gap_pre, o.gap_post) {
        println!(
            "layer {} gap {a:.2}% -> {b:.2}% ({:.1}% reduction)",
            o.layer,
            gap_reduction(o).unwrap_or(f64::NAN)
        );
    }
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let cfg = ctx.resolved();
    let mode = a.mode.unwrap_or(cfg.eval.mode);
    let adapted = load_model(&a.toy)?;
    let items = match &a.items {
        Some(p) => read_items(p)?,
        None => generate_items(&load_corpus(&a.toy)?, &cfg.eval.items)?,
    };
    if items.is_empty() {
        bail!("no evaluation items");
    }
    let stage = if adapted.adapters.is_empty() { "base" } else { "adapted" };
    let reports = evaluate_all_modes(&merged_model(&adapted)?, &items)?;
    let out = ctx.path("eval.csv");
    report::write_eval(&out, &[(stage, &reports)])?;
    for r in reports.iter().filter(|r| r.scoring_mode == mode) {
        for (lang, acc) in &r.per_language {
            println!("{lang}: {:.2}% ({}/{}, {})", acc.accuracy, acc.correct, acc.items, mode.label());
        }
    }
    let mut inputs = toy_inputs(&a.toy);
    inputs.extend(a.items.clone());
    ctx.manifest("eval", &inputs, &[out])
}

fn report_cmd(ctx: &Ctx, a: ReportArgs) -> Result<()> {
    let dir = a.dir.clone().unwrap_or_else(|| ctx.out.clone());
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let svgs = report::render_svgs(&dir)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv" || x == "svg"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no reports in {}", dir.display());
    }
    for f in &files {
        println!("{}", f.display());
    }
    eprintln!("{} charts rendered", svgs.len());
    report::write_manifest(&dir, "report", &ctx.config, &[], &files)?;
    Ok(())
}

fn pipeline(ctx: &Ctx) -> Result<()> {
    let run = run_pipeline(&ctx.config)?;
    write_pipeline_outputs(&run, &ctx.out)?;
    let target = run.outcome.layer as u32;
    for (stage, b) in [("pre", &run.pre), ("post", &run.post)] {
        if let Some(r) = b.gap.at_layer(target) {
            println!("{stage}: layer {target} gap {:.2}%", r.gap_percent);
        }
    }
    print_alignment(&run.outcome, &run.groups.reference);
    println!("outputs in {}", ctx.out.display());
    Ok(())
}
