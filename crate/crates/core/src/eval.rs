//! Multiple-choice log-likelihood evaluation.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::AdaptedModel;
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::toy::{Corpus, ToyModelParams};

/// Log-probabilities below this (including `-inf`) are clamped to it.
pub const LOG_PROB_FLOOR: f64 = -1e9;

/// Anything that predicts a distribution over the next token.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;
    /// Natural-log probabilities of every vocabulary entry after `context`.
    fn next_token_log_probs(&self, context: &[u32]) -> Result<Vec<f64>>;
}

impl LanguageModel for ToyModelParams {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn next_token_log_probs(&self, context: &[u32]) -> Result<Vec<f64>> {
        ToyModelParams::next_token_log_probs(self, context)
    }
}

/// An adapted model with its adapter deltas folded into the weights.
pub fn merged_model(adapted: &AdaptedModel) -> Result<ToyModelParams> {
    let mut m = adapted.base.clone();
    m.blocks = adapted.effective_blocks()?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McqItem {
    pub language: String,
    pub prompt_tokens: Vec<u32>,
    pub choices: Vec<Vec<u32>>,
    pub gold_index: usize,
    /// Exemplars placed before the prompt.
    #[serde(default)]
    pub shots: Vec<Vec<u32>>,
}

impl McqItem {
    pub fn validate(&self) -> Result<()> {
        if self.choices.len() < 2 {
            return Err(Error::invalid("an item needs at least two choices"));
        }
        if self.gold_index >= self.choices.len() {
            return Err(Error::invalid(format!(
                "gold_index {} out of range for {} choices",
                self.gold_index,
                self.choices.len()
            )));
        }
        if self.choices.iter().any(Vec::is_empty) {
            return Err(Error::invalid("empty choice"));
        }
        Ok(())
    }

    fn context(&self) -> Vec<u32> {
        let mut c: Vec<u32> = self.shots.iter().flatten().copied().collect();
        c.extend_from_slice(&self.prompt_tokens);
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    RawLoglik,
    #[default]
    PerTokenNormalized,
}

impl ScoringMode {
    pub const ALL: [ScoringMode; 2] = [ScoringMode::RawLoglik, ScoringMode::PerTokenNormalized];

    pub fn label(self) -> &'static str {
        match self {
            Self::RawLoglik => "raw_loglik",
            Self::PerTokenNormalized => "per_token_normalized",
        }
    }
}

impl std::str::FromStr for ScoringMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_loglik" | "raw" => Ok(Self::RawLoglik),
            "per_token_normalized" | "normalized" => Ok(Self::PerTokenNormalized),
            _ => Err(Error::invalid(format!("unknown scoring mode '{s}'"))),
        }
    }
}

/// Score of each choice: summed log-probability of its tokens given the
/// shots and prompt, divided by its length in normalized mode.
pub fn score_choices(model: &dyn LanguageModel, item: &McqItem, mode: ScoringMode) -> Result<Vec<f64>> {
    item.validate()?;
    let base = item.context();
    let v = model.vocab_size();
    let mut scores = Vec::with_capacity(item.choices.len());
    for choice in &item.choices {
        let mut ctx = base.clone();
        let mut total = 0.0;
        for &t in choice {
            if t as usize >= v {
                return Err(Error::invalid(format!("token {t} outside vocabulary of {v}")));
            }
            let lp = model.next_token_log_probs(&ctx)?;
            total += lp[t as usize].max(LOG_PROB_FLOOR);
            ctx.push(t);
        }
        scores.push(match mode {
            ScoringMode::RawLoglik => total,
            ScoringMode::PerTokenNormalized => total / choice.len() as f64,
        });
    }
    Ok(scores)
}

/// Index of the best score (lowest index among equals) and whether a tie occurred.
pub fn pick_choice(scores: &[f64]) -> (usize, bool) {
    let mut best = 0;
    let mut tie = false;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
            tie = false;
        } else if s == scores[best] {
            tie = true;
        }
    }
    (best, tie)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageAccuracy {
    pub correct: usize,
    pub items: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scoring_mode: ScoringMode,
    pub item_count: usize,
    /// Items whose best score was shared by several choices.
    pub ties: usize,
    pub per_language: BTreeMap<String, LanguageAccuracy>,
}

pub fn evaluate(model: &dyn LanguageModel, items: &[McqItem], mode: ScoringMode) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::invalid("evaluation needs at least one item"));
    }
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut ties = 0;
    for item in items {
        let scores = score_choices(model, item, mode)?;
        let (pick, tie) = pick_choice(&scores);
        ties += tie as usize;
        let e = counts.entry(item.language.clone()).or_default();
        e.0 += (pick == item.gold_index) as usize;
        e.1 += 1;
    }
    Ok(EvalReport {
        scoring_mode: mode,
        item_count: items.len(),
        ties,
        per_language: counts
            .into_iter()
            .map(|(lang, (correct, n))| {
                (
                    lang,
                    LanguageAccuracy {
                        correct,
                        items: n,
                        accuracy: 100.0 * correct as f64 / n as f64,
                    },
                )
            })
            .collect(),
    })
}

/// Reports for every scoring mode.
pub fn evaluate_all_modes(model: &dyn LanguageModel, items: &[McqItem]) -> Result<Vec<EvalReport>> {
    ScoringMode::ALL.iter().map(|&m| evaluate(model, items, m)).collect()
}

pub fn write_items(path: &Path, items: &[McqItem]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_items(path: &Path) -> Result<Vec<McqItem>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: McqItem = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        item.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ItemGenConfig {
    pub items_per_language: usize,
    pub n_choices: usize,
    pub prompt_length: usize,
    pub answer_length: usize,
    pub shots: usize,
    pub seed: u64,
}

impl Default for ItemGenConfig {
    fn default() -> Self {
        Self {
            items_per_language: 200,
            n_choices: 4,
            prompt_length: 4,
            answer_length: 3,
            shots: 2,
            seed: 0,
        }
    }
}

/// Continuation items cut from the training corpus: the gold choice is the
/// true continuation, distractors are continuations taken from other lines.
pub fn generate_items(corpus: &Corpus, cfg: &ItemGenConfig) -> Result<Vec<McqItem>> {
    if cfg.n_choices < 2 || cfg.prompt_length == 0 || cfg.answer_length == 0 {
        return Err(Error::invalid("item generation needs >= 2 choices and non-empty prompts and answers"));
    }
    let span = cfg.prompt_length + cfg.answer_length;
    let mut rng = Rng::new(cfg.seed);
    let mut items = Vec::new();
    for lang in &corpus.config.languages {
        let lines: Vec<&[u32]> = corpus
            .training_for(lang)
            .filter(|l| l.tokens.len() >= span)
            .map(|l| l.tokens.as_slice())
            .collect();
        if lines.len() < cfg.n_choices {
            return Err(Error::invalid(format!(
                "language '{lang}' has too few lines of length {span} for {} choices",
                cfg.n_choices
            )));
        }
        let cut = |rng: &mut Rng| -> &[u32] {
            let line = lines[rng.below(lines.len())];
            let start = rng.below(line.len() - span + 1);
            &line[start..start + span]
        };
        for _ in 0..cfg.items_per_language {
            let window = cut(&mut rng);
            let gold: Vec<u32> = window[cfg.prompt_length..].to_vec();
            let mut choices = vec![gold.clone()];
            let mut attempts = 0;
            while choices.len() < cfg.n_choices {
                let d = cut(&mut rng)[cfg.prompt_length..].to_vec();
                attempts += 1;
                if !choices.contains(&d) || attempts > 1000 {
                    choices.push(d);
                }
            }
            let gold_index = rng.below(cfg.n_choices);
            choices.swap(0, gold_index);
            let shots = (0..cfg.shots).map(|_| cut(&mut rng).to_vec()).collect();
            items.push(McqItem {
                language: lang.clone(),
                prompt_tokens: window[..cfg.prompt_length].to_vec(),
                choices,
                gold_index,
                shots,
            });
        }
    }
    Ok(items)
}

/// Reads a `language,accuracy` CSV into a map.
pub fn load_accuracy_fixture(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_accuracy_csv(&text, path)
}

pub(crate) fn parse_accuracy_csv(text: &str, path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(li), Some(ai)) = (col("language"), col("accuracy")) else {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected columns 'language' and 'accuracy'".into(),
        });
    };
    let mut out = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let lang = row.get(li).unwrap_or("").trim().to_string();
        let acc: f64 = row
            .get(ai)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| bad(format!("accuracy: {e}")))?;
        if lang.is_empty() {
            return Err(bad("empty language".into()));
        }
        if !(0.0..=100.0).contains(&acc) {
            return Err(bad(format!("accuracy {acc} outside [0, 100]")));
        }
        if out.insert(lang.clone(), acc).is_some() {
            return Err(bad(format!("duplicate language '{lang}'")));
        }
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "no accuracy rows".into(),
        });
    }
    Ok(out)
}

pub fn write_accuracy_fixture(path: &Path, acc: &BTreeMap<String, f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["language", "accuracy"])?;
    for (lang, a) in acc {
        w.write_record([lang.as_str(), &a.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
