//! Synthetic multilingual corpus with controllable resource imbalance.
//!
//! Every language realises one shared stream of latent concepts through its
//! own disjoint slice of the vocabulary: language `i` writes concept `c` as
//! token `i · partition + c`. Concept streams follow a fixed random Markov
//! chain whose start states are Zipf-distributed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

const SUCCESSORS: usize = 3;
const SUCCESSOR_WEIGHTS: [f64; SUCCESSORS] = [0.6, 0.3, 0.1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusConfig {
    pub languages: Vec<String>,
    pub vocab_size: usize,
    pub shared_concept_count: usize,
    pub tokens_per_language: BTreeMap<String, usize>,
    pub zipf_exponent: f64,
    pub parallel_fraction: f64,
    pub phrases_per_concept: usize,
    pub phrase_length: usize,
    pub sequence_length: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            languages: vec!["en".into(), "xl".into()],
            vocab_size: 512,
            shared_concept_count: 64,
            tokens_per_language: [("en".to_string(), 20_000), ("xl".to_string(), 2_000)]
                .into_iter()
                .collect(),
            zipf_exponent: 1.0,
            parallel_fraction: 0.5,
            phrases_per_concept: 4,
            phrase_length: 7,
            sequence_length: 16,
            seed: 0,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::invalid("corpus needs at least one language"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.languages {
            if !seen.insert(l) {
                return Err(Error::invalid(format!("duplicate language {l:?}")));
            }
            match self.tokens_per_language.get(l) {
                Some(&n) if n >= 1 => {}
                _ => return Err(Error::invalid(format!("language {l:?} needs a token budget >= 1"))),
            }
        }
        if let Some(extra) = self
            .tokens_per_language
            .keys()
            .find(|k| !self.languages.contains(k))
        {
            return Err(Error::invalid(format!("budget for unknown language {extra:?}")));
        }
        if self.shared_concept_count == 0 {
            return Err(Error::invalid("shared_concept_count must be >= 1"));
        }
        if self.shared_concept_count > self.partition_size() {
            return Err(Error::invalid(format!(
                "{} concepts do not fit vocab partitions of {} tokens",
                self.shared_concept_count,
                self.partition_size()
            )));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(Error::invalid("zipf_exponent must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.parallel_fraction) {
            return Err(Error::invalid("parallel_fraction must lie in [0, 1]"));
        }
        if self.sequence_length < 2 || self.phrase_length == 0 {
            return Err(Error::invalid("sequence_length >= 2 and phrase_length >= 1 required"));
        }
        Ok(())
    }

    pub fn partition_size(&self) -> usize {
        self.vocab_size / self.languages.len().max(1)
    }

    pub fn language_index(&self, language: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == language)
    }

    pub fn token_id(&self, language_index: usize, concept: u32) -> u32 {
        (language_index * self.partition_size()) as u32 + concept
    }

    /// Readable token string, e.g. `en_12`.
    pub fn token_text(&self, token: u32) -> String {
        let p = self.partition_size() as u32;
        let lang = (token / p) as usize;
        match self.languages.get(lang) {
            Some(l) => format!("{l}_{}", token % p),
            None => format!("tok_{token}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusLine {
    pub language: String,
    pub tokens: Vec<u32>,
    pub concept_ids: Vec<u32>,
    pub phrase_ordinal: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: SyntheticCorpusConfig,
    pub training: Vec<CorpusLine>,
    /// Parallel phrases: one line per (ordinal, language).
    pub phrases: Vec<CorpusLine>,
}

struct ConceptChain {
    successors: Vec<[u32; SUCCESSORS]>,
    start_cdf: Vec<f64>,
    start_rank: Vec<u32>,
}

impl ConceptChain {
    fn new(n: usize, zipf: f64, rng: &mut Rng) -> Self {
        let mut successors = Vec::with_capacity(n);
        for _ in 0..n {
            let mut s = [0u32; SUCCESSORS];
            for slot in s.iter_mut() {
                *slot = rng.below(n) as u32;
            }
            successors.push(s);
        }
        let weights: Vec<f64> = (1..=n).map(|k| 1.0 / (k as f64).powf(zipf)).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let start_cdf = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        let mut start_rank: Vec<u32> = (0..n as u32).collect();
        rng.shuffle(&mut start_rank);
        Self {
            successors,
            start_cdf,
            start_rank,
        }
    }

    fn start(&self, rng: &mut Rng) -> u32 {
        let u = rng.uniform();
        let k = self
            .start_cdf
            .iter()
            .position(|c| u < *c)
            .unwrap_or(self.start_cdf.len() - 1);
        self.start_rank[k]
    }

    fn next(&self, c: u32, rng: &mut Rng) -> u32 {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (s, w) in self.successors[c as usize].iter().zip(SUCCESSOR_WEIGHTS) {
            acc += w;
            if u < acc {
                return *s;
            }
        }
        self.successors[c as usize][SUCCESSORS - 1]
    }

    fn walk(&self, start: u32, len: usize, rng: &mut Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut c = start;
        for _ in 0..len {
            out.push(c);
            c = self.next(c, rng);
        }
        out
    }
}

pub fn generate_corpus(cfg: &SyntheticCorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let chain = ConceptChain::new(cfg.shared_concept_count, cfg.zipf_exponent, &mut rng);

    // one shared concept stream, cut into sequences
    let longest = cfg.tokens_per_language.values().copied().max().unwrap_or(0);
    let mut stream: Vec<Vec<u32>> = Vec::new();
    let mut produced = 0;
    while produced < longest {
        let len = cfg.sequence_length.min(longest - produced);
        let start = chain.start(&mut rng);
        stream.push(chain.walk(start, len, &mut rng));
        produced += len;
    }

    let mut training = Vec::new();
    for (li, lang) in cfg.languages.iter().enumerate() {
        let mut budget = cfg.tokens_per_language[lang];
        for seq in &stream {
            if budget == 0 {
                break;
            }
            let take = seq.len().min(budget);
            let concepts = seq[..take].to_vec();
            training.push(CorpusLine {
                language: lang.clone(),
                tokens: concepts.iter().map(|&c| cfg.token_id(li, c)).collect(),
                concept_ids: concepts,
                phrase_ordinal: None,
            });
            budget -= take;
        }
    }

    let n_phrase_concepts =
        (cfg.parallel_fraction * cfg.shared_concept_count as f64).round() as usize;
    let mut concept_order: Vec<u32> = (0..cfg.shared_concept_count as u32).collect();
    rng.shuffle(&mut concept_order);
    let mut phrases = Vec::new();
    let mut ordinal = 0u64;
    for &c in &concept_order[..n_phrase_concepts] {
        for _ in 0..cfg.phrases_per_concept {
            let concepts = chain.walk(c, cfg.phrase_length, &mut rng);
            for (li, lang) in cfg.languages.iter().enumerate() {
                phrases.push(CorpusLine {
                    language: lang.clone(),
                    tokens: concepts.iter().map(|&c| cfg.token_id(li, c)).collect(),
                    concept_ids: concepts.clone(),
                    phrase_ordinal: Some(ordinal),
                });
            }
            ordinal += 1;
        }
    }

    Ok(Corpus {
        config: cfg.clone(),
        training,
        phrases,
    })
}

impl Corpus {
    pub fn token_count(&self, language: &str) -> usize {
        self.training
            .iter()
            .filter(|l| l.language == language)
            .map(|l| l.tokens.len())
            .sum()
    }

    pub fn training_for<'a>(&'a self, language: &'a str) -> impl Iterator<Item = &'a CorpusLine> + 'a {
        self.training.iter().filter(move |l| l.language == language)
    }

    /// Phrase lines for `language`, keyed by ordinal.
    pub fn phrases_for(&self, language: &str) -> BTreeMap<u64, &CorpusLine> {
        self.phrases
            .iter()
            .filter(|l| l.language == language)
            .filter_map(|l| l.phrase_ordinal.map(|o| (o, l)))
            .collect()
    }

    /// JSONL: a header line with the generating config, then one line per
    /// training sequence and parallel phrase.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let header = serde_json::json!({ "corpus_config": self.config });
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        for line in self.training.iter().chain(&self.phrases) {
            serde_json::to_writer(&mut out, line)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.into(),
            line,
            message,
        };
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty corpus file".into()))?
            .map_err(|e| Error::io(path, e))?;
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Header {
            corpus_config: SyntheticCorpusConfig,
        }
        let header: Header =
            serde_json::from_str(&header).map_err(|e| parse_err(1, e.to_string()))?;
        let config = header.corpus_config;
        config.validate()?;
        let mut training = Vec::new();
        let mut phrases = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: CorpusLine =
                serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?;
            if l.tokens.len() != l.concept_ids.len() {
                return Err(parse_err(i + 2, "tokens and concept_ids differ in length".into()));
            }
            if l.phrase_ordinal.is_some() {
                phrases.push(l);
            } else {
                training.push(l);
            }
        }
        Ok(Self {
            config,
            training,
            phrases,
        })
    }
}
