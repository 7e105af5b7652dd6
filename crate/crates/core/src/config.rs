//! Pipeline configuration document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::AlignmentConfig;
use crate::analysis::{PhraseScalar, RatioConvention};
use crate::error::{Error, Result};
use crate::eval::{ItemGenConfig, ScoringMode};
use crate::fixtures::sha256_hex;
use crate::ingest::{LanguageGroups, ThresholdRule, DEFAULT_THRESHOLD_FRACTION};
use crate::sae::SaeTrainConfig;
use crate::toy::{SyntheticCorpusConfig, ToyModelConfig, ToyTrainConfig};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "LINGAP_OUT";
pub const DEFAULT_OUTPUT_DIR: &str = "lingap-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestSection {
    /// Activation record files (JSONL or CSV).
    pub records: Vec<PathBuf>,
    pub threshold_fraction: f64,
    pub threshold_rule: ThresholdRule,
    /// Feature sampling: indices `stride · i` for `i < n_indices`.
    pub stride: usize,
    /// `None` takes every stride-th feature.
    pub n_indices: Option<usize>,
    pub scalar: PhraseScalar,
}

impl Default for IngestSection {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            threshold_fraction: DEFAULT_THRESHOLD_FRACTION,
            threshold_rule: ThresholdRule::Exceeding,
            stride: 1,
            n_indices: None,
            scalar: PhraseScalar::MaxValue,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeSection {
    pub train: SaeTrainConfig,
    /// Layers that get an SAE in the toy pipeline; `None` means every layer.
    pub layers: Option<Vec<usize>>,
}

impl Default for SaeSection {
    fn default() -> Self {
        Self {
            train: SaeTrainConfig::default(),
            layers: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub model: ToyModelConfig,
    pub corpus: SyntheticCorpusConfig,
    pub train: ToyTrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub mode: ScoringMode,
    pub items: ItemGenConfig,
    pub convention: RatioConvention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// `None` falls back to `$LINGAP_OUT`, then `lingap-out`.
    pub directory: Option<PathBuf>,
    pub emit_svg: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: None,
            emit_svg: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Overrides every section seed when set.
    pub seed: Option<u64>,
    pub ingest: IngestSection,
    /// `None` selects the high/medium-low partition for record analysis and
    /// a budget-derived partition for the toy corpus.
    pub groups: Option<LanguageGroups>,
    pub sae: SaeSection,
    pub toy: ToySection,
    pub align: AlignmentConfig,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Copy with the master seed pushed into every section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(s) = c.seed {
            c.toy.corpus.seed = s;
            c.toy.train.seed = s;
            c.sae.train.seed = s;
            c.align.seed = s;
            c.eval.items.seed = s;
        }
        c
    }

    pub fn to_pretty_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hash of the canonical JSON form.
    pub fn sha256(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output
            .directory
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    pub fn record_groups(&self) -> LanguageGroups {
        self.groups.clone().unwrap_or_default()
    }

    /// Groups for the synthetic corpus: languages with the largest budget are
    /// high-resource, the rest medium-to-low.
    pub fn toy_groups(&self) -> LanguageGroups {
        if let Some(g) = &self.groups {
            return g.clone();
        }
        let c = &self.toy.corpus;
        let budget = |l: &String| c.tokens_per_language.get(l).copied().unwrap_or(0);
        let max = c.languages.iter().map(budget).max().unwrap_or(0);
        let (high, medlow): (Vec<String>, Vec<String>) = c.languages.iter().cloned().partition(|l| budget(l) == max);
        let reference = if c.languages.iter().any(|l| l == "en") {
            "en".to_string()
        } else {
            high.first().cloned().unwrap_or_default()
        };
        LanguageGroups { high, medlow, reference }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolved();
        r.toy.corpus.validate()?;
        r.sae.train.validate()?;
        r.align.validate(r.toy.model.n_layers)?;
        if r.toy.corpus.vocab_size != r.toy.model.vocab_size {
            return Err(Error::invalid(format!(
                "toy.corpus.vocab_size {} differs from toy.model.vocab_size {}",
                r.toy.corpus.vocab_size, r.toy.model.vocab_size
            )));
        }
        if let Some(layers) = &r.sae.layers {
            if let Some(l) = layers.iter().find(|l| **l >= r.toy.model.n_layers) {
                return Err(Error::invalid(format!("sae layer {l} outside the toy model")));
            }
        }
        if r.ingest.stride == 0 {
            return Err(Error::invalid("ingest.stride must be >= 1"));
        }
        if !(r.ingest.threshold_fraction > 0.0 && r.ingest.threshold_fraction <= 1.0) {
            return Err(Error::invalid("ingest.threshold_fraction must lie in (0, 1]"));
        }
        let g = r.toy_groups();
        if g.medlow.is_empty() {
            return Err(Error::invalid("toy groups need at least one medium-to-low resource language"));
        }
        Ok(())
    }

    pub fn sae_layers(&self) -> Vec<usize> {
        let mut layers = self
            .sae
            .layers
            .clone()
            .unwrap_or_else(|| (0..self.toy.model.n_layers).collect());
        if !layers.contains(&self.align.target_layer) {
            layers.push(self.align.target_layer);
        }
        layers.sort_unstable();
        layers.dedup();
        layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let back: PipelineConfig = serde_json::from_str(&c.to_pretty_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.align.alpha, 1.0);
        assert_eq!(c.align.iterations, 2);
        assert_eq!(c.align.sample_count, 4000);
        assert_eq!(c.ingest.threshold_fraction, 0.8);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"align": {"alpah": 1}}"#).is_err());
        let partial: PipelineConfig = serde_json::from_str(r#"{"align": {"alpha": 2.0}}"#).unwrap();
        assert_eq!(partial.align.alpha, 2.0);
        assert_eq!(partial.align.iterations, 2);
    }

    #[test]
    fn seed_override_and_hash() {
        let c = PipelineConfig {
            seed: Some(7),
            ..Default::default()
        };
        let r = c.resolved();
        assert_eq!((r.toy.corpus.seed, r.sae.train.seed, r.align.seed), (7, 7, 7));
        assert_ne!(c.sha256().unwrap(), PipelineConfig::default().sha256().unwrap());
        assert_eq!(c.sha256().unwrap(), c.clone().sha256().unwrap());
    }

    #[test]
    fn toy_groups_follow_budgets() {
        let g = PipelineConfig::default().toy_groups();
        assert_eq!(g.high, vec!["en".to_string()]);
        assert_eq!(g.medlow, vec!["xl".to_string()]);
        assert_eq!(g.reference, "en");
        assert_eq!(PipelineConfig::default().record_groups().high.len(), 5);
    }

    #[test]
    fn bad_ranges_rejected() {
        let mut c = PipelineConfig::default();
        c.sae.layers = Some(vec![9]);
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.align.tuned_layers = (0, 7);
        assert!(c.validate().is_err());
    }
}
