use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use colo::abstractive::{default_train_config, toy_corpus_spec, Seq2SeqConfig};
use colo::bench::BenchConfig;
use colo::candidates::CandidateSpec;
use colo::corpus::SynthSpec;
use colo::encoder::EncoderConfig;
use colo::inference::SystemKind;
use colo::metrics::DiscriminatorKind;
use colo::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Documents held out from a synthesized corpus for evaluation.
    pub test_docs: usize,
    pub corpus: SynthSpec,
    pub encoder: EncoderConfig,
    pub candidates: CandidateSpec,
    pub training: TrainConfig,
    pub eval: EvalSection,
    pub abstractive: AbstractiveSection,
    pub bench: BenchConfig,
    pub cost: CostSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            test_docs: 100,
            corpus: SynthSpec::default(),
            encoder: EncoderConfig::default(),
            candidates: CandidateSpec::default(),
            training: TrainConfig::default(),
            eval: EvalSection::default(),
            abstractive: AbstractiveSection::default(),
            bench: BenchConfig::default(),
            cost: CostSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub systems: Vec<SystemKind>,
    /// Sentences kept by top-k and LEAD; 0 means the corpus mean gold count.
    pub k: usize,
    pub discriminator: DiscriminatorKind,
    /// Documents exported by `viz`; 0 means all.
    pub viz_docs: usize,
    /// Candidate space of the `viz` export, separate from training.
    /// `N = [2, 3]` with `n_prime = 10` gives 165 candidates per document.
    pub viz_candidates: CandidateSpec,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            systems: vec![
                SystemKind::ColoExt,
                SystemKind::ClassifierTopK,
                SystemKind::Lead,
                SystemKind::OracleSet,
            ],
            k: 0,
            discriminator: DiscriminatorKind::Rouge12Mean,
            viz_docs: 100,
            viz_candidates: CandidateSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbstractiveSection {
    pub test_docs: usize,
    pub model: Seq2SeqConfig,
    pub train: TrainConfig,
    pub corpus: SynthSpec,
}

impl Default for AbstractiveSection {
    fn default() -> Self {
        Self {
            test_docs: 60,
            model: Seq2SeqConfig::default(),
            train: default_train_config(),
            corpus: toy_corpus_spec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    pub reranker_steps: usize,
}

impl Default for CostSection {
    fn default() -> Self {
        Self { reranker_steps: 700 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).map_err(|e| anyhow!("config {}: {e}", path.display()))
    }

    /// Parses TOML text; the error is one line naming the offending line and key.
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e: toml::de::Error| {
            let msg = e.message().replace('\n', " ");
            match e.span() {
                Some(span) => {
                    let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                    format!("line {line}: {msg}")
                }
                None => msg,
            }
        })
    }

    /// Applies the global seed to every component schedule.
    pub fn resolve_seeds(&mut self) {
        self.training.seed = self.seed;
        self.abstractive.train.seed = self.seed;
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string(self).context("cannot serialize resolved config")
    }
}
