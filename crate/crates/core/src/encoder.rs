//! Extractive summarization model: transformer encoder, `<doc>`/`<cls>`
//! readout and the sentence classifier.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, kernels, Graph, ParamStore, Tensor, Var};
use crate::corpus::{ModelInput, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{Linear, StackDims, TransformerEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Zero means "take it from the vocabulary".
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub use_positions: bool,
    /// Leading layers restricted to sentence-local attention.
    pub local_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            max_len: 256,
            dropout: 0.0,
            use_positions: true,
            local_layers: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Invalid("encoder vocab_size is unresolved".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 4 {
            return Err(Error::Invalid("max_len must be at least 4".into()));
        }
        if self.local_layers > self.n_layers {
            return Err(Error::Invalid("local_layers exceeds n_layers".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Invalid("dropout is not supported".into()));
        }
        Ok(())
    }

    /// Fills `vocab_size` from `vocab` when unset; rejects a size too small for it.
    pub fn resolve(mut self, vocab: &Vocabulary) -> Result<Self> {
        if self.vocab_size == 0 {
            self.vocab_size = vocab.len();
        } else if self.vocab_size < vocab.len() {
            return Err(Error::Invalid(format!(
                "vocab_size {} is smaller than the vocabulary ({})",
                self.vocab_size,
                vocab.len()
            )));
        }
        self.validate()?;
        Ok(self)
    }

    pub(crate) fn dims(&self) -> StackDims {
        StackDims {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            use_positions: self.use_positions,
            local_layers: self.local_layers,
        }
    }
}

/// `d -> d -> d -> 1` MLP with relu activations and a sigmoid output.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub layers: [Linear; 3],
}

impl Classifier {
    /// Probabilities for each row of `h` (`[n, d]`), returned as shape `[n]`.
    pub fn forward(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let x = self.layers[0].forward(g, h)?;
        let x = g.relu(x);
        let x = self.layers[1].forward(g, x)?;
        let x = g.relu(x);
        let x = self.layers[2].forward(g, x)?;
        let n = g.value(x).rows();
        let x = g.reshape(x, vec![n])?;
        Ok(g.sigmoid(x))
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub hidden: Var,
    pub z_x: Var,
    /// Sentence embeddings, `[n, d]`.
    pub h: Var,
    /// Sentence probabilities, `[n]`.
    pub probs: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub z_x: Vec<f64>,
    pub h: Vec<Vec<f64>>,
    pub sentence_probs: Vec<f64>,
}

impl EncoderOutput {
    pub fn num_sentences(&self) -> usize {
        self.h.len()
    }
}

#[derive(Clone, Debug)]
pub struct ExtractiveModel {
    pub config: EncoderConfig,
    pub params: ParamStore,
    pub body: TransformerEncoder,
    pub classifier: Classifier,
}

impl ExtractiveModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let body = TransformerEncoder::new(&mut params, &mut rng, "enc", &config.dims());
        let d = config.d_model;
        let classifier = Classifier {
            layers: [
                Linear::new(&mut params, &mut rng, "cls.0", d, d),
                Linear::new(&mut params, &mut rng, "cls.1", d, d),
                Linear::new(&mut params, &mut rng, "cls.2", d, 1),
            ],
        };
        Ok(Self {
            config,
            params,
            body,
            classifier,
        })
    }

    pub fn check_input(&self, input: &ModelInput) -> Result<()> {
        let len = input.len();
        if len > self.config.max_len {
            return Err(Error::Position {
                pos: len - 1,
                len: self.config.max_len,
            });
        }
        for &p in std::iter::once(&input.doc_pos).chain(&input.cls_pos) {
            if p >= len {
                return Err(Error::Position { pos: p, len });
            }
        }
        if let Some(&t) = input.token_ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Invalid(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, input: &ModelInput) -> Result<EncoderVars> {
        self.check_input(input)?;
        let hidden = self.body.forward(g, &input.token_ids)?;
        let z_x = g.select_row(hidden, input.doc_pos)?;
        let rows: Vec<Var> = input
            .cls_pos
            .iter()
            .map(|&p| {
                let r = g.select_row(hidden, p)?;
                g.reshape(r, vec![1, self.config.d_model])
            })
            .collect::<Result<_>>()?;
        let h = if rows.len() == 1 {
            rows[0]
        } else {
            g.concat(&rows, 0)?
        };
        let probs = self.classifier.forward(g, h)?;
        Ok(EncoderVars {
            hidden,
            z_x,
            h,
            probs,
        })
    }

    /// Forward pass without gradient recording.
    pub fn encode(&self, input: &ModelInput) -> Result<EncoderOutput> {
        let mut g = Graph::inference(&self.params);
        let vars = self.forward(&mut g, input)?;
        Ok(output_from(&g, &vars))
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "extractive",
            "config": self.config,
            "vocab": vocab.tokens(),
            "extra": extra,
        });
        checkpoint::save(path, &self.params, meta)
    }

    /// Loads a checkpoint written by [`ExtractiveModel::save`], returning the
    /// model, its vocabulary and the `extra` metadata.
    pub fn load(path: &Path) -> Result<(Self, Vocabulary, serde_json::Value)> {
        let (entries, meta) = checkpoint::load(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("extractive") {
            return Err(Error::Checkpoint(format!(
                "{} is not an extractive model checkpoint",
                path.display()
            )));
        }
        let (config, vocab) = config_and_vocab::<EncoderConfig>(&meta)?;
        let mut model = Self::new(config, 0)?;
        model.params.load(entries)?;
        Ok((model, vocab, meta.get("extra").cloned().unwrap_or_default()))
    }
}

pub(crate) fn config_and_vocab<C: serde::de::DeserializeOwned>(meta: &serde_json::Value) -> Result<(C, Vocabulary)> {
    let config = serde_json::from_value(meta.get("config").cloned().unwrap_or_default())
        .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
    let tokens: Vec<String> = serde_json::from_value(meta.get("vocab").cloned().unwrap_or_default())
        .map_err(|e| Error::Checkpoint(format!("bad vocabulary: {e}")))?;
    Ok((config, Vocabulary::from_tokens(tokens)))
}

pub fn output_from(g: &Graph, vars: &EncoderVars) -> EncoderOutput {
    let h = g.value(vars.h);
    EncoderOutput {
        z_x: g.data(vars.z_x).to_vec(),
        h: (0..h.rows()).map(|i| h.row(i).to_vec()).collect(),
        sentence_probs: g.data(vars.probs).to_vec(),
    }
}

/// Mean of the selected sentence embeddings.
pub fn candidate_embedding(output: &EncoderOutput, indices: &[usize]) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(Error::Invalid("candidate has no sentences".into()));
    }
    let d = output.z_x.len();
    let mut acc = vec![0.0; d];
    for &i in indices {
        let row = output.h.get(i).ok_or(Error::Position {
            pos: i,
            len: output.h.len(),
        })?;
        kernels::axpy(1.0, row, &mut acc);
    }
    let inv = 1.0 / indices.len() as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    Ok(acc)
}

/// Differentiable counterpart of [`candidate_embedding`].
pub fn candidate_embedding_var(g: &mut Graph, h: Var, indices: &[usize]) -> Result<Var> {
    if indices.is_empty() {
        return Err(Error::Invalid("candidate has no sentences".into()));
    }
    g.mean_pool(h, indices)
}

/// Tensor of the sentence embeddings, for callers that rebuild a graph.
pub fn h_tensor(output: &EncoderOutput) -> Result<Tensor> {
    Tensor::from_rows(&output.h)
}
