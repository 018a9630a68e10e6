//! Toy sequence-to-sequence branch: NLL training, diverse beam search,
//! decoder-state candidate representations, online ranking and
//! cosine-based beam selection.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, checkpoint, kernels, noam_lr, AdamState, GradBuffer, Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::corpus::{sentences_input, Dataset, Document, Vocabulary, BOS, CLS, DOC, EOS, PAD, SEP, UNK};
use crate::encoder::config_and_vocab;
use crate::error::{Error, Result};
use crate::metrics::discriminator_score;
use crate::nn::{causal_mask, DecoderLayer, LayerCache, LayerNorm, Linear, StackDims, TransformerEncoder};
use crate::training::{ranking_loss, StepReport, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seq2SeqConfig {
    /// Zero means "take it from the vocabulary".
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub use_positions: bool,
    pub local_layers: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub max_decode_len: usize,
    pub beam_size: usize,
    pub num_groups: usize,
    pub diversity_penalty: f64,
    /// Drop exact-duplicate token sequences from the decoded set.
    pub dedupe_beams: bool,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 64,
            max_len: 128,
            dropout: 0.0,
            use_positions: true,
            local_layers: 0,
            dec_layers: 1,
            dec_heads: 2,
            max_decode_len: 32,
            beam_size: 8,
            num_groups: 8,
            diversity_penalty: 1.0,
            dedupe_beams: true,
        }
    }
}

impl Seq2SeqConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.vocab_size == 0 {
            return bad("seq2seq vocab_size is unresolved".into());
        }
        for (name, heads) in [("n_heads", self.n_heads), ("dec_heads", self.dec_heads)] {
            if heads == 0 || self.d_model % heads != 0 {
                return bad(format!("d_model {} is not divisible by {name} {heads}", self.d_model));
            }
        }
        if self.beam_size == 0 || self.num_groups == 0 || self.beam_size % self.num_groups != 0 {
            return bad(format!(
                "num_groups {} must divide beam_size {}",
                self.num_groups, self.beam_size
            ));
        }
        if !(self.diversity_penalty >= 0.0) {
            return bad("diversity_penalty must be non-negative".into());
        }
        if self.max_decode_len == 0 || self.max_decode_len > self.max_len {
            return bad("max_decode_len must be in 1..=max_len".into());
        }
        if self.local_layers > self.n_layers {
            return bad("local_layers exceeds n_layers".into());
        }
        if self.dropout != 0.0 {
            return bad("dropout is not supported".into());
        }
        Ok(())
    }

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
}

/// Decoder settings of one search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchConfig {
    pub beam_size: usize,
    pub num_groups: usize,
    pub diversity_penalty: f64,
    pub max_len: usize,
    pub dedupe: bool,
}

impl SearchConfig {
    pub fn from_model(cfg: &Seq2SeqConfig) -> Self {
        Self {
            beam_size: cfg.beam_size,
            num_groups: cfg.num_groups,
            diversity_penalty: cfg.diversity_penalty,
            max_len: cfg.max_decode_len,
            dedupe: cfg.dedupe_beams,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedCandidate {
    /// Emitted tokens, ending with `<eos>` unless the length limit was hit.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub group: usize,
    /// Decoder hidden state at position `tokens.len() - 1`.
    pub z_c: Vec<f64>,
}

impl DecodedCandidate {
    /// Tokens without the trailing `<eos>`.
    pub fn text(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Incremental next-token model driven by the search.
pub trait StepModel {
    type State: Clone;

    fn initial(&self) -> Result<Self::State>;

    /// Feeds `token` at the next decoder position and returns the next-token
    /// log-probabilities and the hidden state at that position.
    fn advance(&self, state: &mut Self::State, token: usize) -> Result<(Vec<f64>, Vec<f64>)>;
}

#[derive(Clone)]
struct Hyp<S> {
    tokens: Vec<usize>,
    score: f64,
    state: S,
    next_logp: Vec<f64>,
    hidden: Vec<f64>,
    z_c: Vec<f64>,
    done: bool,
}

/// Group-sequential diverse beam search. Each of `num_groups` groups keeps
/// `beam_size / num_groups` hypotheses; at every step a group's token scores
/// are lowered by `diversity_penalty` times the number of times earlier
/// groups picked that token at the same step. Finished hypotheses stay in
/// their group's beam. Returns candidates sorted by log-probability.
pub fn diverse_beam_search<M: StepModel>(model: &M, cfg: &SearchConfig) -> Result<Vec<DecodedCandidate>> {
    if cfg.beam_size == 0 || cfg.num_groups == 0 || cfg.beam_size % cfg.num_groups != 0 {
        return Err(Error::Invalid("num_groups must divide a non-zero beam_size".into()));
    }
    let width = cfg.beam_size / cfg.num_groups;
    let mut state = model.initial()?;
    let (logp, hidden) = model.advance(&mut state, BOS)?;
    let root = Hyp {
        tokens: Vec::new(),
        score: 0.0,
        state,
        next_logp: logp,
        hidden,
        z_c: Vec::new(),
        done: false,
    };
    let mut groups: Vec<Vec<Hyp<M::State>>> = vec![vec![root]; cfg.num_groups];

    for _t in 0..cfg.max_len {
        if groups.iter().flatten().all(|h| h.done) {
            break;
        }
        let vocab = groups.iter().flatten().map(|h| h.next_logp.len()).max().unwrap_or(0);
        let mut chosen_counts: Vec<usize> = vec![0; vocab];
        for beam in groups.iter_mut() {
            // (penalized score, hypothesis, token or None for a finished carry-over)
            let mut options: Vec<(f64, usize, Option<usize>)> = Vec::new();
            for (hi, h) in beam.iter().enumerate() {
                if h.done {
                    options.push((h.score, hi, None));
                    continue;
                }
                for (v, &lp) in h.next_logp.iter().enumerate() {
                    if lp == f64::NEG_INFINITY {
                        continue;
                    }
                    let pen = cfg.diversity_penalty * chosen_counts[v] as f64;
                    options.push((h.score + lp - pen, hi, Some(v)));
                }
            }
            options.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            options.truncate(width);
            let mut next = Vec::with_capacity(options.len());
            for (_, hi, tok) in options {
                let parent = &beam[hi];
                match tok {
                    None => next.push(parent.clone()),
                    Some(v) => {
                        chosen_counts[v] += 1;
                        let mut tokens = parent.tokens.clone();
                        tokens.push(v);
                        let done = v == EOS || tokens.len() >= cfg.max_len;
                        let mut h = Hyp {
                            tokens,
                            score: parent.score + parent.next_logp[v],
                            state: parent.state.clone(),
                            next_logp: Vec::new(),
                            hidden: Vec::new(),
                            z_c: parent.hidden.clone(),
                            done,
                        };
                        if !done {
                            let (lp, hid) = model.advance(&mut h.state, v)?;
                            h.next_logp = lp;
                            h.hidden = hid;
                        }
                        next.push(h);
                    }
                }
            }
            *beam = next;
        }
    }

    let mut out: Vec<DecodedCandidate> = groups
        .into_iter()
        .enumerate()
        .flat_map(|(gi, beam)| {
            beam.into_iter().filter(|h| !h.tokens.is_empty()).map(move |h| DecodedCandidate {
                tokens: h.tokens,
                logprob: h.score,
                group: gi,
                z_c: h.z_c,
            })
        })
        .collect();
    out.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then(a.group.cmp(&b.group)));
    if cfg.dedupe {
        let mut seen: Vec<Vec<usize>> = Vec::new();
        out.retain(|c| {
            if seen.contains(&c.tokens) {
                false
            } else {
                seen.push(c.tokens.clone());
                true
            }
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Seq2SeqModel {
    pub config: Seq2SeqConfig,
    pub params: ParamStore,
    pub encoder: TransformerEncoder,
    dec_tok: ParamId,
    dec_pos: Option<ParamId>,
    layers: Vec<DecoderLayer>,
    final_ln: LayerNorm,
    out: Linear,
}

/// Tokens the decoder may never emit.
const BANNED: [usize; 6] = [PAD, UNK, DOC, CLS, SEP, BOS];

impl Seq2SeqModel {
    pub fn new(config: Seq2SeqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let dims = StackDims {
            vocab_size: config.vocab_size,
            d_model: config.d_model,
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            ffn_dim: config.ffn_dim,
            max_len: config.max_len,
            use_positions: config.use_positions,
            local_layers: config.local_layers,
        };
        let encoder = TransformerEncoder::new(&mut params, &mut rng, "enc", &dims);
        let d = config.d_model;
        let dec_tok = params.add("dec.tok_emb", vec![config.vocab_size, d], Init::Normal(0.1), &mut rng);
        let dec_pos = config
            .use_positions
            .then(|| params.add("dec.pos_emb", vec![config.max_len, d], Init::Normal(0.1), &mut rng));
        let layers = (0..config.dec_layers)
            .map(|i| DecoderLayer::new(&mut params, &mut rng, &format!("dec.layers.{i}"), d, config.dec_heads, config.ffn_dim))
            .collect();
        let final_ln = LayerNorm::new(&mut params, &mut rng, "dec.final_ln", d);
        let out = Linear::new(&mut params, &mut rng, "dec.out", d, config.vocab_size);
        Ok(Self {
            config,
            params,
            encoder,
            dec_tok,
            dec_pos,
            layers,
            final_ln,
            out,
        })
    }

    pub fn doc_ids(&self, doc: &Document) -> Result<Vec<usize>> {
        Ok(sentences_input(&doc.sentences, self.config.max_len)?.token_ids)
    }

    fn embed_dec(&self, g: &mut Graph, ids: &[usize], offset: usize) -> Result<Var> {
        if offset + ids.len() > self.config.max_len {
            return Err(Error::Position {
                pos: offset + ids.len() - 1,
                len: self.config.max_len,
            });
        }
        let table = g.param(self.dec_tok);
        let x = g.embedding_gather(table, ids)?;
        match self.dec_pos {
            Some(p) => {
                let pos: Vec<usize> = (offset..offset + ids.len()).collect();
                let pt = g.param(p);
                let pe = g.embedding_gather(pt, &pos)?;
                g.add(x, pe)
            }
            None => Ok(x),
        }
    }

    /// Teacher-forced decoder states `[dec_ids.len(), d]` after the final LayerNorm.
    pub fn decode_states(&self, g: &mut Graph, memory: Var, dec_ids: &[usize]) -> Result<Var> {
        let mut x = self.embed_dec(g, dec_ids, 0)?;
        let mask = g.constant(causal_mask(dec_ids.len()));
        for layer in &self.layers {
            x = layer.forward(g, x, memory, mask)?;
        }
        self.final_ln.forward(g, x)
    }

    /// Log-probabilities `[L, V]` with banned tokens at `-inf`.
    pub fn log_probs(&self, g: &mut Graph, states: Var) -> Result<Var> {
        let logits = self.out.forward(g, states)?;
        let rows = g.value(logits).rows();
        let v = self.config.vocab_size;
        let mut ban = vec![0.0; rows * v];
        for r in 0..rows {
            for &b in &BANNED {
                ban[r * v + b] = f64::NEG_INFINITY;
            }
        }
        let ban = g.constant(Tensor::matrix(rows, v, ban)?);
        let logits = g.add(logits, ban)?;
        Ok(g.log_softmax(logits))
    }

    /// Mean token negative log-likelihood of the reference under teacher forcing.
    pub fn nll_loss(&self, g: &mut Graph, memory: Var, reference: &[usize]) -> Result<Var> {
        let (dec_in, targets) = self.teacher_forcing(reference)?;
        let states = self.decode_states(g, memory, &dec_in)?;
        let lp = self.log_probs(g, states)?;
        let picked = g.pick(lp, &targets)?;
        let m = g.mean(picked);
        Ok(g.scale(m, -1.0))
    }

    fn teacher_forcing(&self, reference: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        if reference.is_empty() {
            return Err(Error::Invalid("empty reference".into()));
        }
        let mut targets: Vec<usize> = reference.to_vec();
        targets.truncate(self.config.max_decode_len - 1);
        targets.push(EOS);
        let mut dec_in = vec![BOS];
        dec_in.extend_from_slice(&targets[..targets.len() - 1]);
        Ok((dec_in, targets))
    }

    pub fn encode(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        self.encoder.forward(g, ids)
    }

    /// Decoder state at position `tokens.len() - 1` for a finished sequence.
    pub fn candidate_state(&self, g: &mut Graph, memory: Var, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty candidate".into()));
        }
        let mut dec_in = vec![BOS];
        dec_in.extend_from_slice(&tokens[..tokens.len() - 1]);
        let states = self.decode_states(g, memory, &dec_in)?;
        g.select_row(states, tokens.len() - 1)
    }

    /// Diverse beam search over one document.
    pub fn decode(&self, doc_ids: &[usize], cfg: &SearchConfig) -> Result<Vec<DecodedCandidate>> {
        let stepper = IncrementalDecoder::new(self, doc_ids)?;
        diverse_beam_search(&stepper, cfg)
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "seq2seq",
            "config": self.config,
            "vocab": vocab.tokens(),
        });
        checkpoint::save(path, &self.params, meta)
    }

    pub fn load(path: &Path) -> Result<(Self, Vocabulary)> {
        let (entries, meta) = checkpoint::load(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("seq2seq") {
            return Err(Error::Checkpoint(format!("{} is not a seq2seq checkpoint", path.display())));
        }
        let (config, vocab) = config_and_vocab::<Seq2SeqConfig>(&meta)?;
        let mut model = Self::new(config, 0)?;
        model.params.load(entries)?;
        Ok((model, vocab))
    }
}

/// KV-cached decoder for one encoded document.
pub struct IncrementalDecoder<'m> {
    model: &'m Seq2SeqModel,
    /// Encoder hidden state at position 0.
    pub z_x: Vec<f64>,
    mem_kv: Vec<(Tensor, Tensor)>,
}

#[derive(Clone, Debug, Default)]
pub struct DecoderCache {
    pos: usize,
    layers: Vec<LayerCache>,
}

impl<'m> IncrementalDecoder<'m> {
    pub fn new(model: &'m Seq2SeqModel, doc_ids: &[usize]) -> Result<Self> {
        let mut g = Graph::inference(&model.params);
        let memory = model.encode(&mut g, doc_ids)?;
        let z_x = g.value(memory).row(0).to_vec();
        let mut mem_kv = Vec::with_capacity(model.layers.len());
        for layer in &model.layers {
            let (k, v) = layer.memory_kv(&mut g, memory)?;
            mem_kv.push((g.value(k).clone(), g.value(v).clone()));
        }
        Ok(Self { model, z_x, mem_kv })
    }
}

impl StepModel for IncrementalDecoder<'_> {
    type State = DecoderCache;

    fn initial(&self) -> Result<DecoderCache> {
        Ok(DecoderCache {
            pos: 0,
            layers: vec![LayerCache::default(); self.model.layers.len()],
        })
    }

    fn advance(&self, state: &mut DecoderCache, token: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let m = self.model;
        let mut g = Graph::inference(&m.params);
        let mut x = m.embed_dec(&mut g, &[token], state.pos)?;
        for ((layer, cache), (k, v)) in m.layers.iter().zip(state.layers.iter_mut()).zip(&self.mem_kv) {
            let mk = g.constant(k.clone());
            let mv = g.constant(v.clone());
            x = layer.step(&mut g, x, mk, mv, cache)?;
        }
        let h = m.final_ln.forward(&mut g, x)?;
        let lp = m.log_probs(&mut g, h)?;
        state.pos += 1;
        Ok((g.data(lp).to_vec(), g.data(h).to_vec()))
    }
}

/// Document representation and candidate representation recomputed by a
/// full teacher-forced decoder pass.
pub fn extract_representations(model: &Seq2SeqModel, doc_ids: &[usize], cand: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::inference(&model.params);
    let memory = model.encode(&mut g, doc_ids)?;
    let z_x = g.value(memory).row(0).to_vec();
    let z_c = model.candidate_state(&mut g, memory, cand)?;
    Ok((z_x, g.data(z_c).to_vec()))
}

/// Beam with the highest cosine between its state and the document
/// representation; ties go to the higher log-probability.
pub fn select_by_cosine(z_x: &[f64], cands: &[DecodedCandidate]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in cands.iter().enumerate() {
        let cos = kernels::cosine(z_x, &c.z_c);
        let better = match best {
            None => true,
            Some((b, bc)) => cos > bc || (cos == bc && c.logprob > cands[b].logprob),
        };
        if better {
            best = Some((i, cos));
        }
    }
    best.map(|(i, _)| i)
}

/// Decode and select by cosine (CoLo) and by log-probability (MAP).
pub struct AbsSelection {
    pub candidates: Vec<DecodedCandidate>,
    pub z_x: Vec<f64>,
    pub cosine_pick: usize,
    pub map_pick: usize,
}

pub fn select_abs(model: &Seq2SeqModel, doc: &Document, cfg: &SearchConfig) -> Result<AbsSelection> {
    let ids = model.doc_ids(doc)?;
    let stepper = IncrementalDecoder::new(model, &ids)?;
    let candidates = diverse_beam_search(&stepper, cfg)?;
    let cosine_pick = select_by_cosine(&stepper.z_x, &candidates)
        .ok_or_else(|| Error::Invalid(format!("no candidates decoded for {}", doc.id)))?;
    Ok(AbsSelection {
        candidates,
        z_x: stepper.z_x,
        cosine_pick,
        map_pick: 0,
    })
}

/// Desk-scale corpus shape for the abstractive toy.
pub fn toy_corpus_spec() -> crate::corpus::SynthSpec {
    crate::corpus::SynthSpec {
        n_docs: 2000,
        sentences: [3, 4],
        sentence_len: [4, 6],
        vocab_size: 30,
        salient_words: 12,
        salient_per_key: 2,
        summary_sentences: [1, 1],
        noise: 0.05,
        paraphrase_prob: 0.3,
        paraphrase_noise: 0.4,
        distractor_salient_prob: 0.2,
    }
}

/// Schedule of the abstractive toy: NLL warmup, then NLL plus ranking.
pub fn default_train_config() -> TrainConfig {
    TrainConfig {
        warmup_steps_bce: 3000,
        combined_steps: 1000,
        lr_factor: 1.0,
        margin: 0.1,
        ..TrainConfig::default()
    }
}

/// Model, optimizer and document stream of the abstractive branch.
#[derive(Clone, Debug)]
pub struct AbsTrainer {
    pub model: Seq2SeqModel,
    pub cfg: TrainConfig,
    pub step: usize,
    adam: AdamState,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl AbsTrainer {
    pub fn new(model: Seq2SeqModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(&model.params);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6162_7374);
        Ok(Self {
            model,
            cfg,
            step: 0,
            adam,
            order: Vec::new(),
            cursor: 0,
            rng,
        })
    }

    /// One step over the next batch: NLL, plus the ranking loss over the
    /// beams decoded from the current parameters when `with_rank` is set.
    pub fn train_step(&mut self, dataset: &Dataset, with_rank: bool) -> Result<StepReport> {
        let start = Instant::now();
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        while batch.len() < self.cfg.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..dataset.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        let search = SearchConfig::from_model(&self.model.config);
        let mut grads = GradBuffer::zeros_like(&self.model.params);
        let scale = 1.0 / batch.len() as f64;
        let (mut l_sum, mut l_rank, mut n_cands, mut degenerate) = (0.0, 0.0, 0, 0);
        for &i in &batch {
            let doc = &dataset.docs[i];
            let ids = self.model.doc_ids(doc)?;
            let ranked: Vec<Vec<usize>> = if with_rank {
                let mut beams = self.model.decode(&ids, &search)?;
                beams.retain(|c| !c.text().is_empty());
                let mut scored: Vec<(f64, Vec<usize>)> = beams
                    .into_iter()
                    .map(|c| (discriminator_score(c.text(), &doc.reference, self.cfg.discriminator), c.tokens))
                    .collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
                scored.into_iter().map(|(_, t)| t).collect()
            } else {
                Vec::new()
            };
            let mut g = Graph::new(&self.model.params);
            let memory = self.model.encode(&mut g, &ids)?;
            let nll = self.model.nll_loss(&mut g, memory, &doc.reference)?;
            let z_x = g.select_row(memory, 0)?;
            let states: Vec<Var> = ranked
                .iter()
                .map(|t| self.model.candidate_state(&mut g, memory, t))
                .collect::<Result<_>>()?;
            n_cands += states.len();
            let total = match ranking_loss(&mut g, z_x, &states, self.cfg.rank_options())? {
                Some(r) => {
                    l_rank += g.value(r).item() * scale;
                    g.add(nll, r)?
                }
                None => {
                    degenerate += usize::from(with_rank);
                    nll
                }
            };
            l_sum += g.value(nll).item() * scale;
            g.backward(total)?.accumulate_into(&mut grads, scale);
        }
        self.step += 1;
        let lr = noam_lr(
            self.model.config.d_model,
            self.step as u64,
            self.cfg.lr_warmup as u64,
            self.cfg.lr_factor,
        );
        adam_step(&mut self.model.params, &grads, &mut self.adam, lr);
        Ok(StepReport {
            step: self.step,
            l_sum,
            l_rank,
            total: l_sum + l_rank,
            n_cands,
            ms: start.elapsed().as_secs_f64() * 1e3,
            degenerate,
        })
    }

    pub fn run(
        &mut self,
        dataset: &Dataset,
        steps: usize,
        with_rank: bool,
        on_step: &mut dyn FnMut(&StepReport) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            let r = self.train_step(dataset, with_rank)?;
            on_step(&r)?;
        }
        Ok(())
    }

    /// NLL warmup followed by NLL plus online ranking.
    pub fn train(&mut self, dataset: &Dataset, on_step: &mut dyn FnMut(&StepReport) -> Result<()>) -> Result<()> {
        let warm = self.cfg.warmup_steps_bce.saturating_sub(self.step);
        self.run(dataset, warm, false, on_step)?;
        self.run(dataset, self.cfg.combined_steps, true, on_step)
    }
}

/// Mean Rouge12 of the cosine-selected and MAP-selected beams.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AbsEvalRow {
    pub selector: &'static str,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub rouge12: f64,
    pub n_docs: usize,
}

/// One decoded beam for the JSONL dump.
#[derive(Clone, Debug, Serialize)]
pub struct DecodedRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub logprob: f64,
    pub cos: f64,
    pub selected: bool,
}

pub fn evaluate_abs(
    model: &Seq2SeqModel,
    dataset: &Dataset,
    cfg: &SearchConfig,
) -> Result<(Vec<AbsEvalRow>, Vec<DecodedRecord>)> {
    let results = crate::parallel::par_map(&dataset.docs, |doc| select_abs(model, doc, cfg));
    let mut sums = [[0.0f64; 3]; 2];
    let mut records = Vec::new();
    for (doc, sel) in dataset.docs.iter().zip(results) {
        let sel = sel?;
        for (k, pick) in [sel.cosine_pick, sel.map_pick].into_iter().enumerate() {
            let s = crate::metrics::PairScores::compute(sel.candidates[pick].text(), &doc.reference);
            sums[k][0] += s.r1;
            sums[k][1] += s.r2;
            sums[k][2] += s.rl;
        }
        for (i, c) in sel.candidates.iter().enumerate() {
            records.push(DecodedRecord {
                id: doc.id.clone(),
                tokens: c.tokens.iter().map(|&t| dataset.vocab.token(t).to_string()).collect(),
                logprob: c.logprob,
                cos: kernels::cosine(&sel.z_x, &c.z_c),
                selected: i == sel.cosine_pick,
            });
        }
    }
    let n = dataset.len().max(1) as f64;
    let rows = ["cosine", "map"]
        .into_iter()
        .zip(sums)
        .map(|(selector, s)| AbsEvalRow {
            selector,
            r1: s[0] / n,
            r2: s[1] / n,
            rl: s[2] / n,
            rouge12: (s[0] + s[1]) / 2.0 / n,
            n_docs: dataset.len(),
        })
        .collect();
    Ok((rows, records))
}

pub fn write_abs_eval_csv<W: Write>(mut w: W, rows: &[AbsEvalRow]) -> std::io::Result<()> {
    writeln!(w, "selector,r1,r2,rl,rouge12,n_docs")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            r.selector, r.r1, r.r2, r.rl, r.rouge12, r.n_docs
        )?;
    }
    Ok(())
}

pub fn write_decoded_jsonl<W: Write>(mut w: W, records: &[DecodedRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::Invalid(e.to_string()))?;
    }
    Ok(())
}
