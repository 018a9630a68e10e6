//! Simulated summarize-then-rerank pipeline and the throughput/cost harness
//! that contrasts it with one-stage selection.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, kernels, noam_lr, AdamState, GradBuffer, Graph, Var};
use crate::candidates::{candidate_pool, is_degenerate, Candidate, CandidateSpec};
use crate::corpus::{sentences_input, Dataset, Document, ModelInput, CLS, DOC, SEP};
use crate::encoder::{candidate_embedding, output_from, EncoderConfig, ExtractiveModel};
use crate::error::{Error, Result};
use crate::inference::{argmax_candidate, topk_from_probs};
use crate::training::{ranking_loss, OfflineCache, TrainConfig, Trainer};

/// Candidate length limit of the re-ranker input.
pub const DEFAULT_CAND_LEN_CAP: usize = 300;

/// Second-stage model: an encoder with its own parameters that re-encodes
/// the document and every candidate as separate sequences and reads each
/// representation at position 0.
#[derive(Clone, Debug)]
pub struct Reranker {
    pub model: ExtractiveModel,
    pub cand_len_cap: usize,
}

impl Reranker {
    pub fn new(config: EncoderConfig, seed: u64, cand_len_cap: usize) -> Result<Self> {
        if cand_len_cap > config.max_len {
            return Err(Error::Invalid(format!(
                "candidate cap {cand_len_cap} exceeds re-ranker max_len {}",
                config.max_len
            )));
        }
        Ok(Self {
            model: ExtractiveModel::new(config, seed)?,
            cand_len_cap,
        })
    }

    /// Encoder settings for a re-ranker paired with `encoder`: same shape,
    /// context long enough for a capped candidate.
    pub fn config_for(encoder: &EncoderConfig, cand_len_cap: usize) -> EncoderConfig {
        EncoderConfig {
            max_len: encoder.max_len.max(cand_len_cap),
            ..encoder.clone()
        }
    }

    /// Loads a re-ranker saved with its cap in the checkpoint's extra metadata.
    pub fn load(path: &std::path::Path) -> Result<(Self, crate::corpus::Vocabulary)> {
        let (model, vocab, extra) = ExtractiveModel::load(path)?;
        let cand_len_cap = extra
            .get("cand_len_cap")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint(format!("{} has no cand_len_cap", path.display())))? as usize;
        Ok((Self { model, cand_len_cap }, vocab))
    }

    pub fn save(&self, path: &std::path::Path, vocab: &crate::corpus::Vocabulary) -> Result<()> {
        self.model
            .save(path, vocab, serde_json::json!({ "cand_len_cap": self.cand_len_cap }))
    }

    fn represent(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let hidden = self.model.body.forward(g, ids)?;
        g.select_row(hidden, 0)
    }

    pub fn doc_input(&self, doc: &Document) -> Result<ModelInput> {
        sentences_input(&doc.sentences, self.model.config.max_len)
    }
}

/// Re-ranker input of one candidate: `<doc> (<cls> sentence <sep>)*` in
/// document order, hard-truncated to `cap` tokens.
pub fn candidate_tokens(doc: &Document, indices: &[usize], cap: usize) -> Vec<usize> {
    let mut ids = vec![DOC];
    for &i in indices {
        ids.push(CLS);
        ids.extend_from_slice(&doc.sentences[i]);
        ids.push(SEP);
    }
    ids.truncate(cap);
    ids
}

/// Outcome of one selection with its cost accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub candidate: Candidate,
    /// Forward passes of the scoring model (the re-ranker for two-stage).
    pub encoder_calls: usize,
    /// Input tokens processed by the scoring model.
    pub tokens: usize,
}

/// Summarize-then-rerank: the generator proposes the clipped pool, the
/// re-ranker encodes the document and each candidate separately and picks
/// the candidate most cosine-similar to its document vector.
pub fn rerank_two_stage(
    generator: &ExtractiveModel,
    reranker: &Reranker,
    doc: &Document,
    spec: &CandidateSpec,
) -> Result<Selection> {
    let input = sentences_input(&doc.sentences, generator.config.max_len)?;
    let out = generator.encode(&input)?;
    let pool = if is_degenerate(out.num_sentences(), spec) {
        vec![Candidate::new((0..out.num_sentences()).collect())]
    } else {
        candidate_pool(&out.sentence_probs, spec)
    };
    rerank_pool(reranker, doc, pool)
}

/// Scores a given candidate pool with the re-ranker.
pub fn rerank_pool(reranker: &Reranker, doc: &Document, pool: Vec<Candidate>) -> Result<Selection> {
    let mut g = Graph::inference(&reranker.model.params);
    rerank_in(&mut g, reranker, doc, pool)
}

fn rerank_in(g: &mut Graph, reranker: &Reranker, doc: &Document, pool: Vec<Candidate>) -> Result<Selection> {
    if pool.is_empty() {
        return Err(Error::Invalid("empty candidate pool".into()));
    }
    let doc_ids = reranker.doc_input(doc)?.token_ids;
    let z = reranker.represent(g, &doc_ids)?;
    let mut tokens = doc_ids.len();
    let mut cos = Vec::with_capacity(pool.len());
    for c in &pool {
        let ids = candidate_tokens(doc, &c.indices, reranker.cand_len_cap);
        tokens += ids.len();
        let r = reranker.represent(g, &ids)?;
        cos.push(kernels::cosine(g.data(z), g.data(r)));
    }
    let best = argmax_candidate(&pool, &cos);
    let mut candidate = pool[best].clone();
    candidate.disc_score = cos[best];
    Ok(Selection {
        candidate,
        encoder_calls: pool.len() + 1,
        tokens,
    })
}

/// First `size` candidates of the smallest clip (sizes 1-3) whose pool reaches
/// `size`; the whole pool when the document is too short.
pub fn sized_pool(probs: &[f64], size: usize) -> Vec<Candidate> {
    let n = probs.len();
    let mut n_prime = 3.min(n.max(1));
    loop {
        let spec = CandidateSpec {
            sizes: vec![1, 2, 3],
            n_prime,
            full_space_oracle: false,
        };
        let mut pool = candidate_pool(probs, &spec);
        if pool.len() >= size || n_prime >= n {
            pool.truncate(size);
            return pool;
        }
        n_prime += 1;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchSystem {
    /// Encode and take the top-k sentences; no candidate scoring.
    NoRanking,
    OneStage,
    TwoStage,
}

impl BenchSystem {
    pub fn name(self) -> &'static str {
        match self {
            BenchSystem::NoRanking => "no_ranking",
            BenchSystem::OneStage => "one_stage",
            BenchSystem::TwoStage => "two_stage",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    One,
    /// Largest batch whose live tensor bytes stay under the budget.
    Max,
}

impl BatchMode {
    pub fn name(self) -> &'static str {
        match self {
            BatchMode::One => "one",
            BatchMode::Max => "max",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub batch_mode: BatchMode,
    pub repetitions: usize,
    pub warmup_batches: usize,
    /// Live tensor byte budget for `batch_mode = "max"`.
    pub memory_budget_bytes: usize,
    pub cand_len_cap: usize,
    /// Documents timed per repetition; 0 means the whole set.
    pub n_docs: usize,
    /// Sentences kept by the no-ranking system.
    pub k: usize,
    /// Shard documents across `COLO_THREADS` workers instead of timing on one thread.
    pub multi_worker: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![4, 8, 16, 20, 32],
            batch_mode: BatchMode::One,
            repetitions: 3,
            warmup_batches: 1,
            memory_budget_bytes: 64 << 20,
            cand_len_cap: DEFAULT_CAND_LEN_CAP,
            n_docs: 0,
            k: 2,
            multi_worker: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.iter().any(|&s| s < 2) {
            return Err(Error::Invalid("bench sizes must all be at least 2".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Invalid("bench repetitions must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub system: BenchSystem,
    pub candidates: usize,
    pub samples_per_second: f64,
    pub tokens_per_doc: f64,
    pub encoder_calls_per_doc: f64,
    pub peak_bytes: usize,
    pub batch_mode: BatchMode,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "system,C,samples_per_s,tokens_per_doc,peak_bytes,batch_mode";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.3},{:.2},{},{}",
            self.system.name(),
            self.candidates,
            self.samples_per_second,
            self.tokens_per_doc,
            self.peak_bytes,
            self.batch_mode.name()
        )
    }
}

pub fn write_bench_csv<W: Write>(mut w: W, rows: &[BenchRow]) -> std::io::Result<()> {
    writeln!(w, "{}", BenchRow::CSV_HEADER)?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Counters of one pass over a batch of documents.
#[derive(Clone, Copy, Debug, Default)]
struct PassStats {
    tokens: usize,
    calls: usize,
    peak_bytes: usize,
}

/// Runs `system` over `docs` in one shared graph per model.
fn run_batch(
    system: BenchSystem,
    generator: &ExtractiveModel,
    reranker: &Reranker,
    docs: &[Document],
    size: usize,
    k: usize,
) -> Result<PassStats> {
    let mut g = Graph::inference(&generator.params);
    let mut rg = Graph::inference(&reranker.model.params);
    let mut stats = PassStats::default();
    for doc in docs {
        let input = sentences_input(&doc.sentences, generator.config.max_len)?;
        let vars = generator.forward(&mut g, &input)?;
        let out = output_from(&g, &vars);
        match system {
            BenchSystem::NoRanking => {
                std::hint::black_box(topk_from_probs(&out.sentence_probs, k));
                stats.tokens += input.len();
                stats.calls += 1;
            }
            BenchSystem::OneStage => {
                let pool = sized_pool(&out.sentence_probs, size);
                let cos = pool
                    .iter()
                    .map(|c| Ok(kernels::cosine(&out.z_x, &candidate_embedding(&out, &c.indices)?)))
                    .collect::<Result<Vec<f64>>>()?;
                std::hint::black_box(argmax_candidate(&pool, &cos));
                stats.tokens += input.len();
                stats.calls += 1;
            }
            BenchSystem::TwoStage => {
                let pool = sized_pool(&out.sentence_probs, size);
                let sel = rerank_in(&mut rg, reranker, doc, pool)?;
                stats.tokens += sel.tokens;
                stats.calls += sel.encoder_calls;
            }
        }
    }
    stats.peak_bytes = g.live_bytes() + rg.live_bytes();
    Ok(stats)
}

/// Documents per batch under `cfg.batch_mode`.
fn batch_size_for(
    system: BenchSystem,
    generator: &ExtractiveModel,
    reranker: &Reranker,
    docs: &[Document],
    size: usize,
    cfg: &BenchConfig,
) -> Result<usize> {
    match cfg.batch_mode {
        BatchMode::One => Ok(1),
        BatchMode::Max => {
            let probe = docs.len().min(4).max(1);
            let stats = run_batch(system, generator, reranker, &docs[..probe], size, cfg.k)?;
            let per_doc = (stats.peak_bytes / probe).max(1);
            Ok((cfg.memory_budget_bytes / per_doc).clamp(1, docs.len().max(1)))
        }
    }
}

/// Times selection per system and candidate-set size. Samples per second is
/// the median over repetitions; the first `warmup_batches` batches of each
/// repetition are excluded from timing.
pub fn benchmark(
    systems: &[BenchSystem],
    dataset: &Dataset,
    generator: &ExtractiveModel,
    reranker: &Reranker,
    cfg: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let docs: Vec<Document> = if cfg.n_docs == 0 {
        dataset.docs.clone()
    } else {
        dataset.docs.iter().take(cfg.n_docs).cloned().collect()
    };
    if docs.is_empty() {
        return Err(Error::Invalid("no documents to benchmark".into()));
    }
    let mut rows = Vec::new();
    for &size in &cfg.sizes {
        for &system in systems {
            let batch = batch_size_for(system, generator, reranker, &docs, size, cfg)?;
            let batches: Vec<&[Document]> = docs.chunks(batch).collect();
            let mut rates = Vec::with_capacity(cfg.repetitions);
            let mut totals = PassStats::default();
            for rep in 0..cfg.repetitions {
                for b in batches.iter().take(cfg.warmup_batches) {
                    run_batch(system, generator, reranker, b, size, cfg.k)?;
                }
                let timed = if batches.len() > cfg.warmup_batches {
                    &batches[cfg.warmup_batches..]
                } else {
                    &batches[..]
                };
                let n: usize = timed.iter().map(|b| b.len()).sum();
                let start = Instant::now();
                let stats: Vec<PassStats> = if cfg.multi_worker {
                    crate::parallel::par_map(timed, |b| run_batch(system, generator, reranker, b, size, cfg.k))
                        .into_iter()
                        .collect::<Result<_>>()?
                } else {
                    timed
                        .iter()
                        .map(|b| run_batch(system, generator, reranker, b, size, cfg.k))
                        .collect::<Result<_>>()?
                };
                let secs = start.elapsed().as_secs_f64().max(1e-9);
                rates.push(n as f64 / secs);
                if rep == 0 {
                    // accounting is timing independent; one repetition suffices
                    let all: Vec<PassStats> = batches
                        .iter()
                        .map(|b| run_batch(system, generator, reranker, b, size, cfg.k))
                        .collect::<Result<_>>()?;
                    totals.tokens = all.iter().map(|s| s.tokens).sum();
                    totals.calls = all.iter().map(|s| s.calls).sum();
                    totals.peak_bytes = all.iter().chain(&stats).map(|s| s.peak_bytes).max().unwrap_or(0);
                }
            }
            rows.push(BenchRow {
                system,
                candidates: size,
                samples_per_second: median(&mut rates),
                tokens_per_doc: totals.tokens as f64 / docs.len() as f64,
                encoder_calls_per_doc: totals.calls as f64 / docs.len() as f64,
                peak_bytes: totals.peak_bytes,
                batch_mode: cfg.batch_mode,
            });
        }
    }
    Ok(rows)
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// One ranking-loss update of the re-ranker per cached document.
pub fn train_reranker(
    reranker: &mut Reranker,
    dataset: &Dataset,
    cache: &OfflineCache,
    cfg: &TrainConfig,
    steps: usize,
) -> Result<()> {
    let mut adam = AdamState::new(&reranker.model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7265_7261);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 1..=steps {
        let mut grads = GradBuffer::zeros_like(&reranker.model.params);
        let scale = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let doc = &dataset.docs[order[cursor]];
            cursor += 1;
            let sets = cache.get(&doc.id)?;
            let mut g = Graph::new(&reranker.model.params);
            let doc_ids = reranker.doc_input(doc)?.token_ids;
            let z = reranker.represent(&mut g, &doc_ids)?;
            let reps: Vec<Var> = sets
                .iter()
                .map(|idx| reranker.represent(&mut g, &candidate_tokens(doc, idx, reranker.cand_len_cap)))
                .collect::<Result<_>>()?;
            if let Some(loss) = ranking_loss(&mut g, z, &reps, cfg.rank_options())? {
                g.backward(loss)?.accumulate_into(&mut grads, scale);
            }
        }
        let lr = noam_lr(
            reranker.model.config.d_model,
            step as u64,
            cfg.lr_warmup as u64,
            cfg.lr_factor,
        );
        adam_step(&mut reranker.model.params, &grads, &mut adam, lr);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub pipeline: String,
    pub stage: String,
    pub seconds: f64,
}

impl CostRow {
    pub const CSV_HEADER: &'static str = "pipeline,stage,seconds";

    pub fn csv_row(&self) -> String {
        format!("{},{},{:.3}", self.pipeline, self.stage, self.seconds)
    }
}

pub fn write_cost_csv<W: Write>(mut w: W, rows: &[CostRow]) -> std::io::Result<()> {
    writeln!(w, "{}", CostRow::CSV_HEADER)?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Settings of [`training_cost_report`].
#[derive(Clone, Debug)]
pub struct CostConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub spec: CandidateSpec,
    /// Optimizer steps of the stage-2 re-ranker.
    pub reranker_steps: usize,
    pub cand_len_cap: usize,
}

/// Wall time of each training stage: generator training, offline candidate
/// preprocessing and re-ranker training for the two-stage pipeline, and the
/// single joint run for CoLo. Both pipelines get the same step budget for
/// the summarizer.
pub fn training_cost_report(dataset: &Dataset, cfg: &CostConfig) -> Result<Vec<CostRow>> {
    let seed = cfg.train.seed;
    let row = |p: &str, s: &str, t: Instant| CostRow {
        pipeline: p.into(),
        stage: s.into(),
        seconds: t.elapsed().as_secs_f64(),
    };
    let mut rows = Vec::new();

    let start = Instant::now();
    let model = ExtractiveModel::new(cfg.encoder.clone(), seed)?;
    let mut t = Trainer::new(model, dataset, cfg.train.clone(), cfg.spec.clone())?;
    t.run(dataset, cfg.train.total_steps(), crate::training::RankSource::None, &mut |_, _| Ok(()))?;
    rows.push(row("two_stage", "stage1_generator", start));

    let start = Instant::now();
    let cache = OfflineCache::build(&t.model, dataset, &cfg.spec, cfg.train.discriminator)?;
    rows.push(row("two_stage", "offline_preprocessing", start));

    let start = Instant::now();
    let mut reranker = Reranker::new(Reranker::config_for(&cfg.encoder, cfg.cand_len_cap), seed ^ 1, cfg.cand_len_cap)?;
    train_reranker(&mut reranker, dataset, &cache, &cfg.train, cfg.reranker_steps)?;
    rows.push(row("two_stage", "stage2_reranker", start));

    let start = Instant::now();
    let model = ExtractiveModel::new(cfg.encoder.clone(), seed)?;
    crate::training::train(model, dataset, &cfg.train, &cfg.spec, &mut |_, _| Ok(()))?;
    rows.push(row("colo", "joint", start));
    Ok(rows)
}

/// Time of building the offline candidate cache alone.
pub fn preprocessing_seconds(model: &ExtractiveModel, dataset: &Dataset, cfg: &CostConfig) -> Result<f64> {
    let start = Instant::now();
    OfflineCache::build(model, dataset, &cfg.spec, cfg.train.discriminator)?;
    Ok(start.elapsed().as_secs_f64())
}
