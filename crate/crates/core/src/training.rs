//! Losses and the two extractive training regimes: online sampling (CoLo)
//! and the naive offline-sampled baseline.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, noam_lr, AdamState, GradBuffer, Graph, Tensor, Var};
use crate::candidates::{candidate_pool, greedy_oracle_labels, is_degenerate, rank_candidates, CandidateSpec};
use crate::corpus::{build_model_input, sentences_input, Dataset, Document};
use crate::encoder::{candidate_embedding_var, ExtractiveModel};
use crate::error::{Error, Result};
use crate::metrics::DiscriminatorKind;

const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub warmup_steps_bce: usize,
    pub combined_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub discriminator: DiscriminatorKind,
    pub rank_loss_normalize: bool,
    pub margin_scaled_by_rank_gap: bool,
    /// Multiplier of the inverse-square-root schedule.
    pub lr_factor: f64,
    /// Linear warmup steps of the learning-rate schedule.
    pub lr_warmup: usize,
    /// Maximum positive labels per document; 0 means `max(N)`.
    pub label_max_sents: usize,
    /// Checkpoint interval in steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.01,
            warmup_steps_bce: 300,
            combined_steps: 700,
            batch_size: 4,
            seed: 0,
            discriminator: DiscriminatorKind::Rouge12Mean,
            rank_loss_normalize: false,
            margin_scaled_by_rank_gap: false,
            lr_factor: 0.1,
            lr_warmup: 100,
            label_max_sents: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::Invalid("margin must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        if !(self.lr_factor > 0.0) {
            return Err(Error::Invalid("lr_factor must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.warmup_steps_bce + self.combined_steps
    }

    pub fn rank_options(&self) -> RankLossOptions {
        RankLossOptions {
            margin: self.margin,
            normalize: self.rank_loss_normalize,
            scaled: self.margin_scaled_by_rank_gap,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankLossOptions {
    pub margin: f64,
    pub normalize: bool,
    pub scaled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub l_sum: f64,
    pub l_rank: f64,
    pub total: f64,
    /// Candidates scored across the batch.
    pub n_cands: usize,
    pub ms: f64,
    /// Documents in the batch that fell back to the summary loss alone.
    pub degenerate: usize,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "step,l_sum,l_rank,total,n_cands,ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{},{:.3}",
            self.step, self.l_sum, self.l_rank, self.total, self.n_cands, self.ms
        )
    }
}

pub fn write_reports_csv<W: Write>(mut w: W, reports: &[StepReport]) -> std::io::Result<()> {
    writeln!(w, "{}", StepReport::CSV_HEADER)?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Mean binary cross entropy of `probs` (shape `[n]`) against 0/1 `labels`,
/// with probabilities clamped to `(eps, 1 - eps)`.
pub fn bce_loss(g: &mut Graph, probs: Var, labels: &[f64]) -> Result<Var> {
    let n = g.value(probs).len();
    if n != labels.len() {
        return Err(Error::shape("bce_loss", format!("{n} probabilities vs {} labels", labels.len())));
    }
    let y = g.constant(Tensor::new(g.shape(probs).to_vec(), labels.to_vec())?);
    let one_minus_y = g.constant(Tensor::new(
        g.shape(probs).to_vec(),
        labels.iter().map(|v| 1.0 - v).collect(),
    )?);
    let p = g.clamp(probs, BCE_EPS, 1.0 - BCE_EPS);
    let log_p = g.log(p);
    let q = g.scale(p, -1.0);
    let q = g.add_scalar(q, 1.0);
    let log_q = g.log(q);
    let a = g.mul(y, log_p)?;
    let b = g.mul(one_minus_y, log_q)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.scale(m, -1.0))
}

/// Plain-value pairwise hinge loss over cosines listed in rank order (best first).
/// Returns `(loss, applied)`; fewer than two candidates gives `(0, false)`.
pub fn ranking_loss_values(cosines: &[f64], opts: RankLossOptions) -> (f64, bool) {
    let m = cosines.len();
    if m < 2 {
        return (0.0, false);
    }
    let mut total = 0.0;
    for j in 1..m {
        for i in 0..j {
            let rho = if opts.scaled {
                opts.margin * (j - i) as f64
            } else {
                opts.margin
            };
            total += (cosines[j] - cosines[i] + rho).max(0.0);
        }
    }
    if opts.normalize {
        total /= (m * (m - 1) / 2) as f64;
    }
    (total, true)
}

/// Pairwise margin ranking loss between the anchor and candidate embeddings
/// ordered by rank (best first): every lower-ranked candidate should be at
/// least the margin less cosine-similar to the anchor than every higher one.
/// `None` when fewer than two candidates are given.
pub fn ranking_loss(g: &mut Graph, anchor: Var, ranked: &[Var], opts: RankLossOptions) -> Result<Option<Var>> {
    let m = ranked.len();
    if m < 2 {
        return Ok(None);
    }
    let cos: Vec<Var> = ranked
        .iter()
        .map(|&e| {
            let c = g.cosine_similarity(anchor, e)?;
            g.reshape(c, vec![1])
        })
        .collect::<Result<_>>()?;
    let cos = g.concat(&cos, 0)?;
    let pairs = m * (m - 1) / 2;
    let mut diff = vec![0.0; pairs * m];
    let mut margins = Vec::with_capacity(pairs);
    let mut row = 0;
    for j in 1..m {
        for i in 0..j {
            diff[row * m + j] = 1.0;
            diff[row * m + i] = -1.0;
            margins.push(if opts.scaled {
                opts.margin * (j - i) as f64
            } else {
                opts.margin
            });
            row += 1;
        }
    }
    let d = g.constant(Tensor::matrix(pairs, m, diff)?);
    let cos_col = g.reshape(cos, vec![m, 1])?;
    let gaps = g.matmul(d, cos_col)?;
    let margins = g.constant(Tensor::new(vec![pairs, 1], margins)?);
    let gaps = g.add(gaps, margins)?;
    let h = g.hinge(gaps);
    let total = g.sum(h);
    Ok(Some(if opts.normalize {
        g.scale(total, 1.0 / pairs as f64)
    } else {
        total
    }))
}

/// Loss components of one document.
pub struct DocLoss {
    pub total: Var,
    pub l_sum: f64,
    pub l_rank: f64,
    pub n_cands: usize,
    pub degenerate: bool,
}

/// How the ranking term of a step gets its candidates.
#[derive(Clone, Copy)]
pub enum RankSource<'a> {
    /// Summary loss only.
    None,
    /// Candidates sampled from the current parameters.
    Online,
    /// Ranked index sets cached from a frozen snapshot.
    Offline(&'a OfflineCache),
}

/// Builds the loss of one document on `g`: BCE plus (optionally) the
/// ranking loss over candidate embeddings.
pub fn document_loss(
    g: &mut Graph,
    model: &ExtractiveModel,
    doc: &Document,
    labels: &[f64],
    spec: &CandidateSpec,
    cfg: &TrainConfig,
    source: RankSource,
) -> Result<DocLoss> {
    let input = sentences_input(&doc.sentences, model.config.max_len)?;
    let vars = model.forward(g, &input)?;
    let n = input.num_sentences();
    let l_sum = bce_loss(g, vars.probs, &labels[..n])?;
    let sum_value = g.value(l_sum).item();

    let ranked_sets: Vec<Vec<usize>> = match source {
        RankSource::None => Vec::new(),
        RankSource::Online => {
            if is_degenerate(n, spec) {
                Vec::new()
            } else {
                let pool = candidate_pool(g.data(vars.probs), spec);
                rank_candidates(pool, doc, cfg.discriminator)
                    .into_iter()
                    .map(|c| c.indices)
                    .collect()
            }
        }
        RankSource::Offline(cache) => cache.get(&doc.id)?.to_vec(),
    };
    let n_cands = ranked_sets.len();
    let embs: Vec<Var> = ranked_sets
        .iter()
        .map(|idx| candidate_embedding_var(g, vars.h, idx))
        .collect::<Result<_>>()?;
    let rank = ranking_loss(g, vars.z_x, &embs, cfg.rank_options())?;
    let ranked = !matches!(source, RankSource::None);
    Ok(match rank {
        Some(r) => {
            let l_rank = g.value(r).item();
            DocLoss {
                total: g.add(l_sum, r)?,
                l_sum: sum_value,
                l_rank,
                n_cands,
                degenerate: false,
            }
        }
        None => DocLoss {
            total: l_sum,
            l_sum: sum_value,
            l_rank: 0.0,
            n_cands,
            degenerate: ranked,
        },
    })
}

/// Ranked candidate index sets per document id, computed once from a frozen model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OfflineCache {
    sets: HashMap<String, Vec<Vec<usize>>>,
}

impl OfflineCache {
    pub fn build(model: &ExtractiveModel, dataset: &Dataset, spec: &CandidateSpec, kind: DiscriminatorKind) -> Result<Self> {
        let mut sets = HashMap::with_capacity(dataset.len());
        for doc in &dataset.docs {
            let input = build_model_input(doc, &dataset.vocab, model.config.max_len)?;
            let out = model.encode(&input)?;
            let ranked = if is_degenerate(out.num_sentences(), spec) {
                Vec::new()
            } else {
                rank_candidates(candidate_pool(&out.sentence_probs, spec), doc, kind)
                    .into_iter()
                    .map(|c| c.indices)
                    .collect()
            };
            sets.insert(doc.id.clone(), ranked);
        }
        Ok(Self { sets })
    }

    pub fn get(&self, doc_id: &str) -> Result<&[Vec<usize>]> {
        self.sets
            .get(doc_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::CacheMiss(doc_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// Model plus optimizer state and a deterministic document stream.
/// Cloning a trainer forks training from the same point.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ExtractiveModel,
    pub cfg: TrainConfig,
    pub spec: CandidateSpec,
    pub step: usize,
    adam: AdamState,
    labels: Vec<Vec<f64>>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: ExtractiveModel, dataset: &Dataset, cfg: TrainConfig, spec: CandidateSpec) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        if dataset.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        let max_sents = if cfg.label_max_sents == 0 {
            spec.max_size()
        } else {
            cfg.label_max_sents
        };
        let labels = dataset
            .docs
            .iter()
            .map(|d| greedy_oracle_labels(d, cfg.discriminator, max_sents))
            .collect();
        let adam = AdamState::new(&model.params);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_6e6b);
        Ok(Self {
            model,
            cfg,
            spec,
            step: 0,
            adam,
            labels,
            order: Vec::new(),
            cursor: 0,
            rng,
        })
    }

    pub fn labels(&self, doc_index: usize) -> &[f64] {
        &self.labels[doc_index]
    }

    fn next_batch(&mut self, n_docs: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        while batch.len() < self.cfg.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..n_docs).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// One optimizer step over the next batch. The batch loss is the mean of
    /// the per-document losses.
    pub fn train_step(&mut self, dataset: &Dataset, source: RankSource) -> Result<StepReport> {
        let start = Instant::now();
        let batch = self.next_batch(dataset.len());
        let mut grads = GradBuffer::zeros_like(&self.model.params);
        let scale = 1.0 / batch.len() as f64;
        let (mut l_sum, mut l_rank, mut n_cands, mut degenerate) = (0.0, 0.0, 0, 0);
        for &i in &batch {
            let mut g = Graph::new(&self.model.params);
            let loss = document_loss(
                &mut g,
                &self.model,
                &dataset.docs[i],
                &self.labels[i],
                &self.spec,
                &self.cfg,
                source,
            )?;
            l_sum += loss.l_sum * scale;
            l_rank += loss.l_rank * scale;
            n_cands += loss.n_cands;
            degenerate += usize::from(loss.degenerate);
            g.backward(loss.total)?.accumulate_into(&mut grads, scale);
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

    /// Runs `steps` steps with the same candidate source.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        steps: usize,
        source: RankSource,
        on_step: &mut dyn FnMut(&StepReport, &ExtractiveModel) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            let report = self.train_step(dataset, source)?;
            on_step(&report, &self.model)?;
        }
        Ok(())
    }

    /// BCE-only warmup phase.
    pub fn warmup(&mut self, dataset: &Dataset, on_step: &mut dyn FnMut(&StepReport, &ExtractiveModel) -> Result<()>) -> Result<()> {
        let steps = self.cfg.warmup_steps_bce.saturating_sub(self.step);
        self.run(dataset, steps, RankSource::None, on_step)
    }
}

/// Full CoLo schedule: BCE warmup, then BCE plus online ranking loss.
pub fn train(
    model: ExtractiveModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    spec: &CandidateSpec,
    on_step: &mut dyn FnMut(&StepReport, &ExtractiveModel) -> Result<()>,
) -> Result<ExtractiveModel> {
    let mut t = Trainer::new(model, dataset, cfg.clone(), spec.clone())?;
    t.warmup(dataset, on_step)?;
    t.run(dataset, cfg.combined_steps, RankSource::Online, on_step)?;
    Ok(t.model)
}

/// Naive one-stage baseline: candidate sets are sampled once from the
/// BCE-trained model in `trainer` and reused at every multi-task step.
pub fn train_naive_offline(
    mut trainer: Trainer,
    dataset: &Dataset,
    on_step: &mut dyn FnMut(&StepReport, &ExtractiveModel) -> Result<()>,
) -> Result<(ExtractiveModel, OfflineCache)> {
    let cache = OfflineCache::build(&trainer.model, dataset, &trainer.spec, trainer.cfg.discriminator)?;
    let steps = trainer.cfg.combined_steps;
    trainer.run(dataset, steps, RankSource::Offline(&cache), on_step)?;
    Ok((trainer.model, cache))
}

/// BCE-only continuation for the sentence-level baseline.
pub fn train_bce_only(
    mut trainer: Trainer,
    dataset: &Dataset,
    steps: usize,
    on_step: &mut dyn FnMut(&StepReport, &ExtractiveModel) -> Result<()>,
) -> Result<ExtractiveModel> {
    trainer.run(dataset, steps, RankSource::None, on_step)?;
    Ok(trainer.model)
}

pub fn no_callback() -> impl FnMut(&StepReport, &ExtractiveModel) -> Result<()> {
    |_, _| Ok(())
}
