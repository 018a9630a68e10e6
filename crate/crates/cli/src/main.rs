mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use colo::abstractive::{evaluate_abs, write_abs_eval_csv, write_decoded_jsonl, AbsTrainer, SearchConfig, Seq2SeqModel};
use colo::bench::{
    benchmark, train_reranker, training_cost_report, write_bench_csv, write_cost_csv, BenchSystem, CostConfig, Reranker,
};
use colo::corpus::{load_jsonl, split_words, synth_corpus, write_jsonl, Dataset, SynthSpec, Vocabulary};
use colo::encoder::ExtractiveModel;
use colo::inference::{evaluate, export_candidate_embeddings, viz_svg, write_eval_csv, EvalConfig, EvalModels, SystemKind, VizRow};
use colo::metrics::PairScores;
use colo::training::{train_bce_only, train_naive_offline, OfflineCache, RankSource, StepReport, Trainer};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "colo", version, about = "One-stage contrastive re-ranking for summarization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus as train.jsonl and test.jsonl.
    Synth(Common),
    /// Train the extractive model with online ranking.
    TrainExt(TrainExtArgs),
    /// Train the naive one-stage baseline on offline candidates.
    TrainNaive(DataArgs),
    /// Train the toy sequence-to-sequence model.
    TrainAbs(DataArgs),
    /// Evaluate extractive systems on a dataset.
    Eval(EvalArgs),
    /// Decode and evaluate the abstractive model.
    EvalAbs(ModelArgs),
    /// Time one-stage against two-stage selection.
    Bench(BenchArgs),
    /// Time each training stage of both pipelines.
    Cost(DataArgs),
    /// Export candidate embeddings projected to 2-D.
    Viz(VizArgs),
    /// Score candidate summaries against references.
    Score(ScoreArgs),
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    common: Common,
    /// JSONL dataset; the synthesized training split is used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct TrainExtArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Also train a BCE-only baseline for the top-k system.
    #[arg(long)]
    baseline: bool,
    /// Also train a two-stage re-ranker for this many steps on the baseline's candidates.
    #[arg(long, default_value_t = 0)]
    reranker_steps: usize,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    /// JSONL dataset; the synthesized test split is used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Checkpoint for the top-k system; the main checkpoint when absent.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Re-ranker checkpoint for the two_stage system.
    #[arg(long)]
    reranker: Option<PathBuf>,
    /// Comma-separated systems, e.g. colo_ext,classifier_topk,lead,oracle.
    #[arg(long, value_delimiter = ',')]
    systems: Option<Vec<SystemKind>>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Re-ranker checkpoint; an untrained re-ranker is timed when absent.
    #[arg(long)]
    reranker: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Also write viz.svg for the first exported document.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    /// Candidate text file, one summary per line.
    #[arg(long, requires = "reference", conflicts_with = "pairs")]
    candidates: Option<PathBuf>,
    /// Reference text file, line-aligned with --candidates.
    #[arg(long, requires = "candidates")]
    reference: Option<PathBuf>,
    /// JSONL with {"id", "candidate", "reference"} per line.
    #[arg(long)]
    pairs: Option<PathBuf>,
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    name: &'static str,
}

impl Run {
    fn start(common: &Common, name: &'static str) -> anyhow::Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &common.out {
            cfg.out = out.clone();
        }
        cfg.resolve_seeds();
        let out = cfg.out.clone();
        fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
        Ok(Self { cfg, out, name })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    fn create(&self, file: &str) -> anyhow::Result<BufWriter<File>> {
        let p = self.path(file);
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("cannot write {}", p.display()))?))
    }

    /// Writes the config with every applied default next to the outputs.
    fn echo_config(&self) -> anyhow::Result<()> {
        let file = format!("{}.config.toml", self.name);
        fs::write(self.path(&file), self.cfg.to_toml()?)?;
        Ok(())
    }

    fn synthesized(&self, spec: &SynthSpec, test_docs: usize) -> anyhow::Result<(Dataset, Dataset)> {
        let ds = synth_corpus(spec, self.cfg.seed)?;
        if test_docs >= ds.len() {
            bail!("test_docs {test_docs} leaves no training documents out of {}", ds.len());
        }
        Ok(ds.split_at(ds.len() - test_docs))
    }

    fn train_set(&self, data: &Option<PathBuf>) -> anyhow::Result<Dataset> {
        match data {
            Some(p) => Ok(load_jsonl(p, None)?),
            None => Ok(self.synthesized(&self.cfg.corpus, self.cfg.test_docs)?.0),
        }
    }

    /// Evaluation split re-indexed with the checkpoint vocabulary.
    fn test_set(&self, data: &Option<PathBuf>, spec: &SynthSpec, test_docs: usize, vocab: &Vocabulary) -> anyhow::Result<Dataset> {
        match data {
            Some(p) => Ok(load_jsonl(p, Some(vocab))?),
            None => {
                let test = self.synthesized(spec, test_docs)?.1;
                Ok(Dataset::from_raw(&test.to_raw(), vocab.clone()))
            }
        }
    }
}

fn checkpoint_arg(p: &Option<PathBuf>) -> anyhow::Result<&Path> {
    p.as_deref().ok_or_else(|| anyhow!("missing --checkpoint"))
}

fn log_writer(run: &Run) -> anyhow::Result<impl FnMut(&StepReport) -> colo::Result<()>> {
    let mut w = run.create("train_log.csv")?;
    writeln!(w, "{}", StepReport::CSV_HEADER)?;
    Ok(move |r: &StepReport| {
        writeln!(w, "{}", r.csv_row()).and_then(|_| w.flush()).map_err(|e| colo::Error::Invalid(format!("train log: {e}")))
    })
}

fn synth(common: &Common) -> anyhow::Result<()> {
    let run = Run::start(common, "synth")?;
    let (train, test) = run.synthesized(&run.cfg.corpus, run.cfg.test_docs)?;
    write_jsonl(&run.path("train.jsonl"), &train.to_raw())?;
    write_jsonl(&run.path("test.jsonl"), &test.to_raw())?;
    run.echo_config()?;
    eprintln!("wrote {} train and {} test documents to {}", train.len(), test.len(), run.out.display());
    Ok(())
}

/// Checkpoint metadata: the training-set mean gold count sets the default k.
fn train_meta(data: &Dataset) -> serde_json::Value {
    serde_json::json!({ "mean_gold_sentences": data.mean_gold_sentences() })
}

fn train_ext(args: &TrainExtArgs) -> anyhow::Result<()> {
    let mut run = Run::start(&args.data.common, "train-ext")?;
    let data = run.train_set(&args.data.data)?;
    run.cfg.encoder = run.cfg.encoder.clone().resolve(&data.vocab)?;
    run.echo_config()?;
    let cfg = &run.cfg;
    let model = ExtractiveModel::new(cfg.encoder.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, &data, cfg.training.clone(), cfg.candidates.clone())?;
    let mut log = log_writer(&run)?;
    let every = cfg.training.checkpoint_every;
    let ckpt_dir = run.out.clone();
    let vocab = data.vocab.clone();
    let meta = train_meta(&data);
    let mut cb = |r: &StepReport, m: &ExtractiveModel| {
        log(r)?;
        if every > 0 && r.step % every == 0 {
            m.save(&ckpt_dir.join(format!("colo.step{}.ckpt", r.step)), &vocab, meta.clone())?;
        }
        Ok(())
    };
    trainer.warmup(&data, &mut cb)?;
    let snapshot = trainer.clone();
    trainer.run(&data, cfg.training.combined_steps, RankSource::Online, &mut cb)?;
    trainer.model.save(&run.path("colo.ckpt"), &data.vocab, train_meta(&data))?;

    if args.baseline || args.reranker_steps > 0 {
        let steps = cfg.training.combined_steps;
        let base = train_bce_only(snapshot, &data, steps, &mut |_, _| Ok(()))?;
        base.save(&run.path("baseline.ckpt"), &data.vocab, train_meta(&data))?;
        if args.reranker_steps > 0 {
            let cache = OfflineCache::build(&base, &data, &cfg.candidates, cfg.training.discriminator)?;
            let cap = cfg.bench.cand_len_cap;
            let mut reranker = Reranker::new(Reranker::config_for(&cfg.encoder, cap), cfg.seed ^ 1, cap)?;
            train_reranker(&mut reranker, &data, &cache, &cfg.training, args.reranker_steps)?;
            reranker.save(&run.path("reranker.ckpt"), &data.vocab)?;
        }
    }
    Ok(())
}

fn train_naive(args: &DataArgs) -> anyhow::Result<()> {
    let mut run = Run::start(&args.common, "train-naive")?;
    let data = run.train_set(&args.data)?;
    run.cfg.encoder = run.cfg.encoder.clone().resolve(&data.vocab)?;
    run.echo_config()?;
    let cfg = &run.cfg;
    let model = ExtractiveModel::new(cfg.encoder.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, &data, cfg.training.clone(), cfg.candidates.clone())?;
    let mut log = log_writer(&run)?;
    let mut cb = |r: &StepReport, _: &ExtractiveModel| log(r);
    trainer.warmup(&data, &mut cb)?;
    let (model, _) = train_naive_offline(trainer, &data, &mut cb)?;
    model.save(&run.path("naive.ckpt"), &data.vocab, train_meta(&data))?;
    Ok(())
}

fn train_abs(args: &DataArgs) -> anyhow::Result<()> {
    let mut run = Run::start(&args.common, "train-abs")?;
    let abs = run.cfg.abstractive.clone();
    let data = match &args.data {
        Some(p) => load_jsonl(p, None)?,
        None => run.synthesized(&abs.corpus, abs.test_docs)?.0,
    };
    run.cfg.abstractive.model = abs.model.resolve(&data.vocab)?;
    run.echo_config()?;
    let cfg = &run.cfg.abstractive;
    let model = Seq2SeqModel::new(cfg.model.clone(), run.cfg.seed)?;
    let mut trainer = AbsTrainer::new(model, cfg.train.clone())?;
    let mut log = log_writer(&run)?;
    trainer.train(&data, &mut log)?;
    trainer.model.save(&run.path("abs.ckpt"), &data.vocab)?;
    Ok(())
}

fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let run = Run::start(&args.model.common, "eval")?;
    let (colo_model, vocab, meta) = ExtractiveModel::load(checkpoint_arg(&args.model.checkpoint)?)?;
    let baseline = args.baseline.as_deref().map(ExtractiveModel::load).transpose()?.map(|(m, _, _)| m);
    let reranker = args.reranker.as_deref().map(Reranker::load).transpose()?.map(|(r, _)| r);
    let cfg = &run.cfg;
    let test = run.test_set(&args.model.data, &cfg.corpus, cfg.test_docs, &vocab)?;
    let systems = args.systems.clone().unwrap_or_else(|| cfg.eval.systems.clone());
    let k = match args.k.unwrap_or(cfg.eval.k) {
        0 => {
            let mean = meta
                .get("mean_gold_sentences")
                .and_then(|v| v.as_f64())
                .unwrap_or_else(|| test.mean_gold_sentences());
            (mean.round() as usize).max(1)
        }
        k => k,
    };
    let ec = EvalConfig {
        spec: cfg.candidates.clone(),
        k,
        discriminator: cfg.eval.discriminator,
        seed: cfg.seed,
    };
    let models = EvalModels {
        colo: &colo_model,
        baseline: baseline.as_ref(),
        reranker: reranker.as_ref(),
    };
    let rows = evaluate(&test, &systems, models, &ec)?;
    write_eval_csv(run.create("eval.csv")?, &rows)?;
    run.echo_config()?;
    Ok(())
}

fn eval_abs(args: &ModelArgs) -> anyhow::Result<()> {
    let run = Run::start(&args.common, "eval-abs")?;
    let (model, vocab) = Seq2SeqModel::load(checkpoint_arg(&args.checkpoint)?)?;
    let abs = &run.cfg.abstractive;
    let test = run.test_set(&args.data, &abs.corpus, abs.test_docs, &vocab)?;
    let search = SearchConfig {
        beam_size: abs.model.beam_size,
        num_groups: abs.model.num_groups,
        diversity_penalty: abs.model.diversity_penalty,
        max_len: abs.model.max_decode_len.min(model.config.max_len),
        dedupe: abs.model.dedupe_beams,
    };
    let (rows, records) = evaluate_abs(&model, &test, &search)?;
    write_abs_eval_csv(run.create("eval_abs.csv")?, &rows)?;
    write_decoded_jsonl(run.create("decoded.jsonl")?, &records)?;
    run.echo_config()?;
    Ok(())
}

fn bench(args: &BenchArgs) -> anyhow::Result<()> {
    let run = Run::start(&args.model.common, "bench")?;
    let (generator, vocab, _) = ExtractiveModel::load(checkpoint_arg(&args.model.checkpoint)?)?;
    let cfg = &run.cfg;
    let reranker = match &args.reranker {
        Some(p) => Reranker::load(p)?.0,
        None => {
            let cap = cfg.bench.cand_len_cap;
            Reranker::new(Reranker::config_for(&generator.config, cap), cfg.seed ^ 1, cap)?
        }
    };
    let test = run.test_set(&args.model.data, &cfg.corpus, cfg.test_docs, &vocab)?;
    let systems = [BenchSystem::NoRanking, BenchSystem::OneStage, BenchSystem::TwoStage];
    let rows = benchmark(&systems, &test, &generator, &reranker, &cfg.bench)?;
    write_bench_csv(run.create("bench.csv")?, &rows)?;
    run.echo_config()?;
    Ok(())
}

fn cost(args: &DataArgs) -> anyhow::Result<()> {
    let mut run = Run::start(&args.common, "cost")?;
    let data = run.train_set(&args.data)?;
    run.cfg.encoder = run.cfg.encoder.clone().resolve(&data.vocab)?;
    run.echo_config()?;
    let cfg = &run.cfg;
    let cc = CostConfig {
        encoder: cfg.encoder.clone(),
        train: cfg.training.clone(),
        spec: cfg.candidates.clone(),
        reranker_steps: cfg.cost.reranker_steps,
        cand_len_cap: cfg.bench.cand_len_cap,
    };
    let rows = training_cost_report(&data, &cc)?;
    write_cost_csv(run.create("cost.csv")?, &rows)?;
    Ok(())
}

fn viz(args: &VizArgs) -> anyhow::Result<()> {
    let run = Run::start(&args.model.common, "viz")?;
    let (model, vocab, _) = ExtractiveModel::load(checkpoint_arg(&args.model.checkpoint)?)?;
    let cfg = &run.cfg;
    let test = run.test_set(&args.model.data, &cfg.corpus, cfg.test_docs, &vocab)?;
    let n = match cfg.eval.viz_docs {
        0 => test.len(),
        n => n.min(test.len()),
    };
    let mut w = run.create("viz.csv")?;
    writeln!(w, "{}", VizRow::CSV_HEADER)?;
    let mut first: Option<Vec<VizRow>> = None;
    let mut skipped = 0;
    for doc in &test.docs[..n] {
        match export_candidate_embeddings(&model, doc, &cfg.eval.viz_candidates, cfg.eval.discriminator) {
            Ok((rows, _)) => {
                for r in &rows {
                    writeln!(w, "{}", r.csv_row())?;
                }
                first.get_or_insert(rows);
            }
            Err(colo::Error::TooFewPoints(_)) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    w.flush()?;
    if skipped > 0 {
        eprintln!("skipped {skipped} documents with fewer than 3 candidates");
    }
    if args.svg {
        let rows = first.ok_or_else(|| anyhow!("no document had enough candidates to plot"))?;
        fs::write(run.path("viz.svg"), viz_svg(&rows))?;
    }
    run.echo_config()?;
    Ok(())
}

#[derive(serde::Deserialize)]
struct PairRecord {
    id: String,
    candidate: String,
    reference: String,
}

fn score(args: &ScoreArgs) -> anyhow::Result<()> {
    let run = Run::start(&args.common, "score")?;
    let pairs: Vec<PairRecord> = match (&args.pairs, &args.candidates, &args.reference) {
        (Some(p), _, _) => fs::read_to_string(p)
            .with_context(|| format!("cannot read {}", p.display()))?
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| anyhow!("{}: line {}: {e}", p.display(), i + 1)))
            .collect::<anyhow::Result<_>>()?,
        (None, Some(c), Some(r)) => {
            let read = |p: &PathBuf| -> anyhow::Result<Vec<String>> {
                Ok(fs::read_to_string(p)
                    .with_context(|| format!("cannot read {}", p.display()))?
                    .lines()
                    .map(str::to_string)
                    .collect())
            };
            let (cands, refs) = (read(c)?, read(r)?);
            if cands.len() != refs.len() {
                bail!("{} has {} lines but {} has {}", c.display(), cands.len(), r.display(), refs.len());
            }
            cands
                .into_iter()
                .zip(refs)
                .enumerate()
                .map(|(i, (candidate, reference))| PairRecord {
                    id: (i + 1).to_string(),
                    candidate,
                    reference,
                })
                .collect()
        }
        _ => bail!("missing --pairs or --candidates/--reference"),
    };
    let mut w = run.create("score.csv")?;
    writeln!(w, "id,r1,r2,rl,js2")?;
    for p in &pairs {
        let s = PairScores::compute(&split_words(&p.candidate), &split_words(&p.reference));
        writeln!(w, "{},{:.6},{:.6},{:.6},{:.6}", p.id, s.r1, s.r2, s.rl, s.js2)?;
    }
    w.flush()?;
    run.echo_config()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(c) => synth(c),
        Command::TrainExt(a) => train_ext(a),
        Command::TrainNaive(a) => train_naive(a),
        Command::TrainAbs(a) => train_abs(a),
        Command::Eval(a) => eval(a),
        Command::EvalAbs(a) => eval_abs(a),
        Command::Bench(a) => bench(a),
        Command::Cost(a) => cost(a),
        Command::Viz(a) => viz(a),
        Command::Score(a) => score(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
