//! Candidate selection, corpus evaluation and the candidate-embedding export.

use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::bench::Reranker;
use crate::candidates::{
    candidate_pool, full_space_oracle, is_degenerate, lead, oracle_candidate, rank_candidates, Candidate,
    CandidateSpec,
};
use crate::corpus::{sentences_input, Dataset, Document};
use crate::encoder::{candidate_embedding, EncoderOutput, ExtractiveModel};
use crate::error::{Error, Result};
use crate::metrics::{DiscriminatorKind, PairScores};
use crate::parallel::par_map;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    ColoExt,
    #[serde(rename = "classifier_topk")]
    ClassifierTopK,
    Lead,
    #[serde(rename = "oracle")]
    OracleSet,
    TwoStage,
}

impl SystemKind {
    pub const ALL: [SystemKind; 5] = [
        SystemKind::ColoExt,
        SystemKind::ClassifierTopK,
        SystemKind::Lead,
        SystemKind::OracleSet,
        SystemKind::TwoStage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::ColoExt => "colo_ext",
            SystemKind::ClassifierTopK => "classifier_topk",
            SystemKind::Lead => "lead",
            SystemKind::OracleSet => "oracle",
            SystemKind::TwoStage => "two_stage",
        }
    }
}

impl FromStr for SystemKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        SystemKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown system {s}"))
    }
}

/// Pool, cosine to anchor per candidate, and the selected position.
pub fn colo_scores(output: &EncoderOutput, spec: &CandidateSpec) -> Result<(Vec<Candidate>, Vec<f64>)> {
    let pool = if is_degenerate(output.num_sentences(), spec) {
        vec![Candidate::new((0..output.num_sentences()).collect())]
    } else {
        candidate_pool(&output.sentence_probs, spec)
    };
    let cos = pool
        .iter()
        .map(|c| Ok(kernels::cosine(&output.z_x, &candidate_embedding(output, &c.indices)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok((pool, cos))
}

/// Position of the highest score; ties go to the lexicographically smaller candidate.
pub fn argmax_candidate(pool: &[Candidate], scores: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..pool.len() {
        let better = scores[i] > scores[best]
            || (scores[i] == scores[best] && pool[i].indices < pool[best].indices);
        if better {
            best = i;
        }
    }
    best
}

/// Selection from an already computed encoder output.
pub fn select_colo_output(output: &EncoderOutput, spec: &CandidateSpec) -> Result<Candidate> {
    let (pool, cos) = colo_scores(output, spec)?;
    let best = argmax_candidate(&pool, &cos);
    let mut c = pool[best].clone();
    c.disc_score = cos[best];
    Ok(c)
}

/// The candidate whose pooled embedding is most cosine-similar to the document
/// representation, over the same clipped pool used in training.
pub fn select_colo(model: &ExtractiveModel, doc: &Document, spec: &CandidateSpec) -> Result<Candidate> {
    let input = sentences_input(&doc.sentences, model.config.max_len)?;
    select_colo_output(&model.encode(&input)?, spec)
}

/// The `k` most probable sentences; ties go to the lower index.
pub fn topk_from_probs(probs: &[f64], k: usize) -> Candidate {
    Candidate::new(crate::candidates::clip_topk(probs, k.max(1)))
}

pub fn select_topk(model: &ExtractiveModel, doc: &Document, k: usize) -> Result<Candidate> {
    let input = sentences_input(&doc.sentences, model.config.max_len)?;
    Ok(topk_from_probs(&model.encode(&input)?.sentence_probs, k))
}

/// Models available to [`evaluate`].
#[derive(Clone, Copy)]
pub struct EvalModels<'a> {
    pub colo: &'a ExtractiveModel,
    /// Sentence-level model for the top-k system; `colo` when absent.
    pub baseline: Option<&'a ExtractiveModel>,
    /// Separate re-ranker for the two-stage system.
    pub reranker: Option<&'a Reranker>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub spec: CandidateSpec,
    /// Sentences kept by the top-k and LEAD systems.
    pub k: usize,
    pub discriminator: DiscriminatorKind,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub system: SystemKind,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub js2: f64,
    pub n_docs: usize,
    pub seed: u64,
}

impl EvalRow {
    pub const CSV_HEADER: &'static str = "system,r1,r2,rl,js2,n_docs,seed";

    pub fn rouge12(&self) -> f64 {
        (self.r1 + self.r2) / 2.0
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.system.name(),
            self.r1,
            self.r2,
            self.rl,
            self.js2,
            self.n_docs,
            self.seed
        )
    }
}

pub fn write_eval_csv<W: Write>(mut w: W, rows: &[EvalRow]) -> std::io::Result<()> {
    writeln!(w, "{}", EvalRow::CSV_HEADER)?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Selected sentence indices of `system` on one document.
pub fn select(system: SystemKind, doc: &Document, models: EvalModels, cfg: &EvalConfig) -> Result<Candidate> {
    match system {
        SystemKind::ColoExt => select_colo(models.colo, doc, &cfg.spec),
        SystemKind::ClassifierTopK => select_topk(models.baseline.unwrap_or(models.colo), doc, cfg.k),
        SystemKind::Lead => Ok(lead(doc, cfg.k)),
        SystemKind::OracleSet => {
            if cfg.spec.full_space_oracle {
                full_space_oracle(doc, &cfg.spec, cfg.discriminator)
            } else {
                let input = sentences_input(&doc.sentences, models.colo.config.max_len)?;
                let out = models.colo.encode(&input)?;
                oracle_candidate(candidate_pool(&out.sentence_probs, &cfg.spec), doc, cfg.discriminator)
            }
        }
        SystemKind::TwoStage => {
            let reranker = models
                .reranker
                .ok_or_else(|| Error::Invalid("two_stage needs a re-ranker model".into()))?;
            let generator = models.baseline.unwrap_or(models.colo);
            Ok(crate::bench::rerank_two_stage(generator, reranker, doc, &cfg.spec)?.candidate)
        }
    }
}

/// Per-document scores of every system, in dataset order.
pub fn score_documents(
    dataset: &Dataset,
    systems: &[SystemKind],
    models: EvalModels,
    cfg: &EvalConfig,
) -> Result<Vec<Vec<PairScores>>> {
    if systems.is_empty() {
        return Err(Error::Invalid("no systems to evaluate".into()));
    }
    let per_doc = par_map(&dataset.docs, |doc| {
        systems
            .iter()
            .map(|&s| {
                let c = select(s, doc, models, cfg)?;
                Ok(PairScores::compute(&doc.extract(&c.indices), &doc.reference))
            })
            .collect::<Result<Vec<_>>>()
    });
    per_doc.into_iter().collect()
}

/// Corpus means of R-1/R-2/R-L F1 and JS-2 per system.
pub fn evaluate(dataset: &Dataset, systems: &[SystemKind], models: EvalModels, cfg: &EvalConfig) -> Result<Vec<EvalRow>> {
    let per_doc = score_documents(dataset, systems, models, cfg)?;
    let n = per_doc.len().max(1) as f64;
    Ok(systems
        .iter()
        .enumerate()
        .map(|(k, &system)| {
            let mean = |f: fn(&PairScores) -> f64| per_doc.iter().map(|d| f(&d[k])).sum::<f64>() / n;
            EvalRow {
                system,
                r1: mean(|s| s.r1),
                r2: mean(|s| s.r2),
                rl: mean(|s| s.rl),
                js2: mean(|s| s.js2),
                n_docs: per_doc.len(),
                seed: cfg.seed,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VizRow {
    pub doc_id: String,
    /// Empty for the anchor row.
    pub cand_indices: Vec<usize>,
    /// 0 for the anchor, then 1 (top) to 3 (bottom) by discriminator rank tercile.
    pub group: usize,
    pub x: f64,
    pub y: f64,
    pub cos: f64,
    pub rank: usize,
}

impl VizRow {
    pub const CSV_HEADER: &'static str = "doc_id,cand_indices,group,x,y,cos";

    pub fn csv_row(&self) -> String {
        let idx: Vec<String> = self.cand_indices.iter().map(usize::to_string).collect();
        format!(
            "{},{},{},{:.6},{:.6},{:.6}",
            self.doc_id,
            idx.join(" "),
            self.group,
            self.x,
            self.y,
            self.cos
        )
    }
}

/// Tercile group (1 best .. 3 worst) of a 1-based rank among `m`.
pub fn rank_group(rank: usize, m: usize) -> usize {
    1 + 3 * (rank - 1) / m
}

/// Anchor and candidate embeddings projected to 2-D by PCA, each candidate
/// tagged with its discriminator rank tercile and cosine to the anchor.
/// Returns the rows (anchor first) and the raw high-dimensional vectors.
pub fn export_candidate_embeddings(
    model: &ExtractiveModel,
    doc: &Document,
    spec: &CandidateSpec,
    kind: DiscriminatorKind,
) -> Result<(Vec<VizRow>, Vec<Vec<f64>>)> {
    let input = sentences_input(&doc.sentences, model.config.max_len)?;
    let out = model.encode(&input)?;
    let ranked = if is_degenerate(out.num_sentences(), spec) {
        Vec::new()
    } else {
        rank_candidates(candidate_pool(&out.sentence_probs, spec), doc, kind)
    };
    if ranked.len() < 3 {
        return Err(Error::TooFewPoints(ranked.len()));
    }
    let mut points = vec![out.z_x.clone()];
    for c in &ranked {
        points.push(candidate_embedding(&out, &c.indices)?);
    }
    let proj = pca_2d(&points);
    let m = ranked.len();
    let mut rows = vec![VizRow {
        doc_id: doc.id.clone(),
        cand_indices: Vec::new(),
        group: 0,
        x: proj[0][0],
        y: proj[0][1],
        cos: 1.0,
        rank: 0,
    }];
    for (i, c) in ranked.iter().enumerate() {
        rows.push(VizRow {
            doc_id: doc.id.clone(),
            cand_indices: c.indices.clone(),
            group: rank_group(c.rank, m),
            x: proj[i + 1][0],
            y: proj[i + 1][1],
            cos: kernels::cosine(&out.z_x, &points[i + 1]),
            rank: c.rank,
        });
    }
    Ok((rows, points))
}

/// Mean cosine to the anchor of the top and bottom terciles.
pub fn tercile_cosines(rows: &[VizRow]) -> (f64, f64) {
    let mean = |g: usize| {
        let v: Vec<f64> = rows.iter().filter(|r| r.group == g).map(|r| r.cos).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    (mean(1), mean(3))
}

/// Deterministic PCA projection of `points` onto their top two principal axes.
/// Each axis is oriented so its largest-magnitude coordinate is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let k = points.len();
    if k == 0 {
        return Vec::new();
    }
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        kernels::axpy(1.0 / k as f64, p, &mut mean);
    }
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();
    // eigen-decomposition of the k x k Gram matrix
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let v = kernels::dot(&centered[i], &centered[j]);
            gram[i * k + j] = v;
            gram[j * k + i] = v;
        }
    }
    let (vals, vecs) = jacobi_eigen(gram, k);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let mut out = vec![[0.0; 2]; k];
    for (axis, &e) in order.iter().take(2).enumerate() {
        let scale = vals[e].max(0.0).sqrt();
        let col: Vec<f64> = (0..k).map(|i| vecs[i * k + e] * scale).collect();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..k {
            out[i][axis] = sign * col[i];
        }
    }
    out
}

/// Cyclic Jacobi eigenvalue iteration for a symmetric `n x n` matrix.
/// Returns eigenvalues and the row-major eigenvector matrix (vectors in columns).
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let (arp, arq) = (a[r * n + p], a[r * n + q]);
                    a[r * n + p] = c * arp - s * arq;
                    a[r * n + q] = s * arp + c * arq;
                }
                for r in 0..n {
                    let (apr, aqr) = (a[p * n + r], a[q * n + r]);
                    a[p * n + r] = c * apr - s * aqr;
                    a[q * n + r] = s * apr + c * aqr;
                }
                for r in 0..n {
                    let (vrp, vrq) = (v[r * n + p], v[r * n + q]);
                    v[r * n + p] = c * vrp - s * vrq;
                    v[r * n + q] = s * vrp + c * vrq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Self-contained SVG scatter of viz rows: anchor in black, groups 1-3 in
/// green, orange and red.
pub fn viz_svg(rows: &[VizRow]) -> String {
    let (w, h, pad) = (480.0, 480.0, 24.0);
    let xs = rows.iter().map(|r| r.x);
    let ys = rows.iter().map(|r| r.y);
    let (x0, x1) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = (ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));
    let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for r in rows.iter().filter(|r| r.group != 0) {
        let color = ["#000000", "#2ca02c", "#ff7f0e", "#d62728"][r.group.min(3)];
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\" fill-opacity=\"0.8\"/>",
            sx(r.x),
            sy(r.y)
        );
    }
    for r in rows.iter().filter(|r| r.group == 0) {
        let (cx, cy) = (sx(r.x), sy(r.y));
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"#000000\"/>",
            cx - 5.0,
            cy - 5.0
        );
    }
    s.push_str("</svg>\n");
    s
}
