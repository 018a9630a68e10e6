//! Extractive candidates: clipping, combination enumeration, discriminator
//! ranking, greedy oracle labels and the LEAD/ORACLE baselines.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::metrics::{discriminator_score, DiscriminatorKind};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateSpec {
    /// Allowed sentence counts per candidate.
    #[serde(rename = "N")]
    pub sizes: Vec<usize>,
    /// Sentences kept after clipping on classifier probability.
    pub n_prime: usize,
    /// Search every subset of the document for ORACLE instead of the clipped pool.
    pub full_space_oracle: bool,
}

impl Default for CandidateSpec {
    fn default() -> Self {
        Self {
            sizes: vec![1, 2, 3],
            n_prime: 5,
            full_space_oracle: true,
        }
    }
}

impl CandidateSpec {
    pub fn new(sizes: Vec<usize>, n_prime: usize) -> Result<Self> {
        let spec = Self {
            sizes,
            n_prime,
            full_space_oracle: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(Error::Invalid("candidate sizes N must be non-empty and at least 1".into()));
        }
        if self.n_prime < self.max_size() {
            return Err(Error::Invalid(format!(
                "n_prime {} is smaller than max(N) = {}",
                self.n_prime,
                self.max_size()
            )));
        }
        Ok(())
    }

    pub fn max_size(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(0)
    }

    pub fn min_size(&self) -> usize {
        self.sizes.iter().copied().min().unwrap_or(0)
    }

    /// Sorted, deduplicated sizes.
    fn sorted_sizes(&self) -> Vec<usize> {
        let mut s = self.sizes.clone();
        s.sort_unstable();
        s.dedup();
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    /// Strictly increasing sentence indices.
    pub indices: Vec<usize>,
    pub disc_score: f64,
    /// 1-based rank after [`rank_candidates`]; 0 before.
    pub rank: usize,
}

impl Candidate {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self {
            indices,
            disc_score: 0.0,
            rank: 0,
        }
    }
}

/// Indices of the `n_prime` highest probabilities in ascending index order.
/// Ties go to the lower index.
pub fn clip_topk(probs: &[f64], n_prime: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(n_prime);
    order.sort_unstable();
    order
}

/// All size-`k` combinations of `items`, lexicographic.
pub fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = items.len();
    if k == 0 || k > n {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        let Some(pos) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            break;
        };
        idx[pos] += 1;
        for j in pos + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    out
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Size-`num` combinations of `clipped` for each `num` in `spec.sizes`,
/// smaller sizes first. Falls back to one candidate holding every clipped
/// sentence when no size fits.
pub fn enumerate_candidates(clipped: &[usize], spec: &CandidateSpec) -> Vec<Candidate> {
    let mut sorted = clipped.to_vec();
    sorted.sort_unstable();
    let cands: Vec<Candidate> = spec
        .sorted_sizes()
        .into_iter()
        .flat_map(|num| combinations(&sorted, num))
        .map(Candidate::new)
        .collect();
    if cands.is_empty() && !sorted.is_empty() {
        return vec![Candidate::new(sorted)];
    }
    cands
}

/// Whether a document is too short for any candidate size.
pub fn is_degenerate(num_sentences: usize, spec: &CandidateSpec) -> bool {
    num_sentences < spec.min_size()
}

/// Clip then enumerate: the candidate pool used by training and selection.
pub fn candidate_pool(probs: &[f64], spec: &CandidateSpec) -> Vec<Candidate> {
    enumerate_candidates(&clip_topk(probs, spec.n_prime), spec)
}

pub fn score_indices(doc: &Document, indices: &[usize], kind: DiscriminatorKind) -> f64 {
    discriminator_score(&doc.extract(indices), &doc.reference, kind)
}

fn by_score_then_indices(a: &Candidate, b: &Candidate) -> Ordering {
    b.disc_score
        .total_cmp(&a.disc_score)
        .then_with(|| a.indices.cmp(&b.indices))
}

/// Scores every candidate against the reference and sorts best first,
/// assigning ranks `1..=m`. Ties go to the lexicographically smaller indices.
pub fn rank_candidates(cands: Vec<Candidate>, doc: &Document, kind: DiscriminatorKind) -> Vec<Candidate> {
    let mut cands: Vec<Candidate> = cands
        .into_iter()
        .map(|mut c| {
            c.disc_score = score_indices(doc, &c.indices, kind);
            c
        })
        .collect();
    cands.sort_by(by_score_then_indices);
    for (i, c) in cands.iter_mut().enumerate() {
        c.rank = i + 1;
    }
    cands
}

/// Greedy sentence labels for the classifier loss: repeatedly add the
/// sentence that most improves the discriminator score of the selected set.
/// The first sentence is always added; later ones only on strict improvement.
pub fn greedy_oracle_labels(doc: &Document, kind: DiscriminatorKind, max_sents: usize) -> Vec<f64> {
    let n = doc.len();
    let mut labels = vec![0.0; n];
    let mut selected: Vec<usize> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    while selected.len() < max_sents.max(1) {
        let mut pick: Option<(usize, f64)> = None;
        for i in (0..n).filter(|i| !selected.contains(i)) {
            let mut trial = selected.clone();
            trial.push(i);
            trial.sort_unstable();
            let s = score_indices(doc, &trial, kind);
            if pick.map_or(true, |(_, ps)| s > ps) {
                pick = Some((i, s));
            }
        }
        match pick {
            Some((i, s)) if s > best => {
                selected.push(i);
                labels[i] = 1.0;
                best = s;
            }
            _ => break,
        }
    }
    labels
}

pub fn lead(doc: &Document, k: usize) -> Candidate {
    Candidate::new((0..k.max(1).min(doc.len())).collect())
}

/// Best candidate of `cands` by discriminator score.
pub fn oracle_candidate(cands: Vec<Candidate>, doc: &Document, kind: DiscriminatorKind) -> Result<Candidate> {
    rank_candidates(cands, doc, kind)
        .into_iter()
        .next()
        .ok_or_else(|| Error::Invalid("oracle over an empty candidate set".into()))
}

/// Exhaustive ORACLE over all size-`num` subsets of the whole document, `num ∈ N`.
pub fn full_space_oracle(doc: &Document, spec: &CandidateSpec, kind: DiscriminatorKind) -> Result<Candidate> {
    let all: Vec<usize> = (0..doc.len()).collect();
    oracle_candidate(enumerate_candidates(&all, spec), doc, kind)
}

/// The two most frequent gold sentence counts, ascending; ties favour smaller counts.
pub fn sizes_from_gold_counts(counts: &[usize]) -> Vec<usize> {
    let mut freq: HashMap<usize, usize> = HashMap::new();
    for &c in counts.iter().filter(|&&c| c > 0) {
        *freq.entry(c).or_insert(0) += 1;
    }
    let mut by_freq: Vec<(usize, usize)> = freq.into_iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut sizes: Vec<usize> = by_freq.into_iter().take(2).map(|(c, _)| c).collect();
    sizes.sort_unstable();
    sizes
}
