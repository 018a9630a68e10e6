//! Lexical summary metrics and the discriminator that orders candidates.
//!
//! ROUGE here is computed over already tokenized input with no stemming and
//! no stopword removal; F1 uses beta = 1. ROUGE-L is the summary-level LCS
//! over the flat token sequences.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

/// Multiset of the n-grams of one token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NgramCounts<'a, T: Eq + Hash> {
    pub n: usize,
    pub counts: HashMap<&'a [T], usize>,
    pub total: usize,
}

/// Counts each distinct n-gram of `tokens`. Empty when `tokens.len() < n`.
pub fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> NgramCounts<'_, T> {
    assert!(n >= 1, "n-gram order must be at least 1");
    let mut counts = HashMap::new();
    let mut total = 0;
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
        total += 1;
    }
    NgramCounts { n, counts, total }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricScore {
    pub fn from_counts(hits: usize, cand_total: usize, ref_total: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self::from_pr(ratio(hits, cand_total), ratio(hits, ref_total))
    }

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// Clipped n-gram overlap between a candidate and a reference.
pub fn rouge_n<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> MetricScore {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let hits: usize = c
        .counts
        .iter()
        .map(|(g, &k)| k.min(r.counts.get(g).copied().unwrap_or(0)))
        .sum();
    MetricScore::from_counts(hits, c.total, r.total)
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(cand: &[T], reference: &[T]) -> MetricScore {
    MetricScore::from_counts(lcs_len(cand, reference), cand.len(), reference.len())
}

/// Jensen-Shannon divergence (base 2) between the bigram distributions of two
/// texts, in `[0, 1]`. Returns 1 when either side has no bigrams.
pub fn js2_divergence<T: Eq + Hash>(cand: &[T], reference: &[T]) -> f64 {
    let p = ngram_counts(cand, 2);
    let q = ngram_counts(reference, 2);
    if p.total == 0 || q.total == 0 {
        return 1.0;
    }
    let (pt, qt) = (p.total as f64, q.total as f64);
    let mut js = 0.0;
    for (g, &pc) in &p.counts {
        let pi = pc as f64 / pt;
        let qi = q.counts.get(g).map_or(0.0, |&c| c as f64 / qt);
        js += 0.5 * pi * (2.0 * pi / (pi + qi)).log2();
    }
    for (g, &qc) in &q.counts {
        let qi = qc as f64 / qt;
        let pi = p.counts.get(g).map_or(0.0, |&c| c as f64 / pt);
        js += 0.5 * qi * (2.0 * qi / (pi + qi)).log2();
    }
    js.clamp(0.0, 1.0)
}

/// Metric that orders candidates; higher is always better.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorKind {
    /// Mean of ROUGE-1 and ROUGE-2 F1.
    #[default]
    Rouge12Mean,
    RougeL,
    /// `1 - JS-2`.
    Js2Complement,
}

impl DiscriminatorKind {
    pub fn name(self) -> &'static str {
        match self {
            DiscriminatorKind::Rouge12Mean => "rouge12_mean",
            DiscriminatorKind::RougeL => "rouge_l",
            DiscriminatorKind::Js2Complement => "js2_complement",
        }
    }
}

impl std::str::FromStr for DiscriminatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rouge12_mean" => Ok(Self::Rouge12Mean),
            "rouge_l" => Ok(Self::RougeL),
            "js2_complement" => Ok(Self::Js2Complement),
            other => Err(format!("unknown discriminator {other}")),
        }
    }
}

pub fn discriminator_score<T: Eq + Hash>(cand: &[T], reference: &[T], kind: DiscriminatorKind) -> f64 {
    match kind {
        DiscriminatorKind::Rouge12Mean => {
            (rouge_n(cand, reference, 1).f1 + rouge_n(cand, reference, 2).f1) / 2.0
        }
        DiscriminatorKind::RougeL => rouge_l(cand, reference).f1,
        DiscriminatorKind::Js2Complement => 1.0 - js2_divergence(cand, reference),
    }
}

/// R-1, R-2 and R-L F1 plus JS-2 for one pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub js2: f64,
}

impl PairScores {
    pub fn compute<T: Eq + Hash>(cand: &[T], reference: &[T]) -> Self {
        Self {
            r1: rouge_n(cand, reference, 1).f1,
            r2: rouge_n(cand, reference, 2).f1,
            rl: rouge_l(cand, reference).f1,
            js2: js2_divergence(cand, reference),
        }
    }

    pub fn rouge12(&self) -> f64 {
        (self.r1 + self.r2) / 2.0
    }
}
