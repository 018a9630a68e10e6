//! Datasets: JSONL ingestion, synthetic corpora, tokenization and the
//! encoder input layout `<doc> (<cls> sentence <sep>)*`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const DOC: usize = 2;
pub const CLS: usize = 3;
pub const SEP: usize = 4;
pub const BOS: usize = 5;
pub const EOS: usize = 6;

const RESERVED: [&str; 7] = ["<pad>", "<unk>", "<doc>", "<cls>", "<sep>", "<bos>", "<eos>"];

/// Token/id mapping with the seven reserved ids fixed at `0..7`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocabulary {
    /// Reserved entries followed by each distinct token of `tokens`, in first-seen order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            v.insert(r);
        }
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    /// Vocabulary over every token of `docs`, most frequent first (ties alphabetical).
    pub fn build(docs: &[RawDocument], max_size: Option<usize>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for d in docs {
            for text in d.sentences.iter().chain(std::iter::once(&d.summary)) {
                for w in split_words(text) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = max_size.map_or(ranked.len(), |m| m.saturating_sub(RESERVED.len()));
        Self::from_tokens(ranked.into_iter().take(keep).map(|(w, _)| w))
    }

    fn insert(&mut self, t: &str) -> usize {
        if let Some(&id) = self.index.get(t) {
            return id;
        }
        self.tokens.push(t.to_string());
        self.index.insert(t.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }
}

/// Lowercases, splits on whitespace and isolates every punctuation character.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.extend(std::iter::once(ch.to_lowercase().collect::<String>()));
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    split_words(text).iter().map(|w| vocab.id(w)).collect()
}

/// Joins tokens with spaces, attaching punctuation to the preceding word.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for &id in ids {
        let t = vocab.token(id);
        let punct = t.chars().count() == 1 && !t.chars().all(char::is_alphanumeric);
        if !out.is_empty() && !punct {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

/// One JSONL record: `{"id": str, "sentences": [str, ...], "summary": str}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub sentences: Vec<String>,
    pub summary: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<Vec<usize>>,
    pub reference: Vec<usize>,
    pub raw_sentences: Vec<String>,
}

impl Document {
    /// Tokenizes a raw record. Sentences with no tokens are dropped.
    pub fn from_raw(raw: &RawDocument, vocab: &Vocabulary) -> Self {
        let mut sentences = Vec::new();
        let mut raw_sentences = Vec::new();
        for s in &raw.sentences {
            let ids = tokenize(s, vocab);
            if !ids.is_empty() {
                sentences.push(ids);
                raw_sentences.push(s.clone());
            }
        }
        Self {
            id: raw.id.clone(),
            sentences,
            reference: tokenize(&raw.summary, vocab),
            raw_sentences,
        }
    }

    pub fn to_raw(&self, vocab: &Vocabulary) -> RawDocument {
        RawDocument {
            id: self.id.clone(),
            sentences: self.raw_sentences.clone(),
            summary: detokenize(&self.reference, vocab),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Tokens of the selected sentences, concatenated in document order.
    pub fn extract(&self, indices: &[usize]) -> Vec<usize> {
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        sorted
            .iter()
            .filter_map(|&i| self.sentences.get(i))
            .flatten()
            .copied()
            .collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

/// Number of sentences in the gold summary: count of `.`, `!` and `?` tokens, at least 1.
pub fn gold_sentence_count(doc: &Document, vocab: &Vocabulary) -> usize {
    let enders: Vec<usize> = [".", "!", "?"].iter().filter_map(|t| vocab.get(t)).collect();
    doc.reference
        .iter()
        .filter(|id| enders.contains(id))
        .count()
        .max(1)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub docs: Vec<Document>,
}

impl Dataset {
    pub fn from_raw(raws: &[RawDocument], vocab: Vocabulary) -> Self {
        let docs = raws.iter().map(|r| Document::from_raw(r, &vocab)).collect();
        Self { vocab, docs }
    }

    pub fn to_raw(&self) -> Vec<RawDocument> {
        self.docs.iter().map(|d| d.to_raw(&self.vocab)).collect()
    }

    /// First `n` documents and the rest, sharing the vocabulary.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.docs.len());
        (
            Dataset {
                vocab: self.vocab.clone(),
                docs: self.docs[..n].to_vec(),
            },
            Dataset {
                vocab: self.vocab.clone(),
                docs: self.docs[n..].to_vec(),
            },
        )
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Mean gold summary sentence count.
    pub fn mean_gold_sentences(&self) -> f64 {
        if self.docs.is_empty() {
            return 0.0;
        }
        let total: usize = self
            .docs
            .iter()
            .map(|d| gold_sentence_count(d, &self.vocab))
            .sum();
        total as f64 / self.docs.len() as f64
    }
}

/// Reads JSONL records in file order. Blank lines are skipped.
pub fn read_jsonl(path: &Path) -> Result<Vec<RawDocument>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, i + 1)?);
    }
    Ok(out)
}

pub fn parse_record(line: &str, line_no: usize) -> Result<RawDocument> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Json {
        line: line_no,
        msg: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Json {
        line: line_no,
        msg: "expected a JSON object".into(),
    })?;
    for key in ["id", "sentences", "summary"] {
        if !obj.contains_key(key) {
            return Err(Error::MissingKey {
                key: key.into(),
                line: line_no,
            });
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Json {
        line: line_no,
        msg: e.to_string(),
    })
}

/// Loads a JSONL file, building a vocabulary from it when none is given.
pub fn load_jsonl(path: &Path, vocab: Option<&Vocabulary>) -> Result<Dataset> {
    let raws = read_jsonl(path)?;
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => Vocabulary::build(&raws, None),
    };
    Ok(Dataset::from_raw(&raws, vocab))
}

pub fn write_jsonl(path: &Path, docs: &[RawDocument]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for d in docs {
        let line = serde_json::to_string(d).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut body = vocab.tokens().join("\n");
    body.push('\n');
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tokens: Vec<&str> = body.lines().collect();
    if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
        return Err(Error::Invalid(format!(
            "{}: vocabulary must start with the reserved tokens",
            path.display()
        )));
    }
    Ok(Vocabulary::from_tokens(&tokens[RESERVED.len()..]))
}

/// Knobs of the synthetic corpus generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_docs: usize,
    /// Inclusive range of sentences per document.
    pub sentences: [usize; 2],
    /// Inclusive range of words per sentence, excluding the final period.
    pub sentence_len: [usize; 2],
    /// Number of content words.
    pub vocab_size: usize,
    /// Content words that mark summary-worthy sentences.
    pub salient_words: usize,
    /// Salient words placed in each summary-worthy sentence.
    pub salient_per_key: usize,
    /// Inclusive range of gold summary sentences.
    pub summary_sentences: [usize; 2],
    /// Per-token substitution rate applied when copying sentences into the reference.
    pub noise: f64,
    /// Probability that a summary-worthy sentence gets a near-duplicate elsewhere in the document.
    pub paraphrase_prob: f64,
    /// Substitution rate for non-salient tokens of a near-duplicate.
    pub paraphrase_noise: f64,
    /// Probability that an ordinary sentence carries one salient word.
    pub distractor_salient_prob: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_docs: 500,
            sentences: [6, 10],
            sentence_len: [6, 11],
            vocab_size: 2000,
            salient_words: 200,
            salient_per_key: 3,
            summary_sentences: [1, 3],
            noise: 0.1,
            paraphrase_prob: 0.5,
            paraphrase_noise: 0.4,
            distractor_salient_prob: 0.3,
        }
    }
}

const FUNCTION_WORDS: [&str; 12] = [
    "the", "a", "of", "to", "and", "in", "is", "was", "for", "on", "with", "by",
];

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("synth spec: {m}")));
        for (name, [lo, hi]) in [
            ("sentences", self.sentences),
            ("sentence_len", self.sentence_len),
            ("summary_sentences", self.summary_sentences),
        ] {
            if lo == 0 || lo > hi {
                return bad(&format!("{name} range [{lo}, {hi}] is invalid"));
            }
        }
        if self.sentences[1] < self.summary_sentences[1] + 2 {
            return bad("sentences max must be at least summary_sentences max + 2");
        }
        if self.salient_words == 0 || self.salient_words >= self.vocab_size {
            return bad("salient_words must be in 1..vocab_size");
        }
        if self.salient_per_key == 0 || self.salient_per_key > self.sentence_len[0] {
            return bad("salient_per_key must be in 1..=sentence_len min");
        }
        for (name, p) in [
            ("noise", self.noise),
            ("paraphrase_prob", self.paraphrase_prob),
            ("paraphrase_noise", self.paraphrase_noise),
            ("distractor_salient_prob", self.distractor_salient_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Pronounceable pseudo-word for content index `i`, always two or more syllables.
fn content_word(i: usize) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let syl = C.len() * V.len();
    // bijective base-`syl` numbering, offset past the one-syllable words
    let mut n = i + syl;
    let mut w = String::new();
    loop {
        let s = n % syl;
        w.push(C[s / V.len()] as char);
        w.push(V[s % V.len()] as char);
        n /= syl;
        if n == 0 {
            break;
        }
        n -= 1;
    }
    w
}

struct SynthWords {
    function: Vec<String>,
    content: Vec<String>,
    salient: usize,
}

impl SynthWords {
    fn new(spec: &SynthSpec) -> Self {
        Self {
            function: FUNCTION_WORDS.iter().map(|s| s.to_string()).collect(),
            content: (0..spec.vocab_size).map(content_word).collect(),
            salient: spec.salient_words,
        }
    }

    fn ordinary<R: Rng>(&self, rng: &mut R) -> String {
        if rng.gen_bool(0.3) {
            self.function[rng.gen_range(0..self.function.len())].clone()
        } else {
            self.content[rng.gen_range(self.salient..self.content.len())].clone()
        }
    }

    fn salient<R: Rng>(&self, rng: &mut R) -> String {
        self.content[rng.gen_range(0..self.salient)].clone()
    }

    fn is_salient(&self, w: &str) -> bool {
        self.content[..self.salient].iter().any(|s| s == w)
    }
}

fn sentence_text(words: &[String]) -> String {
    format!("{}.", words.join(" "))
}

/// Deterministic desk-scale corpus with a planted extractive summary.
///
/// Each document marks 1..=k summary-worthy sentences by giving them several
/// salient words; the reference copies those sentences with token noise.
/// Some summary-worthy sentences get a near-duplicate elsewhere in the
/// document, so picking sentences independently can select redundant pairs.
pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = SynthWords::new(spec);
    let vocab = Vocabulary::from_tokens(
        words
            .function
            .iter()
            .map(String::as_str)
            .chain(["."])
            .chain(words.content.iter().map(String::as_str)),
    );

    let mut raws = Vec::with_capacity(spec.n_docs);
    for d in 0..spec.n_docs {
        let n_sum = rng.gen_range(spec.summary_sentences[0]..=spec.summary_sentences[1]);
        let n = rng
            .gen_range(spec.sentences[0]..=spec.sentences[1])
            .max(spec.summary_sentences[1] + 2);
        let mut slots: Vec<usize> = (0..n).collect();
        slots.shuffle(&mut rng);
        let mut keys: Vec<usize> = slots[..n_sum].to_vec();
        keys.sort_unstable();
        let mut free: Vec<usize> = slots[n_sum..].to_vec();

        let mut sentences: Vec<Vec<String>> = (0..n)
            .map(|_| {
                let len = rng.gen_range(spec.sentence_len[0]..=spec.sentence_len[1]);
                let mut s: Vec<String> = (0..len).map(|_| words.ordinary(&mut rng)).collect();
                if rng.gen_bool(spec.distractor_salient_prob) {
                    let at = rng.gen_range(0..len);
                    s[at] = words.salient(&mut rng);
                }
                s
            })
            .collect();

        for &k in &keys {
            let len = sentences[k].len();
            let mut positions: Vec<usize> = (0..len).collect();
            positions.shuffle(&mut rng);
            for &p in positions.iter().take(spec.salient_per_key) {
                sentences[k][p] = words.salient(&mut rng);
            }
        }

        for &k in &keys {
            if free.is_empty() || !rng.gen_bool(spec.paraphrase_prob) {
                continue;
            }
            let slot = free.remove(rng.gen_range(0..free.len()));
            let para: Vec<String> = sentences[k]
                .iter()
                .map(|w| {
                    if !words.is_salient(w) && rng.gen_bool(spec.paraphrase_noise) {
                        words.ordinary(&mut rng)
                    } else {
                        w.clone()
                    }
                })
                .collect();
            sentences[slot] = para;
        }

        let summary: Vec<String> = keys
            .iter()
            .map(|&k| {
                let noisy: Vec<String> = sentences[k]
                    .iter()
                    .map(|w| {
                        if rng.gen_bool(spec.noise) {
                            words.ordinary(&mut rng)
                        } else {
                            w.clone()
                        }
                    })
                    .collect();
                sentence_text(&noisy)
            })
            .collect();

        raws.push(RawDocument {
            id: format!("synth-{seed}-{d:05}"),
            sentences: sentences.iter().map(|s| sentence_text(s)).collect(),
            summary: summary.join(" "),
        });
    }
    Ok(Dataset::from_raw(&raws, vocab))
}

/// Encoder input for one document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelInput {
    pub token_ids: Vec<usize>,
    pub doc_pos: usize,
    pub cls_pos: Vec<usize>,
    /// Half-open token ranges of each kept sentence, excluding `<cls>`/`<sep>`.
    pub sent_spans: Vec<(usize, usize)>,
}

impl ModelInput {
    pub fn num_sentences(&self) -> usize {
        self.cls_pos.len()
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Lays out `<doc> (<cls> sentence <sep>)*`, dropping whole trailing
/// sentences that would exceed `max_len`.
pub fn build_model_input(doc: &Document, _vocab: &Vocabulary, max_len: usize) -> Result<ModelInput> {
    sentences_input(&doc.sentences, max_len)
}

pub(crate) fn sentences_input(sentences: &[Vec<usize>], max_len: usize) -> Result<ModelInput> {
    let first = sentences.first().ok_or(Error::EmptyDocument)?;
    if 1 + first.len() + 2 > max_len {
        return Err(Error::Untruncatable {
            needed: 1 + first.len() + 2,
            max_len,
        });
    }
    let mut token_ids = vec![DOC];
    let mut cls_pos = Vec::new();
    let mut sent_spans = Vec::new();
    for s in sentences {
        if token_ids.len() + s.len() + 2 > max_len {
            break;
        }
        cls_pos.push(token_ids.len());
        token_ids.push(CLS);
        let start = token_ids.len();
        token_ids.extend_from_slice(s);
        sent_spans.push((start, token_ids.len()));
        token_ids.push(SEP);
    }
    Ok(ModelInput {
        token_ids,
        doc_pos: 0,
        cls_pos,
        sent_spans,
    })
}
