//! Independent reference implementations used as test oracles. None of these
//! call into the library code they check.

#![allow(dead_code)]

use std::collections::HashMap;

use colo::abstractive::StepModel;
use colo::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use colo::corpus::{Document, EOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn grams<T: Clone>(t: &[T], n: usize) -> Vec<Vec<T>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// (precision, recall, f1) of clipped n-gram overlap, matching each
/// candidate n-gram against an unused reference n-gram.
pub fn rouge_n<T: Clone + PartialEq>(cand: &[T], reference: &[T], n: usize) -> (f64, f64, f64) {
    let c = grams(cand, n);
    let mut pool = grams(reference, n);
    let ref_total = pool.len();
    let mut hits = 0;
    for g in &c {
        if let Some(pos) = pool.iter().position(|x| x == g) {
            pool.swap_remove(pos);
            hits += 1;
        }
    }
    let (p, r) = (ratio(hits, c.len()), ratio(hits, ref_total));
    (p, r, f1(p, r))
}

/// Longest common subsequence by memoized recursion.
pub fn lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn rouge_l<T: PartialEq>(cand: &[T], reference: &[T]) -> (f64, f64, f64) {
    let l = lcs(cand, reference);
    let (p, r) = (ratio(l, cand.len()), ratio(l, reference.len()));
    (p, r, f1(p, r))
}

/// Base-2 Jensen-Shannon divergence of bigram distributions via the mixture M.
pub fn js2<T: Clone + PartialEq>(cand: &[T], reference: &[T]) -> f64 {
    let (p, q) = (grams(cand, 2), grams(reference, 2));
    if p.is_empty() || q.is_empty() {
        return 1.0;
    }
    let mut support: Vec<Vec<T>> = Vec::new();
    for g in p.iter().chain(&q) {
        if !support.contains(g) {
            support.push(g.clone());
        }
    }
    let dist = |xs: &[Vec<T>]| -> Vec<f64> {
        support
            .iter()
            .map(|g| xs.iter().filter(|x| *x == g).count() as f64 / xs.len() as f64)
            .collect()
    };
    let (pd, qd) = (dist(&p), dist(&q));
    let m: Vec<f64> = pd.iter().zip(&qd).map(|(a, b)| (a + b) / 2.0).collect();
    let kl = |x: &[f64]| -> f64 {
        x.iter()
            .zip(&m)
            .filter(|(xi, _)| **xi > 0.0)
            .map(|(xi, mi)| xi * (xi / mi).log2())
            .sum()
    };
    (kl(&pd) + kl(&qd)) / 2.0
}

/// Pairwise hinge sum written as an explicit double loop.
pub fn rank_loss(cos: &[f64], margin: f64, normalize: bool, scaled: bool) -> f64 {
    let m = cos.len();
    let mut total = 0.0;
    let mut pairs = 0;
    for j in 0..m {
        for i in 0..j {
            let rho = if scaled { margin * (j - i) as f64 } else { margin };
            let term = cos[j] - cos[i] + rho;
            if term > 0.0 {
                total += term;
            }
            pairs += 1;
        }
    }
    if normalize && pairs > 0 {
        total / pairs as f64
    } else {
        total
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let mut r: u128 = 1;
    for i in 0..k as u128 {
        r = r * (n as u128 - i) / (i + 1);
    }
    r as usize
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

const H: f64 = 1e-4;

/// Worst relative error of tape gradients against central differences for
/// leaf inputs.
pub fn leaf_gradcheck(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let build = |ins: &[Tensor]| {
        let mut g = Graph::standalone();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        (g, vars, out)
    };
    let (g, vars, out) = build(inputs);
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]);
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= H;
            let (gp, _, op) = build(&plus);
            let (gm, _, om) = build(&minus);
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * H);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Same check over `samples` randomly chosen parameter coordinates.
pub fn param_gradcheck(
    store: &ParamStore,
    samples: usize,
    seed: u64,
    f: &dyn Fn(&mut Graph) -> Var,
) -> f64 {
    let mut g = Graph::new(store);
    let out = f(&mut g);
    let grads = g.backward(out).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let out = f(&mut g);
        g.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let id = ids[rng.gen_range(0..ids.len())];
        let j = rng.gen_range(0..store.get(id).len());
        let analytic = grads.param(id).map_or(0.0, |g| g[j]);
        let mut s = store.clone();
        s.get_mut(id).data_mut()[j] += H;
        let up = eval(&s);
        s.get_mut(id).data_mut()[j] -= 2.0 * H;
        let down = eval(&s);
        worst = worst.max(rel_err(analytic, (up - down) / (2.0 * H)));
    }
    worst
}

/// Toy next-token model whose log-probabilities are a fixed random function
/// of the prefix. Tokens below `first_free` (except EOS) get `-inf`.
pub struct TableModel {
    pub vocab: usize,
    pub first_free: usize,
    pub seed: u64,
    /// Multiplier on the random logits; larger means peakier distributions.
    pub temperature: f64,
}

impl TableModel {
    pub fn logprobs(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = self.seed;
        for &t in prefix {
            h = h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let logits: Vec<f64> = (0..self.vocab)
            .map(|v| {
                let x: f64 = rng.gen_range(-1.0..1.0) * self.temperature;
                if v < self.first_free && v != EOS {
                    f64::NEG_INFINITY
                } else {
                    x
                }
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - lse).collect()
    }

    pub fn hidden(prefix: &[usize]) -> Vec<f64> {
        vec![prefix.len() as f64, prefix.iter().sum::<usize>() as f64 + 1.0, 1.0]
    }
}

impl StepModel for TableModel {
    type State = Vec<usize>;

    fn initial(&self) -> colo::Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn advance(&self, state: &mut Vec<usize>, token: usize) -> colo::Result<(Vec<f64>, Vec<f64>)> {
        state.push(token);
        Ok((self.logprobs(state), Self::hidden(state)))
    }
}

/// Plain width-`beam` search over `model`: at every step each live
/// hypothesis proposes all tokens, finished hypotheses compete unchanged, and
/// the `beam` best survive. Returns (tokens, logprob) sorted by logprob.
pub fn standard_beam_search(model: &TableModel, beam: usize, max_len: usize) -> Vec<(Vec<usize>, f64)> {
    use colo::corpus::BOS;
    let mut hyps: Vec<(Vec<usize>, f64, bool)> = vec![(Vec::new(), 0.0, false)];
    for _ in 0..max_len {
        if hyps.iter().all(|h| h.2) {
            break;
        }
        let mut pool: Vec<(Vec<usize>, f64, bool)> = Vec::new();
        for (toks, score, done) in &hyps {
            if *done {
                pool.push((toks.clone(), *score, true));
                continue;
            }
            let mut prefix = vec![BOS];
            prefix.extend(toks);
            for (v, lp) in model.logprobs(&prefix).into_iter().enumerate() {
                if lp.is_finite() {
                    let mut t = toks.clone();
                    t.push(v);
                    let done = v == EOS || t.len() >= max_len;
                    pool.push((t, score + lp, done));
                }
            }
        }
        pool.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        pool.truncate(beam);
        hyps = pool;
    }
    let mut out: Vec<(Vec<usize>, f64)> = hyps.into_iter().map(|(t, s, _)| (t, s)).collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    out
}

/// Document whose sentences are the given token-id rows.
pub fn doc(id: &str, sentences: Vec<Vec<usize>>, reference: Vec<usize>) -> Document {
    Document {
        id: id.into(),
        sentences,
        reference,
        raw_sentences: Vec::new(),
    }
}

/// Which metric a hand-computed case exercises.
#[derive(Clone, Copy, Debug)]
pub enum Metric {
    /// ROUGE-N F1, with the expected precision and recall alongside.
    RougeN(usize),
    RougeL,
    Js2,
    Rouge12Mean,
}

pub struct MetricCase {
    pub cand: &'static str,
    pub reference: &'static str,
    pub metric: Metric,
    /// (precision, recall, f1) for ROUGE; the value in slot 2 otherwise.
    pub expected: (f64, f64, f64),
}

fn value(v: f64) -> (f64, f64, f64) {
    (f64::NAN, f64::NAN, v)
}

/// Cases worked out by hand; fractions are kept exact.
pub fn metric_cases() -> Vec<MetricCase> {
    let l2 = f64::log2;
    let c = |cand, reference, metric, expected| MetricCase {
        cand,
        reference,
        metric,
        expected,
    };
    use Metric::*;
    vec![
        c("the cat sat", "the cat sat on the mat", RougeN(1), (1.0, 0.5, 2.0 / 3.0)),
        c("the cat sat", "the cat sat on the mat", RougeN(2), (1.0, 0.4, 4.0 / 7.0)),
        c("cat the mat", "the cat sat on the mat", RougeL, (1.0, 0.5, 2.0 / 3.0)),
        c("a b", "a b c", Js2, value((l2(4.0 / 3.0) + 0.5 * l2(2.0 / 3.0) + 0.5) / 2.0)),
        c("a b c", "a b", Js2, value((l2(4.0 / 3.0) + 0.5 * l2(2.0 / 3.0) + 0.5) / 2.0)),
        c("x y z", "x y z", RougeN(1), (1.0, 1.0, 1.0)),
        c("x y z", "x y z", RougeN(2), (1.0, 1.0, 1.0)),
        c("x y z", "x y z", RougeL, (1.0, 1.0, 1.0)),
        c("x y z", "x y z", Js2, value(0.0)),
        c("a b", "c d", RougeN(1), (0.0, 0.0, 0.0)),
        c("a b", "c d", RougeL, (0.0, 0.0, 0.0)),
        c("a b", "c d", Js2, value(1.0)),
        c("the the the", "the cat", RougeN(1), (1.0 / 3.0, 0.5, 0.4)),
        c("a", "a b", RougeN(2), (0.0, 0.0, 0.0)),
        c("", "a b", RougeN(1), (0.0, 0.0, 0.0)),
        c("a b a b", "a b", RougeN(2), (1.0 / 3.0, 1.0, 0.5)),
        c("a b c d", "a c b d", RougeL, (0.75, 0.75, 0.75)),
        c("a b", "b a", RougeL, (0.5, 0.5, 0.5)),
        c("police killed the gunman", "police kill the gunman", RougeN(1), (0.75, 0.75, 0.75)),
        c("police killed the gunman", "police kill the gunman", RougeN(2), (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)),
        c("police killed the gunman", "the gunman kill police", RougeL, (0.5, 0.5, 0.5)),
        c("a b a b", "a b", Js2, value((2.0 / 3.0 * l2(0.8) + 1.0 / 3.0 + l2(1.2)) / 2.0)),
        c("a", "a b", Js2, value(1.0)),
        c("a b c", "c b a", RougeN(1), (1.0, 1.0, 1.0)),
        c("a b c", "c b a", RougeN(2), (0.0, 0.0, 0.0)),
        c("a b c", "c b a", RougeL, (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)),
        c("a a b", "a b b", RougeN(1), (2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0)),
        c("a b c d", "c d a b", Js2, value(1.0 / 3.0)),
        c("the cat sat", "the cat sat on the mat", Rouge12Mean, value((2.0 / 3.0 + 4.0 / 7.0) / 2.0)),
        c("x y z", "x y z", Rouge12Mean, value(1.0)),
    ]
}

/// Library value of a case as (precision, recall, f1); non-ROUGE metrics
/// fill slot 2 only.
pub fn library_value(case: &MetricCase) -> (f64, f64, f64) {
    use colo::metrics::*;
    let (c, r) = (words(case.cand), words(case.reference));
    match case.metric {
        Metric::RougeN(n) => {
            let s = rouge_n(&c, &r, n);
            (s.precision, s.recall, s.f1)
        }
        Metric::RougeL => {
            let s = rouge_l(&c, &r);
            (s.precision, s.recall, s.f1)
        }
        Metric::Js2 => value(js2_divergence(&c, &r)),
        Metric::Rouge12Mean => value(discriminator_score(&c, &r, DiscriminatorKind::Rouge12Mean)),
    }
}

/// Worst absolute deviation of the library from the hand values.
pub fn metric_case_error(case: &MetricCase) -> f64 {
    let got = library_value(case);
    let e = case.expected;
    [(got.0, e.0), (got.1, e.1), (got.2, e.2)]
        .iter()
        .filter(|(_, want)| !want.is_nan())
        .map(|(g, w)| (g - w).abs())
        .fold(0.0, f64::max)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.01..1.0);
            if rng.gen() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

type LeafFn = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

/// Worst finite-difference error per differentiable op and per loss, for one seed.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    use colo::abstractive::{Seq2SeqConfig, Seq2SeqModel};
    use colo::candidates::CandidateSpec;
    use colo::encoder::{EncoderConfig, ExtractiveModel};
    use colo::training::{bce_loss, document_loss, ranking_loss, RankLossOptions, RankSource, TrainConfig};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_tensor(&mut rng, vec![3, 4]);
    let b = random_tensor(&mut rng, vec![4, 2]);
    let c = random_tensor(&mut rng, vec![3, 4]);
    let bias = random_tensor(&mut rng, vec![4]);
    let gamma = random_tensor(&mut rng, vec![4]);
    let u = random_tensor(&mut rng, vec![5]);
    let v = random_tensor(&mut rng, vec![5]);
    let kinked = away_from_zero(&mut rng, vec![3, 4]);
    let positive = Tensor::new(vec![6], (0..6).map(|_| rng.gen_range(0.1..2.0)).collect()).unwrap();
    let probs = Tensor::vector((0..5).map(|_| rng.gen_range(0.05..0.95)).collect());
    let labels: Vec<f64> = (0..5).map(|i| (i % 2) as f64).collect();
    let cands: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, vec![6])).collect();
    let anchor = random_tensor(&mut rng, vec![6]);

    let cases: Vec<(&'static str, Vec<Tensor>, LeafFn)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|g, x| {
            let y = g.matmul(x[0], x[1]).unwrap();
            let y = g.mul(y, y).unwrap();
            g.sum(y)
        })),
        ("transpose", vec![a.clone()], Box::new(|g, x| {
            let t = g.transpose(x[0]).unwrap();
            let y = g.matmul(x[0], t).unwrap();
            g.sum(y)
        })),
        ("add_sub_mul_mean", vec![a.clone(), c.clone()], Box::new(|g, x| {
            let s = g.add(x[0], x[1]).unwrap();
            let d = g.sub(x[0], x[1]).unwrap();
            let p = g.mul(s, d).unwrap();
            g.mean(p)
        })),
        ("add_bias_scale_add_scalar", vec![a.clone(), bias.clone()], Box::new(|g, x| {
            let y = g.add_bias(x[0], x[1]).unwrap();
            let y = g.scale(y, -1.7);
            let y = g.add_scalar(y, 0.3);
            let y = g.mul(y, y).unwrap();
            g.sum(y)
        })),
        ("relu", vec![kinked.clone()], Box::new(|g, x| {
            let y = g.relu(x[0]);
            let y = g.mul(y, y).unwrap();
            g.sum(y)
        })),
        ("hinge", vec![kinked.clone()], Box::new(|g, x| {
            let y = g.scale(x[0], 3.0);
            let y = g.hinge(y);
            g.sum(y)
        })),
        ("sigmoid_log", vec![a.clone()], Box::new(|g, x| {
            let y = g.sigmoid(x[0]);
            let y = g.log(y);
            g.sum(y)
        })),
        ("clamp", vec![positive], Box::new(|g, x| {
            let y = g.clamp(x[0], 0.05, 5.0);
            let y = g.log(y);
            g.sum(y)
        })),
        ("softmax", vec![a.clone(), c.clone()], Box::new(|g, x| {
            let r = g.softmax(x[0], 1).unwrap();
            let k = g.softmax(x[0], 0).unwrap();
            let y = g.add(r, k).unwrap();
            let y = g.mul(y, x[1]).unwrap();
            g.sum(y)
        })),
        ("log_softmax_pick", vec![a.clone()], Box::new(|g, x| {
            let y = g.log_softmax(x[0]);
            let p = g.pick(y, &[0, 3, 1]).unwrap();
            g.sum(p)
        })),
        ("layer_norm", vec![a.clone(), gamma, bias.clone(), c.clone()], Box::new(|g, x| {
            let y = g.layer_norm(x[0], x[1], x[2], 1e-5).unwrap();
            let y = g.mul(y, x[3]).unwrap();
            g.sum(y)
        })),
        ("embedding_gather", vec![a.clone()], Box::new(|g, x| {
            let y = g.embedding_gather(x[0], &[2, 0, 2]).unwrap();
            let y = g.mul(y, y).unwrap();
            g.sum(y)
        })),
        ("mean_pool", vec![a.clone(), bias], Box::new(|g, x| {
            let y = g.mean_pool(x[0], &[0, 2]).unwrap();
            let y = g.mul(y, x[1]).unwrap();
            let y = g.mul(y, y).unwrap();
            g.sum(y)
        })),
        ("concat_slice_cols", vec![a.clone(), c], Box::new(|g, x| {
            let y = g.concat(&[x[0], x[1]], 1).unwrap();
            let s = g.slice_cols(y, 2, 7).unwrap();
            let z = g.concat(&[s, s], 0).unwrap();
            let z = g.mul(z, z).unwrap();
            g.sum(z)
        })),
        ("reshape_select_row", vec![a], Box::new(|g, x| {
            let r = g.reshape(x[0], vec![4, 3]).unwrap();
            let row = g.select_row(r, 1).unwrap();
            let y = g.mul(row, row).unwrap();
            g.sum(y)
        })),
        ("cosine_similarity", vec![u, v], Box::new(|g, x| g.cosine_similarity(x[0], x[1]).unwrap())),
        ("bce_loss", vec![probs], Box::new(move |g, x| bce_loss(g, x[0], &labels).unwrap())),
        ("ranking_loss", std::iter::once(anchor).chain(cands).collect(), Box::new(|g, x| {
            let o = RankLossOptions { margin: 0.05, normalize: false, scaled: true };
            ranking_loss(g, x[0], &x[1..], o).unwrap().unwrap_or_else(|| g.constant(Tensor::scalar(0.0)))
        })),
    ];
    let mut out: Vec<(&'static str, f64)> = cases
        .into_iter()
        .map(|(name, inputs, f)| (name, leaf_gradcheck(&inputs, &*f)))
        .collect();

    let s2s = Seq2SeqModel::new(
        Seq2SeqConfig {
            vocab_size: 14,
            d_model: 8,
            n_heads: 2,
            dec_heads: 2,
            ffn_dim: 8,
            max_len: 16,
            max_decode_len: 8,
            beam_size: 2,
            num_groups: 2,
            ..Default::default()
        },
        seed,
    )
    .unwrap();
    let src = vec![2, 3, 8, 9, 10, 4, 3, 11, 12, 4];
    let reference = vec![9, 10, 13];
    let nll = param_gradcheck(&s2s.params, 60, seed, &|g| {
        let mem = s2s.encode(g, &src).unwrap();
        s2s.nll_loss(g, mem, &reference).unwrap()
    });
    out.push(("nll_loss", nll));

    let ext = ExtractiveModel::new(
        EncoderConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 8,
            max_len: 40,
            ..Default::default()
        },
        seed,
    )
    .unwrap();
    let d = doc(
        "g",
        vec![vec![8, 9, 10], vec![11, 12], vec![13, 14, 15], vec![16, 17]],
        vec![11, 12, 16, 17],
    );
    let labels = [0.0, 1.0, 0.0, 1.0];
    let spec = CandidateSpec::new(vec![1, 2], 3).unwrap();
    let cfg = TrainConfig { margin: 0.01, ..Default::default() };
    let step = param_gradcheck(&ext.params, 80, seed, &|g| {
        document_loss(g, &ext, &d, &labels, &spec, &cfg, RankSource::Online).unwrap().total
    });
    out.push(("extractive_step_loss", step));
    out
}
