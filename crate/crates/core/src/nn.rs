//! Transformer building blocks over the autodiff graph (pre-LayerNorm).

use rand::Rng;

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: store.add(&format!("{name}.w"), vec![d_in, d_out], Init::Xavier, rng),
            b: store.add(&format!("{name}.b"), vec![d_out], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), vec![d], Init::Ones, rng),
            beta: store.add(&format!("{name}.beta"), vec![d], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, n_heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
            n_heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, x_q: Var, x_kv: Var, mask: Option<Var>) -> Result<Var> {
        let q = self.q.forward(g, x_q)?;
        let (k, v) = self.project_kv(g, x_kv)?;
        self.attend(g, q, k, v, mask)
    }

    pub fn project_kv(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        Ok((self.k.forward(g, x)?, self.v.forward(g, x)?))
    }

    /// Multi-head scaled dot-product attention over projected `q`, `k`, `v`,
    /// followed by the output projection. `mask` is added to the scores.
    pub fn attend(&self, g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
        let d = g.value(q).cols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, a, b)?;
            let kh = g.slice_cols(k, a, b)?;
            let vh = g.slice_cols(v, a, b)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let p = g.softmax(s, 1)?;
            heads.push(g.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat(&heads, 1)?
        };
        self.o.forward(g, cat)
    }
}

/// Additive sentence-local mask for `<doc> (<cls> ... <sep>)*` inputs: each
/// token attends within its own sentence span, while `<doc>` attends to every
/// position. A new span starts at every `<cls>`.
pub fn local_mask(ids: &[usize]) -> Tensor {
    let len = ids.len();
    let mut seg = vec![0usize; len];
    let mut cur = 0;
    for (i, &t) in ids.iter().enumerate() {
        if t == crate::corpus::CLS {
            cur += 1;
        }
        seg[i] = if t == crate::corpus::DOC { 0 } else { cur };
    }
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        if seg[i] == 0 {
            continue;
        }
        for j in 0..len {
            if seg[j] != seg[i] {
                data[i * len + j] = MASKED;
            }
        }
    }
    Tensor::new(vec![len, len], data).expect("square")
}

/// Additive causal mask: 0 on and below the diagonal, a large negative above.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = MASKED;
        }
    }
    Tensor::new(vec![len, len], data).expect("square")
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), d, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, heads: usize, ffn: usize) -> Self {
        Self {
            ln1: LayerNorm::new(store, rng, &format!("{name}.ln1"), d),
            attn: Attention::new(store, rng, &format!("{name}.attn"), d, heads),
            ln2: LayerNorm::new(store, rng, &format!("{name}.ln2"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, ffn),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<Var>) -> Result<Var> {
        let y = self.ln1.forward(g, x)?;
        let y = self.attn.forward(g, y, y, mask)?;
        let x = g.add(x, y)?;
        let y = self.ln2.forward(g, x)?;
        let y = self.ffn.forward(g, y)?;
        g.add(x, y)
    }
}

/// Token + optional learned position embeddings, a stack of encoder layers
/// and a final LayerNorm. The first `local_layers` layers attend only within
/// each sentence (see [`local_mask`]).
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub tok_emb: ParamId,
    pub pos_emb: Option<ParamId>,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    max_len: usize,
    local_layers: usize,
}

pub struct StackDims {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub use_positions: bool,
    pub local_layers: usize,
}

impl TransformerEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dims: &StackDims) -> Self {
        let tok_emb = store.add(
            &format!("{name}.tok_emb"),
            vec![dims.vocab_size, dims.d_model],
            Init::Normal(0.1),
            rng,
        );
        let pos_emb = dims.use_positions.then(|| {
            store.add(
                &format!("{name}.pos_emb"),
                vec![dims.max_len, dims.d_model],
                Init::Normal(0.1),
                rng,
            )
        });
        let layers = (0..dims.n_layers)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    rng,
                    &format!("{name}.layers.{i}"),
                    dims.d_model,
                    dims.n_heads,
                    dims.ffn_dim,
                )
            })
            .collect();
        let final_ln = LayerNorm::new(store, rng, &format!("{name}.final_ln"), dims.d_model);
        Self {
            tok_emb,
            pos_emb,
            layers,
            final_ln,
            max_len: dims.max_len,
            local_layers: dims.local_layers,
        }
    }

    /// Embeds `ids` starting at position `offset`.
    pub fn embed(&self, g: &mut Graph, ids: &[usize], offset: usize) -> Result<Var> {
        if offset + ids.len() > self.max_len {
            return Err(Error::Position {
                pos: offset + ids.len() - 1,
                len: self.max_len,
            });
        }
        let table = g.param(self.tok_emb);
        let x = g.embedding_gather(table, ids)?;
        match self.pos_emb {
            Some(p) => {
                let positions: Vec<usize> = (offset..offset + ids.len()).collect();
                let pt = g.param(p);
                let pe = g.embedding_gather(pt, &positions)?;
                g.add(x, pe)
            }
            None => Ok(x),
        }
    }

    /// Final hidden states, `[ids.len(), d_model]`.
    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let mut x = self.embed(g, ids, 0)?;
        let mask = (self.local_layers > 0).then(|| g.constant(local_mask(ids)));
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x, mask.filter(|_| i < self.local_layers))?;
        }
        self.final_ln.forward(g, x)
    }
}

/// Cached self-attention keys/values of one decoder layer.
#[derive(Clone, Debug, Default)]
pub struct LayerCache {
    pub k: Option<Tensor>,
    pub v: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, heads: usize, ffn: usize) -> Self {
        Self {
            ln1: LayerNorm::new(store, rng, &format!("{name}.ln1"), d),
            self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), d, heads),
            ln2: LayerNorm::new(store, rng, &format!("{name}.ln2"), d),
            cross_attn: Attention::new(store, rng, &format!("{name}.cross_attn"), d, heads),
            ln3: LayerNorm::new(store, rng, &format!("{name}.ln3"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, ffn),
        }
    }

    /// Full teacher-forced pass with a causal mask.
    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, mask: Var) -> Result<Var> {
        let y = self.ln1.forward(g, x)?;
        let y = self.self_attn.forward(g, y, y, Some(mask))?;
        let x = g.add(x, y)?;
        let y = self.ln2.forward(g, x)?;
        let y = self.cross_attn.forward(g, y, memory, None)?;
        let x = g.add(x, y)?;
        let y = self.ln3.forward(g, x)?;
        let y = self.ffn.forward(g, y)?;
        g.add(x, y)
    }

    /// Cross-attention keys and values of the encoder memory.
    pub fn memory_kv(&self, g: &mut Graph, memory: Var) -> Result<(Var, Var)> {
        self.cross_attn.project_kv(g, memory)
    }

    /// One new position `x` (`[1, d]`) attending over `cache` plus itself.
    /// Appends the new key/value to `cache`.
    pub fn step(&self, g: &mut Graph, x: Var, mem_k: Var, mem_v: Var, cache: &mut LayerCache) -> Result<Var> {
        let y = self.ln1.forward(g, x)?;
        let q = self.self_attn.q.forward(g, y)?;
        let (k_new, v_new) = self.self_attn.project_kv(g, y)?;
        let (k, v) = match (&cache.k, &cache.v) {
            (Some(kc), Some(vc)) => {
                let kc = g.constant(kc.clone());
                let vc = g.constant(vc.clone());
                (g.concat(&[kc, k_new], 0)?, g.concat(&[vc, v_new], 0)?)
            }
            _ => (k_new, v_new),
        };
        cache.k = Some(g.value(k).clone());
        cache.v = Some(g.value(v).clone());
        let y = self.self_attn.attend(g, q, k, v, None)?;
        let x = g.add(x, y)?;
        let y = self.ln2.forward(g, x)?;
        let q = self.cross_attn.q.forward(g, y)?;
        let y = self.cross_attn.attend(g, q, mem_k, mem_v, None)?;
        let x = g.add(x, y)?;
        let y = self.ln3.forward(g, x)?;
        let y = self.ffn.forward(g, y)?;
        g.add(x, y)
    }
}
