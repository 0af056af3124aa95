//! Decoder-only transformer whose input layer takes a mix of token ids and
//! raw embedding rows.
//!
//! Model structs here are descriptors: they know the configuration and
//! parameter names, while the tensors themselves live in a shared
//! [`ParamStore`] under the `lm.` prefix. That lets a planner keep the
//! LM, the observation encoder and any soft prompts in one store with one
//! optimizer and one checkpoint.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::graph::{log_softmax, Graph, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::EOS;

pub const LM_PREFIX: &str = "lm.";
pub const PROMPT_PREFIX: &str = "prompt.";

#[derive(Clone, Debug, PartialEq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl LmConfig {
    /// Desk-scale shape used by the experiments.
    pub fn desk(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            max_positions: 512,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.max_positions == 0
        {
            return Err(CoreError::Config("all LM extents must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(CoreError::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "vocab_size = {}\nembed_dim = {}\nn_layers = {}\nn_heads = {}\nmax_positions = {}\ndropout = {}\n",
            self.vocab_size, self.embed_dim, self.n_layers, self.n_heads, self.max_positions, self.dropout
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CoreError::Config(format!("expected `key = value`, got `{line}`"))
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k)
                .ok_or_else(|| CoreError::Config(format!("missing key `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|e| CoreError::Config(format!("{k}: {e}")))
        };
        let cfg = LmConfig {
            vocab_size: num("vocab_size")?,
            embed_dim: num("embed_dim")?,
            n_layers: num("n_layers")?,
            n_heads: num("n_heads")?,
            max_positions: num("max_positions")?,
            dropout: get("dropout")?
                .parse()
                .map_err(|e| CoreError::Config(format!("dropout: {e}")))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Pre-norm GPT-style transformer with learned positions and an output
/// projection tied to the token table.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLm {
    pub config: LmConfig,
}

fn p(name: &str) -> String {
    format!("{LM_PREFIX}{name}")
}

impl TransformerLm {
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        Ok(TransformerLm { config })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn token_table_name() -> String {
        p("tok_emb")
    }

    /// Fresh weights: N(0, 0.02) matrices, residual projections scaled by
    /// 1/√(2·layers), unit layer-norm gains, zero biases.
    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let c = &self.config;
        let e = c.embed_dim;
        let resid_std = 0.02 / ((2 * c.n_layers) as f64).sqrt();
        store.init_normal(&p("tok_emb"), &[c.vocab_size, e], 0.02, rng);
        store.init_normal(&p("pos_emb"), &[c.max_positions, e], 0.01, rng);
        for l in 0..c.n_layers {
            let b = |n: &str| p(&format!("h{l}.{n}"));
            store.init_const(&b("ln1.g"), &[e], 1.0);
            store.init_const(&b("ln1.b"), &[e], 0.0);
            store.init_normal(&b("attn.qkv.w"), &[e, 3 * e], 0.02, rng);
            store.init_const(&b("attn.qkv.b"), &[3 * e], 0.0);
            store.init_normal(&b("attn.proj.w"), &[e, e], resid_std, rng);
            store.init_const(&b("attn.proj.b"), &[e], 0.0);
            store.init_const(&b("ln2.g"), &[e], 1.0);
            store.init_const(&b("ln2.b"), &[e], 0.0);
            store.init_normal(&b("mlp.fc.w"), &[e, 4 * e], 0.02, rng);
            store.init_const(&b("mlp.fc.b"), &[4 * e], 0.0);
            store.init_normal(&b("mlp.proj.w"), &[4 * e, e], resid_std, rng);
            store.init_const(&b("mlp.proj.b"), &[e], 0.0);
        }
        store.init_const(&p("ln_f.g"), &[e], 1.0);
        store.init_const(&p("ln_f.b"), &[e], 0.0);
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(CoreError::TokenOutOfRange {
                id: bad,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Token embedding rows `(len, E)`; positions are added in [`Self::forward`].
    pub fn embed_tokens<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ids: &[u32],
    ) -> Result<Var> {
        self.check_ids(ids)?;
        let table = g.param(store, &p("tok_emb"))?;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        g.gather(table, &idx)
    }

    /// Logits `(len, vocab)` for an embedding sequence `(len, E)`.
    ///
    /// Dropout is applied only when an RNG is supplied.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let h = self.hidden(g, store, x, dropout)?;
        let table = g.param(store, &p("tok_emb"))?;
        g.matmul_nt(h, table)
    }

    /// Final normalized hidden states `(len, E)`.
    pub fn hidden<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let c = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != c.embed_dim {
            return Err(CoreError::Shape {
                op: "lm-forward",
                lhs: shape,
                rhs: vec![0, c.embed_dim],
            });
        }
        let len = shape[0];
        if len > c.max_positions {
            return Err(CoreError::Overlength {
                len,
                max: c.max_positions,
            });
        }
        let rate = c.dropout;
        let mut drop = |g: &mut Graph<T>, v: Var| -> Result<Var> {
            match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => g.dropout(v, rate, rng),
                _ => Ok(v),
            }
        };
        let pos_table = g.param(store, &p("pos_emb"))?;
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather(pos_table, &positions)?;
        let mut x = g.add(x, pos)?;
        x = drop(g, x)?;
        let e = c.embed_dim;
        let dh = e / c.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..c.n_layers {
            let mut w = |n: &str| g.param(store, &p(&format!("h{l}.{n}")));
            let (ln1g, ln1b, qkvw, qkvb, projw, projb) = (
                w("ln1.g")?,
                w("ln1.b")?,
                w("attn.qkv.w")?,
                w("attn.qkv.b")?,
                w("attn.proj.w")?,
                w("attn.proj.b")?,
            );
            let (ln2g, ln2b, fcw, fcb, mpw, mpb) = (
                w("ln2.g")?,
                w("ln2.b")?,
                w("mlp.fc.w")?,
                w("mlp.fc.b")?,
                w("mlp.proj.w")?,
                w("mlp.proj.b")?,
            );

            let h = g.layernorm(x, ln1g, ln1b)?;
            let qkv = g.matmul(h, qkvw)?;
            let qkv = g.add_bias(qkv, qkvb)?;
            let mut heads = Vec::with_capacity(c.n_heads);
            for hd in 0..c.n_heads {
                let q = g.slice(qkv, 1, hd * dh, dh)?;
                let k = g.slice(qkv, 1, e + hd * dh, dh)?;
                let v = g.slice(qkv, 1, 2 * e + hd * dh, dh)?;
                let att = g.matmul_nt(q, k)?;
                let att = g.scale(att, scale)?;
                let att = g.causal_softmax(att)?;
                heads.push(g.matmul(att, v)?);
            }
            let merged = g.concat(&heads, 1)?;
            let o = g.matmul(merged, projw)?;
            let o = g.add_bias(o, projb)?;
            let o = drop(g, o)?;
            x = g.add(x, o)?;

            let h = g.layernorm(x, ln2g, ln2b)?;
            let f = g.matmul(h, fcw)?;
            let f = g.add_bias(f, fcb)?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, mpw)?;
            let f = g.add_bias(f, mpb)?;
            let f = drop(g, f)?;
            x = g.add(x, f)?;
        }
        let (lg, lb) = (g.param(store, &p("ln_f.g"))?, g.param(store, &p("ln_f.b"))?);
        g.layernorm(x, lg, lb)
    }

    pub fn forward_ids<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ids: &[u32],
    ) -> Result<Var> {
        let x = self.embed_tokens(g, store, ids)?;
        self.forward(g, store, x, None)
    }

    /// Teacher-forced `Σ_j log p(target_j | context, target_<j)` in eval mode.
    pub fn sequence_logprob<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        context: &Tensor<T>,
        target: &[u32],
    ) -> Result<f64> {
        if target.is_empty() {
            return Err(CoreError::invalid("sequence-logprob", "empty target"));
        }
        self.check_ids(target)?;
        let mut g = Graph::new();
        let cxt = g.constant(context.clone());
        let clen = g.shape(cxt)[0];
        let x = if target.len() > 1 {
            let t = self.embed_tokens(&mut g, store, &target[..target.len() - 1])?;
            g.concat(&[cxt, t], 0)?
        } else {
            cxt
        };
        let logits = self.forward(&mut g, store, x, None)?;
        let lv = g.value(logits);
        let mut total = 0.0;
        for (j, &t) in target.iter().enumerate() {
            total += log_softmax(lv.row(clen - 1 + j))[t as usize];
        }
        Ok(total)
    }

    /// Log-probabilities of the next token after `context` followed by `prefix`.
    pub fn next_logprobs<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        context: &Tensor<T>,
        prefix: &[u32],
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let cxt = g.constant(context.clone());
        let x = if prefix.is_empty() {
            cxt
        } else {
            let t = self.embed_tokens(&mut g, store, prefix)?;
            g.concat(&[cxt, t], 0)?
        };
        let len = g.shape(x)[0];
        let h = self.hidden(&mut g, store, x, None)?;
        let last = g.slice(h, 0, len - 1, 1)?;
        let table = g.param(store, &p("tok_emb"))?;
        let logits = g.matmul_nt(last, table)?;
        Ok(log_softmax(g.value(logits).data()))
    }

    /// Greedy decoding until EOS (excluded) or `max_len` tokens.
    pub fn generate_greedy<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        context: &Tensor<T>,
        max_len: usize,
    ) -> Result<Vec<u32>> {
        greedy_decode(|prefix| self.next_logprobs(store, context, prefix), max_len)
    }

    /// Beam search of width `k`; see [`beam_search`].
    pub fn generate_topk<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        context: &Tensor<T>,
        k: usize,
        max_len: usize,
    ) -> Result<Vec<(Vec<u32>, f64)>> {
        beam_search(
            |prefix| self.next_logprobs(store, context, prefix),
            k,
            max_len,
        )
    }
}

/// Argmax decoding over a next-token log-probability oracle; lowest id wins ties.
pub fn greedy_decode<F>(mut next: F, max_len: usize) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    let mut out = Vec::new();
    while out.len() < max_len {
        let lp = next(&out)?;
        let best = argmax(&lp);
        if best == EOS {
            break;
        }
        out.push(best);
    }
    Ok(out)
}

pub(crate) fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Beam search of width `k` over a next-token log-probability oracle.
///
/// At each step every live hypothesis is extended by every token and the
/// `k - finished` best extensions are kept; extensions ending in EOS become
/// finished. Hypotheses reaching `max_len` tokens finish without EOS.
/// Returns finished sequences (EOS stripped) with their total log-probability,
/// sorted descending with ties broken by lexicographic id order. With `k = 1`
/// this is greedy decoding.
pub fn beam_search<F>(mut next: F, k: usize, max_len: usize) -> Result<Vec<(Vec<u32>, f64)>>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    if k == 0 {
        return Err(CoreError::invalid("beam-search", "k must be at least 1"));
    }
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    while !live.is_empty() && finished.len() < k {
        let mut cands: Vec<(Vec<u32>, f64, bool)> = Vec::new();
        for (seq, score) in &live {
            if seq.len() >= max_len {
                cands.push((seq.clone(), *score, true));
                continue;
            }
            let lp = next(seq)?;
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let tok = tok as u32;
                if tok == EOS {
                    cands.push((seq.clone(), score + l, true));
                } else {
                    let mut s = seq.clone();
                    s.push(tok);
                    cands.push((s, score + l, false));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| a.0.cmp(&b.0))
                .then_with(|| b.2.cmp(&a.2))
        });
        let room = k - finished.len();
        live.clear();
        for (seq, score, done) in cands.into_iter().take(room) {
            if done {
                finished.push((seq, score));
            } else {
                live.push((seq, score));
            }
        }
    }
    finished.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(finished)
}

/// Named tunable embedding blocks of width `E` stored under `prompt.`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SoftPromptBank {
    pub embed_dim: usize,
    blocks: BTreeMap<String, usize>,
}

impl SoftPromptBank {
    pub fn new(embed_dim: usize) -> Self {
        SoftPromptBank {
            embed_dim,
            blocks: BTreeMap::new(),
        }
    }

    pub fn param_name(block: &str) -> String {
        format!("{PROMPT_PREFIX}{block}")
    }

    pub fn add_block<T: Scalar, R: Rng>(
        &mut self,
        store: &mut ParamStore<T>,
        name: &str,
        len: usize,
        rng: &mut R,
    ) {
        store.init_normal(&Self::param_name(name), &[len, self.embed_dim], 0.02, rng);
        self.blocks.insert(name.to_string(), len);
    }

    /// Declares a block whose parameter already lives in the store.
    pub fn register_block(&mut self, name: &str, len: usize) {
        self.blocks.insert(name.to_string(), len);
    }

    pub fn block_len(&self, name: &str) -> Option<usize> {
        self.blocks.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.keys().map(String::as_str)
    }

    pub fn block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        name: &str,
    ) -> Result<Var> {
        if !self.blocks.contains_key(name) {
            return Err(CoreError::UnknownParam(Self::param_name(name)));
        }
        let v = g.param(store, &Self::param_name(name))?;
        let shape = g.shape(v);
        if shape.len() != 2 || shape[1] != self.embed_dim {
            return Err(CoreError::Shape {
                op: "soft-prompt",
                lhs: shape.to_vec(),
                rhs: vec![0, self.embed_dim],
            });
        }
        Ok(v)
    }
}

/// Frozen mode: every `lm.` parameter stops updating; soft prompts and the
/// observation encoder stay trainable.
pub fn set_frozen_mode<T: Scalar>(store: &mut ParamStore<T>, frozen: bool) {
    store.set_frozen_prefix(LM_PREFIX, frozen);
}
