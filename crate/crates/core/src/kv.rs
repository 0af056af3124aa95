//! Tape-free incremental inference with a key/value cache.
//!
//! Produces the same logits as [`TransformerLm::forward`] (up to float
//! summation order) while processing each new row once, which makes
//! step-by-step rollouts and beam search cheap.

use crate::error::{CoreError, Result};
use crate::graph::{log_softmax, softmax_in_place, GELU_C, LN_EPS};
use crate::lm::{TransformerLm, LM_PREFIX};
use crate::params::ParamStore;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Cached keys and values for every processed position.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T: Scalar> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn weight<'a, T: Scalar>(store: &'a ParamStore<T>, name: &str) -> Result<&'a [T]> {
    let full = format!("{LM_PREFIX}{name}");
    store
        .get(&full)
        .map(Tensor::data)
        .ok_or(CoreError::UnknownParam(full))
}

/// `out = x·w + b` for `rows` rows.
fn affine<T: Scalar>(x: &[T], rows: usize, w: &[T], b: &[T], n: usize) -> Vec<T> {
    let k = x.len() / rows;
    let mut out: Vec<T> = (0..rows).flat_map(|_| b.iter().copied()).collect();
    T::gemm(
        rows,
        k,
        n,
        T::one(),
        x,
        k as isize,
        1,
        w,
        n as isize,
        1,
        T::one(),
        &mut out,
        n as isize,
        1,
    );
    out
}

fn layernorm<T: Scalar>(x: &[T], c: usize, g: &[T], b: &[T]) -> Vec<T> {
    let nc = s::<T>(c as f64);
    let eps = s::<T>(LN_EPS);
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = row.iter().copied().sum::<T>() / nc;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nc;
        let rs = T::one() / (var + eps).sqrt();
        out.extend(
            row.iter()
                .enumerate()
                .map(|(j, &v)| (v - mean) * rs * g[j] + b[j]),
        );
    }
    out
}

impl TransformerLm {
    pub fn new_cache<T: Scalar>(&self) -> KvCache<T> {
        let n = self.config.n_layers;
        KvCache {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Token-embedding rows `(ids.len(), E)` read directly from the store.
    pub fn token_rows<T: Scalar>(&self, store: &ParamStore<T>, ids: &[u32]) -> Result<Tensor<T>> {
        let e = self.config.embed_dim;
        let table = weight(store, "tok_emb")?;
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(CoreError::TokenOutOfRange {
                    id,
                    size: self.config.vocab_size,
                });
            }
            data.extend_from_slice(&table[id as usize * e..(id as usize + 1) * e]);
        }
        Tensor::new(&[ids.len(), e], data)
    }

    /// Appends input rows `(n, E)` (positions are added here) and returns
    /// next-token log-probabilities after each new row.
    pub fn extend_cache<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &mut KvCache<T>,
        rows: &Tensor<T>,
    ) -> Result<Vec<Vec<f64>>> {
        let c = &self.config;
        let e = c.embed_dim;
        let (n, width) = rows.dims2();
        if width != e {
            return Err(CoreError::Shape {
                op: "kv-extend",
                lhs: rows.shape().to_vec(),
                rhs: vec![0, e],
            });
        }
        let start = cache.len;
        if start + n > c.max_positions {
            return Err(CoreError::Overlength {
                len: start + n,
                max: c.max_positions,
            });
        }
        let pos = weight(store, "pos_emb")?;
        let mut x: Vec<T> = rows.data().to_vec();
        for (i, v) in x.iter_mut().enumerate() {
            *v += pos[(start + i / e) * e + i % e];
        }
        let dh = e / c.n_heads;
        let scale = s::<T>(1.0 / (dh as f64).sqrt());
        let (gc, gk, half) = (s::<T>(GELU_C), s::<T>(0.044715), s::<T>(0.5));
        for l in 0..c.n_layers {
            let w = |name: &str| weight(store, &format!("h{l}.{name}"));
            let h = layernorm(&x, e, w("ln1.g")?, w("ln1.b")?);
            let qkv = affine(&h, n, w("attn.qkv.w")?, w("attn.qkv.b")?, 3 * e);
            for i in 0..n {
                let r = &qkv[i * 3 * e..(i + 1) * 3 * e];
                cache.keys[l].extend_from_slice(&r[e..2 * e]);
                cache.values[l].extend_from_slice(&r[2 * e..]);
            }
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            let mut merged = vec![T::zero(); n * e];
            let mut scores = Vec::with_capacity(start + n);
            for i in 0..n {
                let q = &qkv[i * 3 * e..i * 3 * e + e];
                let visible = start + i + 1;
                for hd in 0..c.n_heads {
                    let off = hd * dh;
                    scores.clear();
                    for j in 0..visible {
                        let k = &keys[j * e + off..j * e + off + dh];
                        let dot = q[off..off + dh]
                            .iter()
                            .zip(k)
                            .map(|(&a, &b)| a * b)
                            .sum::<T>();
                        scores.push(dot * scale);
                    }
                    softmax_in_place(&mut scores);
                    let out = &mut merged[i * e + off..i * e + off + dh];
                    for (j, &p) in scores.iter().enumerate() {
                        let v = &values[j * e + off..j * e + off + dh];
                        for (o, &vv) in out.iter_mut().zip(v) {
                            *o += p * vv;
                        }
                    }
                }
            }
            let o = affine(&merged, n, w("attn.proj.w")?, w("attn.proj.b")?, e);
            x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);
            let h = layernorm(&x, e, w("ln2.g")?, w("ln2.b")?);
            let mut f = affine(&h, n, w("mlp.fc.w")?, w("mlp.fc.b")?, 4 * e);
            for v in f.iter_mut() {
                let z = *v;
                *v = half * z * (T::one() + (gc * (z + gk * z * z * z)).tanh());
            }
            let f = affine(&f, n, w("mlp.proj.w")?, w("mlp.proj.b")?, e);
            x.iter_mut().zip(&f).for_each(|(a, &b)| *a += b);
        }
        cache.len += n;
        let h = layernorm(&x, e, weight(store, "ln_f.g")?, weight(store, "ln_f.b")?);
        let table = weight(store, "tok_emb")?;
        let v = c.vocab_size;
        let mut logits = vec![T::zero(); n * v];
        T::gemm(
            n,
            e,
            v,
            T::one(),
            &h,
            e as isize,
            1,
            table,
            1,
            e as isize,
            T::zero(),
            &mut logits,
            v as isize,
            1,
        );
        Ok(logits.chunks(v).map(log_softmax).collect())
    }

    /// [`Self::extend_cache`] for token ids.
    pub fn extend_cache_tokens<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &mut KvCache<T>,
        ids: &[u32],
    ) -> Result<Vec<Vec<f64>>> {
        let rows = self.token_rows(store, ids)?;
        self.extend_cache(store, cache, &rows)
    }

    /// `Σ log p(target | cached context)`, given the log-probabilities that
    /// followed the last cached row. The cache itself is left untouched.
    pub fn cached_sequence_logprob<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &KvCache<T>,
        last: &[f64],
        target: &[u32],
    ) -> Result<f64> {
        let Some((&first, rest)) = target.split_first() else {
            return Err(CoreError::invalid("sequence-logprob", "empty target"));
        };
        let mut total = last[first as usize];
        if !rest.is_empty() {
            let mut c = cache.clone();
            let lps = self.extend_cache_tokens(store, &mut c, &target[..target.len() - 1])?;
            total += rest
                .iter()
                .zip(&lps)
                .map(|(&t, lp)| lp[t as usize])
                .sum::<f64>();
        }
        Ok(total)
    }

    /// Greedy continuation of a cache; stops at EOS (excluded) or `max_len`.
    /// Every generated token is appended to the cache, the EOS is not.
    pub fn cached_greedy<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &mut KvCache<T>,
        last: &[f64],
        max_len: usize,
    ) -> Result<Vec<u32>> {
        let mut lp = last.to_vec();
        let mut out = Vec::new();
        while out.len() < max_len {
            let best = crate::lm::argmax(&lp);
            if best == crate::vocab::EOS {
                break;
            }
            out.push(best);
            lp = self.extend_cache_tokens(store, cache, &[best])?.remove(0);
        }
        Ok(out)
    }

    /// Beam search continuing a cache, which is left untouched.
    pub fn cached_beam<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &KvCache<T>,
        last: &[f64],
        k: usize,
        max_len: usize,
    ) -> Result<Vec<(Vec<u32>, f64)>> {
        crate::lm::beam_search(
            |prefix| {
                if prefix.is_empty() {
                    return Ok(last.to_vec());
                }
                let mut c = cache.clone();
                Ok(self
                    .extend_cache_tokens(store, &mut c, prefix)?
                    .pop()
                    .expect("non-empty prefix"))
            },
            k,
            max_len,
        )
    }
}
