//! Epoch loop, seeded shuffling, learning-rate groups and loss curves.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vp2_core::lm::{TransformerLm, LM_PREFIX};
use vp2_core::vocab::Vocab;
use vp2_core::{AdamHyper, Graph, ParamStore, Reduction, Scalar, Var};

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{PlannerError, Result};
use crate::model::PlannerSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
}

/// Per-epoch mean losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
}

impl LossCurve {
    pub fn push(&mut self, epoch: usize, split: &str, loss: f64) {
        self.points.push(CurvePoint {
            epoch,
            split: split.to_string(),
            loss,
        });
    }

    pub fn split(&self, split: &str) -> Vec<f64> {
        self.points
            .iter()
            .filter(|p| p.split == split)
            .map(|p| p.loss)
            .collect()
    }

    pub fn train(&self) -> Vec<f64> {
        self.split("train")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,split,loss")?;
        for p in &self.points {
            writeln!(w, "{},{},{:.6}", p.epoch, p.split, p.loss)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// LM parameters get `lm_lr`/`lm_weight_decay`; every other trainable
/// (prompts, projector, task embeddings, heads) gets `vp_lr`/`weight_decay`.
pub fn lr_groups(cfg: &TrainConfig) -> impl Fn(&str) -> AdamHyper + '_ {
    move |name| {
        if name.starts_with(LM_PREFIX) {
            AdamHyper {
                lr: cfg.lm_lr,
                weight_decay: cfg.lm_weight_decay,
            }
        } else {
            AdamHyper {
                lr: cfg.vp_lr,
                weight_decay: cfg.weight_decay,
            }
        }
    }
}

/// Generic minibatch loop over `n` examples.
///
/// Each epoch visits a fresh permutation drawn from a generator seeded with
/// `cfg.seed`; `batch_loss` receives the batch indices and the same
/// generator for any sampling it does. Gradients of `grad_accum_steps`
/// consecutive batches are averaged per optimiser step.
pub fn run_training<T, F>(
    cfg: &TrainConfig,
    n: usize,
    store: &mut ParamStore<T>,
    hyper: impl Fn(&str) -> AdamHyper,
    mut batch_loss: F,
) -> Result<LossCurve>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>, &[usize], &mut ChaCha8Rng) -> Result<Var>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(PlannerError::Data("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = LossCurve::default();
    let accum = cfg.grad_accum_steps;
    store.zero_grads();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let mut total = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let loss = batch_loss(&mut g, store, batch, &mut rng)?;
            let value = g.value(loss).data()[0].to_f64_lossy();
            if !value.is_finite() {
                return Err(PlannerError::NonFinite { epoch, batch: bi });
            }
            total += value;
            let scaled = if accum > 1 {
                g.scale(loss, 1.0 / accum as f64)?
            } else {
                loss
            };
            g.backward(scaled)?;
            store.accumulate_grads(&g);
            if (bi + 1) % accum == 0 || bi + 1 == batches.len() {
                store.adam_step_with(&hyper, cfg.grad_clip)?;
            }
        }
        let mean = total / batches.len() as f64;
        log::info!("epoch {epoch}/{}: loss {mean:.4}", cfg.epochs);
        curve.push(epoch, "train", mean);
    }
    Ok(curve)
}

/// Trains a planner on `ds` with `L_D` plus the configured auxiliary terms.
pub fn train_planner<T: Scalar>(
    spec: &PlannerSpec,
    store: &mut ParamStore<T>,
    ds: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    let ds = ds.capped(cfg.dataset_cap);
    run_training(cfg, ds.len(), store, lr_groups(cfg), |g, st, batch, rng| {
        spec.batch_loss(g, st, &ds, batch, &cfg.aux, rng)
    })
}

/// Language-model pretraining on a text corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmPretrainConfig {
    pub paragraphs: usize,
    pub seq_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of packed sequences kept for held-out perplexity.
    pub held_out: f64,
}

impl Default for LmPretrainConfig {
    fn default() -> Self {
        LmPretrainConfig {
            paragraphs: 50_000,
            seq_len: 256,
            epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            held_out: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmPretrainReport {
    pub perplexity_before: f64,
    pub perplexity_after: f64,
    pub curve: LossCurve,
    pub train_sequences: usize,
    pub held_out_sequences: usize,
}

/// Concatenates tokenised paragraphs and cuts the stream into sequences
/// of at most `seq_len` tokens.
pub fn pack_corpus(vocab: &Vocab, corpus: &[String], seq_len: usize) -> Result<Vec<Vec<u32>>> {
    if seq_len < 2 {
        return Err(PlannerError::Config(
            "sequence length must be at least 2".into(),
        ));
    }
    let mut stream = Vec::new();
    for p in corpus {
        stream.extend(crate::data::encode_strict(vocab, p)?);
    }
    Ok(stream
        .chunks(seq_len)
        .filter(|c| c.len() >= 2)
        .map(<[u32]>::to_vec)
        .collect())
}

fn sequence_nll<T: Scalar>(
    lm: &TransformerLm,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    seq: &[u32],
) -> Result<Var> {
    let logits = lm.forward_ids(g, store, &seq[..seq.len() - 1])?;
    let targets: Vec<Option<usize>> = seq[1..].iter().map(|&t| Some(t as usize)).collect();
    Ok(g.cross_entropy(logits, &targets, Reduction::Sum)?)
}

/// `exp` of the mean next-token loss over `seqs`.
pub fn perplexity<T: Scalar>(
    lm: &TransformerLm,
    store: &ParamStore<T>,
    seqs: &[Vec<u32>],
) -> Result<f64> {
    let (mut nll, mut tokens) = (0.0, 0usize);
    for s in seqs {
        let mut g = Graph::new();
        let l = sequence_nll(lm, &mut g, store, s)?;
        nll += g.value(l).data()[0].to_f64_lossy();
        tokens += s.len() - 1;
    }
    Ok((nll / tokens.max(1) as f64).exp())
}

/// Next-token pretraining of `lm` on packed corpus sequences; the last
/// `held_out` fraction is only used to measure perplexity.
pub fn pretrain_lm<T: Scalar>(
    lm: &TransformerLm,
    store: &mut ParamStore<T>,
    seqs: &[Vec<u32>],
    cfg: &LmPretrainConfig,
) -> Result<LmPretrainReport> {
    let n_held = ((seqs.len() as f64 * cfg.held_out).ceil() as usize)
        .clamp(1, seqs.len().saturating_sub(1).max(1));
    if seqs.len() < 2 {
        return Err(PlannerError::Data(
            "corpus too small to hold out sequences".into(),
        ));
    }
    let (train, held) = seqs.split_at(seqs.len() - n_held);
    let before = perplexity(lm, store, held)?;
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        lm_lr: cfg.lr,
        lm_weight_decay: 0.0,
        grad_clip: Some(1.0),
        ..TrainConfig::reference()
    };
    let curve = run_training(
        &tc,
        train.len(),
        store,
        lr_groups(&tc),
        |g, st, batch, _| {
            let mut parts = Vec::with_capacity(batch.len());
            let mut tokens = 0;
            for &i in batch {
                parts.push(sequence_nll(lm, g, st, &train[i])?);
                tokens += train[i].len() - 1;
            }
            let s = g.add_all(&parts)?;
            Ok(g.scale(s, 1.0 / tokens as f64)?)
        },
    )?;
    let after = perplexity(lm, store, held)?;
    log::info!("pretraining perplexity {before:.2} -> {after:.2}");
    Ok(LmPretrainReport {
        perplexity_before: before,
        perplexity_after: after,
        curve,
        train_sequences: train.len(),
        held_out_sequences: held.len(),
    })
}
