//! Token and feature encodings of demonstrations.

use minialf::corpus::lexicon;
use minialf::Demonstration;
use vp2_core::vision::VisualBackbone;
use vp2_core::vocab::{Vocab, UNK};
use vp2_core::{ParamStore, Scalar, Tensor};

use crate::error::{PlannerError, Result};

/// Vocabulary over all environment text plus the given demonstrations.
pub fn build_vocab(demos: &[Demonstration]) -> Result<Vocab> {
    let mut corpus = lexicon();
    for d in demos {
        corpus.push(d.task.goal.clone());
        for s in &d.steps {
            corpus.push(s.caption.clone());
            corpus.push(s.action.clone());
        }
    }
    Ok(Vocab::build(&corpus)?)
}

/// Encodes text, rejecting words outside the vocabulary.
pub fn encode_strict(vocab: &Vocab, text: &str) -> Result<Vec<u32>> {
    let ids = vocab.encode(text);
    if ids.contains(&UNK) {
        return Err(PlannerError::Data(format!(
            "`{text}` has out-of-vocabulary words"
        )));
    }
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedStep {
    pub action: Vec<u32>,
    pub caption: Vec<u32>,
    /// Row of this step's observation in the dataset's feature table.
    pub obs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDemo {
    pub task_id: usize,
    pub goal: Vec<u32>,
    pub steps: Vec<EncodedStep>,
}

/// Demonstrations as token ids, plus per-observation backbone features and
/// optional per-observation text (predicted captions).
#[derive(Clone, Debug)]
pub struct Dataset<T: Scalar> {
    pub demos: Vec<EncodedDemo>,
    /// `(observations, F)`; empty until features are attached.
    pub features: Option<Tensor<T>>,
    pub obs_text: Option<Vec<Vec<u32>>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn encode(demos: &[Demonstration], vocab: &Vocab) -> Result<Self> {
        let mut out = Vec::with_capacity(demos.len());
        let mut next = 0;
        for d in demos {
            let mut steps = Vec::with_capacity(d.steps.len());
            for s in &d.steps {
                steps.push(EncodedStep {
                    action: encode_strict(vocab, &s.action)?,
                    caption: encode_strict(vocab, &s.caption)?,
                    obs: next,
                });
                next += 1;
            }
            out.push(EncodedDemo {
                task_id: d.task.id,
                goal: encode_strict(vocab, &d.task.goal)?,
                steps,
            });
        }
        Ok(Dataset {
            demos: out,
            features: None,
            obs_text: None,
        })
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn observation_count(&self) -> usize {
        self.demos.iter().map(|d| d.steps.len()).sum()
    }

    /// First `n` demos by index (observation rows are kept intact).
    pub fn capped(&self, n: Option<usize>) -> Self {
        let mut out = self.clone();
        if let Some(n) = n {
            out.demos.truncate(n);
        }
        out
    }

    pub fn attach_features(&mut self, features: Tensor<T>) -> Result<()> {
        let want = self
            .demos
            .iter()
            .flat_map(|d| &d.steps)
            .map(|s| s.obs + 1)
            .max()
            .unwrap_or(0);
        if features.rank() != 2 || features.dims2().0 < want {
            return Err(PlannerError::Data(format!(
                "feature table {:?} does not cover {want} observations",
                features.shape()
            )));
        }
        self.features = Some(features);
        Ok(())
    }

    pub fn feature_rows(&self, rows: &[usize]) -> Result<Tensor<T>> {
        let f = self
            .features
            .as_ref()
            .ok_or_else(|| PlannerError::Data("dataset has no observation features".into()))?;
        let dim = f.dims2().1;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            data.extend_from_slice(f.row(r));
        }
        Ok(Tensor::new(&[rows.len(), dim], data)?)
    }

    /// Text standing in for observation `obs`: predicted captions when
    /// attached, ground truth otherwise.
    pub fn observation_text(&self, step: &EncodedStep) -> Vec<u32> {
        match &self.obs_text {
            Some(t) => t[step.obs].clone(),
            None => step.caption.clone(),
        }
    }
}

/// Backbone features of every demonstrated observation, in step order.
pub fn demo_features<T: Scalar>(
    backbone: &VisualBackbone,
    store: &ParamStore<T>,
    demos: &[Demonstration],
) -> Result<Tensor<T>> {
    let dim = backbone.feature_dim();
    let n: usize = demos.iter().map(|d| d.steps.len()).sum();
    let mut data = Vec::with_capacity(n * dim);
    for s in demos.iter().flat_map(|d| &d.steps) {
        data.extend_from_slice(backbone.feature_tensor(store, &s.observation)?.data());
    }
    Ok(Tensor::new(&[n, dim], data)?)
}
