//! SayCan-style ranking: LM action likelihood times an affordance
//! probability, with an oracle or a learned affordance model.

use std::cmp::Ordering;

use rand_chacha::ChaCha8Rng;
use vp2_core::context::{Piece, SegmentTag, SequenceBuilder};
use vp2_core::lm::{TransformerLm, LM_PREFIX};
use vp2_core::vision::{PromptProjector, VisualBackbone, BACKBONE_PREFIX};
use vp2_core::vocab::SEP;
use vp2_core::{Graph, ParamStore, Reduction, Scalar, Tensor, Var};

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{PlannerError, Result};
use crate::model::vcat;
use crate::train::{lr_groups, run_training, LossCurve};

/// One candidate action with its LM probability and affordance probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub text: String,
    pub p_lm: f64,
    pub p_aff: f64,
}

impl Candidate {
    pub fn score(&self) -> f64 {
        saycan_score(self.p_lm, self.p_aff)
    }
}

/// `p_LM(a | g, a_<t) · p_aff(a | o_t)`.
pub fn saycan_score(p_lm: f64, p_aff: f64) -> f64 {
    p_lm * p_aff
}

/// Highest-scoring candidate; ties go to the lexicographically smallest
/// text and an empty set (or all-zero scores) yields `done`.
pub fn saycan_select(candidates: &[Candidate]) -> String {
    candidates
        .iter()
        .filter(|c| c.score() > 0.0)
        .max_by(|a, b| {
            a.score()
                .partial_cmp(&b.score())
                .unwrap_or(Ordering::Equal)
                .then_with(|| b.text.cmp(&a.text))
        })
        .map_or_else(|| "done".to_string(), |c| c.text.clone())
}

/// Binary valid/invalid classifier over `[prompt SEP o^e SEP action SEP]`,
/// read from the LM's next-token logits for the two label words.
#[derive(Clone, Debug, PartialEq)]
pub struct AffordanceModel {
    pub lm: TransformerLm,
    pub backbone: VisualBackbone,
    pub projector: PromptProjector,
    pub prompt: Vec<u32>,
    pub valid: u32,
    pub invalid: u32,
}

/// One training example: feature row, action ids and label.
#[derive(Clone, Debug, PartialEq)]
pub struct AffordanceItem {
    pub obs: usize,
    pub action: Vec<u32>,
    pub valid: bool,
}

impl AffordanceModel {
    #[allow(clippy::too_many_arguments)]
    pub fn instantiate<T: Scalar>(
        lm: &TransformerLm,
        lm_store: &ParamStore<T>,
        backbone: &VisualBackbone,
        vision_store: &ParamStore<T>,
        prompt_size: usize,
        prompt: Vec<u32>,
        labels: (u32, u32),
        rng: &mut ChaCha8Rng,
    ) -> Result<(Self, ParamStore<T>)> {
        if labels.0 == labels.1 {
            return Err(PlannerError::Config(
                "valid and invalid labels must differ".into(),
            ));
        }
        let mut store = ParamStore::new();
        store.copy_prefix_from(lm_store, LM_PREFIX);
        store.copy_prefix_from(vision_store, BACKBONE_PREFIX);
        backbone.set_frozen(&mut store, true);
        let projector = PromptProjector::new(backbone.feature_dim(), prompt_size, lm.embed_dim());
        projector.init(&mut store, rng);
        let model = AffordanceModel {
            lm: lm.clone(),
            backbone: backbone.clone(),
            projector,
            prompt,
            valid: labels.0,
            invalid: labels.1,
        };
        Ok((model, store))
    }

    /// Label logits `(1, 2)` = `[valid, invalid]` for one example.
    pub fn logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        action: &[u32],
    ) -> Result<Var> {
        let f = g.constant(features.clone());
        let block = self.projector.prompt_blocks(g, store, f)?.remove(0);
        let mut b = SequenceBuilder::new();
        b.segment(SegmentTag::Goal, Piece::Tokens(self.prompt.clone()), SEP);
        b.segment(
            SegmentTag::Observation(1),
            Piece::Embeds {
                var: block,
                rows: self.projector.prompts,
            },
            SEP,
        );
        b.segment(SegmentTag::Target, Piece::Tokens(action.to_vec()), SEP);
        let x = b.build(&self.lm, g, store)?;
        let logits = self.lm.forward(g, store, x, None)?;
        let last = g.slice(logits, 0, b.len() - 1, 1)?;
        Ok(g.select_cols(last, &[self.valid as usize, self.invalid as usize])?)
    }

    /// Two-way cross-entropy (binary cross-entropy over the label words).
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        action: &[u32],
        valid: bool,
    ) -> Result<Var> {
        let l = self.logits(g, store, features, action)?;
        Ok(g.cross_entropy(l, &[Some(if valid { 0 } else { 1 })], Reduction::Sum)?)
    }

    pub fn train<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        ds: &Dataset<T>,
        items: &[AffordanceItem],
        cfg: &TrainConfig,
    ) -> Result<LossCurve> {
        run_training(
            cfg,
            items.len(),
            store,
            lr_groups(cfg),
            |g, st, batch, _| {
                let mut parts = Vec::with_capacity(batch.len());
                for &i in batch {
                    let it = &items[i];
                    parts.push(self.loss(
                        g,
                        st,
                        &ds.feature_rows(&[it.obs])?,
                        &it.action,
                        it.valid,
                    )?);
                }
                let s = g.add_all(&parts)?;
                Ok(g.scale(s, 1.0 / batch.len() as f64)?)
            },
        )
    }

    /// `p(valid)` renormalised over the two label words, for each action
    /// under one observation. The shared prefix is encoded once.
    pub fn p_valid<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        actions: &[Vec<u32>],
    ) -> Result<Vec<f64>> {
        let e = self.lm.embed_dim();
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let block = self.projector.prompt_blocks(&mut g, store, f)?.remove(0);
        let mut parts = Vec::new();
        if !self.prompt.is_empty() {
            let mut ids = self.prompt.clone();
            ids.push(SEP);
            parts.push(self.lm.token_rows(store, &ids)?);
        }
        parts.push(g.value(block).clone());
        parts.push(self.lm.token_rows(store, &[SEP])?);
        let mut base = self.lm.new_cache();
        self.lm.extend_cache(store, &mut base, &vcat(&parts, e)?)?;
        let mut out = Vec::with_capacity(actions.len());
        for a in actions {
            let mut cache = base.clone();
            let mut ids = a.clone();
            ids.push(SEP);
            let lp = self
                .lm
                .extend_cache_tokens(store, &mut cache, &ids)?
                .pop()
                .expect("non-empty");
            let (v, i) = (lp[self.valid as usize], lp[self.invalid as usize]);
            out.push(1.0 / (1.0 + (i - v).exp()));
        }
        Ok(out)
    }

    /// `p(valid)` for raw observations, via this model's backbone copy.
    pub fn p_valid_observation<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        obs: &vp2_core::vision::Observation,
        actions: &[Vec<u32>],
    ) -> Result<Vec<f64>> {
        let f = self.backbone.feature_tensor(store, obs)?;
        self.p_valid(store, &f, actions)
    }

    /// Classification accuracy at threshold 0.5.
    pub fn accuracy<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        ds: &Dataset<T>,
        items: &[AffordanceItem],
    ) -> Result<f64> {
        let mut hits = 0usize;
        for it in items {
            let p = self.p_valid(
                store,
                &ds.feature_rows(&[it.obs])?,
                std::slice::from_ref(&it.action),
            )?[0];
            hits += ((p >= 0.5) == it.valid) as usize;
        }
        Ok(hits as f64 / items.len().max(1) as f64)
    }
}

/// Accuracy of always predicting the more frequent label.
pub fn majority_accuracy(items: &[AffordanceItem]) -> f64 {
    let pos = items.iter().filter(|i| i.valid).count();
    pos.max(items.len() - pos) as f64 / items.len().max(1) as f64
}
