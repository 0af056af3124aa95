//! Caption model for the Captions baseline: an LM reading the caption
//! instruction and a visual prompt, trained to emit the template caption.

use rand_chacha::ChaCha8Rng;
use vp2_core::lm::{TransformerLm, LM_PREFIX};
use vp2_core::vision::{caption_loss, PromptProjector, VisualBackbone, BACKBONE_PREFIX};
use vp2_core::vocab::SEP;
use vp2_core::{ParamStore, Scalar, Tensor};

use crate::config::{TrainConfig, MAX_CAPTION_TOKENS};
use crate::data::Dataset;
use crate::error::{PlannerError, Result};
use crate::model::vcat;
use crate::train::{lr_groups, run_training, LossCurve};

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionModel {
    pub lm: TransformerLm,
    pub backbone: VisualBackbone,
    pub projector: PromptProjector,
    /// Instruction tokens preceding the observation.
    pub prefix: Vec<u32>,
}

impl CaptionModel {
    pub fn instantiate<T: Scalar>(
        lm: &TransformerLm,
        lm_store: &ParamStore<T>,
        backbone: &VisualBackbone,
        vision_store: &ParamStore<T>,
        prompt_size: usize,
        prefix: Vec<u32>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        store.copy_prefix_from(lm_store, LM_PREFIX);
        store.copy_prefix_from(vision_store, BACKBONE_PREFIX);
        backbone.set_frozen(&mut store, true);
        let projector = PromptProjector::new(backbone.feature_dim(), prompt_size, lm.embed_dim());
        projector.init(&mut store, rng);
        Ok((
            CaptionModel {
                lm: lm.clone(),
                backbone: backbone.clone(),
                projector,
                prefix,
            },
            store,
        ))
    }

    /// Minimises `L_cap` over every observation of `ds` (features attached),
    /// one example per observation; the batch loss is the per-example mean.
    pub fn train<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        ds: &Dataset<T>,
        cfg: &TrainConfig,
    ) -> Result<LossCurve> {
        let ds = ds.capped(cfg.dataset_cap);
        let items: Vec<(usize, &[u32])> = ds
            .demos
            .iter()
            .flat_map(|d| &d.steps)
            .map(|s| (s.obs, s.caption.as_slice()))
            .collect();
        run_training(
            cfg,
            items.len(),
            store,
            lr_groups(cfg),
            |g, st, batch, _| {
                let mut parts = Vec::with_capacity(batch.len());
                for &i in batch {
                    let (row, caption) = items[i];
                    let f = ds.feature_rows(&[row])?;
                    parts.push(caption_loss(
                        g,
                        st,
                        &self.lm,
                        &self.projector,
                        &self.prefix,
                        &f,
                        caption,
                    )?);
                }
                let s = g.add_all(&parts)?;
                Ok(g.scale(s, 1.0 / batch.len() as f64)?)
            },
        )
    }

    /// Greedy caption ids (EOS stripped) for one feature row `(1, F)`.
    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
    ) -> Result<Vec<u32>> {
        let e = self.lm.embed_dim();
        let mut g = vp2_core::Graph::new();
        let f = g.constant(features.clone());
        let block = self.projector.prompt_blocks(&mut g, store, f)?.remove(0);
        let prompt = g.value(block).clone();
        let mut parts = Vec::new();
        if !self.prefix.is_empty() {
            let mut ids = self.prefix.clone();
            ids.push(SEP);
            parts.push(self.lm.token_rows(store, &ids)?);
        }
        parts.push(prompt);
        parts.push(self.lm.token_rows(store, &[SEP])?);
        let rows = vcat(&parts, e)?;
        let mut cache = self.lm.new_cache();
        let last = self
            .lm
            .extend_cache(store, &mut cache, &rows)?
            .pop()
            .ok_or_else(|| PlannerError::Data("empty caption context".into()))?;
        Ok(self
            .lm
            .cached_greedy(store, &mut cache, &last, MAX_CAPTION_TOKENS)?)
    }

    /// Captions for raw observations, via this model's own backbone copy.
    pub fn predict_observation<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        obs: &vp2_core::vision::Observation,
    ) -> Result<Vec<u32>> {
        let f = self.backbone.feature_tensor(store, obs)?;
        self.predict(store, &f)
    }

    /// Predicted captions for every observation row of `ds`.
    pub fn caption_dataset<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        ds: &Dataset<T>,
    ) -> Result<Vec<Vec<u32>>> {
        let n = ds.features.as_ref().map_or(0, |f| f.dims2().0);
        (0..n)
            .map(|r| self.predict(store, &ds.feature_rows(&[r])?))
            .collect()
    }
}
