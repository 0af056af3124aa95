//! The shared planner network: an LM that reads `[task] goal (obs action)*`
//! contexts where observations are visual prompts, caption tokens or
//! absent. VP², Captions and Ignore differ only in the observation mode.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vp2_core::context::{Piece, SegmentTag, SequenceBuilder};
use vp2_core::lm::{SoftPromptBank, TransformerLm, LM_PREFIX};
use vp2_core::vision::{PromptProjector, VisualBackbone, BACKBONE_PREFIX};
use vp2_core::vocab::{EOS, SEP};
use vp2_core::{CoreError, Graph, KvCache, ParamStore, Reduction, Scalar, Tensor, Var};

use crate::config::{AuxConfig, AuxTask, MAX_ACTION_TOKENS};
use crate::data::{Dataset, EncodedDemo};
use crate::error::{PlannerError, Result};

/// What stands in for an observation in the context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObsMode {
    /// Text-only contexts (Ignore, SayCan's action model).
    None,
    /// `m` visual-prompt rows from the projector.
    Visual,
    /// Caption tokens.
    Text,
}

pub const ACTION_TASK: &str = "task.action";

pub fn task_block(t: AuxTask) -> String {
    format!("task.{}", t.name())
}

fn seg(n: usize) -> usize {
    if n > 0 {
        n + 1
    } else {
        0
    }
}

/// Architecture of a planner; parameters live in a separate store.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannerSpec {
    pub lm: TransformerLm,
    pub obs: ObsMode,
    pub backbone: Option<VisualBackbone>,
    pub projector: Option<PromptProjector>,
    pub bank: SoftPromptBank,
    pub max_context: usize,
}

/// Ids or rows standing in for one observation at decoding time.
#[derive(Clone, Copy, Debug)]
pub enum ObsInput<'a, T: Scalar> {
    /// Backbone features `(1, F)`.
    Features(&'a Tensor<T>),
    Text(&'a [u32]),
    None,
}

/// Sums, over the listed targets, `-log p(target)` where each target is
/// teacher-forced right after the builder contents so far.
struct Targets {
    rows: Vec<Option<usize>>,
}

impl Targets {
    fn new() -> Self {
        Targets { rows: Vec::new() }
    }

    /// Pushes `tokens EOS` as the target continuing `b`.
    fn push(&mut self, b: &mut SequenceBuilder, tag: SegmentTag, tokens: &[u32]) {
        let start = b.len();
        b.segment(tag, Piece::Tokens(tokens.to_vec()), EOS);
        self.rows.resize(b.len(), None);
        for (j, &t) in tokens.iter().chain([&EOS]).enumerate() {
            self.rows[start - 1 + j] = Some(t as usize);
        }
    }

    fn fill(&mut self, len: usize) {
        self.rows.resize(len, None);
    }
}

impl PlannerSpec {
    pub fn aux_enabled(&self) -> bool {
        self.bank.block_len(ACTION_TASK).is_some()
    }

    /// Fresh planner parameters: the LM is copied from `lm_store`, the
    /// backbone (frozen) from `vision_store`, and projector and task
    /// embeddings are initialised.
    #[allow(clippy::too_many_arguments)]
    pub fn instantiate<T: Scalar>(
        lm: &TransformerLm,
        lm_store: &ParamStore<T>,
        obs: ObsMode,
        vision: Option<(&VisualBackbone, &ParamStore<T>)>,
        prompt_size: usize,
        aux: &AuxConfig,
        max_context: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(PlannerSpec, ParamStore<T>)> {
        let mut store = ParamStore::new();
        if store.copy_prefix_from(lm_store, LM_PREFIX) == 0 {
            return Err(PlannerError::Config(
                "language-model store has no `lm.` parameters".into(),
            ));
        }
        let (mut backbone, mut projector) = (None, None);
        if obs == ObsMode::Visual {
            let (bb, vs) = vision
                .ok_or_else(|| PlannerError::Config("visual planner needs a backbone".into()))?;
            store.copy_prefix_from(vs, BACKBONE_PREFIX);
            bb.set_frozen(&mut store, true);
            backbone = Some(bb.clone());
            // With zero prompts observations contribute no rows at all.
            if prompt_size > 0 {
                let pj = PromptProjector::new(bb.feature_dim(), prompt_size, lm.embed_dim());
                pj.init(&mut store, rng);
                projector = Some(pj);
            }
        }
        let mut bank = SoftPromptBank::new(lm.embed_dim());
        if aux.enabled() {
            bank.add_block(&mut store, ACTION_TASK, aux.task_embedding_len, rng);
            for &t in &aux.tasks {
                bank.add_block(&mut store, &task_block(t), aux.task_embedding_len, rng);
            }
        }
        Ok((
            PlannerSpec {
                lm: lm.clone(),
                obs,
                backbone,
                projector,
                bank,
                max_context,
            },
            store,
        ))
    }

    fn task_piece<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        name: &str,
    ) -> Result<Option<Piece>> {
        match self.bank.block_len(name) {
            Some(rows) => Ok(Some(Piece::Embeds {
                var: self.bank.block(g, store, name)?,
                rows,
            })),
            None => Ok(None),
        }
    }

    fn obs_pieces<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ds: &Dataset<T>,
        demo: &EncodedDemo,
    ) -> Result<Vec<Piece>> {
        match self.obs {
            ObsMode::None => Ok(vec![Piece::empty(); demo.steps.len()]),
            ObsMode::Text => Ok(demo
                .steps
                .iter()
                .map(|s| Piece::Tokens(ds.observation_text(s)))
                .collect()),
            ObsMode::Visual => {
                let Some(pj) = self.projector.as_ref() else {
                    return Ok(vec![Piece::empty(); demo.steps.len()]);
                };
                let rows: Vec<usize> = demo.steps.iter().map(|s| s.obs).collect();
                let f = g.constant(ds.feature_rows(&rows)?);
                let blocks = pj.prompt_blocks(g, store, f)?;
                Ok(blocks
                    .into_iter()
                    .map(|var| Piece::Embeds {
                        var,
                        rows: pj.prompts,
                    })
                    .collect())
            }
        }
    }

    /// Oldest-pair drop count for every step so that `cxt_t` fits the budget.
    pub fn drop_counts(
        &self,
        base: usize,
        obs_lens: &[usize],
        act_lens: &[usize],
    ) -> std::result::Result<Vec<usize>, (usize, usize)> {
        let pair = |i: usize| seg(obs_lens[i]) + seg(act_lens[i]);
        let mut out = Vec::with_capacity(obs_lens.len());
        let mut d = 0;
        for (t, &obs) in obs_lens.iter().enumerate() {
            let mut len = base + (d..t).map(pair).sum::<usize>() + seg(obs);
            while len > self.max_context && d < t {
                len -= pair(d);
                d += 1;
            }
            if len > self.max_context {
                return Err((t, len));
            }
            out.push(d);
        }
        Ok(out)
    }

    fn run_targets<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        b: &SequenceBuilder,
        mut targets: Targets,
    ) -> Result<Var> {
        targets.fill(b.len());
        let x = b.build(&self.lm, g, store)?;
        let logits = self.lm.forward(g, store, x, None)?;
        Ok(g.cross_entropy(logits, &targets.rows, Reduction::Sum)?)
    }

    /// `Σ_t -log p(a_t | cxt_t)` over one demo and the number of actions.
    ///
    /// Steps sharing a trim offset share one causal sequence, so an
    /// untrimmed episode costs a single forward pass.
    pub fn action_loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ds: &Dataset<T>,
        di: usize,
    ) -> Result<(Var, usize)> {
        let demo = &ds.demos[di];
        let n = demo.steps.len();
        let obs = self.obs_pieces(g, store, ds, demo)?;
        let task = self.task_piece(g, store, ACTION_TASK)?;
        let base = seg(task.as_ref().map_or(0, Piece::len)) + seg(demo.goal.len());
        let obs_lens: Vec<usize> = obs.iter().map(Piece::len).collect();
        let act_lens: Vec<usize> = demo.steps.iter().map(|s| s.action.len()).collect();
        let drops = self
            .drop_counts(base, &obs_lens, &act_lens)
            .map_err(|(step, needed)| PlannerError::Context {
                demo: di,
                step,
                source: CoreError::Budget {
                    needed,
                    budget: self.max_context,
                },
            })?;
        let mut losses = Vec::new();
        let mut t0 = 0;
        while t0 < n {
            let d = drops[t0];
            let t1 = (t0..n)
                .take_while(|&t| drops[t] == d)
                .last()
                .expect("non-empty group");
            let mut b = SequenceBuilder::new();
            if let Some(tp) = &task {
                b.segment(SegmentTag::Task, tp.clone(), SEP);
            }
            b.segment(SegmentTag::Goal, Piece::Tokens(demo.goal.clone()), SEP);
            let mut targets = Targets::new();
            for (i, (o, step)) in obs.iter().zip(&demo.steps).enumerate().take(t1 + 1).skip(d) {
                b.segment(SegmentTag::Observation(i + 1), o.clone(), SEP);
                if i >= t0 {
                    targets.push(&mut b, SegmentTag::Action(i + 1), &step.action);
                } else {
                    b.segment(
                        SegmentTag::Action(i + 1),
                        Piece::Tokens(step.action.clone()),
                        EOS,
                    );
                }
            }
            losses.push(
                self.run_targets(g, store, &b, targets)
                    .map_err(|e| match e {
                        PlannerError::Core(source) => PlannerError::Context {
                            demo: di,
                            step: t0,
                            source,
                        },
                        e => e,
                    })?,
            );
            t0 = t1 + 1;
        }
        Ok((g.add_all(&losses)?, n))
    }

    /// Inverse dynamics: `-log p(a_t | task, o_t, o_{t+1})` summed over `steps`.
    pub fn inv_dyn_loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ds: &Dataset<T>,
        di: usize,
        steps: &[usize],
    ) -> Result<Var> {
        let demo = &ds.demos[di];
        let obs = self.obs_pieces(g, store, ds, demo)?;
        let task = self.task_piece(g, store, &task_block(AuxTask::InvDyn))?;
        let mut losses = Vec::with_capacity(steps.len());
        for &t in steps {
            let mut b = SequenceBuilder::new();
            if let Some(tp) = &task {
                b.segment(SegmentTag::Task, tp.clone(), SEP);
            }
            b.segment(SegmentTag::Observation(t + 1), obs[t].clone(), SEP);
            b.segment(SegmentTag::Observation(t + 2), obs[t + 1].clone(), SEP);
            let mut targets = Targets::new();
            targets.push(&mut b, SegmentTag::Target, &demo.steps[t].action);
            losses.push(self.run_targets(g, store, &b, targets)?);
        }
        Ok(g.add_all(&losses)?)
    }

    /// Caption prediction: `-log p(caption_t | task, o_t)` summed over `steps`.
    pub fn caption_aux_loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ds: &Dataset<T>,
        di: usize,
        steps: &[usize],
    ) -> Result<Var> {
        let demo = &ds.demos[di];
        let obs = self.obs_pieces(g, store, ds, demo)?;
        let task = self.task_piece(g, store, &task_block(AuxTask::Captions))?;
        let mut losses = Vec::with_capacity(steps.len());
        for &t in steps {
            let mut b = SequenceBuilder::new();
            if let Some(tp) = &task {
                b.segment(SegmentTag::Task, tp.clone(), SEP);
            }
            b.segment(SegmentTag::Observation(t + 1), obs[t].clone(), SEP);
            let mut targets = Targets::new();
            targets.push(&mut b, SegmentTag::Target, &demo.steps[t].caption);
            losses.push(self.run_targets(g, store, &b, targets)?);
        }
        Ok(g.add_all(&losses)?)
    }

    /// Goal prediction: `-log p(g | task, o_1, a_1, …, o_T, a_T)`, dropping
    /// the oldest pairs if the episode exceeds the context budget.
    pub fn goal_pred_loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ds: &Dataset<T>,
        di: usize,
    ) -> Result<Var> {
        let demo = &ds.demos[di];
        let obs = self.obs_pieces(g, store, ds, demo)?;
        let task = self.task_piece(g, store, &task_block(AuxTask::GoalPred))?;
        let pair = |i: usize| seg(obs[i].len()) + seg(demo.steps[i].action.len());
        let mut len = seg(task.as_ref().map_or(0, Piece::len))
            + (0..demo.steps.len()).map(pair).sum::<usize>();
        let mut first = 0;
        while len > self.max_context && first < demo.steps.len() {
            len -= pair(first);
            first += 1;
        }
        let mut b = SequenceBuilder::new();
        if let Some(tp) = &task {
            b.segment(SegmentTag::Task, tp.clone(), SEP);
        }
        for (i, (o, step)) in obs.iter().zip(&demo.steps).enumerate().skip(first) {
            b.segment(SegmentTag::Observation(i + 1), o.clone(), SEP);
            b.segment(
                SegmentTag::Action(i + 1),
                Piece::Tokens(step.action.clone()),
                EOS,
            );
        }
        let mut targets = Targets::new();
        if b.is_empty() {
            return Err(PlannerError::Data(format!("demo {di} is empty")));
        }
        targets.push(&mut b, SegmentTag::Target, &demo.goal);
        self.run_targets(g, store, &b, targets)
    }

    /// `L_D + α Σ_k L_k` over a batch of demos, each term a per-example mean.
    pub fn batch_loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ds: &Dataset<T>,
        batch: &[usize],
        aux: &AuxConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let mut main = Vec::with_capacity(batch.len());
        let mut actions = 0;
        for &di in batch {
            let (l, n) = self.action_loss(g, store, ds, di)?;
            main.push(l);
            actions += n;
        }
        let sum = g.add_all(&main)?;
        let mut total = g.scale(sum, 1.0 / actions.max(1) as f64)?;
        for &task in &aux.tasks {
            let mut parts = Vec::new();
            let mut count = 0usize;
            let mut skipped = 0usize;
            for &di in batch {
                let n = ds.demos[di].steps.len();
                match task {
                    AuxTask::GoalPred => {
                        parts.push(self.goal_pred_loss(g, store, ds, di)?);
                        count += 1;
                    }
                    AuxTask::InvDyn | AuxTask::Captions => {
                        let eligible = if task == AuxTask::InvDyn {
                            n.saturating_sub(1)
                        } else {
                            n
                        };
                        if eligible == 0 {
                            skipped += 1;
                            continue;
                        }
                        let k = aux.steps_per_demo.min(eligible);
                        let mut steps = sample(rng, eligible, k).into_vec();
                        steps.sort_unstable();
                        parts.push(if task == AuxTask::InvDyn {
                            self.inv_dyn_loss(g, store, ds, di, &steps)?
                        } else {
                            self.caption_aux_loss(g, store, ds, di, &steps)?
                        });
                        count += k;
                    }
                }
            }
            if skipped > 0 {
                log::debug!("{task}: skipped {skipped} demos without an observation pair");
            }
            if count > 0 {
                let s = g.add_all(&parts)?;
                let mean = g.scale(s, aux.alpha / count as f64)?;
                total = g.add(total, mean)?;
            }
        }
        Ok(total)
    }

    /// Prompt rows `(m, E)` for one feature row.
    pub fn project_features<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let pj = self
            .projector
            .as_ref()
            .ok_or_else(|| PlannerError::Config("planner has no projector".into()))?;
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let block = pj.prompt_blocks(&mut g, store, f)?.remove(0);
        Ok(g.value(block).clone())
    }

    /// Starts incremental decoding of one episode.
    pub fn session<'a, T: Scalar>(
        &'a self,
        store: &'a ParamStore<T>,
        goal: &[u32],
    ) -> Result<Session<'a, T>> {
        let mut parts = Vec::new();
        if let Some(len) = self.bank.block_len(ACTION_TASK) {
            let t = store
                .get(&SoftPromptBank::param_name(ACTION_TASK))
                .ok_or_else(|| CoreError::UnknownParam(ACTION_TASK.into()))?;
            debug_assert_eq!(t.dims2().0, len);
            parts.push(t.clone());
            parts.push(self.lm.token_rows(store, &[SEP])?);
        }
        if !goal.is_empty() {
            parts.push(self.lm.token_rows(store, goal)?);
            parts.push(self.lm.token_rows(store, &[SEP])?);
        }
        let prefix = if parts.is_empty() {
            None
        } else {
            Some(vcat(&parts, self.lm.embed_dim())?)
        };
        let mut s = Session {
            spec: self,
            store,
            prefix,
            history: Vec::new(),
            dropped: 0,
            cache: self.lm.new_cache(),
            last: Vec::new(),
            pending: None,
        };
        s.rebuild(0)?;
        Ok(s)
    }
}

/// Stacks row blocks `(n_i, E)` into one `(Σ n_i, E)` tensor.
pub fn vcat<T: Scalar>(parts: &[Tensor<T>], width: usize) -> Result<Tensor<T>> {
    let rows: usize = parts.iter().map(|p| p.dims2().0).sum();
    let mut data = Vec::with_capacity(rows * width);
    for p in parts {
        if p.dims2().1 != width {
            return Err(CoreError::Shape {
                op: "vcat",
                lhs: p.shape().to_vec(),
                rhs: vec![0, width],
            }
            .into());
        }
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::new(&[rows, width], data)?)
}

/// Incremental context for one rollout. Observations and actions are
/// appended to a key/value cache; when the next context would exceed the
/// budget the oldest pairs are dropped and the cache is rebuilt, exactly
/// as during training.
pub struct Session<'a, T: Scalar> {
    spec: &'a PlannerSpec,
    store: &'a ParamStore<T>,
    prefix: Option<Tensor<T>>,
    /// Observation rows (separator included) and action ids per past step.
    history: Vec<Step<T>>,
    dropped: usize,
    cache: KvCache<T>,
    last: Vec<f64>,
    pending: Option<Option<Tensor<T>>>,
}

impl<T: Scalar> Session<'_, T> {
    pub fn context_len(&self) -> usize {
        self.cache.len()
    }

    /// Number of oldest steps currently trimmed from the context.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    fn prefix_len(&self) -> usize {
        self.prefix.as_ref().map_or(0, |p| p.dims2().0)
    }

    fn rebuild(&mut self, keep_from: usize) -> Result<()> {
        let lm = &self.spec.lm;
        self.cache = lm.new_cache();
        self.dropped = keep_from;
        let mut last = Vec::new();
        if let Some(p) = &self.prefix {
            last = lm
                .extend_cache(self.store, &mut self.cache, p)?
                .pop()
                .expect("non-empty prefix");
        }
        for (obs, act) in &self.history[keep_from..] {
            if let Some(o) = obs {
                lm.extend_cache(self.store, &mut self.cache, o)?;
            }
            let mut ids = act.clone();
            ids.push(EOS);
            last = lm
                .extend_cache_tokens(self.store, &mut self.cache, &ids)?
                .pop()
                .expect("non-empty action");
        }
        self.last = last;
        Ok(())
    }

    fn obs_rows(&self, obs: ObsInput<'_, T>) -> Result<Option<Tensor<T>>> {
        let lm = &self.spec.lm;
        let e = lm.embed_dim();
        let rows = match obs {
            ObsInput::None | ObsInput::Text([]) => return Ok(None),
            ObsInput::Features(_) if self.spec.projector.is_none() => return Ok(None),
            ObsInput::Text(ids) => lm.token_rows(self.store, ids)?,
            ObsInput::Features(f) => self.spec.project_features(self.store, f)?,
        };
        Ok(Some(vcat(&[rows, lm.token_rows(self.store, &[SEP])?], e)?))
    }

    /// Appends the current observation, trimming old steps if needed.
    pub fn observe(&mut self, obs: ObsInput<'_, T>) -> Result<()> {
        if self.pending.is_some() {
            return Err(PlannerError::Data(
                "observation already pending; commit an action first".into(),
            ));
        }
        let rows = self.obs_rows(obs)?;
        let n = rows.as_ref().map_or(0, |r| r.dims2().0);
        if self.cache.len() + n > self.spec.max_context {
            let mut len = self.prefix_len() + self.history.iter().map(pair_len).sum::<usize>() + n;
            let mut keep = 0;
            while len > self.spec.max_context && keep < self.history.len() {
                len -= pair_len(&self.history[keep]);
                keep += 1;
            }
            if len > self.spec.max_context {
                return Err(CoreError::Budget {
                    needed: len,
                    budget: self.spec.max_context,
                }
                .into());
            }
            self.rebuild(keep)?;
        }
        if let Some(r) = &rows {
            self.last = self
                .spec
                .lm
                .extend_cache(self.store, &mut self.cache, r)?
                .pop()
                .expect("non-empty observation");
        }
        self.pending = Some(rows);
        Ok(())
    }

    /// Next-token log-probabilities after the current context.
    pub fn next_logprobs(&self) -> &[f64] {
        &self.last
    }

    /// `log p(action EOS | context)`.
    pub fn score(&self, action: &[u32]) -> Result<f64> {
        let mut target = action.to_vec();
        target.push(EOS);
        Ok(self
            .spec
            .lm
            .cached_sequence_logprob(self.store, &self.cache, &self.last, &target)?)
    }

    /// Beam candidates (EOS stripped) with their log-probabilities.
    pub fn beam(&self, k: usize) -> Result<Vec<(Vec<u32>, f64)>> {
        Ok(self
            .spec
            .lm
            .cached_beam(self.store, &self.cache, &self.last, k, MAX_ACTION_TOKENS)?)
    }

    /// Greedy action for the current context; the action is committed.
    pub fn decode_greedy(&mut self) -> Result<Vec<u32>> {
        let mut c = self.cache.clone();
        let ids = self
            .spec
            .lm
            .cached_greedy(self.store, &mut c, &self.last, MAX_ACTION_TOKENS)?;
        self.commit(&ids)?;
        Ok(ids)
    }

    /// Appends `action EOS` to the context.
    pub fn commit(&mut self, action: &[u32]) -> Result<()> {
        let obs = self.pending.take().flatten();
        let mut ids = action.to_vec();
        ids.push(EOS);
        self.last = self
            .spec
            .lm
            .extend_cache_tokens(self.store, &mut self.cache, &ids)?
            .pop()
            .expect("EOS row");
        self.history.push((obs, action.to_vec()));
        Ok(())
    }
}

type Step<T> = (Option<Tensor<T>>, Vec<u32>);

fn pair_len<T: Scalar>(h: &Step<T>) -> usize {
    h.0.as_ref().map_or(0, |o| o.dims2().0) + h.1.len() + 1
}
