//! Policies as rollout agents, and the on-disk policy bundle.

use std::path::Path;
use std::str::FromStr;

use minialf::{Action, TaskSpec};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vp2_core::lm::{LmConfig, SoftPromptBank, TransformerLm};
use vp2_core::vision::{BackboneMode, Observation, PromptProjector, VisualBackbone};
use vp2_core::vocab::Vocab;
use vp2_core::{ParamStore, Scalar};

use crate::captioner::CaptionModel;
use crate::config::{Decoding, TrainConfig};
use crate::data::encode_strict;
use crate::error::{PlannerError, Result};
use crate::model::{ObsInput, ObsMode, PlannerSpec, Session};
use crate::saycan::{saycan_select, AffordanceModel, Candidate};

/// Default beam width for trained-affordance SayCan.
pub const SAYCAN_BEAM: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Vp2,
    Ignore,
    Captions,
    SaycanOracle,
    SaycanTrained,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Vp2,
        PolicyKind::Ignore,
        PolicyKind::Captions,
        PolicyKind::SaycanOracle,
        PolicyKind::SaycanTrained,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Vp2 => "vp2",
            PolicyKind::Ignore => "ignore",
            PolicyKind::Captions => "captions",
            PolicyKind::SaycanOracle => "saycan-oracle",
            PolicyKind::SaycanTrained => "saycan-trained",
        }
    }

    pub fn is_saycan(self) -> bool {
        matches!(self, PolicyKind::SaycanOracle | PolicyKind::SaycanTrained)
    }
}

impl FromStr for PolicyKind {
    type Err = PlannerError;
    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| PlannerError::Config(format!("unknown planner `{s}`")))
    }
}

/// What an agent sees at one step.
#[derive(Clone, Copy, Debug)]
pub struct StepView<'a> {
    pub observation: &'a Observation,
    /// Ground-truth caption, used only by oracle-caption evaluation.
    pub caption: &'a str,
    /// The simulator's executable set, used only by oracle-affordance SayCan.
    pub affordable: &'a [Action],
}

/// A policy during one rollout.
pub trait Agent {
    fn reset(&mut self, task: &TaskSpec) -> Result<()>;
    /// Next action text; it may fail to parse.
    fn act(&mut self, view: &StepView<'_>) -> Result<String>;
}

/// Where the planner's observation blocks come from at rollout time.
pub enum ObsSource<'a, T: Scalar> {
    None,
    Visual,
    OracleCaptions,
    PredictedCaptions(&'a CaptionModel, &'a ParamStore<T>),
}

/// Greedy decoding from a VP², Ignore or Captions planner.
pub struct LmAgent<'a, T: Scalar> {
    spec: &'a PlannerSpec,
    store: &'a ParamStore<T>,
    vocab: &'a Vocab,
    source: ObsSource<'a, T>,
    session: Option<Session<'a, T>>,
}

impl<'a, T: Scalar> LmAgent<'a, T> {
    pub fn new(
        spec: &'a PlannerSpec,
        store: &'a ParamStore<T>,
        vocab: &'a Vocab,
        source: ObsSource<'a, T>,
    ) -> Self {
        LmAgent {
            spec,
            store,
            vocab,
            source,
            session: None,
        }
    }
}

fn session_mut<'s, 'a, T: Scalar>(
    s: &'s mut Option<Session<'a, T>>,
) -> Result<&'s mut Session<'a, T>> {
    s.as_mut()
        .ok_or_else(|| PlannerError::Data("agent used before reset".into()))
}

impl<T: Scalar> Agent for LmAgent<'_, T> {
    fn reset(&mut self, task: &TaskSpec) -> Result<()> {
        let goal = encode_strict(self.vocab, &task.goal)?;
        self.session = Some(self.spec.session(self.store, &goal)?);
        Ok(())
    }

    fn act(&mut self, view: &StepView<'_>) -> Result<String> {
        let session = session_mut(&mut self.session)?;
        match &self.source {
            ObsSource::None => session.observe(ObsInput::None)?,
            ObsSource::Visual => {
                let bb = self.spec.backbone.as_ref().ok_or_else(|| {
                    PlannerError::Config("visual planner without backbone".into())
                })?;
                let f = bb.feature_tensor(self.store, view.observation)?;
                session.observe(ObsInput::Features(&f))?;
            }
            ObsSource::OracleCaptions => {
                let ids = encode_strict(self.vocab, view.caption)?;
                session.observe(ObsInput::Text(&ids))?;
            }
            ObsSource::PredictedCaptions(model, store) => {
                let ids = model.predict_observation(store, view.observation)?;
                session.observe(ObsInput::Text(&ids))?;
            }
        }
        let ids = session.decode_greedy()?;
        Ok(self.vocab.decode(&ids)?)
    }
}

pub enum AffordanceMode<'a, T: Scalar> {
    /// Scores exactly the simulator's executable set with `p_aff = 1`.
    Oracle,
    /// Rescores `beam` LM candidates with the classifier's `p(valid)`.
    Trained {
        model: &'a AffordanceModel,
        store: &'a ParamStore<T>,
        beam: usize,
    },
}

/// SayCan over a text-only action model.
pub struct SayCanAgent<'a, T: Scalar> {
    spec: &'a PlannerSpec,
    store: &'a ParamStore<T>,
    vocab: &'a Vocab,
    mode: AffordanceMode<'a, T>,
    session: Option<Session<'a, T>>,
}

impl<'a, T: Scalar> SayCanAgent<'a, T> {
    pub fn new(
        spec: &'a PlannerSpec,
        store: &'a ParamStore<T>,
        vocab: &'a Vocab,
        mode: AffordanceMode<'a, T>,
    ) -> Result<Self> {
        if spec.obs != ObsMode::None {
            return Err(PlannerError::Config(
                "SayCan needs a text-only action model".into(),
            ));
        }
        Ok(SayCanAgent {
            spec,
            store,
            vocab,
            mode,
            session: None,
        })
    }

    /// Scored candidates for the current step (the context must already
    /// hold this step's observation slot).
    fn candidates(
        &self,
        session: &Session<'_, T>,
        view: &StepView<'_>,
    ) -> Result<Vec<(Candidate, Vec<u32>)>> {
        let mut out = Vec::new();
        match &self.mode {
            AffordanceMode::Oracle => {
                for a in view.affordable {
                    let text = a.to_string();
                    let ids = encode_strict(self.vocab, &text)?;
                    let p_lm = session.score(&ids)?.exp();
                    out.push((
                        Candidate {
                            text,
                            p_lm,
                            p_aff: 1.0,
                        },
                        ids,
                    ));
                }
            }
            AffordanceMode::Trained { model, store, beam } => {
                let beams = session.beam(*beam)?;
                let ids: Vec<Vec<u32>> = beams.iter().map(|b| b.0.clone()).collect();
                let p_aff = model.p_valid_observation(store, view.observation, &ids)?;
                for ((ids, lp), pa) in beams.into_iter().zip(p_aff) {
                    let text = self.vocab.decode(&ids)?;
                    out.push((
                        Candidate {
                            text,
                            p_lm: lp.exp(),
                            p_aff: pa,
                        },
                        ids,
                    ));
                }
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Agent for SayCanAgent<'_, T> {
    fn reset(&mut self, task: &TaskSpec) -> Result<()> {
        let goal = encode_strict(self.vocab, &task.goal)?;
        self.session = Some(self.spec.session(self.store, &goal)?);
        Ok(())
    }

    fn act(&mut self, view: &StepView<'_>) -> Result<String> {
        let mut session = self
            .session
            .take()
            .ok_or_else(|| PlannerError::Data("agent used before reset".into()))?;
        let result = (|| {
            session.observe(ObsInput::None)?;
            let cands = self.candidates(&session, view)?;
            let plain: Vec<Candidate> = cands.iter().map(|c| c.0.clone()).collect();
            let choice = saycan_select(&plain);
            let ids = match cands.iter().find(|c| c.0.text == choice) {
                Some(c) => c.1.clone(),
                None => encode_strict(self.vocab, &choice)?,
            };
            session.commit(&ids)?;
            Ok(choice)
        })();
        self.session = Some(session);
        result
    }
}

/// Replays the scripted expert's plan.
#[derive(Default)]
pub struct OracleAgent {
    plan: Vec<Action>,
    next: usize,
    cap: usize,
}

impl OracleAgent {
    pub fn new(step_cap: usize) -> Self {
        OracleAgent {
            plan: Vec::new(),
            next: 0,
            cap: step_cap,
        }
    }
}

impl Agent for OracleAgent {
    fn reset(&mut self, task: &TaskSpec) -> Result<()> {
        self.plan = minialf::solve(task, self.cap)?;
        self.next = 0;
        Ok(())
    }

    fn act(&mut self, _: &StepView<'_>) -> Result<String> {
        let a = self.plan.get(self.next).copied().unwrap_or(Action::Done);
        self.next += 1;
        Ok(a.to_string())
    }
}

/// Uniformly random grammar actions from a seeded generator.
pub struct RandomAgent {
    rng: ChaCha8Rng,
    grammar: Vec<Action>,
}

impl RandomAgent {
    pub fn new(seed: u64) -> Self {
        RandomAgent {
            rng: ChaCha8Rng::seed_from_u64(seed),
            grammar: Action::grammar(),
        }
    }
}

impl Agent for RandomAgent {
    fn reset(&mut self, _: &TaskSpec) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, _: &StepView<'_>) -> Result<String> {
        Ok(self
            .grammar
            .choose(&mut self.rng)
            .expect("non-empty grammar")
            .to_string())
    }
}

/// A trained policy with every model it needs at rollout time.
#[derive(Clone, Debug)]
pub struct PolicyBundle<T: Scalar> {
    pub kind: PolicyKind,
    pub vocab: Vocab,
    /// The planner, or SayCan's text-only action model.
    pub planner: PlannerSpec,
    pub planner_store: ParamStore<T>,
    pub captioner: Option<(CaptionModel, ParamStore<T>)>,
    pub affordance: Option<(AffordanceModel, ParamStore<T>)>,
    pub decoding: Decoding,
    /// Captions policies read ground-truth captions instead of predictions.
    pub oracle_captions: bool,
    pub train_config: TrainConfig,
}

impl<T: Scalar + Sync> PolicyBundle<T> {
    pub fn agent(&self) -> Result<Box<dyn Agent + '_>> {
        let (spec, store, vocab) = (&self.planner, &self.planner_store, &self.vocab);
        Ok(match self.kind {
            PolicyKind::Vp2 | PolicyKind::Ignore => {
                let src = if spec.obs == ObsMode::Visual {
                    ObsSource::Visual
                } else {
                    ObsSource::None
                };
                Box::new(LmAgent::new(spec, store, vocab, src))
            }
            PolicyKind::Captions => {
                let src = match (&self.captioner, self.oracle_captions) {
                    (_, true) => ObsSource::OracleCaptions,
                    (Some((m, s)), false) => ObsSource::PredictedCaptions(m, s),
                    (None, false) => {
                        return Err(PlannerError::Config(
                            "captions policy has no caption model".into(),
                        ))
                    }
                };
                Box::new(LmAgent::new(spec, store, vocab, src))
            }
            PolicyKind::SaycanOracle => Box::new(SayCanAgent::new(
                spec,
                store,
                vocab,
                AffordanceMode::Oracle,
            )?),
            PolicyKind::SaycanTrained => {
                let (model, st) = self.affordance.as_ref().ok_or_else(|| {
                    PlannerError::Config("trained SayCan needs an affordance model".into())
                })?;
                let beam = match self.decoding {
                    Decoding::TopK(k) => k,
                    Decoding::Greedy => SAYCAN_BEAM,
                };
                Box::new(SayCanAgent::new(
                    spec,
                    store,
                    vocab,
                    AffordanceMode::Trained {
                        model,
                        store: st,
                        beam,
                    },
                )?)
            }
        })
    }

    /// Same models under another kind (e.g. oracle vs trained SayCan).
    pub fn with_kind(&self, kind: PolicyKind) -> Self {
        PolicyBundle {
            kind,
            ..self.clone()
        }
    }

    fn merged_store(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        let mut add = |role: &str, s: &ParamStore<T>| {
            for (n, t) in s.iter() {
                out.insert(format!("{role}/{n}"), t.clone());
            }
        };
        add("planner", &self.planner_store);
        if let Some((_, s)) = &self.captioner {
            add("captioner", s);
        }
        if let Some((_, s)) = &self.affordance {
            add("affordance", s);
        }
        out
    }

    pub fn params_hash(&self) -> String {
        hex::encode(Sha256::digest(self.merged_store().fingerprint_bytes()))
    }

    pub fn manifest(&self) -> PolicyManifest {
        PolicyManifest {
            kind: self.kind,
            decoding: self.decoding,
            oracle_captions: self.oracle_captions,
            vocab_sha256: hex::encode(Sha256::digest(self.vocab.to_text().as_bytes())),
            params_sha256: self.params_hash(),
            train_config: self.train_config.clone(),
            planner: PlannerManifest::of(&self.planner),
            captioner: self.captioner.as_ref().map(|(m, _)| HeadManifest {
                lm: m.lm.config.to_text(),
                backbone: BackboneManifest::of(&m.backbone),
                prompt_size: m.projector.prompts,
                prompt: m.prefix.clone(),
                labels: None,
            }),
            affordance: self.affordance.as_ref().map(|(m, _)| HeadManifest {
                lm: m.lm.config.to_text(),
                backbone: BackboneManifest::of(&m.backbone),
                prompt_size: m.projector.prompts,
                prompt: m.prompt.clone(),
                labels: Some((m.valid, m.invalid)),
            }),
        }
    }

    /// Short content hash identifying this policy in reports.
    pub fn manifest_hash(&self) -> Result<String> {
        let text = serde_json::to_string(&self.manifest())?;
        Ok(hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string())
    }

    /// Writes `manifest.json`, `vocab.txt` and `params.ckpt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest())?,
        )?;
        self.vocab.save(dir.join("vocab.txt"))?;
        self.merged_store().save(dir.join("params.ckpt"))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: PolicyManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let vocab = Vocab::load(dir.join("vocab.txt"))?;
        if hex::encode(Sha256::digest(vocab.to_text().as_bytes())) != manifest.vocab_sha256 {
            return Err(PlannerError::Data(
                "vocabulary does not match the policy manifest".into(),
            ));
        }
        let merged: ParamStore<T> = ParamStore::load(dir.join("params.ckpt"))?;
        let split = |role: &str| {
            let mut s = ParamStore::new();
            let pre = format!("{role}/");
            for (n, t) in merged.iter().filter(|(n, _)| n.starts_with(&pre)) {
                s.insert(&n[pre.len()..], t.clone());
            }
            s
        };
        let planner = manifest.planner.build()?;
        let captioner = match &manifest.captioner {
            Some(h) => {
                let (lm, backbone, projector) = h.parts()?;
                Some((
                    CaptionModel {
                        lm,
                        backbone,
                        projector,
                        prefix: h.prompt.clone(),
                    },
                    split("captioner"),
                ))
            }
            None => None,
        };
        let affordance = match &manifest.affordance {
            Some(h) => {
                let (lm, backbone, projector) = h.parts()?;
                let (valid, invalid) = h
                    .labels
                    .ok_or_else(|| PlannerError::Data("affordance manifest lacks labels".into()))?;
                Some((
                    AffordanceModel {
                        lm,
                        backbone,
                        projector,
                        prompt: h.prompt.clone(),
                        valid,
                        invalid,
                    },
                    split("affordance"),
                ))
            }
            None => None,
        };
        Ok(PolicyBundle {
            kind: manifest.kind,
            vocab,
            planner,
            planner_store: split("planner"),
            captioner,
            affordance,
            decoding: manifest.decoding,
            oracle_captions: manifest.oracle_captions,
            train_config: manifest.train_config,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneManifest {
    pub mode: String,
    pub channels: [usize; 3],
}

impl BackboneManifest {
    pub fn of(b: &VisualBackbone) -> Self {
        BackboneManifest {
            mode: b.mode.as_str().to_string(),
            channels: b.channels,
        }
    }

    pub fn build(&self) -> Result<VisualBackbone> {
        let mode = BackboneMode::parse(&self.mode)
            .ok_or_else(|| PlannerError::Data(format!("unknown backbone mode `{}`", self.mode)))?;
        Ok(VisualBackbone {
            mode,
            channels: self.channels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerManifest {
    pub lm: String,
    pub obs: ObsMode,
    pub backbone: Option<BackboneManifest>,
    pub prompt_size: usize,
    pub task_blocks: Vec<(String, usize)>,
    pub max_context: usize,
}

impl PlannerManifest {
    fn of(p: &PlannerSpec) -> Self {
        PlannerManifest {
            lm: p.lm.config.to_text(),
            obs: p.obs,
            backbone: p.backbone.as_ref().map(BackboneManifest::of),
            prompt_size: p.projector.as_ref().map_or(0, |x| x.prompts),
            task_blocks: p
                .bank
                .names()
                .map(|n| (n.to_string(), p.bank.block_len(n).expect("listed block")))
                .collect(),
            max_context: p.max_context,
        }
    }

    fn build(&self) -> Result<PlannerSpec> {
        let lm = TransformerLm::new(LmConfig::from_text(&self.lm)?)?;
        let backbone = self
            .backbone
            .as_ref()
            .map(BackboneManifest::build)
            .transpose()?;
        let projector = match (&backbone, self.obs) {
            (Some(b), ObsMode::Visual) => Some(PromptProjector::new(
                b.feature_dim(),
                self.prompt_size,
                lm.embed_dim(),
            )),
            (None, ObsMode::Visual) => {
                return Err(PlannerError::Data(
                    "visual planner manifest lacks a backbone".into(),
                ))
            }
            _ => None,
        };
        let mut bank = SoftPromptBank::new(lm.embed_dim());
        for (n, len) in &self.task_blocks {
            bank.register_block(n, *len);
        }
        Ok(PlannerSpec {
            lm,
            obs: self.obs,
            backbone,
            projector,
            bank,
            max_context: self.max_context,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadManifest {
    pub lm: String,
    pub backbone: BackboneManifest,
    pub prompt_size: usize,
    pub prompt: Vec<u32>,
    pub labels: Option<(u32, u32)>,
}

impl HeadManifest {
    fn parts(&self) -> Result<(TransformerLm, VisualBackbone, PromptProjector)> {
        let lm = TransformerLm::new(LmConfig::from_text(&self.lm)?)?;
        let backbone = self.backbone.build()?;
        let projector =
            PromptProjector::new(backbone.feature_dim(), self.prompt_size, lm.embed_dim());
        Ok((lm, backbone, projector))
    }
}

/// Everything needed to rebuild a policy besides its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyManifest {
    pub kind: PolicyKind,
    pub decoding: Decoding,
    pub oracle_captions: bool,
    pub vocab_sha256: String,
    pub params_sha256: String,
    pub train_config: TrainConfig,
    pub planner: PlannerManifest,
    pub captioner: Option<HeadManifest>,
    pub affordance: Option<HeadManifest>,
}
