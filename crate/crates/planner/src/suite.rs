//! Training recipes per policy kind and the ablation suite.

use std::collections::BTreeMap;
use std::time::Instant;

use minialf::corpus::{AFFORDANCE_PROMPT, CAPTION_PROMPT, INVALID_WORD, VALID_WORD};
use minialf::oracle::{make_affordance_examples, subsample_examples};
use minialf::{NegativeSource, Split};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vp2_core::lm::set_frozen_mode;
use vp2_core::vision::{pretrain_prompt_caption, PretrainConfig, PROJECTOR_PREFIX};
use vp2_core::{ParamStore, Scalar};

use crate::assets::{Assets, DataConfig, PretrainedBackbone};
use crate::captioner::CaptionModel;
use crate::config::{AuxConfig, AuxTask, Decoding, TrainConfig};
use crate::data::{encode_strict, Dataset};
use crate::error::{PlannerError, Result};
use crate::eval::{EvalReport, SeedRun, SplitEval};
use crate::model::{ObsMode, PlannerSpec};
use crate::policy::{PolicyBundle, PolicyKind, SAYCAN_BEAM};
use crate::saycan::{majority_accuracy, AffordanceItem, AffordanceModel};
use crate::train::{train_planner, LossCurve};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneChoice {
    Aligned,
    Unaligned,
}

/// Everything that varies between ablation arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub kind: PolicyKind,
    /// Train on the first `n` demos only.
    pub samples: Option<usize>,
    pub backbone: BackboneChoice,
    pub pretrained_lm: bool,
    pub frozen_lm: bool,
    pub prompt_size: usize,
    /// Initialise the projector with caption-objective pretraining.
    pub clipcap: bool,
    pub aux: Vec<AuxTask>,
    pub series: Option<String>,
}

impl ArmSpec {
    pub fn new(name: &str, kind: PolicyKind, prompt_size: usize) -> Self {
        ArmSpec {
            name: name.to_string(),
            kind,
            samples: None,
            backbone: BackboneChoice::Aligned,
            pretrained_lm: true,
            frozen_lm: false,
            prompt_size,
            clipcap: false,
            aux: Vec::new(),
            series: None,
        }
    }
}

/// Training budgets per role and the arm grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub data: DataConfig,
    /// Planner training (VP², Ignore and their ablations).
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub prompt_size: usize,
    pub prompt_sizes: Vec<usize>,
    pub sample_arms: Vec<usize>,
    /// Demo count of the small-data arms (pretraining and auxiliary tasks).
    pub small_samples: usize,
    pub caption_epochs: usize,
    pub caption_planner_epochs: usize,
    pub saycan_epochs: usize,
    pub affordance_epochs: usize,
    pub affordance_examples: usize,
    pub affordance_negatives: usize,
    pub clipcap_epochs: usize,
    pub splits: Vec<Split>,
    pub threads: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            data: DataConfig::default(),
            train: TrainConfig::desk(),
            seeds: vec![0, 1],
            prompt_size: 10,
            prompt_sizes: vec![1, 5, 10, 20],
            sample_arms: vec![100, 500, 1000],
            small_samples: 100,
            caption_epochs: 10,
            caption_planner_epochs: 40,
            saycan_epochs: 40,
            affordance_epochs: 2,
            affordance_examples: 12_000,
            affordance_negatives: 1,
            clipcap_epochs: 10,
            splits: vec![Split::EvalId, Split::EvalOd],
            threads: 1,
        }
    }
}

impl SuiteConfig {
    pub fn train_demos(&self) -> usize {
        self.data.counts.train
    }

    /// The ablation grid. Sample arms at or above the training-set size
    /// collapse into the full-data arm.
    pub fn arms(&self) -> Vec<ArmSpec> {
        let m = self.prompt_size;
        let all = self.train_demos();
        let mut out = Vec::new();
        let mut vp2 = ArmSpec::new("vp2", PolicyKind::Vp2, m);
        vp2.series = Some("pretrained".into());
        out.push(vp2);
        for (name, kind) in [
            ("ignore", PolicyKind::Ignore),
            ("captions", PolicyKind::Captions),
            ("saycan-oracle", PolicyKind::SaycanOracle),
            ("saycan-trained", PolicyKind::SaycanTrained),
        ] {
            out.push(ArmSpec::new(name, kind, m));
        }
        let mut a = ArmSpec::new("unaligned", PolicyKind::Vp2, m);
        a.backbone = BackboneChoice::Unaligned;
        out.push(a);
        let mut a = ArmSpec::new("clipcap", PolicyKind::Vp2, m);
        a.clipcap = true;
        out.push(a);
        let mut a = ArmSpec::new("frozen-lm", PolicyKind::Vp2, m);
        a.frozen_lm = true;
        out.push(a);
        for &p in self.prompt_sizes.iter().filter(|&&p| p != m) {
            out.push(ArmSpec::new(&format!("prompt-{p}"), PolicyKind::Vp2, p));
        }
        let mut sizes: Vec<usize> = self
            .sample_arms
            .iter()
            .copied()
            .filter(|&n| n < all)
            .collect();
        if !sizes.contains(&self.small_samples) && self.small_samples < all {
            sizes.push(self.small_samples);
        }
        sizes.sort_unstable();
        for &n in &sizes {
            let mut a = ArmSpec::new(&format!("samples-{n}"), PolicyKind::Vp2, m);
            a.samples = Some(n);
            a.series = Some("pretrained".into());
            out.push(a);
        }
        for &n in &sizes {
            let mut a = ArmSpec::new(&format!("no-pretrain-{n}"), PolicyKind::Vp2, m);
            a.samples = Some(n);
            a.pretrained_lm = false;
            a.series = Some("no-pretrain".into());
            out.push(a);
        }
        let mut a = ArmSpec::new("no-pretrain-all", PolicyKind::Vp2, m);
        a.pretrained_lm = false;
        a.series = Some("no-pretrain".into());
        out.push(a);
        for t in AuxTask::ALL {
            let mut a = ArmSpec::new(
                &format!("aux-{}-{}", t.name(), self.small_samples),
                PolicyKind::Vp2,
                m,
            );
            a.samples = Some(self.small_samples.min(all));
            a.aux = vec![t];
            out.push(a);
        }
        out
    }
}

/// Arms the ordinal checks compare, in run order.
pub const ACCEPTANCE_ARMS: [&str; 13] = [
    "vp2",
    "ignore",
    "captions",
    "saycan-oracle",
    "saycan-trained",
    "unaligned",
    "frozen-lm",
    "prompt-1",
    "samples-100",
    "no-pretrain-100",
    "aux-inv-dyn-100",
    "aux-captions-100",
    "aux-goal-pred-100",
];

impl SuiteConfig {
    /// The subset of `arms()` named in `ACCEPTANCE_ARMS`.
    pub fn acceptance_arms(&self) -> Vec<ArmSpec> {
        let all = self.arms();
        ACCEPTANCE_ARMS
            .iter()
            .filter_map(|n| all.iter().find(|a| a.name == *n).cloned())
            .collect()
    }
}

/// Training diagnostics for one arm and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainNote {
    pub arm: String,
    pub seed: u64,
    pub curve: LossCurve,
    pub seconds: f64,
    /// Held-out affordance accuracy and the majority-class baseline.
    pub affordance_accuracy: Option<(f64, f64)>,
}

impl TrainNote {
    pub fn decreased(&self) -> bool {
        let c = self.curve.train();
        c.len() < 2 || c.last() < c.first()
    }
}

/// Trains the models for one arm and seed.
pub struct Trainer<'a, T: Scalar> {
    pub assets: &'a Assets<T>,
    pub config: &'a SuiteConfig,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    fn backbone(&self, c: BackboneChoice) -> (&'a PretrainedBackbone<T>, &'a Dataset<T>) {
        match c {
            BackboneChoice::Aligned => (&self.assets.aligned, &self.assets.data),
            BackboneChoice::Unaligned => (&self.assets.unaligned, &self.assets.data_unaligned),
        }
    }

    fn planner_config(&self, arm: &ArmSpec, seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            seed,
            epochs,
            dataset_cap: arm.samples,
            aux: AuxConfig {
                tasks: arm.aux.clone(),
                ..self.config.train.aux.clone()
            },
            ..self.config.train.clone()
        }
    }

    fn bundle(
        &self,
        kind: PolicyKind,
        planner: PlannerSpec,
        store: ParamStore<T>,
        cfg: TrainConfig,
    ) -> PolicyBundle<T> {
        PolicyBundle {
            kind,
            vocab: self.assets.vocab.clone(),
            planner,
            planner_store: store,
            captioner: None,
            affordance: None,
            decoding: if kind == PolicyKind::SaycanTrained {
                Decoding::TopK(SAYCAN_BEAM)
            } else {
                Decoding::Greedy
            },
            oracle_captions: false,
            train_config: cfg,
        }
    }

    /// Caption-objective projector initialisation with the LM held fixed.
    pub fn clipcap_projector(&self, prompt_size: usize, seed: u64) -> Result<ParamStore<T>> {
        let a = self.assets;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC11C);
        let prefix = encode_strict(&a.vocab, CAPTION_PROMPT)?;
        let (cm, mut store) = CaptionModel::instantiate(
            &a.lm,
            &a.lm_pretrained,
            &a.aligned.backbone,
            &a.aligned.store,
            prompt_size,
            prefix,
            &mut rng,
        )?;
        let pairs: Vec<_> = a
            .demos
            .iter()
            .flat_map(|d| &d.steps)
            .map(|s| Ok((s.observation.clone(), encode_strict(&a.vocab, &s.caption)?)))
            .collect::<Result<_>>()?;
        let cfg = PretrainConfig {
            epochs: self.config.clipcap_epochs,
            batch_size: self.config.train.batch_size,
            lr: self.config.train.vp_lr,
            seed,
        };
        let log = pretrain_prompt_caption(
            &cm.backbone,
            &cm.projector,
            &cm.lm,
            &mut store,
            &pairs,
            &cm.prefix,
            &cfg,
        )?;
        log::info!("clipcap projector: losses {:?}", log.epoch_losses);
        Ok(store)
    }

    /// VP² (and its ablations) or Ignore.
    pub fn train_planner_arm(
        &self,
        arm: &ArmSpec,
        seed: u64,
    ) -> Result<(PolicyBundle<T>, TrainNote)> {
        let a = self.assets;
        let (bb, ds) = self.backbone(arm.backbone);
        let mode = if arm.kind == PolicyKind::Ignore {
            ObsMode::None
        } else {
            ObsMode::Visual
        };
        let cfg = self.planner_config(arm, seed, self.config.train.epochs);
        let lm_store = if arm.pretrained_lm {
            &a.lm_pretrained
        } else {
            &a.lm_scratch
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (spec, mut store) = PlannerSpec::instantiate(
            &a.lm,
            lm_store,
            mode,
            Some((&bb.backbone, &bb.store)),
            arm.prompt_size,
            &cfg.aux,
            cfg.max_context_embeddings,
            &mut rng,
        )?;
        if arm.clipcap {
            store.copy_prefix_from(
                &self.clipcap_projector(arm.prompt_size, seed)?,
                PROJECTOR_PREFIX,
            );
        }
        if arm.frozen_lm {
            set_frozen_mode(&mut store, true);
        }
        let t = Instant::now();
        let curve = train_planner(&spec, &mut store, ds, &cfg)?;
        let note = TrainNote {
            arm: arm.name.clone(),
            seed,
            curve,
            seconds: t.elapsed().as_secs_f64(),
            affordance_accuracy: None,
        };
        Ok((self.bundle(arm.kind, spec, store, cfg), note))
    }

    /// Caption model, then a text planner over its predicted captions.
    pub fn train_captions(&self, arm: &ArmSpec, seed: u64) -> Result<(PolicyBundle<T>, TrainNote)> {
        let a = self.assets;
        let t = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prefix = encode_strict(&a.vocab, CAPTION_PROMPT)?;
        let (cm, mut cstore) = CaptionModel::instantiate(
            &a.lm,
            &a.lm_pretrained,
            &a.aligned.backbone,
            &a.aligned.store,
            arm.prompt_size,
            prefix,
            &mut rng,
        )?;
        let ccfg = self.planner_config(arm, seed, self.config.caption_epochs);
        let ccurve = cm.train(
            &mut cstore,
            &a.data,
            &TrainConfig {
                aux: AuxConfig::default(),
                ..ccfg
            },
        )?;
        log::info!("caption model: losses {:?}", ccurve.train());
        let mut ds = a.data.clone();
        ds.obs_text = Some(cm.caption_dataset(&cstore, &ds)?);
        let cfg = self.planner_config(arm, seed, self.config.caption_planner_epochs);
        let (spec, mut store) = PlannerSpec::instantiate(
            &a.lm,
            &a.lm_pretrained,
            ObsMode::Text,
            None,
            0,
            &cfg.aux,
            cfg.max_context_embeddings,
            &mut rng,
        )?;
        let mut curve = train_planner(&spec, &mut store, &ds, &cfg)?;
        for p in ccurve.points {
            curve.push(p.epoch, "caption", p.loss);
        }
        let mut b = self.bundle(PolicyKind::Captions, spec, store, cfg);
        b.captioner = Some((cm, cstore));
        Ok((
            b,
            TrainNote {
                arm: arm.name.clone(),
                seed,
                curve,
                seconds: t.elapsed().as_secs_f64(),
                affordance_accuracy: None,
            },
        ))
    }

    /// Affordance items from heuristic negatives, split into train and
    /// held-out sets by demo.
    pub fn affordance_items(
        &self,
        seed: u64,
    ) -> Result<(Vec<AffordanceItem>, Vec<AffordanceItem>)> {
        let a = self.assets;
        let examples = make_affordance_examples(
            &a.demos,
            self.config.affordance_negatives,
            NegativeSource::Heuristic,
            None,
            seed,
        )?;
        let held_demos = (a.demos.len() / 10).max(1);
        let (train, held): (Vec<_>, Vec<_>) =
            examples.into_iter().partition(|e| e.demo >= held_demos);
        let train = subsample_examples(&train, self.config.affordance_examples, seed);
        let held = subsample_examples(&held, 1000, seed);
        let to_item = |e: &minialf::AffordanceExample| -> Result<AffordanceItem> {
            Ok(AffordanceItem {
                obs: a.data.demos[e.demo].steps[e.step].obs,
                action: encode_strict(&a.vocab, &e.action)?,
                valid: e.valid,
            })
        };
        Ok((
            train.iter().map(to_item).collect::<Result<_>>()?,
            held.iter().map(to_item).collect::<Result<_>>()?,
        ))
    }

    /// Text-only action model plus the learned affordance classifier.
    pub fn train_saycan(&self, arm: &ArmSpec, seed: u64) -> Result<(PolicyBundle<T>, TrainNote)> {
        let a = self.assets;
        let t = Instant::now();
        let cfg = self.planner_config(arm, seed, self.config.saycan_epochs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (spec, mut store) = PlannerSpec::instantiate(
            &a.lm,
            &a.lm_pretrained,
            ObsMode::None,
            None,
            0,
            &AuxConfig::default(),
            cfg.max_context_embeddings,
            &mut rng,
        )?;
        let mut curve = train_planner(
            &spec,
            &mut store,
            &a.data,
            &TrainConfig {
                aux: AuxConfig::default(),
                ..cfg.clone()
            },
        )?;
        let (mut items, held) = self.affordance_items(seed)?;
        items.shuffle(&mut rng);
        let labels = (a.vocab.id(VALID_WORD), a.vocab.id(INVALID_WORD));
        let (Some(valid), Some(invalid)) = labels else {
            return Err(PlannerError::Data(
                "vocabulary lacks the affordance label words".into(),
            ));
        };
        let prompt = encode_strict(&a.vocab, AFFORDANCE_PROMPT)?;
        let (am, mut astore) = AffordanceModel::instantiate(
            &a.lm,
            &a.lm_pretrained,
            &a.aligned.backbone,
            &a.aligned.store,
            arm.prompt_size,
            prompt,
            (valid, invalid),
            &mut rng,
        )?;
        let acfg = TrainConfig {
            epochs: self.config.affordance_epochs,
            aux: AuxConfig::default(),
            dataset_cap: None,
            ..cfg.clone()
        };
        let acurve = am.train(&mut astore, &a.data, &items, &acfg)?;
        for p in acurve.points {
            curve.push(p.epoch, "affordance", p.loss);
        }
        let acc = am.accuracy(&astore, &a.data, &held)?;
        let base = majority_accuracy(&held);
        log::info!("affordance classifier: held-out accuracy {acc:.3} (majority {base:.3})");
        let mut b = self.bundle(arm.kind, spec, store, cfg);
        b.affordance = Some((am, astore));
        Ok((
            b,
            TrainNote {
                arm: arm.name.clone(),
                seed,
                curve,
                seconds: t.elapsed().as_secs_f64(),
                affordance_accuracy: Some((acc, base)),
            },
        ))
    }

    pub fn train(&self, arm: &ArmSpec, seed: u64) -> Result<(PolicyBundle<T>, TrainNote)> {
        match arm.kind {
            PolicyKind::Vp2 | PolicyKind::Ignore => self.train_planner_arm(arm, seed),
            PolicyKind::Captions => self.train_captions(arm, seed),
            PolicyKind::SaycanOracle | PolicyKind::SaycanTrained => self.train_saycan(arm, seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub reports: Vec<EvalReport>,
    pub notes: Vec<TrainNote>,
    pub pretrain_perplexity: (f64, f64),
    pub retrieval: f64,
}

/// Trains every arm for every seed and evaluates each on every split. All
/// arms see the same task lists. Both SayCan arms share one trained
/// bundle per seed.
pub fn run_suite<T: Scalar + Sync>(
    assets: &Assets<T>,
    cfg: &SuiteConfig,
    arms: &[ArmSpec],
) -> Result<SuiteOutcome> {
    let trainer = Trainer {
        assets,
        config: cfg,
    };
    let tasks: Vec<_> = cfg.splits.iter().map(|&s| assets.split_tasks(s)).collect();
    let evals: Vec<SplitEval<'_>> = cfg
        .splits
        .iter()
        .zip(&tasks)
        .map(|(&s, t)| SplitEval::new(s, t, cfg.data.step_cap, cfg.threads))
        .collect::<Result<_>>()?;
    let mut runs: BTreeMap<(usize, usize), Vec<SeedRun>> = BTreeMap::new();
    let mut notes = Vec::new();
    for &seed in &cfg.seeds {
        let mut saycan: Option<PolicyBundle<T>> = None;
        for (ai, arm) in arms.iter().enumerate() {
            let t = Instant::now();
            let bundle = match (arm.kind.is_saycan(), &saycan) {
                (true, Some(b)) => b.with_kind(arm.kind),
                _ => {
                    let (b, note) = trainer.train(arm, seed)?;
                    notes.push(note);
                    if arm.kind.is_saycan() {
                        saycan = Some(b.clone());
                    }
                    b
                }
            };
            let hash = bundle.manifest_hash()?;
            for (si, ev) in evals.iter().enumerate() {
                runs.entry((ai, si))
                    .or_default()
                    .push(ev.run_seed(seed, hash.clone(), || bundle.agent())?);
            }
            let rates: Vec<String> = evals
                .iter()
                .enumerate()
                .map(|(si, ev)| {
                    format!(
                        "{} {:.3}",
                        ev.split.name(),
                        runs[&(ai, si)].last().expect("just pushed").normalized
                    )
                })
                .collect();
            log::info!(
                "seed {seed} arm {}: {} ({:.0}s)",
                arm.name,
                rates.join(", "),
                t.elapsed().as_secs_f64()
            );
        }
    }
    let mut reports = Vec::new();
    for (ai, arm) in arms.iter().enumerate() {
        for (si, ev) in evals.iter().enumerate() {
            let samples = arm.samples.unwrap_or(usize::MAX).min(cfg.train_demos());
            reports.push(ev.report(
                &arm.name,
                runs.remove(&(ai, si)).unwrap_or_default(),
                samples,
                arm.series.clone(),
            ));
        }
    }
    Ok(SuiteOutcome {
        reports,
        notes,
        pretrain_perplexity: (
            assets.lm_report.perplexity_before,
            assets.lm_report.perplexity_after,
        ),
        retrieval: assets.retrieval,
    })
}
