//! Shared experiment inputs: task splits, demonstrations, vocabulary, the
//! pretrained language model and the two pretrained visual backbones.

use std::collections::BTreeMap;
use std::path::Path;

use minialf::corpus::pretraining_corpus;
use minialf::render::{caption, describe};
use minialf::{
    generate_demos, generate_tasks, render, Action, Demonstration, Split, SplitCounts, TaskSpec,
    WorldState,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vp2_core::lm::{LmConfig, TransformerLm};
use vp2_core::vision::{
    pretrain_aligned, pretrain_unaligned, retrieval_accuracy, Observation, PretrainConfig,
    VisualBackbone,
};
use vp2_core::vocab::Vocab;
use vp2_core::{ParamStore, Scalar};

use crate::data::{build_vocab, demo_features, encode_strict, Dataset};
use crate::error::{PlannerError, Result};
use crate::policy::BackboneManifest;
use crate::train::{pack_corpus, pretrain_lm, LmPretrainConfig, LmPretrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionPretrainConfig {
    /// Random-walk length per training task; every visited state is an image.
    pub walk_len: usize,
    pub max_images: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for VisionPretrainConfig {
    fn default() -> Self {
        VisionPretrainConfig {
            walk_len: 8,
            max_images: 3000,
            epochs: 8,
            batch_size: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub counts: SplitCounts,
    pub step_cap: usize,
    pub lm_pretrain: LmPretrainConfig,
    pub vision: VisionPretrainConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            counts: SplitCounts::default(),
            step_cap: minialf::DEFAULT_STEP_CAP,
            lm_pretrain: LmPretrainConfig::default(),
            vision: VisionPretrainConfig::default(),
        }
    }
}

/// States from seeded random walks over executable actions (never `done`)
/// starting at each task's initial state, with the task's scene id.
pub fn random_walk_states(
    tasks: &[TaskSpec],
    walk_len: usize,
    seed: u64,
) -> Result<Vec<(WorldState, u32)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5747_4C4B);
    let mut out = Vec::new();
    for t in tasks {
        let mut s = WorldState::from_task(t, usize::MAX);
        out.push((s.clone(), t.scene_id));
        for _ in 0..walk_len {
            let acts: Vec<Action> = s
                .affordable_actions()
                .into_iter()
                .filter(|&a| a != Action::Done)
                .collect();
            let Some(&a) = acts.choose(&mut rng) else {
                break;
            };
            s.step(a)?;
            out.push((s.clone(), t.scene_id));
        }
    }
    Ok(out)
}

/// Image/text pairs for contrastive alignment: the caption of what the agent
/// faces followed by a description of one random receptacle in the room.
pub fn alignment_pairs(
    states: &[(WorldState, u32)],
    vocab: &Vocab,
    seed: u64,
) -> Result<Vec<(Observation, Vec<u32>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA11C);
    states
        .iter()
        .map(|(s, _)| {
            let idx = rng.random_range(0..s.receptacles.len());
            let text = format!("{} {}", caption(s), describe(s, idx));
            Ok((render(s), encode_strict(vocab, &text)?))
        })
        .collect()
}

/// Images labelled with dense scene indices, for the unaligned backbone.
pub fn scene_labels(states: &[(WorldState, u32)]) -> (Vec<(Observation, usize)>, usize) {
    let ids: BTreeMap<u32, usize> = states
        .iter()
        .map(|s| s.1)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    (
        states.iter().map(|(s, id)| (render(s), ids[id])).collect(),
        ids.len(),
    )
}

#[derive(Clone, Debug)]
pub struct PretrainedBackbone<T: Scalar> {
    pub backbone: VisualBackbone,
    pub store: ParamStore<T>,
    pub losses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BackboneRecord {
    backbone: BackboneManifest,
    losses: Vec<f64>,
}

impl<T: Scalar> PretrainedBackbone<T> {
    fn save(&self, dir: &Path, name: &str) -> Result<()> {
        let rec = BackboneRecord {
            backbone: BackboneManifest::of(&self.backbone),
            losses: self.losses.clone(),
        };
        std::fs::write(
            dir.join(format!("{name}.json")),
            serde_json::to_string_pretty(&rec)?,
        )?;
        self.store.save(dir.join(format!("{name}.ckpt")))?;
        Ok(())
    }

    fn load(dir: &Path, name: &str) -> Result<Self> {
        let rec: BackboneRecord = serde_json::from_str(&read(&dir.join(format!("{name}.json")))?)?;
        Ok(PretrainedBackbone {
            backbone: rec.backbone.build()?,
            store: ParamStore::load(dir.join(format!("{name}.ckpt")))?,
            losses: rec.losses,
        })
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| PlannerError::Data(format!("cannot read {}: {e}", path.display())))
}

/// Task splits and expert demonstrations.
pub fn generate_data(config: &DataConfig) -> Result<(Vec<TaskSpec>, Vec<Demonstration>)> {
    let tasks = generate_tasks(config.seed, config.counts, config.step_cap)?;
    let demos = generate_demos(&train_tasks(&tasks), config.step_cap)?;
    Ok((tasks, demos))
}

fn train_tasks(tasks: &[TaskSpec]) -> Vec<TaskSpec> {
    tasks
        .iter()
        .filter(|t| t.split == Split::Train)
        .cloned()
        .collect()
}

/// The vocabulary and the language model before and after pretraining.
pub struct LanguageAssets<T: Scalar> {
    pub vocab: Vocab,
    pub lm: TransformerLm,
    /// Random initialisation, also the starting point of pretraining.
    pub scratch: ParamStore<T>,
    pub pretrained: ParamStore<T>,
    pub report: LmPretrainReport,
}

impl<T: Scalar> LanguageAssets<T> {
    pub fn build(config: &DataConfig, demos: &[Demonstration]) -> Result<Self> {
        let seed = config.seed;
        let vocab = build_vocab(demos)?;
        let lm = TransformerLm::new(LmConfig::desk(vocab.len()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1A4D);
        let mut scratch = ParamStore::new();
        lm.init(&mut scratch, &mut rng);
        log::info!("pretraining the language model");
        let corpus = pretraining_corpus(seed, config.lm_pretrain.paragraphs)?;
        let seqs = pack_corpus(&vocab, &corpus, config.lm_pretrain.seq_len)?;
        let mut pretrained = scratch.clone();
        let report = pretrain_lm(
            &lm,
            &mut pretrained,
            &seqs,
            &LmPretrainConfig {
                seed,
                ..config.lm_pretrain.clone()
            },
        )?;
        Ok(LanguageAssets {
            vocab,
            lm,
            scratch,
            pretrained,
            report,
        })
    }

    pub const FILES: [&'static str; 5] = [
        "vocab.txt",
        "lm_config.txt",
        "lm_scratch.ckpt",
        "lm_pretrained.ckpt",
        "lm_report.json",
    ];

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.vocab.save(dir.join("vocab.txt"))?;
        std::fs::write(dir.join("lm_config.txt"), self.lm.config.to_text())?;
        self.scratch.save(dir.join("lm_scratch.ckpt"))?;
        self.pretrained.save(dir.join("lm_pretrained.ckpt"))?;
        std::fs::write(
            dir.join("lm_report.json"),
            serde_json::to_string_pretty(&self.report)?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let vocab = Vocab::load(dir.join("vocab.txt"))?;
        let lm = TransformerLm::new(LmConfig::from_text(&read(&dir.join("lm_config.txt"))?)?)?;
        Ok(LanguageAssets {
            vocab,
            lm,
            scratch: ParamStore::load(dir.join("lm_scratch.ckpt"))?,
            pretrained: ParamStore::load(dir.join("lm_pretrained.ckpt"))?,
            report: serde_json::from_str(&read(&dir.join("lm_report.json"))?)?,
        })
    }
}

/// The two pretrained visual backbones.
pub struct VisionAssets<T: Scalar> {
    pub aligned: PretrainedBackbone<T>,
    pub unaligned: PretrainedBackbone<T>,
    /// Retrieval accuracy of the aligned backbone among batches of 8.
    pub retrieval: f64,
}

impl<T: Scalar> VisionAssets<T> {
    /// Both backbones start from the same random initialisation.
    pub fn build(config: &DataConfig, tasks: &[TaskSpec], vocab: &Vocab) -> Result<Self> {
        let seed = config.seed;
        log::info!("pretraining visual backbones");
        let v = &config.vision;
        let mut states = random_walk_states(&train_tasks(tasks), v.walk_len, seed)?;
        states.truncate(v.max_images);
        let pcfg = PretrainConfig {
            epochs: v.epochs,
            batch_size: v.batch_size,
            lr: v.lr,
            seed,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5615);
        let mut bb = VisualBackbone::default();
        let mut store = ParamStore::new();
        bb.init(&mut store, &mut rng);
        let (mut ub, mut ustore) = (bb.clone(), store.clone());

        let pairs = alignment_pairs(&states, vocab, seed)?;
        let log = pretrain_aligned(&mut bb, &mut store, &pairs, vocab.len(), &pcfg)?;
        let retrieval = retrieval_accuracy(&store, &bb, &pairs[..pairs.len().min(400)], 8)?;
        log::info!(
            "aligned backbone: losses {:?}, retrieval@8 {retrieval:.3}",
            log.epoch_losses
        );
        let aligned = PretrainedBackbone {
            backbone: bb,
            store,
            losses: log.epoch_losses,
        };

        let (labelled, classes) = scene_labels(&states);
        let ulog = pretrain_unaligned(&mut ub, &mut ustore, &labelled, classes, &pcfg)?;
        log::info!("unaligned backbone: losses {:?}", ulog.epoch_losses);
        let unaligned = PretrainedBackbone {
            backbone: ub,
            store: ustore,
            losses: ulog.epoch_losses,
        };
        Ok(VisionAssets {
            aligned,
            unaligned,
            retrieval,
        })
    }

    pub const FILES: [&'static str; 5] = [
        "aligned.json",
        "aligned.ckpt",
        "unaligned.json",
        "unaligned.ckpt",
        "retrieval.json",
    ];

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.aligned.save(dir, "aligned")?;
        self.unaligned.save(dir, "unaligned")?;
        std::fs::write(
            dir.join("retrieval.json"),
            serde_json::to_string(&self.retrieval)?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(VisionAssets {
            aligned: PretrainedBackbone::load(dir, "aligned")?,
            unaligned: PretrainedBackbone::load(dir, "unaligned")?,
            retrieval: serde_json::from_str(&read(&dir.join("retrieval.json"))?)?,
        })
    }
}

/// Everything arms share within one data seed.
pub struct Assets<T: Scalar> {
    pub config: DataConfig,
    pub tasks: Vec<TaskSpec>,
    pub demos: Vec<Demonstration>,
    pub vocab: Vocab,
    pub lm: TransformerLm,
    /// Random initialisation, also the starting point of pretraining.
    pub lm_scratch: ParamStore<T>,
    pub lm_pretrained: ParamStore<T>,
    pub lm_report: LmPretrainReport,
    pub aligned: PretrainedBackbone<T>,
    pub unaligned: PretrainedBackbone<T>,
    /// Retrieval accuracy of the aligned backbone among batches of 8.
    pub retrieval: f64,
    /// Demonstrations with aligned-backbone features.
    pub data: Dataset<T>,
    /// Same demonstrations with unaligned-backbone features.
    pub data_unaligned: Dataset<T>,
}

impl<T: Scalar> Assets<T> {
    pub fn build(config: &DataConfig) -> Result<Self> {
        let (tasks, demos) = generate_data(config)?;
        let language = LanguageAssets::build(config, &demos)?;
        let vision = VisionAssets::build(config, &tasks, &language.vocab)?;
        Self::assemble(config, tasks, demos, language, vision)
    }

    /// Joins the stages and extracts demo features with both backbones.
    pub fn assemble(
        config: &DataConfig,
        tasks: Vec<TaskSpec>,
        demos: Vec<Demonstration>,
        language: LanguageAssets<T>,
        vision: VisionAssets<T>,
    ) -> Result<Self> {
        let VisionAssets {
            aligned,
            unaligned,
            retrieval,
        } = vision;
        let mut data = Dataset::encode(&demos, &language.vocab)?;
        let mut data_unaligned = data.clone();
        data.attach_features(demo_features(&aligned.backbone, &aligned.store, &demos)?)?;
        data_unaligned.attach_features(demo_features(
            &unaligned.backbone,
            &unaligned.store,
            &demos,
        )?)?;
        Ok(Assets {
            config: config.clone(),
            tasks,
            demos,
            vocab: language.vocab,
            lm: language.lm,
            lm_scratch: language.scratch,
            lm_pretrained: language.pretrained,
            lm_report: language.report,
            aligned,
            unaligned,
            retrieval,
            data,
            data_unaligned,
        })
    }

    pub fn split_tasks(&self, split: Split) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .filter(|t| t.split == split)
            .cloned()
            .collect()
    }
}
