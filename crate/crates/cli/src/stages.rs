//! On-disk artifacts per pipeline stage. Each stage directory holds a
//! `manifest.json` with the resolved config slice, its hash, and content
//! hashes of inputs and outputs; a stage is reused only when both match.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use minialf::oracle::{load_demos, save_demos};
use minialf::tasks::{load_tasks, save_tasks};
use minialf::{Demonstration, TaskSpec};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use vp2_core::Scalar;
use vp2_planner::assets::{Assets, LanguageAssets, VisionAssets};
use vp2_planner::suite::SuiteConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub config: Value,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Content hashes keyed by `<parent dir>/<file>`, so a workspace can move
/// without invalidating its manifests.
fn hashes(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| {
            let key: PathBuf = p
                .components()
                .rev()
                .take(2)
                .collect::<Vec<_>>()
                .into_iter()
                .rev()
                .collect();
            Ok((key.display().to_string(), file_hash(p)?))
        })
        .collect()
}

impl Manifest {
    pub fn new(
        stage: &str,
        config: Value,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<Self> {
        Ok(Manifest {
            stage: stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: sha256_hex(config.to_string().as_bytes()),
            config,
            inputs: hashes(inputs)?,
            outputs: hashes(outputs)?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }

    fn read(dir: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.json")).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// The stored manifest matches this config, inputs and outputs.
    fn is_current(dir: &Path, config: &Value, inputs: &[PathBuf], outputs: &[PathBuf]) -> bool {
        let Some(m) = Self::read(dir) else {
            return false;
        };
        let want = sha256_hex(config.to_string().as_bytes());
        m.config_hash == want
            && hashes(inputs).is_ok_and(|h| h == m.inputs)
            && hashes(outputs).is_ok_and(|h| h == m.outputs)
    }
}

/// Artifact root plus the resolved configuration.
pub struct Workspace {
    pub root: PathBuf,
    pub config: SuiteConfig,
}

impl Workspace {
    pub fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn data_config(&self) -> Value {
        let d = &self.config.data;
        json!({ "seed": d.seed, "counts": d.counts, "step_cap": d.step_cap })
    }

    fn tasks_file(&self) -> PathBuf {
        self.dir("tasks").join("tasks.jsonl")
    }

    fn demos_file(&self) -> PathBuf {
        self.dir("demos").join("demos.jsonl")
    }

    fn lm_files(&self) -> Vec<PathBuf> {
        let dir = self.dir("lm");
        LanguageAssets::<f32>::FILES
            .iter()
            .map(|f| dir.join(f))
            .collect()
    }

    fn vision_files(&self) -> Vec<PathBuf> {
        let dir = self.dir("vision");
        VisionAssets::<f32>::FILES
            .iter()
            .map(|f| dir.join(f))
            .collect()
    }

    pub fn gen_tasks(&self) -> Result<Vec<TaskSpec>> {
        let d = &self.config.data;
        let tasks = minialf::generate_tasks(d.seed, d.counts, d.step_cap)?;
        std::fs::create_dir_all(self.dir("tasks"))?;
        save_tasks(&tasks, self.tasks_file())?;
        Manifest::new("gen-tasks", self.data_config(), &[], &[self.tasks_file()])?
            .write(&self.dir("tasks"))?;
        Ok(tasks)
    }

    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        if Manifest::is_current(
            &self.dir("tasks"),
            &self.data_config(),
            &[],
            &[self.tasks_file()],
        ) {
            return Ok(load_tasks(self.tasks_file())?);
        }
        log::info!("generating tasks");
        self.gen_tasks()
    }

    pub fn gen_demos(&self) -> Result<Vec<Demonstration>> {
        let tasks = self.tasks()?;
        let train: Vec<TaskSpec> = tasks
            .into_iter()
            .filter(|t| t.split == minialf::Split::Train)
            .collect();
        let d = &self.config.data;
        let demos = minialf::generate_demos(&train, d.step_cap)?;
        save_demos(&demos, d.seed, d.step_cap, self.dir("demos"))?;
        // the demo writer owns manifest.json; ours sits next to it
        let m = Manifest::new(
            "gen-demos",
            self.data_config(),
            &[self.tasks_file()],
            &[self.demos_file()],
        )?;
        std::fs::write(
            self.dir("demos").join("stage.json"),
            serde_json::to_string_pretty(&m)?,
        )?;
        Ok(demos)
    }

    fn demos_current(&self) -> bool {
        let Ok(text) = std::fs::read_to_string(self.dir("demos").join("stage.json")) else {
            return false;
        };
        let Ok(m) = serde_json::from_str::<Manifest>(&text) else {
            return false;
        };
        m.config_hash == sha256_hex(self.data_config().to_string().as_bytes())
            && hashes(&[self.tasks_file()]).is_ok_and(|h| h == m.inputs)
            && hashes(&[self.demos_file()]).is_ok_and(|h| h == m.outputs)
    }

    pub fn demos(&self) -> Result<Vec<Demonstration>> {
        self.tasks()?;
        if self.demos_current() {
            return Ok(load_demos(self.dir("demos"))?.0);
        }
        log::info!("generating demonstrations");
        self.gen_demos()
    }

    fn lm_config(&self) -> Value {
        json!({ "data": self.data_config(), "lm_pretrain": self.config.data.lm_pretrain })
    }

    pub fn pretrain_lm<T: Scalar>(&self) -> Result<LanguageAssets<T>> {
        let demos = self.demos()?;
        let lang = LanguageAssets::build(&self.config.data, &demos)?;
        lang.save(self.dir("lm"))?;
        Manifest::new(
            "pretrain-lm",
            self.lm_config(),
            &[self.demos_file()],
            &self.lm_files(),
        )?
        .write(&self.dir("lm"))?;
        Ok(lang)
    }

    pub fn language<T: Scalar>(&self) -> Result<LanguageAssets<T>> {
        self.demos()?;
        if Manifest::is_current(
            &self.dir("lm"),
            &self.lm_config(),
            &[self.demos_file()],
            &self.lm_files(),
        ) {
            return Ok(LanguageAssets::load(self.dir("lm"))?);
        }
        log::info!("language model stage is missing or stale; rebuilding");
        self.pretrain_lm()
    }

    fn vision_config(&self) -> Value {
        json!({ "data": self.data_config(), "vision": self.config.data.vision })
    }

    fn vision_inputs(&self) -> Vec<PathBuf> {
        vec![self.tasks_file(), self.dir("lm").join("vocab.txt")]
    }

    pub fn pretrain_vision<T: Scalar>(&self) -> Result<VisionAssets<T>> {
        let tasks = self.tasks()?;
        let vocab = self.language::<T>()?.vocab;
        let vision = VisionAssets::build(&self.config.data, &tasks, &vocab)?;
        vision.save(self.dir("vision"))?;
        Manifest::new(
            "pretrain-vision",
            self.vision_config(),
            &self.vision_inputs(),
            &self.vision_files(),
        )?
        .write(&self.dir("vision"))?;
        Ok(vision)
    }

    pub fn vision<T: Scalar>(&self) -> Result<VisionAssets<T>> {
        self.language::<T>()?;
        if Manifest::is_current(
            &self.dir("vision"),
            &self.vision_config(),
            &self.vision_inputs(),
            &self.vision_files(),
        ) {
            return Ok(VisionAssets::load(self.dir("vision"))?);
        }
        log::info!("vision stage is missing or stale; rebuilding");
        self.pretrain_vision()
    }

    /// Every shared input, reusing current stages and rebuilding the rest.
    pub fn assets<T: Scalar>(&self) -> Result<Assets<T>> {
        let vision = self.vision::<T>()?;
        let language = self.language::<T>()?;
        let tasks = self.tasks()?;
        let demos = self.demos()?;
        Ok(Assets::assemble(
            &self.config.data,
            tasks,
            demos,
            language,
            vision,
        )?)
    }

    /// Input hashes every downstream manifest records.
    pub fn asset_inputs(&self) -> Vec<PathBuf> {
        let mut v = vec![self.tasks_file(), self.demos_file()];
        v.extend(self.lm_files());
        v.extend(self.vision_files());
        v
    }
}
