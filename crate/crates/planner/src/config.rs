//! Training hyperparameters and auxiliary-task settings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PlannerError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxTask {
    InvDyn,
    Captions,
    GoalPred,
}

impl AuxTask {
    pub const ALL: [AuxTask; 3] = [AuxTask::InvDyn, AuxTask::Captions, AuxTask::GoalPred];

    pub fn name(self) -> &'static str {
        match self {
            AuxTask::InvDyn => "inv-dyn",
            AuxTask::Captions => "captions",
            AuxTask::GoalPred => "goal-pred",
        }
    }
}

impl FromStr for AuxTask {
    type Err = PlannerError;
    fn from_str(s: &str) -> Result<Self> {
        AuxTask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| PlannerError::Config(format!("unknown auxiliary task `{s}`")))
    }
}

impl fmt::Display for AuxTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxConfig {
    pub tasks: Vec<AuxTask>,
    pub alpha: f64,
    pub task_embedding_len: usize,
    /// Per demo and epoch, how many steps feed the per-step objectives
    /// (inv-dyn, captions); the objectives stay per-example means.
    pub steps_per_demo: usize,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            tasks: Vec::new(),
            alpha: 0.1,
            task_embedding_len: 10,
            steps_per_demo: 2,
        }
    }
}

impl AuxConfig {
    pub fn with(tasks: &[AuxTask]) -> Self {
        AuxConfig {
            tasks: tasks.to_vec(),
            ..Self::default()
        }
    }

    pub fn enabled(&self) -> bool {
        !self.tasks.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled() && self.alpha <= 0.0 {
            return Err(PlannerError::Config(
                "alpha must be positive when auxiliary tasks are enabled".into(),
            ));
        }
        if self.enabled() && (self.task_embedding_len == 0 || self.steps_per_demo == 0) {
            return Err(PlannerError::Config(
                "task embedding length and steps per demo must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = PlannerError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(PlannerError::Config(format!("unknown precision `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lm_lr: f64,
    pub lm_weight_decay: f64,
    pub vp_lr: f64,
    pub weight_decay: f64,
    pub grad_accum_steps: usize,
    pub grad_clip: Option<f64>,
    pub max_context_embeddings: usize,
    pub precision: Precision,
    pub aux: AuxConfig,
    /// Use only the first `n` demos by index.
    pub dataset_cap: Option<usize>,
}

impl TrainConfig {
    /// Hyperparameters suited to a large pretrained LM: 50 epochs, small LM
    /// learning rate.
    pub fn reference() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            seed: 0,
            lm_lr: 5e-5,
            lm_weight_decay: 1e-3,
            vp_lr: 1e-2,
            weight_decay: 0.01,
            grad_accum_steps: 1,
            grad_clip: Some(1.0),
            max_context_embeddings: 480,
            precision: Precision::F32,
            aux: AuxConfig::default(),
            dataset_cap: None,
        }
    }

    /// The small desk-scale LM needs far larger steps: 40 epochs with both
    /// learning rates at 2e-3.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 40,
            lm_lr: 2e-3,
            vp_lr: 2e-3,
            ..Self::reference()
        }
    }

    /// Same run with `epochs` replaced, for roles trained for fewer epochs.
    pub fn with_epochs(&self, epochs: usize) -> Self {
        TrainConfig {
            epochs,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("grad_accum_steps", self.grad_accum_steps),
            ("max_context_embeddings", self.max_context_embeddings),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(PlannerError::Config(format!("{k} must be positive")));
        }
        for (k, v) in [
            ("lm_lr", self.lm_lr),
            ("vp_lr", self.vp_lr),
            ("lm_weight_decay", self.lm_weight_decay),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PlannerError::Config(format!(
                    "{k} must be a non-negative number"
                )));
            }
        }
        if self.dataset_cap == Some(0) {
            return Err(PlannerError::Config("dataset_cap must be positive".into()));
        }
        self.aux.validate()
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| PlannerError::Config(format!("bad value `{v}` for `{k}`")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "lm_lr" => self.lm_lr = num(key, value)?,
            "lm_weight_decay" => self.lm_weight_decay = num(key, value)?,
            "vp_lr" => self.vp_lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "grad_accum_steps" => self.grad_accum_steps = num(key, value)?,
            "grad_clip" => {
                self.grad_clip = if value == "none" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "max_context_embeddings" => self.max_context_embeddings = num(key, value)?,
            "precision" => self.precision = value.parse()?,
            "alpha" => self.aux.alpha = num(key, value)?,
            "task_embedding_len" => self.aux.task_embedding_len = num(key, value)?,
            "aux_steps_per_demo" => self.aux.steps_per_demo = num(key, value)?,
            "aux" => {
                self.aux.tasks = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty() && *s != "none")
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "dataset_cap" | "samples" => {
                self.dataset_cap = if value == "all" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            _ => {
                return Err(PlannerError::Config(format!(
                    "unknown training key `{key}`"
                )))
            }
        }
        Ok(())
    }
}

/// How a policy turns next-token distributions into an action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decoding {
    Greedy,
    TopK(usize),
}

/// Longest action, in tokens, a policy may emit.
pub const MAX_ACTION_TOKENS: usize = 8;
/// Longest caption the caption model may emit.
pub const MAX_CAPTION_TOKENS: usize = 24;
