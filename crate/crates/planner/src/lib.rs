//! Planners that condition a causal LM on goals, past actions and visual
//! prompts, plus the baselines, training loops and evaluation harness.

pub mod assets;
pub mod captioner;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod policy;
pub mod saycan;
pub mod suite;
pub mod train;

pub use config::{AuxConfig, AuxTask, Decoding, Precision, TrainConfig};
pub use data::{build_vocab, Dataset, EncodedDemo, EncodedStep};
pub use error::{PlannerError, Result};
pub use model::{ObsInput, ObsMode, PlannerSpec, Session};
pub use train::{lr_groups, pretrain_lm, run_training, train_planner, LmPretrainConfig, LossCurve};
