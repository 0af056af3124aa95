//! MiniALF: a deterministic household gridworld with 32×32 symbolic-pixel
//! observations, a text action grammar, six task families and a scripted
//! expert that produces demonstrations.

pub mod corpus;
pub mod error;
pub mod oracle;
pub mod render;
pub mod tasks;
pub mod types;
pub mod world;

pub use error::{EnvError, Result};
pub use oracle::{
    demonstrate, generate_demos, solve, AffordanceExample, DemoStep, Demonstration, NegativeSource,
};
pub use render::{caption, render};
pub use tasks::{generate_tasks, SplitCounts, TaskSpec};
pub use types::{Obj, Recep, Split, TaskType};
pub use world::{Action, WorldState, DEFAULT_STEP_CAP};

/// Fresh initial state for a task.
pub fn reset(task: &TaskSpec, step_cap: usize) -> WorldState {
    WorldState::from_task(task, step_cap)
}
