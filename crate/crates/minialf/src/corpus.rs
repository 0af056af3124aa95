//! Text corpora: the planning-prior corpus for language-model pretraining
//! and the lexicon used to build the shared vocabulary.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::oracle::solve;
use crate::render::{caption, caption_lexicon};
use crate::tasks::{held_out_combos, scene_layout, TaskSpec, IN_SCENES, OD_SCENES};
use crate::types::{goal_text, Obj, Recep, Split, TaskType};
use crate::world::{Action, WorldState, DEFAULT_STEP_CAP};

/// Instruction prefix for the caption objective.
pub const CAPTION_PROMPT: &str = "your task is to : caption the following observation";
/// Instruction prefix for the affordance classifier.
pub const AFFORDANCE_PROMPT: &str =
    "your task is to : predict whether the following action is valid";
pub const VALID_WORD: &str = "valid";
pub const INVALID_WORD: &str = "invalid";

/// Scene ids used by the corpus generator, disjoint from every split.
const CORPUS_SCENE0: u32 = IN_SCENES + OD_SCENES;
const CORPUS_SCENES: u32 = 64;

fn random_task(rng: &mut ChaCha8Rng, seed: u64) -> Option<TaskSpec> {
    let held_out = held_out_combos(seed);
    let scene_id = CORPUS_SCENE0 + rng.random_range(0..CORPUS_SCENES);
    let receptacles = scene_layout(seed, scene_id);
    let holders: Vec<Recep> = receptacles
        .iter()
        .map(|r| r.0)
        .filter(|r| r.holds_objects())
        .collect();
    let task_type = *TaskType::ALL.choose(rng)?;
    let tool = task_type.tool();
    if tool.is_some_and(|t| !receptacles.iter().any(|r| r.0 == t)) {
        return None;
    }
    let objects: Vec<Obj> = Obj::ALL
        .into_iter()
        .filter(|&o| task_type.accepts(o))
        .collect();
    let object = *objects.choose(rng)?;
    let targets: Vec<Recep> = holders
        .iter()
        .copied()
        .filter(|&r| Some(r) != tool)
        .collect();
    let target = if task_type.has_target() {
        Some(*targets.choose(rng)?)
    } else {
        None
    };
    if held_out.contains(&(object, target.or(tool)?)) {
        return None;
    }
    let sources: Vec<Recep> = holders
        .iter()
        .copied()
        .filter(|&r| Some(r) != target)
        .collect();
    let mut placements: Vec<(Obj, Recep)> = (0..task_type.instances())
        .map(|_| (object, *sources.choose(rng).expect("sources")))
        .collect();
    for _ in 0..2 {
        placements.push((*Obj::ALL.choose(rng)?, *holders.choose(rng)?));
    }
    Some(TaskSpec {
        id: 0,
        task_type,
        object,
        target,
        tool,
        goal: goal_text(task_type, object, target),
        scene_id,
        split: Split::Train,
        receptacles,
        placements,
    })
}

/// `n` paragraphs, each a distractor room description, the goal and the
/// expert step list:
/// `<desc> <sep> <goal> <sep> <a1> <eos> ... done <eos>`.
///
/// Tasks come from scenes no split uses and avoid the held-out combos.
pub fn pretraining_corpus(seed: u64, n: usize) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0_4B05);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let Some(task) = random_task(&mut rng, seed) else {
            continue;
        };
        let Ok(plan) = solve(&task, DEFAULT_STEP_CAP) else {
            continue;
        };
        let mut state = WorldState::from_task(&task, usize::MAX);
        let peek = rng.random_range(0..plan.len());
        for &a in &plan[..peek] {
            state.step(a)?;
        }
        let mut text = format!("{} <sep> {} <sep>", caption(&state), task.goal);
        for a in &plan {
            text.push(' ');
            text.push_str(&a.to_string());
            text.push_str(" <eos>");
        }
        out.push(text);
    }
    Ok(out)
}

/// Every word environment text can contain: action grammar, goals,
/// captions and the fixed instruction prompts.
pub fn lexicon() -> Vec<String> {
    let mut out: Vec<String> = Action::grammar().iter().map(ToString::to_string).collect();
    for t in TaskType::ALL {
        for o in Obj::ALL {
            for r in Recep::ALL {
                out.push(goal_text(t, o, Some(r)));
            }
        }
    }
    out.extend(caption_lexicon());
    out.extend([CAPTION_PROMPT, AFFORDANCE_PROMPT, VALID_WORD, INVALID_WORD].map(String::from));
    out
}
