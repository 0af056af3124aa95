//! Scenes, task specifications and split generation.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EnvError, Result};
use crate::oracle;
use crate::types::{goal_text, Obj, Recep, Split, TaskType};
use crate::world::{GRID, START_CELL};

/// Scenes `0..IN_SCENES` serve train and eval-ID; the next `OD_SCENES` are
/// reserved for eval-OD.
pub const IN_SCENES: u32 = 24;
pub const OD_SCENES: u32 = 8;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub task_type: TaskType,
    pub object: Obj,
    pub target: Option<Recep>,
    pub tool: Option<Recep>,
    pub goal: String,
    pub scene_id: u32,
    pub split: Split,
    /// Scene layout in scene order: receptacle type and grid cell.
    pub receptacles: Vec<(Recep, (usize, usize))>,
    /// Initial object placements, in object order.
    pub placements: Vec<(Obj, Recep)>,
}

impl TaskSpec {
    pub fn combo(&self) -> (Obj, Recep) {
        (
            self.object,
            self.target
                .or(self.tool)
                .expect("every task has a target or a tool"),
        )
    }
}

/// Deterministic layout of a scene: 6–8 distinct receptacle types on
/// distinct cells, listed in canonical type order.
pub fn scene_layout(seed: u64, scene_id: u32) -> Vec<(Recep, (usize, usize))> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (scene_id as u64 + 1));
    let n = rng.random_range(6..=8);
    let mut kinds = Recep::ALL.to_vec();
    kinds.shuffle(&mut rng);
    kinds.truncate(n);
    kinds.sort();
    let mut cells: Vec<(usize, usize)> = (0..GRID)
        .flat_map(|r| (0..GRID).map(move |c| (r, c)))
        .filter(|&c| c != START_CELL)
        .collect();
    cells.shuffle(&mut rng);
    kinds.into_iter().zip(cells).collect()
}

/// `(object, receptacle)` pairs reserved for eval-OD: one placement target
/// per object type, plus one examined object type with the desklamp.
pub fn held_out_combos(seed: u64) -> BTreeSet<(Obj, Recep)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0D0D_0D0D);
    let holders: Vec<Recep> = Recep::ALL
        .into_iter()
        .filter(|r| r.holds_objects())
        .collect();
    let mut out: BTreeSet<(Obj, Recep)> = Obj::ALL
        .iter()
        .map(|&o| (o, *holders.choose(&mut rng).expect("holders")))
        .collect();
    let examinable: Vec<Obj> = Obj::ALL.into_iter().filter(|o| o.examinable()).collect();
    out.insert((
        *examinable.choose(&mut rng).expect("examinable"),
        Recep::Desklamp,
    ));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub eval_id: usize,
    pub eval_od: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 400,
            eval_id: 60,
            eval_od: 60,
        }
    }
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::EvalId => self.eval_id,
            Split::EvalOd => self.eval_od,
        }
    }
}

fn sample_task(
    rng: &mut ChaCha8Rng,
    seed: u64,
    split: Split,
    held_out: &BTreeSet<(Obj, Recep)>,
) -> Option<TaskSpec> {
    let task_type = *TaskType::ALL.choose(rng)?;
    let scene_id = match split {
        Split::EvalOd => IN_SCENES + rng.random_range(0..OD_SCENES),
        _ => rng.random_range(0..IN_SCENES),
    };
    let receptacles = scene_layout(seed, scene_id);
    let present: Vec<Recep> = receptacles.iter().map(|r| r.0).collect();
    let tool = task_type.tool();
    if tool.is_some_and(|t| !present.contains(&t)) {
        return None;
    }
    let holders: Vec<Recep> = present
        .iter()
        .copied()
        .filter(|r| r.holds_objects())
        .collect();
    let mut combos = Vec::new();
    for o in Obj::ALL.into_iter().filter(|&o| task_type.accepts(o)) {
        let targets: Vec<Option<Recep>> = if task_type.has_target() {
            holders
                .iter()
                .copied()
                .filter(|&r| Some(r) != tool)
                .map(Some)
                .collect()
        } else {
            vec![None]
        };
        for t in targets {
            let key = (o, t.or(tool).expect("target or tool"));
            let reserved = held_out.contains(&key);
            if reserved == (split == Split::EvalOd) {
                combos.push((o, t));
            }
        }
    }
    let &(object, target) = combos.choose(rng)?;
    let sources: Vec<Recep> = holders
        .iter()
        .copied()
        .filter(|&r| Some(r) != target)
        .collect();
    let mut placements = Vec::new();
    for _ in 0..task_type.instances() {
        placements.push((object, *sources.choose(rng)?));
    }
    let mut others: Vec<Obj> = Obj::ALL.into_iter().filter(|&o| o != object).collect();
    others.shuffle(rng);
    for &o in others.iter().take(rng.random_range(2..=3)) {
        placements.push((o, *holders.choose(rng)?));
    }
    Some(TaskSpec {
        id: 0,
        task_type,
        object,
        target,
        tool,
        goal: goal_text(task_type, object, target),
        scene_id,
        split,
        receptacles,
        placements,
    })
}

/// Deterministic task lists for the three splits, numbered consecutively.
///
/// Every returned task is solved by the oracle within `step_cap` steps.
pub fn generate_tasks(seed: u64, counts: SplitCounts, step_cap: usize) -> Result<Vec<TaskSpec>> {
    let held_out = held_out_combos(seed);
    let mut out = Vec::new();
    for (k, split) in Split::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        let want = counts.get(split);
        let mut attempts = 0usize;
        let mut made = 0;
        while made < want {
            attempts += 1;
            if attempts > 1000 * want.max(1) {
                return Err(EnvError::Data(format!(
                    "could not generate {want} {} tasks",
                    split.name()
                )));
            }
            let Some(mut t) = sample_task(&mut rng, seed, split, &held_out) else {
                continue;
            };
            t.id = out.len();
            match oracle::solve(&t, step_cap) {
                Ok(_) => {
                    out.push(t);
                    made += 1;
                }
                Err(EnvError::Unsolvable { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

pub fn write_tasks_jsonl<W: Write>(tasks: &[TaskSpec], mut w: W) -> Result<()> {
    for t in tasks {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_tasks_jsonl<R: BufRead>(r: R) -> Result<Vec<TaskSpec>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn save_tasks(tasks: &[TaskSpec], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_tasks_jsonl(tasks, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<TaskSpec>> {
    let f = std::fs::File::open(path)?;
    read_tasks_jsonl(std::io::BufReader::new(f))
}
