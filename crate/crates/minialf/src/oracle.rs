//! Scripted oracle, demonstrations and affordance-example generation.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vp2_core::vision::{Observation, IMG_BYTES};

use crate::error::{EnvError, Result};
use crate::render::{caption, render};
use crate::tasks::TaskSpec;
use crate::types::{Recep, Split, TaskType};
use crate::world::{Action, WorldState};

struct Planner<'a> {
    task: &'a TaskSpec,
    state: WorldState,
    plan: Vec<Action>,
}

impl Planner<'_> {
    fn exec(&mut self, a: Action) -> Result<()> {
        if !self.state.step(a)? {
            return Err(EnvError::Unsolvable {
                task: self.task.id,
                why: format!("oracle action `{a}` not executable"),
            });
        }
        self.plan.push(a);
        Ok(())
    }

    fn go(&mut self, r: Recep) -> Result<()> {
        let idx = self
            .state
            .recep_index(r)
            .ok_or_else(|| EnvError::Unsolvable {
                task: self.task.id,
                why: format!("scene has no {}", r.name()),
            })?;
        if self.state.agent != Some(idx) {
            self.exec(Action::GoTo(r))?;
        }
        Ok(())
    }

    /// Brings one instance of the task object into the agent's hand.
    fn acquire(&mut self) -> Result<()> {
        let o = self.task.object;
        let skip = self.task.target.and_then(|t| self.state.recep_index(t));
        let visible = (0..self.state.receptacles.len()).find(|&i| {
            Some(i) != skip
                && self.state.contents_visible(i)
                && self
                    .state
                    .contents(i)
                    .any(|k| self.state.objects[k].kind == o)
        });
        if let Some(i) = visible {
            let r = self.state.receptacles[i].kind;
            self.go(r)?;
            return self.exec(Action::Take(o, r));
        }
        for i in 0..self.state.receptacles.len() {
            if Some(i) == skip || self.state.contents_visible(i) {
                continue;
            }
            let r = self.state.receptacles[i].kind;
            self.go(r)?;
            self.exec(Action::Open(r))?;
            if self
                .state
                .contents(i)
                .any(|k| self.state.objects[k].kind == o)
            {
                return self.exec(Action::Take(o, r));
            }
        }
        Err(EnvError::Unsolvable {
            task: self.task.id,
            why: format!("no reachable {}", o.name()),
        })
    }

    fn place(&mut self) -> Result<()> {
        let t = self.task.target.expect("placement tasks have a target");
        self.go(t)?;
        let idx = self.state.recep_index(t).expect("visited");
        if !self.state.contents_visible(idx) {
            self.exec(Action::Open(t))?;
        }
        self.exec(Action::Put(self.task.object, t))
    }
}

/// Oracle plan for `task`, ending in `done`. Fails when the plan needs more
/// than `step_cap` steps or is not executable.
pub fn solve(task: &TaskSpec, step_cap: usize) -> Result<Vec<Action>> {
    let mut p = Planner {
        task,
        state: WorldState::from_task(task, usize::MAX),
        plan: Vec::new(),
    };
    let o = task.object;
    for _ in 0..task.task_type.instances() {
        p.acquire()?;
        match task.task_type {
            TaskType::HeatPlace | TaskType::CoolPlace | TaskType::CleanPlace => {
                let tool = task.tool.expect("tool task");
                p.go(tool)?;
                p.exec(match task.task_type {
                    TaskType::HeatPlace => Action::Heat(o, tool),
                    TaskType::CoolPlace => Action::Cool(o, tool),
                    _ => Action::Clean(o, tool),
                })?;
                p.place()?;
            }
            TaskType::ExamineInLight => {
                p.go(Recep::Desklamp)?;
                p.exec(Action::Use(Recep::Desklamp))?;
            }
            TaskType::PickPlace | TaskType::PickTwoPlace => p.place()?,
        }
    }
    if !p.state.is_success(task) {
        return Err(EnvError::Unsolvable {
            task: task.id,
            why: "oracle plan does not reach the goal".into(),
        });
    }
    p.exec(Action::Done)?;
    if p.plan.len() > step_cap {
        return Err(EnvError::Unsolvable {
            task: task.id,
            why: format!("plan needs {} steps", p.plan.len()),
        });
    }
    Ok(p.plan)
}

mod obs_hex {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};
    use vp2_core::vision::Observation;

    pub fn serialize<S: Serializer>(o: &Observation, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(o.pixels()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Observation, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(text).map_err(D::Error::custom)?;
        Observation::new(bytes).map_err(D::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    #[serde(with = "obs_hex")]
    pub observation: Observation,
    pub caption: String,
    pub action: String,
    /// Executable actions at this observation, in grammar order.
    pub affordable: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub task: TaskSpec,
    pub steps: Vec<DemoStep>,
    pub success: bool,
}

impl Demonstration {
    pub fn goal(&self) -> &str {
        &self.task.goal
    }

    pub fn actions(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().map(|s| s.action.as_str())
    }
}

/// Runs the oracle and records every step.
pub fn demonstrate(task: &TaskSpec, step_cap: usize) -> Result<Demonstration> {
    let plan = solve(task, step_cap)?;
    let mut state = WorldState::from_task(task, step_cap);
    let mut steps = Vec::with_capacity(plan.len());
    for a in plan {
        steps.push(DemoStep {
            observation: render(&state),
            caption: caption(&state),
            action: a.to_string(),
            affordable: state
                .affordable_actions()
                .iter()
                .map(ToString::to_string)
                .collect(),
        });
        state.step(a)?;
    }
    Ok(Demonstration {
        task: task.clone(),
        steps,
        success: state.is_success(task),
    })
}

/// Replays a demonstration and checks every recorded observation and the
/// final success.
pub fn verify_demo(demo: &Demonstration, step_cap: usize) -> Result<()> {
    let mut state = WorldState::from_task(&demo.task, step_cap);
    for (t, s) in demo.steps.iter().enumerate() {
        if render(&state) != s.observation {
            return Err(EnvError::Data(format!(
                "task {}: observation {t} differs on replay",
                demo.task.id
            )));
        }
        if !state.step_text(&s.action)? {
            return Err(EnvError::Data(format!(
                "task {}: action {t} not executable",
                demo.task.id
            )));
        }
    }
    if !state.is_success(&demo.task) {
        return Err(EnvError::Data(format!(
            "task {}: replay does not succeed",
            demo.task.id
        )));
    }
    Ok(())
}

pub fn generate_demos(tasks: &[TaskSpec], step_cap: usize) -> Result<Vec<Demonstration>> {
    tasks.iter().map(|t| demonstrate(t, step_cap)).collect()
}

pub fn write_demos_jsonl<W: Write>(demos: &[Demonstration], mut w: W) -> Result<()> {
    for d in demos {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_demos_jsonl<R: BufRead>(r: R) -> Result<Vec<Demonstration>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoManifest {
    pub seed: u64,
    pub step_cap: usize,
    pub image_bytes: usize,
    pub counts: Vec<(Split, usize)>,
    pub sha256: String,
}

/// Writes `demos.jsonl` and `manifest.json` into `dir`.
pub fn save_demos(
    demos: &[Demonstration],
    seed: u64,
    step_cap: usize,
    dir: impl AsRef<Path>,
) -> Result<DemoManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    write_demos_jsonl(demos, &mut buf)?;
    let counts = Split::ALL
        .iter()
        .map(|&s| (s, demos.iter().filter(|d| d.task.split == s).count()))
        .collect();
    let manifest = DemoManifest {
        seed,
        step_cap,
        image_bytes: IMG_BYTES,
        counts,
        sha256: hex::encode(Sha256::digest(&buf)),
    };
    std::fs::write(dir.join("demos.jsonl"), &buf)?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Loads a directory written by [`save_demos`], checking the content hash.
pub fn load_demos(dir: impl AsRef<Path>) -> Result<(Vec<Demonstration>, DemoManifest)> {
    let dir = dir.as_ref();
    let manifest: DemoManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let buf = std::fs::read(dir.join("demos.jsonl"))?;
    let hash = hex::encode(Sha256::digest(&buf));
    if hash != manifest.sha256 {
        return Err(EnvError::Data(format!(
            "demos.jsonl hash {hash} does not match manifest"
        )));
    }
    Ok((read_demos_jsonl(buf.as_slice())?, manifest))
}

/// How negative affordance examples are proposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeSource {
    /// Grammar-valid actions that plausibly tempt a planner in this state.
    Heuristic,
    /// Candidates ranked by a planner; requires a proposal function.
    PlannerLikelihood,
}

/// One labelled `(observation, action)` pair; the observation is
/// `demos[demo].steps[step].observation`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffordanceExample {
    pub demo: usize,
    pub step: usize,
    pub action: String,
    pub valid: bool,
}

/// Proposes candidate actions for `demos[demo]` at step `step`.
pub type Proposer<'a> = dyn Fn(&Demonstration, usize) -> Vec<String> + 'a;

fn heuristic_candidates(state: &WorldState, task: &TaskSpec) -> Vec<Action> {
    let mut objs: BTreeSet<_> = state.objects.iter().map(|o| o.kind).collect();
    objs.insert(task.object);
    let mut out = Vec::new();
    for r in state.receptacles.iter().map(|r| r.kind) {
        out.extend([
            Action::GoTo(r),
            Action::Open(r),
            Action::Close(r),
            Action::Use(r),
        ]);
        for &o in &objs {
            out.extend([Action::Take(o, r), Action::Put(o, r)]);
        }
        let o = task.object;
        out.extend([Action::Heat(o, r), Action::Cool(o, r), Action::Clean(o, r)]);
    }
    out.retain(|&a| !state.is_affordable(a));
    out
}

/// Labelled affordance data: every demonstrated state contributes all its
/// executable actions as positives, and `negatives_per_positive` times as
/// many non-executable actions as negatives (fewer if the pool runs short).
pub fn make_affordance_examples(
    demos: &[Demonstration],
    negatives_per_positive: usize,
    source: NegativeSource,
    proposer: Option<&Proposer<'_>>,
    seed: u64,
) -> Result<Vec<AffordanceExample>> {
    if source == NegativeSource::PlannerLikelihood && proposer.is_none() {
        return Err(EnvError::Data(
            "planner-likelihood negatives need a planner".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (di, demo) in demos.iter().enumerate() {
        let mut state = WorldState::from_task(&demo.task, usize::MAX);
        for (si, step) in demo.steps.iter().enumerate() {
            for a in &step.affordable {
                out.push(AffordanceExample {
                    demo: di,
                    step: si,
                    action: a.clone(),
                    valid: true,
                });
            }
            let mut pool: Vec<String> = match source {
                NegativeSource::Heuristic => heuristic_candidates(&state, &demo.task)
                    .iter()
                    .map(ToString::to_string)
                    .collect(),
                NegativeSource::PlannerLikelihood => {
                    let proposed = proposer.expect("checked above")(demo, si);
                    let mut seen = BTreeSet::new();
                    proposed
                        .into_iter()
                        .filter(|a| {
                            Action::parse(a).is_ok_and(|x| !state.is_affordable(x))
                                && seen.insert(a.clone())
                        })
                        .collect()
                }
            };
            let want = negatives_per_positive * step.affordable.len();
            if source == NegativeSource::Heuristic {
                pool.shuffle(&mut rng);
            }
            for a in pool.into_iter().take(want) {
                out.push(AffordanceExample {
                    demo: di,
                    step: si,
                    action: a,
                    valid: false,
                });
            }
            state.step_text(&step.action)?;
        }
    }
    Ok(out)
}

/// Random subset of `n` examples keeping the positive/negative ratio.
pub fn subsample_examples(
    examples: &[AffordanceExample],
    n: usize,
    seed: u64,
) -> Vec<AffordanceExample> {
    if n >= examples.len() {
        return examples.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pos, neg): (Vec<_>, Vec<_>) = examples.iter().cloned().partition(|e| e.valid);
    let n_pos = (n * pos.len()).div_ceil(examples.len());
    let mut out: Vec<_> = pos.choose_multiple(&mut rng, n_pos).cloned().collect();
    out.extend(neg.choose_multiple(&mut rng, n - n_pos).cloned());
    out.sort_by_key(|e| (e.demo, e.step));
    out
}
