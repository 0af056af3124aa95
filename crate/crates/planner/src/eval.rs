//! Rollouts, oracle-normalised success rates and metrics files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use minialf::{render, Action, EnvError, Split, TaskSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PlannerError, Result};
use crate::policy::{Agent, OracleAgent, StepView};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task_id: usize,
    pub success: bool,
    pub steps: usize,
    /// Parsed but not executable.
    pub unexecuted: usize,
    pub parse_errors: usize,
    pub transcript: Vec<String>,
    /// Set when the policy itself failed; the episode counts as failed.
    pub error: Option<String>,
}

/// Observe, act, step until `done`, success or the step cap.
///
/// Unparseable actions consume a step and leave the state unchanged, so
/// the agent sees the same observation again with the failed action in its
/// history.
pub fn run_episode(agent: &mut dyn Agent, task: &TaskSpec, step_cap: usize) -> EpisodeResult {
    let mut state = minialf::reset(task, step_cap);
    let mut out = EpisodeResult {
        task_id: task.id,
        success: false,
        steps: 0,
        unexecuted: 0,
        parse_errors: 0,
        transcript: Vec::new(),
        error: None,
    };
    if let Err(e) = agent.reset(task) {
        out.error = Some(e.to_string());
        return out;
    }
    while !state.done && state.steps < step_cap && !state.is_success(task) {
        let obs = render(&state);
        let caption = minialf::caption(&state);
        let affordable: Vec<Action> = state.affordable_actions();
        let text = match agent.act(&StepView {
            observation: &obs,
            caption: &caption,
            affordable: &affordable,
        }) {
            Ok(t) => t,
            Err(e) => {
                out.error = Some(e.to_string());
                break;
            }
        };
        match state.step_text(&text) {
            Ok(true) => {}
            Ok(false) => out.unexecuted += 1,
            Err(EnvError::Parse(_)) => {
                out.parse_errors += 1;
                state.steps += 1;
            }
            Err(e) => {
                out.error = Some(e.to_string());
                out.transcript.push(text);
                break;
            }
        }
        out.transcript.push(text);
    }
    out.steps = state.steps;
    out.success = state.is_success(task);
    out
}

/// Evaluation parallelism: `VP2_THREADS` or the machine's core count.
pub fn eval_threads() -> usize {
    std::env::var("VP2_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every task once; episodes are spread over `threads` workers, each
/// with its own agent, and results come back in task order.
pub fn run_tasks<'a, F>(
    make_agent: F,
    tasks: &[TaskSpec],
    step_cap: usize,
    threads: usize,
) -> Result<Vec<EpisodeResult>>
where
    F: Fn() -> Result<Box<dyn Agent + 'a>> + Sync,
{
    let threads = threads.clamp(1, tasks.len().max(1));
    if threads == 1 {
        let mut agent = make_agent()?;
        return Ok(tasks
            .iter()
            .map(|t| run_episode(agent.as_mut(), t, step_cap))
            .collect());
    }
    let parts: Vec<Result<Vec<(usize, EpisodeResult)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|k| {
                let make_agent = &make_agent;
                s.spawn(move || {
                    let mut agent = make_agent()?;
                    Ok(tasks
                        .iter()
                        .enumerate()
                        .skip(k)
                        .step_by(threads)
                        .map(|(i, t)| (i, run_episode(agent.as_mut(), t, step_cap)))
                        .collect())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut all = Vec::with_capacity(tasks.len());
    for p in parts {
        all.extend(p?);
    }
    all.sort_by_key(|(i, _)| *i);
    Ok(all.into_iter().map(|(_, r)| r).collect())
}

pub fn success_rate(results: &[EpisodeResult]) -> f64 {
    results.iter().filter(|r| r.success).count() as f64 / results.len().max(1) as f64
}

/// Success rate of the scripted expert on `tasks`.
pub fn oracle_rate(tasks: &[TaskSpec], step_cap: usize) -> Result<f64> {
    let results = run_tasks(
        || Ok(Box::new(OracleAgent::new(step_cap))),
        tasks,
        step_cap,
        1,
    )?;
    Ok(success_rate(&results))
}

/// `raw / oracle`; the oracle rate must lie in `(0, 1]`.
pub fn normalize(raw: f64, oracle: f64) -> Result<f64> {
    if !(oracle > 0.0 && oracle <= 1.0) {
        return Err(PlannerError::Data(format!(
            "oracle success rate {oracle} outside (0, 1]"
        )));
    }
    Ok(raw / oracle)
}

pub fn tasks_hash(tasks: &[TaskSpec]) -> Result<String> {
    let mut h = Sha256::new();
    for t in tasks {
        h.update(serde_json::to_vec(t)?);
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub raw: f64,
    pub normalized: f64,
    pub policy_hash: String,
    pub episodes: Vec<EpisodeResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arm: String,
    pub split: Split,
    pub tasks_hash: String,
    pub oracle: f64,
    pub seeds: Vec<SeedRun>,
    /// Demos the policies were trained on.
    pub samples: usize,
    /// Sample-efficiency series this arm belongs to, if any.
    pub series: Option<String>,
}

impl EvalReport {
    pub fn raw(&self) -> f64 {
        mean(self.seeds.iter().map(|s| s.raw))
    }

    pub fn normalized(&self) -> f64 {
        mean(self.seeds.iter().map(|s| s.normalized))
    }

    /// `(min, max)` of the per-seed normalised rates.
    pub fn range(&self) -> (f64, f64) {
        let v: Vec<f64> = self.seeds.iter().map(|s| s.normalized).collect();
        (
            v.iter().copied().fold(f64::INFINITY, f64::min),
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Evaluates one arm on one split: each seed's policy runs every task once.
pub struct SplitEval<'t> {
    pub split: Split,
    pub tasks: &'t [TaskSpec],
    pub step_cap: usize,
    pub threads: usize,
    oracle: f64,
    hash: String,
}

impl<'t> SplitEval<'t> {
    pub fn new(
        split: Split,
        tasks: &'t [TaskSpec],
        step_cap: usize,
        threads: usize,
    ) -> Result<Self> {
        if tasks.iter().any(|t| t.split != split) {
            return Err(PlannerError::Data(format!(
                "task list mixes splits; expected only {}",
                split.name()
            )));
        }
        let oracle = oracle_rate(tasks, step_cap)?;
        normalize(0.0, oracle)?;
        Ok(SplitEval {
            split,
            tasks,
            step_cap,
            threads,
            oracle,
            hash: tasks_hash(tasks)?,
        })
    }

    pub fn oracle(&self) -> f64 {
        self.oracle
    }

    pub fn tasks_hash(&self) -> &str {
        &self.hash
    }

    pub fn run_seed<'a, F>(&self, seed: u64, policy_hash: String, make_agent: F) -> Result<SeedRun>
    where
        F: Fn() -> Result<Box<dyn Agent + 'a>> + Sync,
    {
        let episodes = run_tasks(make_agent, self.tasks, self.step_cap, self.threads)?;
        let raw = success_rate(&episodes);
        Ok(SeedRun {
            seed,
            raw,
            normalized: normalize(raw, self.oracle)?,
            policy_hash,
            episodes,
        })
    }

    pub fn report(
        &self,
        arm: &str,
        seeds: Vec<SeedRun>,
        samples: usize,
        series: Option<String>,
    ) -> EvalReport {
        EvalReport {
            arm: arm.to_string(),
            split: self.split,
            tasks_hash: self.hash.clone(),
            oracle: self.oracle,
            seeds,
            samples,
            series,
        }
    }
}

/// `results.csv`: one row per arm, split and seed.
pub fn results_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("arm,split,seed,raw,oracle,normalized\n");
    for r in reports {
        for sd in &r.seeds {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6}",
                r.arm,
                r.split.name(),
                sd.seed,
                sd.raw,
                r.oracle,
                sd.normalized
            );
        }
    }
    s
}

/// `curves.csv`: normalised success against training-demo count for every
/// sample-efficiency series, averaged over seeds.
pub fn curves_csv(reports: &[EvalReport]) -> String {
    let mut rows: BTreeMap<(String, Split, usize), f64> = BTreeMap::new();
    for r in reports {
        if let Some(series) = &r.series {
            rows.insert((series.clone(), r.split, r.samples), r.normalized());
        }
    }
    let mut s = String::from("series,split,demos,normalized\n");
    for ((series, split, x), y) in rows {
        let _ = writeln!(s, "{series},{},{x},{y:.6}", split.name());
    }
    s
}

/// Plain-text table: arm, ID-normalised, OD-normalised (mean and per-seed).
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut arms: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(&str, Split), &EvalReport> = BTreeMap::new();
    for r in reports {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
        cells.insert((&r.arm, r.split), r);
    }
    let cell = |arm: &str, split: Split| match cells.get(&(arm, split)) {
        Some(r) => {
            let per: Vec<String> = r
                .seeds
                .iter()
                .map(|s| format!("{:.1}", 100.0 * s.normalized))
                .collect();
            format!("{:>5.1} [{}]", 100.0 * r.normalized(), per.join(" "))
        }
        None => "-".to_string(),
    };
    let width = arms.iter().map(|a| a.len()).max().unwrap_or(3).max(3);
    let mut s = format!(
        "{:<width$}  {:<20}  {:<20}\n",
        "arm", "ID-normalized", "OD-normalized"
    );
    for a in arms {
        let _ = writeln!(
            s,
            "{a:<width$}  {:<20}  {:<20}",
            cell(a, Split::EvalId),
            cell(a, Split::EvalOd)
        );
    }
    s
}

/// Writes `results.csv`, `curves.csv`, `summary.txt` and `reports.json`.
pub fn emit_metrics(reports: &[EvalReport], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("results.csv"), results_csv(reports))?;
    std::fs::write(dir.join("curves.csv"), curves_csv(reports))?;
    std::fs::write(dir.join("summary.txt"), summary_table(reports))?;
    std::fs::write(
        dir.join("reports.json"),
        serde_json::to_string_pretty(reports)?,
    )?;
    Ok(())
}

pub fn load_reports(dir: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(
        dir.as_ref().join("reports.json"),
    )?)?)
}
