mod common;

use minialf::{generate_tasks, Split, SplitCounts, TaskSpec, DEFAULT_STEP_CAP};
use vp2_planner::eval::{
    curves_csv, emit_metrics, load_reports, normalize, oracle_rate, results_csv, run_tasks,
    success_rate, summary_table, EvalReport, SplitEval,
};
use vp2_planner::policy::{Agent, OracleAgent, PolicyKind, RandomAgent};
use vp2_planner::ObsMode;

fn split(tasks: &[TaskSpec], s: Split) -> Vec<TaskSpec> {
    tasks.iter().filter(|t| t.split == s).cloned().collect()
}

fn default_tasks() -> Vec<TaskSpec> {
    generate_tasks(0, SplitCounts::default(), DEFAULT_STEP_CAP).unwrap()
}

#[test]
fn normalisation_divides_by_the_oracle_rate() {
    assert!((normalize(0.4, 0.8).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(normalize(0.3, 1.0).unwrap(), 0.3);
    assert!(normalize(0.1, 0.0).is_err());
    assert!(normalize(0.1, 1.5).is_err());
    assert!(normalize(0.1, f64::NAN).is_err());
}

#[test]
fn oracle_agent_solves_every_eval_task() {
    let tasks = default_tasks();
    for s in [Split::EvalId, Split::EvalOd] {
        let t = split(&tasks, s);
        let ev = SplitEval::new(s, &t, DEFAULT_STEP_CAP, 2).unwrap();
        assert_eq!(ev.oracle(), 1.0);
        let run = ev
            .run_seed(0, "oracle".into(), || {
                Ok(Box::new(OracleAgent::new(DEFAULT_STEP_CAP)) as Box<dyn Agent>)
            })
            .unwrap();
        assert_eq!(run.raw, 1.0);
        assert_eq!(run.normalized, 1.0);
        assert_eq!(run.episodes.len(), t.len());
    }
}

#[test]
fn random_agent_rarely_succeeds() {
    let tasks = split(&default_tasks(), Split::EvalId);
    let results = run_tasks(
        || Ok(Box::new(RandomAgent::new(3)) as Box<dyn Agent>),
        &tasks,
        DEFAULT_STEP_CAP,
        1,
    )
    .unwrap();
    let rate = success_rate(&results);
    assert!(rate < 0.10, "random agent success {rate}");
}

#[test]
fn unsolvable_tasks_lower_the_oracle_rate() {
    let tasks = split(&default_tasks(), Split::EvalId);
    // a tight step cap leaves the expert unable to finish the longer tasks
    let lengths: Vec<usize> = tasks
        .iter()
        .map(|t| minialf::solve(t, DEFAULT_STEP_CAP).unwrap().len())
        .collect();
    let cap = {
        let mut l = lengths.clone();
        l.sort_unstable();
        l[l.len() / 2]
    };
    let rate = oracle_rate(&tasks, cap).unwrap();
    assert!(rate > 0.0 && rate < 1.0, "{rate}");
    let ev = SplitEval::new(Split::EvalId, &tasks, cap, 1).unwrap();
    let run = ev
        .run_seed(0, String::new(), || {
            Ok(Box::new(OracleAgent::new(cap)) as Box<dyn Agent>)
        })
        .unwrap();
    assert_eq!(run.raw, rate);
    assert!((run.normalized - 1.0).abs() < 1e-12);
    // nothing solvable: the split is rejected rather than divided by zero
    assert!(SplitEval::new(Split::EvalId, &tasks, 1, 1).is_err());
}

#[test]
fn splits_are_checked_and_disjoint() {
    let tasks = default_tasks();
    let id = split(&tasks, Split::EvalId);
    let od = split(&tasks, Split::EvalOd);
    let mixed: Vec<TaskSpec> = id.iter().chain(&od).cloned().collect();
    assert!(SplitEval::new(Split::EvalId, &mixed, DEFAULT_STEP_CAP, 1).is_err());
    let a = SplitEval::new(Split::EvalId, &id, DEFAULT_STEP_CAP, 1).unwrap();
    let b = SplitEval::new(Split::EvalOd, &od, DEFAULT_STEP_CAP, 1).unwrap();
    assert_ne!(a.tasks_hash(), b.tasks_hash());
    assert!(id.iter().all(|t| od.iter().all(|u| u.id != t.id)));
    assert_eq!((id.len(), od.len()), (60, 60));
}

#[test]
fn parallel_evaluation_matches_serial() {
    let tasks = split(&default_tasks(), Split::EvalOd);
    let make = || Ok(Box::new(RandomAgent::new(9)) as Box<dyn Agent>);
    let one = run_tasks(make, &tasks[..12], DEFAULT_STEP_CAP, 1).unwrap();
    let ids: Vec<usize> = one.iter().map(|r| r.task_id).collect();
    let three = run_tasks(make, &tasks[..12], DEFAULT_STEP_CAP, 3).unwrap();
    assert_eq!(ids, three.iter().map(|r| r.task_id).collect::<Vec<_>>());
}

/// Two arms x two splits x two seeds of a tiny untrained planner.
fn reports() -> Vec<EvalReport> {
    let f = common::micro::<f64>();
    let all = generate_tasks(
        0,
        SplitCounts {
            train: 3,
            eval_id: 3,
            eval_od: 3,
        },
        DEFAULT_STEP_CAP,
    )
    .unwrap();
    let mut out = Vec::new();
    for (arm, obs, m, series) in [
        ("vp2", ObsMode::Visual, 2, Some("pretrained".to_string())),
        ("ignore", ObsMode::None, 0, None),
    ] {
        for s in [Split::EvalId, Split::EvalOd] {
            let tasks = split(&all, s);
            let ev = SplitEval::new(s, &tasks, DEFAULT_STEP_CAP, 1).unwrap();
            let mut runs = Vec::new();
            for seed in [0, 1] {
                let (spec, store) = common::planner(&f, obs, m, &Default::default(), 480, seed);
                let kind = if m > 0 {
                    PolicyKind::Vp2
                } else {
                    PolicyKind::Ignore
                };
                let b = common::bundle(&f, kind, spec, store);
                let before = b.params_hash();
                runs.push(
                    ev.run_seed(seed, b.manifest_hash().unwrap(), || b.agent())
                        .unwrap(),
                );
                assert_eq!(b.params_hash(), before, "evaluation changed parameters");
            }
            out.push(ev.report(arm, runs, 3, series.clone()));
        }
    }
    out
}

#[test]
fn metrics_files_have_one_row_per_arm_split_and_seed() {
    let reports = reports();
    let results = results_csv(&reports);
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(lines[0], "arm,split,seed,raw,oracle,normalized");
    assert_eq!(lines.len(), 1 + 2 * 2 * 2);
    let curves = curves_csv(&reports);
    // only the arm in a series appears, once per split, at x = its demo count
    assert_eq!(curves.lines().count(), 1 + 2);
    assert!(curves
        .lines()
        .skip(1)
        .all(|l| l.starts_with("pretrained,") && l.contains(",3,")));
    let table = summary_table(&reports);
    assert!(table.starts_with("arm"));
    assert!(table.contains("ID-normalized") && table.contains("OD-normalized"));
    assert_eq!(table.lines().count(), 3);
    for r in &reports {
        let (lo, hi) = r.range();
        assert!(lo <= r.normalized() && r.normalized() <= hi);
        assert_eq!(r.seeds.len(), 2);
    }
}

#[test]
fn emitting_twice_is_byte_identical_and_round_trips() {
    let reports = reports();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    emit_metrics(&reports, &a).unwrap();
    emit_metrics(&reports, &b).unwrap();
    for f in ["results.csv", "curves.csv", "summary.txt", "reports.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(load_reports(&a).unwrap(), reports);
    // a second evaluation of the same policies gives the same bytes
    let c = tmp.path().join("c");
    emit_metrics(&self::reports(), &c).unwrap();
    assert_eq!(
        std::fs::read(a.join("results.csv")).unwrap(),
        std::fs::read(c.join("results.csv")).unwrap()
    );
}

#[test]
fn unwritable_output_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain-file");
    std::fs::write(&file, "x").unwrap();
    assert!(emit_metrics(&[], file.join("metrics")).is_err());
    assert!(load_reports(tmp.path().join("missing")).is_err());
}
