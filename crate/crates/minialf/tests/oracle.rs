use minialf::oracle::{
    load_demos, make_affordance_examples, save_demos, subsample_examples, verify_demo, Proposer,
};
use minialf::*;
use std::collections::BTreeSet;

fn demos() -> Vec<Demonstration> {
    let tasks = generate_tasks(
        5,
        SplitCounts {
            train: 60,
            eval_id: 10,
            eval_od: 10,
        },
        DEFAULT_STEP_CAP,
    )
    .unwrap();
    generate_demos(&tasks, DEFAULT_STEP_CAP).unwrap()
}

fn state_at(d: &Demonstration, step: usize) -> WorldState {
    let mut s = reset(&d.task, 100);
    for st in &d.steps[..step] {
        s.step_text(&st.action).unwrap();
    }
    s
}

#[test]
fn demos_replay_bit_exactly_and_end_in_done() {
    let ds = demos();
    assert_eq!(ds, demos());
    for d in &ds {
        verify_demo(d, DEFAULT_STEP_CAP).unwrap();
        assert!(d.success);
        assert_eq!(d.steps.last().unwrap().action, "done");
        for s in &d.steps {
            assert!(s.affordable.contains(&s.action));
        }
    }
}

#[test]
fn tampered_demo_fails_verification() {
    let mut d = demos().remove(0);
    d.steps[1].observation.pixels_mut()[0] ^= 1;
    assert!(verify_demo(&d, DEFAULT_STEP_CAP).is_err());
}

#[test]
fn demo_files_round_trip_with_manifest() {
    let ds = demos();
    let dir = tempfile::tempdir().unwrap();
    let m = save_demos(&ds, 5, DEFAULT_STEP_CAP, dir.path()).unwrap();
    assert_eq!(m.counts.iter().map(|c| c.1).sum::<usize>(), ds.len());
    assert_eq!(m.sha256.len(), 64);
    let (back, m2) = load_demos(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(m, m2);
    let p = dir.path().join("demos.jsonl");
    let mut text = std::fs::read_to_string(&p).unwrap();
    text.push('\n');
    std::fs::write(&p, text).unwrap();
    assert!(load_demos(dir.path()).is_err());
}

#[test]
fn heuristic_affordance_labels_agree_with_environment() {
    let ds = demos();
    let ex = make_affordance_examples(&ds, 3, NegativeSource::Heuristic, None, 0).unwrap();
    let mut closed_take = false;
    let mut pos = 0;
    let mut neg = 0;
    for e in &ex {
        let s = state_at(&ds[e.demo], e.step);
        let mut c = s.clone();
        assert_eq!(c.step_text(&e.action).unwrap(), e.valid, "{}", e.action);
        if e.valid {
            pos += 1;
        } else {
            neg += 1;
            if let Action::Take(_, r) = Action::parse(&e.action).unwrap() {
                let i = s.recep_index(r).unwrap();
                closed_take |= !s.contents_visible(i);
            }
        }
    }
    let total_afford: usize = ds
        .iter()
        .flat_map(|d| &d.steps)
        .map(|s| s.affordable.len())
        .sum();
    assert_eq!(pos, total_afford);
    assert!(neg > 2 * pos && neg <= 3 * pos);
    assert!(closed_take);
    assert_eq!(
        ex,
        make_affordance_examples(&ds, 3, NegativeSource::Heuristic, None, 0).unwrap()
    );
}

#[test]
fn planner_negatives_need_a_planner() {
    let ds = demos();
    assert!(make_affordance_examples(&ds, 3, NegativeSource::PlannerLikelihood, None, 0).is_err());
    let propose = |d: &Demonstration, _s: usize| {
        vec![
            format!("take {} from fridge", d.task.object.name()),
            "done".to_string(),
            "go to nowhere".to_string(),
        ]
    };
    let proposer: &Proposer<'_> = &propose;
    let ex = make_affordance_examples(&ds, 3, NegativeSource::PlannerLikelihood, Some(proposer), 0)
        .unwrap();
    for e in ex.iter().filter(|e| !e.valid) {
        assert!(e.action.starts_with("take "));
        let mut s = state_at(&ds[e.demo], e.step);
        assert!(!s.step_text(&e.action).unwrap());
    }
}

#[test]
fn subsampling_keeps_ratio() {
    let ds = demos();
    let ex = make_affordance_examples(&ds, 3, NegativeSource::Heuristic, None, 0).unwrap();
    let sub = subsample_examples(&ex, 400, 1);
    assert_eq!(sub.len(), 400);
    let pos = sub.iter().filter(|e| e.valid).count();
    let frac = ex.iter().filter(|e| e.valid).count() as f64 / ex.len() as f64;
    assert!((pos as f64 / 400.0 - frac).abs() < 0.01);
    let uniq: BTreeSet<_> = sub
        .iter()
        .map(|e| (e.demo, e.step, e.action.clone()))
        .collect();
    assert_eq!(uniq.len(), 400);
}

#[test]
fn pretraining_corpus_is_in_vocabulary() {
    let corpus = corpus::pretraining_corpus(0, 300).unwrap();
    assert_eq!(corpus.len(), 300);
    assert_eq!(corpus, corpus::pretraining_corpus(0, 300).unwrap());
    let vocab = vp2_core::vocab::Vocab::build(&corpus::lexicon()).unwrap();
    let from_corpus = vp2_core::vocab::Vocab::build(&corpus).unwrap();
    for p in &corpus {
        assert!(!vocab.encode(p).contains(&vp2_core::vocab::UNK), "{p}");
        assert!(p.ends_with("done <eos>"));
        assert!(!p.chars().any(|c| c.is_ascii_digit()));
    }
    assert!(from_corpus.len() <= vocab.len());
}
