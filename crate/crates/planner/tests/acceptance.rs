//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Criteria 1-7 are properties and decide the exit status. Criteria 8-15
//! compare trained policies; each line carries both arms' numbers and a
//! failure is reported without failing the run. Trained results are cached
//! under the cargo target directory keyed by a configuration hash; set
//! `VP2_ACCEPTANCE_FRESH=1` to recompute them, or
//! `VP2_ACCEPTANCE_PROPERTIES_ONLY=1` to stop after the properties.

mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use minialf::oracle::verify_demo;
use minialf::{
    caption, generate_demos, generate_tasks, render, reset, solve, Action, Split, SplitCounts,
    TaskSpec, DEFAULT_STEP_CAP,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vp2_core::context::{trim_context, ContextSpec, Piece, SegmentTag, SequenceBuilder};
use vp2_core::gradcheck::{check_primitive, Prim};
use vp2_core::lm::{beam_search, LmConfig, TransformerLm};
use vp2_core::vision::VisualBackbone;
use vp2_core::vocab::EOS;
use vp2_core::{Graph64, ParamStore, ParamStore64};
use vp2_planner::assets::Assets;
use vp2_planner::data::{demo_features, encode_strict};
use vp2_planner::eval::{emit_metrics, summary_table, SplitEval};
use vp2_planner::model::ObsInput;
use vp2_planner::policy::{AffordanceMode, Agent, PolicyBundle, PolicyKind, SayCanAgent, StepView};
use vp2_planner::saycan::{saycan_select, Candidate};
use vp2_planner::suite::{run_suite, SuiteConfig, SuiteOutcome};
use vp2_planner::{
    build_vocab, train_planner, AuxConfig, Dataset, Decoding, ObsMode, PlannerSpec, TrainConfig,
};

const GRAD_TOL: f64 = 1e-4;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

impl Line {
    fn print(&self) {
        let status = if self.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {:>2} {status} {}: {}",
            self.id, self.name, self.detail
        );
    }
}

fn property(id: usize, name: &'static str, check: impl FnOnce() -> (bool, String)) -> Line {
    let t = Instant::now();
    let (pass, detail) = check();
    let line = Line {
        id,
        name,
        pass,
        detail: format!("{detail} [{:.1}s]", t.elapsed().as_secs_f64()),
    };
    line.print();
    line
}

fn tiny_lm(vocab: usize, embed_dim: usize, seed: u64) -> (TransformerLm, ParamStore64) {
    let lm = TransformerLm::new(LmConfig {
        vocab_size: vocab,
        embed_dim,
        n_layers: 2,
        n_heads: 4,
        max_positions: 64,
        dropout: 0.0,
    })
    .unwrap();
    let mut st = ParamStore::new();
    lm.init(&mut st, &mut ChaCha8Rng::seed_from_u64(seed));
    (lm, st)
}

fn gradients() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = (0.0f64, Prim::MatMul);
    for round in 0..5u64 {
        for (i, p) in Prim::ALL.iter().enumerate() {
            let e = check_primitive(*p, &mut rng, round * 100 + i as u64);
            if e > worst.0 {
                worst = (e, *p);
            }
        }
    }
    let losses = [
        ("action+aux", common::planner_objective_error()),
        ("action trimmed", common::trimmed_objective_error()),
        ("caption", common::caption_objective_error()),
        ("affordance+", common::affordance_objective_error(true)),
        ("affordance-", common::affordance_objective_error(false)),
    ];
    let pass = worst.0 < GRAD_TOL && losses.iter().all(|l| l.1 < GRAD_TOL);
    let parts: Vec<String> = losses.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    (
        pass,
        format!(
            "worst of {} primitives {:.1e} ({:?}); {} (tol {GRAD_TOL:.0e})",
            Prim::ALL.len(),
            worst.0,
            worst.1,
            parts.join(", ")
        ),
    )
}

fn token_path_equivalence() -> (bool, String) {
    let (lm, st) = tiny_lm(30, 16, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut equal = 0;
    for _ in 0..100 {
        let len = rng.random_range(1..40);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..30)).collect();
        let mut g = Graph64::new();
        let a = lm.forward_ids(&mut g, &st, &ids).unwrap();
        let emb = lm.embed_tokens(&mut g, &st, &ids).unwrap();
        let detached = g.constant(g.value(emb).clone());
        let b = lm.forward(&mut g, &st, detached, None).unwrap();
        equal += usize::from(g.value(a).data() == g.value(b).data());
    }
    (equal == 100, format!("{equal}/100 sequences bit-identical"))
}

fn causality() -> (bool, String) {
    let (lm, st) = tiny_lm(30, 16, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ok = 0;
    for _ in 0..100 {
        let len = rng.random_range(2..40);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..30)).collect();
        let cut = rng.random_range(1..len);
        let mut other = ids.clone();
        for t in other.iter_mut().skip(cut) {
            *t = rng.random_range(0..30);
        }
        let mut g = Graph64::new();
        let a = lm.forward_ids(&mut g, &st, &ids).unwrap();
        let b = lm.forward_ids(&mut g, &st, &other).unwrap();
        ok += usize::from((0..cut).all(|t| g.value(a).row(t) == g.value(b).row(t)));
    }
    (
        ok == 100,
        format!("{ok}/100 perturbed suffixes left the prefix logits unchanged"),
    )
}

fn environment() -> (bool, String) {
    let counts = SplitCounts::default();
    let tasks = generate_tasks(0, counts, DEFAULT_STEP_CAP).unwrap();
    let grammar = Action::grammar();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut states, mut consistent) = (0, 0);
    while states < 200 {
        let t = tasks.choose(&mut rng).unwrap();
        let mut s = reset(t, 1000);
        for _ in 0..rng.random_range(0..12) {
            let acts: Vec<Action> = s
                .affordable_actions()
                .into_iter()
                .filter(|&a| a != Action::Done)
                .collect();
            s.step(*acts.choose(&mut rng).unwrap()).unwrap();
        }
        let afford: BTreeSet<Action> = s.affordable_actions().into_iter().collect();
        let mut executed = BTreeSet::new();
        let mut leaked = false;
        for &a in &grammar {
            let mut c = s.clone();
            if c.step(a).unwrap() {
                executed.insert(a);
            } else {
                leaked |= !c.same_modulo_steps(&s);
            }
        }
        states += 1;
        consistent += usize::from(afford == executed && !leaked);
    }
    let train: Vec<TaskSpec> = tasks
        .iter()
        .filter(|t| t.split == Split::Train)
        .cloned()
        .collect();
    let demos = generate_demos(&train, DEFAULT_STEP_CAP).unwrap();
    let replayed = demos
        .iter()
        .filter(|d| verify_demo(d, DEFAULT_STEP_CAP).is_ok())
        .count();
    let solved = tasks
        .iter()
        .filter(|t| {
            solve(t, DEFAULT_STEP_CAP).is_ok_and(|plan| {
                let mut s = reset(t, DEFAULT_STEP_CAP);
                plan.iter().all(|&a| s.step(a).unwrap_or(false)) && s.is_success(t)
            })
        })
        .count();
    (
        consistent == states && replayed == demos.len() && solved == tasks.len(),
        format!(
            "{consistent}/{states} states match the executable set; {replayed}/{} demos replay bit-exactly; oracle solves {solved}/{} tasks",
            demos.len(),
            tasks.len()
        ),
    )
}

fn random_spec(rng: &mut ChaCha8Rng) -> ContextSpec {
    let m = rng.random_range(0..6);
    let obs = |step: usize| Piece::Tokens(vec![5 + (step % 5) as u32; m]);
    let pairs = rng.random_range(0..12);
    let task = rng.random_range(0..4);
    ContextSpec {
        task: (task > 0).then(|| Piece::Tokens(vec![19; task])),
        goal: vec![10; rng.random_range(1..8)],
        history: (1..=pairs)
            .map(|i| (obs(i), vec![11 + (i % 5) as u32; rng.random_range(1..6)]))
            .collect(),
        current: obs(pairs + 1),
        first_step: 1,
        max_embeddings: 10_000,
    }
}

fn context_assembly() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let sep = |n: usize| if n > 0 { n + 1 } else { 0 };
    let mut good = 0;
    for _ in 0..1000 {
        let spec = random_spec(&mut rng);
        let expected = spec.task.as_ref().map_or(0, |t| sep(t.len()))
            + sep(spec.goal.len())
            + spec
                .history
                .iter()
                .map(|(o, a)| sep(o.len()) + sep(a.len()))
                .sum::<usize>()
            + sep(spec.current.len());
        let mut b = SequenceBuilder::new();
        spec.push_into(&mut b);
        let mut pos = 0;
        let mut tiled = true;
        let mut order = Vec::new();
        for &(tag, start, n) in b.tags() {
            tiled &= start == pos;
            pos += n;
            if tag != SegmentTag::Separator {
                order.push(tag);
            }
        }
        let mut want = Vec::new();
        if spec.task.is_some() {
            want.push(SegmentTag::Task);
        }
        want.push(SegmentTag::Goal);
        for i in 1..=spec.history.len() {
            if !spec.history[i - 1].0.is_empty() {
                want.push(SegmentTag::Observation(i));
            }
            want.push(SegmentTag::Action(i));
        }
        if !spec.current.is_empty() {
            want.push(SegmentTag::Observation(spec.history.len() + 1));
        }
        let budget = spec.min_viable_len() + rng.random_range(0..80);
        let trimmed = trim_context(&spec, budget).unwrap();
        let dropped = trimmed.first_step - spec.first_step;
        let trim_ok = trimmed.len() <= budget
            && trimmed.history[..] == spec.history[dropped..]
            && trim_context(&trimmed, budget).unwrap() == trimmed;
        let ok = spec.len() == expected && b.len() == expected && tiled && order == want && trim_ok;
        good += usize::from(ok);
    }
    (
        good == 1000,
        format!("{good}/1000 random contexts: length, segment order and idempotent trimming"),
    )
}

/// Product-score argmax over the whole grammar; executable actions have
/// affordance 1, the rest 0. Ties go to the lexicographically smallest
/// action; no positive score means `done`.
fn brute_force_choice(
    session: &vp2_planner::Session<'_, f64>,
    vocab: &vp2_core::vocab::Vocab,
    affordable: &[Action],
) -> String {
    let mut best: Option<(f64, String)> = None;
    for a in Action::grammar() {
        let p_aff = if affordable.contains(&a) { 1.0 } else { 0.0 };
        if p_aff == 0.0 {
            continue;
        }
        let text = a.to_string();
        let p = session
            .score(&encode_strict(vocab, &text).unwrap())
            .unwrap()
            .exp()
            * p_aff;
        let better = match &best {
            None => p > 0.0,
            Some((bp, bt)) => p > *bp || (p == *bp && text < *bt),
        };
        if better {
            best = Some((p, text));
        }
    }
    best.map_or_else(|| "done".to_string(), |b| b.1)
}

fn saycan() -> (bool, String) {
    let f = common::fixture::<f64>(
        SplitCounts {
            train: 24,
            eval_id: 1,
            eval_od: 1,
        },
        |v| LmConfig {
            vocab_size: v,
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            max_positions: 512,
            dropout: 0.0,
        },
        [4, 4, 6],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (spec, store) = PlannerSpec::instantiate(
        &f.lm,
        &f.lm_store,
        ObsMode::None,
        None,
        0,
        &AuxConfig::default(),
        480,
        &mut rng,
    )
    .unwrap();
    let (mut states, mut agree, mut unaffordable) = (0, 0, 0);
    // The environment follows the expert while agent and mirror both commit
    // the agent's picks, so every demo state is visited with equal histories.
    for demo in &f.demos {
        let task = &demo.task;
        let mut agent = SayCanAgent::new(&spec, &store, &f.vocab, AffordanceMode::Oracle).unwrap();
        agent.reset(task).unwrap();
        let goal = encode_strict(&f.vocab, &task.goal).unwrap();
        let mut mirror = spec.session(&store, &goal).unwrap();
        let mut s = reset(task, DEFAULT_STEP_CAP);
        for step in &demo.steps {
            let affordable = s.affordable_actions();
            mirror.observe(ObsInput::None).unwrap();
            let want = brute_force_choice(&mirror, &f.vocab, &affordable);
            let obs = render(&s);
            let cap = caption(&s);
            let got = agent
                .act(&StepView {
                    observation: &obs,
                    caption: &cap,
                    affordable: &affordable,
                })
                .unwrap();
            states += 1;
            agree += usize::from(got == want);
            unaffordable += usize::from(!affordable.contains(&Action::parse(&got).unwrap()));
            mirror
                .commit(&encode_strict(&f.vocab, &got).unwrap())
                .unwrap();
            s.step_text(&step.action).unwrap();
        }
    }

    // Toy grammar: two content tokens then EOS, 5 x 4 = 20 actions.
    let firsts: Vec<u32> = (10..15).collect();
    let seconds: Vec<u32> = (20..24).collect();
    let mut toy_ok = 0;
    for trial in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let logits = |allowed: &[u32], rng: &mut ChaCha8Rng| {
            let mut lp = vec![f64::NEG_INFINITY; 30];
            let z: Vec<f64> = allowed
                .iter()
                .map(|_| rng.random_range(-3.0..3.0))
                .collect();
            let norm = z.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
            for (&t, v) in allowed.iter().zip(&z) {
                lp[t as usize] = v - norm;
            }
            lp
        };
        let first = logits(&firsts, &mut rng);
        let second: Vec<Vec<f64>> = firsts.iter().map(|_| logits(&seconds, &mut rng)).collect();
        let mut eos = vec![f64::NEG_INFINITY; 30];
        eos[EOS as usize] = 0.0;
        let table = |prefix: &[u32]| -> vp2_core::Result<Vec<f64>> {
            Ok(match prefix.len() {
                0 => first.clone(),
                1 => second[(prefix[0] - 10) as usize].clone(),
                _ => eos.clone(),
            })
        };
        let p_aff: Vec<f64> = (0..20)
            .map(|_| {
                if rng.random_bool(0.3) {
                    0.0
                } else {
                    rng.random_range(0.0..1.0)
                }
            })
            .collect();
        let text = |ids: &[u32]| format!("a{} b{}", ids[0], ids[1]);
        let index = |ids: &[u32]| (ids[0] - 10) as usize * 4 + (ids[1] - 20) as usize;
        let beams = beam_search(table, 20, 3).unwrap();
        let cands: Vec<Candidate> = beams
            .iter()
            .map(|(ids, lp)| Candidate {
                text: text(ids),
                p_lm: lp.exp(),
                p_aff: p_aff[index(ids)],
            })
            .collect();
        let mut exhaustive: Vec<Candidate> = Vec::new();
        for (i, &a) in firsts.iter().enumerate() {
            for &b in &seconds {
                let ids = [a, b];
                let p_lm = (first[a as usize] + second[i][b as usize]).exp();
                exhaustive.push(Candidate {
                    text: text(&ids),
                    p_lm,
                    p_aff: p_aff[index(&ids)],
                });
            }
        }
        let best = exhaustive
            .iter()
            .filter(|c| c.p_lm * c.p_aff > 0.0)
            .max_by(|x, y| {
                (x.p_lm * x.p_aff)
                    .total_cmp(&(y.p_lm * y.p_aff))
                    .then(y.text.cmp(&x.text))
            })
            .map_or("done".to_string(), |c| c.text.clone());
        toy_ok += usize::from(beams.len() == 20 && saycan_select(&cands) == best);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let (mut invariant, mut never_zero) = (0, 0);
    for _ in 0..200 {
        let n = rng.random_range(1..12);
        let equal = rng.random_range(0.05..1.0);
        let cands: Vec<Candidate> = (0..n)
            .map(|i| Candidate {
                text: format!("act {i}"),
                p_lm: rng.random_range(0.0..1.0),
                p_aff: equal,
            })
            .collect();
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled: Vec<Candidate> = cands
            .iter()
            .map(|x| Candidate {
                p_lm: x.p_lm * c,
                ..x.clone()
            })
            .collect();
        let plain = saycan_select(&cands);
        let lm_only = cands
            .iter()
            .max_by(|x, y| x.p_lm.total_cmp(&y.p_lm).then(y.text.cmp(&x.text)))
            .unwrap();
        invariant += usize::from(plain == saycan_select(&scaled) && plain == lm_only.text);
        let mixed: Vec<Candidate> = cands
            .iter()
            .enumerate()
            .map(|(i, x)| Candidate {
                p_aff: if i % 2 == 0 { 0.0 } else { x.p_aff },
                ..x.clone()
            })
            .collect();
        let pick = saycan_select(&mixed);
        never_zero += usize::from(
            pick == "done" && n == 1 || mixed.iter().any(|x| x.text == pick && x.p_aff > 0.0),
        );
    }
    (
        agree == states && unaffordable == 0 && toy_ok == 50 && invariant == 200 && never_zero == 200,
        format!(
            "oracle mode matches brute force on {agree}/{states} states ({unaffordable} unexecutable picks); toy beam k=20 {toy_ok}/50; scaling invariance {invariant}/200; zero-affordance never chosen {never_zero}/200"
        ),
    )
}

fn tiny_pipeline(dir: &std::path::Path) -> Vec<u8> {
    let counts = SplitCounts {
        train: 6,
        eval_id: 3,
        eval_od: 3,
    };
    let tasks = generate_tasks(0, counts, DEFAULT_STEP_CAP).unwrap();
    let train: Vec<TaskSpec> = tasks
        .iter()
        .filter(|t| t.split == Split::Train)
        .cloned()
        .collect();
    let demos = generate_demos(&train, DEFAULT_STEP_CAP).unwrap();
    let vocab = build_vocab(&demos).unwrap();
    let lm = TransformerLm::new(LmConfig {
        vocab_size: vocab.len(),
        embed_dim: 16,
        n_layers: 1,
        n_heads: 2,
        max_positions: 512,
        dropout: 0.0,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut lm_store = ParamStore::<f32>::new();
    lm.init(&mut lm_store, &mut rng);
    let backbone = VisualBackbone {
        channels: [4, 8, 16],
        ..VisualBackbone::default()
    };
    let mut vision = ParamStore::new();
    backbone.init(&mut vision, &mut rng);
    let mut data = Dataset::encode(&demos, &vocab).unwrap();
    data.attach_features(demo_features(&backbone, &vision, &demos).unwrap())
        .unwrap();
    let cfg = TrainConfig::desk().with_epochs(2);
    let (spec, mut store) = PlannerSpec::instantiate(
        &lm,
        &lm_store,
        ObsMode::Visual,
        Some((&backbone, &vision)),
        2,
        &cfg.aux,
        cfg.max_context_embeddings,
        &mut rng,
    )
    .unwrap();
    train_planner(&spec, &mut store, &data, &cfg).unwrap();
    let bundle = PolicyBundle {
        kind: PolicyKind::Vp2,
        vocab,
        planner: spec,
        planner_store: store,
        captioner: None,
        affordance: None,
        decoding: Decoding::Greedy,
        oracle_captions: false,
        train_config: cfg,
    };
    let hash = bundle.manifest_hash().unwrap();
    let mut reports = Vec::new();
    for split in [Split::EvalId, Split::EvalOd] {
        let ts: Vec<TaskSpec> = tasks.iter().filter(|t| t.split == split).cloned().collect();
        let ev = SplitEval::new(split, &ts, DEFAULT_STEP_CAP, 1).unwrap();
        let run = ev.run_seed(0, hash.clone(), || bundle.agent()).unwrap();
        reports.push(ev.report("vp2", vec![run], demos.len(), None));
    }
    emit_metrics(&reports, dir).unwrap();
    std::fs::read(dir.join("results.csv")).unwrap()
}

fn determinism() -> (bool, String) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (x, y) = (tiny_pipeline(a.path()), tiny_pipeline(b.path()));
    let rows = x.iter().filter(|&&c| c == b'\n').count();
    (
        x == y,
        format!(
            "two seed-0 runs: results.csv ({rows} lines) byte-identical = {}",
            x == y
        ),
    )
}

#[derive(Serialize, Deserialize)]
struct OrdinalRun {
    outcome: SuiteOutcome,
    overfit_success: f64,
    overfit_final_loss: f64,
    seconds: f64,
}

const OVERFIT_DEMOS: usize = 10;
const OVERFIT_EPOCHS: usize = 60;
const OVERFIT_BATCH: usize = 2;

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn ordinal_run(cfg: &SuiteConfig) -> OrdinalRun {
    let arms = cfg.acceptance_arms();
    let key =
        serde_json::to_string(&(cfg, &arms, OVERFIT_DEMOS, OVERFIT_EPOCHS, OVERFIT_BATCH)).unwrap();
    let hash = hex::encode(Sha256::digest(key.as_bytes()))[..16].to_string();
    let path = cache_dir().join(format!("suite-{hash}.json"));
    let fresh = std::env::var("VP2_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1");
    if !fresh {
        if let Some(run) = std::fs::read(&path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
        {
            println!("ordinal results loaded from {}", path.display());
            return run;
        }
    }
    println!(
        "training the ordinal suite ({} arms x {} seeds); results go to {}",
        arms.len(),
        cfg.seeds.len(),
        path.display()
    );
    let t = Instant::now();
    let assets: Assets<f32> = Assets::build(&cfg.data).unwrap();

    let train = TrainConfig {
        epochs: OVERFIT_EPOCHS,
        batch_size: OVERFIT_BATCH,
        dataset_cap: Some(OVERFIT_DEMOS),
        ..cfg.train.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (spec, mut store) = PlannerSpec::instantiate(
        &assets.lm,
        &assets.lm_pretrained,
        ObsMode::Visual,
        Some((&assets.aligned.backbone, &assets.aligned.store)),
        cfg.prompt_size,
        &train.aux,
        train.max_context_embeddings,
        &mut rng,
    )
    .unwrap();
    let curve = train_planner(&spec, &mut store, &assets.data, &train).unwrap();
    let bundle = PolicyBundle {
        kind: PolicyKind::Vp2,
        vocab: assets.vocab.clone(),
        planner: spec,
        planner_store: store,
        captioner: None,
        affordance: None,
        decoding: Decoding::Greedy,
        oracle_captions: false,
        train_config: train,
    };
    let seen: Vec<TaskSpec> = assets.demos[..OVERFIT_DEMOS]
        .iter()
        .map(|d| d.task.clone())
        .collect();
    let ev = SplitEval::new(Split::Train, &seen, cfg.data.step_cap, cfg.threads).unwrap();
    let overfit = ev.run_seed(0, String::new(), || bundle.agent()).unwrap();

    let outcome = run_suite(&assets, cfg, &arms).unwrap();
    let run = OrdinalRun {
        outcome,
        overfit_success: overfit.raw,
        overfit_final_loss: curve.train().last().copied().unwrap_or(f64::NAN),
        seconds: t.elapsed().as_secs_f64(),
    };
    std::fs::create_dir_all(cache_dir()).unwrap();
    std::fs::write(&path, serde_json::to_vec(&run).unwrap()).unwrap();
    run
}

fn id_rate(run: &OrdinalRun, arm: &str) -> f64 {
    run.outcome
        .reports
        .iter()
        .find(|r| r.arm == arm && r.split == Split::EvalId)
        .map_or(f64::NAN, |r| r.normalized())
}

fn ordinal(id: usize, name: &'static str, pass: bool, detail: String) -> Line {
    let line = Line {
        id,
        name,
        pass,
        detail,
    };
    line.print();
    line
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn ordinal_lines(run: &OrdinalRun) -> Vec<Line> {
    let r = |arm| id_rate(run, arm);
    let mut out = Vec::new();
    out.push(ordinal(
        8,
        "overfit sanity",
        run.overfit_success >= 0.9,
        format!(
            "VP2 on {OVERFIT_DEMOS} demos replays {}% of its tasks (need >= 90; final loss {:.3})",
            pct(run.overfit_success),
            run.overfit_final_loss
        ),
    ));
    let (vp2, ignore, caps) = (r("vp2"), r("ignore"), r("captions"));
    out.push(ordinal(
        9,
        "VP2 vs Ignore and Captions",
        vp2 - ignore >= 0.10 && vp2 >= caps - 0.02,
        format!(
            "ID VP2 {} vs Ignore {} (need +10), vs Captions {} (need >= -2)",
            pct(vp2),
            pct(ignore),
            pct(caps)
        ),
    ));
    let (so, st) = (r("saycan-oracle"), r("saycan-trained"));
    out.push(ordinal(
        10,
        "SayCan oracle vs trained affordance",
        so - st >= 0.05,
        format!("ID oracle {} vs trained {} (need +5)", pct(so), pct(st)),
    ));
    let un = r("unaligned");
    out.push(ordinal(
        11,
        "aligned vs unaligned backbone",
        vp2 - un >= 0.10,
        format!(
            "ID aligned {} vs unaligned {} (need +10)",
            pct(vp2),
            pct(un)
        ),
    ));
    let fr = r("frozen-lm");
    out.push(ordinal(
        12,
        "fine-tuned vs frozen LM",
        fr - vp2 <= 0.02,
        format!(
            "ID fine-tuned {} vs frozen {} (frozen may lead by at most 2)",
            pct(vp2),
            pct(fr)
        ),
    ));
    let p1 = r("prompt-1");
    out.push(ordinal(
        13,
        "prompt size 10 vs 1",
        vp2 > p1,
        format!(
            "ID m=10 {} vs m=1 {} (need strictly greater)",
            pct(vp2),
            pct(p1)
        ),
    ));
    let (pre, scratch) = (r("samples-100"), r("no-pretrain-100"));
    out.push(ordinal(
        14,
        "pretrained vs scratch LM at 100 demos",
        pre - scratch >= 0.05,
        format!(
            "ID pretrained {} vs scratch {} (need +5)",
            pct(pre),
            pct(scratch)
        ),
    ));
    let (inv, cap, goal) = (
        r("aux-inv-dyn-100"),
        r("aux-captions-100"),
        r("aux-goal-pred-100"),
    );
    out.push(ordinal(
        15,
        "auxiliary tasks at 100 demos",
        inv.max(cap) >= pre - 0.02,
        format!(
            "ID plain {} vs inv-dyn {} / captions {} (best within 2 or better); goal-pred {} (report only)",
            pct(pre),
            pct(inv),
            pct(cap),
            pct(goal)
        ),
    ));
    out
}

fn main() {
    env_logger::init();
    // Only run when selected: a name filter that does not match skips the report.
    let args: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let t = Instant::now();
    let mut props = vec![
        property(1, "gradient checks", gradients),
        property(
            2,
            "token/embedding path equivalence",
            token_path_equivalence,
        ),
        property(3, "causality", causality),
        property(4, "environment consistency", environment),
        property(5, "context assembly", context_assembly),
        property(6, "SayCan equivalences", saycan),
        property(7, "determinism", determinism),
    ];
    let prop_secs = t.elapsed().as_secs_f64();
    println!("property suite: {prop_secs:.0}s (budget 600s)");
    if prop_secs > 600.0 {
        props.push(Line {
            id: 7,
            name: "property runtime",
            pass: false,
            detail: format!("{prop_secs:.0}s over budget"),
        });
    }

    let failed_props: Vec<usize> = props.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    if std::env::var("VP2_ACCEPTANCE_PROPERTIES_ONLY").is_ok_and(|v| v == "1") {
        println!("summary: properties failing {failed_props:?}; ordinal criteria skipped");
        std::process::exit(i32::from(!failed_props.is_empty()));
    }
    let cfg = SuiteConfig::default();
    let run = ordinal_run(&cfg);
    let metrics = cache_dir().join("metrics");
    emit_metrics(&run.outcome.reports, &metrics).unwrap();
    println!("{}", summary_table(&run.outcome.reports));
    let ords = ordinal_lines(&run);
    println!(
        "ordinal suite: {:.0}s of training and evaluation (budget 7200s)",
        run.seconds
    );
    let failed_ords: Vec<usize> = ords.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    println!(
        "summary: properties failing {failed_props:?}; ordinal criteria failing {failed_ords:?} (reported, not gating); metrics in {}",
        metrics.display()
    );
    if !failed_props.is_empty() {
        std::process::exit(1);
    }
}
