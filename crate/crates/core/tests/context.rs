use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vp2_core::context::{
    assemble_context, trim_context, ContextSpec, Piece, SegmentTag, SequenceBuilder,
};
use vp2_core::lm::{LmConfig, TransformerLm};
use vp2_core::vocab::{EOS, SEP};
use vp2_core::{CoreError, Graph64, ParamStore64, Tensor};

fn lm() -> (TransformerLm, ParamStore64) {
    let lm = TransformerLm::new(LmConfig {
        vocab_size: 20,
        embed_dim: 8,
        n_layers: 1,
        n_heads: 2,
        max_positions: 128,
        dropout: 0.0,
    })
    .unwrap();
    let mut st = ParamStore64::new();
    lm.init(&mut st, &mut ChaCha8Rng::seed_from_u64(0));
    (lm, st)
}

/// Observations are stand-in token runs so a spec is pure data.
fn obs(m: usize, step: usize) -> Piece {
    Piece::Tokens(vec![5 + (step % 5) as u32; m])
}

fn spec_from(goal: usize, m: usize, actions: &[usize], task: usize) -> ContextSpec {
    ContextSpec {
        task: (task > 0).then(|| Piece::Tokens(vec![19; task])),
        goal: vec![10; goal],
        history: actions
            .iter()
            .enumerate()
            .map(|(i, &n)| (obs(m, i + 1), vec![11 + i as u32 % 5; n]))
            .collect(),
        current: obs(m, actions.len() + 1),
        first_step: 1,
        max_embeddings: 10_000,
    }
}

#[test]
fn worked_example_has_thirteen_rows() {
    let (lm, st) = lm();
    let s = spec_from(3, 2, &[2], 0);
    let mut g = Graph64::new();
    let a = assemble_context(&lm, &mut g, &st, &s).unwrap();
    assert_eq!(a.len, 13);
    assert_eq!(g.shape(a.var), &[13, 8]);
    let order: Vec<SegmentTag> = a
        .segments
        .iter()
        .map(|s| s.0)
        .filter(|t| *t != SegmentTag::Separator)
        .collect();
    assert_eq!(
        order,
        vec![
            SegmentTag::Goal,
            SegmentTag::Observation(1),
            SegmentTag::Action(1),
            SegmentTag::Observation(2)
        ]
    );
}

#[test]
fn first_step_is_goal_then_observation() {
    let s = spec_from(3, 2, &[], 0);
    let tags: Vec<SegmentTag> = s.layout().into_iter().map(|t| t.0).collect();
    assert_eq!(
        tags,
        vec![
            SegmentTag::Goal,
            SegmentTag::Separator,
            SegmentTag::Observation(1),
            SegmentTag::Separator
        ]
    );
}

#[test]
fn rows_are_the_expected_embeddings() {
    let (lm, st) = lm();
    let mut g = Graph64::new();
    let block = g.constant(Tensor::from_f64(&[2, 8], &[0.25; 16]).unwrap());
    let s = ContextSpec {
        task: None,
        goal: vec![7, 8],
        history: vec![(
            Piece::Embeds {
                var: block,
                rows: 2,
            },
            vec![9],
        )],
        current: Piece::Embeds {
            var: block,
            rows: 2,
        },
        first_step: 1,
        max_embeddings: 64,
    };
    let a = assemble_context(&lm, &mut g, &st, &s).unwrap();
    let ids = [7, 8, SEP, 0, 0, SEP, 9, EOS, 0, 0, SEP];
    let table = st.get(&TransformerLm::token_table_name()).unwrap();
    for (row, &id) in ids.iter().enumerate() {
        let got = g.value(a.var).row(row);
        if [3, 4, 8, 9].contains(&row) {
            assert!(got.iter().all(|&v| v == 0.25));
        } else {
            assert_eq!(got, table.row(id as usize));
        }
    }
}

#[test]
fn over_budget_requires_trimming() {
    let (lm, st) = lm();
    let mut s = spec_from(3, 4, &[3, 3, 3], 0);
    s.max_embeddings = 20;
    let mut g = Graph64::new();
    assert!(matches!(
        assemble_context(&lm, &mut g, &st, &s),
        Err(CoreError::Budget { .. })
    ));
    let t = trim_context(&s, 20).unwrap();
    assert!(assemble_context(&lm, &mut g, &st, &t).unwrap().len <= 20);
}

#[test]
fn removing_exactly_one_pair() {
    let s = spec_from(3, 2, &[2, 2, 2], 0);
    let t = trim_context(&s, s.len() - 1).unwrap();
    assert_eq!(t.history, s.history[1..].to_vec());
    assert_eq!(t.first_step, 2);
    assert_eq!(t.goal, s.goal);
    assert_eq!(t.current, s.current);
}

#[test]
fn builder_merges_token_runs_but_keeps_tags() {
    let mut b = SequenceBuilder::new();
    b.segment(SegmentTag::Goal, Piece::Tokens(vec![5, 6]), SEP);
    b.segment(SegmentTag::Observation(1), Piece::empty(), SEP);
    b.push(SegmentTag::Target, Piece::Tokens(vec![7]));
    assert_eq!(b.len(), 4);
    assert_eq!(
        b.tags(),
        &[
            (SegmentTag::Goal, 0, 2),
            (SegmentTag::Separator, 2, 1),
            (SegmentTag::Target, 3, 1)
        ]
    );
}

fn arb_spec() -> impl Strategy<Value = ContextSpec> {
    (
        1usize..8,
        0usize..6,
        proptest::collection::vec(1usize..6, 0..12),
        0usize..4,
    )
        .prop_map(|(g, m, acts, task)| spec_from(g, m, &acts, task))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn layout_length_order_and_trimming(spec in arb_spec(), slack in 0usize..80) {
        // length arithmetic: segments plus one terminator per non-empty segment
        let sep = |n: usize| if n > 0 { n + 1 } else { 0 };
        let expected = spec.task.as_ref().map_or(0, |t| sep(t.len()))
            + sep(spec.goal.len())
            + spec.history.iter().map(|(o, a)| sep(o.len()) + sep(a.len())).sum::<usize>()
            + sep(spec.current.len());
        prop_assert_eq!(spec.len(), expected);

        // the builder's tags tile the sequence and follow g, o1, a1, ..., ot
        let mut b = SequenceBuilder::new();
        spec.push_into(&mut b);
        prop_assert_eq!(b.len(), expected);
        let mut pos = 0;
        let mut content = Vec::new();
        for &(tag, start, n) in b.tags() {
            prop_assert_eq!(start, pos);
            pos += n;
            if tag != SegmentTag::Separator {
                content.push(tag);
            }
        }
        let mut want = Vec::new();
        if spec.task.is_some() { want.push(SegmentTag::Task); }
        want.push(SegmentTag::Goal);
        for i in 1..=spec.history.len() {
            if !spec.history[i - 1].0.is_empty() { want.push(SegmentTag::Observation(i)); }
            want.push(SegmentTag::Action(i));
        }
        if !spec.current.is_empty() { want.push(SegmentTag::Observation(spec.history.len() + 1)); }
        prop_assert_eq!(content, want);

        // trimming: within budget, order kept, only a prefix of pairs dropped, idempotent
        let budget = spec.min_viable_len() + slack;
        let t = trim_context(&spec, budget).unwrap();
        prop_assert!(t.len() <= budget);
        let dropped = t.first_step - spec.first_step;
        prop_assert_eq!(&t.history[..], &spec.history[dropped..]);
        prop_assert_eq!(&t.goal, &spec.goal);
        prop_assert_eq!(&t.current, &spec.current);
        if dropped > 0 {
            // dropping one fewer pair would not have fit
            let mut keep_one_more = t.clone();
            keep_one_more.history.insert(0, spec.history[dropped - 1].clone());
            prop_assert!(keep_one_more.len() > budget);
        }
        prop_assert_eq!(trim_context(&t, budget).unwrap(), t.clone());
        if spec.min_viable_len() > 0 {
            prop_assert!(trim_context(&spec, spec.min_viable_len() - 1).is_err());
        }
    }
}
