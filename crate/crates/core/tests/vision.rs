use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vp2_core::gradcheck::rel_error;
use vp2_core::lm::{LmConfig, TransformerLm};
use vp2_core::vision::*;
use vp2_core::vocab::SEP;
use vp2_core::{Graph, Graph32, ParamStore, ParamStore32, ParamStore64, Reduction, Scalar};

const COLORS: [[u8; 3]; 6] = [
    [230, 40, 40],
    [40, 200, 40],
    [40, 60, 230],
    [240, 220, 40],
    [200, 60, 220],
    [60, 220, 220],
];

/// One coloured 8×8 square on a dark background; the caption id is
/// `5 + colour index` followed by a position word.
fn sample(rng: &mut ChaCha8Rng) -> (Observation, Vec<u32>) {
    let c = rng.random_range(0..COLORS.len());
    let (r0, c0) = (rng.random_range(0..24), rng.random_range(0..24));
    let mut o = Observation::blank();
    for r in r0..r0 + 8 {
        for col in c0..c0 + 8 {
            o.set(r, col, COLORS[c]);
        }
    }
    let side = if c0 < 12 { 11 } else { 12 };
    (o, vec![5 + c as u32, side])
}

fn dataset(n: usize, seed: u64) -> Vec<(Observation, Vec<u32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample(&mut rng)).collect()
}

#[test]
fn identical_pixels_give_identical_prompts_with_finite_nonzero_norm() {
    let mut st = ParamStore32::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bb = VisualBackbone::default();
    bb.init(&mut st, &mut rng);
    let pj = PromptProjector::new(bb.feature_dim(), 10, 64);
    pj.init(&mut st, &mut rng);
    let (o, _) = sample(&mut rng);
    let mut g = Graph32::new();
    let a = encode_observation(&mut g, &st, &bb, &pj, &o).unwrap();
    let b = encode_observation(&mut g, &st, &bb, &pj, &o.clone()).unwrap();
    assert_eq!(g.value(a).data(), g.value(b).data());
    let norm: f32 = g.value(a).data().iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!(norm.is_finite() && norm > 0.0);
}

#[test]
fn projector_gradient_matches_finite_differences() {
    // next-action loss through [goal SEP o^e SEP target]
    let lm = TransformerLm::new(LmConfig {
        vocab_size: 16,
        embed_dim: 8,
        n_layers: 1,
        n_heads: 2,
        max_positions: 32,
        dropout: 0.0,
    })
    .unwrap();
    let bb = VisualBackbone {
        mode: BackboneMode::Random,
        channels: [4, 4, 6],
    };
    let mut pj = PromptProjector::new(bb.feature_dim(), 3, 8);
    pj.hidden = 5;
    let mut st = ParamStore64::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    lm.init(&mut st, &mut rng);
    bb.init(&mut st, &mut rng);
    pj.init(&mut st, &mut rng);
    for name in ["vision.projector.fc3.w", "vision.projector.fc3.b"] {
        let t = st.get_mut(name).unwrap();
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let (o, _) = sample(&mut rng);
    let loss = |st: &ParamStore64| -> (f64, Graph<f64>) {
        let mut g = Graph::new();
        let block = encode_observation(&mut g, st, &bb, &pj, &o).unwrap();
        let goal = lm.embed_tokens(&mut g, st, &[6, 7, SEP]).unwrap();
        let tail = lm.embed_tokens(&mut g, st, &[SEP, 9, 10]).unwrap();
        let x = g.concat(&[goal, block, tail], 0).unwrap();
        let logits = lm.forward(&mut g, st, x, None).unwrap();
        let mut targets = vec![None; 9];
        targets[6] = Some(9);
        targets[7] = Some(10);
        targets[8] = Some(2);
        let l = g.cross_entropy(logits, &targets, Reduction::Sum).unwrap();
        (g.value(l).data()[0], {
            g.backward(l).unwrap();
            g
        })
    };
    let (_, g) = loss(&st);
    let mut grads = st.clone();
    grads.accumulate_grads(&g);
    for name in [
        "vision.projector.fc1.w",
        "vision.projector.fc2.w",
        "vision.projector.fc3.w",
        "vision.projector.fc3.b",
    ] {
        let analytic = grads.get(name).unwrap().grad.clone().unwrap();
        let n = analytic.len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = st.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += 1e-5;
            let mut minus = st.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= 1e-5;
            *slot = (loss(&plus).0 - loss(&minus).0) / 2e-5;
        }
        let err = rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "{name}: rel error {err}");
    }
}

#[test]
fn identical_pairs_give_ln_two() {
    let mut st = ParamStore64::new();
    let bb = VisualBackbone::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    bb.init(&mut st, &mut rng);
    // heads are created by the pretraining routine; zero epochs just installs them
    let (o, c) = sample(&mut rng);
    let pairs = vec![(o.clone(), c.clone()), (o.clone(), c.clone())];
    let mut bbm = bb.clone();
    pretrain_aligned(
        &mut bbm,
        &mut st,
        &pairs,
        20,
        &PretrainConfig {
            epochs: 0,
            ..Default::default()
        },
    )
    .unwrap();
    let mut g = Graph::new();
    let loss = contrastive_loss(&mut g, &st, &bb, &[(&o, &c), (&o, &c)]).unwrap();
    assert!((g.value(loss).data()[0] - 2f64.ln()).abs() < 1e-12);
    assert!(contrastive_loss(&mut g, &st, &bb, &[(&o, &c)]).is_err());
}

#[test]
fn aligned_pretraining_learns_to_retrieve() {
    let train = dataset(96, 4);
    let held = dataset(64, 5);
    let mut st = ParamStore32::new();
    let mut bb = VisualBackbone::default();
    bb.init(&mut st, &mut ChaCha8Rng::seed_from_u64(6));
    let zero = PretrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let mut probe = bb.clone();
    let mut st0 = st.clone();
    pretrain_aligned(&mut probe, &mut st0, &train, 20, &zero).unwrap();
    let before = contrastive_eval(&st0, &probe, &held, 8).unwrap();

    let cfg = PretrainConfig {
        epochs: 8,
        batch_size: 8,
        lr: 1e-3,
        seed: 0,
    };
    let log = pretrain_aligned(&mut bb, &mut st, &train, 20, &cfg).unwrap();
    assert_eq!(bb.mode, BackboneMode::Aligned);
    assert!(st.is_frozen("vision.backbone.conv1.w"));
    assert!(
        log.epoch_losses.last().unwrap() < &log.epoch_losses[0],
        "{:?}",
        log.epoch_losses
    );
    let after = contrastive_eval(&st, &bb, &held, 8).unwrap();
    assert!(after < before, "held-out loss {before} -> {after}");
    let acc = retrieval_accuracy(&st, &bb, &held, 8).unwrap();
    assert!(acc > 1.0 / 8.0, "retrieval accuracy {acc}");

    // differently coloured squares land at different points
    let mut g = Graph32::new();
    let a = bb.observation_features(&mut g, &st, &held[0].0).unwrap();
    let other = held.iter().find(|(_, c)| c[0] != held[0].1[0]).unwrap();
    let b = bb.observation_features(&mut g, &st, &other.0).unwrap();
    assert_ne!(g.value(a).data(), g.value(b).data());
}

#[test]
fn unaligned_pretraining_fits_labels_and_freezes() {
    let data: Vec<(Observation, usize)> = dataset(48, 7)
        .into_iter()
        .map(|(o, c)| (o, (c[0] - 5) as usize))
        .collect();
    let mut st = ParamStore32::new();
    let mut bb = VisualBackbone::default();
    bb.init(&mut st, &mut ChaCha8Rng::seed_from_u64(8));
    let log = pretrain_unaligned(
        &mut bb,
        &mut st,
        &data,
        6,
        &PretrainConfig {
            epochs: 5,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(bb.mode, BackboneMode::Unaligned);
    assert!(st.is_frozen("vision.backbone.conv3.b"));
    assert!(log.epoch_losses.last().unwrap() < &log.epoch_losses[0]);
}

#[test]
fn caption_pretraining_lowers_caption_loss_and_touches_only_the_projector() {
    let lm = TransformerLm::new(LmConfig::desk(16)).unwrap();
    let mut st: ParamStore<f32> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    lm.init(&mut st, &mut rng);
    let bb = VisualBackbone::default();
    bb.init(&mut st, &mut rng);
    let pj = PromptProjector::new(bb.feature_dim(), 4, lm.embed_dim());
    pj.init(&mut st, &mut rng);
    let pairs = dataset(32, 10);
    let lm_before = st.get("lm.tok_emb").unwrap().data().to_vec();
    let bb_before = st.get("vision.backbone.conv1.w").unwrap().data().to_vec();
    let cfg = PretrainConfig {
        epochs: 6,
        batch_size: 8,
        lr: 1e-3,
        seed: 1,
    };
    let log = pretrain_prompt_caption(&bb, &pj, &lm, &mut st, &pairs, &[13, 14], &cfg).unwrap();
    assert!(
        log.epoch_losses.last().unwrap() < &log.epoch_losses[0],
        "{:?}",
        log.epoch_losses
    );
    assert_eq!(st.get("lm.tok_emb").unwrap().data(), &lm_before[..]);
    assert_eq!(
        st.get("vision.backbone.conv1.w").unwrap().data(),
        &bb_before[..]
    );
    assert!(!st.is_frozen("lm.tok_emb"), "frozen flags are restored");
    let _ = f32::NAME;
}
