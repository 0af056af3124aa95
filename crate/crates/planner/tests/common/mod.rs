#![allow(dead_code)]

use minialf::{generate_demos, generate_tasks, Demonstration, Split, SplitCounts, TaskSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vp2_core::lm::{LmConfig, TransformerLm};
use vp2_core::vision::caption_loss;
use vp2_core::vision::VisualBackbone;
use vp2_core::vocab::Vocab;
use vp2_core::{Graph, Var};
use vp2_core::{ParamStore, Scalar};
use vp2_planner::captioner::CaptionModel;
use vp2_planner::data::demo_features;
use vp2_planner::saycan::AffordanceModel;
use vp2_planner::{build_vocab, AuxConfig, AuxTask, Dataset, ObsMode, PlannerSpec};

pub struct Fixture<T: Scalar> {
    pub tasks: Vec<TaskSpec>,
    pub demos: Vec<Demonstration>,
    pub vocab: Vocab,
    pub lm: TransformerLm,
    pub lm_store: ParamStore<T>,
    pub backbone: VisualBackbone,
    pub vision_store: ParamStore<T>,
    pub data: Dataset<T>,
}

pub fn small_counts() -> SplitCounts {
    SplitCounts {
        train: 12,
        eval_id: 4,
        eval_od: 4,
    }
}

/// Tiny LM and backbone over a handful of demos.
pub fn fixture<T: Scalar>(
    counts: SplitCounts,
    lm_config: impl Fn(usize) -> LmConfig,
    channels: [usize; 3],
) -> Fixture<T> {
    let tasks = generate_tasks(0, counts, 30).unwrap();
    let train: Vec<TaskSpec> = tasks
        .iter()
        .filter(|t| t.split == Split::Train)
        .cloned()
        .collect();
    let demos = generate_demos(&train, 30).unwrap();
    let vocab = build_vocab(&demos).unwrap();
    let lm = TransformerLm::new(lm_config(vocab.len())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut lm_store = ParamStore::new();
    lm.init(&mut lm_store, &mut rng);
    let backbone = VisualBackbone {
        channels,
        ..VisualBackbone::default()
    };
    let mut vision_store = ParamStore::new();
    backbone.init(&mut vision_store, &mut rng);
    let mut data = Dataset::encode(&demos, &vocab).unwrap();
    data.attach_features(demo_features(&backbone, &vision_store, &demos).unwrap())
        .unwrap();
    Fixture {
        tasks,
        demos,
        vocab,
        lm,
        lm_store,
        backbone,
        vision_store,
        data,
    }
}

pub fn desk<T: Scalar>() -> Fixture<T> {
    fixture(small_counts(), LmConfig::desk, [32, 64, 256])
}

/// Very small shapes for finite-difference checks.
pub fn micro<T: Scalar>() -> Fixture<T> {
    fixture(
        SplitCounts {
            train: 3,
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
    )
}

/// Compares the analytic gradient of `loss` with central differences at
/// `count` random trainable entries of `store`.
pub fn check_random_entries<F>(store: &ParamStore<f64>, count: usize, seed: u64, loss: F) -> f64
where
    F: Fn(&ParamStore<f64>) -> (f64, Graph<f64>),
{
    use rand::seq::IndexedRandom;
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, g) = loss(store);
    let mut grads = store.clone();
    grads.zero_grads();
    grads.accumulate_grads(&g);
    let names: Vec<String> = store
        .names()
        .filter(|n| !store.is_frozen(n))
        .map(str::to_string)
        .collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..count {
        let name = names.choose(&mut rng).unwrap();
        let i = rng.random_range(0..store.get(name).unwrap().numel());
        analytic.push(grads.get(name).unwrap().grad.as_ref().unwrap()[i]);
        let h = 1e-5;
        let mut plus = store.clone();
        plus.get_mut(name).unwrap().data_mut()[i] += h;
        let mut minus = store.clone();
        minus.get_mut(name).unwrap().data_mut()[i] -= h;
        numeric.push((loss(&plus).0 - loss(&minus).0) / (2.0 * h));
    }
    assert!(
        analytic.iter().any(|x| x.abs() > 1e-8),
        "every sampled gradient vanished"
    );
    vp2_core::gradcheck::rel_error(&analytic, &numeric)
}

/// Finite-difference error of the full planner objective (action loss plus
/// every auxiliary term) on the micro fixture.
pub fn planner_objective_error() -> f64 {
    let f = micro::<f64>();
    let aux = AuxConfig {
        alpha: 0.1,
        ..AuxConfig::with(&AuxTask::ALL)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (spec, store) = PlannerSpec::instantiate(
        &f.lm,
        &f.lm_store,
        ObsMode::Visual,
        Some((&f.backbone, &f.vision_store)),
        2,
        &aux,
        480,
        &mut rng,
    )
    .unwrap();
    let batch: Vec<usize> = (0..f.data.len()).collect();
    check_random_entries(&store, 20, 5, |st| {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = spec
            .batch_loss(&mut g, st, &f.data, &batch, &aux, &mut rng)
            .unwrap();
        finish(g, l)
    })
}

/// Same for the action loss alone under a budget that forces trimming.
pub fn trimmed_objective_error() -> f64 {
    let f = micro::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut spec, store) = PlannerSpec::instantiate(
        &f.lm,
        &f.lm_store,
        ObsMode::Visual,
        Some((&f.backbone, &f.vision_store)),
        2,
        &AuxConfig::default(),
        480,
        &mut rng,
    )
    .unwrap();
    spec.max_context = 24;
    check_random_entries(&store, 20, 6, |st| {
        let mut g = Graph::new();
        let (l, _) = spec.action_loss(&mut g, st, &f.data, 0).unwrap();
        finish(g, l)
    })
}

/// Caption objective through the visual prompt.
pub fn caption_objective_error() -> f64 {
    let f = micro::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let prefix = f.vocab.encode("caption the following observation");
    let (cm, store) = CaptionModel::instantiate(
        &f.lm,
        &f.lm_store,
        &f.backbone,
        &f.vision_store,
        2,
        prefix,
        &mut rng,
    )
    .unwrap();
    let step = &f.data.demos[0].steps[1];
    let feats = f.data.feature_rows(&[step.obs]).unwrap();
    check_random_entries(&store, 20, 7, |st| {
        let mut g = Graph::new();
        let l = caption_loss(
            &mut g,
            st,
            &cm.lm,
            &cm.projector,
            &cm.prefix,
            &feats,
            &step.caption,
        )
        .unwrap();
        finish(g, l)
    })
}

/// Two-way affordance cross-entropy for a positive or negative label.
pub fn affordance_objective_error(valid: bool) -> f64 {
    let f = micro::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let prompt = f
        .vocab
        .encode("predict whether the following action is valid");
    let labels = (f.vocab.id("valid").unwrap(), f.vocab.id("invalid").unwrap());
    let (am, store) = AffordanceModel::instantiate(
        &f.lm,
        &f.lm_store,
        &f.backbone,
        &f.vision_store,
        2,
        prompt,
        labels,
        &mut rng,
    )
    .unwrap();
    let step = &f.data.demos[0].steps[0];
    let feats = f.data.feature_rows(&[step.obs]).unwrap();
    check_random_entries(&store, 20, 8, |st| {
        let mut g = Graph::new();
        let l = am.loss(&mut g, st, &feats, &step.action, valid).unwrap();
        finish(g, l)
    })
}

fn finish(mut g: Graph<f64>, l: Var) -> (f64, Graph<f64>) {
    let v = g.value(l).data()[0];
    g.backward(l).unwrap();
    (v, g)
}

/// A fresh planner over the fixture's LM and backbone.
pub fn planner<T: Scalar>(
    f: &Fixture<T>,
    obs: ObsMode,
    prompt_size: usize,
    aux: &AuxConfig,
    max_context: usize,
    seed: u64,
) -> (PlannerSpec, ParamStore<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PlannerSpec::instantiate(
        &f.lm,
        &f.lm_store,
        obs,
        Some((&f.backbone, &f.vision_store)),
        prompt_size,
        aux,
        max_context,
        &mut rng,
    )
    .unwrap()
}

pub fn bundle<T: Scalar>(
    f: &Fixture<T>,
    kind: vp2_planner::policy::PolicyKind,
    spec: PlannerSpec,
    store: ParamStore<T>,
) -> vp2_planner::policy::PolicyBundle<T> {
    vp2_planner::policy::PolicyBundle {
        kind,
        vocab: f.vocab.clone(),
        planner: spec,
        planner_store: store,
        captioner: None,
        affordance: None,
        decoding: vp2_planner::Decoding::Greedy,
        oracle_captions: false,
        train_config: vp2_planner::TrainConfig::desk(),
    }
}

pub fn fingerprint<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    store.fingerprint_bytes()
}
