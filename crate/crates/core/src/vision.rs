//! Observation encoder: a small strided conv backbone pooled to `F`
//! features, followed by a two-hidden-layer projector to `m` soft prompts
//! of width `E`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::graph::{ConvGeometry, Graph, Reduction, Var};
use crate::lm::TransformerLm;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{EOS, SEP};

pub const IMG_SIZE: usize = 32;
pub const IMG_CHANNELS: usize = 3;
pub const IMG_BYTES: usize = IMG_SIZE * IMG_SIZE * IMG_CHANNELS;
pub const BACKBONE_PREFIX: &str = "vision.backbone.";
pub const PROJECTOR_PREFIX: &str = "vision.projector.";
const ALIGN_PREFIX: &str = "vision.align.";
const SUPERVISED_PREFIX: &str = "vision.supervised.";

/// Row-major `32×32` RGB image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Observation {
    pixels: Vec<u8>,
}

impl Observation {
    pub fn new(pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != IMG_BYTES {
            return Err(CoreError::Shape {
                op: "observation",
                lhs: vec![pixels.len()],
                rhs: vec![IMG_SIZE, IMG_SIZE, IMG_CHANNELS],
            });
        }
        Ok(Observation { pixels })
    }

    pub fn blank() -> Self {
        Observation {
            pixels: vec![0; IMG_BYTES],
        }
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * IMG_SIZE + col) * IMG_CHANNELS;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * IMG_SIZE + col) * IMG_CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// `(H·W) × C` tensor scaled to `[-0.5, 0.5]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .pixels
            .iter()
            .map(|&p| T::from_f64_lossy(p as f64 / 255.0 - 0.5))
            .collect();
        Tensor::new(&[IMG_SIZE * IMG_SIZE, IMG_CHANNELS], data).expect("fixed image shape")
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{IMG_SIZE} {IMG_SIZE}\n255\n").into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneMode {
    Random,
    /// Contrastively aligned with caption text.
    Aligned,
    /// Trained on a supervised scene label only.
    Unaligned,
}

impl BackboneMode {
    pub fn parse(s: &str) -> Option<Self> {
        [
            BackboneMode::Random,
            BackboneMode::Aligned,
            BackboneMode::Unaligned,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneMode::Random => "random",
            BackboneMode::Aligned => "aligned",
            BackboneMode::Unaligned => "unaligned",
        }
    }
}

/// Three stride-2 convolutions (`32→16→8→4`) and global average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualBackbone {
    pub mode: BackboneMode,
    pub channels: [usize; 3],
}

impl Default for VisualBackbone {
    fn default() -> Self {
        VisualBackbone {
            mode: BackboneMode::Random,
            channels: [32, 64, 256],
        }
    }
}

fn conv_name(i: usize, part: &str) -> String {
    format!("{BACKBONE_PREFIX}conv{}.{part}", i + 1)
}

impl VisualBackbone {
    pub fn feature_dim(&self) -> usize {
        self.channels[2]
    }

    fn geometries(&self) -> [ConvGeometry; 3] {
        let mut out = [ConvGeometry {
            height: 0,
            width: 0,
            channels: 0,
            kernel: 4,
            stride: 2,
            pad: 1,
        }; 3];
        let (mut size, mut ch) = (IMG_SIZE, IMG_CHANNELS);
        for (i, g) in out.iter_mut().enumerate() {
            *g = ConvGeometry {
                height: size,
                width: size,
                channels: ch,
                kernel: 4,
                stride: 2,
                pad: 1,
            };
            size = g.out_height();
            ch = self.channels[i];
        }
        out
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for (i, geom) in self.geometries().iter().enumerate() {
            let fan_in = geom.patch_len();
            store.init_normal(
                &conv_name(i, "w"),
                &[fan_in, self.channels[i]],
                (2.0 / fan_in as f64).sqrt(),
                rng,
            );
            store.init_const(&conv_name(i, "b"), &[self.channels[i]], 0.0);
        }
    }

    pub fn set_frozen<T: Scalar>(&self, store: &mut ParamStore<T>, frozen: bool) {
        store.set_frozen_prefix(BACKBONE_PREFIX, frozen);
    }

    /// Pooled features `(1, F)` for one image tensor `(H·W, C)`.
    pub fn features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<Var> {
        let mut x = image;
        for (i, geom) in self.geometries().into_iter().enumerate() {
            let w = g.param(store, &conv_name(i, "w"))?;
            let b = g.param(store, &conv_name(i, "b"))?;
            let cols = g.im2col(x, geom)?;
            let y = g.matmul(cols, w)?;
            let y = g.add_bias(y, b)?;
            x = g.relu(y)?;
        }
        g.mean_rows(x)
    }

    pub fn observation_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        obs: &Observation,
    ) -> Result<Var> {
        let img = g.constant(obs.to_tensor());
        self.features(g, store, img)
    }

    /// Features as a plain tensor, for caching while the backbone is frozen.
    pub fn feature_tensor<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        obs: &Observation,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let f = self.observation_features(&mut g, store, obs)?;
        Ok(g.value(f).clone())
    }
}

/// MLP `F → hidden → hidden → m·E` reshaped to `(m, E)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptProjector {
    pub feature_dim: usize,
    pub hidden: usize,
    pub prompts: usize,
    pub embed_dim: usize,
}

fn proj_name(i: usize, part: &str) -> String {
    format!("{PROJECTOR_PREFIX}fc{}.{part}", i + 1)
}

impl PromptProjector {
    pub fn new(feature_dim: usize, prompts: usize, embed_dim: usize) -> Self {
        PromptProjector {
            feature_dim,
            hidden: 256,
            prompts,
            embed_dim,
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let dims = [
            self.feature_dim,
            self.hidden,
            self.hidden,
            self.prompts * self.embed_dim,
        ];
        for i in 0..3 {
            let std = if i == 2 {
                0.02
            } else {
                (2.0 / dims[i] as f64).sqrt()
            };
            store.init_normal(&proj_name(i, "w"), &[dims[i], dims[i + 1]], std, rng);
            store.init_const(&proj_name(i, "b"), &[dims[i + 1]], 0.0);
        }
    }

    /// Flat prompts `(n, m·E)` for features `(n, F)`.
    pub fn project<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
    ) -> Result<Var> {
        let mut x = features;
        for i in 0..3 {
            let w = g.param(store, &proj_name(i, "w"))?;
            let b = g.param(store, &proj_name(i, "b"))?;
            x = g.matmul(x, w)?;
            x = g.add_bias(x, b)?;
            if i < 2 {
                x = g.gelu(x)?;
            }
        }
        Ok(x)
    }

    /// One `(m, E)` prompt block per feature row.
    pub fn prompt_blocks<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
    ) -> Result<Vec<Var>> {
        let n = g.shape(features)[0];
        let flat = self.project(g, store, features)?;
        (0..n)
            .map(|i| {
                let row = if n == 1 {
                    flat
                } else {
                    g.slice(flat, 0, i, 1)?
                };
                g.reshape(row, &[self.prompts, self.embed_dim])
            })
            .collect()
    }
}

/// `f_FFN(f_pretrained(o))` as an `(m, E)` block.
pub fn encode_observation<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    backbone: &VisualBackbone,
    projector: &PromptProjector,
    obs: &Observation,
) -> Result<Var> {
    let f = backbone.observation_features(g, store, obs)?;
    Ok(projector.prompt_blocks(g, store, f)?.remove(0))
}

/// Settings shared by the encoder pretraining loops.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Dimension of the joint image/text space used for alignment.
pub const ALIGN_DIM: usize = 128;
const ALIGN_TEMPERATURE: f64 = 0.1;

fn init_align_heads<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    vocab_size: usize,
    feature_dim: usize,
    rng: &mut R,
) {
    store.init_normal(
        &format!("{ALIGN_PREFIX}txt_emb"),
        &[vocab_size, ALIGN_DIM],
        0.1,
        rng,
    );
    store.init_normal(
        &format!("{ALIGN_PREFIX}txt_proj.w"),
        &[ALIGN_DIM, ALIGN_DIM],
        (1.0 / ALIGN_DIM as f64).sqrt(),
        rng,
    );
    store.init_normal(
        &format!("{ALIGN_PREFIX}img_proj.w"),
        &[feature_dim, ALIGN_DIM],
        (1.0 / feature_dim as f64).sqrt(),
        rng,
    );
}

/// Symmetric InfoNCE loss for one batch of `(image, caption)` pairs.
pub fn contrastive_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    backbone: &VisualBackbone,
    batch: &[(&Observation, &[u32])],
) -> Result<Var> {
    let (img, txt) = align_embeddings(g, store, backbone, batch)?;
    let n = batch.len();
    let logits = g.matmul_nt(img, txt)?;
    let logits = g.scale(logits, 1.0 / ALIGN_TEMPERATURE)?;
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    let l_img = g.cross_entropy(logits, &targets, Reduction::Mean)?;
    let lt = g.transpose(logits)?;
    let l_txt = g.cross_entropy(lt, &targets, Reduction::Mean)?;
    let sum = g.add(l_img, l_txt)?;
    g.scale(sum, 0.5)
}

fn align_embeddings<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    backbone: &VisualBackbone,
    batch: &[(&Observation, &[u32])],
) -> Result<(Var, Var)> {
    if batch.len() < 2 {
        return Err(CoreError::invalid(
            "contrastive-loss",
            format!("needs at least 2 pairs, got {}", batch.len()),
        ));
    }
    let table = g.param(store, &format!("{ALIGN_PREFIX}txt_emb"))?;
    let txt_w = g.param(store, &format!("{ALIGN_PREFIX}txt_proj.w"))?;
    let img_w = g.param(store, &format!("{ALIGN_PREFIX}img_proj.w"))?;
    let mut feats = Vec::with_capacity(batch.len());
    let mut texts = Vec::with_capacity(batch.len());
    for (obs, caption) in batch {
        if caption.is_empty() {
            return Err(CoreError::invalid("contrastive-loss", "empty caption"));
        }
        feats.push(backbone.observation_features(g, store, obs)?);
        let ids: Vec<usize> = caption.iter().map(|&i| i as usize).collect();
        let rows = g.gather(table, &ids)?;
        texts.push(g.mean_rows(rows)?);
    }
    let f = g.concat(&feats, 0)?;
    let f = g.matmul(f, img_w)?;
    let img = g.l2_normalize_rows(f)?;
    let t = g.concat(&texts, 0)?;
    let t = g.matmul(t, txt_w)?;
    let txt = g.l2_normalize_rows(t)?;
    Ok((img, txt))
}

/// Per-epoch mean losses of a pretraining run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainLog {
    pub epoch_losses: Vec<f64>,
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng, min_batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch.max(1))
        .filter(|c| c.len() >= min_batch)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Contrastive image/caption alignment of the backbone.
///
/// Trains the backbone together with a private caption-embedding table and
/// projection heads, then marks the backbone as aligned and frozen.
pub fn pretrain_aligned<T: Scalar>(
    backbone: &mut VisualBackbone,
    store: &mut ParamStore<T>,
    pairs: &[(Observation, Vec<u32>)],
    vocab_size: usize,
    cfg: &PretrainConfig,
) -> Result<PretrainLog> {
    if cfg.batch_size < 2 || pairs.len() < 2 {
        return Err(CoreError::invalid(
            "pretrain-aligned",
            "contrastive batches need at least 2 pairs",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_align_heads(store, vocab_size, backbone.feature_dim(), &mut rng);
    backbone.set_frozen(store, false);
    let mut log = PretrainLog::default();
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        let bs = batches(pairs.len(), cfg.batch_size, &mut rng, 2);
        for idx in &bs {
            let batch: Vec<(&Observation, &[u32])> = idx
                .iter()
                .map(|&i| (&pairs[i].0, pairs[i].1.as_slice()))
                .collect();
            let mut g = Graph::new();
            let loss = contrastive_loss(&mut g, store, backbone, &batch)?;
            total += g.value(loss).data()[0].to_f64_lossy();
            g.backward(loss)?;
            store.accumulate_grads(&g);
            store.adam_step_with(
                |_| crate::AdamHyper {
                    lr: cfg.lr,
                    weight_decay: 0.0,
                },
                Some(1.0),
            )?;
        }
        log.epoch_losses.push(total / bs.len().max(1) as f64);
    }
    backbone.mode = BackboneMode::Aligned;
    backbone.set_frozen(store, true);
    Ok(log)
}

/// Mean contrastive loss over consecutive batches of `batch_size` pairs.
pub fn contrastive_eval<T: Scalar>(
    store: &ParamStore<T>,
    backbone: &VisualBackbone,
    pairs: &[(Observation, Vec<u32>)],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for chunk in pairs.chunks(batch_size).filter(|c| c.len() >= 2) {
        let batch: Vec<(&Observation, &[u32])> =
            chunk.iter().map(|(o, c)| (o, c.as_slice())).collect();
        let mut g = Graph::new();
        let loss = contrastive_loss(&mut g, store, backbone, &batch)?;
        total += g.value(loss).data()[0].to_f64_lossy();
        n += 1;
    }
    Ok(total / n.max(1) as f64)
}

/// Fraction of images whose most similar caption in their batch is their own.
pub fn retrieval_accuracy<T: Scalar>(
    store: &ParamStore<T>,
    backbone: &VisualBackbone,
    pairs: &[(Observation, Vec<u32>)],
    batch_size: usize,
) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in pairs.chunks(batch_size).filter(|c| c.len() >= 2) {
        let batch: Vec<(&Observation, &[u32])> =
            chunk.iter().map(|(o, c)| (o, c.as_slice())).collect();
        let mut g = Graph::new();
        let (img, txt) = align_embeddings(&mut g, store, backbone, &batch)?;
        let sims = g.matmul_nt(img, txt)?;
        let s = g.value(sims);
        for i in 0..chunk.len() {
            let row = s.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            hits += (best == i) as usize;
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Supervised scene-label training of the backbone, then frozen.
pub fn pretrain_unaligned<T: Scalar>(
    backbone: &mut VisualBackbone,
    store: &mut ParamStore<T>,
    images: &[(Observation, usize)],
    classes: usize,
    cfg: &PretrainConfig,
) -> Result<PretrainLog> {
    if images.is_empty() || classes == 0 {
        return Err(CoreError::invalid(
            "pretrain-unaligned",
            "no labelled images",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let head = format!("{SUPERVISED_PREFIX}head.w");
    store.init_normal(&head, &[backbone.feature_dim(), classes], 0.05, &mut rng);
    backbone.set_frozen(store, false);
    let mut log = PretrainLog::default();
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        let bs = batches(images.len(), cfg.batch_size, &mut rng, 1);
        for idx in &bs {
            let mut g = Graph::new();
            let w = g.param(store, &head)?;
            let feats = idx
                .iter()
                .map(|&i| backbone.observation_features(&mut g, store, &images[i].0))
                .collect::<Result<Vec<_>>>()?;
            let f = g.concat(&feats, 0)?;
            let logits = g.matmul(f, w)?;
            let targets: Vec<Option<usize>> = idx.iter().map(|&i| Some(images[i].1)).collect();
            let loss = g.cross_entropy(logits, &targets, Reduction::Mean)?;
            total += g.value(loss).data()[0].to_f64_lossy();
            g.backward(loss)?;
            store.accumulate_grads(&g);
            store.adam_step_with(
                |_| crate::AdamHyper {
                    lr: cfg.lr,
                    weight_decay: 0.0,
                },
                Some(1.0),
            )?;
        }
        log.epoch_losses.push(total / bs.len().max(1) as f64);
    }
    backbone.mode = BackboneMode::Unaligned;
    backbone.set_frozen(store, true);
    Ok(log)
}

/// Caption loss `−Σ log p_LM(caption, EOS | prefix, o^e, SEP)` for one
/// precomputed feature row.
pub fn caption_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    lm: &TransformerLm,
    projector: &PromptProjector,
    prefix: &[u32],
    features: &Tensor<T>,
    caption: &[u32],
) -> Result<Var> {
    let f = g.constant(features.clone());
    let block = projector.prompt_blocks(g, store, f)?.remove(0);
    let mut b = crate::context::SequenceBuilder::new();
    use crate::context::{Piece, SegmentTag};
    b.segment(SegmentTag::Goal, Piece::Tokens(prefix.to_vec()), SEP);
    b.segment(
        SegmentTag::Observation(1),
        Piece::Embeds {
            var: block,
            rows: projector.prompts,
        },
        SEP,
    );
    let start = b.len();
    b.push(SegmentTag::Target, Piece::Tokens(caption.to_vec()));
    let x = b.build(lm, g, store)?;
    let logits = lm.forward(g, store, x, None)?;
    let total = start + caption.len();
    let mut targets = vec![None; total];
    for (j, &t) in caption.iter().chain(std::iter::once(&EOS)).enumerate() {
        targets[start - 1 + j] = Some(t as usize);
    }
    g.cross_entropy(logits, &targets, Reduction::Sum)
}

/// Caption-objective pretraining of the projector with the LM and backbone
/// held fixed (the CLIPCap-style prompt initialisation).
#[allow(clippy::too_many_arguments)]
pub fn pretrain_prompt_caption<T: Scalar>(
    backbone: &VisualBackbone,
    projector: &PromptProjector,
    lm: &TransformerLm,
    store: &mut ParamStore<T>,
    pairs: &[(Observation, Vec<u32>)],
    prefix: &[u32],
    cfg: &PretrainConfig,
) -> Result<PretrainLog> {
    let feats = pairs
        .iter()
        .map(|(o, _)| backbone.feature_tensor(store, o))
        .collect::<Result<Vec<_>>>()?;
    let frozen_before: Vec<String> = store
        .names()
        .filter(|n| !n.starts_with(PROJECTOR_PREFIX))
        .map(str::to_string)
        .collect();
    let was_frozen: Vec<bool> = frozen_before.iter().map(|n| store.is_frozen(n)).collect();
    for n in &frozen_before {
        store.set_frozen(n, true)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = PretrainLog::default();
    let run = (|| -> Result<()> {
        for _ in 0..cfg.epochs {
            let mut total = 0.0;
            let mut tokens = 0usize;
            for idx in batches(pairs.len(), cfg.batch_size, &mut rng, 1) {
                let mut g = Graph::new();
                let mut losses = Vec::with_capacity(idx.len());
                for &i in &idx {
                    losses.push(caption_loss(
                        &mut g,
                        store,
                        lm,
                        projector,
                        prefix,
                        &feats[i],
                        &pairs[i].1,
                    )?);
                    tokens += pairs[i].1.len() + 1;
                }
                let sum = g.add_all(&losses)?;
                let loss = g.scale(sum, 1.0 / idx.len() as f64)?;
                total += g.value(sum).data()[0].to_f64_lossy();
                g.backward(loss)?;
                store.accumulate_grads(&g);
                store.adam_step_with(
                    |_| crate::AdamHyper {
                        lr: cfg.lr,
                        weight_decay: 0.0,
                    },
                    Some(1.0),
                )?;
            }
            log.epoch_losses.push(total / tokens.max(1) as f64);
        }
        Ok(())
    })();
    for (n, f) in frozen_before.iter().zip(was_frozen) {
        store.set_frozen(n, f)?;
    }
    run.map(|_| log)
}
