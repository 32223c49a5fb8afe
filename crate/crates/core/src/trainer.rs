//! Training: geometric augmentation, Adam, per-stage and whole-pipeline loops,
//! loss history, and resumable checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slicefusion_autograd::{Graph, Tensor};

use crate::checkpoint::{read_archive, write_archive, Archive};
use crate::dataio::{derive_presence, resample_inplane, Dims, LabelStack, Sample, N_CLASSES};
use crate::error::{Error, Result};
use crate::fusion_net::{network_specs, softmax_probs, stage_forward, NetworkConfig, SliceMode};
use crate::nn_blocks::{Bound, ParamStore};
use crate::stages::{image_input, loss1_graph, loss2_graph, Pipeline, StageModel, Variant, DEFAULT_LAMBDA};
use crate::util::{atomic_write, hash_of};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotate_deg_max: f64,
    pub shift_frac_max: f64,
    pub flip_prob: f64,
    pub crop_size: (usize, usize),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { rotate_deg_max: 30.0, shift_frac_max: 0.1, flip_prob: 0.5, crop_size: (96, 96) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    Sequential,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_stacks: usize,
    pub lambda: f64,
    pub seed: u64,
    pub augmentation: AugmentConfig,
    pub stage_mode: StageMode,
    pub target_spacing_mm: f64,
    pub slice_mode: SliceMode,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 200,
            batch_stacks: 1,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            augmentation: AugmentConfig::default(),
            stage_mode: StageMode::Sequential,
            target_spacing_mm: 1.3,
            slice_mode: SliceMode::AllSlice,
            variant: Variant::SegRef { multitask: true },
        }
    }
}

impl TrainConfig {
    /// CPU-sized schedule: 40 epochs on 64x64 crops.
    pub fn desk() -> Self {
        Self { epochs: 40, augmentation: AugmentConfig { crop_size: (64, 64), ..Default::default() }, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 || self.batch_stacks == 0 {
            return bad("epochs and batch_stacks must be at least 1");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.target_spacing_mm > 0.0) {
            return bad("target_spacing_mm must be positive");
        }
        let a = &self.augmentation;
        if !(0.0..=1.0).contains(&a.flip_prob) || a.rotate_deg_max < 0.0 || a.shift_frac_max < 0.0 {
            return bad("augmentation ranges are invalid");
        }
        if self.stage_mode == StageMode::Joint && !self.variant.has_ref() {
            return bad("joint stage mode needs a variant with a Ref stage");
        }
        Ok(())
    }
}


/// One geometric transform: rotate about the centre, shift, flip, then crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle_rad: f64,
    pub shift: (f64, f64),
    pub flip_h: bool,
    pub flip_v: bool,
    pub crop_origin: (usize, usize),
    pub crop_size: (usize, usize),
}

impl AugmentParams {
    pub fn identity(h: usize, w: usize) -> Self {
        Self { angle_rad: 0.0, shift: (0.0, 0.0), flip_h: false, flip_v: false, crop_origin: (0, 0), crop_size: (h, w) }
    }

    /// No geometric change, crop centred.
    pub fn centered_crop(h: usize, w: usize, crop: (usize, usize)) -> Self {
        Self { crop_origin: ((h - crop.0) / 2, (w - crop.1) / 2), crop_size: crop, ..Self::identity(h, w) }
    }

    pub fn sample(rng: &mut impl Rng, h: usize, w: usize, cfg: &AugmentConfig) -> Result<Self> {
        let (ch, cw) = cfg.crop_size;
        if ch > h || cw > w {
            return Err(Error::InvalidConfig(format!("crop {ch}x{cw} larger than input {h}x{w}")));
        }
        let sym = |rng: &mut dyn rand::RngCore, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let angle_rad = sym(rng, cfg.rotate_deg_max).to_radians();
        let shift = (sym(rng, cfg.shift_frac_max) * h as f64, sym(rng, cfg.shift_frac_max) * w as f64);
        let flip_h = rng.random_bool(cfg.flip_prob);
        let flip_v = rng.random_bool(cfg.flip_prob);
        let crop_origin = (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw));
        Ok(Self { angle_rad, shift, flip_h, flip_v, crop_origin, crop_size: (ch, cw) })
    }

    /// Source coordinate (row, col) for output pixel `(i, j)` of the crop.
    fn source(&self, i: usize, j: usize, h: usize, w: usize) -> (f64, f64) {
        let mut y = (i + self.crop_origin.0) as f64;
        let mut x = (j + self.crop_origin.1) as f64;
        if self.flip_v {
            y = (h - 1) as f64 - y;
        }
        if self.flip_h {
            x = (w - 1) as f64 - x;
        }
        let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
        let (dy, dx) = (y - cy - self.shift.0, x - cx - self.shift.1);
        let (s, c) = self.angle_rad.sin_cos();
        // inverse rotation
        (cy + c * dy - s * dx, cx + s * dy + c * dx)
    }

    /// Apply to `channels` stacked planes of size `h x w` (bilinear, clamp to edge).
    pub fn apply_planes(&self, planes: &[f32], channels: usize, h: usize, w: usize) -> Vec<f32> {
        let (ch, cw) = self.crop_size;
        let coords: Vec<(f64, f64)> = (0..ch).flat_map(|i| (0..cw).map(move |j| (i, j))).map(|(i, j)| self.source(i, j, h, w)).collect();
        let mut out = Vec::with_capacity(channels * ch * cw);
        for c in 0..channels {
            let plane = &planes[c * h * w..(c + 1) * h * w];
            out.extend(coords.iter().map(|&(y, x)| crate::dataio::bilinear(plane, h, w, y, x)));
        }
        out
    }

    /// Apply to label planes (nearest neighbour, clamp to edge).
    pub fn apply_labels(&self, labels: &[u8], slices: usize, h: usize, w: usize) -> Vec<u8> {
        let (ch, cw) = self.crop_size;
        let coords: Vec<(f64, f64)> = (0..ch).flat_map(|i| (0..cw).map(move |j| (i, j))).map(|(i, j)| self.source(i, j, h, w)).collect();
        let mut out = Vec::with_capacity(slices * ch * cw);
        for s in 0..slices {
            let plane = &labels[s * h * w..(s + 1) * h * w];
            out.extend(coords.iter().map(|&(y, x)| crate::dataio::nearest(plane, h, w, y, x)));
        }
        out
    }
}

/// Augment one aligned image/label slice pair with a freshly sampled transform.
pub fn augment(
    image: &[f32],
    label: &[u8],
    h: usize,
    w: usize,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<f32>, Vec<u8>)> {
    let p = AugmentParams::sample(rng, h, w, cfg)?;
    Ok((p.apply_planes(image, 1, h, w), p.apply_labels(label, 1, h, w)))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore<f32>) -> Self {
        let zeros = |p: &ParamStore<f32>| {
            let mut z = ParamStore::new();
            for (k, t) in p.iter() {
                z.insert(k, Tensor::zeros(t.shape()));
            }
            z
        };
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(params), v: zeros(params) }
    }

    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &std::collections::BTreeMap<String, Tensor<f32>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (name, g) in grads {
            let (Some(p), Some(m), Some(v)) = (params.get_mut(name), self.m.get_mut(name), self.v.get_mut(name)) else {
                continue;
            };
            for (((pv, mv), vv), &gv) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv as f64 / bc1;
                let vhat = *vv as f64 / bc2;
                *pv -= (self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Seg,
    Ref,
    Joint,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Seg => "seg",
            StageKind::Ref => "ref",
            StageKind::Joint => "joint",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub stage: StageKind,
    pub loss_total: f64,
    pub loss_seg: f64,
    pub loss_class: f64,
}

pub const HISTORY_HEADER: &str = "epoch,stage,loss_total,loss_seg,loss_class";

pub fn history_csv(rows: &[HistoryRow], provenance: Option<(&str, u64)>) -> String {
    let mut s = String::new();
    if let Some((hash, seed)) = provenance {
        let _ = writeln!(s, "# config_hash={hash} seed={seed}");
    }
    s.push_str(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{:.9},{:.9},{:.9}", r.epoch, r.stage.name(), r.loss_total, r.loss_seg, r.loss_class);
    }
    s
}

pub fn write_history(path: &Path, rows: &[HistoryRow], provenance: Option<(&str, u64)>) -> Result<()> {
    atomic_write(path, history_csv(rows, provenance).as_bytes())
}

/// Where to keep per-epoch checkpoints, and whether to pick up from one.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub checkpoint: Option<PathBuf>,
    pub resume: bool,
}

/// What a stage is trained on.
#[derive(Clone, Debug)]
struct StageData {
    /// Per stack `[S, C, H, W]` network input at full resolution.
    inputs: Vec<Tensor<f32>>,
    labels: Vec<LabelStack>,
}

#[derive(Clone, Debug)]
pub struct TrainedStage {
    pub model: StageModel,
    pub history: Vec<HistoryRow>,
    pub adam: Adam,
}

/// Resample every sample to the configured in-plane spacing.
pub fn prepare_samples(samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            if (s.stack.inplane_spacing_mm() - cfg.target_spacing_mm).abs() < 1e-9 {
                Ok(s.clone())
            } else {
                let (stack, labels) = resample_inplane(&s.stack, &s.labels, cfg.target_spacing_mm)?;
                Ok(Sample { stack, labels })
            }
        })
        .collect()
}

fn image_data(samples: &[Sample]) -> StageData {
    StageData { inputs: samples.iter().map(|s| image_input(&s.stack)).collect(), labels: samples.iter().map(|s| s.labels.clone()).collect() }
}

/// Seg probability maps for every sample, used as Ref-stage input.
pub fn seg_probmaps(seg: &StageModel, samples: &[Sample], mode: SliceMode) -> Result<Vec<Tensor<f32>>> {
    samples.iter().map(|s| softmax_probs(&seg.forward(&image_input(&s.stack), mode)?.logits)).collect()
}

/// Deterministic per-epoch stream so resumed runs replay the same draws.
fn epoch_rng(seed: u64, kind: StageKind, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = match kind {
        StageKind::Seg => 1u64,
        StageKind::Ref => 2,
        StageKind::Joint => 3,
    };
    rng.set_stream((tag << 32) | epoch as u64);
    rng
}

fn init_rng(seed: u64, kind: StageKind) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match kind {
        StageKind::Seg => 0x5e6,
        StageKind::Ref => 0x4ef,
        StageKind::Joint => 0x10e,
    });
    rng
}

fn shuffled(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Augmented network input and labels for one stack.
fn augmented(input: &Tensor<f32>, labels: &LabelStack, params: &AugmentParams) -> Result<(Tensor<f32>, LabelStack)> {
    let (s, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (ch, cw) = params.crop_size;
    let x = params.apply_planes(input.data(), s * c, h, w);
    let y = params.apply_labels(labels.labels(), s, h, w);
    Ok((Tensor::new(vec![s, c, ch, cw], x)?, LabelStack::new(Dims { s, h: ch, w: cw }, y)?))
}

#[derive(Clone, Copy, Debug, Default)]
struct StepLoss {
    total: f64,
    seg: f64,
    class: f64,
}

/// Loss of one stage on one (already augmented) stack; gradients when `trainable`.
fn stage_loss(
    model: &StageModel,
    x: Tensor<f32>,
    labels: &LabelStack,
    cfg: &TrainConfig,
    trainable: bool,
) -> Result<(StepLoss, Option<std::collections::BTreeMap<String, Tensor<f32>>>)> {
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, &model.params, trainable);
    let xv = g.input(x);
    let out = stage_forward(&mut g, &b.scope(""), xv, &model.net, cfg.slice_mode, model.classifier)?;
    let (loss, step) = if model.classifier {
        let gt = derive_presence(labels);
        let l = loss2_graph(&mut g, out.logits, out.presence.expect("classifier"), labels, &gt, cfg.lambda)?;
        let v = |x| g.value(x).item() as f64;
        (l.total, StepLoss { total: v(l.total), seg: v(l.seg), class: v(l.class) })
    } else {
        let probs = g.softmax(out.logits, 1)?;
        let l = loss1_graph(&mut g, probs, labels)?;
        let v = g.value(l).item() as f64;
        (l, StepLoss { total: v, seg: v, class: 0.0 })
    };
    if !trainable {
        return Ok((step, None));
    }
    let grads = g.backward(loss)?;
    Ok((step, Some(b.collect_grads(&g, &grads))))
}

/// Everything that must match for a checkpoint to be resumed; the epoch budget may grow.
fn resume_hash(cfg: &TrainConfig, model: &StageModel) -> String {
    hash_of(&(TrainConfig { epochs: 0, ..cfg.clone() }, &model.net, model.classifier))
}

fn stage_checkpoint_meta(kind: StageKind, model: &StageModel, cfg: &TrainConfig, epoch: usize, history: &[HistoryRow], adam: &Adam) -> serde_json::Value {
    serde_json::json!({
        "kind": kind,
        "epoch": epoch,
        "config_hash": resume_hash(cfg, model),
        "seed": cfg.seed,
        "rng": {"algorithm": "chacha8", "seed": cfg.seed, "stream_per_epoch": true},
        "adam_step": adam.step,
        "learning_rate": adam.lr,
        "network": model.net,
        "classifier": model.classifier,
        "slice_mode": cfg.slice_mode,
        "history": history,
    })
}

pub fn save_stage_checkpoint(path: &Path, kind: StageKind, stage: &TrainedStage, cfg: &TrainConfig, epoch: usize) -> Result<()> {
    let mut tensors = std::collections::BTreeMap::new();
    for (k, t) in stage.model.params.iter() {
        tensors.insert(format!("param.{k}"), t.clone());
    }
    for (k, t) in stage.adam.m.iter() {
        tensors.insert(format!("adam.m.{k}"), t.clone());
    }
    for (k, t) in stage.adam.v.iter() {
        tensors.insert(format!("adam.v.{k}"), t.clone());
    }
    let meta = stage_checkpoint_meta(kind, &stage.model, cfg, epoch, &stage.history, &stage.adam);
    write_archive(path, &Archive { tensors, meta })
}

/// A stage checkpoint as read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedStage {
    pub kind: StageKind,
    pub epoch: usize,
    pub config_hash: String,
    pub stage: TrainedStage,
}

pub fn load_stage_checkpoint(path: &Path) -> Result<LoadedStage> {
    let a = read_archive(path)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let field = |k: &str| a.meta.get(k).cloned().ok_or_else(|| bad(&format!("missing {k}")));
    let parse = |k: &str| -> Result<serde_json::Value> { field(k) };
    let kind: StageKind = serde_json::from_value(parse("kind")?).map_err(|_| bad("bad kind"))?;
    let epoch: usize = serde_json::from_value(parse("epoch")?).map_err(|_| bad("bad epoch"))?;
    let config_hash: String = serde_json::from_value(parse("config_hash")?).map_err(|_| bad("bad config_hash"))?;
    let net: NetworkConfig = serde_json::from_value(parse("network")?).map_err(|_| bad("bad network"))?;
    let classifier: bool = serde_json::from_value(parse("classifier")?).map_err(|_| bad("bad classifier"))?;
    let history: Vec<HistoryRow> = serde_json::from_value(parse("history")?).map_err(|_| bad("bad history"))?;
    let step: u64 = serde_json::from_value(parse("adam_step")?).map_err(|_| bad("bad adam_step"))?;
    let lr: f64 = serde_json::from_value(parse("learning_rate")?).map_err(|_| bad("bad learning_rate"))?;
    let mut params = ParamStore::new();
    let mut m = ParamStore::new();
    let mut v = ParamStore::new();
    for (k, t) in a.tensors {
        if let Some(n) = k.strip_prefix("param.") {
            params.insert(n, t);
        } else if let Some(n) = k.strip_prefix("adam.m.") {
            m.insert(n, t);
        } else if let Some(n) = k.strip_prefix("adam.v.") {
            v.insert(n, t);
        }
    }
    let model = StageModel { net, params, classifier };
    model.validate()?;
    let specs = network_specs(&model.net, classifier);
    m.validate(&specs)?;
    v.validate(&specs)?;
    let adam = Adam { step, m, v, ..Adam::new(lr, &ParamStore::new()) };
    Ok(LoadedStage { kind, epoch, config_hash, stage: TrainedStage { model, history, adam } })
}

/// Train one stage network on prepared inputs.
fn run_stage(
    kind: StageKind,
    model: StageModel,
    data: &StageData,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainedStage> {
    cfg.validate()?;
    if data.inputs.is_empty() {
        return Err(Error::EmptyDataset("no training stacks".into()));
    }
    let mut stage = TrainedStage { adam: Adam::new(cfg.learning_rate, &model.params), model, history: Vec::new() };
    let mut start = 0;
    let cfg_hash = resume_hash(cfg, &stage.model);
    if let (true, Some(path)) = (opts.resume, &opts.checkpoint) {
        if path.exists() {
            let loaded = load_stage_checkpoint(path)?;
            if loaded.kind != kind || loaded.config_hash != cfg_hash {
                return Err(Error::Checkpoint(format!(
                    "{} was written by a different configuration or stage",
                    path.display()
                )));
            }
            start = loaded.epoch;
            stage.model = loaded.stage.model;
            stage.history = loaded.stage.history;
            stage.adam = Adam { lr: cfg.learning_rate, ..loaded.stage.adam };
        }
    }
    for epoch in start..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, kind, epoch);
        let order = shuffled(&mut rng, data.inputs.len());
        let mut sum = StepLoss::default();
        for batch in order.chunks(cfg.batch_stacks) {
            let mut acc: Option<std::collections::BTreeMap<String, Tensor<f32>>> = None;
            for &i in batch {
                let x = &data.inputs[i];
                let aug = AugmentParams::sample(&mut rng, x.dim(2), x.dim(3), &cfg.augmentation)?;
                let (xa, ya) = augmented(x, &data.labels[i], &aug)?;
                let (l, grads) = stage_loss(&stage.model, xa, &ya, cfg, true)?;
                if !l.total.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                sum.total += l.total;
                sum.seg += l.seg;
                sum.class += l.class;
                let grads = grads.expect("trainable");
                acc = Some(match acc {
                    None => grads,
                    Some(mut a) => {
                        for (k, g) in grads {
                            for (x, y) in a.get_mut(&k).expect("same names").data_mut().iter_mut().zip(g.data()) {
                                *x += *y;
                            }
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("non-empty batch");
            if batch.len() > 1 {
                let inv = 1.0 / batch.len() as f32;
                for t in grads.values_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= inv);
                }
            }
            stage.adam.update(&mut stage.model.params, &grads);
        }
        let n = data.inputs.len() as f64;
        stage.history.push(HistoryRow {
            epoch: epoch + 1,
            stage: kind,
            loss_total: sum.total / n,
            loss_seg: sum.seg / n,
            loss_class: sum.class / n,
        });
        if let Some(path) = &opts.checkpoint {
            save_stage_checkpoint(path, kind, &stage, cfg, epoch + 1)?;
        }
    }
    Ok(stage)
}

/// Train the Seg stage of `cfg.variant` on images.
pub fn train_seg(samples: &[Sample], net: &NetworkConfig, cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainedStage> {
    let samples = prepare_samples(samples, cfg)?;
    let model = StageModel::init(net.with_in_channels(1), cfg.variant.seg_has_classifier(), &mut init_rng(cfg.seed, StageKind::Seg))?;
    run_stage(StageKind::Seg, model, &image_data(&samples), cfg, opts)
}

/// Train the Ref stage on probability maps from a frozen Seg stage.
pub fn train_ref(
    samples: &[Sample],
    seg: &StageModel,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainedStage> {
    if !cfg.variant.has_ref() {
        return Err(Error::InvalidConfig(format!("variant {:?} has no Ref stage", cfg.variant)));
    }
    let samples = prepare_samples(samples, cfg)?;
    let data = StageData { inputs: seg_probmaps(seg, &samples, cfg.slice_mode)?, labels: samples.iter().map(|s| s.labels.clone()).collect() };
    let model = StageModel::init(net.with_in_channels(N_CLASSES), cfg.variant.ref_has_classifier(), &mut init_rng(cfg.seed, StageKind::Ref))?;
    run_stage(StageKind::Ref, model, &data, cfg, opts)
}

#[derive(Clone, Debug)]
pub struct TrainedPipeline {
    pub pipeline: Pipeline,
    pub history: Vec<HistoryRow>,
}

/// Train every stage the variant needs. Sequential mode trains Seg, freezes it and
/// trains Ref on its probability maps; joint mode optimises both losses together.
pub fn train_pipeline(samples: &[Sample], net: &NetworkConfig, cfg: &TrainConfig, opts: &PipelineRunOptions) -> Result<TrainedPipeline> {
    cfg.validate()?;
    match cfg.stage_mode {
        StageMode::Sequential => {
            let seg = train_seg(samples, net, cfg, &opts.seg)?;
            let mut history = seg.history.clone();
            let refine = if cfg.variant.has_ref() {
                let r = train_ref(samples, &seg.model, net, cfg, &opts.refine)?;
                history.extend(r.history.iter().cloned());
                Some(r.model)
            } else {
                None
            };
            Ok(TrainedPipeline {
                pipeline: Pipeline { mode: cfg.slice_mode, variant: cfg.variant, seg: seg.model, refine },
                history,
            })
        }
        StageMode::Joint => train_joint(samples, net, cfg),
    }
}

#[derive(Clone, Debug, Default)]
pub struct PipelineRunOptions {
    pub seg: RunOptions,
    pub refine: RunOptions,
}

fn train_joint(samples: &[Sample], net: &NetworkConfig, cfg: &TrainConfig) -> Result<TrainedPipeline> {
    let samples = prepare_samples(samples, cfg)?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no training stacks".into()));
    }
    let data = image_data(&samples);
    let mut rng = init_rng(cfg.seed, StageKind::Joint);
    let seg_net = net.with_in_channels(1);
    let ref_net = net.with_in_channels(N_CLASSES);
    let ref_cls = cfg.variant.ref_has_classifier();
    let mut params = ParamStore::new();
    params.merge_prefixed("seg", &ParamStore::init(&network_specs(&seg_net, false), &mut rng));
    params.merge_prefixed("ref", &ParamStore::init(&network_specs(&ref_net, ref_cls), &mut rng));
    let mut adam = Adam::new(cfg.learning_rate, &params);
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, StageKind::Joint, epoch);
        let order = shuffled(&mut rng, data.inputs.len());
        let mut sum = StepLoss::default();
        for &i in &order {
            let x = &data.inputs[i];
            let aug = AugmentParams::sample(&mut rng, x.dim(2), x.dim(3), &cfg.augmentation)?;
            let (xa, ya) = augmented(x, &data.labels[i], &aug)?;
            let mut g = Graph::new();
            let b = Bound::bind(&mut g, &params, true);
            let xv = g.input(xa);
            let seg = stage_forward(&mut g, &b.scope("seg"), xv, &seg_net, cfg.slice_mode, false)?;
            let probs = g.softmax(seg.logits, 1)?;
            let l1 = loss1_graph(&mut g, probs, &ya)?;
            let r = stage_forward(&mut g, &b.scope("ref"), probs, &ref_net, cfg.slice_mode, ref_cls)?;
            let (l2, seg2, class2) = if ref_cls {
                let gt = derive_presence(&ya);
                let l = loss2_graph(&mut g, r.logits, r.presence.expect("classifier"), &ya, &gt, cfg.lambda)?;
                (l.total, l.seg, Some(l.class))
            } else {
                let rp = g.softmax(r.logits, 1)?;
                let l = loss1_graph(&mut g, rp, &ya)?;
                (l, l, None)
            };
            let total = g.add(l1, l2)?;
            let tv = g.value(total).item() as f64;
            if !tv.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            sum.total += tv;
            sum.seg += g.value(l1).item() as f64 + g.value(seg2).item() as f64;
            sum.class += class2.map(|c| g.value(c).item() as f64).unwrap_or(0.0);
            let grads = g.backward(total)?;
            adam.update(&mut params, &b.collect_grads(&g, &grads));
        }
        let n = order.len() as f64;
        history.push(HistoryRow { epoch: epoch + 1, stage: StageKind::Joint, loss_total: sum.total / n, loss_seg: sum.seg / n, loss_class: sum.class / n });
    }
    let seg = StageModel { net: seg_net, params: params.sub("seg"), classifier: false };
    let refine = StageModel { net: ref_net, params: params.sub("ref"), classifier: ref_cls };
    Ok(TrainedPipeline { pipeline: Pipeline { mode: cfg.slice_mode, variant: cfg.variant, seg, refine: Some(refine) }, history })
}

/// Mean un-augmented loss of a stage over full-resolution inputs.
pub fn validation_loss(kind: StageKind, model: &StageModel, samples: &[Sample], seg: Option<&StageModel>, cfg: &TrainConfig) -> Result<f64> {
    let samples = prepare_samples(samples, cfg)?;
    let inputs = match kind {
        StageKind::Ref => seg_probmaps(seg.ok_or_else(|| Error::Dependency("Ref validation needs a Seg stage".into()))?, &samples, cfg.slice_mode)?,
        _ => samples.iter().map(|s| image_input(&s.stack)).collect(),
    };
    let mut total = 0.0;
    for (x, s) in inputs.into_iter().zip(&samples) {
        total += stage_loss(model, x, &s.labels, cfg, false)?.0.total;
    }
    Ok(total / samples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(h: usize, w: usize) -> Vec<u8> {
        let (cy, cx) = (h as f64 * 0.45, w as f64 * 0.55);
        (0..h * w)
            .map(|p| {
                let (y, x) = ((p / w) as f64, (p % w) as f64);
                let r = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                if r < 6.0 { 3 } else if r < 9.0 { 2 } else if r < 12.0 { 1 } else { 0 }
            })
            .collect()
    }

    #[test]
    fn identity_and_centred_crop() {
        let (h, w) = (12, 10);
        let img: Vec<f32> = (0..h * w).map(|v| v as f32).collect();
        assert_eq!(AugmentParams::identity(h, w).apply_planes(&img, 1, h, w), img);
        let c = AugmentParams::centered_crop(h, w, (6, 4)).apply_planes(&img, 1, h, w);
        let expect: Vec<f32> = (3..9).flat_map(|i| (3..7).map(move |j| (i * w + j) as f32)).collect();
        assert_eq!(c, expect);
    }

    #[test]
    fn flips_are_involutions() {
        let (h, w) = (7, 9);
        let lab: Vec<u8> = (0..h * w).map(|p| p as u8).collect();
        let f = AugmentParams { flip_h: true, flip_v: true, ..AugmentParams::identity(h, w) };
        let once = f.apply_labels(&lab, 1, h, w);
        assert_ne!(once, lab);
        assert_eq!(f.apply_labels(&once, 1, h, w), lab);
        assert_eq!(once[0], lab[h * w - 1]);
    }

    #[test]
    fn sampled_parameters_stay_in_range() {
        let cfg = AugmentConfig { crop_size: (32, 40), ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut fh, mut fv, mut big) = (0, 0, 0);
        for _ in 0..1000 {
            let p = AugmentParams::sample(&mut rng, 48, 48, &cfg).unwrap();
            assert!(p.angle_rad.abs() <= 30f64.to_radians() + 1e-12);
            assert!(p.shift.0.abs() <= 4.8 + 1e-9 && p.shift.1.abs() <= 4.8 + 1e-9);
            assert!(p.crop_origin.0 <= 16 && p.crop_origin.1 <= 8);
            assert_eq!(p.crop_size, (32, 40));
            fh += p.flip_h as usize;
            fv += p.flip_v as usize;
            big += (p.angle_rad.abs() > 25f64.to_radians()) as usize;
        }
        assert!((400..600).contains(&fh) && (400..600).contains(&fv), "{fh} {fv}");
        assert!(big > 50);
    }

    #[test]
    fn image_and_labels_stay_aligned() {
        let (h, w) = (48, 48);
        let lab = disk(h, w);
        let img: Vec<f32> = lab.iter().map(|&v| v as f32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = AugmentConfig { crop_size: (40, 40), ..AugmentConfig::default() };
        let (mut agree, mut total) = (0, 0);
        for _ in 0..50 {
            let (x, y) = augment(&img, &lab, h, w, &cfg, &mut rng).unwrap();
            assert!(y.iter().all(|v| *v <= 3));
            agree += x.iter().zip(&y).filter(|(a, b)| a.round() as u8 == **b).count();
            total += y.len();
        }
        assert!(agree as f64 / total as f64 >= 0.99, "{agree}/{total}");
    }

    #[test]
    fn augmentation_is_seeded_and_checks_crop() {
        let (h, w) = (20, 20);
        let lab = disk(h, w);
        let img: Vec<f32> = lab.iter().map(|&v| v as f32 * 0.5).collect();
        let cfg = AugmentConfig { crop_size: (16, 16), ..AugmentConfig::default() };
        let a = augment(&img, &lab, h, w, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment(&img, &lab, h, w, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let big = AugmentConfig { crop_size: (24, 16), ..cfg };
        assert!(augment(&img, &lab, h, w, &big, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new(vec![3], vec![1.0f32, -2.0, 0.5]).unwrap());
        let mut adam = Adam::new(0.01, &params);
        let mut grads = std::collections::BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![3], vec![0.3f32, -4.0, 0.0]).unwrap());
        adam.update(&mut params, &grads);
        // Bias correction makes the first step lr * sign(g).
        let got = params.get("w").unwrap().data().to_vec();
        let want = [0.99f32, -1.99, 0.5];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-6, "{got:?}");
        }
        assert_eq!(adam.step, 1);
        let m = adam.m.get("w").unwrap().data()[1];
        let v = adam.v.get("w").unwrap().data()[1];
        assert!((m - -0.4).abs() < 1e-6 && (v - 0.016).abs() < 1e-6);
    }

    #[test]
    fn non_finite_loss_is_a_divergence() {
        let net = NetworkConfig { encoder_channels: vec![4, 8], classifier_hidden: 4, ..NetworkConfig::desk() };
        let mut model = StageModel::init(net.with_in_channels(1), false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let name = model.params.iter().next().unwrap().0.to_string();
        model.params.get_mut(&name).unwrap().data_mut()[0] = f32::NAN;
        let dims = Dims { s: 2, h: 16, w: 16 };
        let data = StageData {
            inputs: vec![Tensor::zeros(&[2, 1, 16, 16])],
            labels: vec![LabelStack::new(dims, vec![0; 512]).unwrap()],
        };
        let cfg = TrainConfig {
            epochs: 1,
            variant: Variant::SegOnly,
            augmentation: AugmentConfig { crop_size: (16, 16), ..AugmentConfig::default() },
            ..TrainConfig::desk()
        };
        let err = run_stage(StageKind::Seg, model, &data, &cfg, &RunOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 0 }), "{err}");
    }

    #[test]
    fn history_csv_layout() {
        let rows = [HistoryRow { epoch: 1, stage: StageKind::Ref, loss_total: 0.5, loss_seg: 0.4, loss_class: 1.0 }];
        let s = history_csv(&rows, Some(("abc", 2)));
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "# config_hash=abc seed=2");
        assert_eq!(lines[1], HISTORY_HEADER);
        assert!(lines[2].starts_with("1,ref,0.5"));
    }
}
