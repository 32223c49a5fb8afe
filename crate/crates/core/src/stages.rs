//! The two-stage pipeline: losses for each stage, the presence gate, and the
//! classifier-gated inference rule.

use serde::{Deserialize, Serialize};
use slicefusion_autograd::{Float, Graph, Tensor, Var};

use crate::dataio::{LabelStack, PresenceLabels, SliceStack, N_CLASSES};
use crate::error::{Error, Result};
use crate::fusion_net::{network_specs, softmax_probs, stage_forward, NetworkConfig, SliceMode};
use crate::nn_blocks::{Bound, ParamStore, N_PRESENCE};

pub const DEFAULT_LAMBDA: f64 = 0.1;

/// `g_i = 1` iff `p_i > 0.5` (strict).
pub fn gate<F: Float>(p: &[F]) -> [bool; 3] {
    let half = F::from_f64(0.5);
    [p[0] > half, p[1] > half, p[2] > half]
}

/// Gates for every row of a `[S, 3]` presence tensor.
pub fn gates<F: Float>(presence: &Tensor<F>) -> Vec<[bool; 3]> {
    presence.data().chunks_exact(N_PRESENCE).map(gate).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub seg: f64,
    pub class: f64,
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Loss2Vars {
    pub total: Var,
    pub seg: Var,
    pub class: Var,
}

fn check_aligned(shape: &[usize], labels: &LabelStack) -> Result<(usize, usize, usize, usize)> {
    let d = labels.dims();
    match shape {
        &[s, c, h, w] if s == d.s && h == d.h && w == d.w && c == N_CLASSES => Ok((s, c, h, w)),
        _ => Err(Error::ShapeMismatch(format!("class maps {shape:?} vs labels {d:?}"))),
    }
}

/// Mean over slices and pixels of `-ln p[true class]` for probabilities `[S, 4, H, W]`.
pub fn loss1_graph<F: Float>(g: &mut Graph<F>, probs: Var, labels: &LabelStack) -> Result<Var> {
    let (s, c, h, w) = check_aligned(g.shape(probs), labels)?;
    let hw = h * w;
    let mut target = vec![F::zero(); s * c * hw];
    for si in 0..s {
        for (p, &l) in labels.slice(si).iter().enumerate() {
            target[(si * c + l as usize) * hw + p] = F::one();
        }
    }
    let weight = vec![F::one(); target.len()];
    Ok(g.cross_entropy(probs, target, weight, F::from_f64(1.0 / (s * hw) as f64))?)
}

/// Classifier-gated multitask loss on refined logits `[S, 4, H, W]` and presence
/// probabilities `[S, 3]`. The gate is read from the presence values and enters as
/// a constant weight, so the segmentation term sends no gradient to the classifier.
pub fn loss2_graph<F: Float>(
    g: &mut Graph<F>,
    logits: Var,
    presence: Var,
    labels: &LabelStack,
    presence_gt: &[PresenceLabels],
    lambda: f64,
) -> Result<Loss2Vars> {
    let (s, c, h, w) = check_aligned(g.shape(logits), labels)?;
    if g.shape(presence) != [s, N_PRESENCE] || presence_gt.len() != s {
        return Err(Error::ShapeMismatch(format!(
            "presence {:?} / {} targets for {s} slices",
            g.shape(presence),
            presence_gt.len()
        )));
    }
    let hw = h * w;
    let gate = gates(g.value(presence));
    let probs = g.softmax(logits, 1)?;
    let mut target = vec![F::zero(); s * c * hw];
    let mut weight = vec![F::zero(); s * c * hw];
    let pixel_w = F::from_f64(1.0 / hw as f64);
    for si in 0..s {
        let lab = labels.slice(si);
        for ch in 1..c {
            if !gate[si][ch - 1] {
                continue;
            }
            let base = (si * c + ch) * hw;
            for p in 0..hw {
                weight[base + p] = pixel_w;
                if lab[p] as usize == ch {
                    target[base + p] = F::one();
                }
            }
        }
    }
    let inv_s = F::from_f64(1.0 / s as f64);
    let seg = g.binary_cross_entropy(probs, target, weight, inv_s)?;
    let cls_target = presence_gt.iter().flat_map(|p| p.0.map(|b| if b { F::one() } else { F::zero() })).collect();
    let class = g.binary_cross_entropy(presence, cls_target, vec![F::one(); s * N_PRESENCE], inv_s)?;
    let weighted = g.scale(class, F::from_f64(lambda));
    let total = g.add(seg, weighted)?;
    Ok(Loss2Vars { total, seg, class })
}

pub fn loss1<F: Float>(probmaps: &Tensor<F>, labels: &LabelStack) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(probmaps.clone());
    let l = loss1_graph(&mut g, p, labels)?;
    Ok(g.value(l).item().as_f64())
}

pub fn loss2<F: Float>(
    ref_logits: &Tensor<F>,
    presence: &Tensor<F>,
    labels: &LabelStack,
    presence_gt: &[PresenceLabels],
    lambda: f64,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let l = g.input(ref_logits.clone());
    let p = g.input(presence.clone());
    let v = loss2_graph(&mut g, l, p, labels, presence_gt, lambda)?;
    let val = |v: Var| g.value(v).item().as_f64();
    Ok(LossBreakdown { total: val(v.total), seg: val(v.seg), class: val(v.class), lambda })
}

/// Per-pixel argmax over the class axis of `[S, 4, H, W]`, ties to the lower index.
pub fn argmax_labels<F: Float>(maps: &Tensor<F>) -> Result<LabelStack> {
    let (s, c, h, w) = match maps.shape() {
        &[s, c, h, w] => (s, c, h, w),
        other => return Err(Error::ShapeMismatch(format!("class maps must be [S, C, H, W], got {other:?}"))),
    };
    let hw = h * w;
    let d = maps.data();
    let mut out = Vec::with_capacity(s * hw);
    for si in 0..s {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(si * c + k) * hw + p] > d[(si * c + best) * hw + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    LabelStack::new(crate::dataio::Dims { s, h, w }, out)
}

/// Softmax, zero every foreground class whose gate is closed, renormalise over the
/// remaining channels (background always stays), then argmax.
pub fn gated_inference<F: Float>(ref_logits: &Tensor<F>, presence: &Tensor<F>) -> Result<LabelStack> {
    let (s, c, h, w) = match ref_logits.shape() {
        &[s, c, h, w] if c == N_CLASSES => (s, c, h, w),
        other => return Err(Error::ShapeMismatch(format!("logits must be [S, 4, H, W], got {other:?}"))),
    };
    if presence.shape() != [s, N_PRESENCE] {
        return Err(Error::ShapeMismatch(format!("presence {:?} for {s} slices", presence.shape())));
    }
    let mut probs = softmax_probs(ref_logits)?;
    let hw = h * w;
    let gate = gates(presence);
    let data = probs.data_mut();
    for si in 0..s {
        for p in 0..hw {
            let mut z = F::zero();
            for k in 0..c {
                let idx = (si * c + k) * hw + p;
                if k > 0 && !gate[si][k - 1] {
                    data[idx] = F::zero();
                }
                z += data[idx];
            }
            for k in 0..c {
                data[(si * c + k) * hw + p] /= z;
            }
        }
    }
    argmax_labels(&probs)
}

/// How the final label map is produced from the trained stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Seg stage only, plain argmax.
    SegOnly,
    /// Seg then Ref; with `multitask` the Ref stage carries the presence classifier
    /// and its output is gated.
    SegRef { multitask: bool },
    /// Seg stage with the presence classifier attached, gated output, no Ref stage.
    SegMultitask,
}

impl Variant {
    pub fn seg_has_classifier(self) -> bool {
        matches!(self, Variant::SegMultitask)
    }

    pub fn has_ref(self) -> bool {
        matches!(self, Variant::SegRef { .. })
    }

    pub fn ref_has_classifier(self) -> bool {
        matches!(self, Variant::SegRef { multitask: true })
    }
}

/// One stage network with its parameters.
#[derive(Clone, Debug)]
pub struct StageModel {
    pub net: NetworkConfig,
    pub params: ParamStore<f32>,
    pub classifier: bool,
}

#[derive(Clone, Debug)]
pub struct StageResult {
    pub logits: Tensor<f32>,
    pub presence: Option<Tensor<f32>>,
}

impl StageModel {
    pub fn init(net: NetworkConfig, classifier: bool, rng: &mut impl rand::Rng) -> Result<Self> {
        net.validate()?;
        let params = ParamStore::init(&network_specs(&net, classifier), rng);
        Ok(Self { net, params, classifier })
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.params.validate(&network_specs(&self.net, self.classifier))
    }

    /// Inference-only forward pass on `x [S, C, H, W]`.
    pub fn forward(&self, x: &Tensor<f32>, mode: SliceMode) -> Result<StageResult> {
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &self.params, false);
        let xv = g.input(x.clone());
        let out = stage_forward(&mut g, &b.scope(""), xv, &self.net, mode, self.classifier)?;
        Ok(StageResult {
            logits: g.value(out.logits).clone(),
            presence: out.presence.map(|p| g.value(p).clone()),
        })
    }
}

/// Network input `[S, 1, H, W]` from a z-scored stack.
pub fn image_input(stack: &SliceStack) -> Tensor<f32> {
    let d = stack.dims();
    let z = stack.zscore();
    Tensor::new(vec![d.s, 1, d.h, d.w], z.voxels().to_vec()).expect("dims match voxel count")
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub mode: SliceMode,
    pub variant: Variant,
    pub seg: StageModel,
    pub refine: Option<StageModel>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub probmaps: Tensor<f32>,
    pub ref_logits: Option<Tensor<f32>>,
    pub presence: Option<Tensor<f32>>,
    pub labels: LabelStack,
}

impl Pipeline {
    pub fn validate(&self) -> Result<()> {
        self.seg.validate()?;
        if self.seg.classifier != self.variant.seg_has_classifier() {
            return Err(Error::InvalidConfig("Seg stage classifier does not match the variant".into()));
        }
        match (&self.refine, self.variant.has_ref()) {
            (Some(r), true) => {
                r.validate()?;
                if r.net.in_channels != N_CLASSES || r.classifier != self.variant.ref_has_classifier() {
                    return Err(Error::InvalidConfig("Ref stage does not match the variant".into()));
                }
                Ok(())
            }
            (None, false) => Ok(()),
            _ => Err(Error::InvalidConfig("Ref stage presence does not match the variant".into())),
        }
    }

    /// Ref stage on Seg probability maps only.
    pub fn ref_forward(&self, probmaps: &Tensor<f32>) -> Result<StageResult> {
        let r = self.refine.as_ref().ok_or_else(|| Error::InvalidConfig("variant has no Ref stage".into()))?;
        r.forward(probmaps, self.mode)
    }

    pub fn forward(&self, stack: &SliceStack) -> Result<PipelineOutput> {
        let seg = self.seg.forward(&image_input(stack), self.mode)?;
        let probmaps = softmax_probs(&seg.logits)?;
        match self.variant {
            Variant::SegOnly => {
                let labels = argmax_labels(&probmaps)?;
                Ok(PipelineOutput { probmaps, ref_logits: None, presence: None, labels })
            }
            Variant::SegMultitask => {
                let presence = seg.presence.expect("classifier attached");
                let labels = gated_inference(&seg.logits, &presence)?;
                Ok(PipelineOutput { probmaps, ref_logits: None, presence: Some(presence), labels })
            }
            Variant::SegRef { multitask } => {
                let r = self.ref_forward(&probmaps)?;
                let labels = if multitask {
                    gated_inference(&r.logits, r.presence.as_ref().expect("classifier attached"))?
                } else {
                    argmax_labels(&softmax_probs(&r.logits)?)?
                };
                Ok(PipelineOutput { probmaps, ref_logits: Some(r.logits), presence: r.presence, labels })
            }
        }
    }
}

/// Seg probability maps, then Ref logits and presence probabilities from those maps.
pub fn pipeline_forward(
    images: &SliceStack,
    seg: &StageModel,
    refine: &StageModel,
    mode: SliceMode,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let p = Pipeline { mode, variant: Variant::SegRef { multitask: true }, seg: seg.clone(), refine: Some(refine.clone()) };
    let out = p.forward(images)?;
    let presence = out.presence.ok_or_else(|| Error::InvalidConfig("Ref stage has no classifier".into()))?;
    Ok((out.probmaps, out.ref_logits.expect("Ref stage ran"), presence))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{derive_presence, Dims};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use slicefusion_autograd::bce;

    fn random_labels(rng: &mut ChaCha8Rng, s: usize, h: usize, w: usize) -> LabelStack {
        let dims = Dims { s, h, w };
        LabelStack::new(dims, (0..dims.len()).map(|_| rng.random_range(0..4)).collect()).unwrap()
    }

    #[test]
    fn gate_rule() {
        assert_eq!(gate(&[0.9, 0.2, 0.6]), [true, false, true]);
        assert_eq!(gate(&[0.5f64, 0.5, 0.5]), [false, false, false]);
        assert_eq!(gate(&[0.51f32, 0.99, 0.7]), [true, true, true]);
    }

    #[test]
    fn loss1_limits_and_oracle() {
        let labels = LabelStack::new(Dims { s: 1, h: 8, w: 8 }, vec![2; 64]).unwrap();
        let uniform = Tensor::<f64>::full(&[1, 4, 8, 8], 0.25);
        assert!((loss1(&uniform, &labels).unwrap() - 4f64.ln()).abs() < 1e-6);
        let sharp = Tensor::<f64>::from_fn(&[1, 4, 8, 8], |i| if i / 64 == 2 { 1.0 - 3e-12 } else { 1e-12 });
        assert!(loss1(&sharp, &labels).unwrap() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels = random_labels(&mut rng, 2, 8, 8);
        let logits = Tensor::<f64>::from_fn(&[2, 4, 8, 8], |_| rng.random_range(-3.0..3.0));
        let probs = softmax_probs(&logits).unwrap();
        let mut acc = 0.0;
        for s in 0..2 {
            for p in 0..64 {
                let l = labels.slice(s)[p] as usize;
                acc -= probs.data()[(s * 4 + l) * 64 + p].max(1e-12).ln();
            }
        }
        assert!((loss1(&probs, &labels).unwrap() - acc / 128.0).abs() < 1e-7);
    }

    /// Scalar-loop evaluation of the gated loss.
    fn loss2_oracle(logits: &Tensor<f64>, p: &[[f64; 3]], labels: &LabelStack, gt: &[PresenceLabels]) -> (f64, f64) {
        let d = labels.dims();
        let hw = d.h * d.w;
        let (mut seg, mut class) = (0.0, 0.0);
        for s in 0..d.s {
            for i in 0..3 {
                let gate = if p[s][i] > 0.5 { 1.0 } else { 0.0 };
                let mut ce = 0.0;
                for px in 0..hw {
                    let z: Vec<f64> = (0..4).map(|k| logits.data()[(s * 4 + k) * hw + px]).collect();
                    let m = z.iter().cloned().fold(f64::MIN, f64::max);
                    let e: f64 = z.iter().map(|v| (v - m).exp()).sum();
                    let prob = (z[i + 1] - m).exp() / e;
                    let t = if labels.slice(s)[px] as usize == i + 1 { 1.0 } else { 0.0 };
                    ce += -(t * prob.max(1e-12).ln() + (1.0 - t) * (1.0 - prob).max(1e-12).ln());
                }
                seg += gate * ce / hw as f64;
                let y = if gt[s].0[i] { 1.0 } else { 0.0 };
                class += -(y * p[s][i].ln() + (1.0 - y) * (1.0 - p[s][i]).ln());
            }
        }
        (seg / d.s as f64, class / d.s as f64)
    }

    #[test]
    fn loss2_matches_oracle_for_every_gate_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = random_labels(&mut rng, 2, 8, 8);
        let gt = derive_presence(&labels);
        let logits = Tensor::<f64>::from_fn(&[2, 4, 8, 8], |_| rng.random_range(-2.0..2.0));
        for pattern in 0..8u32 {
            let mut p = [[0.0; 3]; 2];
            for s in 0..2 {
                for i in 0..3 {
                    let on = pattern >> i & 1 == 1;
                    p[s][i] = if on { rng.random_range(0.51..0.99) } else { rng.random_range(0.01..0.5) };
                }
            }
            let pt = Tensor::new(vec![2, 3], p.iter().flatten().copied().collect()).unwrap();
            let lb = loss2(&logits, &pt, &labels, &gt, 0.1).unwrap();
            let (seg, class) = loss2_oracle(&logits, &p, &labels, &gt);
            assert!((lb.seg - seg).abs() < 1e-7, "pattern {pattern}");
            assert!((lb.class - class).abs() < 1e-7);
            assert!((lb.total - (seg + 0.1 * class)).abs() < 1e-7);
            assert_eq!(lb.total, lb.seg + 0.1 * lb.class);
            if pattern == 0 {
                assert_eq!(lb.seg, 0.0);
            }
            let l0 = loss2(&logits, &pt, &labels, &gt, 0.0).unwrap();
            assert_eq!(l0.total, l0.seg);
        }
        assert!((bce(0.3f64, 1.0) + 0.3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn seg_term_sends_no_gradient_to_classifier() {
        let cfg = NetworkConfig { in_channels: 4, encoder_channels: vec![4, 8], ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = StageModel::init(cfg.clone(), true, &mut rng).unwrap();
        let labels = random_labels(&mut rng, 2, 8, 8);
        let gt = derive_presence(&labels);
        let x = Tensor::<f32>::from_fn(&[2, 4, 8, 8], |_| rng.random_range(0.0..1.0));
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &model.params, true);
        let xv = g.input(x);
        let out = stage_forward(&mut g, &b.scope(""), xv, &cfg, SliceMode::AllSlice, true).unwrap();
        let l = loss2_graph(&mut g, out.logits, out.presence.unwrap(), &labels, &gt, 0.1).unwrap();
        let grads = g.backward(l.seg).unwrap();
        let all = b.collect_grads(&g, &grads);
        for (k, t) in &all {
            if k.starts_with("cls.") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{k}");
            }
        }
        let grads = g.backward(l.class).unwrap();
        assert!(b.collect_grads(&g, &grads)["cls.fc2.w"].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gated_inference_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let logits = Tensor::<f32>::from_fn(&[2, 4, 8, 8], |_| rng.random_range(-3.0..3.0));
            let presence = Tensor::<f32>::from_fn(&[2, 3], |_| rng.random_range(0.0..1.0));
            let out = gated_inference(&logits, &presence).unwrap();
            for s in 0..2 {
                for c in 1..4u8 {
                    if out.slice(s).contains(&c) {
                        assert!(presence.data()[s * 3 + c as usize - 1] > 0.5);
                    }
                }
            }
        }
        let logits = Tensor::<f32>::from_fn(&[1, 4, 8, 8], |_| rng.random_range(-3.0..3.0));
        let low = Tensor::new(vec![1, 3], vec![0.3f32, 0.1, 0.49]).unwrap();
        assert!(gated_inference(&logits, &low).unwrap().labels().iter().all(|&v| v == 0));
        let high = Tensor::new(vec![1, 3], vec![0.6f32, 0.9, 0.51]).unwrap();
        assert_eq!(gated_inference(&logits, &high).unwrap(), argmax_labels(&softmax_probs(&logits).unwrap()).unwrap());
        // ties go to the lower class
        let tie = Tensor::<f32>::zeros(&[1, 4, 8, 8]);
        assert!(argmax_labels(&tie).unwrap().labels().iter().all(|&v| v == 0));
    }

    #[test]
    fn ref_stage_sees_only_probability_maps() {
        let net = NetworkConfig { encoder_channels: vec![4, 8], ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seg = StageModel::init(net.clone(), false, &mut rng).unwrap();
        let refine = StageModel::init(net.with_in_channels(4), true, &mut rng).unwrap();
        let p = Pipeline { mode: SliceMode::AllSlice, variant: Variant::SegRef { multitask: true }, seg, refine: Some(refine) };
        p.validate().unwrap();
        let dims = Dims { s: 3, h: 16, w: 16 };
        let a = SliceStack::new(dims, (0..dims.len()).map(|_| rng.random_range(-1.0..1.0)).collect(), 1.3, 10.0, "a").unwrap();
        let (probs, logits, presence) = pipeline_forward(&a, &p.seg, p.refine.as_ref().unwrap(), p.mode).unwrap();
        assert_eq!(probs.shape(), &[3, 4, 16, 16]);
        assert_eq!(logits.shape(), &[3, 4, 16, 16]);
        assert_eq!(presence.shape(), &[3, 3]);
        let again = p.ref_forward(&probs).unwrap();
        assert_eq!(again.logits, logits);
    }
}
