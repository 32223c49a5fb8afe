//! One stage network: SK U-Net encoder, two-transformer bottleneck, SK U-Net
//! decoder with skip connections, and an optional presence classifier on the
//! post-transformer bottleneck.
//!
//! Slices travel along the batch axis through every convolution, so the only
//! place slices see each other is the inter-slice attention layer.

use serde::{Deserialize, Serialize};
use slicefusion_autograd::{Float, Graph, Tensor, Var};

use crate::dataio::N_CLASSES;
use crate::error::{Error, Result};
use crate::nn_blocks::{
    attention_specs, classifier_head, classifier_specs, from_tokens, inter_slice_attention, intra_slice_attention,
    join, nchw, singleton_slice_attention, sk_block, sk_block_specs, to_tokens, AttentionConfig, Init, ParamSpec,
    Scope, SkConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformerOrder {
    InterThenIntra,
    IntraThenInter,
}

/// Whether the inter-slice layer sees the whole stack or each slice alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceMode {
    SingleSlice,
    AllSlice,
}

impl SliceMode {
    pub fn tag(self) -> &'static str {
        match self {
            SliceMode::SingleSlice => "SS",
            SliceMode::AllSlice => "AS",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    pub encoder_channels: Vec<usize>,
    pub attention: AttentionConfig,
    pub sk: SkConfig,
    pub order: TransformerOrder,
    pub classifier_hidden: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            n_classes: N_CLASSES,
            encoder_channels: vec![16, 32, 64, 128],
            attention: AttentionConfig::default(),
            sk: SkConfig::default(),
            order: TransformerOrder::InterThenIntra,
            classifier_hidden: 32,
        }
    }
}

impl NetworkConfig {
    /// Narrower network with dilated large kernels, sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            encoder_channels: vec![8, 16, 32, 64],
            sk: SkConfig { large_kernel: crate::nn_blocks::LargeKernel::Dilated3, ..SkConfig::default() },
            ..Self::default()
        }
    }

    pub fn with_in_channels(&self, in_channels: usize) -> Self {
        Self { in_channels, ..self.clone() }
    }

    pub fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Spatial sizes must halve cleanly at every pooling step.
    pub fn divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.encoder_channels.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.levels() < 2 {
            return bad(format!("need at least 2 encoder levels, got {:?}", self.encoder_channels));
        }
        if self.encoder_channels.contains(&0) || self.in_channels == 0 || self.n_classes == 0 {
            return bad("channel counts must be positive".into());
        }
        let d = self.bottleneck_channels();
        if self.attention.n_heads == 0 || !d.is_multiple_of(self.attention.n_heads) {
            return bad(format!("bottleneck width {d} not divisible by {} heads", self.attention.n_heads));
        }
        if self.attention.mlp_ratio == 0 || self.classifier_hidden == 0 {
            return bad("mlp_ratio and classifier_hidden must be positive".into());
        }
        Ok(())
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (s, c, h, w) = match shape {
            &[s, c, h, w] => (s, c, h, w),
            _ => return Err(Error::ShapeMismatch(format!("stage input must be [S, C, H, W], got {shape:?}"))),
        };
        if s == 0 {
            return Err(Error::ShapeMismatch("stage input has no slices".into()));
        }
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!("stage expects {} input channels, got {c}", self.in_channels)));
        }
        let k = self.divisor();
        if h % k != 0 || w % k != 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!("spatial size {h}x{w} not divisible by {k}")));
        }
        Ok(())
    }
}

/// Every parameter of one stage network. The classifier lives under `cls`.
pub fn network_specs(cfg: &NetworkConfig, with_classifier: bool) -> Vec<ParamSpec> {
    let ch = &cfg.encoder_channels;
    let mut specs = Vec::new();
    let mut c_prev = cfg.in_channels;
    for (i, &c) in ch.iter().enumerate() {
        specs.extend(sk_block_specs(&format!("enc{i}"), c_prev, c, &cfg.sk));
        c_prev = c;
    }
    let d = cfg.bottleneck_channels();
    specs.extend(attention_specs("bottleneck.inter", d, &cfg.attention));
    specs.extend(attention_specs("bottleneck.intra", d, &cfg.attention));
    for i in (0..ch.len() - 1).rev() {
        let (c, c_up) = (ch[i], ch[i + 1]);
        let p = format!("dec{i}");
        specs.push(ParamSpec {
            name: join(&p, "merge.w"),
            shape: vec![c, c + c_up, 1, 1],
            init: Init::FanIn(c + c_up),
        });
        specs.push(ParamSpec { name: join(&p, "merge.b"), shape: vec![c], init: Init::Zeros });
        specs.extend(sk_block_specs(&join(&p, "sk"), c, c, &cfg.sk));
    }
    specs.push(ParamSpec { name: "head.w".into(), shape: vec![cfg.n_classes, ch[0], 1, 1], init: Init::FanIn(ch[0]) });
    specs.push(ParamSpec { name: "head.b".into(), shape: vec![cfg.n_classes], init: Init::Zeros });
    if with_classifier {
        specs.extend(classifier_specs("cls", d, cfg.classifier_hidden));
    }
    specs
}

#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    /// `[S, n_classes, H, W]`.
    pub logits: Var,
    /// Post-transformer bottleneck `[S, C, H_b, W_b]`.
    pub bottleneck: Var,
    /// `[S, 3]` presence probabilities when the classifier is attached.
    pub presence: Option<Var>,
}

/// Inter- then intra-slice attention (or the configured order) on a bottleneck map.
pub fn dual_transformer<F: Float>(
    g: &mut Graph<F>,
    p: &Scope,
    x: Var,
    cfg: &NetworkConfig,
    mode: SliceMode,
) -> Result<Var> {
    let (_, _, h, w) = nchw(g, x)?;
    let mut t = to_tokens(g, x)?;
    let inter = p.child("inter");
    let intra = p.child("intra");
    let apply_inter = |g: &mut Graph<F>, t: Var| match mode {
        SliceMode::AllSlice => inter_slice_attention(g, &inter, t, &cfg.attention),
        SliceMode::SingleSlice => singleton_slice_attention(g, &inter, t, &cfg.attention),
    };
    match cfg.order {
        TransformerOrder::InterThenIntra => {
            t = apply_inter(g, t)?;
            t = intra_slice_attention(g, &intra, t, &cfg.attention)?;
        }
        TransformerOrder::IntraThenInter => {
            t = intra_slice_attention(g, &intra, t, &cfg.attention)?;
            t = apply_inter(g, t)?;
        }
    }
    from_tokens(g, t, h, w)
}

pub fn stage_forward<F: Float>(
    g: &mut Graph<F>,
    p: &Scope,
    x: Var,
    cfg: &NetworkConfig,
    mode: SliceMode,
    with_classifier: bool,
) -> Result<StageOutput> {
    cfg.check_input(g.shape(x))?;
    let levels = cfg.levels();
    let mut skips = Vec::with_capacity(levels);
    let mut h = x;
    for i in 0..levels {
        if i > 0 {
            h = g.avg_pool2(h)?;
        }
        h = sk_block(g, &p.child(&format!("enc{i}")), h, &cfg.sk)?;
        skips.push(h);
    }
    let bottleneck = dual_transformer(g, &p.child("bottleneck"), h, cfg, mode)?;
    let mut d = bottleneck;
    for i in (0..levels - 1).rev() {
        let dp = p.child(&format!("dec{i}"));
        let up = g.upsample2(d)?;
        let cat = g.concat_channels(up, skips[i])?;
        let m = g.conv2d(cat, dp.get("merge.w")?, 0, 1)?;
        let m = g.add_channel_bias(m, dp.get("merge.b")?)?;
        d = sk_block(g, &dp.child("sk"), m, &cfg.sk)?;
    }
    let logits = g.conv2d(d, p.get("head.w")?, 0, 1)?;
    let logits = g.add_channel_bias(logits, p.get("head.b")?)?;
    let presence = if with_classifier { Some(classifier_head(g, &p.child("cls"), bottleneck)?) } else { None };
    Ok(StageOutput { logits, bottleneck, presence })
}

/// Per-pixel softmax over the class axis of `[S, C, H, W]` logits.
pub fn softmax_probs<F: Float>(logits: &Tensor<F>) -> Result<Tensor<F>> {
    let (s, c, h, w) = match logits.shape() {
        &[s, c, h, w] => (s, c, h, w),
        other => return Err(Error::ShapeMismatch(format!("logits must be [S, C, H, W], got {other:?}"))),
    };
    let hw = h * w;
    let src = logits.data();
    let mut out = vec![F::zero(); src.len()];
    for si in 0..s {
        let base = si * c * hw;
        for p in 0..hw {
            let mut m = F::neg_infinity();
            for k in 0..c {
                m = m.max(src[base + k * hw + p]);
            }
            let mut z = F::zero();
            for k in 0..c {
                let e = (src[base + k * hw + p] - m).exp();
                out[base + k * hw + p] = e;
                z += e;
            }
            for k in 0..c {
                out[base + k * hw + p] /= z;
            }
        }
    }
    Ok(Tensor::new(logits.shape().to_vec(), out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_blocks::{Bound, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetworkConfig {
        NetworkConfig { encoder_channels: vec![4, 8, 8], ..Default::default() }
    }

    fn run(cfg: &NetworkConfig, store: &ParamStore<f32>, x: &Tensor<f32>, mode: SliceMode) -> (Tensor<f32>, Tensor<f32>) {
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, store, false);
        let xv = g.input(x.clone());
        let out = stage_forward(&mut g, &b.scope(""), xv, cfg, mode, true).unwrap();
        (g.value(out.logits).clone(), g.value(out.presence.unwrap()).clone())
    }

    #[test]
    fn shapes_and_parameter_count_independent_of_slices() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let specs = network_specs(&cfg, true);
        let store = ParamStore::<f32>::init(&specs, &mut rng);
        store.validate(&specs).unwrap();
        for s in [1, 3] {
            let x = Tensor::from_fn(&[s, 1, 16, 16], |_| rng.random_range(-1.0..1.0));
            let (logits, presence) = run(&cfg, &store, &x, SliceMode::AllSlice);
            assert_eq!(logits.shape(), &[s, 4, 16, 16]);
            assert_eq!(presence.shape(), &[s, 3]);
        }
    }

    #[test]
    fn slice_permutation_equivariance() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = ParamStore::<f32>::init(&network_specs(&cfg, true), &mut rng);
        let x = Tensor::from_fn(&[4, 1, 16, 16], |_| rng.random_range(-1.0..1.0));
        let (y, _) = run(&cfg, &store, &x, SliceMode::AllSlice);
        let perm = [2, 0, 3, 1];
        let xp = Tensor::concat_outer(&perm.map(|i| x.slice_outer(i, 1).unwrap())).unwrap();
        let (yp, _) = run(&cfg, &store, &xp, SliceMode::AllSlice);
        let expected = Tensor::concat_outer(&perm.map(|i| y.slice_outer(i, 1).unwrap())).unwrap();
        assert!(yp.max_abs_diff(&expected) < 1e-5);
    }

    #[test]
    fn single_slice_mode_equals_one_slice_calls() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = ParamStore::<f32>::init(&network_specs(&cfg, true), &mut rng);
        let x = Tensor::from_fn(&[3, 1, 16, 16], |_| rng.random_range(-1.0..1.0));
        let (y, p) = run(&cfg, &store, &x, SliceMode::SingleSlice);
        for s in 0..3 {
            let (ys, ps) = run(&cfg, &store, &x.slice_outer(s, 1).unwrap(), SliceMode::AllSlice);
            assert!(ys.max_abs_diff(&y.slice_outer(s, 1).unwrap()) < 1e-5);
            assert!(ps.max_abs_diff(&p.slice_outer(s, 1).unwrap()) < 1e-6);
        }
        // all-slice mode does mix slices
        let (ya, _) = run(&cfg, &store, &x, SliceMode::AllSlice);
        assert!(ya.max_abs_diff(&y) > 1e-4);
    }

    #[test]
    fn rejects_bad_inputs_and_configs() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = ParamStore::<f32>::init(&network_specs(&cfg, false), &mut rng);
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &store, false);
        for shape in [[1, 1, 18, 16], [1, 2, 16, 16], [0, 1, 16, 16]] {
            let xv = g.input(Tensor::zeros(&shape));
            assert!(stage_forward(&mut g, &b.scope(""), xv, &cfg, SliceMode::AllSlice, false).is_err());
        }
        assert!(NetworkConfig { encoder_channels: vec![8], ..Default::default() }.validate().is_err());
        assert!(NetworkConfig { encoder_channels: vec![8, 6], ..Default::default() }.validate().is_err());
        NetworkConfig::default().validate().unwrap();
    }

    #[test]
    fn softmax_properties() {
        let z = Tensor::<f64>::zeros(&[2, 4, 3, 3]);
        assert!(softmax_probs(&z).unwrap().data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::from_fn(&[2, 4, 3, 3], |_| rng.random_range(-5.0..5.0));
        let p = softmax_probs(&x).unwrap();
        let shift: Vec<f64> = (0..9).map(|_| rng.random_range(-100.0..100.0)).collect();
        let xs = Tensor::from_fn(&[2, 4, 3, 3], |i| x.data()[i] + shift[i % 9]);
        assert!(softmax_probs(&xs).unwrap().max_abs_diff(&p) < 1e-6);
        for s in 0..2 {
            for px in 0..9 {
                let e: Vec<f64> = (0..4).map(|k| x.data()[(s * 4 + k) * 9 + px].exp()).collect();
                let z: f64 = e.iter().sum();
                for k in 0..4 {
                    assert!((p.data()[(s * 4 + k) * 9 + px] - e[k] / z).abs() < 1e-6);
                }
            }
        }
    }
}
