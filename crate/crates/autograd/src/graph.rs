use crate::error::{shape_err, GraphError, Result};
use crate::float::{gemm_views, Float, MatView};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{permute_into, strides, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<F>, rstd: Vec<F> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<F>, rstd: Vec<F> },
    Gelu(Var),
    Sigmoid(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    AddChannelBias { x: Var, b: Var },
    AvgPool2(Var),
    Upsample2(Var),
    ConcatChannels(Var, Var),
    GlobalAvgPool(Var),
    ScaleChannels { x: Var, w: Var },
    Sum(Var),
    CrossEntropy { p: Var, target: Vec<F>, weight: Vec<F>, scale: F },
    BinaryCrossEntropy { p: Var, target: Vec<F>, weight: Vec<F>, scale: F },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Probabilities are clamped below by this value before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// A reverse-mode tape. Nodes are appended by each operation and never mutated.
pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by leaf [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return shape_err(format!("{what}: {a:?} vs {b:?}"));
    }
    Ok(())
}

fn nchw(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[n, c, h, w] => Ok((n, c, h, w)),
        _ => shape_err(format!("{what} expects [N, C, H, W], got {shape:?}")),
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let t = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    /// `1 - a`, built from a scale and a constant so the gradient is exact.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let ones = self.input(Tensor::full(self.shape(a), F::one()));
        self.sub(ones, a)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a).permute(perm)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), ng))
    }

    /// `x [..., K] @ w [K, N] + b [N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (k, n) = match ws[..] {
            [k, n] => (k, n),
            _ => return shape_err(format!("linear weight must be 2-D, got {ws:?}")),
        };
        if xs.last() != Some(&k) {
            return shape_err(format!("linear input {xs:?} vs weight {ws:?}"));
        }
        if let Some(b) = b {
            same_shape(self.shape(b), &[n], "linear bias")?;
        }
        let m = self.value(x).len() / k;
        let mut out = vec![F::zero(); m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { F::one() } else { F::zero() };
        gemm_views(
            F::one(),
            self.value(x).data(),
            MatView::row_major(0, m, k),
            self.value(w).data(),
            MatView::row_major(0, k, n),
            beta,
            &mut out,
            MatView::row_major(0, m, n),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(t, Op::Linear { x, w, b }, ng))
    }

    fn bmm_views(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<(usize, MatView, MatView, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[ba, a0, a1], &[bb, b0, b1]) = (sa, sb) else {
            return shape_err(format!("batched matmul expects rank-3 operands, got {sa:?}, {sb:?}"));
        };
        if ba != bb {
            return shape_err(format!("batched matmul batch {ba} vs {bb}"));
        }
        let av = if ta { MatView::row_major(0, a0, a1).t() } else { MatView::row_major(0, a0, a1) };
        let bv = if tb { MatView::row_major(0, b0, b1).t() } else { MatView::row_major(0, b0, b1) };
        if av.cols != bv.rows {
            return shape_err(format!("batched matmul inner dims {sa:?} (t={ta}) vs {sb:?} (t={tb})"));
        }
        Ok((ba, av, bv, a0 * a1, b0 * b1))
    }

    /// Batched `op(a) @ op(b)` over rank-3 tensors, `op` optionally transposing the last two axes.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (batch, av, bv, asz, bsz) = self.bmm_views(a, b, ta, tb)?;
        let (m, n) = (av.rows, bv.cols);
        let mut out = vec![F::zero(); batch * m * n];
        for i in 0..batch {
            gemm_views(
                F::one(),
                self.value(a).data(),
                MatView { offset: i * asz, ..av },
                self.value(b).data(),
                MatView { offset: i * bsz, ..bv },
                F::zero(),
                &mut out,
                MatView::row_major(i * m * n, m, n),
            );
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::BatchMatMul { a, b, ta, tb }, ng))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("softmax axis {axis} for {shape:?}"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = F::neg_infinity();
                for j in 0..n {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut sum = F::zero();
                for j in 0..n {
                    let e = (src[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                let inv = F::one() / sum;
                for j in 0..n {
                    out[base + j * inner] *= inv;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Softmax { x, axis }, ng))
    }

    /// Normalisation over the last axis with per-feature scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| GraphError::Shape("layer_norm of scalar".into()))?;
        same_shape(self.shape(gamma), &[d], "layer_norm gamma")?;
        same_shape(self.shape(beta), &[d], "layer_norm beta")?;
        let src = self.value(x).data();
        let (mean, rstd) = kernels::group_stats(src, d, F::from_f64(eps));
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![F::zero(); src.len()];
        for (r, (row, dst)) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
            for j in 0..d {
                dst[j] = (row[j] - mean[r]) * rstd[r] * g[j] + b[j];
            }
        }
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, mean, rstd }, ng))
    }

    /// Group normalisation of `[N, C, H, W]` with per-channel scale and offset.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, h, w) = nchw(&shape, "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return shape_err(format!("group_norm: {c} channels not divisible into {groups} groups"));
        }
        same_shape(self.shape(gamma), &[c], "group_norm gamma")?;
        same_shape(self.shape(beta), &[c], "group_norm beta")?;
        let hw = h * w;
        let glen = c / groups * hw;
        let src = self.value(x).data();
        let (mean, rstd) = kernels::group_stats(src, glen, F::from_f64(eps));
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![F::zero(); src.len()];
        for s in 0..n {
            for ch in 0..c {
                let gi = s * groups + ch / (c / groups);
                let off = (s * c + ch) * hw;
                let (m, r) = (mean[gi], rstd[gi]);
                let (scale, shift) = (g[ch], b[ch]);
                for k in off..off + hw {
                    out[k] = (src[k] - m) * r * scale + shift;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(t, Op::GroupNorm { x, gamma, beta, groups, mean, rstd }, ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::gelu);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::sigmoid);
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    /// Stride-1 convolution, `x [N, Cin, H, W]`, `w [Cout, Cin, kh, kw]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize, dilation: usize) -> Result<Var> {
        let (n, c_in, h, wd) = nchw(self.shape(x), "conv2d input")?;
        let (c_out, wc, kh, kw) = nchw(self.shape(w), "conv2d weight")?;
        if wc != c_in {
            return shape_err(format!("conv2d: input has {c_in} channels, weight expects {wc}"));
        }
        let dilation = dilation.max(1);
        let span_h = dilation * (kh - 1);
        let span_w = dilation * (kw - 1);
        if h + 2 * pad <= span_h || wd + 2 * pad <= span_w {
            return shape_err("conv2d: kernel larger than padded input");
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            pad_h: pad,
            pad_w: pad,
            dilation,
            out_h: h + 2 * pad - span_h,
            out_w: wd + 2 * pad - span_w,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), n, self.value(w).data(), c_out, &geom);
        let t = Tensor::new(vec![n, c_out, geom.out_h, geom.out_w], out)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(t, Op::Conv2d { x, w, geom }, ng))
    }

    /// Adds `b [C]` along axis 1 of `x [N, C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(b) != [shape[1]] {
            return shape_err(format!("channel bias {:?} for {shape:?}", self.shape(b)));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_exact_mut(inner).enumerate() {
            let bv = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(t, Op::AddChannelBias { x, b }, ng))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("avg_pool2 needs even spatial dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = F::from_f64(0.25);
        let mut out = vec![F::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let sp = &src[p * h * w..(p + 1) * h * w];
            let dp = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dp[y * ow + xx] = (sp[i] + sp[i + 1] + sp[i + w] + sp[i + w + 1]) * quarter;
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::AvgPool2(x), ng))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "upsample2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let sp = &src[p * h * w..(p + 1) * h * w];
            let dp = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dp[y * ow + xx] = sp[(y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Upsample2(x), ng))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = nchw(self.shape(a), "concat_channels")?;
        let (nb, cb, hb, wb) = nchw(self.shape(b), "concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return shape_err(format!("concat_channels {:?} with {:?}", self.shape(a), self.shape(b)));
        }
        let hw = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&da[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&db[s * cb * hw..(s + 1) * cb * hw]);
        }
        let t = Tensor::new(vec![n, ca + cb, h, w], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::ConcatChannels(a, b), ng))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "global_avg_pool")?;
        let inv = F::one() / F::from_f64((h * w) as f64);
        let out = self.value(x).data().chunks_exact(h * w).map(|p| p.iter().copied().sum::<F>() * inv).collect();
        let t = Tensor::new(vec![n, c], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::GlobalAvgPool(x), ng))
    }

    /// `x [N, C, H, W] * w [N, C]` broadcast over the spatial axes.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, c, h, wd) = nchw(self.shape(x), "scale_channels")?;
        same_shape(self.shape(w), &[n, c], "scale_channels weights")?;
        let hw = h * wd;
        let weights = self.value(w).data();
        let out = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .zip(weights)
            .flat_map(|(p, &s)| p.iter().map(move |&v| v * s))
            .collect();
        let t = Tensor::new(vec![n, c, h, wd], out)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(t, Op::ScaleChannels { x, w }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, F::one() / F::from_f64(n as f64))
    }

    /// `scale * sum(weight * -target * ln(max(p, 1e-12)))`.
    pub fn cross_entropy(&mut self, p: Var, target: Vec<F>, weight: Vec<F>, scale: F) -> Result<Var> {
        let n = self.value(p).len();
        if target.len() != n || weight.len() != n {
            return shape_err("cross_entropy target/weight length");
        }
        let eps = F::from_f64(LOG_CLAMP);
        let mut acc = F::zero();
        for ((&pv, &t), &w) in self.value(p).data().iter().zip(&target).zip(&weight) {
            if w != F::zero() && t != F::zero() {
                acc += w * -(t * clamped_ln(pv, eps));
            }
        }
        let ng = self.ng(p);
        Ok(self.push(Tensor::scalar(acc * scale), Op::CrossEntropy { p, target, weight, scale }, ng))
    }

    /// `scale * sum(weight * BCE(p, target))` with both logarithms clamped at 1e-12.
    pub fn binary_cross_entropy(&mut self, p: Var, target: Vec<F>, weight: Vec<F>, scale: F) -> Result<Var> {
        let n = self.value(p).len();
        if target.len() != n || weight.len() != n {
            return shape_err("binary_cross_entropy target/weight length");
        }
        let mut acc = F::zero();
        for ((&pv, &t), &w) in self.value(p).data().iter().zip(&target).zip(&weight) {
            if w != F::zero() {
                acc += w * bce(pv, t);
            }
        }
        let ng = self.ng(p);
        Ok(self.push(Tensor::scalar(acc * scale), Op::BinaryCrossEntropy { p, target, weight, scale }, ng))
    }

    /// Reverse pass from a scalar node. Gradients are returned for every leaf that
    /// was created with [`Graph::param`] and lies upstream of `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients<F>> {
        let shape = self.shape(out);
        if self.value(out).len() != 1 {
            return Err(GraphError::NonScalarOutput(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(shape, F::one()));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(&node.op, &node.value, g.data(), &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Mutable gradient buffer for `v`, created zeroed on first use; `None` when `v`
    /// does not need a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<F>>], v: Var) -> Option<&'g mut [F]> {
        if !self.ng(v) {
            return None;
        }
        let entry = &mut grads[v.0];
        if entry.is_none() {
            *entry = Some(Tensor::zeros(self.shape(v)));
        }
        entry.as_mut().map(|t| t.data_mut())
    }

    /// Add a freshly computed gradient, moving it in when nothing is there yet.
    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, src: Vec<F>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.data_mut().iter_mut().zip(&src).for_each(|(d, &s)| *d += s),
            entry @ None => *entry = Some(Tensor::new(self.shape(v).to_vec(), src).expect("gradient matches value shape")),
        }
    }

    fn backward_node(&self, op: &Op<F>, y: &Tensor<F>, g: &[F], grads: &mut [Option<Tensor<F>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
                if let Some(d) = self.slot(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data();
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                }
                let av = self.value(*a).data();
                if let Some(d) = self.slot(grads, *b) {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *s);
                }
            }
            Op::Reshape(a) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let in_shape = self.shape(*a).to_vec();
                let out_strides = strides(y.shape());
                let src_strides: Vec<usize> = inv.iter().map(|&i| out_strides[i]).collect();
                let mut back = Vec::with_capacity(g.len());
                permute_into(g, &in_shape, &src_strides, &mut back);
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(&back).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::Linear { x, w, b } => {
                let (k, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                let m = self.value(*x).len() / k;
                let wv = self.value(*w).data();
                if let Some(d) = self.slot(grads, *x) {
                    gemm_views(
                        F::one(),
                        g,
                        MatView::row_major(0, m, n),
                        wv,
                        MatView::row_major(0, k, n).t(),
                        F::one(),
                        d,
                        MatView::row_major(0, m, k),
                    );
                }
                let xv = self.value(*x).data();
                if let Some(d) = self.slot(grads, *w) {
                    gemm_views(
                        F::one(),
                        xv,
                        MatView::row_major(0, m, k).t(),
                        g,
                        MatView::row_major(0, m, n),
                        F::one(),
                        d,
                        MatView::row_major(0, k, n),
                    );
                }
                if let Some(b) = b {
                    if let Some(d) = self.slot(grads, *b) {
                        for row in g.chunks_exact(n) {
                            d.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                        }
                    }
                }
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (batch, av, bv, asz, bsz) = self.bmm_views(*a, *b, *ta, *tb).expect("validated in forward");
                let (m, n) = (av.rows, bv.cols);
                let bdata = self.value(*b).data();
                if let Some(d) = self.slot(grads, *a) {
                    // d op(a) = g @ op(b)^T, written through the same view as op(a)
                    for i in 0..batch {
                        gemm_views(
                            F::one(),
                            g,
                            MatView::row_major(i * m * n, m, n),
                            bdata,
                            MatView { offset: i * bsz, ..bv }.t(),
                            F::one(),
                            d,
                            MatView { offset: i * asz, ..av },
                        );
                    }
                }
                let adata = self.value(*a).data();
                if let Some(d) = self.slot(grads, *b) {
                    for i in 0..batch {
                        gemm_views(
                            F::one(),
                            adata,
                            MatView { offset: i * asz, ..av }.t(),
                            g,
                            MatView::row_major(i * m * n, m, n),
                            F::one(),
                            d,
                            MatView { offset: i * bsz, ..bv },
                        );
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let yv = y.data();
                if let Some(d) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let mut dot = F::zero();
                            for j in 0..n {
                                dot += g[base + j * inner] * yv[base + j * inner];
                            }
                            for j in 0..n {
                                let k = base + j * inner;
                                d[k] += yv[k] * (g[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let d = *y.shape().last().unwrap();
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                norm_backward(self, grads, xv, g, d, 1, gam, mean, rstd, *x, *gamma, *beta);
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let (_, c, h, w) = nchw(y.shape(), "group_norm").unwrap();
                let hw = h * w;
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                norm_backward(self, grads, xv, g, c / groups * hw, hw, gam, mean, rstd, *x, *gamma, *beta);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let contrib: Vec<F> = xv.iter().zip(g).map(|(&v, &gv)| gv * kernels::gelu_grad(v)).collect();
                self.accumulate(grads, *x, contrib);
            }
            Op::Sigmoid(x) => {
                let yv = y.data();
                if let Some(d) = self.slot(grads, *x) {
                    for ((d, &gv), &s) in d.iter_mut().zip(g).zip(yv) {
                        *d += gv * s * (F::one() - s);
                    }
                }
            }
            Op::Conv2d { x, w, geom } => {
                let n = self.shape(*x)[0];
                let c_out = self.shape(*w)[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dw = self.ng(*w).then(|| vec![F::zero(); wv.len()]);
                let mut dx = self.ng(*x).then(|| vec![F::zero(); xv.len()]);
                kernels::conv2d_backward(xv, n, wv, c_out, geom, g, dw.as_deref_mut(), dx.as_deref_mut());
                if let Some(src) = dw {
                    self.accumulate(grads, *w, src);
                }
                if let Some(src) = dx {
                    self.accumulate(grads, *x, src);
                }
            }
            Op::AddChannelBias { x, b } => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
                let shape = y.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                if let Some(d) = self.slot(grads, *b) {
                    for (i, chunk) in g.chunks_exact(inner).enumerate() {
                        d[i % c] += chunk.iter().copied().sum::<F>();
                    }
                }
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = nchw(self.shape(*x), "avg_pool2").unwrap();
                let (oh, ow) = (h / 2, w / 2);
                let quarter = F::from_f64(0.25);
                if let Some(d) = self.slot(grads, *x) {
                    for p in 0..n * c {
                        let dp = &mut d[p * h * w..(p + 1) * h * w];
                        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                        for yy in 0..oh {
                            for xx in 0..ow {
                                let v = gp[yy * ow + xx] * quarter;
                                let i = 2 * yy * w + 2 * xx;
                                dp[i] += v;
                                dp[i + 1] += v;
                                dp[i + w] += v;
                                dp[i + w + 1] += v;
                            }
                        }
                    }
                }
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = nchw(self.shape(*x), "upsample2").unwrap();
                let (oh, ow) = (2 * h, 2 * w);
                if let Some(d) = self.slot(grads, *x) {
                    for p in 0..n * c {
                        let dp = &mut d[p * h * w..(p + 1) * h * w];
                        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                        for yy in 0..oh {
                            for xx in 0..ow {
                                dp[(yy / 2) * w + xx / 2] += gp[yy * ow + xx];
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = nchw(self.shape(*a), "concat").unwrap();
                let cb = self.shape(*b)[1];
                let hw = h * w;
                let ct = ca + cb;
                if let Some(d) = self.slot(grads, *a) {
                    for s in 0..n {
                        let src = &g[s * ct * hw..s * ct * hw + ca * hw];
                        d[s * ca * hw..(s + 1) * ca * hw].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for s in 0..n {
                        let src = &g[s * ct * hw + ca * hw..(s + 1) * ct * hw];
                        d[s * cb * hw..(s + 1) * cb * hw].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = nchw(self.shape(*x), "global_avg_pool").unwrap();
                let inv = F::one() / F::from_f64((h * w) as f64);
                if let Some(d) = self.slot(grads, *x) {
                    for (chunk, &gv) in d.chunks_exact_mut(h * w).zip(g) {
                        chunk.iter_mut().for_each(|v| *v += gv * inv);
                    }
                }
            }
            Op::ScaleChannels { x, w } => {
                let (_, _, h, wd) = nchw(self.shape(*x), "scale_channels").unwrap();
                let hw = h * wd;
                let wv = self.value(*w).data();
                if let Some(d) = self.slot(grads, *x) {
                    for ((dc, gc), &s) in d.chunks_exact_mut(hw).zip(g.chunks_exact(hw)).zip(wv) {
                        dc.iter_mut().zip(gc).for_each(|(d, &gv)| *d += gv * s);
                    }
                }
                let xv = self.value(*x).data();
                if let Some(d) = self.slot(grads, *w) {
                    for ((dv, gc), xc) in d.iter_mut().zip(g.chunks_exact(hw)).zip(xv.chunks_exact(hw)) {
                        *dv += gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<F>();
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g[0];
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::CrossEntropy { p, target, weight, scale } => {
                let eps = F::from_f64(LOG_CLAMP);
                let k = g[0] * *scale;
                let pv = self.value(*p).data();
                if let Some(d) = self.slot(grads, *p) {
                    for i in 0..pv.len() {
                        if pv[i] > eps && target[i] != F::zero() {
                            d[i] -= k * weight[i] * target[i] / pv[i];
                        }
                    }
                }
            }
            Op::BinaryCrossEntropy { p, target, weight, scale } => {
                let eps = F::from_f64(LOG_CLAMP);
                let k = g[0] * *scale;
                let pv = self.value(*p).data();
                if let Some(d) = self.slot(grads, *p) {
                    for i in 0..pv.len() {
                        let (pi, t) = (pv[i], target[i]);
                        let mut dp = F::zero();
                        if pi > eps {
                            dp -= t / pi;
                        }
                        if F::one() - pi > eps {
                            dp += (F::one() - t) / (F::one() - pi);
                        }
                        d[i] += k * weight[i] * dp;
                    }
                }
            }
        }
    }
}

/// Clamped binary cross-entropy of a single probability.
pub fn bce<F: Float>(p: F, t: F) -> F {
    let eps = F::from_f64(LOG_CLAMP);
    -(t * clamped_ln(p, eps) + (F::one() - t) * clamped_ln(F::one() - p, eps))
}

/// `ln(max(p, eps))`, except that NaN stays NaN so divergence is visible in the loss.
fn clamped_ln<F: Float>(p: F, eps: F) -> F {
    if p < eps { eps.ln() } else { p.ln() }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Shared backward for layer/group normalisation. Statistics cover contiguous
/// groups of `glen` values; the affine parameter index advances every `run` values
/// and wraps at `gamma.len()`.
#[allow(clippy::too_many_arguments)]
fn norm_backward<F: Float>(
    graph: &Graph<F>,
    grads: &mut [Option<Tensor<F>>],
    x: &[F],
    g: &[F],
    glen: usize,
    run: usize,
    gamma: &[F],
    mean: &[F],
    rstd: &[F],
    xv: Var,
    gv: Var,
    bv: Var,
) {
    let c = gamma.len();
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    let mut dx = vec![F::zero(); x.len()];
    let inv_n = F::one() / F::from_f64(glen as f64);
    for (gi, ((xs, gs), dxs)) in x.chunks_exact(glen).zip(g.chunks_exact(glen)).zip(dx.chunks_exact_mut(glen)).enumerate() {
        let base = gi * glen;
        let (m, r) = (mean[gi], rstd[gi]);
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        // runs of `run` elements share a channel
        for start in (0..glen).step_by(run) {
            let ch = ((base + start) / run) % c;
            let (gam, mut dg, mut db) = (gamma[ch], F::zero(), F::zero());
            for j in start..start + run {
                let xhat = (xs[j] - m) * r;
                let dxhat = gs[j] * gam;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                dg += gs[j] * xhat;
                db += gs[j];
            }
            dgamma[ch] += dg;
            dbeta[ch] += db;
        }
        let (mean_d, mean_dx) = (sum_dxhat * inv_n, sum_dxhat_xhat * inv_n);
        for start in (0..glen).step_by(run) {
            let gam = gamma[((base + start) / run) % c];
            for j in start..start + run {
                let xhat = (xs[j] - m) * r;
                dxs[j] = r * (gs[j] * gam - mean_d - xhat * mean_dx);
            }
        }
    }
    graph.accumulate(grads, xv, dx);
    if let Some(d) = graph.slot(grads, gv) {
        d.iter_mut().zip(&dgamma).for_each(|(d, &s)| *d += s);
    }
    if let Some(d) = graph.slot(grads, bv) {
        d.iter_mut().zip(&dbeta).for_each(|(d, &s)| *d += s);
    }
}
