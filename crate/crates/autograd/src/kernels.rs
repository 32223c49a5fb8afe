//! Numeric kernels shared by forward and backward passes.

use crate::float::{gemm_views, Float, MatView};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Valid output-column range for kernel column `kx` (input column inside `[0, w)`).
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let shift = kx * self.dilation;
        // ix = ox + shift - pad_w
        let lo = self.pad_w.saturating_sub(shift);
        let hi = (self.w + self.pad_w).saturating_sub(shift).min(self.out_w);
        (lo, hi.max(lo))
    }
}

/// Unfold one sample `[c_in, h, w]` into `[c_in*kh*kw, out_h*out_w]`.
pub fn im2col<F: Float>(x: &[F], g: &ConvGeometry, cols: &mut [F]) {
    let plane = g.h * g.w;
    let ncols = g.col_cols();
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &x[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.ox_range(kx);
                for oy in 0..g.out_h {
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = (oy + ky * g.dilation) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        out_row.fill(F::zero());
                        continue;
                    }
                    let src_row = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(F::zero());
                    let ix0 = lo + kx * g.dilation - g.pad_w;
                    out_row[lo..hi].copy_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                    out_row[hi..].fill(F::zero());
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into `dx`.
pub fn col2im<F: Float>(cols: &[F], g: &ConvGeometry, dx: &mut [F]) {
    let plane = g.h * g.w;
    let ncols = g.col_cols();
    let mut row = 0;
    for c in 0..g.c_in {
        let dxc = &mut dx[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.ox_range(kx);
                row += 1;
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.out_h {
                    let iy = (oy + ky * g.dilation) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let ix0 = lo + kx * g.dilation - g.pad_w;
                    let dst = &mut dxc[iy as usize * g.w + ix0..iy as usize * g.w + ix0 + (hi - lo)];
                    for (d, &s) in dst.iter_mut().zip(&src[oy * g.out_w + lo..oy * g.out_w + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Batched convolution forward: `x [n, c_in, h, w]`, `w [c_out, c_in, kh, kw]`.
pub fn conv2d_forward<F: Float>(x: &[F], n: usize, weight: &[F], c_out: usize, g: &ConvGeometry) -> Vec<F> {
    let (krows, ncols) = (g.col_rows(), g.col_cols());
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = c_out * ncols;
    let mut out = vec![F::zero(); n * out_sample];
    let pointwise = g.kh == 1 && g.kw == 1 && g.pad_h == 0 && g.pad_w == 0;
    let mut cols = if pointwise { Vec::new() } else { vec![F::zero(); krows * ncols] };
    for s in 0..n {
        let xs = &x[s * in_sample..(s + 1) * in_sample];
        let b: &[F] = if pointwise {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm_views(
            F::one(),
            weight,
            MatView::row_major(0, c_out, krows),
            b,
            MatView::row_major(0, krows, ncols),
            F::zero(),
            &mut out,
            MatView::row_major(s * out_sample, c_out, ncols),
        );
    }
    out
}

/// Convolution backward. Accumulates into `dw` and (when given) `dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Float>(
    x: &[F],
    n: usize,
    weight: &[F],
    c_out: usize,
    g: &ConvGeometry,
    dy: &[F],
    dw: Option<&mut [F]>,
    dx: Option<&mut [F]>,
) {
    let (krows, ncols) = (g.col_rows(), g.col_cols());
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = c_out * ncols;
    let pointwise = g.kh == 1 && g.kw == 1 && g.pad_h == 0 && g.pad_w == 0;
    let mut cols = vec![F::zero(); krows * ncols];
    let mut dw = dw;
    let mut dx = dx;
    for s in 0..n {
        let xs = &x[s * in_sample..(s + 1) * in_sample];
        if let Some(dw) = dw.as_deref_mut() {
            let b: &[F] = if pointwise {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            gemm_views(
                F::one(),
                dy,
                MatView::row_major(s * out_sample, c_out, ncols),
                b,
                MatView::row_major(0, krows, ncols).t(),
                F::one(),
                dw,
                MatView::row_major(0, c_out, krows),
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            if pointwise {
                gemm_views(
                    F::one(),
                    weight,
                    MatView::row_major(0, c_out, krows).t(),
                    dy,
                    MatView::row_major(s * out_sample, c_out, ncols),
                    F::one(),
                    dx,
                    MatView::row_major(s * in_sample, krows, ncols),
                );
            } else {
                gemm_views(
                    F::one(),
                    weight,
                    MatView::row_major(0, c_out, krows).t(),
                    dy,
                    MatView::row_major(s * out_sample, c_out, ncols),
                    F::zero(),
                    &mut cols,
                    MatView::row_major(0, krows, ncols),
                );
                col2im(&cols, g, &mut dx[s * in_sample..(s + 1) * in_sample]);
            }
        }
    }
}

/// Mean and reciprocal standard deviation of each contiguous group of `len` values.
pub fn group_stats<F: Float>(x: &[F], len: usize, eps: F) -> (Vec<F>, Vec<F>) {
    let groups = x.len() / len;
    let inv = F::one() / F::from_f64(len as f64);
    let mut mean = Vec::with_capacity(groups);
    let mut rstd = Vec::with_capacity(groups);
    for chunk in x.chunks_exact(len) {
        let m = chunk.iter().copied().sum::<F>() * inv;
        let var = chunk.iter().map(|&v| (v - m) * (v - m)).sum::<F>() * inv;
        mean.push(m);
        rstd.push(F::one() / (var + eps).sqrt());
    }
    (mean, rstd)
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_A: f64 = 0.044_715;

#[inline(always)]
pub fn gelu<F: Float>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    // 0.5 (1 + tanh u) == sigmoid(2u)
    x * sigmoid(F::from_f64(2.0) * c * (x + a * x * x * x))
}

#[inline(always)]
pub fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let s = sigmoid(F::from_f64(2.0) * c * (x + a * x * x * x));
    s + F::from_f64(2.0) * x * s * (F::one() - s) * c * (F::one() + F::from_f64(3.0) * a * x * x)
}

/// Branch-free so elementwise loops vectorise; `exp` saturating to inf gives 0.
#[inline(always)]
pub fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp_fast())
}
