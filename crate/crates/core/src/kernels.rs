//! Slice-level forward and backward kernels behind the graph ops.
//!
//! All buffers are NCHW row-major. Convolution is cross-correlation with zero
//! padding; inner loops run along image rows so they vectorize.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    /// Output-column range `[lo, hi)` whose input column `ox*stride + kx - padding` is in bounds.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        valid_range(self.ow, self.w, self.stride, kx, self.padding)
    }

    #[inline]
    fn row_range(&self, ky: usize) -> (usize, usize) {
        valid_range(self.oh, self.h, self.stride, ky, self.padding)
    }
}

/// Output indices `o` in `[0, out_len)` with `o*stride + k - pad` in `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // o*stride >= pad - k
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // o*stride + k - pad <= in_len - 1
    let limit = in_len + pad;
    let hi = if limit > k {
        ((limit - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    bias: &[T],
) -> Vec<T> {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.cout * out_plane];
    for n in 0..g.n {
        for co in 0..g.cout {
            let o_off = (n * g.cout + co) * out_plane;
            let out_c = &mut out[o_off..o_off + out_plane];
            out_c.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..g.cin {
                let i_off = (n * g.cin + ci) * in_plane;
                let in_c = &input[i_off..i_off + in_plane];
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = g.row_range(ky);
                    for kx in 0..g.kw {
                        let wv = kernel[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (ox_lo, ox_hi) = g.col_range(kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let out_row = &mut out_c[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            let ix0 = ox_lo * g.stride + kx - g.padding;
                            if g.stride == 1 {
                                let in_row = &in_c[iy * g.w + ix0..iy * g.w + ix0 + out_row.len()];
                                for (o, &x) in out_row.iter_mut().zip(in_row) {
                                    *o += wv * x;
                                }
                            } else {
                                for (t, o) in out_row.iter_mut().enumerate() {
                                    *o += wv * in_c[iy * g.w + ix0 + t * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates gradients of a convolution. `grad_input` may be `None` when the
/// input does not require a gradient.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_kernel: Option<&mut [T]>,
    mut grad_bias: Option<&mut [T]>,
) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for n in 0..g.n {
        for co in 0..g.cout {
            let o_off = (n * g.cout + co) * out_plane;
            let go = &grad_out[o_off..o_off + out_plane];
            if let Some(gb) = grad_bias.as_deref_mut() {
                gb[co] += go.iter().copied().sum::<T>();
            }
            for ci in 0..g.cin {
                let i_off = (n * g.cin + ci) * in_plane;
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = g.row_range(ky);
                    for kx in 0..g.kw {
                        let (ox_lo, ox_hi) = g.col_range(kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let k_idx = ((co * g.cin + ci) * g.kh + ky) * g.kw + kx;
                        let wv = kernel[k_idx];
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let go_row = &go[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            let ix0 = i_off + iy * g.w + ox_lo * g.stride + kx - g.padding;
                            if g.stride == 1 {
                                let len = go_row.len();
                                if grad_kernel.is_some() {
                                    let in_row = &input[ix0..ix0 + len];
                                    for (&d, &x) in go_row.iter().zip(in_row) {
                                        acc += d * x;
                                    }
                                }
                                if let Some(gi) = grad_input.as_deref_mut() {
                                    let gi_row = &mut gi[ix0..ix0 + len];
                                    for (gx, &d) in gi_row.iter_mut().zip(go_row) {
                                        *gx += wv * d;
                                    }
                                }
                            } else {
                                for (t, &d) in go_row.iter().enumerate() {
                                    let ix = ix0 + t * g.stride;
                                    acc += d * input[ix];
                                    if let Some(gi) = grad_input.as_deref_mut() {
                                        gi[ix] += wv * d;
                                    }
                                }
                            }
                        }
                        if let Some(gk) = grad_kernel.as_deref_mut() {
                            gk[k_idx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2/stride-2 max pool. Returns values and, per output, the flat input index
/// of the winner (first maximum in row-major window order).
pub(crate) fn maxpool2_forward<T: Real>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward<T: Real>(input: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ow = 2 * w;
    let mut out = vec![T::zero(); planes * 4 * h * w];
    for p in 0..planes {
        for y in 0..h {
            let src = &input[(p * h + y) * w..(p * h + y + 1) * w];
            let row0 = (p * 2 * h + 2 * y) * ow;
            for (x, &v) in src.iter().enumerate() {
                out[row0 + 2 * x] = v;
                out[row0 + 2 * x + 1] = v;
            }
            out.copy_within(row0..row0 + ow, row0 + ow);
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(grad_out: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ow = 2 * w;
    let mut gi = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            let r0 = (p * 2 * h + 2 * y) * ow;
            let r1 = r0 + ow;
            for x in 0..w {
                gi[(p * h + y) * w + x] = grad_out[r0 + 2 * x]
                    + grad_out[r0 + 2 * x + 1]
                    + grad_out[r1 + 2 * x]
                    + grad_out[r1 + 2 * x + 1];
            }
        }
    }
    gi
}

/// Numerically stable softmax cross-entropy over the channel axis, averaged
/// over every pixel of every batch item. Returns `(loss, probabilities)`.
pub(crate) fn softmax_cross_entropy<T: Real>(
    logits: &[T],
    targets: &[u32],
    n: usize,
    c: usize,
    plane: usize,
) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = 0.0f64;
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut max = T::neg_infinity();
            for k in 0..c {
                max = max.max(logits[base + k * plane + p]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (logits[base + k * plane + p] - max).exp();
                probs[base + k * plane + p] = e;
                z += e;
            }
            for k in 0..c {
                probs[base + k * plane + p] /= z;
            }
            let t = targets[b * plane + p] as usize;
            let log_p = logits[base + t * plane + p] - max - z.ln();
            total -= log_p.as_f64();
        }
    }
    (T::of(total / (n * plane) as f64), probs)
}
