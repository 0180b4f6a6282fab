//! Grouped, strided, dilated 1-d convolution kernels.
//!
//! All three kernels are partial derivatives of the same trilinear form
//! `F(x, w, y) = Σ y[o,t] · w[o,c',k] · x[g·cpg + c', t·s + k·d − p]`:
//! `forward` is ∂F/∂y, `transpose` is ∂F/∂x and `weight_grad` is ∂F/∂w.
//! Their vector-Jacobian products are therefore again one of the three,
//! which is what makes the convolution family closed under differentiation.

use serde::{Deserialize, Serialize};

use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn strided(stride: usize) -> Self {
        Self {
            stride,
            ..Self::default()
        }
    }

    /// Length-preserving depthwise convolution over `channels` channels
    /// (odd kernel sizes only).
    pub fn depthwise_same(channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
            groups: channels,
        }
    }

    /// Output length for an input of `t_in` samples, or `None` if the
    /// (padded) input is shorter than the dilated kernel.
    pub fn output_len(&self, t_in: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = t_in + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Range of output positions `t` for which `t·s + off` lands in `[0, t_in)`.
fn valid_range(off: isize, stride: usize, t_in: usize, t_out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi_excl = {
        let last = t_in as isize - 1 - off;
        if last < 0 {
            0
        } else {
            last / s + 1
        }
    };
    let lo = lo.max(0) as usize;
    let hi = (hi_excl.max(0) as usize).min(t_out);
    (lo.min(hi), hi)
}

pub(crate) struct Dims {
    pub c_in: usize,
    pub t_in: usize,
    pub c_out: usize,
    pub t_out: usize,
    pub kernel: usize,
}

impl Dims {
    fn cin_per_group(&self, spec: &ConvSpec) -> usize {
        self.c_in / spec.groups
    }
    fn cout_per_group(&self, spec: &ConvSpec) -> usize {
        self.c_out / spec.groups
    }
}

/// `y[o, t] = Σ_{c', k} w[o, c', k] · x[c, t·s + k·d − p]`
pub(crate) fn forward(x: &[f64], w: &[f64], dims: &Dims, spec: &ConvSpec) -> Vec<f64> {
    let cpg = dims.cin_per_group(spec);
    let opg = dims.cout_per_group(spec);
    let k_len = dims.kernel;
    let mut y = vec![0.0; dims.c_out * dims.t_out];
    par::fill_rows(&mut y, dims.t_out, |o, row| {
        let grp = o / opg;
        for ci in 0..cpg {
            let c = grp * cpg + ci;
            let xr = &x[c * dims.t_in..(c + 1) * dims.t_in];
            for k in 0..k_len {
                let wv = w[(o * cpg + ci) * k_len + k];
                let off = (k * spec.dilation) as isize - spec.padding as isize;
                let (lo, hi) = valid_range(off, spec.stride, dims.t_in, dims.t_out);
                if lo == hi {
                    continue;
                }
                if spec.stride == 1 {
                    let start = (lo as isize + off) as usize;
                    let xs = &xr[start..start + (hi - lo)];
                    for (yv, xv) in row[lo..hi].iter_mut().zip(xs) {
                        *yv += wv * xv;
                    }
                } else {
                    for t in lo..hi {
                        let idx = (t as isize * spec.stride as isize + off) as usize;
                        row[t] += wv * xr[idx];
                    }
                }
            }
        }
    });
    y
}

/// `dx[c, t·s + k·d − p] += w[o, c', k] · g[o, t]`; the adjoint of `forward` in `x`.
pub(crate) fn transpose(g: &[f64], w: &[f64], dims: &Dims, spec: &ConvSpec) -> Vec<f64> {
    let cpg = dims.cin_per_group(spec);
    let opg = dims.cout_per_group(spec);
    let k_len = dims.kernel;
    let mut dx = vec![0.0; dims.c_in * dims.t_in];
    par::fill_rows(&mut dx, dims.t_in, |c, row| {
        let grp = c / cpg;
        let ci = c % cpg;
        for o in grp * opg..(grp + 1) * opg {
            let gr = &g[o * dims.t_out..(o + 1) * dims.t_out];
            for k in 0..k_len {
                let wv = w[(o * cpg + ci) * k_len + k];
                let off = (k * spec.dilation) as isize - spec.padding as isize;
                let (lo, hi) = valid_range(off, spec.stride, dims.t_in, dims.t_out);
                if lo == hi {
                    continue;
                }
                if spec.stride == 1 {
                    let start = (lo as isize + off) as usize;
                    let xs = &mut row[start..start + (hi - lo)];
                    for (xv, gv) in xs.iter_mut().zip(&gr[lo..hi]) {
                        *xv += wv * gv;
                    }
                } else {
                    for t in lo..hi {
                        let idx = (t as isize * spec.stride as isize + off) as usize;
                        row[idx] += wv * gr[t];
                    }
                }
            }
        }
    });
    dx
}

/// `dw[o, c', k] = Σ_t g[o, t] · x[c, t·s + k·d − p]`; the adjoint of `forward` in `w`.
pub(crate) fn weight_grad(x: &[f64], g: &[f64], dims: &Dims, spec: &ConvSpec) -> Vec<f64> {
    let cpg = dims.cin_per_group(spec);
    let opg = dims.cout_per_group(spec);
    let k_len = dims.kernel;
    let mut dw = vec![0.0; dims.c_out * cpg * k_len];
    par::fill_rows(&mut dw, cpg * k_len, |o, row| {
        let grp = o / opg;
        let gr = &g[o * dims.t_out..(o + 1) * dims.t_out];
        for ci in 0..cpg {
            let c = grp * cpg + ci;
            let xr = &x[c * dims.t_in..(c + 1) * dims.t_in];
            for k in 0..k_len {
                let off = (k * spec.dilation) as isize - spec.padding as isize;
                let (lo, hi) = valid_range(off, spec.stride, dims.t_in, dims.t_out);
                if lo == hi {
                    continue;
                }
                let mut acc = 0.0;
                if spec.stride == 1 {
                    let start = (lo as isize + off) as usize;
                    let xs = &xr[start..start + (hi - lo)];
                    for (gv, xv) in gr[lo..hi].iter().zip(xs) {
                        acc += gv * xv;
                    }
                } else {
                    for t in lo..hi {
                        let idx = (t as isize * spec.stride as isize + off) as usize;
                        acc += gr[t] * xr[idx];
                    }
                }
                row[ci * k_len + k] = acc;
            }
        }
    });
    dw
}
