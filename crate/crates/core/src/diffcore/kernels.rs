//! Dense kernels behind the graph primitives: affine maps, 3×3
//! convolution through an im2col/GEMM lowering, and batch normalization.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Border handling for 3×3 stencils with a one-pixel halo.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Out-of-range pixels read as zero.
    Zero,
    /// Indices wrap modulo the extent (periodic domain).
    Circular,
    /// Out-of-range pixels copy the nearest edge pixel (zero normal derivative).
    Replicate,
}

const NONE: usize = usize::MAX;

fn source(i: isize, n: usize, padding: Padding) -> usize {
    if (0..n as isize).contains(&i) {
        return i as usize;
    }
    match padding {
        Padding::Zero => NONE,
        Padding::Circular => i.rem_euclid(n as isize) as usize,
        Padding::Replicate => i.clamp(0, n as isize - 1) as usize,
    }
}

/// For each of the 9 taps and each output pixel, the flat input pixel it
/// reads from, or `NONE` for a zero-padded read.
pub(crate) fn tap_index(h: usize, w: usize, padding: Padding) -> Vec<usize> {
    let hw = h * w;
    let mut idx = vec![NONE; 9 * hw];
    for ky in 0..3 {
        for kx in 0..3 {
            let tap = ky * 3 + kx;
            for y in 0..h {
                let sy = source(y as isize + ky as isize - 1, h, padding);
                for x in 0..w {
                    let sx = source(x as isize + kx as isize - 1, w, padding);
                    idx[tap * hw + y * w + x] = if sy == NONE || sx == NONE {
                        NONE
                    } else {
                        sy * w + sx
                    };
                }
            }
        }
    }
    idx
}

fn im2col<T: Real>(input: &[T], c_in: usize, hw: usize, taps: &[usize], col: &mut [T]) {
    for ci in 0..c_in {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for tap in 0..9 {
            let row = &mut col[(ci * 9 + tap) * hw..(ci * 9 + tap + 1) * hw];
            let ti = &taps[tap * hw..(tap + 1) * hw];
            for (dst, &s) in row.iter_mut().zip(ti) {
                *dst = if s == NONE { T::zero() } else { plane[s] };
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], c_in: usize, hw: usize, taps: &[usize], grad: &mut [T]) {
    for ci in 0..c_in {
        let plane = &mut grad[ci * hw..(ci + 1) * hw];
        for tap in 0..9 {
            let row = &col[(ci * 9 + tap) * hw..(ci * 9 + tap + 1) * hw];
            let ti = &taps[tap * hw..(tap + 1) * hw];
            for (&g, &s) in row.iter().zip(ti) {
                if s != NONE {
                    plane[s] += g;
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

pub(crate) fn conv2d_forward<T: Real>(
    d: &ConvDims,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    padding: Padding,
) -> Vec<T> {
    let hw = d.h * d.w;
    let taps = tap_index(d.h, d.w, padding);
    let kdim = d.c_in * 9;
    let mut col = vec![T::zero(); kdim * hw];
    let mut out = vec![T::zero(); d.batch * d.c_out * hw];
    for b in 0..d.batch {
        im2col(&input[b * d.c_in * hw..(b + 1) * d.c_in * hw], d.c_in, hw, &taps, &mut col);
        let ob = &mut out[b * d.c_out * hw..(b + 1) * d.c_out * hw];
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                ob[co * hw..(co + 1) * hw].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            d.c_out, kdim, hw, T::one(), kernel, kdim as isize, 1, &col, hw as isize, 1, beta, ob,
            hw as isize, 1,
        );
    }
    out
}

/// Accumulates gradients of a convolution into the provided buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    d: &ConvDims,
    input: &[T],
    kernel: &[T],
    padding: Padding,
    grad_out: &[T],
    grad_input: Option<&mut [T]>,
    grad_kernel: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let hw = d.h * d.w;
    let kdim = d.c_in * 9;
    let taps = tap_index(d.h, d.w, padding);
    if let Some(gb) = grad_bias {
        for b in 0..d.batch {
            for (co, g) in gb.iter_mut().enumerate() {
                let start = (b * d.c_out + co) * hw;
                *g += grad_out[start..start + hw].iter().copied().sum::<T>();
            }
        }
    }
    let mut col = vec![T::zero(); kdim * hw];
    if let Some(gk) = grad_kernel {
        for b in 0..d.batch {
            im2col(&input[b * d.c_in * hw..(b + 1) * d.c_in * hw], d.c_in, hw, &taps, &mut col);
            let go = &grad_out[b * d.c_out * hw..(b + 1) * d.c_out * hw];
            // dK[co, r] += Σ_p dOut[co, p] · col[r, p]
            T::gemm(
                d.c_out, hw, kdim, T::one(), go, hw as isize, 1, &col, 1, hw as isize, T::one(),
                gk, kdim as isize, 1,
            );
        }
    }
    if let Some(gi) = grad_input {
        for b in 0..d.batch {
            let go = &grad_out[b * d.c_out * hw..(b + 1) * d.c_out * hw];
            // dcol[r, p] = Σ_co K[co, r] · dOut[co, p]
            T::gemm(
                kdim, d.c_out, hw, T::one(), kernel, 1, kdim as isize, go, hw as isize, 1,
                T::zero(), &mut col, hw as isize, 1,
            );
            col2im(&col, d.c_in, hw, &taps, &mut gi[b * d.c_in * hw..(b + 1) * d.c_in * hw]);
        }
    }
}

pub(crate) const BN_EPS: f64 = 1e-5;

/// Per-channel standardization over the batch and trailing axes, using the
/// statistics of the batch itself. Returns `(y, xhat, inv_std)`.
pub(crate) fn batchnorm_forward<T: Real>(
    x: &[T],
    batch: usize,
    channels: usize,
    inner: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::lit((batch * inner) as f64);
    let eps = T::lit(BN_EPS);
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); channels];
    for c in 0..channels {
        let slices = (0..batch).map(|b| (b * channels + c) * inner);
        let mut mean = T::zero();
        for s in slices.clone() {
            mean += x[s..s + inner].iter().copied().sum::<T>();
        }
        mean = mean / m;
        let mut var = T::zero();
        for s in slices.clone() {
            for &v in &x[s..s + inner] {
                var += (v - mean) * (v - mean);
            }
        }
        var = var / m;
        let is = T::one() / (var + eps).sqrt();
        inv_std[c] = is;
        for s in slices {
            for i in s..s + inner {
                let xh = (x[i] - mean) * is;
                xhat[i] = xh;
                y[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    (y, xhat, inv_std)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<T: Real>(
    grad_out: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch: usize,
    channels: usize,
    inner: usize,
    grad_x: Option<&mut [T]>,
    grad_gamma: Option<&mut [T]>,
    grad_beta: Option<&mut [T]>,
) {
    let m = T::lit((batch * inner) as f64);
    let mut sum_g = vec![T::zero(); channels];
    let mut sum_gx = vec![T::zero(); channels];
    for b in 0..batch {
        for c in 0..channels {
            let s = (b * channels + c) * inner;
            for i in s..s + inner {
                sum_g[c] += grad_out[i];
                sum_gx[c] += grad_out[i] * xhat[i];
            }
        }
    }
    if let Some(gg) = grad_gamma {
        for c in 0..channels {
            gg[c] += sum_gx[c];
        }
    }
    if let Some(gb) = grad_beta {
        for c in 0..channels {
            gb[c] += sum_g[c];
        }
    }
    if let Some(gx) = grad_x {
        for b in 0..batch {
            for c in 0..channels {
                let k = gamma[c] * inv_std[c] / m;
                let s = (b * channels + c) * inner;
                for i in s..s + inner {
                    gx[i] += k * (m * grad_out[i] - sum_g[c] - xhat[i] * sum_gx[c]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_index_modes() {
        let z = tap_index(3, 3, Padding::Zero);
        let c = tap_index(3, 3, Padding::Circular);
        let r = tap_index(3, 3, Padding::Replicate);
        // tap (0,0) at pixel (0,0) reads (-1,-1)
        assert_eq!(z[0], NONE);
        assert_eq!(c[0], 8);
        assert_eq!(r[0], 0);
        // center tap is the identity
        for p in 0..9 {
            assert_eq!(z[4 * 9 + p], p);
        }
    }
}
