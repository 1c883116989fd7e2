//! Plain slice kernels behind the graph ops. Layouts are row-major
//! `[features, length]`.

use crate::layers::{PoolKind, ShuffleOrder};
use crate::scalar::Scalar;

/// Unfolds `x[channels, len]` into `[channels * kernel, len]` with zero
/// padding of `kernel / 2` on each side, so that row `g * kernel + k`, column
/// `t` holds `x[g, t + k - kernel / 2]`.
pub(crate) fn im2col<T: Scalar>(x: &[T], channels: usize, len: usize, kernel: usize) -> Vec<T> {
    let pad = kernel / 2;
    let mut cols = vec![T::zero(); channels * kernel * len];
    for g in 0..channels {
        let src = &x[g * len..(g + 1) * len];
        for k in 0..kernel {
            let row = &mut cols[(g * kernel + k) * len..(g * kernel + k + 1) * len];
            // row[t] = src[t + k - pad] where in range
            let shift = k as isize - pad as isize;
            let lo = (-shift).max(0) as usize;
            let hi = (len as isize - shift).min(len as isize).max(0) as usize;
            if lo < hi {
                let s0 = (lo as isize + shift) as usize;
                row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto `dx`.
pub(crate) fn col2im_add<T: Scalar>(
    dcols: &[T],
    channels: usize,
    len: usize,
    kernel: usize,
    dx: &mut [T],
) {
    let pad = kernel / 2;
    for g in 0..channels {
        let dst = &mut dx[g * len..(g + 1) * len];
        for k in 0..kernel {
            let row = &dcols[(g * kernel + k) * len..(g * kernel + k + 1) * len];
            let shift = k as isize - pad as isize;
            let lo = (-shift).max(0) as usize;
            let hi = (len as isize - shift).min(len as isize).max(0) as usize;
            if lo < hi {
                let s0 = (lo as isize + shift) as usize;
                for (d, &r) in dst[s0..s0 + (hi - lo)].iter_mut().zip(&row[lo..hi]) {
                    *d += r;
                }
            }
        }
    }
}

/// Pairwise pooling over disjoint windows `(2t, 2t+1)`. Returns the pooled
/// values and, for max pooling, which element of each pair won (ties pick
/// the first).
pub(crate) fn pool2_forward<T: Scalar>(
    x: &[T],
    features: usize,
    len: usize,
    kind: PoolKind,
) -> (Vec<T>, Vec<u8>) {
    let half = len / 2;
    let mut out = vec![T::zero(); features * half];
    let mut winner = if kind == PoolKind::Max {
        vec![0u8; features * half]
    } else {
        Vec::new()
    };
    let two = T::from_f64(2.0);
    for f in 0..features {
        for t in 0..half {
            let a = x[f * len + 2 * t];
            let b = x[f * len + 2 * t + 1];
            let o = f * half + t;
            out[o] = match kind {
                PoolKind::Max => {
                    if b > a {
                        winner[o] = 1;
                        b
                    } else {
                        a
                    }
                }
                PoolKind::Average => (a + b) / two,
                PoolKind::L2 => ((a * a + b * b) / two).sqrt(),
            };
        }
    }
    (out, winner)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pool2_backward_add<T: Scalar>(
    x: &[T],
    out: &[T],
    winner: &[u8],
    dout: &[T],
    features: usize,
    len: usize,
    kind: PoolKind,
    dx: &mut [T],
) {
    let half = len / 2;
    let two = T::from_f64(2.0);
    for f in 0..features {
        for t in 0..half {
            let o = f * half + t;
            let ia = f * len + 2 * t;
            let g = dout[o];
            match kind {
                PoolKind::Max => dx[ia + winner[o] as usize] += g,
                PoolKind::Average => {
                    dx[ia] += g / two;
                    dx[ia + 1] += g / two;
                }
                PoolKind::L2 => {
                    // d/da sqrt((a^2 + b^2) / 2) = a / (2 y)
                    let y = out[o];
                    if y > T::zero() {
                        dx[ia] += g * x[ia] / (two * y);
                        dx[ia + 1] += g * x[ia + 1] / (two * y);
                    }
                }
            }
        }
    }
}

/// Source feature row of output feature `c` at phase `s`.
#[inline]
pub(crate) fn shuffle_source(
    order: ShuffleOrder,
    c: usize,
    s: usize,
    out_features: usize,
) -> usize {
    match order {
        ShuffleOrder::Interleaved => 2 * c + s,
        ShuffleOrder::Blocked => c + s * out_features,
    }
}

/// `[2F, L] -> [F, 2L]`.
pub(crate) fn shuffle_forward<T: Scalar>(
    x: &[T],
    in_features: usize,
    len: usize,
    order: ShuffleOrder,
) -> Vec<T> {
    let f_out = in_features / 2;
    let mut out = vec![T::zero(); in_features * len];
    for c in 0..f_out {
        for s in 0..2 {
            let src = shuffle_source(order, c, s, f_out);
            for t in 0..len {
                out[c * 2 * len + 2 * t + s] = x[src * len + t];
            }
        }
    }
    out
}

pub(crate) fn shuffle_backward_add<T: Scalar>(
    dout: &[T],
    in_features: usize,
    len: usize,
    order: ShuffleOrder,
    dx: &mut [T],
) {
    let f_out = in_features / 2;
    for c in 0..f_out {
        for s in 0..2 {
            let src = shuffle_source(order, c, s, f_out);
            for t in 0..len {
                dx[src * len + t] += dout[c * 2 * len + 2 * t + s];
            }
        }
    }
}

/// Column-wise softmax of `logits[classes, len]` at column `t`.
pub(crate) fn softmax_column<T: Scalar>(
    logits: &[T],
    classes: usize,
    len: usize,
    t: usize,
) -> Vec<T> {
    let mut maxv = T::neg_infinity();
    for v in 0..classes {
        maxv = maxv.max(logits[v * len + t]);
    }
    let mut probs: Vec<T> = (0..classes)
        .map(|v| (logits[v * len + t] - maxv).exp())
        .collect();
    let z: T = probs.iter().copied().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    probs
}
