//! Dense CHW primitives: direct convolution, max-pooling, global average
//! pooling, and their gradients. All feature maps are square, stored as flat
//! `[channel][row][col]` slices of 64-bit reals.

/// Output side of a pooling window scan.
pub fn pooled_side(side: usize, k: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad - k) / stride + 1
}

/// Same-padded stride-1 convolution: `out[co] = bias[co] + sum_ci w[co,ci] * in[ci]`.
/// `weight` is `[c_out][c_in][k][k]`, `pad = k / 2`, and `out` keeps the input side.
pub fn conv2d_forward(
    input: &[f64],
    c_in: usize,
    side: usize,
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
    k: usize,
    out: &mut [f64],
) {
    let ss = side * side;
    let pad = k / 2;
    debug_assert_eq!(input.len(), c_in * ss);
    debug_assert_eq!(weight.len(), c_out * c_in * k * k);
    debug_assert_eq!(out.len(), c_out * ss);
    for co in 0..c_out {
        out[co * ss..(co + 1) * ss].fill(bias[co]);
    }
    for co in 0..c_out {
        for ci in 0..c_in {
            let w_base = (co * c_in + ci) * k * k;
            let in_plane = &input[ci * ss..(ci + 1) * ss];
            for ky in 0..k {
                let (y_lo, y_hi) = tap_range(side, ky, pad);
                for kx in 0..k {
                    let w = weight[w_base + ky * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let (x_lo, x_hi) = tap_range(side, kx, pad);
                    for y in y_lo..y_hi {
                        let in_row = &in_plane[(y + ky - pad) * side..];
                        let out_row = &mut out[co * ss + y * side..];
                        for x in x_lo..x_hi {
                            out_row[x] += w * in_row[x + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Valid output range `[lo, hi)` for one kernel tap: positions where the tap
/// lands inside the unpadded input.
fn tap_range(side: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap);
    let hi = (side + pad - tap).min(side);
    (lo, hi.max(lo))
}

/// Gradients of [`conv2d_forward`]. Accumulates into `d_weight`/`d_bias`
/// (callers zero them per batch) and into `d_input` when provided.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f64],
    c_in: usize,
    side: usize,
    weight: &[f64],
    c_out: usize,
    k: usize,
    d_out: &[f64],
    mut d_input: Option<&mut [f64]>,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) {
    let ss = side * side;
    let pad = k / 2;
    for co in 0..c_out {
        d_bias[co] += d_out[co * ss..(co + 1) * ss].iter().sum::<f64>();
    }
    for co in 0..c_out {
        for ci in 0..c_in {
            let w_base = (co * c_in + ci) * k * k;
            let in_plane = &input[ci * ss..(ci + 1) * ss];
            for ky in 0..k {
                let (y_lo, y_hi) = tap_range(side, ky, pad);
                for kx in 0..k {
                    let (x_lo, x_hi) = tap_range(side, kx, pad);
                    let w = weight[w_base + ky * k + kx];
                    let mut dw = 0.0;
                    for y in y_lo..y_hi {
                        let in_row = &in_plane[(y + ky - pad) * side..];
                        let d_row = &d_out[co * ss + y * side..];
                        if let Some(d_in) = d_input.as_deref_mut() {
                            let d_in_row = &mut d_in[ci * ss + (y + ky - pad) * side..];
                            for x in x_lo..x_hi {
                                let g = d_row[x];
                                dw += g * in_row[x + kx - pad];
                                d_in_row[x + kx - pad] += w * g;
                            }
                        } else {
                            for x in x_lo..x_hi {
                                dw += d_row[x] * in_row[x + kx - pad];
                            }
                        }
                    }
                    d_weight[w_base + ky * k + kx] += dw;
                }
            }
        }
    }
}

/// Max-pooling over `k`-windows. Records the flat input index of each
/// window's maximum in `idx` (ties to the first element in row-major order),
/// which makes the backward pass a scatter-add.
#[allow(clippy::too_many_arguments)]
pub fn maxpool_forward(
    input: &[f64],
    c: usize,
    side: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
    idx: &mut [usize],
) {
    let out_side = pooled_side(side, k, stride, pad);
    let ss = side * side;
    debug_assert_eq!(out.len(), c * out_side * out_side);
    for ch in 0..c {
        let plane = &input[ch * ss..(ch + 1) * ss];
        for oy in 0..out_side {
            for ox in 0..out_side {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky).wrapping_sub(pad);
                    if iy >= side {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx).wrapping_sub(pad);
                        if ix >= side {
                            continue;
                        }
                        let v = plane[iy * side + ix];
                        // NaN poisons the window (a plain `>` would drop it
                        // and hide a diverged run); the MAX check keeps the
                        // index valid when the very first value is NaN.
                        if v > best || v.is_nan() || best_idx == usize::MAX {
                            best = v;
                            best_idx = ch * ss + iy * side + ix;
                        }
                    }
                }
                let o = ch * out_side * out_side + oy * out_side + ox;
                out[o] = best;
                idx[o] = best_idx;
            }
        }
    }
}

/// Scatter-add of pooled gradients back to the recorded argmax positions.
pub fn maxpool_backward(d_out: &[f64], idx: &[usize], d_input: &mut [f64]) {
    for (o, &i) in idx.iter().enumerate() {
        d_input[i] += d_out[o];
    }
}

/// Per-channel spatial mean.
pub fn global_avg_pool(input: &[f64], c: usize, side: usize, out: &mut [f64]) {
    let ss = side * side;
    for (ch, o) in out.iter_mut().enumerate().take(c) {
        *o = input[ch * ss..(ch + 1) * ss].iter().sum::<f64>() / ss as f64;
    }
}

/// Gradient of [`global_avg_pool`]: spreads each channel gradient uniformly.
pub fn global_avg_pool_backward(d_out: &[f64], c: usize, side: usize, d_input: &mut [f64]) {
    let ss = side * side;
    for ch in 0..c {
        let g = d_out[ch] / ss as f64;
        for v in &mut d_input[ch * ss..(ch + 1) * ss] {
            *v += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_1x1_identity_copies_and_shifts() {
        let input: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut out = vec![0.0; 9];
        conv2d_forward(&input, 1, 3, &[1.0], &[0.5], 1, 1, &mut out);
        for (i, &v) in out.iter().enumerate() {
            assert_eq!(v, i as f64 + 0.5);
        }
    }

    #[test]
    fn conv_3x3_box_filter_hand_values() {
        // 3x3 input 0..9, all-ones kernel, pad 1.
        let input: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut out = vec![0.0; 9];
        conv2d_forward(&input, 1, 3, &vec![1.0; 9], &[0.0], 1, 3, &mut out);
        assert_eq!(out[4], 36.0); // center: sum of everything
        assert_eq!(out[0], 0.0 + 1.0 + 3.0 + 4.0); // corner: 2x2 survives
        assert_eq!(out[2], 1.0 + 2.0 + 4.0 + 5.0);
    }

    #[test]
    fn conv_multi_channel_accumulates() {
        // Two input channels, kernel picks channel sums with weights 2 and 3.
        let input = [1.0, 1.0, 1.0, 1.0, 10.0, 10.0, 10.0, 10.0];
        let mut out = vec![0.0; 4];
        conv2d_forward(&input, 2, 2, &[2.0, 3.0], &[1.0], 1, 1, &mut out);
        for &v in &out {
            assert_eq!(v, 1.0 + 2.0 * 1.0 + 3.0 * 10.0);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c_in, c_out, side, k) = (2, 3, 5, 3);
        let input: Vec<f64> = (0..c_in * side * side)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let weight: Vec<f64> = (0..c_out * c_in * k * k)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let bias: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Scalar objective: weighted sum of outputs.
        let coef: Vec<f64> = (0..c_out * side * side)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let eval = |input: &[f64], weight: &[f64], bias: &[f64]| -> f64 {
            let mut out = vec![0.0; c_out * side * side];
            conv2d_forward(input, c_in, side, weight, bias, c_out, k, &mut out);
            out.iter().zip(&coef).map(|(a, b)| a * b).sum()
        };
        let mut d_input = vec![0.0; input.len()];
        let mut d_weight = vec![0.0; weight.len()];
        let mut d_bias = vec![0.0; bias.len()];
        conv2d_backward(
            &input, c_in, side, &weight, c_out, k, &coef,
            Some(&mut d_input), &mut d_weight, &mut d_bias,
        );
        let h = 1e-6;
        let check = |analytic: &[f64], base: &[f64], which: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(7 + which as u64);
            for _ in 0..20 {
                let i = rng.random_range(0..base.len());
                let mut hi = base.to_vec();
                let mut lo = base.to_vec();
                hi[i] += h;
                lo[i] -= h;
                let fd = match which {
                    0 => (eval(&hi, &weight, &bias) - eval(&lo, &weight, &bias)) / (2.0 * h),
                    1 => (eval(&input, &hi, &bias) - eval(&input, &lo, &bias)) / (2.0 * h),
                    _ => (eval(&input, &weight, &hi) - eval(&input, &weight, &lo)) / (2.0 * h),
                };
                assert!(
                    (fd - analytic[i]).abs() < 1e-6 * fd.abs().max(1.0),
                    "which={which} i={i}: fd {fd} vs {}",
                    analytic[i]
                );
            }
        };
        check(&d_input, &input, 0);
        check(&d_weight, &weight, 1);
        check(&d_bias, &bias, 2);
    }

    #[test]
    fn maxpool_2x2_stride_2_hand_values() {
        #[rustfmt::skip]
        let input = [
            1.0, 2.0, 5.0, 0.0,
            3.0, 4.0, 1.0, 1.0,
            0.0, 0.0, 9.0, 8.0,
            0.0, 0.0, 7.0, 6.0,
        ];
        let mut out = vec![0.0; 4];
        let mut idx = vec![0usize; 4];
        maxpool_forward(&input, 1, 4, 2, 2, 0, &mut out, &mut idx);
        assert_eq!(out, vec![4.0, 5.0, 0.0, 9.0]);
        assert_eq!(idx, vec![5, 2, 8, 10]);
        // Ties keep the first (row-major) element.
        assert_eq!(idx[2], 8);

        let mut d_in = vec![0.0; 16];
        maxpool_backward(&[1.0, 2.0, 3.0, 4.0], &idx, &mut d_in);
        assert_eq!(d_in[5], 1.0);
        assert_eq!(d_in[2], 2.0);
        assert_eq!(d_in[8], 3.0);
        assert_eq!(d_in[10], 4.0);
        assert_eq!(d_in.iter().sum::<f64>(), 10.0);
    }

    #[test]
    fn maxpool_3x3_stride_1_padded_keeps_side() {
        let side = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input: Vec<f64> = (0..2 * side * side)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        assert_eq!(pooled_side(side, 3, 1, 1), side);
        let mut out = vec![0.0; input.len()];
        let mut idx = vec![0usize; input.len()];
        maxpool_forward(&input, 2, side, 3, 1, 1, &mut out, &mut idx);
        // Every output dominates its own center cell.
        for (o, &v) in out.iter().enumerate() {
            assert!(v >= input[o]);
        }
        // The global max of each channel plane survives everywhere near it.
        let m0 = input[..16].iter().cloned().fold(f64::MIN, f64::max);
        assert!(out[..16].contains(&m0));
    }

    #[test]
    fn gap_and_backward() {
        let input = [1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0];
        let mut out = vec![0.0; 2];
        global_avg_pool(&input, 2, 2, &mut out);
        assert_eq!(out, vec![2.5, 10.0]);
        let mut d_in = vec![0.0; 8];
        global_avg_pool_backward(&[4.0, 8.0], 2, 2, &mut d_in);
        assert_eq!(&d_in[..4], &[1.0; 4]);
        assert_eq!(&d_in[4..], &[2.0; 4]);
    }
}
