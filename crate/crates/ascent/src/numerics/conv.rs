//! Convolution and pooling kernels over channel-major `[C, H, W]` slices.
//!
//! Convolution uses cross-correlation semantics and is lowered to GEMM via
//! im2col; the column matrix is laid out `[C*kh*kw, OH*OW]` so the forward
//! product is `weights[O, C*kh*kw] x col`, and the two backward products reuse
//! the same buffer through [`gemm_nt`]/[`gemm_tn`].

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output extent: floor((H + 2p - kh)/stride) + 1. Returns None when the
    /// kernel does not fit the padded input.
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if kh > h + 2 * pad || kw > w + 2 * pad || stride == 0 {
            return None;
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Some(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Expand one `[C, H, W]` image into `col[C*kh*kw, OH*OW]`.
pub fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    debug_assert_eq!(x.len(), g.c_in * g.h * g.w);
    debug_assert_eq!(col.len(), g.col_rows() * g.positions());
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto `[C, H, W]` (inverse of im2col).
pub fn col2im_add(g: &ConvGeom, col: &[f64], x: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// out[O, OH*OW] = weights[O, C*kh*kw] x im2col(x), plus per-channel bias.
/// `col` is caller-provided scratch of size `col_rows * positions`.
pub fn conv2d_forward(
    g: &ConvGeom,
    x: &[f64],
    weights: &[f64],
    bias: &[f64],
    col: &mut [f64],
    out: &mut [f64],
) {
    im2col(g, x, col);
    let p = g.positions();
    out.iter_mut().for_each(|v| *v = 0.0);
    gemm_nn(g.c_out, g.col_rows(), p, weights, col, out);
    for o in 0..g.c_out {
        let b = bias[o];
        for v in &mut out[o * p..(o + 1) * p] {
            *v += b;
        }
    }
}

/// Accumulates gradients for one sample. `col` must still hold im2col(x)
/// from the forward pass (or be recomputed by the caller).
pub fn conv2d_backward(
    g: &ConvGeom,
    d_out: &[f64],
    weights: &[f64],
    col: &[f64],
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    d_x: Option<&mut [f64]>,
    dcol_scratch: &mut [f64],
) {
    let p = g.positions();
    // dW += dOut x colT
    gemm_nt(g.c_out, p, g.col_rows(), d_out, col, d_weights);
    for o in 0..g.c_out {
        d_bias[o] += d_out[o * p..(o + 1) * p].iter().sum::<f64>();
    }
    if let Some(dx) = d_x {
        // dcol = WT x dOut, then scatter back onto the image.
        dcol_scratch.iter_mut().for_each(|v| *v = 0.0);
        gemm_tn(g.col_rows(), g.c_out, p, weights, d_out, dcol_scratch);
        col2im_add(g, dcol_scratch, dx);
    }
}

/// Windowed max over `[C, H, W]`; ties resolve to the first occurrence in
/// row-major order. `argmax` records the flat input index feeding each output.
pub fn max_pool2d_forward(
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    x: &[f64],
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    debug_assert_eq!(out.len(), c * oh * ow);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..window {
                    for kx in 0..window {
                        let iy = oy * stride + ky;
                        let ix = ox * stride + kx;
                        let v = plane[iy * w + ix];
                        if v > best {
                            best = v;
                            best_idx = iy * w + ix;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = ch * h * w + best_idx;
            }
        }
    }
}

pub fn max_pool2d_backward(d_out: &[f64], argmax: &[usize], d_x: &mut [f64]) {
    for (g, &idx) in d_out.iter().zip(argmax) {
        d_x[idx] += g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    /// Direct sliding-window cross-correlation, the oracle for the GEMM path.
    fn conv_oracle(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.c_out * g.oh * g.ow];
        for o in 0..g.c_out {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut s = b[o];
                    for c in 0..g.c_in {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && iy < g.h as isize && ix >= 0 && ix < g.w as isize {
                                    s += x[(c * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((o * g.c_in + c) * g.kh + ky) * g.kw + kx];
                                }
                            }
                        }
                    }
                    out[(o * g.oh + oy) * g.ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity_map() {
        let g = ConvGeom::new(1, 3, 3, 1, 1, 1, 1, 0).unwrap();
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let mut col = vec![0.0; g.col_rows() * g.positions()];
        let mut out = vec![0.0; 9];
        conv2d_forward(&g, &x, &[1.0], &[0.0], &mut col, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn all_ones_3x3_sums_to_nine() {
        let g = ConvGeom::new(1, 3, 3, 1, 3, 3, 1, 0).unwrap();
        let x = vec![1.0; 9];
        let w = vec![1.0; 9];
        let mut col = vec![0.0; g.col_rows() * g.positions()];
        let mut out = vec![0.0; 1];
        conv2d_forward(&g, &x, &w, &[0.0], &mut col, &mut out);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let mut rng = Rng::new(5);
        for trial in 0..50 {
            let c_in = 1 + rng.below(3);
            let c_out = 1 + rng.below(3);
            let h = 3 + rng.below(6);
            let w = 3 + rng.below(6);
            let k = 1 + 2 * rng.below(2); // 1 or 3
            let stride = 1 + rng.below(2);
            let pad = rng.below(2);
            let Some(g) = ConvGeom::new(c_in, h, w, c_out, k, k, stride, pad) else {
                continue;
            };
            let mut x = vec![0.0; c_in * h * w];
            let mut wt = vec![0.0; c_out * c_in * k * k];
            let mut b = vec![0.0; c_out];
            rng.fill_uniform(&mut x, -1.0, 1.0);
            rng.fill_uniform(&mut wt, -1.0, 1.0);
            rng.fill_uniform(&mut b, -1.0, 1.0);
            let mut col = vec![0.0; g.col_rows() * g.positions()];
            let mut out = vec![0.0; c_out * g.oh * g.ow];
            conv2d_forward(&g, &x, &wt, &b, &mut col, &mut out);
            let want = conv_oracle(&g, &x, &wt, &b);
            for (i, (a, e)) in out.iter().zip(&want).enumerate() {
                assert!((a - e).abs() < 1e-12, "trial {trial} idx {i}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn strided_case_from_contract() {
        // 1x5x5 input, 3x3 kernel, stride 2 -> 2x2 output, checked above via
        // the oracle; here just pin the geometry arithmetic.
        let g = ConvGeom::new(1, 5, 5, 1, 3, 3, 2, 0).unwrap();
        assert_eq!((g.oh, g.ow), (2, 2));
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        assert!(ConvGeom::new(1, 3, 3, 1, 5, 5, 1, 0).is_none());
        assert!(ConvGeom::new(1, 3, 3, 1, 5, 5, 1, 1).is_some());
    }

    #[test]
    fn pool_matches_loop_oracle() {
        let mut rng = Rng::new(6);
        for _ in 0..50 {
            let c = 1 + rng.below(2);
            let h = 4 + rng.below(4);
            let w = h;
            let window = 2;
            let stride = 2;
            let oh = (h - window) / stride + 1;
            let ow = (w - window) / stride + 1;
            let mut x = vec![0.0; c * h * w];
            rng.fill_uniform(&mut x, -1.0, 1.0);
            let mut out = vec![0.0; c * oh * ow];
            let mut arg = vec![0usize; out.len()];
            max_pool2d_forward(c, h, w, window, stride, &x, &mut out, &mut arg);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for ky in 0..window {
                            for kx in 0..window {
                                best = best
                                    .max(x[(ch * h + oy * stride + ky) * w + ox * stride + kx]);
                            }
                        }
                        assert_eq!(out[(ch * oh + oy) * ow + ox], best);
                    }
                }
            }
        }
    }

    #[test]
    fn pool_tie_takes_first_occurrence() {
        let x = vec![7.0, 7.0, 7.0, 7.0];
        let mut out = vec![0.0; 1];
        let mut arg = vec![0usize; 1];
        max_pool2d_forward(1, 2, 2, 2, 2, &x, &mut out, &mut arg);
        assert_eq!(arg[0], 0);
        let mut dx = vec![0.0; 4];
        max_pool2d_backward(&[1.0], &arg, &mut dx);
        assert_eq!(dx, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn col2im_inverts_scatter() {
        // With a 1x1 kernel and stride 1, im2col is the identity, so
        // col2im_add must be plain accumulation.
        let g = ConvGeom::new(2, 2, 2, 1, 1, 1, 1, 0).unwrap();
        let col: Vec<f64> = (1..=8).map(|v| v as f64).collect();
        let mut x = vec![1.0; 8];
        col2im_add(&g, &col, &mut x);
        for (i, v) in x.iter().enumerate() {
            assert_eq!(*v, 2.0 + i as f64);
        }
    }
}
