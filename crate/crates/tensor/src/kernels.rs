//! Raw forward kernels over [`Tensor`]s. Every function here is linear or
//! elementwise; the graph composes them so that backward passes are built
//! from the same kernels.

use crate::Tensor;

/// `c[m×n] = a[m×k] · b[k×n] (+ c if accumulate)`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the caller passes slices that cover every index touched by the
    // given dimensions and strides; `c` is a dense row-major m×n block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn out_extent(input: usize, kernel: usize, pad: usize) -> usize {
    (input + 2 * pad + 1)
        .checked_sub(kernel)
        .unwrap_or_else(|| panic!("kernel {kernel} larger than padded input {input}+2*{pad}"))
}

/// Unfolds one `[c, h, w]` image into a `[c*kh*kw, ho*wo]` column matrix.
fn im2col(img: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, pad: usize, col: &mut [f64]) {
    let ho = out_extent(h, kh, pad);
    let wo = out_extent(w, kw, pad);
    let p = ho * wo;
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation with symmetric zero padding.
/// `x: [n, ci, h, w]`, `weight: [co, ci, kh, kw]` → `[n, co, ho, wo]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, pad: usize) -> Tensor {
    let (n, ci, h, w) = x.dims4();
    let (co, wci, kh, kw) = weight.dims4();
    assert_eq!(ci, wci, "conv2d: input has {ci} channels, weight expects {wci}");
    let ho = out_extent(h, kh, pad);
    let wo = out_extent(w, kw, pad);
    let p = ho * wo;
    let kdim = ci * kh * kw;
    let direct = kh == 1 && kw == 1 && pad == 0;
    let mut col = if direct { Vec::new() } else { vec![0.0; kdim * p] };
    let mut out = vec![0.0; n * co * p];
    for b in 0..n {
        let img = &x.data()[b * ci * h * w..(b + 1) * ci * h * w];
        let cols: &[f64] = if direct {
            img
        } else {
            im2col(img, ci, h, w, kh, kw, pad, &mut col);
            &col
        };
        gemm(
            co,
            kdim,
            p,
            weight.data(),
            (kdim as isize, 1),
            cols,
            (p as isize, 1),
            &mut out[b * co * p..(b + 1) * co * p],
            false,
        );
    }
    Tensor::new(&[n, co, ho, wo], out)
}

/// Weight gradient of [`conv2d`]: `Σ_n grad_n · im2col(x_n)ᵀ`.
/// `x: [n, ci, h, w]`, `grad: [n, co, ho, wo]` → `[co, ci, kh, kw]`.
pub fn conv2d_weight(x: &Tensor, grad: &Tensor, kh: usize, kw: usize, pad: usize) -> Tensor {
    let (n, ci, h, w) = x.dims4();
    let (gn, co, ho, wo) = grad.dims4();
    assert_eq!(n, gn, "conv2d_weight: batch mismatch");
    assert_eq!(ho, out_extent(h, kh, pad), "conv2d_weight: height mismatch");
    assert_eq!(wo, out_extent(w, kw, pad), "conv2d_weight: width mismatch");
    let p = ho * wo;
    let kdim = ci * kh * kw;
    let direct = kh == 1 && kw == 1 && pad == 0;
    let mut col = if direct { Vec::new() } else { vec![0.0; kdim * p] };
    let mut out = vec![0.0; co * kdim];
    for b in 0..n {
        let img = &x.data()[b * ci * h * w..(b + 1) * ci * h * w];
        let cols: &[f64] = if direct {
            img
        } else {
            im2col(img, ci, h, w, kh, kw, pad, &mut col);
            &col
        };
        gemm(
            co,
            p,
            kdim,
            &grad.data()[b * co * p..(b + 1) * co * p],
            (p as isize, 1),
            cols,
            (1, p as isize),
            &mut out,
            b > 0,
        );
    }
    Tensor::new(&[co, ci, kh, kw], out)
}

/// Swaps the two channel axes and rotates the kernel by 180°:
/// `[a, b, kh, kw]` → `[b, a, kh, kw]`. It is its own adjoint.
pub fn flip_swap(weight: &Tensor) -> Tensor {
    let (a, b, kh, kw) = weight.dims4();
    let src = weight.data();
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            for y in 0..kh {
                for x in 0..kw {
                    out[((j * a + i) * kh + (kh - 1 - y)) * kw + (kw - 1 - x)] =
                        src[((i * b + j) * kh + y) * kw + x];
                }
            }
        }
    }
    Tensor::new(&[b, a, kh, kw], out)
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat index of the selected input element.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims, got {h}×{w}");
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                out.push(src[best]);
                idx.push(best as u32);
            }
        }
    }
    (Tensor::new(&[n, c, ho, wo], out), idx)
}

/// Adjoint of gathering at `idx`: writes `grad` into a zero tensor of `shape`.
pub fn pool_scatter(grad: &Tensor, idx: &[u32], shape: &[usize]) -> Tensor {
    assert_eq!(grad.len(), idx.len());
    let mut out = vec![0.0; shape.iter().product()];
    for (&g, &i) in grad.data().iter().zip(idx) {
        out[i as usize] += g;
    }
    Tensor::new(shape, out)
}

/// Reads `x` at `idx`, producing a tensor of `shape`.
pub fn pool_gather(x: &Tensor, idx: &[u32], shape: &[usize]) -> Tensor {
    let src = x.data();
    Tensor::new(shape, idx.iter().map(|&i| src[i as usize]).collect())
}

/// `[n, 4c, h, w]` → `[n, c, 2h, 2w]`, channel `4c' + 2a + b` landing at
/// spatial offset `(a, b)` of each 2×2 cell.
pub fn depth_to_space(x: &Tensor) -> Tensor {
    let (n, c4, h, w) = x.dims4();
    assert_eq!(c4 % 4, 0, "depth_to_space needs a multiple of 4 channels");
    let c = c4 / 4;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..n {
        for ch in 0..c {
            for a in 0..2 {
                for bb in 0..2 {
                    let sp = ((b * c4 + ch * 4 + a * 2 + bb) * h) * w;
                    let dp = (b * c + ch) * 4 * h * w;
                    for y in 0..h {
                        for x_ in 0..w {
                            out[dp + (2 * y + a) * 2 * w + 2 * x_ + bb] = src[sp + y * w + x_];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, 2 * h, 2 * w], out)
}

/// Inverse (and adjoint) of [`depth_to_space`].
pub fn space_to_depth(x: &Tensor) -> Tensor {
    let (n, c, h2, w2) = x.dims4();
    assert!(h2 % 2 == 0 && w2 % 2 == 0, "space_to_depth needs even spatial dims");
    let (h, w) = (h2 / 2, w2 / 2);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..n {
        for ch in 0..c {
            for a in 0..2 {
                for bb in 0..2 {
                    let dp = ((b * c * 4 + ch * 4 + a * 2 + bb) * h) * w;
                    let sp = (b * c + ch) * h2 * w2;
                    for y in 0..h {
                        for x_ in 0..w {
                            out[dp + y * w + x_] = src[sp + (2 * y + a) * w2 + 2 * x_ + bb];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, 4 * c, h, w], out)
}

/// `[n, c, h, w]` → `[c]`, summing over batch and space.
pub fn sum_channel(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = vec![0.0; c];
    for (plane, chunk) in x.data().chunks(hw).enumerate() {
        out[plane % c] += chunk.iter().sum::<f64>();
    }
    let _ = n;
    Tensor::new(&[c], out)
}

/// `[c]` → `[n, c, h, w]`, repeating each channel value.
pub fn expand_channel(v: &Tensor, shape: &[usize]) -> Tensor {
    let &[n, c, h, w] = shape else { panic!("expand_channel target must be rank 4") };
    assert_eq!(v.shape(), &[c], "expand_channel: vector/shape mismatch");
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c * hw);
    for _ in 0..n {
        for &val in v.data() {
            out.extend(std::iter::repeat(val).take(hw));
        }
    }
    Tensor::new(shape, out)
}

/// `[n, c, h, w]` → `[n, 1, h, w]`, summing over channels.
pub fn sum_over_channels(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = vec![0.0; n * hw];
    for b in 0..n {
        let dst = &mut out[b * hw..(b + 1) * hw];
        for ch in 0..c {
            let src = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Tensor::new(&[n, 1, h, w], out)
}

/// `[n, 1, h, w]` → `[n, c, h, w]`.
pub fn expand_over_channels(x: &Tensor, c: usize) -> Tensor {
    let (n, one, h, w) = x.dims4();
    assert_eq!(one, 1, "expand_over_channels expects a single channel");
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c * hw);
    for b in 0..n {
        let src = &x.data()[b * hw..(b + 1) * hw];
        for _ in 0..c {
            out.extend_from_slice(src);
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Channels `start..start+len` of `[n, c, h, w]`.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(start + len <= c, "slice_channels out of range");
    let hw = h * w;
    let mut out = Vec::with_capacity(n * len * hw);
    for b in 0..n {
        out.extend_from_slice(&x.data()[(b * c + start) * hw..(b * c + start + len) * hw]);
    }
    Tensor::new(&[n, len, h, w], out)
}

/// Places `x` at channel offset `start` of a zero tensor with `total` channels.
pub fn embed_channels(x: &Tensor, start: usize, total: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(start + c <= total, "embed_channels out of range");
    let hw = h * w;
    let mut out = vec![0.0; n * total * hw];
    for b in 0..n {
        out[(b * total + start) * hw..(b * total + start + c) * hw]
            .copy_from_slice(&x.data()[b * c * hw..(b + 1) * c * hw]);
    }
    Tensor::new(&[n, total, h, w], out)
}

/// Per-pixel maximum over channels, `[n, c, h, w]` → `[n, 1, h, w]`.
pub fn max_over_channels(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = vec![f64::NEG_INFINITY; n * hw];
    for b in 0..n {
        let dst = &mut out[b * hw..(b + 1) * hw];
        for ch in 0..c {
            let src = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = d.max(s);
            }
        }
    }
    Tensor::new(&[n, 1, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, wt: &Tensor, pad: usize) -> Tensor {
        let (n, ci, h, w) = x.dims4();
        let (co, _, kh, kw) = wt.dims4();
        let ho = h + 2 * pad + 1 - kh;
        let wo = w + 2 * pad + 1 - kw;
        let mut out = vec![0.0; n * co * ho * wo];
        for b in 0..n {
            for o in 0..co {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = 0.0;
                        for i in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = y as isize + ky as isize - pad as isize;
                                    let ix = xx as isize + kx as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.data()[((b * ci + i) * h + iy as usize) * w + ix as usize]
                                            * wt.data()[((o * ci + i) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((b * co + o) * ho + y) * wo + xx] = acc;
                    }
                }
            }
        }
        Tensor::new(&[n, co, ho, wo], out)
    }

    fn seq(shape: &[usize], scale: f64) -> Tensor {
        Tensor::from_fn(shape, |i| ((i * 37 % 11) as f64 - 5.0) * scale)
    }

    #[test]
    fn conv_matches_naive() {
        let x = seq(&[2, 3, 5, 4], 0.1);
        for (k, pad) in [(3, 1), (1, 0), (3, 0), (2, 1)] {
            let wt = seq(&[4, 3, k, k], 0.07);
            let fast = conv2d(&x, &wt, pad);
            let slow = naive_conv(&x, &wt, pad);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k} pad={pad}");
        }
    }

    #[test]
    fn conv_weight_is_adjoint_of_conv() {
        // <conv(x, w), g> == <w, conv_weight(x, g)>
        let x = seq(&[2, 3, 6, 5], 0.1);
        let wt = seq(&[4, 3, 3, 3], 0.05);
        let out = conv2d(&x, &wt, 1);
        let g = seq(out.shape(), 0.3);
        let lhs: f64 = out.mul(&g).sum();
        let gw = conv2d_weight(&x, &g, 3, 3, 1);
        let rhs: f64 = wt.mul(&gw).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn flipped_conv_is_input_adjoint() {
        let x = seq(&[1, 2, 5, 5], 0.2);
        let wt = seq(&[3, 2, 3, 3], 0.1);
        let out = conv2d(&x, &wt, 1);
        let g = seq(out.shape(), 0.4);
        let gx = conv2d(&g, &flip_swap(&wt), 1);
        assert!((out.mul(&g).sum() - x.mul(&gx).sum()).abs() < 1e-10);
    }

    #[test]
    fn depth_space_roundtrip() {
        let x = seq(&[2, 8, 3, 2], 1.0);
        assert_eq!(space_to_depth(&depth_to_space(&x)), x);
    }

    #[test]
    fn maxpool_picks_maximum() {
        let x = Tensor::new(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]);
        let (out, idx) = maxpool2(&x);
        assert_eq!(out.data(), &[5.0, 9.0]);
        assert_eq!(idx, vec![1, 6]);
    }
}
