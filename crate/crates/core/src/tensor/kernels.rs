//! Raw forward/backward kernels over row-major slices.
//!
//! Convolution is lowered to a matrix product (im2col) per batch element.
//! All accumulation orders are fixed, so identical inputs give bit-identical
//! outputs.

/// `c = a · b` (or `c += a · b` when `accumulate`), where `a` is `m×k` and
/// `b` is `k×n` as logical matrices. A transposed operand is stored in the
/// opposite orientation (`k×m` for `a`, `n×k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too small");
    assert!(b.len() >= k * n, "gemm: rhs too small");
    assert!(c.len() >= m * n, "gemm: output too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every index touched through the
    // given strides lies inside the three slices, and `c` does not alias
    // `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_area(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Output columns `ox` whose input column `ox·stride + kj − padding` lies
/// inside `0..width`.
fn valid_range(g: &ConvGeometry, kj: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.padding);
    let lo = if p > kj { (p - kj).div_ceil(s) } else { 0 };
    let hi = if g.width + p > kj {
        ((g.width + p - kj - 1) / s + 1).min(g.out_width)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let area = g.out_area();
    let h = g.height as isize;
    for ci in 0..g.in_channels {
        let plane = &image[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (ci * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * area..(row + 1) * area];
                let (lo, hi) = valid_range(g, kj);
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let start = lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (out, &v) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *out = v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let area = g.out_area();
    let h = g.height as isize;
    for ci in 0..g.in_channels {
        let plane = &mut image[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (ci * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * area..(row + 1) * area];
                let (lo, hi) = valid_range(g, kj);
                if lo == hi {
                    continue;
                }
                let start = lo * g.stride + kj - g.padding;
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &src[oy * g.out_width + lo..oy * g.out_width + hi];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (d, v) in dst[start..].iter_mut().step_by(g.stride).zip(line) {
                        *d += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let area = g.out_area();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * area;
    let mut out = vec![0.0; g.batch * out_len];
    let mut cols = vec![0.0; g.patch_len() * area];
    for b in 0..g.batch {
        im2col(g, &input[b * in_len..(b + 1) * in_len], &mut cols);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        gemm(
            g.out_channels,
            g.patch_len(),
            area,
            kernel,
            false,
            &cols,
            false,
            dst,
            false,
        );
        for (co, plane) in dst.chunks_exact_mut(area).enumerate() {
            let bv = bias[co];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Accumulates input, kernel and bias gradients for one convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    let area = g.out_area();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * area;
    let patch = g.patch_len();
    let mut cols = vec![0.0; patch * area];
    for b in 0..g.batch {
        let gb = &grad_out[b * out_len..(b + 1) * out_len];
        if let Some(gk) = grad_kernel.as_deref_mut() {
            im2col(g, &input[b * in_len..(b + 1) * in_len], &mut cols);
            gemm(g.out_channels, area, patch, gb, false, &cols, true, gk, true);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            gemm(patch, g.out_channels, area, kernel, true, gb, false, &mut cols, false);
            col2im(g, &cols, &mut gi[b * in_len..(b + 1) * in_len]);
        }
        if let Some(gbias) = grad_bias.as_deref_mut() {
            for (co, plane) in gb.chunks_exact(area).enumerate() {
                gbias[co] += plane.iter().sum::<f64>();
            }
        }
    }
}

/// Non-overlapping max pooling over `[planes, h, w]`; returns the pooled
/// values and, per output cell, the flat input index of the first maximum in
/// row-major window order.
pub(crate) fn maxpool_forward(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / window, w / window);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * window * w + ox * window;
                let mut best = input[best_idx];
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * window + dy) * w + ox * window + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn dense_forward(
    batch: usize,
    in_features: usize,
    out_features: usize,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; batch * out_features];
    gemm(
        batch,
        in_features,
        out_features,
        input,
        false,
        weight,
        true,
        &mut out,
        false,
    );
    for row in out.chunks_exact_mut(out_features) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct cross-correlation used as an independent reference.
    fn direct_conv(g: &ConvGeometry, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.out_channels * g.out_height * g.out_width];
        for b in 0..g.batch {
            for co in 0..g.out_channels {
                for oy in 0..g.out_height {
                    for ox in 0..g.out_width {
                        let mut acc = bias[co];
                        for ci in 0..g.in_channels {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= g.height as isize
                                        || ix >= g.width as isize
                                    {
                                        continue;
                                    }
                                    let iv = input[((b * g.in_channels + ci) * g.height
                                        + iy as usize)
                                        * g.width
                                        + ix as usize];
                                    let kv = kernel
                                        [((co * g.in_channels + ci) * g.kernel + ki) * g.kernel + kj];
                                    acc += iv * kv;
                                }
                            }
                        }
                        out[((b * g.out_channels + co) * g.out_height + oy) * g.out_width + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn geometry(batch: usize, cin: usize, h: usize, w: usize, cout: usize, k: usize, s: usize, p: usize) -> ConvGeometry {
        ConvGeometry {
            batch,
            in_channels: cin,
            height: h,
            width: w,
            out_channels: cout,
            kernel: k,
            stride: s,
            padding: p,
            out_height: (h + 2 * p - k) / s + 1,
            out_width: (w + 2 * p - k) / s + 1,
        }
    }

    const GEOMETRIES: [(usize, usize, usize); 7] = [(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2), (3, 3, 2), (2, 2, 0), (5, 2, 0)];

    fn fill(n: usize, mul: usize, modulo: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * mul % modulo) as f64) / 5.0 - 1.0).collect()
    }

    #[test]
    fn lowered_conv_matches_direct_cross_correlation() {
        for (k, s, p) in GEOMETRIES {
            let g = geometry(2, 3, 7, 6, 4, k, s, p);
            let input = fill(2 * 3 * 7 * 6, 37, 17);
            let kernel = fill(4 * 3 * k * k, 13, 11);
            let bias = [0.1, -0.2, 0.3, 0.0];
            let fast = conv2d_forward(&g, &input, &kernel, &bias);
            let slow = direct_conv(&g, &input, &kernel, &bias);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k{k} s{s} p{p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn lowered_backward_matches_direct_adjoint() {
        for (k, s, p) in GEOMETRIES {
            let g = geometry(2, 3, 7, 6, 4, k, s, p);
            let input = fill(2 * 3 * 7 * 6, 37, 17);
            let kernel = fill(4 * 3 * k * k, 13, 11);
            let grad_out = fill(2 * 4 * g.out_height * g.out_width, 7, 19);
            let mut gi = vec![0.0; input.len()];
            let mut gk = vec![0.0; kernel.len()];
            let mut gb = vec![0.0; 4];
            conv2d_backward(&g, &input, &kernel, &grad_out, Some(&mut gi), Some(&mut gk), Some(&mut gb));

            let (mut ei, mut ek, mut eb) = (vec![0.0; gi.len()], vec![0.0; gk.len()], vec![0.0; 4]);
            for b in 0..2 {
                for co in 0..4 {
                    for oy in 0..g.out_height {
                        for ox in 0..g.out_width {
                            let go = grad_out[((b * 4 + co) * g.out_height + oy) * g.out_width + ox];
                            eb[co] += go;
                            for ci in 0..3 {
                                for ki in 0..k {
                                    for kj in 0..k {
                                        let iy = (oy * s + ki) as isize - p as isize;
                                        let ix = (ox * s + kj) as isize - p as isize;
                                        if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                                            continue;
                                        }
                                        let ii = ((b * 3 + ci) * 7 + iy as usize) * 6 + ix as usize;
                                        let kk = ((co * 3 + ci) * k + ki) * k + kj;
                                        ei[ii] += kernel[kk] * go;
                                        ek[kk] += input[ii] * go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for (got, want) in [(&gi, &ei), (&gk, &ek), (&gb, &eb)] {
                for (a, b) in got.iter().zip(want.iter()) {
                    assert!((a - b).abs() < 1e-12, "k{k} s{s} p{p}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let (out, idx) = maxpool_forward(&[5.0; 4], 1, 2, 2, 2);
        assert_eq!(out, vec![5.0]);
        assert_eq!(idx, vec![0]);
    }
}
