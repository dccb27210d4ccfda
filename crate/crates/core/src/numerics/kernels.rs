//! Slice-level compute kernels shared by eager evaluation and the tape.

/// Operand layout for [`gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Row-major as stored.
    Plain,
    /// Row-major storage of the transpose.
    Transposed,
}

/// `c = beta * c + a · b` for an `m×k` left operand and `k×n` right operand.
///
/// `a` is stored as `m×k` (or `k×m` when transposed); likewise `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Plain => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Plain => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: lengths checked above; strides describe in-bounds views of a
    // dense row-major m×k / k×n / m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over an `N×C×H×W` batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn cols_len(&self) -> usize {
        self.patch() * self.batch * self.out_plane()
    }
}

/// Unfolds the batch into a `(C·kh·kw) × (N·H'·W')` matrix.
pub fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_plane();
    let ncols = g.batch * plane;
    let mut cols = vec![0.0; g.patch() * ncols];
    let (h, w, pad, stride) = (g.height as isize, g.width as isize, g.pad as isize, g.stride);
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &input[(n * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * stride) as isize + ki as isize - pad;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        let dst_line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        for (ox, d) in dst_line.iter_mut().enumerate() {
                            let ix = (ox * stride) as isize + kj as isize - pad;
                            if ix >= 0 && ix < w {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates column entries back onto the input grid.
pub fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let plane = g.out_plane();
    let ncols = g.batch * plane;
    let (h, w, pad, stride) = (g.height as isize, g.width as isize, g.pad as isize, g.stride);
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut out[(n * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * stride) as isize + ki as isize - pad;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let dst_line = &mut dst[iy as usize * g.width..][..g.width];
                        let src_line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                        for (ox, &s) in src_line.iter().enumerate() {
                            let ix = (ox * stride) as isize + kj as isize - pad;
                            if ix >= 0 && ix < w {
                                dst_line[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Target size, in `f64`s, of the column buffer for one block of images.
const BLOCK_COLS: usize = 1 << 16;

impl ConvGeom {
    /// Images per block so a block's columns stay cache-sized.
    fn block_images(&self) -> usize {
        (BLOCK_COLS / (self.patch() * self.out_plane()).max(1)).clamp(1, self.batch.max(1))
    }

    fn with_batch(&self, batch: usize) -> ConvGeom {
        ConvGeom { batch, ..*self }
    }

    fn in_image(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn out_image(&self) -> usize {
        self.filters * self.out_plane()
    }
}

/// Cross-correlation of an `N×C×H×W` input with `F×C×kh×kw` kernels.
/// Output is `N×F×H'×W'`.
pub fn conv_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_plane();
    let mut out = vec![0.0; g.batch * g.out_image()];
    let per = g.block_images();
    for start in (0..g.batch).step_by(per) {
        let gb = g.with_batch(per.min(g.batch - start));
        let ncols = gb.batch * plane;
        let cols = im2col(&input[start * g.in_image()..][..gb.batch * g.in_image()], &gb);
        let mut tmp = vec![0.0; g.filters * ncols];
        gemm(g.filters, g.patch(), ncols, kernel, Layout::Plain, &cols, Layout::Plain, 0.0, &mut tmp);
        // [F, n, P] -> [n, F, P]
        let dst = &mut out[start * g.out_image()..][..gb.batch * g.out_image()];
        for f in 0..g.filters {
            for n in 0..gb.batch {
                dst[(n * g.filters + f) * plane..][..plane].copy_from_slice(&tmp[f * ncols + n * plane..][..plane]);
            }
        }
    }
    out
}

/// Kernel gradient `Σ_blocks grad_F · colsᵀ` for an upstream `N×F×H'×W'` gradient.
pub fn conv_grad_kernel(input: &[f64], grad: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dk = vec![0.0; g.filters * g.patch()];
    let per = g.block_images();
    for start in (0..g.batch).step_by(per) {
        let gb = g.with_batch(per.min(g.batch - start));
        let ncols = gb.batch * g.out_plane();
        let cols = im2col(&input[start * g.in_image()..][..gb.batch * g.in_image()], &gb);
        let gf = grad_to_filter_major(&grad[start * g.out_image()..][..gb.batch * g.out_image()], &gb);
        gemm(g.filters, ncols, g.patch(), &gf, Layout::Plain, &cols, Layout::Transposed, 1.0, &mut dk);
    }
    dk
}

/// Input gradient: `col2im(Kᵀ · grad_F)` block by block.
pub fn conv_grad_input(kernel: &[f64], grad: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.batch * g.in_image()];
    let per = g.block_images();
    for start in (0..g.batch).step_by(per) {
        let gb = g.with_batch(per.min(g.batch - start));
        let ncols = gb.batch * g.out_plane();
        let gf = grad_to_filter_major(&grad[start * g.out_image()..][..gb.batch * g.out_image()], &gb);
        let mut dcols = vec![0.0; gb.cols_len()];
        gemm(g.patch(), g.filters, ncols, kernel, Layout::Transposed, &gf, Layout::Plain, 0.0, &mut dcols);
        col2im(&dcols, &gb, &mut dx[start * g.in_image()..][..gb.batch * g.in_image()]);
    }
    dx
}

/// Rearranges an `N×F×P` gradient into `F×(N·P)`.
pub fn grad_to_filter_major(grad: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_plane();
    let ncols = g.batch * plane;
    let mut out = vec![0.0; grad.len()];
    for n in 0..g.batch {
        for f in 0..g.filters {
            out[f * ncols + n * plane..][..plane]
                .copy_from_slice(&grad[(n * g.filters + f) * plane..][..plane]);
        }
    }
    out
}

/// 2×2 stride-2 max pooling over `N×C×H×W` with even `H`, `W`.
///
/// Returns pooled values and, per output, the flat input index of the max.
/// Ties keep the first position in row-major window order.
pub fn maxpool2x2(input: &[f64], nc: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nc * oh * ow);
    let mut arg = Vec::with_capacity(nc * oh * ow);
    for p in 0..nc {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Row-wise softmax of `logits / tau` with max subtraction.
pub fn softmax_rows(logits: &[f64], cols: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s / tau - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Row-wise log-softmax (temperature 1).
pub fn log_softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = src.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, Layout::Plain, &b, Layout::Plain, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, Layout::Transposed, &b, Layout::Plain, 0.0, &mut c);
        // aᵀ·b
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, Layout::Plain, &b, Layout::Transposed, 0.0, &mut c);
        // a·bᵀ
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            batch: 2,
            channels: 2,
            height: 5,
            width: 4,
            filters: 1,
            kh: 3,
            kw: 2,
            stride: 2,
            pad: 1,
            out_h: 3,
            out_w: 3,
        };
        let x: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.cols_len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let ax = im2col(&x, &g);
        let mut aty = vec![0.0; x.len()];
        col2im(&y, &g, &mut aty);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn maxpool_tie_keeps_first() {
        let (v, a) = maxpool2x2(&[1.0, 1.0, 0.0, 1.0], 1, 2, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(a, vec![0]);
    }
}
