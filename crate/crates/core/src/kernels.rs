//! Raw numeric kernels over flat row-major slices. Shapes are validated by
//! the callers in [`crate::tape`]; these functions only index.
//!
//! All reductions run in a fixed sequential order so results are
//! bit-reproducible.

/// Columns per tile, sized so four `c` row tiles and a `b` row tile stay in L1.
const TILE: usize = 256;

/// `c[m×n] += a[m×k] · b[k×n]`
///
/// Four rows of `c` are updated per pass over a `b` row tile; every `c`
/// entry still accumulates over `p` in ascending order.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for j0 in (0..n).step_by(TILE) {
        let j1 = (j0 + TILE).min(n);
        let mut i = 0;
        while i + 4 <= m {
            let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            let (c0, c1, c2, c3) = (&mut c0[j0..j1], &mut c1[j0..j1], &mut c2[j0..j1], &mut c3[j0..j1]);
            for p in 0..k {
                let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
                let b_row = &b[p * n + j0..p * n + j1];
                let rows = c0.iter_mut().zip(c1.iter_mut()).zip(c2.iter_mut().zip(c3.iter_mut()));
                for (((x0, x1), (x2, x3)), &bv) in rows.zip(b_row) {
                    *x0 += a0 * bv;
                    *x1 += a1 * bv;
                    *x2 += a2 * bv;
                    *x3 += a3 * bv;
                }
            }
            i += 4;
        }
        for i in i..m {
            let c_row = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                let av = a[i * k + p];
                for (cv, &bv) in c_row.iter_mut().zip(&b[p * n + j0..p * n + j1]) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` with `a` stored as `[k×m]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let at = transpose(k, m, a);
    gemm_nn(m, k, n, &at, b, c);
}

/// `c[m×n] += a · bᵀ` with `b` stored as `[n×k]`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, &bt, c);
}

/// Transposes a `[rows×cols]` matrix.
pub fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a 2-d convolution window sweep from `(h, w)` to `(ho, wo)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one `[C, H, W]` image into a `[C·k·k, Ho·Wo]` patch matrix.
pub fn im2col(win: &Window, x: &[f64], cols: &mut [f64]) {
    let k = win.kernel;
    let ncols = win.cols();
    for c in 0..win.channels {
        let plane = &x[c * win.h * win.w..(c + 1) * win.h * win.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oh in 0..win.ho {
                    let ih = (oh * win.stride + ki) as isize - win.padding as isize;
                    let dst_row = &mut dst[oh * win.wo..(oh + 1) * win.wo];
                    if ih < 0 || ih >= win.h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * win.w..(ih as usize + 1) * win.w];
                    for (ow, d) in dst_row.iter_mut().enumerate() {
                        let iw = (ow * win.stride + kj) as isize - win.padding as isize;
                        *d = if iw < 0 || iw >= win.w as isize { 0.0 } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back into `[C, H, W]`.
pub fn col2im(win: &Window, cols: &[f64], x: &mut [f64]) {
    let k = win.kernel;
    let ncols = win.cols();
    for c in 0..win.channels {
        let plane = &mut x[c * win.h * win.w..(c + 1) * win.h * win.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oh in 0..win.ho {
                    let ih = (oh * win.stride + ki) as isize - win.padding as isize;
                    if ih < 0 || ih >= win.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * win.w..(ih as usize + 1) * win.w];
                    for ow in 0..win.wo {
                        let iw = (ow * win.stride + kj) as isize - win.padding as isize;
                        if iw >= 0 && iw < win.w as isize {
                            dst[iw as usize] += src[oh * win.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Parameters shared by the convolution kernels below.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Window of the forward convolution (input side).
    fn conv_window(&self) -> Window {
        Window {
            channels: self.c_in,
            h: self.h,
            w: self.w,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            ho: self.ho,
            wo: self.wo,
        }
    }

    /// Window of the transposed convolution: the strided conv maps the
    /// deconv *output* `(ho, wo)` back to its input `(h, w)`.
    fn deconv_window(&self) -> Window {
        Window {
            channels: self.c_out,
            h: self.ho,
            w: self.wo,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            ho: self.h,
            wo: self.w,
        }
    }
}

/// `[N, C, L]` → `[C, N·L]`.
fn to_channel_major(batch: usize, c: usize, len: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        for ch in 0..c {
            let src = &x[(n * c + ch) * len..(n * c + ch + 1) * len];
            out[(ch * batch + n) * len..(ch * batch + n + 1) * len].copy_from_slice(src);
        }
    }
    out
}

/// `[C, N·L]` → `[N, C, L]`.
fn to_batch_major(batch: usize, c: usize, len: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for n in 0..batch {
            let src = &x[(ch * batch + n) * len..(ch * batch + n + 1) * len];
            out[(n * c + ch) * len..(n * c + ch + 1) * len].copy_from_slice(src);
        }
    }
    out
}

/// Patch matrix `[C·k·k, N·Ho·Wo]` for a whole batch of `[C, H, W]` images.
fn im2col_batch(win: &Window, batch: usize, x: &[f64]) -> Vec<f64> {
    let (rows, ncols) = (win.rows(), win.cols());
    let in_size = win.channels * win.h * win.w;
    let mut one = vec![0.0; rows * ncols];
    let mut all = vec![0.0; rows * batch * ncols];
    for n in 0..batch {
        im2col(win, &x[n * in_size..(n + 1) * in_size], &mut one);
        for r in 0..rows {
            let dst = (r * batch + n) * ncols;
            all[dst..dst + ncols].copy_from_slice(&one[r * ncols..(r + 1) * ncols]);
        }
    }
    all
}

/// Adjoint of [`im2col_batch`].
fn col2im_batch(win: &Window, batch: usize, cols: &[f64], x: &mut [f64]) {
    let (rows, ncols) = (win.rows(), win.cols());
    let in_size = win.channels * win.h * win.w;
    let mut one = vec![0.0; rows * ncols];
    for n in 0..batch {
        for r in 0..rows {
            let src = (r * batch + n) * ncols;
            one[r * ncols..(r + 1) * ncols].copy_from_slice(&cols[src..src + ncols]);
        }
        col2im(win, &one, &mut x[n * in_size..(n + 1) * in_size]);
    }
}

fn bias_grad(batch: usize, c: usize, len: usize, grad_out: &[f64]) -> Vec<f64> {
    let mut db = vec![0.0; c];
    for n in 0..batch {
        for (co, d) in db.iter_mut().enumerate() {
            *d += grad_out[(n * c + co) * len..(n * c + co + 1) * len].iter().sum::<f64>();
        }
    }
    db
}

/// Cross-correlation. `weight` is `[C_out, C_in, k, k]`.
pub fn conv2d_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let win = g.conv_window();
    let (rows, ncols) = (win.rows(), win.cols());
    let cols = im2col_batch(&win, g.batch, x);
    let width = g.batch * ncols;
    let mut out = vec![0.0; g.c_out * width];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(width).enumerate() {
            chunk.fill(b[co]);
        }
    }
    gemm_nn(g.c_out, rows, width, weight, &cols, &mut out);
    to_batch_major(g.batch, g.c_out, ncols, &out)
}

/// `(d_input, d_weight, d_bias)`, each present only when requested.
pub type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

/// Gradients of [`conv2d_forward`]; each output is computed only when asked.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> ConvGrads {
    let win = g.conv_window();
    let (rows, ncols) = (win.rows(), win.cols());
    let width = g.batch * ncols;
    let go = to_channel_major(g.batch, g.c_out, ncols, grad_out);
    let dw = want_w.then(|| {
        let cols = im2col_batch(&win, g.batch, x);
        let mut dw = vec![0.0; g.c_out * rows];
        gemm_nt(g.c_out, width, rows, &go, &cols, &mut dw);
        dw
    });
    let dx = want_x.then(|| {
        let mut cols = vec![0.0; rows * width];
        gemm_tn(rows, g.c_out, width, weight, &go, &mut cols);
        let mut dx = vec![0.0; g.batch * g.c_in * g.h * g.w];
        col2im_batch(&win, g.batch, &cols, &mut dx);
        dx
    });
    let db = want_b.then(|| bias_grad(g.batch, g.c_out, ncols, grad_out));
    (dx, dw, db)
}

/// Transposed convolution. `weight` is `[C_in, C_out, k, k]`.
pub fn deconv2d_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let win = g.deconv_window();
    let (rows, ncols) = (win.rows(), win.cols());
    let width = g.batch * ncols;
    let xs = to_channel_major(g.batch, g.c_in, ncols, x);
    let mut cols = vec![0.0; rows * width];
    gemm_tn(rows, g.c_in, width, weight, &xs, &mut cols);
    let plane = g.ho * g.wo;
    let mut out = vec![0.0; g.batch * g.c_out * plane];
    col2im_batch(&win, g.batch, &cols, &mut out);
    if let Some(b) = bias {
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b[i % g.c_out];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Gradients of [`deconv2d_forward`].
pub fn deconv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> ConvGrads {
    let win = g.deconv_window();
    let (rows, ncols) = (win.rows(), win.cols());
    let width = g.batch * ncols;
    let cols = (want_x || want_w).then(|| im2col_batch(&win, g.batch, grad_out));
    let dx = want_x.then(|| {
        let mut dx = vec![0.0; g.c_in * width];
        gemm_nn(g.c_in, rows, width, weight, cols.as_ref().unwrap(), &mut dx);
        to_batch_major(g.batch, g.c_in, ncols, &dx)
    });
    let dw = want_w.then(|| {
        let xs = to_channel_major(g.batch, g.c_in, ncols, x);
        let mut dw = vec![0.0; g.c_in * rows];
        gemm_nt(g.c_in, width, rows, &xs, cols.as_ref().unwrap(), &mut dw);
        dw
    });
    let db = want_b.then(|| bias_grad(g.batch, g.c_out, g.ho * g.wo, grad_out));
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive_matmul(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let mut c = vec![0.0; m * n];
        gemm_tn(m, k, n, &transpose(m, k, &a), &b, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &transpose(k, n, &b), &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let win = Window { channels: 2, h: 5, w: 4, kernel: 3, stride: 2, padding: 1, ho: 3, wo: 2 };
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..win.rows() * win.cols()).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&win, &x, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&win, &y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
