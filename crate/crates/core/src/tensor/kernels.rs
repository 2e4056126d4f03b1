//! Raw NCHW kernels behind the tape ops. Convolutions lower to im2col + GEMM.

use super::Real;

pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub fn conv_transpose_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if input == 0 || stride == 0 {
        return None;
    }
    ((input - 1) * stride + k).checked_sub(2 * pad).filter(|&e| e > 0)
}

/// Geometry of one convolution, in the direction `input (h×w) → output (ho×wo)`.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ow·stride + kj - pad` is in bounds.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride).min(g.wo);
    let hi = if g.w + g.pad > kj { ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.wo) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfold one `C×H×W` image into `[C·k·k, ho·wo]` columns.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n_out = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                let (lo, hi) = valid_cols(g, kj);
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        seg[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (i, v) in seg[lo..hi].iter_mut().enumerate() {
                            *v = src[first + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Fold columns back onto a `C×H×W` image, accumulating overlaps.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let n_out = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n_out..(row + 1) * n_out];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let seg = &src[oh * g.wo + lo..oh * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + seg.len()].iter_mut().zip(seg) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in seg.iter().enumerate() {
                            dst[first + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Real>(dy: &[T], n: usize, c: usize, plane: usize, db: &mut [T]) {
    for s in 0..n {
        for (ch, acc) in db.iter_mut().enumerate().take(c) {
            let off = (s * c + ch) * plane;
            *acc += dy[off..off + plane].iter().copied().sum::<T>();
        }
    }
}

/// `y[n] = W · im2col(x[n]) + b` with `W: [cout, g.channels·k·k]`.
/// Also returns the unfolded columns of every sample (empty for pointwise convs)
/// so the backward pass need not unfold again.
pub fn conv2d_forward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    cout: usize,
    b: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_stride = g.channels * g.h * g.w;
    let out_stride = cout * ncols;
    let col_stride = rows * ncols;
    let mut out = vec![T::zero(); n * out_stride];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); n * col_stride] };
    for s in 0..n {
        let xs = &x[s * in_stride..(s + 1) * in_stride];
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            let c = &mut cols[s * col_stride..(s + 1) * col_stride];
            im2col(xs, g, c);
            c
        };
        let ys = &mut out[s * out_stride..(s + 1) * out_stride];
        T::gemm(cout, rows, ncols, w, false, src, false, ys, false);
        if let Some(b) = b {
            add_bias(ys, b, ncols);
        }
    }
    (out, cols)
}

/// Gradients of [`conv2d_forward`]: accumulates into `dw`/`db`, returns `dx` when asked.
/// `cols` is the unfolded input saved by the forward pass.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    cols: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    cout: usize,
    dy: &[T],
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_stride = g.channels * g.h * g.w;
    let out_stride = cout * ncols;
    let col_stride = rows * ncols;
    if let Some(db) = db {
        bias_grad(dy, n, cout, ncols, db);
    }
    let mut dx = want_dx.then(|| vec![T::zero(); n * in_stride]);
    let mut dcols = if want_dx && !g.is_pointwise() { vec![T::zero(); col_stride] } else { Vec::new() };
    let mut dw = dw;
    for s in 0..n {
        let dys = &dy[s * out_stride..(s + 1) * out_stride];
        if let Some(dw) = dw.as_deref_mut() {
            let src = if g.is_pointwise() {
                &x[s * in_stride..(s + 1) * in_stride]
            } else {
                &cols[s * col_stride..(s + 1) * col_stride]
            };
            T::gemm(cout, ncols, rows, dys, false, src, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_stride..(s + 1) * in_stride];
            if g.is_pointwise() {
                T::gemm(rows, cout, ncols, w, true, dys, false, dxs, true);
            } else {
                T::gemm(rows, cout, ncols, w, true, dys, false, &mut dcols, false);
                col2im(&dcols, g, dxs);
            }
        }
    }
    dx
}

/// Transposed convolution. `g` describes the *adjoint* conv2d, i.e. the map from
/// this op's output (`g.channels × g.h × g.w`) to its input (`cin × g.ho × g.wo`),
/// and `w` is laid out `[cin, g.channels, k, k]`.
pub fn conv_transpose2d_forward<T: Real>(
    z: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    cin: usize,
    b: Option<&[T]>,
) -> Vec<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_stride = cin * ncols;
    let out_plane = g.h * g.w;
    let out_stride = g.channels * out_plane;
    let mut out = vec![T::zero(); n * out_stride];
    let mut cols = vec![T::zero(); rows * ncols];
    for s in 0..n {
        let zs = &z[s * in_stride..(s + 1) * in_stride];
        let ys = &mut out[s * out_stride..(s + 1) * out_stride];
        if g.is_pointwise() {
            T::gemm(rows, cin, ncols, w, true, zs, false, ys, false);
        } else {
            T::gemm(rows, cin, ncols, w, true, zs, false, &mut cols, false);
            col2im(&cols, g, ys);
        }
        if let Some(b) = b {
            add_bias(ys, b, out_plane);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Real>(
    z: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    cin: usize,
    dy: &[T],
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    want_dz: bool,
) -> Option<Vec<T>> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_stride = cin * ncols;
    let out_stride = g.channels * g.h * g.w;
    if let Some(db) = db {
        bias_grad(dy, n, g.channels, g.h * g.w, db);
    }
    let mut dz = want_dz.then(|| vec![T::zero(); n * in_stride]);
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dw = dw;
    for s in 0..n {
        let dys = &dy[s * out_stride..(s + 1) * out_stride];
        let dcols: &[T] = if g.is_pointwise() {
            dys
        } else {
            im2col(dys, g, &mut cols);
            &cols
        };
        if let Some(dw) = dw.as_deref_mut() {
            let zs = &z[s * in_stride..(s + 1) * in_stride];
            T::gemm(cin, ncols, rows, zs, false, dcols, true, dw, true);
        }
        if let Some(dz) = dz.as_mut() {
            let dzs = &mut dz[s * in_stride..(s + 1) * in_stride];
            T::gemm(cin, rows, ncols, w, false, dcols, false, dzs, false);
        }
    }
    dz
}

/// Non-overlapping max pooling; returns values and flat argmax indices.
pub fn maxpool_forward<T: Real>(x: &[T], n: usize, c: usize, h: usize, w: usize, win: usize) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / win, w / win);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + oh * win * w + ow * win;
                for di in 0..win {
                    for dj in 0..win {
                        let idx = base + (oh * win + di) * w + ow * win + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn upsample_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oh in 0..ho {
            let row = &src[(oh / f) * w..(oh / f + 1) * w];
            for (ow, v) in dst[oh * wo..(oh + 1) * wo].iter_mut().enumerate() {
                *v = row[ow / f];
            }
        }
    }
    out
}

pub fn upsample_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                dst[(oh / f) * w + ow / f] += src[oh * wo + ow];
            }
        }
    }
    dx
}
