//! Slice-level numeric kernels shared by the eager API and the graph.
//!
//! Every multiply-accumulate executed by a forward kernel bumps a thread-local
//! counter (see [`counter`]); the cost model uses it as ground truth.

use crate::error::{Error, Result};

pub mod counter {
    use std::cell::Cell;

    thread_local! {
        static MADDS: Cell<u64> = const { Cell::new(0) };
        static EXPS: Cell<u64> = const { Cell::new(0) };
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
    pub struct Counts {
        pub madds: u64,
        pub exps: u64,
    }

    pub fn reset() {
        MADDS.with(|c| c.set(0));
        EXPS.with(|c| c.set(0));
    }

    pub fn read() -> Counts {
        Counts {
            madds: MADDS.with(Cell::get),
            exps: EXPS.with(Cell::get),
        }
    }

    /// Runs `f` and returns the operations it executed on this thread.
    pub fn measure<T>(f: impl FnOnce() -> T) -> (T, Counts) {
        let before = read();
        let out = f();
        let after = read();
        (
            out,
            Counts {
                madds: after.madds - before.madds,
                exps: after.exps - before.exps,
            },
        )
    }

    pub(crate) fn add_madds(n: u64) {
        MADDS.with(|c| c.set(c.get() + n));
    }

    pub(crate) fn add_exps(n: u64) {
        EXPS.with(|c| c.set(c.get() + n));
    }
}

/// Kernel/stride/padding combinations the engine implements.
pub const SUPPORTED_CONVS: [(usize, usize, usize); 4] = [(1, 1, 0), (1, 2, 0), (3, 2, 1), (7, 1, 3)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
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

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding - kernel) / stride + 1
}

impl ConvGeom {
    pub fn new(
        x_dims: (usize, usize, usize),
        w_dims: (usize, usize, usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (c, h, w) = x_dims;
        let (o, i, kh, kw) = w_dims;
        if kh != kw || !SUPPORTED_CONVS.contains(&(kh, stride, padding)) {
            return Err(Error::UnsupportedConv {
                op: "conv2d",
                kernel_h: kh,
                kernel_w: kw,
                stride,
                padding,
            });
        }
        if i != c {
            return Err(Error::shape("conv2d", "in_channels", i, c));
        }
        if h + 2 * padding < kh {
            return Err(Error::shape("conv2d", "height", kh - 2 * padding, h));
        }
        if w + 2 * padding < kw {
            return Err(Error::shape("conv2d", "width", kw - 2 * padding, w));
        }
        Ok(Self {
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel: kh,
            stride,
            padding,
            out_height: conv_out_len(h, kh, stride, padding),
            out_width: conv_out_len(w, kw, stride, padding),
        })
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_height * self.out_width
    }
}

/// Output indices `o` in `[start, end)` whose input tap `o·stride + k − pad` is in bounds.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    if in_len + pad <= k {
        return (0, 0);
    }
    let end = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (start.min(end), end)
}

pub fn conv_forward(x: &[f64], wts: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_height, g.out_width);
    let k = g.kernel;
    let mut out = vec![0.0; g.out_len()];
    let mut madds = 0u64;
    for o in 0..g.out_channels {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(bias[o]);
        for i in 0..g.in_channels {
            let xin = &x[i * g.height * g.width..(i + 1) * g.height * g.width];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, g.stride, g.padding, g.height, oh);
                for kx in 0..k {
                    let (x0, x1) = valid_range(kx, g.stride, g.padding, g.width, ow);
                    let wv = wts[((o * g.in_channels + i) * k + ky) * k + kx];
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let row = &xin[iy * g.width..(iy + 1) * g.width];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            orow[ox] += wv * row[ox * g.stride + kx - g.padding];
                        }
                    }
                    madds += ((y1 - y0) * (x1 - x0)) as u64;
                }
            }
        }
    }
    counter::add_madds(madds);
    out
}

/// Returns `(dx, dw, db)` for upstream adjoint `dy`.
pub fn conv_backward(x: &[f64], wts: &[f64], dy: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_height, g.out_width);
    let k = g.kernel;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; wts.len()];
    let mut db = vec![0.0; g.out_channels];
    for o in 0..g.out_channels {
        let dplane = &dy[o * oh * ow..(o + 1) * oh * ow];
        db[o] = dplane.iter().sum();
        for i in 0..g.in_channels {
            let base = i * g.height * g.width;
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, g.stride, g.padding, g.height, oh);
                for kx in 0..k {
                    let (x0, x1) = valid_range(kx, g.stride, g.padding, g.width, ow);
                    let widx = ((o * g.in_channels + i) * k + ky) * k + kx;
                    let wv = wts[widx];
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.padding;
                        for ox in x0..x1 {
                            let ix = ox * g.stride + kx - g.padding;
                            let d = dplane[oy * ow + ox];
                            acc += d * x[base + iy * g.width + ix];
                            dx[base + iy * g.width + ix] += wv * d;
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// `a (n×k) · b (k×m)`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    counter::add_madds((n * k * m) as u64);
    out
}

/// `a (n×k) · bᵀ` where `b` is `m×k`.
pub fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    counter::add_madds((n * k * m) as u64);
    out
}

/// `aᵀ · b` where `a` is `k×n` and `b` is `k×m`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let av = a[p * n + i];
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    counter::add_madds((n * k * m) as u64);
    out
}

/// Row softmax with per-row max subtraction.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (o, v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    counter::add_exps((rows * cols) as u64);
    out
}

pub fn softmax_rows_backward(y: &[f64], dy: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        let s = r * cols..(r + 1) * cols;
        let yr = &y[s.clone()];
        let dyr = &dy[s.clone()];
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, yv), g) in dx[s].iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Per-position max and mean across channels. Returns the `2×H×W` output and
/// the channel index that supplied each max (first wins on ties).
pub fn channel_pool(x: &[f64], c: usize, n: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0; 2 * n];
    let mut argmax = vec![0usize; n];
    for p in 0..n {
        let mut best = x[p];
        let mut best_c = 0;
        let mut sum = x[p];
        for ch in 1..c {
            let v = x[ch * n + p];
            sum += v;
            if v > best {
                best = v;
                best_c = ch;
            }
        }
        out[p] = best;
        out[n + p] = sum / c as f64;
        argmax[p] = best_c;
    }
    (out, argmax)
}

pub fn upsample_nearest(x: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let src = &x[(ch * h + y / factor) * w..(ch * h + y / factor + 1) * w];
            let dst = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = src[xo / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(dy: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                dx[(ch * h + y / factor) * w + xo / factor] += dy[(ch * oh + y) * ow + xo];
            }
        }
    }
    dx
}

/// `(C, H, W)` → `(H·W, C)`; the inverse is the same transpose read the other way.
pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
