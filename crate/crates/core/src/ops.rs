//! Numeric kernels with analytic backward passes.
//!
//! The free functions at the top of this module are the plain forward
//! operators; `graph` records the same kernels on a tape and calls the
//! `*_backward` kernels during the reverse sweep.

use crate::element::{gemm, Element, MatView};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance floor used by feature normalization.
pub const EPS_STAT: f64 = 1e-5;

/// Geometry of a batched 3D convolution on `(B, D, H, W, Ci)` inputs with a
/// `(kt, k, k, Ci, Co)` kernel. 2D convolution is the `D = kt = 1` case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub kt: usize,
    pub k: usize,
    pub cout: usize,
    pub stride_t: usize,
    pub stride: usize,
    pub pad_t: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_depth(&self) -> usize {
        (self.depth + 2 * self.pad_t - self.kt) / self.stride_t + 1
    }
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.k) / self.stride + 1
    }
    fn out_positions(&self) -> usize {
        self.batch * self.out_depth() * self.out_height() * self.out_width()
    }
    fn patch(&self) -> usize {
        self.kt * self.k * self.k * self.cin
    }
    fn is_pointwise(&self) -> bool {
        self.kt == 1 && self.k == 1 && self.stride == 1 && self.stride_t == 1 && self.pad == 0 && self.pad_t == 0
    }

    /// Output shape with the same rank convention as the input.
    pub fn out_shape(&self, rank5: bool) -> Vec<usize> {
        if rank5 {
            vec![self.batch, self.out_depth(), self.out_height(), self.out_width(), self.cout]
        } else {
            vec![self.batch * self.out_depth(), self.out_height(), self.out_width(), self.cout]
        }
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.stride == 0 || self.stride_t == 0 {
            return Err(Error::arg(op, "stride must be positive"));
        }
        if self.depth + 2 * self.pad_t < self.kt || self.height + 2 * self.pad < self.k || self.width + 2 * self.pad < self.k {
            return Err(Error::arg(op, "kernel larger than padded input"));
        }
        Ok(())
    }

    /// Geometry of a 2D convolution over a `(B, H, W, Ci)` frame batch.
    pub fn conv2d(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [b, h, w, ci] = input[..] else {
            return Err(Error::invalid("conv2d", input, "input must be (B, H, W, Cin)"));
        };
        let [kh, kw, wci, co] = weight[..] else {
            return Err(Error::invalid("conv2d", weight, "weight must be (k, k, Cin, Cout)"));
        };
        if kh != kw {
            return Err(Error::invalid("conv2d", weight, "kernel must be square"));
        }
        if wci != ci {
            return Err(Error::shape("conv2d (input Cin vs weight Cin)", input, weight));
        }
        let g = ConvGeom { batch: b, depth: 1, height: h, width: w, cin: ci, kt: 1, k: kh, cout: co, stride_t: 1, stride, pad_t: 0, pad: padding };
        g.validate("conv2d")?;
        Ok(g)
    }

    /// Geometry of a 3D convolution over `(B, L, H, W, Ci)` with
    /// `(stride_t, stride)` and `(pad_t, pad)`.
    pub fn conv3d(input: &[usize], weight: &[usize], stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        let [b, d, h, w, ci] = input[..] else {
            return Err(Error::invalid("conv3d", input, "input must be (B, L, H, W, Cin)"));
        };
        let [kt, kh, kw, wci, co] = weight[..] else {
            return Err(Error::invalid("conv3d", weight, "weight must be (kt, k, k, Cin, Cout)"));
        };
        if kh != kw {
            return Err(Error::invalid("conv3d", weight, "spatial kernel must be square"));
        }
        if wci != ci {
            return Err(Error::shape("conv3d (input Cin vs weight Cin)", input, weight));
        }
        let g = ConvGeom { batch: b, depth: d, height: h, width: w, cin: ci, kt, k: kh, cout: co, stride_t: stride.0, stride: stride.1, pad_t: padding.0, pad: padding.1 };
        g.validate("conv3d")?;
        Ok(g)
    }
}

/// Visit every (output position, kernel tap) pair with its input offset.
#[inline]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, Option<usize>)) {
    let (od, oh, ow) = (g.out_depth(), g.out_height(), g.out_width());
    let mut row = 0;
    for b in 0..g.batch {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut tap = 0;
                    for dt in 0..g.kt {
                        let iz = (z * g.stride_t + dt) as isize - g.pad_t as isize;
                        for dy in 0..g.k {
                            let iy = (y * g.stride + dy) as isize - g.pad as isize;
                            for dx in 0..g.k {
                                let ix = (x * g.stride + dx) as isize - g.pad as isize;
                                let inside = iz >= 0 && iy >= 0 && ix >= 0 && (iz as usize) < g.depth && (iy as usize) < g.height && (ix as usize) < g.width;
                                let src = inside.then(|| (((b * g.depth + iz as usize) * g.height + iy as usize) * g.width + ix as usize) * g.cin);
                                f(row, tap, src);
                                tap += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col<T: Element>(g: &ConvGeom, input: &[T]) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.out_positions() * patch];
    for_each_tap(g, |row, tap, src| {
        if let Some(s) = src {
            let dst = row * patch + tap * g.cin;
            cols[dst..dst + g.cin].copy_from_slice(&input[s..s + g.cin]);
        }
    });
    cols
}

fn col2im<T: Element>(g: &ConvGeom, cols: &[T], grad_in: &mut [T]) {
    let patch = g.patch();
    for_each_tap(g, |row, tap, src| {
        if let Some(s) = src {
            let from = row * patch + tap * g.cin;
            for c in 0..g.cin {
                grad_in[s + c] += cols[from + c];
            }
        }
    });
}

pub(crate) fn conv_forward<T: Element>(g: &ConvGeom, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let rows = g.out_positions();
    let patch = g.patch();
    let mut out = vec![T::zero(); rows * g.cout];
    if let Some(b) = bias {
        for r in 0..rows {
            out[r * g.cout..(r + 1) * g.cout].copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        input
    } else {
        owned = im2col(g, input);
        &owned
    };
    gemm(T::one(), cols, MatView::dense(rows, patch, 0), weight, MatView::dense(patch, g.cout, 0), beta, &mut out, MatView::dense(rows, g.cout, 0));
    out
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`, each computed
/// only when requested.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Element>(g: &ConvGeom, input: &[T], weight: &[T], grad_out: &[T], want: (bool, bool, bool)) -> ConvGrads<T> {
    let rows = g.out_positions();
    let patch = g.patch();
    let dw = want.1.then(|| {
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            input
        } else {
            owned = im2col(g, input);
            &owned
        };
        let mut dw = vec![T::zero(); patch * g.cout];
        gemm(T::one(), cols, MatView::dense(rows, patch, 0).t(), grad_out, MatView::dense(rows, g.cout, 0), T::zero(), &mut dw, MatView::dense(patch, g.cout, 0));
        dw
    });
    let db = want.2.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for r in 0..rows {
            for (acc, &v) in db.iter_mut().zip(&grad_out[r * g.cout..(r + 1) * g.cout]) {
                *acc += v;
            }
        }
        db
    });
    let dx = want.0.then(|| {
        let mut dcols = vec![T::zero(); rows * patch];
        gemm(T::one(), grad_out, MatView::dense(rows, g.cout, 0), weight, MatView::dense(patch, g.cout, 0).t(), T::zero(), &mut dcols, MatView::dense(rows, patch, 0));
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![T::zero(); g.batch * g.depth * g.height * g.width * g.cin];
            col2im(g, &dcols, &mut dx);
            dx
        }
    });
    ConvGrads { input: dx, weight: dw, bias: db }
}

fn check_bias<T: Element>(op: &'static str, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    if bias.shape() != [weight.channels()] {
        return Err(Error::shape(op, weight.shape(), bias.shape()));
    }
    Ok(())
}

/// 2D convolution of a single frame `(H, W, Cin)` or a frame batch
/// `(B, H, W, Cin)` with a `(k, k, Cin, Cout)` kernel.
pub fn conv2d<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let single = input.rank() == 3;
    let shape4: Vec<usize> = if single { [&[1], input.shape()].concat() } else { input.shape().to_vec() };
    let g = ConvGeom::conv2d(&shape4, weight.shape(), stride, padding)?;
    check_bias("conv2d bias", weight, bias)?;
    let out = conv_forward(&g, input.data(), weight.data(), Some(bias.data()));
    let mut shape = g.out_shape(false);
    if single {
        shape.remove(0);
    }
    Ok(Tensor::from_parts(shape, out))
}

/// 3D convolution over `(L, H, W, Cin)` (or batched `(B, L, H, W, Cin)`)
/// with a `(kt, k, k, Cin, Cout)` kernel.
pub fn conv3d<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, stride: (usize, usize), padding: (usize, usize)) -> Result<Tensor<T>> {
    let single = input.rank() == 4;
    let shape5: Vec<usize> = if single { [&[1], input.shape()].concat() } else { input.shape().to_vec() };
    let g = ConvGeom::conv3d(&shape5, weight.shape(), stride, padding)?;
    check_bias("conv3d bias", weight, bias)?;
    let out = conv_forward(&g, input.data(), weight.data(), Some(bias.data()));
    let mut shape = g.out_shape(true);
    if single {
        shape.remove(0);
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Batched multi-head scaled dot-product attention.
///
/// `q` is `(N, n, C)`, `k` and `v` are `(N, m, C)`; head `h` uses channels
/// `h*d..(h+1)*d` with `d = C / heads`. Returns the output `(N, n, C)` and
/// the row-stochastic weights `(N, heads, n, m)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward<T: Element>(q: &[T], k: &[T], v: &[T], batch: usize, n: usize, m: usize, c: usize, heads: usize) -> (Vec<T>, Vec<T>) {
    let d = c / heads;
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut out = vec![T::zero(); batch * n * c];
    let mut probs = vec![T::zero(); batch * heads * n * m];
    for b in 0..batch {
        for h in 0..heads {
            let p_off = (b * heads + h) * n * m;
            let qv = MatView::strided(n, d, b * n * c + h * d, c);
            let kv = MatView::strided(m, d, b * m * c + h * d, c);
            gemm(scale, q, qv, k, kv.t(), T::zero(), &mut probs, MatView::dense(n, m, p_off));
            for row in probs[p_off..p_off + n * m].chunks_mut(m) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s += *x;
                }
                let inv = T::one() / s;
                for x in row.iter_mut() {
                    *x *= inv;
                }
            }
            gemm(T::one(), &probs, MatView::dense(n, m, p_off), v, kv, T::zero(), &mut out, MatView::strided(n, d, b * n * c + h * d, c));
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad_out: &[T],
    batch: usize,
    n: usize,
    m: usize,
    c: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = c / heads;
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); n * m];
    for b in 0..batch {
        for h in 0..heads {
            let p_off = (b * heads + h) * n * m;
            let pv = MatView::dense(n, m, p_off);
            let ov = MatView::strided(n, d, b * n * c + h * d, c);
            let qv = ov;
            let kv = MatView::strided(m, d, b * m * c + h * d, c);
            // dV = P^T dO
            gemm(T::one(), probs, pv.t(), grad_out, ov, T::one(), &mut dv, kv);
            // dP = dO V^T
            gemm(T::one(), grad_out, ov, v, kv.t(), T::zero(), &mut ds, MatView::dense(n, m, 0));
            // dS = P * (dP - rowsum(dP * P))
            for i in 0..n {
                let prow = &probs[p_off + i * m..p_off + (i + 1) * m];
                let drow = &mut ds[i * m..(i + 1) * m];
                let dot: T = prow.iter().zip(drow.iter()).map(|(&p, &g)| p * g).sum();
                for (g, &p) in drow.iter_mut().zip(prow) {
                    *g = p * (*g - dot);
                }
            }
            gemm(scale, &ds, MatView::dense(n, m, 0), k, kv, T::one(), &mut dq, qv);
            gemm(scale, &ds, MatView::dense(n, m, 0).t(), q, qv, T::one(), &mut dk, kv);
        }
    }
    (dq, dk, dv)
}

/// Single-head attention `softmax(Q K^T / sqrt(d)) V` on `(n, d)`, `(m, d)`,
/// `(m, d)` matrices. Rejects an empty key set.
pub fn attention<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(attention_with_weights(q, k, v)?.0)
}

/// As [`attention`], also returning the `(n, m)` weight matrix.
pub fn attention_with_weights<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let ([n, d], [m, dk], [mv, dv]) = (q.shape(), k.shape(), v.shape()) else {
        return Err(Error::invalid("attention", q.shape(), "q, k, v must be rank-2"));
    };
    if *m == 0 {
        return Err(Error::arg("attention", "empty key set"));
    }
    if d != dk || d != dv || m != mv {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    let (out, probs) = attention_forward(q.data(), k.data(), v.data(), 1, *n, *m, *d, 1);
    Ok((Tensor::from_parts(vec![*n, *d], out), Tensor::from_parts(vec![*n, *m], probs)))
}

/// Element gather map for sub-pixel rearrangement of `(B, H, W, C*r*r)` into
/// `(B, rH, rW, C)`: `out(y*r+dy, x*r+dx, c) = in(y, x, c*r*r + dy*r + dx)`.
pub fn pixel_shuffle_index(shape: &[usize], r: usize) -> Result<(Vec<usize>, Vec<u32>)> {
    let [b, h, w, cin] = shape[..] else {
        return Err(Error::invalid("pixel_shuffle", shape, "expected (B, H, W, C*r^2)"));
    };
    if r == 0 || cin % (r * r) != 0 {
        return Err(Error::invalid("pixel_shuffle", shape, format!("channel count not divisible by r^2 = {}", r * r)));
    }
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for oy in 0..oh {
            let (y, dy) = (oy / r, oy % r);
            for ox in 0..ow {
                let (x, dx) = (ox / r, ox % r);
                let base = ((bi * h + y) * w + x) * cin;
                for ch in 0..c {
                    idx.push((base + ch * r * r + dy * r + dx) as u32);
                }
            }
        }
    }
    Ok((vec![b, oh, ow, c], idx))
}

/// Sub-pixel rearrangement of `(H, W, C*r*r)` or `(B, H, W, C*r*r)`.
pub fn pixel_shuffle<T: Element>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let single = input.rank() == 3;
    let shape4: Vec<usize> = if single { [&[1], input.shape()].concat() } else { input.shape().to_vec() };
    let (mut shape, idx) = pixel_shuffle_index(&shape4, r)?;
    if single {
        shape.remove(0);
    }
    Ok(Tensor::from_parts(shape, gather(input.data(), &idx)))
}

/// Adjoint of [`pixel_shuffle`]: `(B, rH, rW, C)` back to `(B, H, W, C*r*r)`.
pub fn pixel_unshuffle<T: Element>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let single = input.rank() == 3;
    let shape4: Vec<usize> = if single { [&[1], input.shape()].concat() } else { input.shape().to_vec() };
    let [b, oh, ow, c] = shape4[..] else {
        return Err(Error::invalid("pixel_unshuffle", input.shape(), "expected (B, rH, rW, C)"));
    };
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::invalid("pixel_unshuffle", input.shape(), "spatial size not divisible by r"));
    }
    let src_shape = [b, oh / r, ow / r, c * r * r];
    let (_, idx) = pixel_shuffle_index(&src_shape, r)?;
    let mut out = vec![T::zero(); input.len()];
    for (i, &j) in idx.iter().enumerate() {
        out[j as usize] = input.data()[i];
    }
    let mut shape = src_shape.to_vec();
    if single {
        shape.remove(0);
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn gather<T: Element>(src: &[T], idx: &[u32]) -> Vec<T> {
    idx.iter().map(|&i| src[i as usize]).collect()
}

pub(crate) fn scatter_add<T: Element>(grad_out: &[T], idx: &[u32], len: usize) -> Vec<T> {
    let mut g = vec![T::zero(); len];
    for (&i, &v) in idx.iter().zip(grad_out) {
        g[i as usize] += v;
    }
    g
}

/// How feature statistics are pooled for normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormMode {
    /// One mean/std per frame and channel, over spatial positions.
    #[default]
    PerChannel,
    /// One mean/std per frame over all positions and channels.
    PerMap,
}

/// Normalize `(B, P, C)`-laid-out data per frame. Returns the normalized
/// values and one `1/sigma` per statistics group.
pub(crate) fn norm_forward<T: Element>(x: &[T], frames: usize, positions: usize, channels: usize, mode: NormMode) -> (Vec<T>, Vec<T>) {
    let eps = T::of(EPS_STAT);
    let mut y = vec![T::zero(); x.len()];
    let fsize = positions * channels;
    match mode {
        NormMode::PerChannel => {
            let mut inv = vec![T::zero(); frames * channels];
            for f in 0..frames {
                let xs = &x[f * fsize..(f + 1) * fsize];
                let mut mean = vec![T::zero(); channels];
                for p in 0..positions {
                    for c in 0..channels {
                        mean[c] += xs[p * channels + c];
                    }
                }
                let np = T::of(positions as f64);
                for m in &mut mean {
                    *m /= np;
                }
                let mut var = vec![T::zero(); channels];
                for p in 0..positions {
                    for c in 0..channels {
                        let d = xs[p * channels + c] - mean[c];
                        var[c] += d * d;
                    }
                }
                for c in 0..channels {
                    inv[f * channels + c] = T::one() / (var[c] / np + eps).sqrt();
                }
                let ys = &mut y[f * fsize..(f + 1) * fsize];
                for p in 0..positions {
                    for c in 0..channels {
                        ys[p * channels + c] = (xs[p * channels + c] - mean[c]) * inv[f * channels + c];
                    }
                }
            }
            (y, inv)
        }
        NormMode::PerMap => {
            let mut inv = vec![T::zero(); frames];
            for f in 0..frames {
                let xs = &x[f * fsize..(f + 1) * fsize];
                let n = T::of(fsize as f64);
                let mean = xs.iter().copied().sum::<T>() / n;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                inv[f] = T::one() / (var + eps).sqrt();
                for (o, &v) in y[f * fsize..(f + 1) * fsize].iter_mut().zip(xs) {
                    *o = (v - mean) * inv[f];
                }
            }
            (y, inv)
        }
    }
}

pub(crate) fn norm_backward<T: Element>(y: &[T], inv: &[T], grad_out: &[T], frames: usize, positions: usize, channels: usize, mode: NormMode) -> Vec<T> {
    let fsize = positions * channels;
    let mut dx = vec![T::zero(); y.len()];
    match mode {
        NormMode::PerChannel => {
            let np = T::of(positions as f64);
            for f in 0..frames {
                let off = f * fsize;
                let mut mg = vec![T::zero(); channels];
                let mut mgy = vec![T::zero(); channels];
                for p in 0..positions {
                    for c in 0..channels {
                        let i = off + p * channels + c;
                        mg[c] += grad_out[i];
                        mgy[c] += grad_out[i] * y[i];
                    }
                }
                for c in 0..channels {
                    mg[c] /= np;
                    mgy[c] /= np;
                }
                for p in 0..positions {
                    for c in 0..channels {
                        let i = off + p * channels + c;
                        dx[i] = inv[f * channels + c] * (grad_out[i] - mg[c] - y[i] * mgy[c]);
                    }
                }
            }
        }
        NormMode::PerMap => {
            let n = T::of(fsize as f64);
            for f in 0..frames {
                let r = f * fsize..(f + 1) * fsize;
                let mg = grad_out[r.clone()].iter().copied().sum::<T>() / n;
                let mgy = grad_out[r.clone()].iter().zip(&y[r.clone()]).map(|(&g, &v)| g * v).sum::<T>() / n;
                for i in r {
                    dx[i] = inv[f] * (grad_out[i] - mg - y[i] * mgy);
                }
            }
        }
    }
    dx
}

/// Per-channel spatial mean and `sqrt(variance + EPS_STAT)` of an
/// `(H, W, C)` map.
pub fn channel_stats<T: Element>(f: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let [h, w, c] = f.shape()[..] else {
        return Err(Error::invalid("channel_stats", f.shape(), "expected (H, W, C)"));
    };
    let n = h * w;
    let mut mu = vec![T::zero(); c];
    for p in 0..n {
        for ch in 0..c {
            mu[ch] += f.data()[p * c + ch];
        }
    }
    let nn = T::of(n as f64);
    for m in &mut mu {
        *m /= nn;
    }
    let mut var = vec![T::zero(); c];
    for p in 0..n {
        for ch in 0..c {
            let d = f.data()[p * c + ch] - mu[ch];
            var[ch] += d * d;
        }
    }
    let sigma = var.into_iter().map(|v| (v / nn + T::of(EPS_STAT)).sqrt()).collect();
    Ok((Tensor::from_parts(vec![c], mu), Tensor::from_parts(vec![c], sigma)))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Element>(x: T) -> T {
    let (k, a, half) = (T::of(GELU_K), T::of(GELU_A), T::of(0.5));
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let (k, a, half) = (T::of(GELU_K), T::of(GELU_A), T::of(0.5));
    let th = (k * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + T::of(3.0) * a * x * x)
}

/// Mean of `sqrt((x - y)^2 + eps^2)`.
pub fn charbonnier<T: Element>(x: &Tensor<T>, y: &Tensor<T>, eps: f64) -> Result<T> {
    if x.shape() != y.shape() {
        return Err(Error::shape("charbonnier", x.shape(), y.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::arg("charbonnier", "eps must be positive"));
    }
    let e2 = T::of(eps * eps);
    let s: T = x.data().iter().zip(y.data()).map(|(&a, &b)| ((a - b) * (a - b) + e2).sqrt()).sum();
    Ok(s / T::of(x.len() as f64))
}

/// Mean squared error.
pub fn mse<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    if x.shape() != y.shape() {
        return Err(Error::shape("mse", x.shape(), y.shape()));
    }
    let s: T = x.data().iter().zip(y.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(s / T::of(x.len() as f64))
}
