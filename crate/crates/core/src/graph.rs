//! Reverse-mode tape over the fixed kernel set in [`crate::ops`].
//!
//! A [`Graph`] records every forward value. Nodes that do not depend on a
//! trainable parameter or a gradient-carrying input are marked constant and
//! skipped by the reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom, NormMode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T>, dims: (usize, usize, usize, usize) },
    Gather { x: Var, idx: Arc<Vec<u32>> },
    Concat { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, b: Var },
    ScaleChannels { x: Var, s: Var },
    Scale(Var, T),
    Gelu(Var),
    Norm { x: Var, mode: NormMode, inv: Vec<T>, dims: (usize, usize, usize) },
    Reshape(Var),
    Charbonnier { x: Var, y: Var, eps: T },
    Mse { x: Var, y: Var },
    Dot { x: Var, r: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    live: bool,
}

pub struct Graph<'p, T: Element> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Element> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.param_vars.get(&id).and_then(|v| self.of(*v))
    }

    /// Accumulate every parameter gradient into the store.
    pub fn apply_to(&self, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.param_vars {
            if let Some(g) = self.of(v) {
                store.accumulate(id, g);
            }
        }
    }
}

fn add_into<T: Element>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Graph { store, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, live: bool) -> Var {
        self.nodes.push(Node { value, op, live });
        Var(self.nodes.len() - 1)
    }

    fn live(&self, v: Var) -> bool {
        self.nodes[v.0].live
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf; frozen parameters are constants on the tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(p.value.clone(), Op::Param, !p.frozen);
        self.param_vars.insert(id, v);
        v
    }

    /// 2D convolution over a `(B, H, W, Cin)` frame batch.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::conv2d(self.shape(x), self.shape(w), stride, padding)?;
        self.conv(x, w, b, geom, false)
    }

    /// 3D convolution over `(B, L, H, W, Cin)`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        let geom = ConvGeom::conv3d(self.shape(x), self.shape(w), stride, padding)?;
        self.conv(x, w, b, geom, true)
    }

    /// Affine map on the last axis: `x (.., a) @ w (a, b) + bias`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [a, out] = ws[..] else {
            return Err(Error::invalid("linear", &ws, "weight must be (in, out)"));
        };
        if *xs.last().unwrap() != a {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let rows = xs.iter().product::<usize>() / a;
        let geom = ConvGeom { batch: rows, depth: 1, height: 1, width: 1, cin: a, kt: 1, k: 1, cout: out, stride_t: 1, stride: 1, pad_t: 0, pad: 0 };
        let v = self.conv(x, w, b, geom, false)?;
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        self.reshape(v, &shape)
    }

    fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, rank5: bool) -> Result<Var> {
        let wlen = geom.kt * geom.k * geom.k * geom.cin * geom.cout;
        if self.value(w).len() != wlen {
            return Err(Error::shape("conv weight", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape("conv bias", self.shape(w), self.shape(b)));
            }
        }
        let out = ops::conv_forward(&geom, self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let live = self.live(x) || self.live(w) || b.is_some_and(|b| self.live(b));
        let t = Tensor::from_parts(geom.out_shape(rank5), out);
        Ok(self.push(t, Op::Conv { x, w, b, geom }, live))
    }

    /// Multi-head attention over `(N, n, C)` queries and `(N, m, C)` keys/values.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let ([nb, n, c], [kb, m, kc]) = (&qs[..], &ks[..]) else {
            return Err(Error::invalid("attention", &qs, "expected (N, n, C) and (N, m, C)"));
        };
        if ks != vs || nb != kb || c != kc {
            return Err(Error::shape("attention", &qs, &ks));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::arg("attention", format!("{heads} heads do not divide {c} channels")));
        }
        let (out, probs) = ops::attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), *nb, *n, *m, *c, heads);
        let live = self.live(q) || self.live(k) || self.live(v);
        let dims = (*nb, *n, *m, *c);
        Ok(self.push(Tensor::from_parts(qs, out), Op::Attention { q, k, v, heads, probs, dims }, live))
    }

    /// `out[i] = x[idx[i]]` with the given output shape.
    pub fn gather(&mut self, x: Var, shape: Vec<usize>, idx: Arc<Vec<u32>>) -> Result<Var> {
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::invalid("gather", &shape, "index length does not match shape"));
        }
        let src = self.value(x).data();
        if idx.iter().any(|&i| i as usize >= src.len()) {
            return Err(Error::arg("gather", "index out of range"));
        }
        let out = ops::gather(src, &idx);
        let live = self.live(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Gather { x, idx }, live))
    }

    /// Concatenate along the last axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_channels", &sa, &sb));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let rows = da.len() / ca;
        let mut out = Vec::with_capacity(da.len() + db.len());
        for r in 0..rows {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let live = self.live(a) || self.live(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { a, b }, live))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let t = self.value(a).zip_map(self.value(b), f)?;
        let live = self.live(a) || self.live(b);
        Ok(self.push(t, op, live))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcast-add a `(C,)` vector over every position of `x (.., C)`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).channels();
        if self.shape(b) != [c] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        let live = self.live(x) || self.live(b);
        Ok(self.push(t, Op::AddBias { x, b }, live))
    }

    /// Multiply every position of `x (.., C)` by a `(C,)` vector.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.value(x).channels();
        if self.shape(s) != [c] {
            return Err(Error::shape("scale_channels", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c) {
            for (v, &k) in row.iter_mut().zip(&sv) {
                *v *= k;
            }
        }
        let live = self.live(x) || self.live(s);
        Ok(self.push(t, Op::ScaleChannels { x, s }, live))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let t = self.value(x).scale(s);
        let live = self.live(x);
        self.push(t, Op::Scale(x, s), live)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(ops::gelu);
        let live = self.live(x);
        self.push(t, Op::Gelu(x), live)
    }

    /// Per-frame normalization of a `(B, H, W, C)` map.
    pub fn norm(&mut self, x: Var, mode: NormMode) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [b, h, w, c] = s[..] else {
            return Err(Error::invalid("norm", &s, "expected (B, H, W, C)"));
        };
        let (y, inv) = ops::norm_forward(self.value(x).data(), b, h * w, c, mode);
        let live = self.live(x);
        Ok(self.push(Tensor::from_parts(s, y), Op::Norm { x, mode, inv, dims: (b, h * w, c) }, live))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let live = self.live(x);
        Ok(self.push(t, Op::Reshape(x), live))
    }

    pub fn charbonnier(&mut self, x: Var, y: Var, eps: f64) -> Result<Var> {
        let l = ops::charbonnier(self.value(x), self.value(y), eps)?;
        let live = self.live(x) || self.live(y);
        Ok(self.push(Tensor::scalar(l), Op::Charbonnier { x, y, eps: T::of(eps) }, live))
    }

    pub fn mse(&mut self, x: Var, y: Var) -> Result<Var> {
        let l = ops::mse(self.value(x), self.value(y))?;
        let live = self.live(x) || self.live(y);
        Ok(self.push(Tensor::scalar(l), Op::Mse { x, y }, live))
    }

    /// `sum(x * r)` for a fixed tensor `r`.
    pub fn dot(&mut self, x: Var, r: Tensor<T>) -> Result<Var> {
        if self.shape(x) != r.shape() {
            return Err(Error::shape("dot", self.shape(x), r.shape()));
        }
        let s: T = self.value(x).data().iter().zip(r.data()).map(|(&a, &b)| a * b).sum();
        let live = self.live(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, r }, live))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::invalid("backward", self.shape(out), "output must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![T::one()]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.live {
                grads[i] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop(&node.op, &node.value, g, &mut grads);
        }
        Ok(Gradients { grads, param_vars: self.param_vars.clone() })
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if self.live(v) {
            add_into(&mut grads[v.0], g);
        }
    }

    fn backprop(&self, op: &Op<T>, value: &Tensor<T>, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf | Op::Param => {}
            Op::Conv { x, w, b, geom } => {
                let want = (self.live(*x), self.live(*w), b.is_some_and(|b| self.live(b)));
                let cg = ops::conv_backward(geom, self.value(*x).data(), self.value(*w).data(), &g, want);
                if let Some(dx) = cg.input {
                    self.send(grads, *x, dx);
                }
                if let Some(dw) = cg.weight {
                    self.send(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.bias) {
                    self.send(grads, *b, db);
                }
            }
            Op::Attention { q, k, v, heads, probs, dims } => {
                let (nb, n, m, c) = *dims;
                let (dq, dk, dv) = ops::attention_backward(self.value(*q).data(), self.value(*k).data(), self.value(*v).data(), probs, &g, nb, n, m, c, *heads);
                self.send(grads, *q, dq);
                self.send(grads, *k, dk);
                self.send(grads, *v, dv);
            }
            Op::Gather { x, idx } => {
                let dx = ops::scatter_add(&g, idx, self.value(*x).len());
                self.send(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let ca = self.value(*a).channels();
                let cb = self.value(*b).channels();
                let rows = g.len() / (ca + cb);
                let (mut ga, mut gb) = (Vec::with_capacity(rows * ca), Vec::with_capacity(rows * cb));
                for r in 0..rows {
                    let row = &g[r * (ca + cb)..(r + 1) * (ca + cb)];
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.send(grads, *a, ga);
                self.send(grads, *b, gb);
            }
            Op::Add(a, b) => {
                if self.live(*b) {
                    self.send(grads, *b, g.clone());
                }
                self.send(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.send(grads, *b, g.iter().map(|&x| -x).collect());
                self.send(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.live(*a) {
                    self.send(grads, *a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                }
                if self.live(*b) {
                    self.send(grads, *b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::AddBias { x, b } => {
                let c = self.value(*b).len();
                if self.live(*b) {
                    let mut db = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.send(grads, *b, db);
                }
                self.send(grads, *x, g);
            }
            Op::ScaleChannels { x, s } => {
                let sv = self.value(*s).data();
                let c = sv.len();
                if self.live(*s) {
                    let mut ds = vec![T::zero(); c];
                    for (row, xr) in g.chunks(c).zip(self.value(*x).data().chunks(c)) {
                        for ((acc, &d), &xv) in ds.iter_mut().zip(row).zip(xr) {
                            *acc += d * xv;
                        }
                    }
                    self.send(grads, *s, ds);
                }
                let dx = g.chunks(c).flat_map(|row| row.iter().zip(sv).map(|(&d, &k)| d * k).collect::<Vec<_>>()).collect();
                self.send(grads, *x, dx);
            }
            Op::Scale(x, s) => {
                self.send(grads, *x, g.into_iter().map(|d| d * *s).collect());
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.send(grads, *x, g.iter().zip(xv).map(|(&d, &v)| d * ops::gelu_grad(v)).collect());
            }
            Op::Norm { x, mode, inv, dims } => {
                let dx = ops::norm_backward(value.data(), inv, &g, dims.0, dims.1, dims.2, *mode);
                self.send(grads, *x, dx);
            }
            Op::Reshape(x) => self.send(grads, *x, g),
            Op::Charbonnier { x, y, eps } => {
                let (xv, yv) = (self.value(*x).data(), self.value(*y).data());
                let scale = g[0] / T::of(xv.len() as f64);
                let e2 = *eps * *eps;
                let dx: Vec<T> = xv
                    .iter()
                    .zip(yv)
                    .map(|(&a, &b)| {
                        let d = a - b;
                        scale * d / (d * d + e2).sqrt()
                    })
                    .collect();
                if self.live(*y) {
                    self.send(grads, *y, dx.iter().map(|&v| -v).collect());
                }
                self.send(grads, *x, dx);
            }
            Op::Mse { x, y } => {
                let (xv, yv) = (self.value(*x).data(), self.value(*y).data());
                let scale = g[0] * T::of(2.0) / T::of(xv.len() as f64);
                let dx: Vec<T> = xv.iter().zip(yv).map(|(&a, &b)| scale * (a - b)).collect();
                if self.live(*y) {
                    self.send(grads, *y, dx.iter().map(|&v| -v).collect());
                }
                self.send(grads, *x, dx);
            }
            Op::Dot { x, r } => {
                self.send(grads, *x, r.data().iter().map(|&v| v * g[0]).collect());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn constants_are_not_differentiated() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::full(&[3], 2.0));
        let b = g.input(Tensor::full(&[3], 1.0));
        let c = g.mul(a, b).unwrap();
        let r = Tensor::full(&[3], 1.0);
        let s = g.dot(c, r).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.of(a).is_none());
        assert_eq!(grads.of(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn shared_inputs_accumulate() {
        let mut rng = RngState::new(1);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::randn(&[4], 1.0, &mut rng));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // 2 x^2
        let s = g.dot(z, Tensor::full(&[4], 1.0)).unwrap();
        let grads = g.backward(s).unwrap();
        for (d, v) in grads.of(x).unwrap().iter().zip(g.value(x).data()) {
            assert!((d - 4.0 * v).abs() < 1e-12);
        }
    }
}
