//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates exact
//! gradients for every node that depends on a trainable leaf.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::params::ParamSet;
use super::tensor::{matmul, matmul_nt, matmul_tn, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Reshape(Var),
    Gather(Var, Arc<[usize]>),
    Concat(Vec<Var>),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    CausalAttention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Reparam { mu: Var, sigma: Var, eps: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Parameter name to graph variable mapping produced by [`Graph::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Variable bound to `name`. Panics if the name was not bound, which is
    /// always a model-construction bug.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Collects gradients of every bound parameter; parameters that did not
    /// influence the loss receive zeros.
    pub fn to_params(&self, graph: &Graph<T>, bound: &Bound) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, var) in bound.iter() {
            let g = match self.get(*var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(graph.value(*var).shape()),
            };
            out.insert(name.clone(), g);
        }
        out
    }
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds every tensor of `params` as a differentiable leaf.
    pub fn bind(&mut self, params: &ParamSet<T>) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.clone(), self.leaf(t.clone()));
        }
        Bound { vars }
    }

    /// Binds parameters as constants, for inference without gradient tracking.
    pub fn bind_frozen(&mut self, params: &ParamSet<T>) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.clone(), self.constant(t.clone()));
        }
        Bound { vars }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ"
        );
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(a).map(f);
        let tr = self.tracked(a);
        self.push(out, op, tr)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let out = self.zip(a, b, |x, y| x + y);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Add(a, b), tr)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let out = self.zip(a, b, |x, y| x - y);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Sub(a, b), tr)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let out = self.zip(a, b, |x, y| x * y);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Mul(a, b), tr)
    }

    /// Adds the vector `b[m]` to every row of `a[.., m]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (_, m) = self.value(a).rows_cols();
        assert_eq!(self.value(b).len(), m, "add_row: bias length");
        let bv = self.value(b).data().to_vec();
        let av = self.value(a);
        let data = av
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(&bv).map(|(&x, &y)| x + y))
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(out, Op::AddRow(a, b), tr)
    }

    /// Multiplies every row of `a[.., m]` elementwise by `b[m]`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (_, m) = self.value(a).rows_cols();
        assert_eq!(self.value(b).len(), m, "mul_row: scale length");
        let bv = self.value(b).data().to_vec();
        let av = self.value(a);
        let data = av
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(&bv).map(|(&x, &y)| x * y))
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MulRow(a, b), tr)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// `a[n,k] @ b[k,m]`; `a` may have any leading shape whose last axis is `k`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.value(a).rows_cols();
        let bs = self.shape(b);
        assert_eq!(bs.len(), 2, "matmul: rhs must be a matrix");
        assert_eq!(bs[0], k, "matmul: inner dimensions {k} vs {}", bs[0]);
        let m = bs[1];
        let data = matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = m;
        let tr = self.tracked(a) || self.tracked(b);
        self.push(Tensor::from_parts(shape, data), Op::MatMul(a, b), tr)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Elementwise clamp; the gradient is passed through strictly inside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let tr = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tr)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let n = T::of(v.len() as f64);
        let tr = self.tracked(a);
        self.push(Tensor::scalar(s / n), Op::Mean(a), tr)
    }

    /// Column means of `a[n, m]`, giving `[m]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.value(a).rows_cols();
        let mut out = vec![T::zero(); m];
        for row in self.value(a).data().chunks(m) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o = *o + x;
            }
        }
        let inv = T::one() / T::of(n as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        let tr = self.tracked(a);
        self.push(Tensor::from_parts(vec![m], out), Op::MeanRows(a), tr)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self
            .value(a)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        let tr = self.tracked(a);
        self.push(t, Op::Reshape(a), tr)
    }

    /// `out[i] = a[index[i]]` over flattened data, with the given output shape.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), index.len(), "gather: shape/index");
        let src = self.value(a).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let tr = self.tracked(a);
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::Gather(a, index), tr)
    }

    /// Rows `start..end` of a matrix `a[n, m]`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (n, m) = self.value(a).rows_cols();
        assert!(start < end && end <= n, "slice_rows: {start}..{end} of {n}");
        let index: Arc<[usize]> = (start * m..end * m).collect();
        self.gather(a, index, &[end - start, m])
    }

    /// Concatenates along the leading (row) axis. All inputs share the same
    /// column count.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let (_, m) = self.value(parts[0]).rows_cols();
        let mut data = Vec::new();
        let mut tr = false;
        for &p in parts {
            let (_, pm) = self.value(p).rows_cols();
            assert_eq!(pm, m, "concat: column mismatch");
            data.extend_from_slice(self.value(p).data());
            tr |= self.tracked(p);
        }
        let rows = data.len() / m;
        self.push(Tensor::from_parts(vec![rows, m], data), Op::Concat(parts.to_vec()), tr)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, m) = self.value(a).rows_cols();
        let av = self.value(a);
        let mut data = Vec::with_capacity(av.len());
        for row in av.data().chunks(m) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            let mut z = T::zero();
            for &x in row {
                let e = (x - mx).exp();
                z = z + e;
                data.push(e);
            }
            data[start..].iter_mut().for_each(|e| *e = *e / z);
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let tr = self.tracked(a);
        self.push(out, Op::Softmax(a), tr)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (_, m) = self.value(x).rows_cols();
        assert_eq!(self.value(gamma).len(), m);
        assert_eq!(self.value(beta).len(), m);
        let eps = T::of(eps);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xv = self.value(x);
        let mf = T::of(m as f64);
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(m) {
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let inv = T::one() / (var + eps).sqrt();
            for j in 0..m {
                data.push((row[j] - mean) * inv * g[j] + b[j]);
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let tr = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, eps }, tr)
    }

    /// Multi-head scaled dot-product attention with a causal mask. `q`, `k`,
    /// `v` are `[n, d]`; heads split the column axis evenly.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (n, d) = self.value(q).rows_cols();
        assert_eq!(self.value(k).rows_cols(), (n, d));
        assert_eq!(self.value(v).rows_cols(), (n, d));
        assert!(heads > 0 && d % heads == 0, "attention: {d} not divisible by {heads}");
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                let mut mx = T::neg_infinity();
                for j in 0..=i {
                    let mut s = T::zero();
                    for c in 0..dh {
                        s = s + qd[i * d + off + c] * kd[j * d + off + c];
                    }
                    p[j] = s * scale;
                    mx = mx.max(p[j]);
                }
                let mut z = T::zero();
                for pj in p.iter_mut().take(i + 1) {
                    *pj = (*pj - mx).exp();
                    z = z + *pj;
                }
                for pj in p.iter_mut().take(i + 1) {
                    *pj = *pj / z;
                }
                for j in 0..=i {
                    let w = p[j];
                    for c in 0..dh {
                        out[i * d + off + c] = out[i * d + off + c] + w * vd[j * d + off + c];
                    }
                }
            }
        }
        let tr = self.tracked(q) || self.tracked(k) || self.tracked(v);
        self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::CausalAttention { q, k, v, heads, probs },
            tr,
        )
    }

    /// Reparameterized Gaussian sample `mu + sigma * eps` with `eps` held constant.
    pub fn reparam(&mut self, mu: Var, sigma: Var, eps: Vec<T>) -> Var {
        self.same_shape(mu, sigma, "reparam");
        assert_eq!(eps.len(), self.value(mu).len(), "reparam: noise length");
        let m = self.value(mu);
        let s = self.value(sigma);
        let data = m
            .data()
            .iter()
            .zip(s.data())
            .zip(&eps)
            .map(|((&a, &b), &e)| a + b * e)
            .collect();
        let out = Tensor::from_parts(m.shape().to_vec(), data);
        let tr = self.tracked(mu) || self.tracked(sigma);
        self.push(out, Op::Reparam { mu, sigma, eps }, tr)
    }

    /// `x @ w + b` for `x[.., k]`, `w[k, m]`, `b[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn with_data(&self, like: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::from_parts(self.shape(like).to_vec(), data)
    }

    fn propagate(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = gout.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.tracked(*a) {
                    let d = g.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, self.with_data(*a, d));
                }
                if self.tracked(*b) {
                    let d = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, self.with_data(*b, d));
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                if self.tracked(*b) {
                    let m = self.value(*b).len();
                    let mut d = vec![T::zero(); m];
                    for row in g.chunks(m) {
                        for (o, &x) in d.iter_mut().zip(row) {
                            *o = *o + x;
                        }
                    }
                    self.accumulate(grads, *b, self.with_data(*b, d));
                }
            }
            Op::MulRow(a, b) => {
                let m = self.value(*b).len();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.tracked(*a) {
                    let d = g
                        .chunks(m)
                        .flat_map(|row| row.iter().zip(bv).map(|(&x, &s)| x * s))
                        .collect();
                    self.accumulate(grads, *a, self.with_data(*a, d));
                }
                if self.tracked(*b) {
                    let mut d = vec![T::zero(); m];
                    for (grow, arow) in g.chunks(m).zip(av.chunks(m)) {
                        for j in 0..m {
                            d[j] = d[j] + grow[j] * arow[j];
                        }
                    }
                    self.accumulate(grads, *b, self.with_data(*b, d));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, gout.map(|x| x * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, gout.clone()),
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).rows_cols();
                let m = self.shape(*b)[1];
                if self.tracked(*a) {
                    let d = matmul_nt(g, self.value(*b).data(), n, m, k);
                    self.accumulate(grads, *a, self.with_data(*a, d));
                }
                if self.tracked(*b) {
                    let d = matmul_tn(self.value(*a).data(), g, n, k, m);
                    self.accumulate(grads, *b, self.with_data(*b, d));
                }
            }
            Op::Exp(a) => {
                let d = g.iter().zip(y).map(|(&x, &e)| x * e).collect();
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::Log(a) => {
                let av = self.value(*a).data();
                let d = g.iter().zip(av).map(|(&x, &v)| x / v).collect();
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::Tanh(a) => {
                let d = g.iter().zip(y).map(|(&x, &t)| x * (T::one() - t * t)).collect();
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::Softplus(a) => {
                let av = self.value(*a).data();
                let d = g.iter().zip(av).map(|(&x, &v)| x * sigmoid(v)).collect();
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                let two = T::of(2.0);
                let d = g.iter().zip(av).map(|(&x, &v)| x * two * v).collect();
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(av)
                    .map(|(&x, &v)| if v > *lo && v < *hi { x } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::Sum(a) => {
                let s = g[0];
                let t = Tensor::full(self.shape(*a), s);
                self.accumulate(grads, *a, t);
            }
            Op::Mean(a) => {
                let n = T::of(self.value(*a).len() as f64);
                let t = Tensor::full(self.shape(*a), g[0] / n);
                self.accumulate(grads, *a, t);
            }
            Op::MeanRows(a) => {
                let (n, _) = self.value(*a).rows_cols();
                let inv = T::one() / T::of(n as f64);
                let d = (0..n).flat_map(|_| g.iter().map(|&x| x * inv)).collect();
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::Reshape(a) => {
                let d = g.to_vec();
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::Gather(a, index) => {
                if self.tracked(*a) {
                    let mut d = vec![T::zero(); self.value(*a).len()];
                    for (&i, &x) in index.iter().zip(g) {
                        d[i] = d[i] + x;
                    }
                    self.accumulate(grads, *a, self.with_data(*a, d));
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.tracked(p) {
                        let d = g[off..off + len].to_vec();
                        self.accumulate(grads, p, self.with_data(p, d));
                    }
                    off += len;
                }
            }
            Op::Softmax(a) => {
                let (_, m) = self.value(*a).rows_cols();
                let mut d = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(m).zip(y.chunks(m)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&x, &s)| x * s).sum();
                    d.extend(grow.iter().zip(yrow).map(|(&x, &s)| s * (x - dot)));
                }
                self.accumulate(grads, *a, self.with_data(*a, d));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (_, m) = self.value(*x).rows_cols();
                let xv = self.value(*x).data();
                let gm = self.value(*gamma).data();
                let mf = T::of(m as f64);
                let mut dx = Vec::with_capacity(xv.len());
                let mut dg = vec![T::zero(); m];
                let mut db = vec![T::zero(); m];
                let mut xhat = vec![T::zero(); m];
                let mut dxhat = vec![T::zero(); m];
                for (row, grow) in xv.chunks(m).zip(g.chunks(m)) {
                    let mean = row.iter().copied().sum::<T>() / mf;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                    let inv = T::one() / (var + *eps).sqrt();
                    for j in 0..m {
                        xhat[j] = (row[j] - mean) * inv;
                        dxhat[j] = grow[j] * gm[j];
                        dg[j] = dg[j] + grow[j] * xhat[j];
                        db[j] = db[j] + grow[j];
                    }
                    let s1: T = dxhat.iter().copied().sum();
                    let s2: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                    for j in 0..m {
                        dx.push(inv / mf * (mf * dxhat[j] - s1 - xhat[j] * s2));
                    }
                }
                self.accumulate(grads, *x, self.with_data(*x, dx));
                self.accumulate(grads, *gamma, self.with_data(*gamma, dg));
                self.accumulate(grads, *beta, self.with_data(*beta, db));
            }
            Op::CausalAttention { q, k, v, heads, probs } => {
                let (n, d) = self.value(*q).rows_cols();
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![T::zero(); n * d];
                let mut dk = vec![T::zero(); n * d];
                let mut dv = vec![T::zero(); n * d];
                let mut dp = vec![T::zero(); n];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                        for j in 0..=i {
                            let mut s = T::zero();
                            for c in 0..dh {
                                s = s + g[i * d + off + c] * vd[j * d + off + c];
                                dv[j * d + off + c] = dv[j * d + off + c] + p[j] * g[i * d + off + c];
                            }
                            dp[j] = s;
                        }
                        let dot: T = (0..=i).map(|j| p[j] * dp[j]).sum();
                        for j in 0..=i {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            for c in 0..dh {
                                dq[i * d + off + c] = dq[i * d + off + c] + ds * kd[j * d + off + c];
                                dk[j * d + off + c] = dk[j * d + off + c] + ds * qd[i * d + off + c];
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, self.with_data(*q, dq));
                self.accumulate(grads, *k, self.with_data(*k, dk));
                self.accumulate(grads, *v, self.with_data(*v, dv));
            }
            Op::Reparam { mu, sigma, eps } => {
                self.accumulate(grads, *mu, gout.clone());
                if self.tracked(*sigma) {
                    let d = g.iter().zip(eps).map(|(&x, &e)| x * e).collect();
                    self.accumulate(grads, *sigma, self.with_data(*sigma, d));
                }
            }
        }
    }
}
