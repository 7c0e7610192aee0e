//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the tape
//! visits every node after all of its consumers. Gradients are only computed
//! for nodes that (transitively) depend on a leaf created with
//! `requires_grad = true`.

use crate::conv::{self, ConvGeom};
use crate::error::{NnError, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    ConvT2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Var },
    LeakyRelu { x: Var, slope: T },
    Tanh { x: Var },
    Reshape { x: Var },
    Concat { a: Var, b: Var },
    Softmax { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    MulConst { x: Var, c: Tensor<T> },
    Square { x: Var },
    SumPerSample { x: Var },
    Sqrt { x: Var },
    PickNegLog { x: Var, idx: Vec<usize>, eps: T },
    Mean { x: Var },
    Scale { x: Var, s: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that required them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err<V>(msg: String) -> Result<V> {
    Err(NnError::Shape(msg))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// `x: [n, c_in, h, w]`, `w: [c_out, c_in, k, k]`, `b: [c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || self.shape(b) != [ws[0]] {
            return shape_err(format!("conv2d: x {xs:?}, w {ws:?}, b {:?}", self.shape(b)));
        }
        let geom = ConvGeom::conv(xs[2], xs[3], ws[2], stride, pad)
            .ok_or_else(|| NnError::Shape(format!("conv2d: kernel {} does not fit {xs:?}", ws[2])))?;
        let (n, c_out) = (xs[0], ws[0]);
        let mut out = vec![T::zero(); n * c_out * geom.col_cols()];
        let cols = conv::conv2d_forward(
            self.value(x).data(),
            n,
            xs[1],
            self.value(w).data(),
            self.value(b).data(),
            c_out,
            &geom,
            &mut out,
        );
        let value = Tensor::new(vec![n, c_out, geom.out_h, geom.out_w], out)?;
        let ng = self.needs(&[x, w, b]);
        let cols = if ng { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, ng))
    }

    /// `x: [n, c_in, h, w]`, `w: [c_in, c_out, k, k]`, `b: [c_out]`.
    pub fn conv_t2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] || self.shape(b) != [ws[1]] {
            return shape_err(format!("conv_t2d: x {xs:?}, w {ws:?}, b {:?}", self.shape(b)));
        }
        let geom = ConvGeom::transposed(xs[2], xs[3], ws[2], stride, pad)
            .ok_or_else(|| NnError::Shape(format!("conv_t2d: bad geometry for {xs:?}")))?;
        let (n, c_out) = (xs[0], ws[1]);
        let mut out = vec![T::zero(); n * c_out * geom.in_area()];
        conv::conv_t2d_forward(
            self.value(x).data(),
            n,
            xs[1],
            self.value(w).data(),
            self.value(b).data(),
            c_out,
            &geom,
            &mut out,
        );
        let value = Tensor::new(vec![n, c_out, geom.in_h, geom.in_w], out)?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::ConvT2d { x, w, b, geom }, ng))
    }

    /// `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.shape(b) != [ws[0]] {
            return shape_err(format!("linear: x {xs:?}, w {ws:?}, b {:?}", self.shape(b)));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let bias = self.value(b).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        gemm(
            T::one(),
            MatRef::rm(self.value(x).data(), n, fin),
            MatRef::rm_t(self.value(w).data(), fin, fout),
            T::one(),
            MatMut::rm(&mut out, n, fout),
        );
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![n, fout], out)?, Op::Linear { x, w, b }, ng))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        let ng = self.needs(&[x]);
        self.push(value, Op::LeakyRelu { x, slope: s }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let ng = self.needs(&[x]);
        self.push(value, Op::Tanh { x }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape { x }, ng))
    }

    /// Flatten every dimension after the batch.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = [t.batch(), t.per_sample()];
        self.reshape(x, &shape)
    }

    /// Concatenate along dimension 1; all later dimensions must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return shape_err(format!("concat: {sa:?} vs {sb:?}"));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for n in 0..sa[0] {
            data.extend_from_slice(ta.sample(n));
            data.extend_from_slice(tb.sample(n));
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { a, b }, ng))
    }

    /// Row-wise softmax of `x: [n, k]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[1] == 0 {
            return shape_err(format!("softmax: {xs:?}"));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(xs[1]) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(xs, out)?, Op::Softmax { x }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p - q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b }, ng))
    }

    /// Elementwise product with a constant. `c` either matches `x` exactly or
    /// has size 1 in dimension 1, in which case it is broadcast across it
    /// (a `[n, 1, h, w]` mask applied to every channel).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let cs = c.shape().to_vec();
        let exact = xs == cs;
        let bcast = xs.len() >= 2 && cs.len() == xs.len() && cs[1] == 1 && cs[0] == xs[0] && cs[2..] == xs[2..];
        if !exact && !bcast {
            return shape_err(format!("mul_const: {xs:?} vs {cs:?}"));
        }
        let c = if exact { c } else { broadcast_dim1(&c, xs[1]) };
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&p, &q)| p * q)
            .collect();
        let value = Tensor::new(xs, data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::MulConst { x, c }, ng))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let ng = self.needs(&[x]);
        self.push(value, Op::Square { x }, ng)
    }

    /// Sum over all non-batch dimensions: `[n, ...] -> [n]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data: Vec<T> = (0..t.batch())
            .map(|n| t.sample(n).iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        let value = Tensor::new(vec![t.batch()], data).expect("batch vector");
        let ng = self.needs(&[x]);
        self.push(value, Op::SumPerSample { x }, ng)
    }

    /// Elementwise square root. Inputs must be non-negative; the derivative
    /// at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v.is_nan() { v } else { v.max(T::zero()).sqrt() });
        let ng = self.needs(&[x]);
        self.push(value, Op::Sqrt { x }, ng)
    }

    /// `-ln(max(x[i, idx[i]], eps))` for each row of `x: [n, k]`.
    pub fn pick_neg_log(&mut self, x: Var, idx: &[usize], eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != idx.len() || idx.iter().any(|&i| i >= xs[1]) {
            return shape_err(format!("pick_neg_log: {xs:?} with indices {idx:?}"));
        }
        let eps = T::lit(eps);
        let t = self.value(x);
        let data = idx
            .iter()
            .enumerate()
            .map(|(n, &i)| {
                let p = t.data()[n * xs[1] + i];
                // `max` would swallow a NaN probability.
                if p.is_nan() { p } else { -(p.max(eps)).ln() }
            })
            .collect();
        let value = Tensor::new(vec![xs[0]], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::PickNegLog { x, idx: idx.to_vec(), eps }, ng))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        let ng = self.needs(&[x]);
        self.push(value, Op::Mean { x }, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let value = self.value(x).map(|v| v * s);
        let ng = self.needs(&[x]);
        self.push(value, Op::Scale { x, s }, ng)
    }

    /// Scalar value of a `[1]` node.
    pub fn item(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    /// Back-propagate from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
        }
        Gradients { grads }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape())))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl Fn(usize) -> T) {
        if let Some(g) = self.grad_slot(grads, v) {
            for (j, slot) in g.data_mut().iter_mut().enumerate() {
                *slot += f(j);
            }
        }
    }

    fn backprop_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let d = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let xs = self.shape(*x).to_vec();
                let c_out = self.shape(*w)[0];
                let wv = self.value(*w).data().to_vec();
                let mut dx = self.nodes[x.0].needs_grad.then(|| vec![T::zero(); self.value(*x).len()]);
                let mut dw = self.nodes[w.0].needs_grad.then(|| vec![T::zero(); wv.len()]);
                let mut db = self.nodes[b.0].needs_grad.then(|| vec![T::zero(); c_out]);
                conv::conv2d_backward(
                    d,
                    cols,
                    xs[0],
                    xs[1],
                    &wv,
                    c_out,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.add_buffers(grads, &[(*x, dx), (*w, dw), (*b, db)]);
            }
            Op::ConvT2d { x, w, b, geom } => {
                let xs = self.shape(*x).to_vec();
                let c_out = self.shape(*w)[1];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.nodes[x.0].needs_grad.then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.nodes[w.0].needs_grad.then(|| vec![T::zero(); wv.len()]);
                let mut db = self.nodes[b.0].needs_grad.then(|| vec![T::zero(); c_out]);
                conv::conv_t2d_backward(
                    d,
                    xv,
                    xs[0],
                    xs[1],
                    wv,
                    c_out,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.add_buffers(grads, &[(*x, dx), (*w, dw), (*b, db)]);
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[0];
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gemm(
                        T::one(),
                        MatRef::rm(d, n, fout),
                        MatRef::rm(self.value(*w).data(), fout, fin),
                        T::one(),
                        MatMut::rm(gx.data_mut(), n, fin),
                    );
                }
                if let Some(gw) = self.grad_slot(grads, *w) {
                    gemm(
                        T::one(),
                        MatRef::rm_t(d, fout, n),
                        MatRef::rm(self.value(*x).data(), n, fin),
                        T::one(),
                        MatMut::rm(gw.data_mut(), fout, fin),
                    );
                }
                self.accumulate(grads, *b, |o| (0..n).fold(T::zero(), |a, r| a + d[r * fout + o]));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |j| if xv[j] > T::zero() { d[j] } else { d[j] * *slope });
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                self.accumulate(grads, *x, |j| d[j] * (T::one() - y[j] * y[j]));
            }
            Op::Reshape { x } => self.accumulate(grads, *x, |j| d[j]),
            Op::Concat { a, b } => {
                let pa = self.value(*a).per_sample();
                let pb = self.value(*b).per_sample();
                let per = pa + pb;
                self.accumulate(grads, *a, |j| d[(j / pa) * per + j % pa]);
                self.accumulate(grads, *b, |j| d[(j / pb) * per + pa + j % pb]);
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let k = node.value.shape()[1];
                let dots: Vec<T> = y
                    .chunks(k)
                    .zip(d.chunks(k))
                    .map(|(yr, dr)| yr.iter().zip(dr).fold(T::zero(), |a, (&p, &q)| a + p * q))
                    .collect();
                self.accumulate(grads, *x, |j| y[j] * (d[j] - dots[j / k]));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |j| d[j]);
                self.accumulate(grads, *b, |j| d[j]);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |j| d[j]);
                self.accumulate(grads, *b, |j| -d[j]);
            }
            Op::MulConst { x, c } => {
                let cv = c.data();
                self.accumulate(grads, *x, |j| d[j] * cv[j]);
            }
            Op::Square { x } => {
                let xv = self.value(*x).data();
                let two = T::lit(2.0);
                self.accumulate(grads, *x, |j| two * xv[j] * d[j]);
            }
            Op::SumPerSample { x } => {
                let per = self.value(*x).per_sample();
                self.accumulate(grads, *x, |j| d[j / per]);
            }
            Op::Sqrt { x } => {
                let y = node.value.data();
                let half = T::lit(0.5);
                self.accumulate(grads, *x, |j| if y[j] > T::zero() { d[j] * half / y[j] } else { T::zero() });
            }
            Op::PickNegLog { x, idx, eps } => {
                let xv = self.value(*x).data();
                let k = self.shape(*x)[1];
                self.accumulate(grads, *x, |j| {
                    let (n, col) = (j / k, j % k);
                    if col == idx[n] && xv[j] > *eps {
                        -d[n] / xv[j]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Mean { x } => {
                let len = T::lit(self.value(*x).len() as f64);
                self.accumulate(grads, *x, |_| d[0] / len);
            }
            Op::Scale { x, s } => self.accumulate(grads, *x, |j| d[j] * *s),
        }
    }

    fn add_buffers(&self, grads: &mut [Option<Tensor<T>>], items: &[(Var, Option<Vec<T>>)]) {
        for (v, buf) in items {
            if let Some(buf) = buf {
                self.accumulate(grads, *v, |j| buf[j]);
            }
        }
    }
}

fn broadcast_dim1<T: Scalar>(c: &Tensor<T>, channels: usize) -> Tensor<T> {
    let s = c.shape();
    let inner: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(s[0] * channels * inner);
    for n in 0..s[0] {
        let plane = c.sample(n);
        for _ in 0..channels {
            data.extend_from_slice(plane);
        }
    }
    let mut shape = s.to_vec();
    shape[1] = channels;
    Tensor::new(shape, data).expect("broadcast shape")
}
