//! Wengert-list autodiff: every op appends a node holding its value and
//! whatever the backward rule needs, and `backward` replays the list in
//! reverse. Nodes only ever reference earlier nodes, so the tape is acyclic
//! and index order is a topological order.

use std::collections::{BTreeMap, HashMap};

use crate::error::{invalid, Error, Result};

use super::conv::ConvGeom;
use super::scalar::matmul;
use super::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cout: usize,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        // convolution geometry from the output grid back to the input grid
        geom: ConvGeom,
        cin: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    StraightThrough(Var),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients of named parameters produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn all_finite(&self) -> bool {
        self.by_name.values().all(Tensor::is_finite)
    }
}

/// Per-evaluation record of a computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v).to_vec(), g.clone()).ok()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, requires_grad, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Trainable leaf registered under `name`; repeated calls return the same node.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.leaf(value.clone(), true)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.leaf(value, false)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(op, out, rg, node)
    }

    fn unary(&mut self, op: &'static str, a: Var, f: impl Fn(T) -> T, node: Op<T>) -> Result<Var> {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(op, out, rg, node)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("shift", a, |x| x + c, Op::Shift(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary("clamp", a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        let rg = self.rg(&[a]);
        self.push("mean", Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d)?;
        self.mean(d)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.square(d)?;
        self.mean(d)
    }

    /// 2-D convolution. `x`: N×Cin×H×W, `w`: Cout×Cin×k×k, `b`: Cout.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4("conv2d")?;
        let (cout, wcin, k, k2) = self.value(w).dims4("conv2d")?;
        if wcin != cin || k != k2 {
            return Err(shape_err("conv2d", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [cout] {
            return Err(shape_err("conv2d", self.shape(w), self.shape(b)));
        }
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad)
            .ok_or_else(|| shape_err("conv2d", self.shape(x), self.shape(w)))?;
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); n * rows * ncols];
        let mut out = vec![T::zero(); n * cout * ncols];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for i in 0..n {
                let c = &mut cols[i * rows * ncols..(i + 1) * rows * ncols];
                geom.im2col(&xv[i * cin * h * wd..(i + 1) * cin * h * wd], c);
                let o = &mut out[i * cout * ncols..(i + 1) * cout * ncols];
                for (co, line) in o.chunks_mut(ncols).enumerate() {
                    line.fill(bv[co]);
                }
                matmul(wv, false, c, false, o, cout, rows, ncols, true);
            }
        }
        let out = Tensor::new(vec![n, cout, geom.ho, geom.wo], out)?;
        let rg = self.rg(&[x, w, b]);
        let keep = if self.rg(&[w]) { cols } else { Vec::new() };
        self.push(
            "conv2d",
            out,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cout,
                cols: keep,
            },
        )
    }

    /// Transposed 2-D convolution. `x`: N×Cin×H×W, `w`: Cin×Cout×k×k, `b`: Cout.
    /// Output extent is `(H−1)·stride − 2·pad + k + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4("conv_transpose2d")?;
        let (wcin, cout, k, k2) = self.value(w).dims4("conv_transpose2d")?;
        if wcin != cin || k != k2 || out_pad >= stride.max(1) {
            return Err(shape_err("conv_transpose2d", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [cout] {
            return Err(shape_err("conv_transpose2d", self.shape(w), self.shape(b)));
        }
        let full = |e: usize| ((e - 1) * stride + k + out_pad).checked_sub(2 * pad);
        let (Some(ho), Some(wo)) = (full(h), full(wd)) else {
            return Err(shape_err("conv_transpose2d", self.shape(x), self.shape(w)));
        };
        let geom = ConvGeom::new(cout, ho, wo, k, stride, pad)
            .filter(|g| g.ho == h && g.wo == wd)
            .ok_or_else(|| shape_err("conv_transpose2d", self.shape(x), self.shape(w)))?;
        let rows = geom.col_rows();
        let hw = h * wd;
        let mut cols = vec![T::zero(); rows * hw];
        let mut out = vec![T::zero(); n * cout * ho * wo];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for i in 0..n {
                matmul(
                    wv,
                    true,
                    &xv[i * cin * hw..(i + 1) * cin * hw],
                    false,
                    &mut cols,
                    rows,
                    cin,
                    hw,
                    false,
                );
                let o = &mut out[i * cout * ho * wo..(i + 1) * cout * ho * wo];
                for (co, plane) in o.chunks_mut(ho * wo).enumerate() {
                    plane.fill(bv[co]);
                }
                geom.col2im(&cols, o);
            }
        }
        let out = Tensor::new(vec![n, cout, ho, wo], out)?;
        let rg = self.rg(&[x, w, b]);
        self.push("conv_transpose2d", out, rg, Op::ConvTranspose2d { x, w, b, geom, cin })
    }

    /// Per-channel batch normalization of N×C×H×W input.
    ///
    /// With `stats = None` the batch statistics are used (N ≥ 2 required) and
    /// returned as `(mean, unbiased variance)` for a running-average update.
    /// With `stats = Some((mean, var))` those fixed statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let hw = h * w;
        let count = n * hw;
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(shape_err("batch_norm", &[c], &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                if n < 2 {
                    return Err(invalid("batch_norm with batch statistics needs a batch of at least 2"));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..n {
                        s += xv[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let m = s / T::of(count as f64);
                    let mut q = T::zero();
                    for i in 0..n {
                        for &v in &xv[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            q += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / T::of(count as f64);
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let xh = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = g[ch] * xh + bt[ch];
                }
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let running = batch_stats.then(|| {
            let unbias = if count > 1 {
                T::of(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            (mean, var.iter().map(|&v| v * unbias).collect())
        });
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            "batch_norm",
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )?;
        Ok((v, running))
    }

    /// Affine map. `x`: N×In, `w`: Out×In, `b`: Out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, fin, fout) = match (&xs[..], &ws[..]) {
            ([n, i], [o, i2]) if i == i2 => (*n, *i, *o),
            _ => return Err(shape_err("linear", &xs, &ws)),
        };
        if self.shape(b) != [fout] {
            return Err(shape_err("linear", &ws, self.shape(b)));
        }
        let mut out = vec![T::zero(); n * fout];
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(self.value(b).data());
        }
        matmul(
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            n,
            fin,
            fout,
            true,
        );
        let out = Tensor::new(vec![n, fout], out)?;
        let rg = self.rg(&[x, w, b]);
        self.push("linear", out, rg, Op::Linear { x, w, b })
    }

    /// Channel concatenation of two N×C×H×W tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4("concat")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err("concat", self.shape(a), self.shape(b)));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b).data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let out = Tensor::new(vec![n, ca + cb, h, w], out)?;
        let rg = self.rg(&[a, b]);
        self.push("concat", out, rg, Op::Concat { a, b })
    }

    /// Forward value of `q`, backward identity into `z`; `q` gets no gradient.
    pub fn straight_through(&mut self, z: Var, q: Var) -> Result<Var> {
        if self.shape(z) != self.shape(q) {
            return Err(shape_err("straight_through", self.shape(z), self.shape(q)));
        }
        let out = self.value(q).clone();
        let rg = self.rg(&[z]);
        self.push("straight_through", out, rg, Op::StraightThrough(z))
    }

    /// Rows of a K×D `table` laid out as an N×D×H×W tensor; `indices` are in
    /// (n, h, w) row-major order.
    pub fn gather_nchw(&mut self, table: Var, indices: &[usize], n: usize, h: usize, w: usize) -> Result<Var> {
        let (k, d) = match self.shape(table) {
            &[k, d] => (k, d),
            s => return Err(shape_err("gather", s, &[0, 0])),
        };
        if indices.len() != n * h * w {
            return Err(shape_err("gather", &[indices.len()], &[n, h, w]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(invalid(format!("gather: index {bad} out of range for {k} rows")));
        }
        let tv = self.value(table).data();
        let hw = h * w;
        let mut out = vec![T::zero(); n * d * hw];
        for i in 0..n {
            for p in 0..hw {
                let row = &tv[indices[i * hw + p] * d..(indices[i * hw + p] + 1) * d];
                for (ch, &v) in row.iter().enumerate() {
                    out[(i * d + ch) * hw + p] = v;
                }
            }
        }
        let out = Tensor::new(vec![n, d, h, w], out)?;
        let rg = self.rg(&[table]);
        self.push(
            "gather",
            out,
            rg,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar `loss`. Gradients are kept on the tape for
    /// [`Tape::grad`] and named-parameter gradients are returned.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        let mut by_name = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| vec![T::zero(); self.value(*v).len()]);
            by_name.insert(name.clone(), Tensor::new(self.shape(*v).to_vec(), g)?);
        }
        self.grads = grads;
        Ok(Gradients { by_name })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((s, &g), &y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * *c)),
            Op::Shift(a) | Op::StraightThrough(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g)),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(x) {
                        if x > T::zero() {
                            *s += g;
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(x) {
                        if x > T::zero() {
                            *s += g;
                        } else if x < T::zero() {
                            *s -= g;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let x = val(*a);
                let two = T::of(2.0);
                acc(*a, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(x) {
                        *s += two * x * g;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(x) {
                        if x >= *lo && x <= *hi {
                            *s += g;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let m = g[0] / T::of(nodes[a.0].value.len() as f64);
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += m));
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cout,
                cols,
            } => {
                let n = nodes[x.0].value.shape()[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.channels * geom.h * geom.w;
                acc(*b, &mut |s| {
                    for gi in g.chunks(*cout * ncols) {
                        for (co, line) in gi.chunks(ncols).enumerate() {
                            s[co] += line.iter().copied().sum::<T>();
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for i in 0..n {
                        let gi = &g[i * cout * ncols..(i + 1) * cout * ncols];
                        let ci = &cols[i * rows * ncols..(i + 1) * rows * ncols];
                        matmul(gi, false, ci, true, s, *cout, ncols, rows, true);
                    }
                });
                let wv = val(*w);
                acc(*x, &mut |s| {
                    let mut dcols = vec![T::zero(); rows * ncols];
                    for i in 0..n {
                        let gi = &g[i * cout * ncols..(i + 1) * cout * ncols];
                        matmul(wv, true, gi, false, &mut dcols, rows, *cout, ncols, false);
                        geom.col2im(&dcols, &mut s[i * in_len..(i + 1) * in_len]);
                    }
                });
            }
            Op::ConvTranspose2d { x, w, b, geom, cin } => {
                let n = nodes[x.0].value.shape()[0];
                let cout = geom.channels;
                let out_len = cout * geom.h * geom.w;
                let plane = geom.h * geom.w;
                let (rows, hw) = (geom.col_rows(), geom.col_cols());
                let mut dcols = vec![T::zero(); n * rows * hw];
                for i in 0..n {
                    geom.im2col(
                        &g[i * out_len..(i + 1) * out_len],
                        &mut dcols[i * rows * hw..(i + 1) * rows * hw],
                    );
                }
                acc(*b, &mut |s| {
                    for gi in g.chunks(out_len) {
                        for (co, p) in gi.chunks(plane).enumerate() {
                            s[co] += p.iter().copied().sum::<T>();
                        }
                    }
                });
                let xv = val(*x);
                acc(*w, &mut |s| {
                    for i in 0..n {
                        let xi = &xv[i * cin * hw..(i + 1) * cin * hw];
                        let di = &dcols[i * rows * hw..(i + 1) * rows * hw];
                        matmul(xi, false, di, true, s, *cin, hw, rows, true);
                    }
                });
                let wv = val(*w);
                acc(*x, &mut |s| {
                    for i in 0..n {
                        let di = &dcols[i * rows * hw..(i + 1) * rows * hw];
                        matmul(
                            wv,
                            false,
                            di,
                            false,
                            &mut s[i * cin * hw..(i + 1) * cin * hw],
                            *cin,
                            rows,
                            hw,
                            true,
                        );
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = nodes[x.0].value.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                acc(*beta, &mut |s| s.iter_mut().zip(&sum_g).for_each(|(s, &v)| *s += v));
                acc(*gamma, &mut |s| s.iter_mut().zip(&sum_gx).for_each(|(s, &v)| *s += v));
                let gm = val(*gamma);
                let m = T::of((n * hw) as f64);
                acc(*x, &mut |s| {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let k = gm[ch] * inv_std[ch];
                            for j in base..base + hw {
                                s[j] += if *batch_stats {
                                    k * (g[j] - sum_g[ch] / m - xhat[j] * sum_gx[ch] / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let (n, fin) = (xs[0], xs[1]);
                let fout = nodes[b.0].value.len();
                acc(*b, &mut |s| {
                    for row in g.chunks(fout) {
                        s.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                });
                let xv = val(*x);
                acc(*w, &mut |s| matmul(g, true, xv, false, s, fout, n, fin, true));
                let wv = val(*w);
                acc(*x, &mut |s| matmul(g, false, wv, false, s, n, fout, fin, true));
            }
            Op::Concat { a, b } => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let (n, hw) = (sa[0], sa[2] * sa[3]);
                let (la, lb) = (sa[1] * hw, sb[1] * hw);
                acc(*a, &mut |s| {
                    for i in 0..n {
                        let src = &g[i * (la + lb)..i * (la + lb) + la];
                        s[i * la..(i + 1) * la].iter_mut().zip(src).for_each(|(s, &v)| *s += v);
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..n {
                        let src = &g[i * (la + lb) + la..(i + 1) * (la + lb)];
                        s[i * lb..(i + 1) * lb].iter_mut().zip(src).for_each(|(s, &v)| *s += v);
                    }
                });
            }
            Op::Gather { table, indices } => {
                let d = nodes[table.0].value.shape()[1];
                let out_shape = nodes[i].value.shape();
                let hw = out_shape[2] * out_shape[3];
                acc(*table, &mut |s| {
                    for (cell, &idx) in indices.iter().enumerate() {
                        let (ni, p) = (cell / hw, cell % hw);
                        for ch in 0..d {
                            s[idx * d + ch] += g[(ni * d + ch) * hw + p];
                        }
                    }
                });
            }
        }
    }
}
