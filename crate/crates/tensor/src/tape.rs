//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value and enough saved state
//! to run its vector-Jacobian product. [`Tape::backward`] walks the nodes in
//! reverse creation order, so inputs always precede their consumers.

use rand::Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::{strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    BroadcastTo(Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        x: Var,
        tanh: Vec<T>,
    },
    Softmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        diff: Vec<T>,
    },
    GatherRows {
        x: Var,
        idx: Vec<Vec<usize>>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` when `v` does not depend on any parameter
    /// or received no gradient flow.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const LN_OP: &str = "layer_norm";

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(op_name, "forward output")?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push_checked("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push_checked("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push_checked("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// `x + b` where `b`'s shape is a suffix of `x`'s (bias, positional table).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(shape_err("add_broadcast", format!("{:?} + {:?}", xs, bs)));
        }
        let bv = self.value(b).data();
        let w = bv.len().max(1);
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(w) {
            for (o, &bb) in chunk.iter_mut().zip(bv) {
                *o = *o + bb;
            }
        }
        self.push_checked("add_broadcast", out, Op::AddBroadcast(x, b), &[x, b])
    }

    /// Repeat `x` along new leading dims; `x`'s shape must be a suffix of `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() > shape.len() || shape[shape.len() - xs.len()..] != *xs {
            return Err(shape_err("broadcast_to", format!("{:?} -> {:?}", xs, shape)));
        }
        let src = self.value(x).data();
        let reps: usize = shape[..shape.len() - xs.len()].iter().product();
        let mut data = Vec::with_capacity(reps * src.len());
        for _ in 0..reps {
            data.extend_from_slice(src);
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push_checked("broadcast_to", out, Op::BroadcastTo(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let out = self.value(x).map(|v| v * c);
        self.push_checked("scale", out, Op::Scale(x, c), &[x])
    }

    /// Batched matrix product; see [`Tape::matmul_t`].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) @ op(b)` over the last two dims, where `op` transposes when the
    /// flag is set. `b` may be rank 2 (shared across `a`'s leading dims) or
    /// carry the same leading dims as `a`.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let geo = MatGeo::new(self.shape(a), self.shape(b), ta, tb)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); geo.batch * geo.m * geo.n];
        if !geo.b_batched && !ta {
            let am = MatView::row_major(av, geo.batch * geo.m, geo.k);
            gemm(T::one(), am, geo.b_view(bv, 0), T::zero(), &mut out);
        } else {
            for i in 0..geo.batch {
                let o = &mut out[i * geo.m * geo.n..(i + 1) * geo.m * geo.n];
                gemm(T::one(), geo.a_view(av, i), geo.b_view(bv, i), T::zero(), o);
            }
        }
        let out = Tensor::new(geo.out_shape.clone(), out)?;
        self.push_checked("matmul", out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push_checked("reshape", out, Op::Reshape(x), &[x])
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len()
            || axes
                .iter()
                .any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(shape_err("permute", format!("axes {:?} for shape {:?}", axes, xs)));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let mut data = vec![T::zero(); self.value(x).numel()];
        permute_into(self.value(x).data(), &xs, axes, &mut data, false);
        let out = Tensor::new(out_shape, data)?;
        self.push_checked("permute", out, Op::Permute { x, axes: axes.to_vec() }, &[x])
    }

    /// Normalize over the last dim, then scale by `gamma` and shift by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let d = *self.shape(x).last().ok_or_else(|| shape_err(LN_OP, "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                LN_OP,
                format!(
                    "last dim {d}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / d.max(1);
        let dn = T::from_f64(d as f64);
        let eps = T::from_f64(eps);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_checked(
            LN_OP,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let tanh: Vec<T> = xv.data().iter().map(|&v| gelu_tanh(v)).collect();
        let half = T::from_f64(0.5);
        let data = xv
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&v, &t)| half * v * (T::one() + t))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push_checked("gelu", out, Op::Gelu { x, tanh }, &[x])
    }

    /// Softmax over the last dim, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let k = *xv.shape().last().ok_or_else(|| shape_err("softmax", "scalar input"))?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(k.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_checked("softmax", out, Op::Softmax(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    ///
    /// `logits` is `[..., k]`; leading dims are flattened into rows and must
    /// total `labels.len()`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let k = *lv
            .shape()
            .last()
            .ok_or_else(|| shape_err("cross_entropy", "scalar logits"))?;
        let rows = lv.numel() / k.max(1);
        if rows != labels.len() || rows == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("{} logit rows vs {} labels", rows, labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                size: k,
            });
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        for (r, row) in probs.chunks_mut(k).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += (lse - row[labels[r]]).as_f64();
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let out = Tensor::scalar(T::from_f64(total / rows as f64));
        self.push_checked(
            "cross_entropy",
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", pv.shape(), target.shape())));
        }
        if pv.numel() == 0 {
            return Err(shape_err("mse", "empty input"));
        }
        let diff: Vec<T> = pv.data().iter().zip(target.data()).map(|(&p, &t)| p - t).collect();
        let sq: f64 = diff.iter().map(|d| (*d * *d).as_f64()).sum();
        let out = Tensor::scalar(T::from_f64(sq / diff.len() as f64));
        self.push_checked("mse", out, Op::Mse { pred, diff }, &[pred])
    }

    /// Select rows per batch element.
    ///
    /// `x` is `[B, N, D]` (one row table per batch element) or `[N, D]`
    /// (a table shared by all); `idx` holds `B` lists of equal length `M`.
    /// Output is `[B, M, D]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batched, n, d) = match xs.as_slice() {
            [b, n, d] => {
                if *b != idx.len() {
                    return Err(shape_err(
                        "gather_rows",
                        format!("batch {} vs {} index lists", b, idx.len()),
                    ));
                }
                (true, *n, *d)
            }
            [n, d] => (false, *n, *d),
            _ => {
                return Err(shape_err(
                    "gather_rows",
                    format!("rank-2 or rank-3 input, got {:?}", xs),
                ))
            }
        };
        let m = idx.first().map_or(0, |v| v.len());
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * m * d);
        for (bi, rows) in idx.iter().enumerate() {
            if rows.len() != m {
                return Err(shape_err("gather_rows", "ragged index lists"));
            }
            let base = if batched { bi * n * d } else { 0 };
            for &r in rows {
                if r >= n {
                    return Err(TensorError::Index {
                        op: "gather_rows",
                        index: r,
                        size: n,
                    });
                }
                data.extend_from_slice(&src[base + r * d..base + (r + 1) * d]);
            }
        }
        let out = Tensor::new(vec![idx.len(), m, d], data)?;
        self.push_checked("gather_rows", out, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &v)| i != axis && v != first[i]) {
                return Err(shape_err("concat", format!("{:?} vs {:?}", first, s)));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        self.push_checked(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] == 0 {
            return Err(shape_err("mean_axis", format!("axis {axis} of {:?}", xs)));
        }
        let (outer, len, inner) = split_axis(&xs, axis);
        let src = self.value(x).data();
        let inv = T::from_f64(1.0 / len as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + src[base + i];
                }
            }
        }
        for v in data.iter_mut() {
            *v = *v * inv;
        }
        let mut out_shape = xs.clone();
        out_shape.remove(axis);
        let out = Tensor::new(out_shape, data)?;
        self.push_checked("mean_axis", out, Op::MeanAxis { x, axis }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_checked("sum_all", out, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(shape_err("mean_all", "empty input"));
        }
        let out = Tensor::scalar(v.sum() / T::from_f64(v.numel() as f64));
        self.push_checked("mean_all", out, Op::MeanAll(x), &[x])
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!("dropout p must be in [0, 1), got {p}")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push_checked("dropout", out, Op::Dropout { x, mask }, &[x])
    }

    /// Backpropagate from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape()),
            ));
        }
        lv.ensure_finite("backward", "loss")?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) {
                g.ensure_finite("backward", &format!("gradient of leaf {i}"))?;
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()))
                .data_mut(),
        )
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if let Some(s) = self.slot(grads, v) {
                        axpy(s, sign, gd);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if let Some(s) = self.slot(grads, v) {
                        axpy(s, sign, gd);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, &gg), &y) in s.iter_mut().zip(gd).zip(bv) {
                        *o = *o + gg * y;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((o, &gg), &x) in s.iter_mut().zip(gd).zip(av) {
                        *o = *o + gg * x;
                    }
                }
            }
            Op::AddBroadcast(x, b) => {
                if let Some(s) = self.slot(grads, *x) {
                    axpy(s, T::one(), gd);
                }
                if let Some(s) = self.slot(grads, *b) {
                    let w = s.len().max(1);
                    for chunk in gd.chunks(w) {
                        axpy(s, T::one(), chunk);
                    }
                }
            }
            Op::BroadcastTo(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    let w = s.len().max(1);
                    for chunk in gd.chunks(w) {
                        axpy(s, T::one(), chunk);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = self.slot(grads, *x) {
                    axpy(s, *c, gd);
                }
            }
            Op::MatMul { a, b, ta, tb } => self.backprop_matmul(*a, *b, *ta, *tb, gd, grads),
            Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    axpy(s, T::one(), gd);
                }
            }
            Op::Permute { x, axes } => {
                let out_shape = self.nodes[i].value.shape();
                let mut inv = vec![0; axes.len()];
                for (o, &a) in axes.iter().enumerate() {
                    inv[a] = o;
                }
                if let Some(s) = self.slot(grads, *x) {
                    permute_into(gd, out_shape, &inv, s, true);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                if let Some(s) = self.slot(grads, *gamma) {
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] = s[j] + gr[j] * hr[j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *beta) {
                    for gr in gd.chunks(d) {
                        axpy(s, T::one(), gr);
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let dn = T::from_f64(d as f64);
                    let mut dy = vec![T::zero(); d];
                    for (r, (gr, hr)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            dy[j] = gr[j] * gam[j];
                            m1 = m1 + dy[j];
                            m2 = m2 + dy[j] * hr[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        let out = &mut s[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = out[j] + rstd[r] * (dy[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                let xv = self.value(*x).data();
                if let Some(s) = self.slot(grads, *x) {
                    for (((o, &gg), &v), &t) in s.iter_mut().zip(gd).zip(xv).zip(tanh) {
                        *o = *o + gg * gelu_grad(v, t);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let k = *self.nodes[i].value.shape().last().unwrap_or(&1);
                if let Some(s) = self.slot(grads, *x) {
                    for ((o, gr), yr) in s.chunks_mut(k).zip(gd.chunks(k)).zip(y.chunks(k)) {
                        let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..k {
                            o[j] = o[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if let Some(s) = self.slot(grads, *logits) {
                    let k = probs.len() / labels.len();
                    let scale = gd[0] / T::from_f64(labels.len() as f64);
                    for (r, (o, p)) in s.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        for j in 0..k {
                            let t = if j == labels[r] { T::one() } else { T::zero() };
                            o[j] = o[j] + scale * (p[j] - t);
                        }
                    }
                }
            }
            Op::Mse { pred, diff } => {
                if let Some(s) = self.slot(grads, *pred) {
                    let scale = gd[0] * T::from_f64(2.0 / diff.len() as f64);
                    axpy(s, scale, diff);
                }
            }
            Op::GatherRows { x, idx } => {
                let xs = self.shape(*x);
                let batched = xs.len() == 3;
                let (n, d) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                if let Some(s) = self.slot(grads, *x) {
                    let mut k = 0;
                    for (bi, rows) in idx.iter().enumerate() {
                        let base = if batched { bi * n * d } else { 0 };
                        for &r in rows {
                            let dst = &mut s[base + r * d..base + (r + 1) * d];
                            axpy(dst, T::one(), &gd[k * d..(k + 1) * d]);
                            k += 1;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = self.nodes[i].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if let Some(s) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = &gd[o * row + offset..o * row + offset + chunk];
                            axpy(&mut s[o * chunk..(o + 1) * chunk], T::one(), src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let inv = T::from_f64(1.0 / len as f64);
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let src = &gd[o * inner..(o + 1) * inner];
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            axpy(&mut s[base..base + inner], inv, src);
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    for o in s.iter_mut() {
                        *o = *o + gd[0];
                    }
                }
            }
            Op::MeanAll(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    let v = gd[0] / T::from_f64(s.len() as f64);
                    for o in s.iter_mut() {
                        *o = *o + v;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(s) = self.slot(grads, *x) {
                    for ((o, &gg), &m) in s.iter_mut().zip(gd).zip(mask) {
                        *o = *o + gg * m;
                    }
                }
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, ta: bool, tb: bool, gd: &[T], grads: &mut [Option<Tensor<T>>]) {
        let geo = MatGeo::new(self.shape(a), self.shape(b), ta, tb).expect("validated in forward");
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (m, k, n) = (geo.m, geo.k, geo.n);
        let fused = !geo.b_batched && !ta;
        if let Some(s) = self.slot(grads, a) {
            if fused {
                // dA = G @ op(B)^T over all rows at once.
                let g = MatView::row_major(gd, geo.batch * m, n);
                gemm(T::one(), g, geo.b_view(bv, 0).t(), T::one(), s);
            } else {
                for i in 0..geo.batch {
                    let g = MatView::row_major(&gd[i * m * n..(i + 1) * m * n], m, n);
                    let opb = geo.b_view(bv, i);
                    let dst = &mut s[i * m * k..(i + 1) * m * k];
                    if ta {
                        gemm(T::one(), opb, g.t(), T::one(), dst);
                    } else {
                        gemm(T::one(), g, opb.t(), T::one(), dst);
                    }
                }
            }
        }
        if let Some(s) = self.slot(grads, b) {
            if fused {
                let g = MatView::row_major(gd, geo.batch * m, n);
                let am = MatView::row_major(av, geo.batch * m, k);
                if tb {
                    gemm(T::one(), g.t(), am, T::one(), s);
                } else {
                    gemm(T::one(), am.t(), g, T::one(), s);
                }
            } else {
                for i in 0..geo.batch {
                    let g = MatView::row_major(&gd[i * m * n..(i + 1) * m * n], m, n);
                    let opa = geo.a_view(av, i);
                    let dst = if geo.b_batched {
                        &mut s[i * k * n..(i + 1) * k * n]
                    } else {
                        &mut s[..]
                    };
                    if tb {
                        gemm(T::one(), g.t(), opa, T::one(), dst);
                    } else {
                        gemm(T::one(), opa.t(), g, T::one(), dst);
                    }
                }
            }
        }
    }
}

/// Shape bookkeeping shared by matmul forward and backward.
struct MatGeo {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

impl MatGeo {
    fn new(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(shape_err(
                "matmul",
                format!("operands must be rank >= 2: {:?} @ {:?}", a, b),
            ));
        }
        let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
        let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!("inner dims {k} vs {kb} in {:?} @ {:?}", a, b),
            ));
        }
        let lead = &a[..a.len() - 2];
        let b_batched = b.len() > 2;
        if b_batched && b[..b.len() - 2] != *lead {
            return Err(shape_err("matmul", format!("batch dims differ: {:?} @ {:?}", a, b)));
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        Ok(MatGeo {
            batch: lead.iter().product(),
            m,
            k,
            n,
            ta,
            tb,
            b_batched,
            out_shape,
        })
    }

    /// `op(A_i)` as an `m x k` view.
    fn a_view<'a, T>(&self, data: &'a [T], i: usize) -> MatView<'a, T> {
        let sz = self.m * self.k;
        let d = &data[i * sz..(i + 1) * sz];
        if self.ta {
            MatView::row_major(d, self.k, self.m).t()
        } else {
            MatView::row_major(d, self.m, self.k)
        }
    }

    /// `op(B_i)` as a `k x n` view.
    fn b_view<'a, T>(&self, data: &'a [T], i: usize) -> MatView<'a, T> {
        let sz = self.k * self.n;
        let j = if self.b_batched { i } else { 0 };
        let d = &data[j * sz..(j + 1) * sz];
        if self.tb {
            MatView::row_major(d, self.n, self.k).t()
        } else {
            MatView::row_major(d, self.k, self.n)
        }
    }
}

fn axpy<T: Scalar>(dst: &mut [T], alpha: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + alpha * s;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Write (or, with `accumulate`, add) `permute(src, axes)` into `dst`.
/// Runs along the innermost output axis are copied as slices when that axis
/// is also innermost in the input.
fn permute_into<T: Scalar>(src: &[T], shape: &[usize], axes: &[usize], dst: &mut [T], accumulate: bool) {
    let rank = shape.len();
    if rank == 0 || src.is_empty() {
        return;
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let (run, outer_rank) = if axes[rank - 1] == rank - 1 {
        (out_shape[rank - 1], rank - 1)
    } else {
        (1, rank)
    };
    let mut counter = vec![0usize; outer_rank];
    let mut s = 0usize;
    for chunk in dst.chunks_mut(run) {
        let from = &src[s..s + run];
        if accumulate {
            axpy(chunk, T::one(), from);
        } else {
            chunk.copy_from_slice(from);
        }
        for d in (0..outer_rank).rev() {
            counter[d] += 1;
            s += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            s -= src_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    (c * (x + a * x * x * x)).tanh_act()
}

/// Derivative of the tanh GELU given `t = gelu_tanh(x)`.
fn gelu_grad<T: Scalar>(x: T, t: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}
