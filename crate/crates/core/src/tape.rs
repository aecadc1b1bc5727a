//! Reverse-mode differentiation over a recorded tape of coarse tensor ops.
//!
//! Every op appends a node holding its output. `backward` walks the nodes in
//! reverse and returns a [`Gradients`] set; callers fold it into a
//! [`ParameterStore`] with [`ParameterStore::accumulate`]. A tape built with
//! [`Tape::inference`] records no backward state and may move cache rows in
//! place, so it cannot be differentiated.

use std::collections::{BTreeMap, HashMap};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};
use crate::optim::{ParamId, ParameterStore};
use crate::tensor::{gemm, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Gelu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<T>, rstd: Vec<f64> },
    SoftmaxRows { x: Var },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T>, count: usize },
    Sum { x: Var },
    Moved,
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    params: BTreeMap<ParamId, Tensor<T>>,
    inputs: HashMap<Var, Tensor<T>>,
}

impl<T> Default for Gradients<T> {
    fn default() -> Self {
        Self {
            params: BTreeMap::new(),
            inputs: HashMap::new(),
        }
    }
}

impl<T: Real> Gradients<T> {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient with respect to a leaf created by [`Tape::input`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&var)
    }

    #[cfg(test)]
    pub(crate) fn insert_param(&mut self, id: ParamId, g: Tensor<T>) {
        self.params.insert(id, g);
    }
}

pub struct Tape<'s, T: Real = f32> {
    store: Option<&'s ParameterStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<'s, T: Real> Tape<'s, T> {
    pub fn new(store: &'s ParameterStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::default()
        }
    }

    /// A tape that records values only.
    pub fn inference(store: &'s ParameterStore<T>) -> Self {
        Self {
            store: Some(store),
            grad_enabled: false,
            ..Self::default()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        let node = &self.nodes[var.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.expect("param node without store").value(*id),
            (_, Some(v)) => v,
            _ => panic!("value of node {} was moved", var.0),
        }
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input, never differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input; its gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "tape has no parameter store");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn matrix(&self, op: &'static str, var: Var) -> Result<(usize, usize)> {
        let shape = self.shape(var);
        if shape.len() != 2 {
            return Err(Error::dim(op, format!("expected a matrix, got shape {shape:?}")));
        }
        Ok((shape[0], shape[1]))
    }

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (b0, b1) = self.matrix("matmul", b)?;
        let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if k != kb {
            return Err(Error::dim(
                "matmul",
                format!("inner extents differ: {m}x{k} · {kb}x{n}"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, T::zero(), &mut out);
        check_finite("matmul", &out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts_unchecked(vec![m, n], out), Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// Adds a length-`n` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(bias).len() != n {
            return Err(Error::dim("add_bias", format!("bias length {} vs width {n}", self.value(bias).len())));
        }
        let b = self.value(bias).data();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        check_finite("add_bias", &out)?;
        let shape = xv.shape().to_vec();
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), Op::AddBias { x, bias }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        check_finite("add", &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        check_finite("mul", &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v * factor).collect();
        check_finite("scale", &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), Op::Scale { x, factor }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| T::from_f64(gelu(v.as_f64())))
            .collect();
        check_finite("gelu", &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), Op::Gelu { x }, rg))
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim("layer_norm", format!("affine parameters must have length {d}")));
        }
        if eps <= 0.0 {
            return Err(Error::dim("layer_norm", "eps must be positive"));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.rows();
        let mut out = vec![T::zero(); xv.len()];
        let mut normed = if self.grad_enabled { vec![T::zero(); xv.len()] } else { Vec::new() };
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            rstds.push(rstd);
            for j in 0..d {
                let n = (row[j].as_f64() - mean) * rstd;
                out[r * d + j] = T::from_f64(n * g[j].as_f64() + b[j].as_f64());
                if !normed.is_empty() {
                    normed[r * d + j] = T::from_f64(n);
                }
            }
        }
        check_finite("layer_norm", &out)?;
        let shape = xv.shape().to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts_unchecked(shape, out),
            Op::LayerNorm { x, gain, bias, normed, rstd: rstds },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = vec![T::zero(); xv.len()];
        for (src, dst) in xv.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_into(src, dst);
        }
        check_finite("softmax_rows", &out)?;
        let shape = xv.shape().to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), Op::SoftmaxRows { x }, rg))
    }

    /// Selects rows `ids` of a `[V×d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix("gather", table)?;
        if ids.is_empty() {
            return Err(Error::dim("gather", "no rows requested"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::dim("gather", format!("row {bad} out of range for {v} rows")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::from_parts_unchecked(vec![ids.len(), d], out),
            Op::Gather { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Stacks matrices with equal width along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows", "nothing to concatenate"));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let d = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != d {
                return Err(Error::dim("concat_rows", format!("width {} vs {d}", pv.cols())));
            }
            out.extend_from_slice(pv.data());
        }
        let rows = out.len() / d;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_parts_unchecked(vec![rows, d], out),
            Op::ConcatRows { parts: parts.to_vec() },
            rg,
        ))
    }

    /// Row concatenation used for caches. On an inference tape the base rows are
    /// moved rather than copied, leaving `base` unreadable.
    pub fn append_rows(&mut self, base: Var, extra: Var) -> Result<Var> {
        if self.grad_enabled || matches!(self.nodes[base.0].op, Op::Param(_)) {
            return self.concat_rows(&[base, extra]);
        }
        let d = self.value(base).cols();
        if self.value(extra).cols() != d {
            return Err(Error::dim("append_rows", format!("width {} vs {d}", self.value(extra).cols())));
        }
        let mut data = self.nodes[base.0].value.take().expect("readable base").into_data();
        self.nodes[base.0].op = Op::Moved;
        data.extend_from_slice(self.value(extra).data());
        let rows = data.len() / d;
        Ok(self.push(Tensor::from_parts_unchecked(vec![rows, d], data), Op::ConcatRows { parts: vec![] }, false))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, d) = self.matrix("slice_rows", x)?;
        if len == 0 || start + len > rows {
            return Err(Error::dim("slice_rows", format!("rows {start}..{} of {rows}", start + len)));
        }
        let out = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts_unchecked(vec![len, d], out), Op::SliceRows { x, start }, rg))
    }

    /// Multi-head causal attention of `q` (`Tq×d`) over `k`, `v` (`Tk×d`).
    /// Query row `i` sits at absolute position `offset + i` and sees keys `0..=offset+i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, offset: usize) -> Result<Var> {
        let (tq, d) = self.matrix("attention", q)?;
        let (tk, dk) = self.matrix("attention", k)?;
        if self.shape(v) != [tk, dk] || dk != d {
            return Err(Error::dim("attention", "q, k, v widths or key/value lengths differ"));
        }
        if offset + tq != tk {
            return Err(Error::dim("attention", format!("offset {offset} + {tq} queries != {tk} keys")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim("attention", format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qv = ArrayView2::from_shape((tq, d), self.value(q).data()).expect("q");
        let kv = ArrayView2::from_shape((tk, d), self.value(k).data()).expect("k");
        let vv = ArrayView2::from_shape((tk, d), self.value(v).data()).expect("v");
        let mut out = vec![T::zero(); tq * d];
        let mut probs = vec![T::zero(); heads * tq * tk];
        {
            let mut ov = ArrayViewMut2::from_shape((tq, d), &mut out).expect("out");
            for (h, ph) in probs.chunks_mut(tq * tk).enumerate() {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut pm = ArrayViewMut2::from_shape((tq, tk), &mut *ph).expect("probs");
                general_mat_mul(scale, &qv.slice(cols), &kv.slice(cols).t(), T::zero(), &mut pm);
                for (i, row) in ph.chunks_mut(tk).enumerate() {
                    let visible = offset + i + 1;
                    let (live, masked) = row.split_at_mut(visible);
                    let src = live.to_vec();
                    softmax_into(&src, live);
                    masked.iter_mut().for_each(|x| *x = T::zero());
                }
                let pm = ArrayView2::from_shape((tq, tk), &*ph).expect("probs");
                general_mat_mul(T::one(), &pm, &vv.slice(cols), T::zero(), &mut ov.slice_mut(cols));
            }
        }
        check_finite("attention", &out)?;
        let rg = self.any_grad(&[q, k, v]);
        if !rg {
            probs = Vec::new();
        }
        Ok(self.push(
            Tensor::from_parts_unchecked(vec![tq, d], out),
            Op::Attention { q, k, v, heads, probs },
            rg,
        ))
    }

    /// Mean negative log-likelihood over rows where `mask` is true.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, vocab) = self.matrix("cross_entropy", logits)?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::dim(
                "cross_entropy",
                format!("{t} rows, {} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let lv = self.value(logits);
        let mut total = 0.0f64;
        let keep = self.any_grad(&[logits]);
        let mut probs = if keep { vec![T::zero(); t * vocab] } else { Vec::new() };
        for r in 0..t {
            if !mask[r] {
                continue;
            }
            if targets[r] >= vocab {
                return Err(Error::dim("cross_entropy", format!("target {} >= vocab {vocab}", targets[r])));
            }
            let row = lv.row(r);
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[targets[r]].as_f64();
            if keep {
                for j in 0..vocab {
                    probs[r * vocab + j] = T::from_f64((row[j].as_f64() - lse).exp());
                }
            }
        }
        let loss = T::from_f64(total / count as f64);
        check_finite("cross_entropy", &[loss])?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            keep,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let out = T::from_f64(total);
        check_finite("sum", &[out])?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(out), Op::Sum { x }, rg))
    }

    /// Differentiates the scalar `loss` with respect to every parameter and
    /// differentiable input that contributed to it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("node {} is not on this tape", loss.0)));
        }
        if !self.grad_enabled {
            return Err(Error::Graph("inference tapes cannot be differentiated".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!("loss must be a scalar, got shape {:?}", self.shape(loss))));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Graph("loss is not connected to any differentiable input".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    let shape = self.shape(Var(idx)).to_vec();
                    out.inputs.insert(Var(idx), Tensor::from_parts_unchecked(shape, dy));
                }
                Op::Param(id) => {
                    let shape = self.shape(Var(idx)).to_vec();
                    out.params.insert(*id, Tensor::from_parts_unchecked(shape, dy));
                }
                Op::Moved => return Err(Error::Graph("moved node reached in backward".into())),
                op => self.backward_op(op, Var(idx), &dy, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn backward_op(&self, op: &Op<T>, node: Var, dy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match op {
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(node)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let ga = grad_buf(grads, *a, m * k);
                    // dA = dY · Bᵀ  (B logical k×n)
                    gemm(m, n, k, dy, false, bv, !trans_b, T::one(), ga);
                }
                if self.requires_grad(*b) {
                    let gb = grad_buf(grads, *b, k * n);
                    if *trans_b {
                        // stored B is n×k: dB = dYᵀ · A
                        gemm(n, m, k, dy, true, av, false, T::one(), gb);
                    } else {
                        gemm(k, m, n, av, true, dy, false, T::one(), gb);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let n = self.value(*bias).len();
                if self.requires_grad(*x) {
                    add_into(grad_buf(grads, *x, dy.len()), dy);
                }
                if self.requires_grad(*bias) {
                    let mut acc = vec![0.0f64; n];
                    for row in dy.chunks(n) {
                        for (a, &g) in acc.iter_mut().zip(row) {
                            *a += g.as_f64();
                        }
                    }
                    let gb = grad_buf(grads, *bias, n);
                    for (g, a) in gb.iter_mut().zip(acc) {
                        *g += T::from_f64(a);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        add_into(grad_buf(grads, v, dy.len()), dy);
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                if self.requires_grad(*a) {
                    let g = grad_buf(grads, *a, dy.len());
                    for i in 0..dy.len() {
                        g[i] += dy[i] * bv[i];
                    }
                }
                if self.requires_grad(*b) {
                    let g = grad_buf(grads, *b, dy.len());
                    for i in 0..dy.len() {
                        g[i] += dy[i] * av[i];
                    }
                }
            }
            Op::Scale { x, factor } => {
                let g = grad_buf(grads, *x, dy.len());
                for i in 0..dy.len() {
                    g[i] += dy[i] * *factor;
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                let g = grad_buf(grads, *x, dy.len());
                for i in 0..dy.len() {
                    g[i] += T::from_f64(dy[i].as_f64() * gelu_grad(xv[i].as_f64()));
                }
            }
            Op::LayerNorm { x, gain, bias, normed, rstd } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain).data();
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut dg = vec![0.0f64; d];
                    let mut db = vec![0.0f64; d];
                    for (row, nrow) in dy.chunks(d).zip(normed.chunks(d)) {
                        for j in 0..d {
                            dg[j] += row[j].as_f64() * nrow[j].as_f64();
                            db[j] += row[j].as_f64();
                        }
                    }
                    if self.requires_grad(*gain) {
                        let g = grad_buf(grads, *gain, d);
                        for j in 0..d {
                            g[j] += T::from_f64(dg[j]);
                        }
                    }
                    if self.requires_grad(*bias) {
                        let g = grad_buf(grads, *bias, d);
                        for j in 0..d {
                            g[j] += T::from_f64(db[j]);
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gx = grad_buf(grads, *x, dy.len());
                    for (r, (row, nrow)) in dy.chunks(d).zip(normed.chunks(d)).enumerate() {
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for j in 0..d {
                            let dn = row[j].as_f64() * gv[j].as_f64();
                            mean_dn += dn;
                            mean_dn_n += dn * nrow[j].as_f64();
                        }
                        mean_dn /= d as f64;
                        mean_dn_n /= d as f64;
                        for j in 0..d {
                            let dn = row[j].as_f64() * gv[j].as_f64();
                            let v = rstd[r] * (dn - mean_dn - nrow[j].as_f64() * mean_dn_n);
                            gx[r * d + j] += T::from_f64(v);
                        }
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let y = self.value(node);
                let n = y.cols();
                let gx = grad_buf(grads, *x, dy.len());
                for ((yr, dr), gr) in y.data().chunks(n).zip(dy.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    for j in 0..n {
                        gr[j] += T::from_f64(yr[j].as_f64() * (dr[j].as_f64() - dot));
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                let len = self.value(*table).len();
                let gt = grad_buf(grads, *table, len);
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut gt[i * d..(i + 1) * d], &dy[r * d..(r + 1) * d]);
                }
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.requires_grad(p) {
                        add_into(grad_buf(grads, p, len), &dy[at..at + len]);
                    }
                    at += len;
                }
            }
            Op::SliceRows { x, start } => {
                let d = self.shape(*x)[1];
                let len = self.value(*x).len();
                let gx = grad_buf(grads, *x, len);
                add_into(&mut gx[start * d..start * d + dy.len()], dy);
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, dy, grads);
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let (t, vocab) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                let scale = dy[0].as_f64() / *count as f64;
                let g = grad_buf(grads, *logits, t * vocab);
                for r in 0..t {
                    if !mask[r] {
                        continue;
                    }
                    for j in 0..vocab {
                        let mut p = probs[r * vocab + j].as_f64();
                        if j == targets[r] {
                            p -= 1.0;
                        }
                        g[r * vocab + j] += T::from_f64(scale * p);
                    }
                }
            }
            Op::Sum { x } => {
                let len = self.value(*x).len();
                let g = grad_buf(grads, *x, len);
                g.iter_mut().for_each(|v| *v += dy[0]);
            }
            Op::Leaf | Op::Param(_) | Op::Moved => unreachable!("handled by caller"),
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        dy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (tq, d) = (self.shape(q)[0], self.shape(q)[1]);
        let tk = self.shape(k)[0];
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qv = ArrayView2::from_shape((tq, d), self.value(q).data()).expect("q");
        let kv = ArrayView2::from_shape((tk, d), self.value(k).data()).expect("k");
        let vv = ArrayView2::from_shape((tk, d), self.value(v).data()).expect("v");
        let dov = ArrayView2::from_shape((tq, d), dy).expect("dy");
        let mut dq = vec![T::zero(); tq * d];
        let mut dk = vec![T::zero(); tk * d];
        let mut dv = vec![T::zero(); tk * d];
        let mut dp = vec![T::zero(); tq * tk];
        {
            let mut dqv = ArrayViewMut2::from_shape((tq, d), &mut dq).expect("dq");
            let mut dkv = ArrayViewMut2::from_shape((tk, d), &mut dk).expect("dk");
            let mut dvv = ArrayViewMut2::from_shape((tk, d), &mut dv).expect("dv");
            for (h, ph) in probs.chunks(tq * tk).enumerate() {
                let cols = s![.., h * dh..(h + 1) * dh];
                let pm = ArrayView2::from_shape((tq, tk), ph).expect("probs");
                {
                    let mut dpm = ArrayViewMut2::from_shape((tq, tk), &mut dp).expect("dp");
                    general_mat_mul(T::one(), &dov.slice(cols), &vv.slice(cols).t(), T::zero(), &mut dpm);
                }
                general_mat_mul(T::one(), &pm.t(), &dov.slice(cols), T::one(), &mut dvv.slice_mut(cols));
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), reusing dp in place
                for (prow, drow) in ph.chunks(tk).zip(dp.chunks_mut(tk)) {
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    for (dd, &pp) in drow.iter_mut().zip(prow) {
                        *dd = T::from_f64(pp.as_f64() * (dd.as_f64() - dot));
                    }
                }
                let ds = ArrayView2::from_shape((tq, tk), &dp[..]).expect("ds");
                general_mat_mul(scale, &ds, &kv.slice(cols), T::one(), &mut dqv.slice_mut(cols));
                general_mat_mul(scale, &ds.t(), &qv.slice(cols), T::one(), &mut dkv.slice_mut(cols));
            }
        }
        for (var, g) in [(q, dq), (k, dk), (v, dv)] {
            if self.requires_grad(var) {
                let len = g.len();
                add_into(grad_buf(grads, var, len), &g);
            }
        }
    }
}

fn grad_buf<T: Real>(grads: &mut [Option<Vec<T>>], var: Var, len: usize) -> &mut Vec<T> {
    grads[var.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row softmax with max subtraction and `f64` accumulation.
pub(crate) fn softmax_into<T: Real>(src: &[T], dst: &mut [T]) {
    let max = src.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let exps: Vec<f64> = src
        .iter()
        .map(|v| {
            let e = (v.as_f64() - max).exp();
            sum += e;
            e
        })
        .collect();
    for (d, e) in dst.iter_mut().zip(exps) {
        *d = T::from_f64(e / sum);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests;
