use std::borrow::Cow;
use std::ops::Range;

use rand::Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, transpose};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Relu { x: Var },
    SoftmaxRows { x: Var },
    CausalMask { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embed { table: Var, ids: Vec<u32> },
    CrossEntropy { scores: Var, targets: Vec<u32>, probs: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Slice { x: Var, rows: Range<usize>, cols: Range<usize> },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order so gradients can be replayed in
/// exact reverse order.
///
/// Leaves may borrow tensors (model parameters) for the lifetime `'a`, so a
/// forward pass never copies weights. A tape is single-threaded; independent
/// tapes may share the same borrowed parameters.
pub struct Tape<'a, T: Real = f32> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn matrix_dims<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    t.dims2(op)
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), op, requires_grad)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Record an owned leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_owned(value, Op::Leaf, requires_grad)
    }

    /// Record an owned leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Record a borrowed leaf that receives a gradient (a trainable parameter).
    pub fn param(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Record a borrowed leaf without gradient tracking.
    pub fn borrowed(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(av, "matmul")?;
        let (k2, n) = matrix_dims(bv, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_owned(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = matrix_dims(xv, "transpose")?;
        let out = transpose(xv.data(), m, n);
        let rg = self.rg(x);
        Ok(self.push_owned(Tensor::new(vec![n, m], out)?, Op::Transpose { x }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_owned(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let xv = self.value(x);
        let out: Vec<T> = xv.data().iter().map(|&v| v * factor).collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push_owned(
            Tensor { shape, data: out },
            Op::Scale { x, factor },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out: Vec<T> = xv
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push_owned(Tensor { shape, data: out }, Op::Relu { x }, rg)
    }

    /// Softmax over the last dimension with max-subtraction.
    ///
    /// `-inf` entries are treated as masked and receive probability 0. A row
    /// containing NaN, `+inf`, or no finite entry is a numeric error.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(n) {
            softmax_into(row, &mut out).ok_or(TensorError::NonFinite { op: "softmax_rows" })?;
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push_owned(Tensor { shape, data: out }, Op::SoftmaxRows { x }, rg))
    }

    /// Set strictly-future entries (`col > row`) of a square score matrix to `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = matrix_dims(xv, "causal_mask")?;
        if m != n {
            return Err(shape_err("causal_mask", &[m], &[n]));
        }
        let mut out = xv.data().to_vec();
        for i in 0..m {
            for v in &mut out[i * n + i + 1..(i + 1) * n] {
                *v = T::neg_infinity();
            }
        }
        let rg = self.rg(x);
        Ok(self.push_owned(Tensor::new(vec![m, n], out)?, Op::CausalMask { x }, rg))
    }

    /// Layer normalization over the last dimension followed by an affine map.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.last_dim();
        if gv.shape() != [d] {
            return Err(shape_err("layernorm", xv.shape(), gv.shape()));
        }
        if bv.shape() != [d] {
            return Err(shape_err("layernorm", xv.shape(), bv.shape()));
        }
        let dn = T::from_usize(d).expect("dimension fits");
        let rows = xv.rows();
        let mut out = Vec::with_capacity(xv.numel());
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in xv.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for ((&v, &g), &b) in row.iter().zip(gv.data()).zip(bv.data()) {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g + b);
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push_owned(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gather rows of `table[V×d]` for each id, giving `[ids.len()×d]`.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = matrix_dims(tv, "embed")?;
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "embed",
                reason: "empty id sequence".into(),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embed",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push_owned(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(scores)[target]`. Returns a `[1]` tensor.
    pub fn cross_entropy(&mut self, scores: Var, targets: &[u32]) -> Result<Var> {
        let sv = self.value(scores);
        let (n, vocab) = matrix_dims(sv, "cross_entropy")?;
        if targets.len() != n {
            return Err(shape_err("cross_entropy", sv.shape(), &[targets.len()]));
        }
        let mut probs = Vec::with_capacity(sv.numel());
        let mut total = T::zero();
        for (row, &t) in sv.data().chunks_exact(vocab).zip(targets) {
            let t = t as usize;
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: vocab,
                });
            }
            let start = probs.len();
            let log_z = softmax_into(row, &mut probs)
                .ok_or(TensorError::NonFinite { op: "cross_entropy" })?;
            total += log_z - row[t];
            debug_assert_eq!(probs.len() - start, vocab);
        }
        let loss = total / T::from_usize(n).expect("row count fits");
        let rg = self.rg(scores);
        Ok(self.push_owned(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                scores,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity (no new node) when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                reason: format!("probability {p} outside [0, 1)"),
            });
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push_owned(Tensor { shape, data: out }, Op::Dropout { x, mask }, rg))
    }

    /// A rectangular block of a matrix.
    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = matrix_dims(xv, "slice")?;
        if rows.start >= rows.end || rows.end > m || cols.start >= cols.end || cols.end > n {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                reason: format!("block {rows:?}×{cols:?} outside {m}×{n}"),
            });
        }
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            out.extend_from_slice(&xv.data()[i * n + cols.start..i * n + cols.end]);
        }
        let shape = vec![rows.len(), cols.len()];
        let rg = self.rg(x);
        Ok(self.push_owned(Tensor::new(shape, out)?, Op::Slice { x, rows, cols }, rg))
    }

    /// Concatenate matrices with equal row counts side by side (attention heads).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat_cols",
            reason: "no inputs".into(),
        })?;
        let (m, _) = matrix_dims(self.value(*first), "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = matrix_dims(self.value(p), "concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", self.value(*first).shape(), self.value(p).shape()));
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push_owned(
            Tensor::new(vec![m, total], out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Stack matrices with equal column counts vertically (batch items).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat_rows",
            reason: "no inputs".into(),
        })?;
        let (_, n) = matrix_dims(self.value(*first), "concat_rows")?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let pv = self.value(p);
            let (pm, pn) = matrix_dims(pv, "concat_rows")?;
            if pn != n {
                return Err(shape_err("concat_rows", self.value(*first).shape(), pv.shape()));
            }
            out.extend_from_slice(pv.data());
            m += pm;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push_owned(
            Tensor::new(vec![m, n], out)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Backpropagate from a scalar (`[1]`-shaped) output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                reason: format!("loss must be a scalar, got shape {:?}", lv.shape()),
            });
        }
        let seed = Tensor::filled(lv.shape().to_vec(), T::one());
        self.backward_with(loss, seed)
    }

    /// Backpropagate an arbitrary upstream gradient `seed` from `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(out).shape() {
            return Err(shape_err("backward", self.value(out).shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(seed.into_data());

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad).map(|data| Tensor {
                    shape: self.nodes[i].value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                self.accumulate(grads, *a, |da| gemm_nt(g, bv.data(), da, m, n, k));
                self.accumulate(grads, *b, |db| gemm_tn(av.data(), g, db, m, k, n));
            }
            Op::Transpose { x } => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let gt = transpose(g, m, n);
                self.accumulate(grads, *x, |dx| add_into(dx, &gt));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |da| add_into(da, g));
                self.accumulate(grads, *b, |db| add_into(db, g));
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, |dx| {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * *factor;
                    }
                });
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |dx| {
                    for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += gi;
                        }
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                self.accumulate(grads, *x, |dx| {
                    for ((dr, gr), yr) in dx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::CausalMask { x } => {
                let n = node.value.shape()[1];
                self.accumulate(grads, *x, |dx| {
                    for (i, (dr, gr)) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)).enumerate() {
                        for (d, &gi) in dr[..=i].iter_mut().zip(&gr[..=i]) {
                            *d += gi;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                self.accumulate(grads, *gain, |dg| {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((acc, &gi), &h) in dg.iter_mut().zip(gr).zip(hr) {
                            *acc += gi * h;
                        }
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for gr in g.chunks_exact(d) {
                        add_into(db, gr);
                    }
                });
                let dn = T::from_usize(d).expect("dimension fits");
                self.accumulate(grads, *x, |dx| {
                    let mut dh = vec![T::zero(); d];
                    for (((dr, gr), hr), &r) in dx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .zip(rstd)
                    {
                        for ((h, &gi), &gain_i) in dh.iter_mut().zip(gr).zip(gv) {
                            *h = gi * gain_i;
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / dn;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for ((out, &dhi), &hi) in dr.iter_mut().zip(&dh).zip(hr) {
                            *out += r * (dhi - mean_dh - hi * mean_dh_h);
                        }
                    }
                });
            }
            Op::Embed { table, ids } => {
                let d = node.value.shape()[1];
                self.accumulate(grads, *table, |dt| {
                    for (&id, gr) in ids.iter().zip(g.chunks_exact(d)) {
                        let id = id as usize;
                        add_into(&mut dt[id * d..(id + 1) * d], gr);
                    }
                });
            }
            Op::CrossEntropy {
                scores,
                targets,
                probs,
            } => {
                let vocab = self.value(*scores).shape()[1];
                let n = targets.len();
                let coef = g[0] / T::from_usize(n).expect("row count fits");
                self.accumulate(grads, *scores, |ds| {
                    for ((dr, pr), &t) in ds
                        .chunks_exact_mut(vocab)
                        .zip(probs.chunks_exact(vocab))
                        .zip(targets)
                    {
                        for (d, &p) in dr.iter_mut().zip(pr) {
                            *d += coef * p;
                        }
                        dr[t as usize] -= coef;
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |dx| {
                    for ((d, &gi), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                });
            }
            Op::Slice { x, rows, cols } => {
                let n = self.value(*x).shape()[1];
                let w = cols.len();
                self.accumulate(grads, *x, |dx| {
                    for (i, gr) in rows.clone().zip(g.chunks_exact(w)) {
                        add_into(&mut dx[i * n + cols.start..i * n + cols.end], gr);
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    self.accumulate(grads, p, |dp| {
                        for (dr, gr) in dp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            add_into(dr, &gr[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, |dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Append `softmax(row)` to `out`; returns `log Σ exp(row)` or `None` on a
/// non-finite row.
fn softmax_into<T: Real>(row: &[T], out: &mut Vec<T>) -> Option<T> {
    let mut max = T::neg_infinity();
    for &v in row {
        if v.is_nan() || v == T::infinity() {
            return None;
        }
        if v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        return None;
    }
    let start = out.len();
    let mut sum = T::zero();
    for &v in row {
        let e = (v - max).exp();
        sum += e;
        out.push(e);
    }
    for p in &mut out[start..] {
        *p /= sum;
    }
    Some(max + sum.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t64(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_gradient_of_sum() {
        // d/dA sum(A·B) at A=[[1,1]], B=[[2],[3]] is Bᵀ = [[2,3]].
        let a = t64(&[1, 2], &[1.0, 1.0]);
        let b = t64(&[2, 1], &[2.0, 3.0]);
        let mut tape = Tape::new();
        let av = tape.param(&a);
        let bv = tape.param(&b);
        let c = tape.matmul(av, bv).unwrap();
        let grads = tape.backward(c).unwrap();
        assert_eq!(grads.get(av).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(grads.get(bv).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.constant(t64(&[1, 2], &[1000.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] >= 0.0 && d[1] < 1e-300);

        let x = tape.constant(t64(&[1, 3], &[2f64.ln(), 0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        let want = [0.5, 0.25, 0.25];
        for (p, w) in tape.value(y).data().iter().zip(want) {
            assert!((p - w).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 2], &[f64::NAN, 0.0]));
        assert_eq!(
            tape.softmax_rows(x).unwrap_err(),
            TensorError::NonFinite { op: "softmax_rows" }
        );
    }

    #[test]
    fn layernorm_examples() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::filled(vec![4], 1.0));
        let b = tape.constant(Tensor::zeros(vec![4]));
        let x = tape.constant(t64(&[1, 4], &[5.0; 4]));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);

        let g = tape.constant(Tensor::filled(vec![2], 1.0));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let x = tape.constant(t64(&[1, 2], &[1.0, -1.0]));
        let y = tape.layernorm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);
    }

    #[test]
    fn relu_cross_entropy_dropout_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2], &[-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

        let s = tape.constant(Tensor::zeros(vec![3, 8]));
        let l = tape.cross_entropy(s, &[0, 5, 7]).unwrap();
        assert!((tape.value(l).data()[0] - 8f64.ln()).abs() < 1e-12);

        let bad = tape.cross_entropy(s, &[0, 8, 1]).unwrap_err();
        assert!(matches!(bad, TensorError::IndexOutOfRange { index: 8, bound: 8, .. }));

        let x = tape.constant(t64(&[1, 3], &[0.3, -1.5, 2.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let y = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dropout_zeroes_and_rescales() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(vec![100, 100], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = tape.dropout(x, 0.25, true, &mut rng).unwrap();
        let d = tape.value(y).data();
        let zeros = d.iter().filter(|&&v| v == 0.0).count();
        assert!(d.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
        let frac = zeros as f64 / d.len() as f64;
        assert!((frac - 0.25).abs() < 0.02, "dropped fraction {frac}");
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![3, 3]));
        let m = tape.causal_mask(x).unwrap();
        let p = tape.softmax_rows(m).unwrap();
        let d = tape.value(p).data();
        assert_eq!(&d[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&d[3..6], &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn shared_leaf_accumulates_gradient() {
        let w = t64(&[1, 1], &[3.0]);
        let mut tape = Tape::new();
        let v = tape.param(&w);
        let y = tape.add(v, v).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[2.0]);
    }

    #[test]
    fn unreachable_param_has_no_gradient() {
        let w = t64(&[1], &[3.0]);
        let u = t64(&[1], &[1.0]);
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let uv = tape.param(&u);
        let y = tape.scale(wv, 2.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(wv).unwrap().data(), &[2.0]);
        assert!(grads.get(uv).is_none());
    }
}
