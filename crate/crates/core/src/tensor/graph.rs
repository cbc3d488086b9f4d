//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node to the tape; `backward`
//! walks the tape in reverse and accumulates gradients into the inputs that
//! require them. Parameters enter the tape by reference so a forward pass
//! never copies weights.

use super::{Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a, T> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Sigmoid(Var),
    Softmax(Var),
    RsqrtMeanSquare(Var, T),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    IndexAddRows(Var, Var, Vec<usize>),
    GatherElems(Var, Vec<(usize, usize)>),
    Rope(Var, Vec<usize>),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
    },
    ConcatCols(Vec<Var>),
    MaskedMeanPool {
        x: Var,
        seq_len: usize,
        mask: Vec<bool>,
    },
    CrossEntropy(Var, Vec<Option<usize>>),
}

struct Node<'a, T> {
    value: Value<'a, T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Lifetime `'a` bounds borrowed parameter tensors.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
    flops: u64,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn rope_angle(pos: usize, pair: usize, width: usize) -> f64 {
    pos as f64 * 10000f64.powf(-2.0 * pair as f64 / width as f64)
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Softmax over causal scores for one query row; writes `t + 1` probabilities.
fn causal_row_probs<T: Scalar>(q: &[T], k: &[T], base: usize, t: usize, dm: usize, scale: T, out: &mut Vec<T>) {
    out.clear();
    let mut max = T::neg_infinity();
    for p in 0..=t {
        let kp = &k[(base + p) * dm..(base + p + 1) * dm];
        let s = dot(q, kp) * scale;
        if s > max {
            max = s;
        }
        out.push(s);
    }
    let mut sum = T::zero();
    for s in out.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in out.iter_mut() {
        *s /= sum;
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            flops: 0,
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-add FLOPs performed by matrix products and attention so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Bytes held by owned activations on the tape.
    pub fn activation_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.value {
                Value::Owned(t) => t.len() * std::mem::size_of::<T>(),
                Value::Borrowed(_) => 0,
            })
            .sum()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Trainable tensor borrowed for the lifetime of the tape.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.push_value(Value::Borrowed(t), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_value(Value::Owned(t), Op::Leaf, false)
    }

    /// Owned leaf that participates in differentiation (used by gradient checks).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.push_value(Value::Owned(t), Op::Leaf, requires_grad)
    }

    fn push_value(&mut self, value: Value<'a, T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, t: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        if cfg!(debug_assertions) && !t.all_finite() {
            assert!(
                inputs.iter().any(|v| !self.value(*v).all_finite()),
                "non-finite activation from finite inputs"
            );
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_value(Value::Owned(t), op, requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize), TensorError> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, k) = self.dims2(a)?;
        let (k2, m) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_mismatch("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            T::one(),
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (m, 1),
            T::zero(),
            &mut out,
            (m, 1),
        );
        self.flops += 2 * (n * k * m) as u64;
        let t = Tensor::new(&[n, m], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `[n, k] x [k] -> [n]`
    pub fn matvec(&mut self, a: Var, v: Var) -> Result<Var, TensorError> {
        let (n, k) = self.dims2(a)?;
        if self.value(v).shape() != [k] {
            return Err(shape_mismatch("matvec", self.value(a).shape(), self.value(v).shape()));
        }
        let av = self.value(a);
        let vv = self.value(v).data();
        let out: Vec<T> = (0..n).map(|r| dot(av.row(r), vv)).collect();
        self.flops += 2 * (n * k) as u64;
        let t = Tensor::new(&[n], out)?;
        Ok(self.push(t, Op::MatVec(a, v), &[a, v]))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(&self, name: &'static str, a: Var, b: Var) -> Result<(usize, usize), TensorError> {
        let (n, d) = self.dims2(a)?;
        if self.value(b).shape() != [d] {
            return Err(shape_mismatch(name, self.value(a).shape(), self.value(b).shape()));
        }
        Ok((n, d))
    }

    /// `[n, d] + [d]`, the vector added to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, d) = self.row_broadcast("add_row", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for r in 0..n {
            for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(bv) {
                *o += x;
            }
        }
        let t = Tensor::new(&[n, d], out)?;
        Ok(self.push(t, Op::AddRow(a, b), &[a, b]))
    }

    /// `[n, d] * [d]`, every row scaled feature-wise.
    pub fn mul_row(&mut self, a: Var, g: Var) -> Result<Var, TensorError> {
        let (n, d) = self.row_broadcast("mul_row", a, g)?;
        let gv = self.value(g).data();
        let mut out = self.value(a).data().to_vec();
        for r in 0..n {
            for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(gv) {
                *o *= x;
            }
        }
        let t = Tensor::new(&[n, d], out)?;
        Ok(self.push(t, Op::MulRow(a, g), &[a, g]))
    }

    /// `[n, d] * [n]`, row `r` scaled by `c[r]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var, TensorError> {
        let (n, d) = self.dims2(a)?;
        if self.value(c).shape() != [n] {
            return Err(shape_mismatch("mul_col", self.value(a).shape(), self.value(c).shape()));
        }
        let cv = self.value(c).data();
        let mut out = self.value(a).data().to_vec();
        for r in 0..n {
            for o in &mut out[r * d..(r + 1) * d] {
                *o *= cv[r];
            }
        }
        let t = Tensor::new(&[n, d], out)?;
        Ok(self.push(t, Op::MulCol(a, c), &[a, c]))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape(), data).expect("same length")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.map(a, |x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * sigmoid(x));
        self.push(t, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    /// Max-subtracted softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let d = *ta.shape().last().ok_or(TensorError::Rank {
            want: 1,
            shape: vec![],
        })?;
        let mut out = ta.data().to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                softmax_in_place(row);
            }
        }
        let t = Tensor::new(ta.shape(), out)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// `[n, d] -> [n]`: `1 / sqrt(mean(x^2) + eps)` per row.
    pub fn rsqrt_mean_square(&mut self, a: Var, eps: T) -> Result<Var, TensorError> {
        let (n, d) = self.dims2(a)?;
        let ta = self.value(a);
        let dn = T::c(d as f64);
        let out: Vec<T> = (0..n)
            .map(|r| {
                let ms = ta.row(r).iter().fold(T::zero(), |s, &x| s + x * x) / dn;
                T::one() / (ms + eps).sqrt()
            })
            .collect();
        let t = Tensor::new(&[n], out)?;
        Ok(self.push(t, Op::RsqrtMeanSquare(a, eps), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = T::c(ta.len().max(1) as f64);
        let s = ta.data().iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// `[n, d] -> [d]`: column means.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (n, d) = self.dims2(a)?;
        if n == 0 {
            return Err(TensorError::Empty("mean_rows"));
        }
        let ta = self.value(a);
        let mut out = vec![T::zero(); d];
        for r in 0..n {
            for (o, &x) in out.iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        let inv = T::one() / T::c(n as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let t = Tensor::new(&[d], out)?;
        Ok(self.push(t, Op::MeanRows(a), &[a]))
    }

    /// Rows of a `[v, d]` table selected by index (embedding lookup, expert dispatch).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = self.dims2(table)?;
        let tt = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(TensorError::Index { index: i, bound: v });
            }
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(&[idx.len(), d], out)?;
        Ok(self.push(t, Op::GatherRows(table, idx.to_vec()), &[table]))
    }

    /// `base` with `src[i]` added onto row `idx[i]` (expert combine).
    pub fn index_add_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (n, d) = self.dims2(base)?;
        let (m, d2) = self.dims2(src)?;
        if d != d2 || m != idx.len() {
            return Err(shape_mismatch("index_add_rows", self.value(base).shape(), self.value(src).shape()));
        }
        let mut out = self.value(base).data().to_vec();
        let sv = self.value(src);
        for (i, &r) in idx.iter().enumerate() {
            if r >= n {
                return Err(TensorError::Index { index: r, bound: n });
            }
            for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(sv.row(i)) {
                *o += x;
            }
        }
        let t = Tensor::new(&[n, d], out)?;
        Ok(self.push(t, Op::IndexAddRows(base, src, idx.to_vec()), &[base, src]))
    }

    /// Individual `(row, col)` entries of a rank-2 tensor as a vector.
    pub fn gather_elems(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var, TensorError> {
        let (n, d) = self.dims2(a)?;
        let ta = self.value(a).data();
        let mut out = Vec::with_capacity(at.len());
        for &(r, c) in at {
            if r >= n || c >= d {
                return Err(TensorError::Index {
                    index: r * d + c,
                    bound: n * d,
                });
            }
            out.push(ta[r * d + c]);
        }
        let t = Tensor::new(&[at.len()], out)?;
        Ok(self.push(t, Op::GatherElems(a, at.to_vec()), &[a]))
    }

    /// Rotary position embedding on `[n, w]` rows; pair `i` of row `r`
    /// is rotated by `positions[r] * 10000^(-2i/w)`.
    pub fn rope(&mut self, a: Var, positions: &[usize]) -> Result<Var, TensorError> {
        let (n, w) = self.dims2(a)?;
        if w % 2 != 0 {
            return Err(TensorError::OddRopeWidth(w));
        }
        if positions.len() != n {
            return Err(shape_mismatch("rope", self.value(a).shape(), &[positions.len()]));
        }
        let mut out = self.value(a).data().to_vec();
        rotate_rows(&mut out, w, positions, false);
        let t = Tensor::new(&[n, w], out)?;
        Ok(self.push(t, Op::Rope(a, positions.to_vec()), &[a]))
    }

    /// Causal scaled dot-product attention for one head over `rows / seq_len`
    /// stacked sequences of length `seq_len`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize) -> Result<Var, TensorError> {
        let (n, dm) = self.dims2(q)?;
        for other in [k, v] {
            if self.value(other).shape() != [n, dm] {
                return Err(shape_mismatch("causal_attention", &[n, dm], self.value(other).shape()));
            }
        }
        if seq_len == 0 || n % seq_len != 0 {
            return Err(TensorError::SeqLen { rows: n, seq_len });
        }
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let scale = T::one() / T::c(dm as f64).sqrt();
        let mut out = vec![T::zero(); n * dm];
        let mut probs = Vec::with_capacity(seq_len);
        for base in (0..n).step_by(seq_len) {
            for t in 0..seq_len {
                let row = base + t;
                causal_row_probs(&qv[row * dm..(row + 1) * dm], kv, base, t, dm, scale, &mut probs);
                let o = &mut out[row * dm..(row + 1) * dm];
                for (p, &w) in probs.iter().enumerate() {
                    axpy(w, &vv[(base + p) * dm..(base + p + 1) * dm], o);
                }
            }
        }
        let pairs = (seq_len * (seq_len + 1) / 2) as u64;
        self.flops += 4 * dm as u64 * pairs * (n / seq_len) as u64;
        let t = Tensor::new(&[n, dm], out)?;
        Ok(self.push(t, Op::CausalAttention { q, k, v, seq_len }, &[q, k, v]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let (n, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != n {
                return Err(shape_mismatch("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(&[n, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean over the valid rows of each stacked sequence: `[b*seq_len, d] -> [b, d]`.
    pub fn masked_mean_pool(&mut self, x: Var, seq_len: usize, mask: &[bool]) -> Result<Var, TensorError> {
        let (n, d) = self.dims2(x)?;
        if seq_len == 0 || n % seq_len != 0 || mask.len() != n {
            return Err(TensorError::SeqLen { rows: n, seq_len });
        }
        let b = n / seq_len;
        let tx = self.value(x);
        let mut out = vec![T::zero(); b * d];
        for s in 0..b {
            let rows = (s * seq_len..(s + 1) * seq_len).filter(|&r| mask[r]);
            let mut count = 0usize;
            let o = &mut out[s * d..(s + 1) * d];
            for r in rows {
                axpy(T::one(), tx.row(r), o);
                count += 1;
            }
            if count == 0 {
                return Err(TensorError::Empty("masked_mean_pool sequence"));
            }
            let inv = T::one() / T::c(count as f64);
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::new(&[b, d], out)?;
        Ok(self.push(
            t,
            Op::MaskedMeanPool {
                x,
                seq_len,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean negative log-softmax likelihood over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, TensorError> {
        let (n, v) = self.dims2(logits)?;
        if targets.len() != n {
            return Err(shape_mismatch("cross_entropy", &[n, v], &[targets.len()]));
        }
        let tl = self.value(logits);
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, tgt) in targets.iter().enumerate() {
            if let Some(c) = *tgt {
                if c >= v {
                    return Err(TensorError::Index { index: c, bound: v });
                }
                let row = tl.row(r);
                total += log_sum_exp(row) - row[c];
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::Empty("cross_entropy targets"));
        }
        let t = Tensor::scalar(total / T::c(count as f64));
        Ok(self.push(t, Op::CrossEntropy(logits, targets.to_vec()), &[logits]))
    }

    /// Accumulates `d loss / d node` for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Rank {
                want: 0,
                shape: self.value(loss).shape().to_vec(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // Node values are read while gradient slots are written; both vectors
        // are moved out for the duration so the borrows stay disjoint.
        let nodes = std::mem::take(&mut self.nodes);
        let val = |v: Var| nodes[v.0].value.get();
        let out = nodes[i].value.get();
        let mut grads = std::mem::take(&mut self.grads);
        {
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let len = nodes[v.0].value.get().len();
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
                f(slot);
            };
            match &nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (n, k) = val(*a).dims2().expect("rank 2");
                    let m = val(*b).shape()[1];
                    let (ad, bd) = (val(*a).data(), val(*b).data());
                    acc(*a, &mut |ga| {
                        // dA = G * B^T
                        T::gemm(n, m, k, T::one(), g, (m, 1), bd, (1, m), T::one(), ga, (k, 1));
                    });
                    acc(*b, &mut |gb| {
                        // dB = A^T * G
                        T::gemm(k, n, m, T::one(), ad, (1, k), g, (m, 1), T::one(), gb, (m, 1));
                    });
                }
                Op::MatVec(a, v) => {
                    let (n, k) = val(*a).dims2().expect("rank 2");
                    let (ad, vd) = (val(*a).data(), val(*v).data());
                    acc(*a, &mut |ga| {
                        for r in 0..n {
                            axpy(g[r], vd, &mut ga[r * k..(r + 1) * k]);
                        }
                    });
                    acc(*v, &mut |gv| {
                        for r in 0..n {
                            axpy(g[r], &ad[r * k..(r + 1) * k], gv);
                        }
                    });
                }
                Op::Add(a, b) => {
                    for x in [*a, *b] {
                        acc(x, &mut |gx| axpy(T::one(), g, gx));
                    }
                }
                Op::AddRow(a, b) => {
                    let d = val(*b).len();
                    acc(*a, &mut |ga| axpy(T::one(), g, ga));
                    acc(*b, &mut |gb| {
                        for row in g.chunks(d) {
                            axpy(T::one(), row, gb);
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (val(*a).data(), val(*b).data());
                    acc(*a, &mut |ga| {
                        for j in 0..ga.len() {
                            ga[j] += g[j] * bd[j];
                        }
                    });
                    acc(*b, &mut |gb| {
                        for j in 0..gb.len() {
                            gb[j] += g[j] * ad[j];
                        }
                    });
                }
                Op::MulRow(a, w) => {
                    let d = val(*w).len();
                    let (ad, wd) = (val(*a).data(), val(*w).data());
                    acc(*a, &mut |ga| {
                        for (j, gj) in ga.iter_mut().enumerate() {
                            *gj += g[j] * wd[j % d];
                        }
                    });
                    acc(*w, &mut |gw| {
                        for (j, (&gj, &aj)) in g.iter().zip(ad).enumerate() {
                            gw[j % d] += gj * aj;
                        }
                    });
                }
                Op::MulCol(a, c) => {
                    let n = val(*c).len();
                    let d = val(*a).len().checked_div(n).unwrap_or(0);
                    let (ad, cd) = (val(*a).data(), val(*c).data());
                    acc(*a, &mut |ga| {
                        for r in 0..n {
                            axpy(cd[r], &g[r * d..(r + 1) * d], &mut ga[r * d..(r + 1) * d]);
                        }
                    });
                    acc(*c, &mut |gc| {
                        for r in 0..n {
                            gc[r] += dot(&g[r * d..(r + 1) * d], &ad[r * d..(r + 1) * d]);
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, &mut |ga| axpy(c, g, ga));
                }
                Op::Silu(a) => {
                    let ad = val(*a).data();
                    acc(*a, &mut |ga| {
                        for j in 0..ga.len() {
                            let s = sigmoid(ad[j]);
                            ga[j] += g[j] * s * (T::one() + ad[j] * (T::one() - s));
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let od = out.data();
                    acc(*a, &mut |ga| {
                        for j in 0..ga.len() {
                            ga[j] += g[j] * od[j] * (T::one() - od[j]);
                        }
                    });
                }
                Op::Softmax(a) => {
                    let od = out.data();
                    let d = *out.shape().last().unwrap_or(&1);
                    acc(*a, &mut |ga| {
                        for ((gr, orow), gar) in g.chunks(d).zip(od.chunks(d)).zip(ga.chunks_mut(d)) {
                            let inner = dot(gr, orow);
                            for j in 0..d {
                                gar[j] += orow[j] * (gr[j] - inner);
                            }
                        }
                    });
                }
                Op::RsqrtMeanSquare(a, _) => {
                    let (n, d) = val(*a).dims2().expect("rank 2");
                    let (ad, od) = (val(*a).data(), out.data());
                    let dn = T::c(d as f64);
                    acc(*a, &mut |ga| {
                        // y = (ms + eps)^(-1/2); dy/dx_j = -y^3 x_j / d
                        for r in 0..n {
                            let coef = -g[r] * od[r] * od[r] * od[r] / dn;
                            axpy(coef, &ad[r * d..(r + 1) * d], &mut ga[r * d..(r + 1) * d]);
                        }
                    });
                }
                Op::Sum(a) => {
                    acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
                }
                Op::Mean(a) => {
                    let n = T::c(val(*a).len().max(1) as f64);
                    acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
                }
                Op::MeanRows(a) => {
                    let (n, d) = val(*a).dims2().expect("rank 2");
                    let inv = T::one() / T::c(n as f64);
                    acc(*a, &mut |ga| {
                        for r in 0..n {
                            axpy(inv, g, &mut ga[r * d..(r + 1) * d]);
                        }
                    });
                }
                Op::GatherRows(table, idx) => {
                    let d = val(*table).shape()[1];
                    acc(*table, &mut |gt| {
                        for (i, &r) in idx.iter().enumerate() {
                            axpy(T::one(), &g[i * d..(i + 1) * d], &mut gt[r * d..(r + 1) * d]);
                        }
                    });
                }
                Op::IndexAddRows(base, src, idx) => {
                    let d = val(*base).shape()[1];
                    acc(*base, &mut |gb| axpy(T::one(), g, gb));
                    acc(*src, &mut |gs| {
                        for (i, &r) in idx.iter().enumerate() {
                            axpy(T::one(), &g[r * d..(r + 1) * d], &mut gs[i * d..(i + 1) * d]);
                        }
                    });
                }
                Op::GatherElems(a, at) => {
                    let d = val(*a).shape()[1];
                    acc(*a, &mut |ga| {
                        for (i, &(r, c)) in at.iter().enumerate() {
                            ga[r * d + c] += g[i];
                        }
                    });
                }
                Op::Rope(a, positions) => {
                    let w = val(*a).shape()[1];
                    acc(*a, &mut |ga| {
                        let mut back = g.to_vec();
                        rotate_rows(&mut back, w, positions, true);
                        axpy(T::one(), &back, ga);
                    });
                }
                Op::CausalAttention { q, k, v, seq_len } => {
                    let (n, dm) = val(*q).dims2().expect("rank 2");
                    let seq_len = *seq_len;
                    let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                    let scale = T::one() / T::c(dm as f64).sqrt();
                    let mut gq = vec![T::zero(); n * dm];
                    let mut gk = vec![T::zero(); n * dm];
                    let mut gv = vec![T::zero(); n * dm];
                    let mut probs = Vec::with_capacity(seq_len);
                    let mut dp = Vec::with_capacity(seq_len);
                    for base in (0..n).step_by(seq_len) {
                        for t in 0..seq_len {
                            let row = base + t;
                            let qrow = &qd[row * dm..(row + 1) * dm];
                            causal_row_probs(qrow, kd, base, t, dm, scale, &mut probs);
                            let go = &g[row * dm..(row + 1) * dm];
                            dp.clear();
                            for (p, &w) in probs.iter().enumerate() {
                                let prow = base + p;
                                dp.push(dot(go, &vd[prow * dm..(prow + 1) * dm]));
                                axpy(w, go, &mut gv[prow * dm..(prow + 1) * dm]);
                            }
                            let inner = dot(&probs, &dp);
                            for (p, &w) in probs.iter().enumerate() {
                                let ds = w * (dp[p] - inner) * scale;
                                let prow = base + p;
                                axpy(ds, &kd[prow * dm..(prow + 1) * dm], &mut gq[row * dm..(row + 1) * dm]);
                                axpy(ds, qrow, &mut gk[prow * dm..(prow + 1) * dm]);
                            }
                        }
                    }
                    acc(*q, &mut |s| axpy(T::one(), &gq, s));
                    acc(*k, &mut |s| axpy(T::one(), &gk, s));
                    acc(*v, &mut |s| axpy(T::one(), &gv, s));
                }
                Op::ConcatCols(parts) => {
                    let total = out.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let (n, w) = val(p).dims2().expect("rank 2");
                        acc(p, &mut |gp| {
                            for r in 0..n {
                                axpy(
                                    T::one(),
                                    &g[r * total + offset..r * total + offset + w],
                                    &mut gp[r * w..(r + 1) * w],
                                );
                            }
                        });
                        offset += w;
                    }
                }
                Op::MaskedMeanPool { x, seq_len, mask } => {
                    let d = out.shape()[1];
                    let seq_len = *seq_len;
                    acc(*x, &mut |gx| {
                        for (s, gs) in g.chunks(d).enumerate() {
                            let rows: Vec<usize> = (s * seq_len..(s + 1) * seq_len).filter(|&r| mask[r]).collect();
                            let inv = T::one() / T::c(rows.len() as f64);
                            for r in rows {
                                axpy(inv, gs, &mut gx[r * d..(r + 1) * d]);
                            }
                        }
                    });
                }
                Op::CrossEntropy(logits, targets) => {
                    let tl = val(*logits);
                    let v = tl.shape()[1];
                    let count = targets.iter().filter(|t| t.is_some()).count();
                    let coef = g[0] / T::c(count as f64);
                    acc(*logits, &mut |gl| {
                        for (r, tgt) in targets.iter().enumerate() {
                            let Some(c) = *tgt else { continue };
                            let row = tl.row(r);
                            let lse = log_sum_exp(row);
                            let gr = &mut gl[r * v..(r + 1) * v];
                            for j in 0..v {
                                gr[j] += coef * (row[j] - lse).exp();
                            }
                            gr[c] -= coef;
                        }
                    });
                }
            }
        }
        self.grads = grads;
        self.nodes = nodes;
    }
}

fn rotate_rows<T: Scalar>(data: &mut [T], w: usize, positions: &[usize], inverse: bool) {
    for (r, &pos) in positions.iter().enumerate() {
        let row = &mut data[r * w..(r + 1) * w];
        for i in 0..w / 2 {
            let angle = rope_angle(pos, i, w);
            let (s, c) = angle.sin_cos();
            let (s, c) = (T::c(if inverse { -s } else { s }), T::c(c));
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x0 * c - x1 * s;
            row[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}
