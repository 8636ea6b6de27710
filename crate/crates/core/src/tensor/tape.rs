use rand::Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::{check_shape, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        bias: Var,
    },
    Scale(Var, T),
    /// Derivative cached from the forward pass.
    Gelu {
        a: Var,
        deriv: Vec<T>,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Transpose(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is already a topological
/// order, so `backward` is one reverse sweep. Gradients from repeated
/// `backward` calls accumulate until [`Tape::zero_grad`].
pub struct Tape<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, tensor: Tensor<T>, requires_grad: bool) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same
    /// node so all uses share one gradient accumulator.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.params.expect("tape was created without a parameter store");
        let shape = store.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        value_of(&self.nodes, self.params, v)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v), self.data(v).to_vec()).expect("tape node shape invariant")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient, if `backward` reached this node.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v), g.to_vec()).expect("grad shape invariant"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Head-major attention weights `[heads, T, T]` recorded by
    /// [`Tape::attention`].
    pub fn attention_probs(&self, v: Var) -> Option<(usize, usize, &[T])> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, .. } => Some((*heads, self.nodes[v.0].shape[0], probs)),
            _ => None,
        }
    }

    /// Gradients of every parameter that entered this tape.
    pub fn param_gradients(&self) -> Gradients<T> {
        let n = self.params.map_or(0, ParamStore::len);
        let mut out = vec![None; n];
        for (i, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = self.grad(*v) {
                    out[i] = Some(g.to_vec());
                }
            }
        }
        Gradients::from_parts(out)
    }

    // ----- operations -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `b` stored as `[.., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k) = (sa[ra - 2], sa[ra - 1]);
        let (kb, n) = if trans_b {
            (sb[rb - 1], sb[rb - 2])
        } else {
            (sb[rb - 2], sb[rb - 1])
        };
        let batch_dims = &sa[..ra - 2];
        let b_batched = rb > 2;
        if k != kb || (b_batched && batch_dims != &sb[..rb - 2]) {
            return Err(err());
        }
        let batch: usize = batch_dims.iter().product();
        let mut shape = batch_dims.to_vec();
        shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.data(a);
            let bv = self.data(b);
            let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            for bi in 0..batch {
                let boff = if b_batched { bi * k * n } else { 0 };
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &av[bi * m * k..],
                    (k as isize, 1),
                    &bv[boff..],
                    b_strides,
                    T::zero(),
                    &mut out[bi * m * n..],
                    (n as isize, 1),
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
                trans_b,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// Adds a `[d]` (or `[1, d]`) bias to every row of `a: [.., d]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(a).last().unwrap();
        if self.data(bias).len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bv = self.data(bias);
        let out: Vec<T> = self
            .data(a)
            .chunks(d)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &b)| x + b))
            .collect();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow { a, bias }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.data(a).iter().map(|&x| x * factor).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, factor), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let rg = self.rg(a);
        let (out, deriv): (Vec<T>, Vec<T>) = self.data(a).iter().map(|&x| gelu(x)).unzip();
        let deriv = if rg { deriv } else { Vec::new() };
        self.push(self.shape(a).to_vec(), out, Op::Gelu { a, deriv }, rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.data(a).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                softmax_strided(&mut out, base, len, inner);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Softmax { a, outer, len, inner }, rg))
    }

    /// Normalizes each `[d]` row to zero mean / unit variance, then applies
    /// `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        for p in [gain, bias] {
            if self.data(p).len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let xv = self.data(x);
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (h, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
        }
        let gv = self.data(gain);
        let bv = self.data(bias);
        let out = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(gv.iter().zip(bv)).map(|(&h, (&g, &b))| h * g + b))
            .collect();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            shape,
            out,
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

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits: [batch, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                size: c,
            });
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0f64;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += (lse - row[label]).as_f64();
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let loss = T::from_f64(total / labels.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// Column means of `a: [rows, cols]`, returned as `[1, cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Invalid(format!(
                "mean_rows expects a matrix, got {shape:?}"
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut out = vec![T::zero(); cols];
        for row in self.data(a).chunks(cols) {
            out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
        }
        let inv = T::from_f64(1.0 / rows as f64);
        out.iter_mut().for_each(|x| *x *= inv);
        let rg = self.rg(a);
        Ok(self.push(vec![1, cols], out, Op::MeanRows(a), rg))
    }

    /// Stacks matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows of nothing".into()))?;
        let cols = self.shape(first)[self.shape(first).len() - 1];
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || len == 0 || start + len > shape[0] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                size: shape[0],
            });
        }
        let cols = shape[1];
        let out = self.data(a)[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![len, cols], out, Op::SliceRows { a, start }, rg))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || width == 0 || start + width > shape[1] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + width,
                size: *shape.last().unwrap(),
            });
        }
        let cols = shape[1];
        let out = self
            .data(a)
            .chunks(cols)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(vec![shape[0], width], out, Op::SliceCols { a, start }, rg))
    }

    /// Row lookup `table[ids]` → `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || ids.is_empty() {
            return Err(TensorError::Invalid(format!(
                "gather expects a [rows, d] table and at least one id, got {shape:?}"
            )));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather",
                index: bad,
                size: rows,
            });
        }
        let tv = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.data(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Invalid(format!(
                "transpose expects a matrix, got {shape:?}"
            )));
        }
        let (r, c) = (shape[0], shape[1]);
        let av = self.data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    /// Unmasked scaled dot-product attention over `heads` column blocks of
    /// `q, k, v: [T, d]`. Weights are kept for inspection.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: shape,
                rhs: self.shape(k).to_vec(),
            });
        }
        let (t, d) = (shape[0], shape[1]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); heads * t * t];
        let mut out = vec![T::zero(); t * d];
        {
            let (qv, kv, vv) = (self.data(q), self.data(k), self.data(v));
            let di = d as isize;
            for h in 0..heads {
                let o = h * dh;
                let p = &mut probs[h * t * t..(h + 1) * t * t];
                T::gemm(
                    t,
                    dh,
                    t,
                    scale,
                    &qv[o..],
                    (di, 1),
                    &kv[o..],
                    (1, di),
                    T::zero(),
                    p,
                    (t as isize, 1),
                );
                for r in 0..t {
                    softmax_strided(p, r * t, t, 1);
                }
                T::gemm(
                    t,
                    t,
                    dh,
                    T::one(),
                    p,
                    (t as isize, 1),
                    &vv[o..],
                    (di, 1),
                    T::zero(),
                    &mut out[o..],
                    (di, 1),
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(shape, out, Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.data(a).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Dropout { a, mask }, rg)
    }

    // ----- reverse sweep ----------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        if self.grads.len() < grads.len() {
            self.grads.resize_with(grads.len(), || None);
        }
        for (dst, src) in self.grads.iter_mut().zip(grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(&src).for_each(|(a, &b)| *a += b),
                    None => *dst = Some(src),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let params = self.params;
        let val = |v: Var| value_of(nodes, params, v);
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].requires_grad {
                let n = val(v).len();
                let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
                f(buf);
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
                trans_b,
            } => {
                let (av, bv) = (val(a), val(b));
                let (ki, ni) = (k as isize, n as isize);
                acc(a, &mut |da| {
                    let bt = if trans_b { (ki, 1) } else { (1, ni) };
                    for bi in 0..batch {
                        let boff = if b_batched { bi * k * n } else { 0 };
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[bi * m * n..],
                            (ni, 1),
                            &bv[boff..],
                            bt,
                            T::one(),
                            &mut da[bi * m * k..],
                            (ki, 1),
                        );
                    }
                });
                acc(b, &mut |db| {
                    for bi in 0..batch {
                        let boff = if b_batched { bi * k * n } else { 0 };
                        if trans_b {
                            T::gemm(
                                n,
                                m,
                                k,
                                T::one(),
                                &g[bi * m * n..],
                                (1, ni),
                                &av[bi * m * k..],
                                (ki, 1),
                                T::one(),
                                &mut db[boff..],
                                (ki, 1),
                            );
                        } else {
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                &av[bi * m * k..],
                                (1, ki),
                                &g[bi * m * n..],
                                (ni, 1),
                                T::one(),
                                &mut db[boff..],
                                (ni, 1),
                            );
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |d| {
                    d.iter_mut().zip(g.iter().zip(bv)).for_each(|(x, (&y, &w))| *x += y * w)
                });
                acc(b, &mut |d| {
                    d.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (&y, &w))| *x += y * w)
                });
            }
            &Op::AddRow { a, bias } => {
                acc(a, &mut |d| add_into(d, g));
                acc(bias, &mut |d| {
                    let w = d.len();
                    for row in g.chunks(w) {
                        add_into(d, row);
                    }
                });
            }
            &Op::Scale(a, f) => acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y * f)),
            Op::Gelu { a, deriv } => {
                acc(*a, &mut |d| {
                    d.iter_mut()
                        .zip(g.iter().zip(deriv))
                        .for_each(|(x, (&y, &z))| *x += y * z)
                });
            }
            &Op::Softmax { a, outer, len, inner } => {
                let y = val(Var(i));
                acc(a, &mut |d| {
                    for o in 0..outer {
                        for c in 0..inner {
                            let base = o * len * inner + c;
                            let mut dot = T::zero();
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot += g[idx] * y[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                d[idx] += y[idx] * (g[idx] - dot);
                            }
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
                let gv = val(*gain);
                let dm = gv.len();
                let inv_d = T::from_f64(1.0 / dm as f64);
                acc(*x, &mut |dx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gy = &g[r * dm..(r + 1) * dm];
                        let xh = &xhat[r * dm..(r + 1) * dm];
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..dm {
                            let dxh = gy[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        for j in 0..dm {
                            let dxh = gy[j] * gv[j];
                            dx[r * dm + j] += rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for (gy, xh) in g.chunks(dm).zip(xhat.chunks(dm)) {
                        dg.iter_mut()
                            .zip(gy.iter().zip(xh))
                            .for_each(|(o, (&a, &b))| *o += a * b);
                    }
                });
                acc(*bias, &mut |db| {
                    for gy in g.chunks(dm) {
                        add_into(db, gy);
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = probs.len() / labels.len();
                let scale = g[0] * T::from_f64(1.0 / labels.len() as f64);
                acc(*logits, &mut |d| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            d[r * c + j] += (probs[r * c + j] - onehot) * scale;
                        }
                    }
                });
            }
            &Op::Sum(a) => acc(a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            &Op::MeanRows(a) => {
                let cols = g.len();
                acc(a, &mut |d| {
                    let inv = T::from_f64(cols as f64 / d.len() as f64);
                    for row in d.chunks_mut(cols) {
                        row.iter_mut().zip(g).for_each(|(x, &y)| *x += y * inv);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, &mut |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            &Op::SliceRows { a, start } => {
                let cols = nodes[i].shape[1];
                acc(a, &mut |d| add_into(&mut d[start * cols..start * cols + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let rows = nodes[i].shape[0];
                let total = nodes[i].shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    acc(p, &mut |d| {
                        for r in 0..rows {
                            add_into(&mut d[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            &Op::SliceCols { a, start } => {
                let width = nodes[i].shape[1];
                let cols = nodes[a.0].shape[1];
                acc(a, &mut |d| {
                    for (r, gr) in g.chunks(width).enumerate() {
                        add_into(&mut d[r * cols + start..r * cols + start + width], gr);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let dm = nodes[table.0].shape[1];
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * dm..(id + 1) * dm], &g[r * dm..(r + 1) * dm]);
                    }
                });
            }
            &Op::Reshape(a) => acc(a, &mut |d| add_into(d, g)),
            &Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                acc(a, &mut |d| {
                    for x in 0..r {
                        for y in 0..c {
                            d[x * c + y] += g[y * r + x];
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (t, dm) = (nodes[i].shape[0], nodes[i].shape[1]);
                let dh = dm / heads;
                let di = dm as isize;
                let ti = t as isize;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut dq = vec![T::zero(); t * dm];
                let mut dk = vec![T::zero(); t * dm];
                let mut dv = vec![T::zero(); t * dm];
                let mut dp = vec![T::zero(); t * t];
                for h in 0..*heads {
                    let o = h * dh;
                    let p = &probs[h * t * t..(h + 1) * t * t];
                    T::gemm(
                        t,
                        dh,
                        t,
                        T::one(),
                        &g[o..],
                        (di, 1),
                        &vv[o..],
                        (1, di),
                        T::zero(),
                        &mut dp,
                        (ti, 1),
                    );
                    T::gemm(
                        t,
                        t,
                        dh,
                        T::one(),
                        p,
                        (1, ti),
                        &g[o..],
                        (di, 1),
                        T::one(),
                        &mut dv[o..],
                        (di, 1),
                    );
                    for r in 0..t {
                        let row = r * t..(r + 1) * t;
                        let dot: T = dp[row.clone()].iter().zip(&p[row.clone()]).map(|(&a, &b)| a * b).sum();
                        for j in row {
                            dp[j] = p[j] * (dp[j] - dot);
                        }
                    }
                    T::gemm(
                        t,
                        t,
                        dh,
                        scale,
                        &dp,
                        (ti, 1),
                        &kv[o..],
                        (di, 1),
                        T::one(),
                        &mut dq[o..],
                        (di, 1),
                    );
                    T::gemm(
                        t,
                        t,
                        dh,
                        scale,
                        &dp,
                        (1, ti),
                        &qv[o..],
                        (di, 1),
                        T::one(),
                        &mut dk[o..],
                        (di, 1),
                    );
                }
                acc(*q, &mut |d| add_into(d, &dq));
                acc(*k, &mut |d| add_into(d, &dk));
                acc(*v, &mut |d| add_into(d, &dv));
            }
            Op::Dropout { a, mask } => {
                acc(*a, &mut |d| {
                    d.iter_mut()
                        .zip(g.iter().zip(mask))
                        .for_each(|(x, (&y, &m))| *x += y * m)
                });
            }
        }
    }
}

fn value_of<'a, T: Scalar>(nodes: &'a [Node<T>], params: Option<&'a ParamStore<T>>, v: Var) -> &'a [T] {
    match &nodes[v.0].value {
        Value::Owned(d) => d,
        Value::Param(id) => params.expect("parameter node without store").get(*id).data(),
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

fn softmax_strided<T: Scalar>(buf: &mut [T], base: usize, len: usize, stride: usize) {
    let mut max = T::neg_infinity();
    for j in 0..len {
        max = max.max(buf[base + j * stride]);
    }
    let mut total = T::zero();
    for j in 0..len {
        let e = (buf[base + j * stride] - max).exp();
        buf[base + j * stride] = e;
        total += e;
    }
    let inv = T::one() / total;
    for j in 0..len {
        buf[base + j * stride] *= inv;
    }
}

/// GELU value and derivative (tanh form).
#[inline]
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let value = half * x * (T::one() + th);
    let deriv = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x);
    (value, deriv)
}
