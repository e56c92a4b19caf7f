use std::collections::HashMap;

use super::kernels::{gelu, gelu_grad, mm_nn, mm_nt, mm_tn, sigmoid, softmax_row};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Softmax {
        x: Var,
        temperature: T,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        /// Key rows visible to each query row, as `(start, len)`.
        spans: Vec<(usize, usize)>,
        /// Prefix sums of span lengths; weights of head `h`, row `i` live at
        /// `probs[h * total + offsets[i]..][..len_i]`.
        offsets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations in execution order so the chain rule can be replayed
/// backwards. One tape per forward pass; tapes are not shared across threads.
pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Result of a backward pass: gradients for trainable parameters and for
/// leaves created with [`Tape::input_with_grad`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<Var, Vec<T>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.leaves.get(&var).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> &[(ParamId, Vec<T>)] {
        &self.params
    }

    /// Adds every parameter gradient into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in &self.params {
            store.get_mut(*id).accumulate_grad(g)?;
        }
        Ok(())
    }
}

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        dims(self.value(v))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn out(rows: usize, cols: usize, data: Vec<T>) -> Tensor<T> {
        Tensor::matrix(rows, cols, data).expect("op output shape is consistent")
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported through [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf referencing a stored parameter. Repeated calls return the same var,
    /// so every use of a parameter shares one gradient slot.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let trainable = self.params.get(id).trainable();
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        mm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Self::out(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Self::out(c, r, out), Op::Transpose(a), &[a])
    }

    /// Reinterprets the row-major values under a new `rows × cols` shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if rows * cols != t.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: vec![rows, cols],
            });
        }
        let out = t.data().to_vec();
        Ok(self.push(Self::out(rows, cols, out), Op::Reshape(a), &[a]))
    }

    /// Dot product of matching rows: `r × c` and `r × c` give `r × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, c) = self.same_shape("row_dot", a, b)?;
        let p = self.mul(a, b)?;
        let ones = self.input(Tensor::full(vec![c, 1], T::one()));
        self.matmul(p, ones)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::Shape {
                op,
                lhs: vec![da.0, da.1],
                rhs: vec![db.0, db.1],
            });
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(Self::out(r, c, out), Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(Self::out(r, c, out), Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(Self::out(r, c, out), Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).data().iter().map(|&x| x * s).collect();
        self.push(Self::out(r, c, out), Op::Scale(a, s), &[a])
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != c {
            return Err(Error::Shape {
                op: "add_row",
                lhs: vec![r, c],
                rhs: vec![rr, rc],
            });
        }
        let b = self.value(row).data();
        let out = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.push(Self::out(r, c, out), Op::AddRow(a, row), &[a, row]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        self.push(Self::out(r, c, out), Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        self.push(Self::out(r, c, out), Op::Sigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(Error::Degenerate("log of a non-positive value".into()));
        }
        let out = self.value(a).data().iter().map(|&x| x.ln()).collect();
        Ok(self.push(Self::out(r, c, out), Op::Log(a), &[a]))
    }

    /// Row-wise softmax of `a / temperature`.
    pub fn softmax(&mut self, a: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) {
            return Err(Error::Param(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let (r, c) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        out.chunks_mut(c).for_each(|row| softmax_row(row, temperature));
        Ok(self.push(
            Self::out(r, c, out),
            Op::Softmax { x: a, temperature },
            &[a],
        ))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both `1 × c`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::Param(format!("layer norm eps must be positive, got {eps}")));
        }
        let (r, c) = self.dims(x);
        for p in [gain, bias] {
            let d = self.dims(p);
            if d != (1, c) {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: vec![r, c],
                    rhs: vec![d.0, d.1],
                });
            }
        }
        let n = T::lit(c as f64);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in src.chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        Ok(self.push(
            Self::out(r, c, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Scales each row to unit L2 norm. A zero row is a degenerate input.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for (i, row) in src.chunks(c).enumerate() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > T::zero()) || !n.is_finite() {
                return Err(Error::Degenerate(format!(
                    "row {i} has zero or non-finite norm"
                )));
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        Ok(self.push(Self::out(r, c, out), Op::NormalizeRows { x, norms }, &[x]))
    }

    /// Cosine similarity between every row of `a` and every row of `b`: `ra × rb`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, ca) = self.dims(a);
        let (_, cb) = self.dims(b);
        if ca != cb {
            let (ra, rb) = (self.dims(a).0, self.dims(b).0);
            return Err(Error::Shape {
                op: "cosine",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let an = self.normalize_rows(a)?;
        let bn = self.normalize_rows(b)?;
        let bt = self.transpose(bn);
        self.matmul(an, bt)
    }

    /// Stacks along the token (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let c = self.dims(*first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: vec![r, pc],
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Self::out(rows, c, out), Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Stacks along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let r = self.dims(*first).0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![r, total],
                    rhs: vec![pr, pc],
                });
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        Ok(self.push(Self::out(r, total, out), Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r || len == 0 {
            return Err(Error::Index {
                index: start + len,
                len: r,
            });
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Self::out(len, c, out), Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c || len == 0 {
            return Err(Error::Index {
                index: start + len,
                len: c,
            });
        }
        let src = self.value(x).data();
        let out = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + len].iter().copied())
            .collect();
        Ok(self.push(Self::out(r, len, out), Op::SliceCols { x, start }, &[x]))
    }

    /// Gathers rows by index (embedding lookup). Gradients scatter-add back.
    pub fn select_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::Index { index: i, len: r });
            }
            out.extend_from_slice(self.value(x).row_slice(i));
        }
        if index.is_empty() {
            return Err(Error::Contract("select_rows with empty index".into()));
        }
        Ok(self.push(
            Self::out(index.len(), c, out),
            Op::SelectRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![r, c],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index { index: bad, len: c });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, (&t, raw)) in probs
            .chunks_mut(c)
            .zip(targets.iter().zip(self.value(logits).data().chunks(c)))
        {
            let max = raw
                .iter()
                .copied()
                .fold(T::neg_infinity(), |m, x| if x > m { x } else { m });
            let lse = raw.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            loss = loss + lse - raw[t];
            softmax_row(row, T::one());
        }
        loss = loss / T::lit(r as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean elementwise binary cross-entropy on logits, stable for large |z|.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let t = self.value(logits);
        if targets.len() != t.numel() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if targets.iter().any(|&y| y != T::zero() && y != T::one()) {
            return Err(Error::Validation("binary targets must be 0 or 1".into()));
        }
        let n = T::lit(t.numel() as f64);
        let loss = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum::<T>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Scaled dot-product attention over `heads` column groups.
    /// `q` is `r × w`, `k` and `v` are `l × w`; output is `r × w`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let r = self.dims(q).0;
        let l = self.dims(k).0;
        self.attention_spans(q, k, v, heads, &vec![(0, l); r])
    }

    /// Attention where query row `i` only sees key rows
    /// `spans[i].0 .. spans[i].0 + spans[i].1`. Lets many independent
    /// sequences share one node (block-diagonal attention).
    pub fn attention_spans(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        spans: &[(usize, usize)],
    ) -> Result<Var> {
        let (r, w) = self.dims(q);
        let (l, wk) = self.dims(k);
        let (lv, wv) = self.dims(v);
        if wk != w || wv != w || lv != l {
            return Err(Error::Shape {
                op: "attention",
                lhs: vec![r, w],
                rhs: vec![l, wk, lv, wv],
            });
        }
        if heads == 0 || w % heads != 0 {
            return Err(Error::Param(format!(
                "width {w} is not divisible into {heads} heads"
            )));
        }
        if spans.len() != r {
            return Err(Error::Shape {
                op: "attention spans",
                lhs: vec![r, w],
                rhs: vec![spans.len()],
            });
        }
        if let Some(&(start, len)) = spans.iter().find(|&&(s, n)| n == 0 || s + n > l) {
            return Err(Error::Index {
                index: start + len,
                len: l,
            });
        }
        let mut offsets = Vec::with_capacity(r + 1);
        offsets.push(0);
        for &(_, n) in spans {
            offsets.push(offsets.last().copied().unwrap_or(0) + n);
        }
        let total = offsets[r];
        let dh = w / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![T::zero(); heads * total];
        let mut out = vec![T::zero(); r * w];
        for h in 0..heads {
            let off = h * dh;
            for (i, &(start, len)) in spans.iter().enumerate() {
                let p = &mut probs[h * total + offsets[i]..h * total + offsets[i] + len];
                let qi = &qd[i * w + off..i * w + off + dh];
                for (jj, pj) in p.iter_mut().enumerate() {
                    let j = start + jj;
                    let kj = &kd[j * w + off..j * w + off + dh];
                    *pj = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                softmax_row(p, T::one());
                let oi = &mut out[i * w + off..i * w + off + dh];
                for (jj, &pj) in p.iter().enumerate() {
                    let j = start + jj;
                    let vj = &vd[j * w + off..j * w + off + dh];
                    oi.iter_mut().zip(vj).for_each(|(o, &x)| *o = *o + pj * x);
                }
            }
        }
        Ok(self.push(
            Self::out(r, w, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                spans: spans.to_vec(),
                offsets,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights recorded by an attention node, indexed
    /// `[head][query row]`; each entry covers that row's key span.
    pub fn attention_weights(&self, var: Var) -> Option<Vec<Vec<Vec<T>>>> {
        match &self.nodes[var.0].op {
            Op::Attention {
                heads,
                spans,
                offsets,
                probs,
                ..
            } => {
                let total = *offsets.last().unwrap_or(&0);
                Some(
                    (0..*heads)
                        .map(|h| {
                            spans
                                .iter()
                                .enumerate()
                                .map(|(i, &(_, len))| {
                                    probs[h * total + offsets[i]..h * total + offsets[i] + len].to_vec()
                                })
                                .collect()
                        })
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        self.backward_with(vec![(loss, vec![T::one()])])
    }

    /// Backpropagates from arbitrary seed gradients on several outputs.
    pub fn backward_with(&self, seeds: Vec<(Var, Vec<T>)>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut last = 0;
        for (v, g) in seeds {
            if g.len() != self.value(v).numel() {
                return Err(Error::Shape {
                    op: "backward seed",
                    lhs: self.value(v).shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            last = last.max(v.0);
            accumulate(&mut grads[v.0], g);
        }

        let mut leaves = HashMap::new();
        for i in (0..=last).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaves.insert(Var(i), g);
                continue;
            }
            self.backprop_node(i, g, &mut grads);
        }

        let mut params: Vec<(ParamId, Vec<T>)> = self
            .param_vars
            .iter()
            .filter(|(id, _)| self.params.get(**id).trainable())
            .filter_map(|(id, v)| leaves.remove(v).map(|g| (*id, g)))
            .collect();
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { leaves, params })
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if self.nodes[v.0].needs_grad {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn backprop_node(&self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.needs_grad(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    mm_nt(&g, self.value(*b).data(), &mut ga, m, n, k);
                    self.send(grads, *a, ga);
                }
                if self.needs_grad(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    mm_tn(self.value(*a).data(), &g, &mut gb, k, m, n);
                    self.send(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                self.send(grads, *a, ga);
            }
            Op::Reshape(a) => self.send(grads, *a, g),
            Op::Add(a, b) => {
                self.send(grads, *b, g.clone());
                self.send(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.send(grads, *b, g.iter().map(|&x| -x).collect());
                self.send(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs_grad(*a) {
                    self.send(grads, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if self.needs_grad(*b) {
                    self.send(grads, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => {
                self.send(grads, *a, g.iter().map(|&x| x * *s).collect());
            }
            Op::AddRow(a, row) => {
                if self.needs_grad(*row) {
                    let c = self.dims(*row).1;
                    let mut gr = vec![T::zero(); c];
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(s, &x)| *s = *s + x);
                    }
                    self.send(grads, *row, gr);
                }
                self.send(grads, *a, g);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.send(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(&d, &x)| d * gelu_grad(x)).collect(),
                );
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.send(
                    grads,
                    *a,
                    g.iter().zip(y).map(|(&d, &y)| d * y * (T::one() - y)).collect(),
                );
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.send(grads, *a, g.iter().zip(x).map(|(&d, &x)| d / x).collect());
            }
            Op::Softmax { x, temperature } => {
                let c = out.cols();
                let y = out.data();
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(g.chunks(c)) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    gx.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(&yi, &gi)| yi * (gi - dot) / *temperature),
                    );
                }
                self.send(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let gv = self.value(*gain).data();
                if self.needs_grad(*gain) {
                    let mut gg = vec![T::zero(); c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                    self.send(grads, *gain, gg);
                }
                if self.needs_grad(*bias) {
                    let mut gb = vec![T::zero(); c];
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(s, &v)| *s = *s + v);
                    }
                    self.send(grads, *bias, gb);
                }
                if self.needs_grad(*x) {
                    let n = T::lit(c as f64);
                    let mut gx = Vec::with_capacity(g.len());
                    for ((gr, hr), &is) in g.chunks(c).zip(xhat.chunks(c)).zip(inv_std) {
                        let dh: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let sum_dh = dh.iter().copied().sum::<T>();
                        let sum_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>();
                        gx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(&d, &h)| is / n * (n * d - sum_dh - h * sum_dh_h)),
                        );
                    }
                    self.send(grads, *x, gx);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let c = out.cols();
                let y = out.data();
                let mut gx = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.chunks(c).zip(g.chunks(c)).zip(norms) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    gx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| (gi - yi * dot) / n));
                }
                self.send(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.send(grads, p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let r = out.rows();
                let mut off = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if self.needs_grad(p) {
                        let gp = (0..r)
                            .flat_map(|i| g[i * total + off..i * total + off + pc].iter().copied())
                            .collect();
                        self.send(grads, p, gp);
                    }
                    off += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.dims(*x);
                let mut gx = vec![T::zero(); r * c];
                gx[start * c..start * c + g.len()].copy_from_slice(&g);
                self.send(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims(*x);
                let len = out.cols();
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.send(grads, *x, gx);
            }
            Op::SelectRows { x, index } => {
                let (r, c) = self.dims(*x);
                let mut gx = vec![T::zero(); r * c];
                for (k, &i) in index.iter().enumerate() {
                    gx[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[k * c..(k + 1) * c])
                        .for_each(|(s, &v)| *s = *s + v);
                }
                self.send(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.send(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.send(grads, *x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.dims(*logits).1;
                let scale = g[0] / T::lit(targets.len() as f64);
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    gx[row * c + t] = gx[row * c + t] - scale;
                }
                self.send(grads, *logits, gx);
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let scale = g[0] / T::lit(z.len() as f64);
                self.send(
                    grads,
                    *logits,
                    z.iter()
                        .zip(targets)
                        .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                        .collect(),
                );
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                spans,
                offsets,
                probs,
            } => {
                let (r, w) = self.dims(*q);
                let l = self.dims(*k).0;
                let total = offsets[r];
                let dh = w / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let qd = self.value(*q).data();
                let kd = self.value(*k).data();
                let vd = self.value(*v).data();
                let mut gq = vec![T::zero(); r * w];
                let mut gk = vec![T::zero(); l * w];
                let mut gv = vec![T::zero(); l * w];
                let mut ds = Vec::new();
                for h in 0..*heads {
                    let off = h * dh;
                    for (i, &(start, len)) in spans.iter().enumerate() {
                        let p = &probs[h * total + offsets[i]..h * total + offsets[i] + len];
                        let go = &g[i * w + off..i * w + off + dh];
                        // dP_j = go · v_j ; dV_j += p_j go
                        ds.clear();
                        let mut dot = T::zero();
                        for (jj, &pj) in p.iter().enumerate() {
                            let j = start + jj;
                            let vj = &vd[j * w + off..j * w + off + dh];
                            let dp = go.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                            ds.push(dp);
                            dot = dot + dp * pj;
                            gv[j * w + off..j * w + off + dh]
                                .iter_mut()
                                .zip(go)
                                .for_each(|(s, &x)| *s = *s + pj * x);
                        }
                        let qi = &qd[i * w + off..i * w + off + dh];
                        for (jj, &pj) in p.iter().enumerate() {
                            let d = pj * (ds[jj] - dot) * scale;
                            if d == T::zero() {
                                continue;
                            }
                            let j = start + jj;
                            let kj = &kd[j * w + off..j * w + off + dh];
                            gq[i * w + off..i * w + off + dh]
                                .iter_mut()
                                .zip(kj)
                                .for_each(|(s, &x)| *s = *s + d * x);
                            gk[j * w + off..j * w + off + dh]
                                .iter_mut()
                                .zip(qi)
                                .for_each(|(s, &x)| *s = *s + d * x);
                        }
                    }
                }
                self.send(grads, *q, gq);
                self.send(grads, *k, gk);
                self.send(grads, *v, gv);
            }
        }
    }
}
