//! Arena tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the indices
//! of its inputs. [`Tape::backward`] walks the arena in reverse creation
//! order, so each tracked node is visited once and gradients from repeated
//! uses of a value sum.

use std::cell::{Ref, RefCell};

use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

/// Guard added to norms in [`Tape::cosine_sim`].
pub const COSINE_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Softplus,
    Sin,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, batch: usize, rows: usize, cols: usize },
    Reshape { a: usize },
    Binary { kind: BinaryKind, a: usize, b: usize },
    Scale { a: usize, c: S },
    AddScalar { a: usize },
    Unary { kind: UnaryKind, a: usize },
    Clamp { a: usize, lo: Option<S>, hi: Option<S> },
    Sum { a: usize },
    SumAxis { a: usize, outer: usize, len: usize, inner: usize },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    L2Norm { a: usize, outer: usize, len: usize, inner: usize },
    Concat { parts: Vec<(usize, usize)>, outer: usize, inner: usize },
    GatherRows { a: usize, idx: Vec<usize>, cols: usize },
    ScatterAddRows { a: usize, idx: Vec<usize>, cols: usize },
    ScatterRows { base: usize, rows: usize, idx: Vec<usize>, cols: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, classes: usize },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    tracked: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Ordered record of executed operations.
pub struct Tape<S: Scalar = f64> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err(op, shape, &[axis]));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index of the broadcast source with shape `src`.
fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let numel: usize = out.iter().product();
    if out == src {
        return (0..numel).collect();
    }
    let nd = out.len();
    let offset = nd - src.len();
    let mut src_strides = vec![0usize; nd];
    let mut stride = 1;
    for i in (0..src.len()).rev() {
        src_strides[i + offset] = if src[i] == 1 { 0 } else { stride };
        stride *= src[i];
    }
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; nd];
    let mut pos = 0usize;
    for _ in 0..numel {
        map.push(pos);
        for d in (0..nd).rev() {
            counter[d] += 1;
            pos += src_strides[d];
            if counter[d] < out[d] {
                break;
            }
            pos -= src_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    map
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softplus<S: Scalar>(x: S) -> S {
    if x > S::lit(30.0) {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn add_into<S: Scalar>(slot: &mut Option<Vec<S>>, len: usize, f: impl FnOnce(&mut [S])) {
    let buf = slot.get_or_insert_with(|| vec![S::zero(); len]);
    f(buf);
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var(nodes.len() - 1)
    }

    /// Places a tensor on the tape; it is differentiable iff `t.is_tracked()`.
    pub fn leaf(&self, t: Tensor<S>) -> Var {
        let tracked = t.is_tracked();
        let mut value = t;
        value.zero_grad();
        self.push(value, Op::Leaf, tracked)
    }

    /// Places an untracked constant on the tape.
    pub fn constant(&self, mut t: Tensor<S>) -> Var {
        t.set_tracked(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn data(&self, v: Var) -> Vec<S> {
        self.value(v).data().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<S> {
        self.value(v).item()
    }

    fn unary_map(&self, a: Var, kind: UnaryKind, f: impl Fn(S) -> S) -> Var {
        let (value, tracked) = {
            let nodes = self.nodes.borrow();
            let src = &nodes[a.0];
            let data = src.value.data().iter().map(|&x| f(x)).collect();
            (Tensor::new(src.value.shape().to_vec(), data).expect("same shape"), src.tracked)
        };
        self.push(value, Op::Unary { kind, a: a.0 }, tracked)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary_map(a, UnaryKind::Relu, |x| if x > S::zero() { x } else { S::zero() })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary_map(a, UnaryKind::Sigmoid, sigmoid)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary_map(a, UnaryKind::Exp, |x| x.exp())
    }

    /// Elementwise `ln(1 + e^x)`, overflow-safe for large `x`.
    pub fn softplus(&self, a: Var) -> Var {
        self.unary_map(a, UnaryKind::Softplus, softplus)
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary_map(a, UnaryKind::Sin, |x| x.sin())
    }

    /// Elementwise clamp; the gradient is zero where a bound is active.
    pub fn clamp(&self, a: Var, lo: Option<S>, hi: Option<S>) -> Var {
        let (value, tracked) = {
            let nodes = self.nodes.borrow();
            let src = &nodes[a.0];
            let data = src
                .value
                .data()
                .iter()
                .map(|&x| {
                    let x = lo.map_or(x, |l| if x < l { l } else { x });
                    hi.map_or(x, |h| if x > h { h } else { x })
                })
                .collect();
            (Tensor::new(src.value.shape().to_vec(), data).expect("same shape"), src.tracked)
        };
        self.push(value, Op::Clamp { a: a.0, lo, hi }, tracked)
    }

    pub fn scale(&self, a: Var, c: S) -> Var {
        let (value, tracked) = {
            let nodes = self.nodes.borrow();
            let src = &nodes[a.0];
            let data = src.value.data().iter().map(|&x| x * c).collect();
            (Tensor::new(src.value.shape().to_vec(), data).expect("same shape"), src.tracked)
        };
        self.push(value, Op::Scale { a: a.0, c }, tracked)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -S::one())
    }

    pub fn add_scalar(&self, a: Var, c: S) -> Var {
        let (value, tracked) = {
            let nodes = self.nodes.borrow();
            let src = &nodes[a.0];
            let data = src.value.data().iter().map(|&x| x + c).collect();
            (Tensor::new(src.value.shape().to_vec(), data).expect("same shape"), src.tracked)
        };
        self.push(value, Op::AddScalar { a: a.0 }, tracked)
    }

    fn binary(&self, a: Var, b: Var, kind: BinaryKind, op: &'static str) -> Result<Var> {
        let (value, tracked) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (sa, sb) = (na.value.shape(), nb.value.shape());
            let out = broadcast_shape(sa, sb).ok_or_else(|| dim_err(op, sa, sb))?;
            let (da, db) = (na.value.data(), nb.value.data());
            let f = |x: S, y: S| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
            let data: Vec<S> = if sa == sb {
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
            } else {
                let (ma, mb) = (broadcast_map(&out, sa), broadcast_map(&out, sb));
                ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
            };
            (Tensor::new(out, data)?, na.tracked || nb.tracked)
        };
        Ok(self.push(value, Op::Binary { kind, a: a.0, b: b.0 }, tracked))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add, "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub, "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul, "mul")
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div, "div")
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, tracked, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (sa, sb) = (na.value.shape(), nb.value.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(dim_err("matmul", sa, sb));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let c = matmul_raw(na.value.data(), nb.value.data(), m, k, n);
            (Tensor::new(vec![m, n], c)?, na.tracked || nb.tracked, m, k, n)
        };
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, m, k, n }, tracked))
    }

    /// Batched matrix product of `[B, m, k]` and `[B, k, n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let (value, tracked, batch, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (sa, sb) = (na.value.shape(), nb.value.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(dim_err("bmm", sa, sb));
            }
            let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let (da, db) = (na.value.data(), nb.value.data());
            let mut c = Vec::with_capacity(batch * m * n);
            for i in 0..batch {
                c.extend(matmul_raw(
                    &da[i * m * k..(i + 1) * m * k],
                    &db[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                ));
            }
            (Tensor::new(vec![batch, m, n], c)?, na.tracked || nb.tracked, batch, m, k, n)
        };
        Ok(self.push(value, Op::Bmm { a: a.0, b: b.0, batch, m, k, n }, tracked))
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (value, tracked, batch, rows, cols) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let s = na.value.shape();
            let (batch, rows, cols) = match *s {
                [r, c] => (1, r, c),
                [b, r, c] => (b, r, c),
                _ => return Err(dim_err("transpose", s, &[2])),
            };
            let d = na.value.data();
            let out = transpose_raw(d, batch, rows, cols);
            let mut shape = s.to_vec();
            let nd = shape.len();
            shape.swap(nd - 1, nd - 2);
            (Tensor::new(shape, out)?, na.tracked, batch, rows, cols)
        };
        Ok(self.push(value, Op::Transpose { a: a.0, batch, rows, cols }, tracked))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let (value, tracked) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let mut t = na.value.reshape(shape.to_vec())?;
            t.set_tracked(false);
            (t, na.tracked)
        };
        Ok(self.push(value, Op::Reshape { a: a.0 }, tracked))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self, a: Var) -> Var {
        let (value, tracked) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let s = na.value.data().iter().fold(S::zero(), |acc, &x| acc + x);
            (Tensor::scalar(s), na.tracked)
        };
        self.push(value, Op::Sum { a: a.0 }, tracked)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let (value, tracked, outer, len, inner) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let (outer, len, inner) = split_axis(na.value.shape(), axis, "sum_axis")?;
            let d = na.value.data();
            let mut out = vec![S::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += d[(o * len + l) * inner + i];
                    }
                }
            }
            let mut shape = na.value.shape().to_vec();
            shape[axis] = 1;
            (Tensor::new(shape, out)?, na.tracked, outer, len, inner)
        };
        Ok(self.push(value, Op::SumAxis { a: a.0, outer, len, inner }, tracked))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let (value, tracked, outer, len, inner) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let (outer, len, inner) = split_axis(na.value.shape(), axis, "softmax")?;
            let out = softmax_raw(na.value.data(), outer, len, inner);
            (Tensor::new(na.value.shape().to_vec(), out)?, na.tracked, outer, len, inner)
        };
        Ok(self.push(value, Op::Softmax { a: a.0, outer, len, inner }, tracked))
    }

    /// Euclidean norm along `axis`, keeping it with length 1.
    pub fn l2_norm(&self, a: Var, axis: usize) -> Result<Var> {
        let (value, tracked, outer, len, inner) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let (outer, len, inner) = split_axis(na.value.shape(), axis, "l2_norm")?;
            let d = na.value.data();
            let mut out = vec![S::zero(); outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut s = S::zero();
                    for l in 0..len {
                        let x = d[(o * len + l) * inner + i];
                        s += x * x;
                    }
                    out[o * inner + i] = s.sqrt();
                }
            }
            let mut shape = na.value.shape().to_vec();
            shape[axis] = 1;
            (Tensor::new(shape, out)?, na.tracked, outer, len, inner)
        };
        Ok(self.push(value, Op::L2Norm { a: a.0, outer, len, inner }, tracked))
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Validation("concat of an empty list".into()));
        }
        let (value, tracked, lens, outer, inner) = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            let (outer, _, inner) = split_axis(&first, axis, "concat")?;
            let mut lens = Vec::with_capacity(parts.len());
            let mut tracked = false;
            for p in parts {
                let s = nodes[p.0].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(i, (x, y))| i == axis || x == y);
                if !compatible {
                    return Err(dim_err("concat", &first, s));
                }
                lens.push((p.0, s[axis]));
                tracked |= nodes[p.0].tracked;
            }
            let total: usize = lens.iter().map(|&(_, l)| l).sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for &(id, len) in &lens {
                    let d = nodes[id].value.data();
                    out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = first.clone();
            shape[axis] = total;
            (Tensor::new(shape, out)?, tracked, lens, outer, inner)
        };
        Ok(self.push(value, Op::Concat { parts: lens, outer, inner }, tracked))
    }

    /// Selects rows of a 2-D tensor; repeated indices are allowed.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let (value, tracked, cols) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let s = na.value.shape();
            if s.len() != 2 {
                return Err(dim_err("gather_rows", s, &[2]));
            }
            let (rows, cols) = (s[0], s[1]);
            let d = na.value.data();
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &r in idx {
                if r >= rows {
                    return Err(Error::Validation(format!(
                        "gather_rows index {r} out of range for {rows} rows"
                    )));
                }
                out.extend_from_slice(&d[r * cols..(r + 1) * cols]);
            }
            (Tensor::new(vec![idx.len(), cols], out)?, na.tracked, cols)
        };
        Ok(self.push(value, Op::GatherRows { a: a.0, idx: idx.to_vec(), cols }, tracked))
    }

    /// Sums row `i` of `a` into output row `idx[i]` of an `[n, cols]` result.
    pub fn scatter_add_rows(&self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let (value, tracked, cols) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let s = na.value.shape();
            if s.len() != 2 || s[0] != idx.len() {
                return Err(dim_err("scatter_add_rows", s, &[idx.len()]));
            }
            let cols = s[1];
            let d = na.value.data();
            let mut out = vec![S::zero(); n * cols];
            for (i, &r) in idx.iter().enumerate() {
                if r >= n {
                    return Err(Error::Validation(format!(
                        "scatter_add_rows index {r} out of range for {n} rows"
                    )));
                }
                for c in 0..cols {
                    out[r * cols + c] += d[i * cols + c];
                }
            }
            (Tensor::new(vec![n, cols], out)?, na.tracked, cols)
        };
        Ok(self.push(value, Op::ScatterAddRows { a: a.0, idx: idx.to_vec(), cols }, tracked))
    }

    /// Copy of `base` with rows `idx` replaced by the rows of `rows`. Indices must be unique.
    pub fn scatter_rows(&self, base: Var, rows: Var, idx: &[usize]) -> Result<Var> {
        let (value, tracked, cols) = {
            let nodes = self.nodes.borrow();
            let (nb, nr) = (&nodes[base.0], &nodes[rows.0]);
            let (sb, sr) = (nb.value.shape(), nr.value.shape());
            if sb.len() != 2 || sr.len() != 2 || sb[1] != sr[1] || sr[0] != idx.len() {
                return Err(dim_err("scatter_rows", sb, sr));
            }
            let cols = sb[1];
            let mut seen = vec![false; sb[0]];
            let mut out = nb.value.data().to_vec();
            let dr = nr.value.data();
            for (i, &r) in idx.iter().enumerate() {
                if r >= sb[0] || seen[r] {
                    return Err(Error::Validation(format!(
                        "scatter_rows index {r} out of range or repeated"
                    )));
                }
                seen[r] = true;
                out[r * cols..(r + 1) * cols].copy_from_slice(&dr[i * cols..(i + 1) * cols]);
            }
            (Tensor::new(sb.to_vec(), out)?, nb.tracked || nr.tracked, cols)
        };
        Ok(self.push(
            value,
            Op::ScatterRows { base: base.0, rows: rows.0, idx: idx.to_vec(), cols },
            tracked,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (value, tracked, classes) = {
            let nodes = self.nodes.borrow();
            let nl = &nodes[logits.0];
            let s = nl.value.shape();
            if s.len() != 2 || s[0] != labels.len() {
                return Err(dim_err("cross_entropy", s, &[labels.len()]));
            }
            if labels.is_empty() {
                return Err(Error::Validation("cross_entropy on an empty batch".into()));
            }
            let classes = s[1];
            if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
                return Err(Error::Validation(format!(
                    "label {l} at index {i} out of range for {classes} classes"
                )));
            }
            let d = nl.value.data();
            let mut total = S::zero();
            for (row, &label) in labels.iter().enumerate() {
                let r = &d[row * classes..(row + 1) * classes];
                let (arg, max) = r
                    .iter()
                    .enumerate()
                    .fold((0, S::neg_infinity()), |(i, m), (j, &x)| if x > m { (j, x) } else { (i, m) });
                let rest = r
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != arg)
                    .fold(S::zero(), |acc, (_, &x)| acc + (x - max).exp());
                total += (max - r[label]) + rest.ln_1p();
            }
            let n = S::lit(labels.len() as f64);
            (Tensor::scalar(total / n), nl.tracked, classes)
        };
        Ok(self.push(
            value,
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), classes },
            tracked,
        ))
    }

    /// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]` or `[1, out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Row-wise cosine similarity of two `[n, d]` tensors, giving `[n, 1]`.
    pub fn cosine_sim(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sa != sb {
            return Err(dim_err("cosine_sim", &sa, &sb));
        }
        let eps = S::lit(COSINE_EPS);
        let dot = self.sum_axis(self.mul(a, b)?, 1)?;
        let na = self.add_scalar(self.l2_norm(a, 1)?, eps);
        let nb = self.add_scalar(self.l2_norm(b, 1)?, eps);
        self.div(dot, self.mul(na, nb)?)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.tracked {
            return Err(Error::Contract("backward on an untracked value".into()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, nodes: &[Node<S>], id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &nodes[id];
        let tracked = |i: usize| nodes[i].tracked;
        let numel = |i: usize| nodes[i].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if tracked(*a) {
                    let bt = transpose_raw(nodes[*b].value.data(), 1, k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    add_into(&mut grads[*a], m * k, |acc| acc.iter_mut().zip(&da).for_each(|(x, &y)| *x += y));
                }
                if tracked(*b) {
                    let at = transpose_raw(nodes[*a].value.data(), 1, m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    add_into(&mut grads[*b], k * n, |acc| acc.iter_mut().zip(&db).for_each(|(x, &y)| *x += y));
                }
            }
            Op::Bmm { a, b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if tracked(*a) {
                    let bd = nodes[*b].value.data();
                    add_into(&mut grads[*a], batch * m * k, |acc| {
                        for i in 0..batch {
                            let bt = transpose_raw(&bd[i * k * n..(i + 1) * k * n], 1, k, n);
                            let da = matmul_raw(&g[i * m * n..(i + 1) * m * n], &bt, m, n, k);
                            acc[i * m * k..(i + 1) * m * k]
                                .iter_mut()
                                .zip(&da)
                                .for_each(|(x, &y)| *x += y);
                        }
                    });
                }
                if tracked(*b) {
                    let ad = nodes[*a].value.data();
                    add_into(&mut grads[*b], batch * k * n, |acc| {
                        for i in 0..batch {
                            let at = transpose_raw(&ad[i * m * k..(i + 1) * m * k], 1, m, k);
                            let db = matmul_raw(&at, &g[i * m * n..(i + 1) * m * n], k, m, n);
                            acc[i * k * n..(i + 1) * k * n]
                                .iter_mut()
                                .zip(&db)
                                .for_each(|(x, &y)| *x += y);
                        }
                    });
                }
            }
            Op::Transpose { a, batch, rows, cols } => {
                if tracked(*a) {
                    let back = transpose_raw(g, *batch, *cols, *rows);
                    add_into(&mut grads[*a], back.len(), |acc| acc.iter_mut().zip(&back).for_each(|(x, &y)| *x += y));
                }
            }
            Op::Reshape { a } => {
                if tracked(*a) {
                    add_into(&mut grads[*a], g.len(), |acc| acc.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                }
            }
            Op::Binary { kind, a, b } => {
                let out = node.value.shape();
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                let ma = broadcast_map(out, va.shape());
                let mb = broadcast_map(out, vb.shape());
                let (da, db) = (va.data(), vb.data());
                if tracked(*a) {
                    add_into(&mut grads[*a], numel(*a), |acc| {
                        for (i, &gi) in g.iter().enumerate() {
                            let local = match kind {
                                BinaryKind::Add | BinaryKind::Sub => S::one(),
                                BinaryKind::Mul => db[mb[i]],
                                BinaryKind::Div => S::one() / db[mb[i]],
                            };
                            acc[ma[i]] += gi * local;
                        }
                    });
                }
                if tracked(*b) {
                    add_into(&mut grads[*b], numel(*b), |acc| {
                        for (i, &gi) in g.iter().enumerate() {
                            let local = match kind {
                                BinaryKind::Add => S::one(),
                                BinaryKind::Sub => -S::one(),
                                BinaryKind::Mul => da[ma[i]],
                                BinaryKind::Div => {
                                    let y = db[mb[i]];
                                    -da[ma[i]] / (y * y)
                                }
                            };
                            acc[mb[i]] += gi * local;
                        }
                    });
                }
            }
            Op::Scale { a, c } => {
                if tracked(*a) {
                    add_into(&mut grads[*a], g.len(), |acc| acc.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c));
                }
            }
            Op::AddScalar { a } => {
                if tracked(*a) {
                    add_into(&mut grads[*a], g.len(), |acc| acc.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                }
            }
            Op::Unary { kind, a } => {
                if tracked(*a) {
                    let x = nodes[*a].value.data();
                    let y = node.value.data();
                    add_into(&mut grads[*a], g.len(), |acc| {
                        for i in 0..g.len() {
                            let local = match kind {
                                UnaryKind::Relu => {
                                    if x[i] > S::zero() {
                                        S::one()
                                    } else {
                                        S::zero()
                                    }
                                }
                                UnaryKind::Sigmoid => y[i] * (S::one() - y[i]),
                                UnaryKind::Exp => y[i],
                                UnaryKind::Softplus => sigmoid(x[i]),
                                UnaryKind::Sin => x[i].cos(),
                            };
                            acc[i] += g[i] * local;
                        }
                    });
                }
            }
            Op::Clamp { a, lo, hi } => {
                if tracked(*a) {
                    let x = nodes[*a].value.data();
                    add_into(&mut grads[*a], g.len(), |acc| {
                        for i in 0..g.len() {
                            let below = lo.is_some_and(|l| x[i] < l);
                            let above = hi.is_some_and(|h| x[i] > h);
                            if !below && !above {
                                acc[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::Sum { a } => {
                if tracked(*a) {
                    add_into(&mut grads[*a], numel(*a), |acc| acc.iter_mut().for_each(|x| *x += g[0]));
                }
            }
            Op::SumAxis { a, outer, len, inner } => {
                if tracked(*a) {
                    let (outer, len, inner) = (*outer, *len, *inner);
                    add_into(&mut grads[*a], outer * len * inner, |acc| {
                        for o in 0..outer {
                            for l in 0..len {
                                for i in 0..inner {
                                    acc[(o * len + l) * inner + i] += g[o * inner + i];
                                }
                            }
                        }
                    });
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                if tracked(*a) {
                    let (outer, len, inner) = (*outer, *len, *inner);
                    let y = node.value.data();
                    add_into(&mut grads[*a], outer * len * inner, |acc| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |l: usize| (o * len + l) * inner + i;
                                let dot = (0..len).fold(S::zero(), |s, l| s + g[at(l)] * y[at(l)]);
                                for l in 0..len {
                                    acc[at(l)] += y[at(l)] * (g[at(l)] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::L2Norm { a, outer, len, inner } => {
                if tracked(*a) {
                    let (outer, len, inner) = (*outer, *len, *inner);
                    let x = nodes[*a].value.data();
                    let y = node.value.data();
                    add_into(&mut grads[*a], outer * len * inner, |acc| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let norm = y[o * inner + i];
                                if norm == S::zero() {
                                    continue;
                                }
                                let gi = g[o * inner + i] / norm;
                                for l in 0..len {
                                    let at = (o * len + l) * inner + i;
                                    acc[at] += gi * x[at];
                                }
                            }
                        }
                    });
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|&(_, l)| l).sum();
                let mut offset = 0;
                for &(pid, len) in parts {
                    if tracked(pid) {
                        add_into(&mut grads[pid], outer * len * inner, |acc| {
                            for o in 0..*outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                acc[o * len * inner..(o + 1) * len * inner]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(x, &y)| *x += y);
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::GatherRows { a, idx, cols } => {
                if tracked(*a) {
                    add_into(&mut grads[*a], numel(*a), |acc| {
                        for (i, &r) in idx.iter().enumerate() {
                            for c in 0..*cols {
                                acc[r * cols + c] += g[i * cols + c];
                            }
                        }
                    });
                }
            }
            Op::ScatterAddRows { a, idx, cols } => {
                if tracked(*a) {
                    add_into(&mut grads[*a], numel(*a), |acc| {
                        for (i, &r) in idx.iter().enumerate() {
                            for c in 0..*cols {
                                acc[i * cols + c] += g[r * cols + c];
                            }
                        }
                    });
                }
            }
            Op::ScatterRows { base, rows, idx, cols } => {
                if tracked(*base) {
                    let mut gb = g.to_vec();
                    for &r in idx {
                        gb[r * cols..(r + 1) * cols].iter_mut().for_each(|x| *x = S::zero());
                    }
                    add_into(&mut grads[*base], gb.len(), |acc| acc.iter_mut().zip(&gb).for_each(|(x, &y)| *x += y));
                }
                if tracked(*rows) {
                    add_into(&mut grads[*rows], numel(*rows), |acc| {
                        for (i, &r) in idx.iter().enumerate() {
                            for c in 0..*cols {
                                acc[i * cols + c] += g[r * cols + c];
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, labels, classes } => {
                if tracked(*logits) {
                    let d = nodes[*logits].value.data();
                    let c = *classes;
                    let scale = g[0] / S::lit(labels.len() as f64);
                    add_into(&mut grads[*logits], d.len(), |acc| {
                        for (row, &label) in labels.iter().enumerate() {
                            let probs = softmax_raw(&d[row * c..(row + 1) * c], 1, c, 1);
                            for j in 0..c {
                                let onehot = if j == label { S::one() } else { S::zero() };
                                acc[row * c + j] += scale * (probs[j] - onehot);
                            }
                        }
                    });
                }
            }
        }
    }
}

pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let x = a[i * k + p];
            if x == S::zero() {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let out = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] += x * row[j];
            }
        }
    }
    c
}

fn transpose_raw<S: Scalar>(d: &[S], batch: usize, rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); d.len()];
    for b in 0..batch {
        let base = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = d[base + r * cols + c];
            }
        }
    }
    out
}

pub(crate) fn softmax_raw<S: Scalar>(d: &[S], outer: usize, len: usize, inner: usize) -> Vec<S> {
    let mut out = vec![S::zero(); d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).fold(S::neg_infinity(), |m, l| m.max(d[at(l)]));
            let mut z = S::zero();
            for l in 0..len {
                let e = (d[at(l)] - max).exp();
                out[at(l)] = e;
                z += e;
            }
            for l in 0..len {
                out[at(l)] /= z;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i, m).unwrap();
        assert_eq!(tape.data(c), vec![1.0, 2.0, 3.0, 4.0]);

        let r = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let col = tape.constant(t(&[2, 1], &[5.0, 7.0]));
        let c = tape.matmul(r, col).unwrap();
        assert_eq!(tape.data(c), vec![5.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softplus_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[4], &[0.0, 100.0, 1e3, -1e3]));
        let y = tape.data(tape.softplus(x));
        assert_abs_diff_eq!(y[0], std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], 100.0, epsilon = 1e-12);
        assert_eq!(y[2], 1e3);
        assert!(y[3] >= 0.0 && y[3].is_finite());
    }

    #[test]
    fn elementwise_basics() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(tape.data(tape.softmax(z, 0).unwrap()), vec![0.5, 0.5]);
        assert_eq!(tape.data(tape.sigmoid(z)), vec![0.5, 0.5]);
        let v = tape.constant(t(&[1, 3], &[0.3, -2.0, 5.0]));
        let c = tape.cosine_sim(v, v).unwrap();
        assert_abs_diff_eq!(tape.item(c).unwrap(), 1.0, epsilon = 1e-9);
        assert!(tape.softmax(z, 1).is_err());
    }

    #[test]
    fn cross_entropy_values_and_errors() {
        let tape = Tape::<f64>::new();
        let l = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        assert_abs_diff_eq!(
            tape.item(tape.cross_entropy(l, &[0]).unwrap()).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        let l = tape.constant(t(&[1, 2], &[10.0, -10.0]));
        let direct = (-20.0f64).exp().ln_1p();
        let ce = tape.item(tape.cross_entropy(l, &[0]).unwrap()).unwrap();
        assert_abs_diff_eq!(ce, direct, epsilon = 1e-24);
        assert_abs_diff_eq!(ce, 2.061_153_618e-9, epsilon = 1e-17);
        let err = tape.cross_entropy(l, &[2]).unwrap_err().to_string();
        assert!(err.contains("label 2 at index 0"), "{err}");
    }

    #[test]
    fn backward_simple_cases() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).tracked());
        let g = tape.backward(tape.sum(x)).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).tracked());
        let sq = tape.mul(x, x).unwrap();
        let g = tape.backward(tape.sum(sq)).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).tracked());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_add_row_bias() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[0.0; 6]).tracked());
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).tracked());
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.data(y), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let g = tape.backward(tape.sum(y)).unwrap();
        assert_eq!(g.get(b).unwrap(), &[2.0, 2.0, 2.0]);
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn scatter_rows_rejects_duplicates() {
        let tape = Tape::<f64>::new();
        let base = tape.constant(Tensor::zeros(&[3, 2]));
        let rows = tape.constant(Tensor::ones(&[2, 2]));
        assert!(tape.scatter_rows(base, rows, &[1, 1]).is_err());
        let out = tape.scatter_rows(base, rows, &[2, 0]).unwrap();
        assert_eq!(tape.data(out), vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
