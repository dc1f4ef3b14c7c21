use std::collections::HashMap;
use std::ops::Range;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Logit added to disallowed attention positions.
pub(crate) const MASKED_LOGIT: f64 = -1e9;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    MulCol { x: Var, w: Var },
    Scale { x: Var, c: S },
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    CrossEntropy { logits: Var, probs: Vec<S>, targets: Vec<Option<usize>>, count: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    IndexAddRows { parts: Vec<(Var, Vec<usize>)> },
    Slice { x: Var, rows: Range<usize>, cols: Range<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectNormalized { probs: Var, choices: Vec<Vec<usize>>, sums: Vec<S> },
    MeanRows(Var),
    Sum(Var),
    DotConst { x: Var, c: Vec<S> },
    Mse { x: Var, target: Vec<S> },
    StraightThrough(Var),
    Reshape(Var),
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    param: Option<ParamId>,
    requires_grad: bool,
    op: Op<S>,
}

/// Records a forward computation and replays it backwards.
///
/// Parameter values are borrowed from the store, never copied.
pub struct Tape<'p, S: Scalar> {
    nodes: Vec<Node<S>>,
    store: Option<&'p ParamStore<S>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Tape<'static, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<'static, S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), store: None, param_vars: HashMap::new() }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
    }
}

fn gelu<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let inner = S::of(SQRT_2_OVER_PI) * (x + S::of(GELU_CUBIC) * x * x * x);
    half * x * (S::one() + inner.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let c = S::of(SQRT_2_OVER_PI);
    let a = S::of(GELU_CUBIC);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x)
}

/// Numerically stable `log_softmax` of one row.
pub fn log_softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn with_params(store: &'p ParamStore<S>) -> Self {
        Tape { nodes: Vec::new(), store: Some(store), param_vars: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        let node = &self.nodes[v.0];
        match (node.param, self.store) {
            (Some(id), Some(store)) => store.get(id).data(),
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let mut t = Tensor::zeros(self.shape(v).to_vec());
        t.data_mut().copy_from_slice(self.value(v));
        t
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.value(v)[0]
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|&v| self.requires(v));
        self.nodes.push(Node { shape, value, param: None, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record an input tensor; it receives a gradient iff it requires one.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node { shape, value: t.into_data(), param: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<S>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.leaf(t))
    }

    /// Reference a stored parameter. Repeated calls return the same handle,
    /// so a tensor used in two places accumulates both gradients.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("tape was created without a parameter store");
        let shape = store.get(id).shape().to_vec();
        self.nodes.push(Node { shape, value: Vec::new(), param: Some(id), requires_grad: true, op: Op::Leaf });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn matmul_op(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = dims2(self.shape(a));
        let (br, bc) = dims2(self.shape(b));
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?}{} x {:?}{}", self.shape(a), if ta { "ᵀ" } else { "" }, self.shape(b), if tb { "ᵀ" } else { "" }),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, self.value(a), ta, self.value(b), tb, &mut out, S::zero());
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, ta, tb, m, k, n }, &[a, b])
    }

    /// `a · b` for `a: [m,k]`, `b: [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_op(a, b, false, false)
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_op(a, b, false, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[i, j] + bias[j]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x));
        if numel(self.shape(bias)) != n {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", self.shape(x), self.shape(bias))));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for r in 0..m {
            out[r * n..(r + 1) * n].iter_mut().zip(b).for_each(|(o, &v)| *o += v);
        }
        let shape = self.shape(x).to_vec();
        self.push("add_row", shape, out, Op::AddRow { x, bias }, &[x, bias])
    }

    /// `x[i, j] * w[i]`.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x));
        if numel(self.shape(w)) != m {
            return Err(Error::shape("mul_col", format!("{:?} * {:?}", self.shape(x), self.shape(w))));
        }
        let wv = self.value(w);
        let mut out = self.value(x).to_vec();
        for r in 0..m {
            out[r * n..(r + 1) * n].iter_mut().for_each(|o| *o *= wv[r]);
        }
        let shape = self.shape(x).to_vec();
        self.push("mul_col", shape, out, Op::MulCol { x, w }, &[x, w])
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale { x, c }, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| S::one() / (S::one() + (-v).exp())).collect();
        let shape = self.shape(x).to_vec();
        self.push("sigmoid", shape, out, Op::Sigmoid(x), &[x])
    }

    /// Normalise every row to zero mean and unit variance, then apply
    /// `gain` and `bias` (both sized like the last dimension).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let (m, n) = dims2(self.shape(x));
        if numel(self.shape(gain)) != n || numel(self.shape(bias)) != n {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", self.shape(x), self.shape(gain), self.shape(bias)),
            ));
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let nf = S::of(n as f64);
        let mut xhat = vec![S::zero(); m * n];
        let mut inv_std = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("layer_norm", shape, out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    /// Softmax along `axis`, stabilised by subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![S::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| xv[at(j)]).fold(S::neg_infinity(), S::max);
                let mut total = S::zero();
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        self.push("softmax", shape, out, Op::Softmax { x, outer, len, inner }, &[x])
    }

    /// Row softmax of a 2-D tensor where `allowed[i * n + j] == false`
    /// replaces the logit by a large negative constant.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let (m, n) = dims2(self.shape(x));
        if allowed.len() != m * n {
            return Err(Error::shape("masked_softmax", format!("mask of {} for {m}x{n}", allowed.len())));
        }
        let neg = S::of(MASKED_LOGIT);
        let shape = self.shape(x).to_vec();
        let masked: Vec<S> = self
            .value(x)
            .iter()
            .zip(allowed)
            .map(|(&v, &ok)| if ok { v } else { v + neg })
            .collect();
        // the additive mask has unit derivative: pass gradients straight through
        let node = self.push("masked_softmax", shape.clone(), masked, Op::Reshape(x), &[x])?;
        self.softmax(node, shape.len() - 1)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits: [t, V]`; rows whose target equals `ignore` do not count.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], ignore: u32) -> Result<Var> {
        let (t, v) = dims2(self.shape(logits));
        if targets.len() != t {
            return Err(Error::shape("cross_entropy", format!("{t} rows, {} targets", targets.len())));
        }
        let mut idx = Vec::with_capacity(t);
        for &tg in targets {
            if tg == ignore {
                idx.push(None);
            } else if (tg as usize) < v {
                idx.push(Some(tg as usize));
            } else {
                return Err(Error::TokenOutOfRange { id: tg, size: v });
            }
        }
        let lv = self.value(logits);
        let mut probs = vec![S::zero(); t * v];
        let mut total = S::zero();
        let mut count = 0usize;
        let mut logp = vec![S::zero(); v];
        for (r, target) in idx.iter().enumerate() {
            let Some(target) = *target else { continue };
            log_softmax_row(&lv[r * v..(r + 1) * v], &mut logp);
            total -= logp[target];
            count += 1;
            for j in 0..v {
                probs[r * v + j] = logp[j].exp();
            }
        }
        let loss = if count == 0 { S::zero() } else { total / S::of(count as f64) };
        self.push("cross_entropy", vec![1], vec![loss], Op::CrossEntropy { logits, probs, targets: idx, count }, &[logits])
    }

    /// Rows `idx` of `x`, in order (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = dims2(self.shape(x));
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {m}")));
        }
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        self.push("gather_rows", vec![idx.len(), n], out, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Zero `[rows, n]` tensor with row `r` of each part added into row
    /// `index[r]`.
    pub fn index_add_rows(&mut self, rows: usize, n: usize, parts: Vec<(Var, Vec<usize>)>) -> Result<Var> {
        let mut out = vec![S::zero(); rows * n];
        for (v, index) in &parts {
            let (pm, pn) = dims2(self.shape(*v));
            if pn != n || pm != index.len() || index.iter().any(|&i| i >= rows) {
                return Err(Error::shape("index_add_rows", format!("part {:?} into {rows}x{n}", self.shape(*v))));
            }
            let pv = self.value(*v);
            for (r, &dst) in index.iter().enumerate() {
                out[dst * n..(dst + 1) * n].iter_mut().zip(&pv[r * n..(r + 1) * n]).for_each(|(o, &p)| *o += p);
            }
        }
        let inputs: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        self.push("index_add_rows", vec![rows, n], out, Op::IndexAddRows { parts }, &inputs)
    }

    /// 2-D block `x[rows, cols]`.
    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (m, n) = dims2(self.shape(x));
        if rows.end > m || cols.end > n || rows.is_empty() || cols.is_empty() {
            return Err(Error::shape("slice", format!("[{rows:?}, {cols:?}] of {m}x{n}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            out.extend_from_slice(&xv[r * n + cols.start..r * n + cols.end]);
        }
        let shape = vec![rows.len(), cols.len()];
        self.push("slice", shape, out, Op::Slice { x, rows, cols }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let n = dims2(self.shape(parts[0])).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = dims2(self.shape(p));
            if pn != n {
                return Err(Error::shape("concat_rows", format!("{pn} columns vs {n}")));
            }
            m += pm;
            out.extend_from_slice(self.value(p));
        }
        self.push("concat_rows", vec![m, n], out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let m = dims2(self.shape(parts[0])).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims2(self.shape(p));
            if pm != m {
                return Err(Error::shape("concat_cols", format!("{pm} rows vs {m}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        self.push("concat_cols", vec![m, n], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// For each row `t`, the entries `probs[t, choices[t][..]]` divided by
    /// their sum. Every row must choose the same number of columns.
    pub fn select_normalized(&mut self, probs: Var, choices: &[Vec<usize>]) -> Result<Var> {
        let (m, n) = dims2(self.shape(probs));
        let k = choices.first().map_or(0, Vec::len);
        if choices.len() != m || k == 0 || choices.iter().any(|c| c.len() != k || c.iter().any(|&j| j >= n)) {
            return Err(Error::shape("select_normalized", format!("{} choice rows for {m}x{n}", choices.len())));
        }
        let pv = self.value(probs);
        let mut out = Vec::with_capacity(m * k);
        let mut sums = Vec::with_capacity(m);
        for (t, c) in choices.iter().enumerate() {
            let s: S = c.iter().map(|&j| pv[t * n + j]).sum();
            sums.push(s);
            out.extend(c.iter().map(|&j| pv[t * n + j] / s));
        }
        self.push("select_normalized", vec![m, k], out, Op::SelectNormalized { probs, choices: choices.to_vec(), sums }, &[probs])
    }

    /// Column means: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x));
        let xv = self.value(x);
        let mut out = vec![S::zero(); n];
        for r in 0..m {
            out.iter_mut().zip(&xv[r * n..(r + 1) * n]).for_each(|(o, &v)| *o += v);
        }
        let mf = S::of(m as f64);
        out.iter_mut().for_each(|o| *o /= mf);
        self.push("mean_rows", vec![1, n], out, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    /// `Σ x_i c_i` for a constant vector `c`.
    pub fn dot_const(&mut self, x: Var, c: &[S]) -> Result<Var> {
        if c.len() != numel(self.shape(x)) {
            return Err(Error::shape("dot_const", format!("{:?} . [{}]", self.shape(x), c.len())));
        }
        let s = self.value(x).iter().zip(c).map(|(&a, &b)| a * b).sum();
        self.push("dot_const", vec![1], vec![s], Op::DotConst { x, c: c.to_vec() }, &[x])
    }

    /// Mean squared difference from a constant target.
    pub fn mse(&mut self, x: Var, target: &[S]) -> Result<Var> {
        if target.len() != numel(self.shape(x)) {
            return Err(Error::shape("mse", format!("{:?} vs [{}]", self.shape(x), target.len())));
        }
        let n = S::of(target.len() as f64);
        let s = self.value(x).iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>() / n;
        self.push("mse", vec![1], vec![s], Op::Mse { x, target: target.to_vec() }, &[x])
    }

    /// Forward value `replacement`, backward identity into `x`.
    pub fn straight_through(&mut self, x: Var, replacement: Vec<S>) -> Result<Var> {
        if replacement.len() != numel(self.shape(x)) {
            return Err(Error::shape("straight_through", format!("{:?} vs [{}]", self.shape(x), replacement.len())));
        }
        let shape = self.shape(x).to_vec();
        self.push("straight_through", shape, replacement, Op::StraightThrough(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(x)) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        self.push("reshape", shape, value, Op::Reshape(x), &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = Vec::new();
        let mut by_node = Vec::with_capacity(grads.len());
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            let keep = matches!(node.op, Op::Leaf) && node.requires_grad;
            match (keep, node.param, g) {
                (true, Some(id), Some(g)) => {
                    params.push((id, g));
                    by_node.push(None);
                }
                (true, None, g) => by_node.push(g),
                _ => by_node.push(None),
            }
        }
        Ok(Gradients { by_node, params })
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.requires(*a) {
                    let da = slot(grads, *a, m * k);
                    if *ta {
                        S::gemm(k, n, m, self.value(*b), *tb, g, true, da, S::one());
                    } else {
                        S::gemm(m, n, k, g, false, self.value(*b), !*tb, da, S::one());
                    }
                }
                if self.requires(*b) {
                    let db = slot(grads, *b, k * n);
                    if *tb {
                        S::gemm(n, m, k, g, true, self.value(*a), *ta, db, S::one());
                    } else {
                        S::gemm(k, m, n, self.value(*a), !*ta, g, false, db, S::one());
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().map(|&v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(&d, &y)| d * y));
                self.accumulate(grads, *b, g.iter().zip(av).map(|(&d, &x)| d * x));
            }
            Op::AddRow { x, bias } => {
                self.accumulate(grads, *x, g.iter().copied());
                if self.requires(*bias) {
                    let n = numel(self.shape(*bias));
                    let db = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::MulCol { x, w } => {
                let (m, n) = dims2(self.shape(*x));
                let wv = self.value(*w);
                if self.requires(*x) {
                    let dx = slot(grads, *x, m * n);
                    for r in 0..m {
                        for j in 0..n {
                            dx[r * n + j] += g[r * n + j] * wv[r];
                        }
                    }
                }
                if self.requires(*w) {
                    let xv = self.value(*x).to_vec();
                    let dw = slot(grads, *w, m);
                    for r in 0..m {
                        dw[r] += (0..n).map(|j| g[r * n + j] * xv[r * n + j]).sum::<S>();
                    }
                }
            }
            Op::Scale { x, c } => self.accumulate(grads, *x, g.iter().map(|&d| d * *c)),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, g.iter().zip(xv).map(|(&d, &v)| d * gelu_grad(v)));
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, g.iter().zip(out).map(|(&d, &y)| d * y * (S::one() - y)));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (m, n) = dims2(self.shape(*x));
                let gv = self.value(*gain);
                if self.requires(*x) {
                    let nf = S::of(n as f64);
                    let dx = slot(grads, *x, m * n);
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let dxh: Vec<S> = g[row.clone()].iter().zip(gv).map(|(&d, &w)| d * w).collect();
                        let mean_d = dxh.iter().copied().sum::<S>() / nf;
                        let mean_dx = dxh.iter().zip(&xhat[row.clone()]).map(|(&a, &b)| a * b).sum::<S>() / nf;
                        for j in 0..n {
                            dx[r * n + j] += inv_std[r] * (dxh[j] - mean_d - xhat[r * n + j] * mean_dx);
                        }
                    }
                }
                if self.requires(*gain) {
                    let dg = slot(grads, *gain, n);
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if self.requires(*bias) {
                    let db = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if self.requires(*x) {
                    let (outer, len, inner) = (*outer, *len, *inner);
                    let dx = slot(grads, *x, out.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: S = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, probs, targets, count } => {
                if *count > 0 && self.requires(*logits) {
                    let v = dims2(self.shape(*logits)).1;
                    let scale = g[0] / S::of(*count as f64);
                    let dl = slot(grads, *logits, targets.len() * v);
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            dl[r * v + j] += probs[r * v + j] * scale;
                        }
                        dl[r * v + t] -= scale;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.requires(*x) {
                    let (m, n) = dims2(self.shape(*x));
                    let dx = slot(grads, *x, m * n);
                    for (r, &src) in idx.iter().enumerate() {
                        dx[src * n..(src + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::IndexAddRows { parts } => {
                let n = dims2(&node.shape).1;
                for (v, index) in parts {
                    if self.requires(*v) {
                        let dv = slot(grads, *v, index.len() * n);
                        for (r, &dst) in index.iter().enumerate() {
                            dv[r * n..(r + 1) * n].iter_mut().zip(&g[dst * n..(dst + 1) * n]).for_each(|(d, &u)| *d += u);
                        }
                    }
                }
            }
            Op::Slice { x, rows, cols } => {
                if self.requires(*x) {
                    let (m, n) = dims2(self.shape(*x));
                    let w = cols.len();
                    let dx = slot(grads, *x, m * n);
                    for (ri, r) in rows.clone().enumerate() {
                        dx[r * n + cols.start..r * n + cols.end]
                            .iter_mut()
                            .zip(&g[ri * w..(ri + 1) * w])
                            .for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = numel(self.shape(p));
                    self.accumulate(grads, p, g[offset..offset + len].iter().copied());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = dims2(&node.shape);
                let mut col = 0;
                for &p in parts {
                    let w = dims2(self.shape(p)).1;
                    if self.requires(p) {
                        let dp = slot(grads, p, m * w);
                        for r in 0..m {
                            dp[r * w..(r + 1) * w].iter_mut().zip(&g[r * n + col..r * n + col + w]).for_each(|(d, &v)| *d += v);
                        }
                    }
                    col += w;
                }
            }
            Op::SelectNormalized { probs, choices, sums } => {
                if self.requires(*probs) {
                    let (m, n) = dims2(self.shape(*probs));
                    let k = choices[0].len();
                    let dp = slot(grads, *probs, m * n);
                    for (t, c) in choices.iter().enumerate() {
                        let w = &out[t * k..(t + 1) * k];
                        let dw = &g[t * k..(t + 1) * k];
                        let dot: S = dw.iter().zip(w).map(|(&a, &b)| a * b).sum();
                        for (i, &j) in c.iter().enumerate() {
                            dp[t * n + j] += (dw[i] - dot) / sums[t];
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = dims2(self.shape(*x));
                let mf = S::of(m as f64);
                self.accumulate(grads, *x, (0..m * n).map(|i| g[i % n] / mf));
            }
            Op::Sum(x) => {
                let len = numel(self.shape(*x));
                self.accumulate(grads, *x, std::iter::repeat_n(g[0], len));
            }
            Op::DotConst { x, c } => self.accumulate(grads, *x, c.iter().map(|&v| v * g[0])),
            Op::Mse { x, target } => {
                let scale = S::of(2.0) * g[0] / S::of(target.len() as f64);
                let xv = self.value(*x);
                self.accumulate(grads, *x, xv.iter().zip(target).map(|(&a, &b)| (a - b) * scale));
            }
            Op::StraightThrough(x) | Op::Reshape(x) => self.accumulate(grads, *x, g.iter().copied()),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, g: impl Iterator<Item = S>) {
        if !self.requires(v) {
            return;
        }
        let len = numel(self.shape(v));
        let dst = slot(grads, v, len);
        dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
    }
}

fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

/// Result of one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    by_node: Vec<Option<Vec<S>>>,
    params: Vec<(ParamId, Vec<S>)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf created with [`Tape::leaf`].
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[S]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[S])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::<f64>::new();
        let i = tape.leaf(t(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.leaf(t(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn selector_row_matmul() {
        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(t(vec![2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let b = tape.leaf(t(vec![2, 1], &[5.0, 7.0]));
        let c = tape.matmul(s, b).unwrap();
        assert_eq!(tape.value(c), &[5.0, 0.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
        assert!(tape.matmul_nt(a, b).is_ok());
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![3, 2], &[0.0, 0.0, 1000.0, 0.0, 2.0, 1.0]));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 1.0).abs() < 1e-12 && v[3].abs() < 1e-12);
        assert!((v[4] - 0.7311).abs() < 1e-4 && (v[5] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_over_leading_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![2, 2], &[2.0, 0.0, 1.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 0.7311).abs() < 1e-4 && (v[2] - 0.2689).abs() < 1e-4);
        assert_eq!(v[1], 0.5);
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_constant_row_gives_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![1, 3], &[4.0, 4.0, 4.0]));
        let g = tape.leaf(t(vec![3], &[1.0, 2.0, 3.0]));
        let b = tape.leaf(t(vec![3], &[0.5, -0.5, 0.25]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.5, -0.5, 0.25]);
    }

    #[test]
    fn layer_norm_already_normalised_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![1, 2], &[1.0, -1.0]));
        let g = tape.leaf(t(vec![2], &[1.0, 1.0]));
        let b = tape.leaf(t(vec![2], &[0.0, 0.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 1.0).abs() < 1e-4 && (v[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn gelu_reference_points() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![4], &[0.0, 1.0, 20.0, -20.0]));
        let y = tape.gelu(x).unwrap();
        let v = tape.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.8412).abs() < 1e-3);
        assert!((v[2] - 20.0).abs() < 1e-9);
        assert!(v[3].abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_uniform_and_ignored() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::zeros(vec![2, 4]).with_grad());
        let ce = tape.cross_entropy(l, &[1, 3], u32::MAX).unwrap();
        assert!((tape.scalar_value(ce) - 4f64.ln()).abs() < 1e-12);

        let none = tape.cross_entropy(l, &[u32::MAX, u32::MAX], u32::MAX).unwrap();
        assert_eq!(tape.scalar_value(none), 0.0);
        let g = tape.backward(none).unwrap();
        assert!(g.get(l).map_or(true, |g| g.iter().all(|&v| v == 0.0)));
        assert!(tape.cross_entropy(l, &[4, 0], u32::MAX).is_err());
    }

    #[test]
    fn cross_entropy_sharp_logits_go_to_zero() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(t(vec![1, 3], &[0.0, 200.0, 0.0]));
        let ce = tape.cross_entropy(l, &[1], u32::MAX).unwrap();
        assert!(tape.scalar_value(ce) < 1e-12);
    }

    #[test]
    fn scalar_derivatives() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![1], &[2.0]).with_grad());
        let y = tape.scale(x, 3.0).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap(), &[3.0]);
        let sq = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(sq).unwrap().get(x).unwrap(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![2], &[1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shared_subexpression_gradients_sum() {
        // y = f(x) + f(x) against 2 f(x) with f = gelu
        let x0 = t(vec![3], &[-0.7, 0.2, 1.3]);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone().with_grad());
        let f = tape.gelu(x).unwrap();
        let y = tape.add(f, f).unwrap();
        let y = tape.sum(y).unwrap();
        let g1 = tape.backward(y).unwrap().get(x).unwrap().to_vec();

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x0.with_grad());
        let f = tape.gelu(x).unwrap();
        let y = tape.scale(f, 2.0).unwrap();
        let y = tape.sum(y).unwrap();
        let g2 = tape.backward(y).unwrap().get(x).unwrap().to_vec();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_param_reference_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t(vec![1], &[2.0]));
        let mut tape = Tape::with_params(&store);
        let a = tape.param(id);
        let b = tape.param(id);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param(id).unwrap(), &[4.0]);
        drop(tape);
        store.accumulate(&g);
        store.accumulate(&g);
        assert_eq!(store.get(id).grad().unwrap(), &[8.0]);
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![1, 3], &[5.0, 1.0, 1.0]));
        let y = tape.masked_softmax(x, &[false, true, true]).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn select_normalized_renormalises() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(t(vec![1, 3], &[0.5, 0.3, 0.2]));
        let w = tape.select_normalized(p, &[vec![0, 2]]).unwrap();
        let v = tape.value(w);
        assert!((v[0] - 0.5 / 0.7).abs() < 1e-15 && (v[1] - 0.2 / 0.7).abs() < 1e-15);
    }
}
