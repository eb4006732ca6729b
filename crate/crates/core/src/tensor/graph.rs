use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Vec<usize>>,
        scale: f64,
        probs: Vec<Vec<f64>>,
    },
    BceRows {
        p: Var,
        target: Vec<f64>,
    },
    KlRows {
        p: Var,
        q: Vec<f64>,
    },
    KlRowsVar {
        p: Var,
        q: Var,
    },
    SegmentMean {
        x: Var,
        segments: Vec<Vec<usize>>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::MeanAxis { x: a, .. }
            | Op::Gather { table: a, .. }
            | Op::BceRows { p: a, .. }
            | Op::KlRows { p: a, .. }
            | Op::SegmentMean { x: a, .. } => vec![*a],
            Op::KlRowsVar { p, q } => vec![*p, *q],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat { parts, .. } => parts.clone(),
            Op::SegmentAttention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Probabilities fed to the loss ops are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

/// Records operations in execution order; the record order is a valid
/// topological order, so backward is a single reverse sweep.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

fn matmul_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += a[m,n] · b[k,n]ᵀ
fn matmul_bt_into<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · c[m,n]
fn matmul_at_into<T: Scalar>(a: &[T], c: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += av * cv;
            }
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.f64() * y.f64()).sum()
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_node(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push_node(value, op, requires_grad))
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Leaves (trainable or not) that `v` depends on, ascending.
    pub fn leaf_ancestors(&self, v: Var) -> Vec<Var> {
        let mut seen = vec![false; v.0 + 1];
        let mut stack = vec![v];
        let mut leaves = Vec::new();
        while let Some(cur) = stack.pop() {
            if std::mem::replace(&mut seen[cur.0], true) {
                continue;
            }
            let node = &self.nodes[cur.0];
            match node.op {
                Op::Leaf => leaves.push(cur),
                _ => stack.extend(node.op.inputs()),
            }
        }
        leaves.sort();
        leaves
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push("matmul", Tensor::new(m, n, out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", Tensor::new(n, m, out)?, Op::Transpose(a))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<[usize; 2]> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, n] = self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        self.push("add", Tensor::new(m, n, out)?, Op::Add(a, b))
    }

    /// `a[m,n] + b[1,n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        if self.shape(b) != [1, n] {
            return Err(Error::Shape(format!(
                "row bias {:?} for {m}x{n}",
                self.shape(b)
            )));
        }
        let bias = self.value(b).data();
        let out = self
            .value(a)
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(bias).map(|(&x, &y)| x + y))
            .collect();
        self.push("add_row", Tensor::new(m, n, out)?, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, n] = self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        self.push("mul", Tensor::new(m, n, out)?, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let [m, n] = self.shape(a);
        let c = T::of(c);
        let out = self.value(a).data().iter().map(|&x| x * c).collect();
        self.push("scale", Tensor::new(m, n, out)?, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        self.push("relu", Tensor::new(m, n, out)?, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                let x = x.f64();
                // Split by sign so exp never overflows.
                let s = if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                };
                T::of(s)
            })
            .collect();
        self.push("sigmoid", Tensor::new(m, n, out)?, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(a).data().chunks(n.max(1)) {
            out.extend(softmax(row.iter().map(|v| v.f64())).into_iter().map(T::of));
        }
        self.push("softmax_rows", Tensor::new(m, n, out)?, Op::SoftmaxRows(a))
    }

    /// Per-row standardization followed by `gain ⊙ x̂ + bias`, with
    /// `gain` and `bias` of shape `[1, n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer norm eps {eps} must be positive")));
        }
        let [m, n] = self.shape(x);
        for (what, v) in [("gain", gain), ("bias", bias)] {
            if self.shape(v) != [1, n] {
                return Err(Error::Shape(format!(
                    "layer norm {what} {:?} for width {n}",
                    self.shape(v)
                )));
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(x).data().chunks(n.max(1)) {
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v.f64() - mean) * is;
                xhat.push(h);
                out.push(T::of(h * g[j].f64() + b[j].f64()));
            }
        }
        self.push(
            "layer_norm",
            Tensor::new(m, n, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Concatenation along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let [_, n0] = self.shape(*first);
        let [m0, _] = self.shape(*first);
        let out = match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let [m, n] = self.shape(p);
                    if n != n0 {
                        return Err(Error::Shape(format!("row concat widths {n0} and {n}")));
                    }
                    rows += m;
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(rows, n0, data)?
            }
            1 => {
                let mut cols = 0;
                for &p in parts {
                    let [m, n] = self.shape(p);
                    if m != m0 {
                        return Err(Error::Shape(format!("column concat heights {m0} and {m}")));
                    }
                    cols += n;
                }
                let mut data = Vec::with_capacity(m0 * cols);
                for i in 0..m0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::new(m0, cols, data)?
            }
            _ => return Err(Error::InvalidArgument(format!("concat axis {axis}"))),
        };
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Mean over rows (`axis = 0`, giving `[1, n]`) or columns (`axis = 1`,
    /// giving `[m, 1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let [m, n] = self.shape(x);
        let src = self.value(x);
        let out = match axis {
            0 => {
                let mut acc = vec![0.0f64; n];
                for i in 0..m {
                    for (a, v) in acc.iter_mut().zip(src.row(i)) {
                        *a += v.f64();
                    }
                }
                Tensor::new(1, n, acc.into_iter().map(|a| T::of(a / m as f64)).collect())?
            }
            1 => Tensor::new(
                m,
                1,
                (0..m)
                    .map(|i| T::of(src.row(i).iter().map(|v| v.f64()).sum::<f64>() / n as f64))
                    .collect(),
            )?,
            _ => return Err(Error::InvalidArgument(format!("mean axis {axis}"))),
        };
        self.push("mean_axis", out, Op::MeanAxis { x, axis })
    }

    /// Mean of all entries as a `[1, 1]` tensor.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let rows = self.mean_axis(x, 1)?;
        self.mean_axis(rows, 0)
    }

    /// Row lookup `table[ids[i]]`; the gradient scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let [m, n] = self.shape(table);
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            if i >= m {
                return Err(Error::Shape(format!("row {i} of a {m}-row table")));
            }
            out.extend_from_slice(src.row(i));
        }
        self.push(
            "gather_rows",
            Tensor::new(ids.len(), n, out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Scaled dot-product attention where query row `i` attends over the
    /// key/value rows listed in `segments[i]`:
    /// `out_i = Σ_j softmax_j(scale · q_i·k_{s_j}) v_{s_j}`.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Vec<usize>>,
        scale: f64,
    ) -> Result<Var> {
        let [mq, dq] = self.shape(q);
        let [mk, dk] = self.shape(k);
        let [mv, dv] = self.shape(v);
        if dq != dk || mk != mv || segments.len() != mq {
            return Err(Error::Shape(format!(
                "attention q {mq}x{dq}, k {mk}x{dk}, v {mv}x{dv}, {} segments",
                segments.len()
            )));
        }
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); mq * dv];
        let mut probs = Vec::with_capacity(mq);
        for (i, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(Error::Shape(format!("attention segment {i} is empty")));
            }
            if let Some(&bad) = seg.iter().find(|&&j| j >= mk) {
                return Err(Error::Shape(format!("attention index {bad} of {mk} keys")));
            }
            let qi = qt.row(i);
            let p = softmax(seg.iter().map(|&j| scale * dot(qi, kt.row(j))));
            let orow = &mut out[i * dv..(i + 1) * dv];
            let mut acc = vec![0.0f64; dv];
            for (&j, &pj) in seg.iter().zip(&p) {
                for (a, &x) in acc.iter_mut().zip(vt.row(j)) {
                    *a += pj * x.f64();
                }
            }
            for (o, a) in orow.iter_mut().zip(acc) {
                *o = T::of(a);
            }
            probs.push(p);
        }
        self.push(
            "segment_attention",
            Tensor::new(mq, dv, out)?,
            Op::SegmentAttention {
                q,
                k,
                v,
                segments,
                scale,
                probs,
            },
        )
    }

    fn check_targets(&self, p: Var, target: &[f64], what: &str) -> Result<[usize; 2]> {
        let shape = self.shape(p);
        if target.len() != shape[0] * shape[1] {
            return Err(Error::Shape(format!(
                "{what}: {} targets for {:?} predictions",
                target.len(),
                shape
            )));
        }
        Ok(shape)
    }

    /// Per-row binary cross-entropy averaged over columns, `[m, 1]`.
    /// `p` holds probabilities; `target` is a constant of the same size.
    pub fn bce_rows(&mut self, p: Var, target: &[f64]) -> Result<Var> {
        let [m, n] = self.check_targets(p, target, "bce")?;
        let pv = self.value(p).data();
        let out = (0..m)
            .map(|i| {
                let s: f64 = (0..n)
                    .map(|j| {
                        let pc = clamp_prob(pv[i * n + j].f64());
                        let y = target[i * n + j];
                        -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
                    })
                    .sum();
                T::of(s / n as f64)
            })
            .collect();
        self.push(
            "bce_rows",
            Tensor::new(m, 1, out)?,
            Op::BceRows {
                p,
                target: target.to_vec(),
            },
        )
    }

    /// Per-row Bernoulli KL divergence `KL(p ‖ q)` averaged over columns,
    /// `[m, 1]`. `q` is a constant: no gradient flows into it.
    pub fn kl_rows(&mut self, p: Var, q: &[f64]) -> Result<Var> {
        let [m, n] = self.check_targets(p, q, "kl")?;
        let pv = self.value(p).data();
        let out = (0..m)
            .map(|i| {
                let s: f64 = (0..n)
                    .map(|j| bernoulli_kl(pv[i * n + j].f64(), q[i * n + j]))
                    .sum();
                T::of(s / n as f64)
            })
            .collect();
        self.push(
            "kl_rows",
            Tensor::new(m, 1, out)?,
            Op::KlRows { p, q: q.to_vec() },
        )
    }

    /// Like [`Graph::kl_rows`] but with a differentiable target `q`.
    pub fn kl_rows_var(&mut self, p: Var, q: Var) -> Result<Var> {
        let [m, n] = self.same_shape(p, q, "kl")?;
        let (pv, qv) = (self.value(p).data(), self.value(q).data());
        let out = (0..m)
            .map(|i| {
                let s: f64 = (0..n)
                    .map(|j| bernoulli_kl(pv[i * n + j].f64(), qv[i * n + j].f64()))
                    .sum();
                T::of(s / n as f64)
            })
            .collect();
        self.push("kl_rows", Tensor::new(m, 1, out)?, Op::KlRowsVar { p, q })
    }

    /// Row `i` of the output is the mean of the rows of `x` listed in
    /// `segments[i]`.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<Vec<usize>>) -> Result<Var> {
        let [m, n] = self.shape(x);
        let src = self.value(x);
        let mut out = Vec::with_capacity(segments.len() * n);
        for (i, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(Error::Shape(format!("mean segment {i} is empty")));
            }
            let mut acc = vec![0.0f64; n];
            for &j in seg {
                if j >= m {
                    return Err(Error::Shape(format!("row {j} of a {m}-row tensor")));
                }
                for (a, v) in acc.iter_mut().zip(src.row(j)) {
                    *a += v.f64();
                }
            }
            out.extend(acc.into_iter().map(|a| T::of(a / seg.len() as f64)));
        }
        let rows = segments.len();
        self.push("segment_mean", Tensor::new(rows, n, out)?, Op::SegmentMean { x, segments })
    }

    /// Back-propagates from a `[1, 1]` output. A graph supports one backward
    /// pass; build a new graph for the next step.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.shape(output) != [1, 1] {
            return Err(Error::Shape(format!(
                "backward from a {:?} output",
                self.shape(output)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].requires_grad {
                let len = nodes[v.0].value.len();
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
                f(slot);
            }
        };
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [m, k] = val(*a).shape();
                let n = val(*b).cols();
                acc(*a, &mut |ga| matmul_bt_into(g, val(*b).data(), m, n, k, ga));
                acc(*b, &mut |gb| matmul_at_into(val(*a).data(), g, m, k, n, gb));
            }
            Op::Transpose(a) => {
                let [m, n] = val(*a).shape();
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |gv| gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                }
            }
            Op::AddRow(a, b) => {
                let n = val(*b).cols();
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(*b, &mut |gb| {
                    for row in g.chunks(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |ga| {
                    for ((x, &y), &bv) in ga.iter_mut().zip(g).zip(val(*b).data()) {
                        *x += y * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, &y), &av) in gb.iter_mut().zip(g).zip(val(*a).data()) {
                        *x += y * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c));
            }
            Op::Relu(a) => {
                acc(*a, &mut |ga| {
                    for ((x, &y), &o) in ga.iter_mut().zip(g).zip(out.data()) {
                        if o > T::zero() {
                            *x += y;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                acc(*a, &mut |ga| {
                    for ((x, &y), &s) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += y * s * (T::one() - s);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                acc(*a, &mut |ga| {
                    for ((gr, yr), xr) in g.chunks(n).zip(out.data().chunks(n)).zip(ga.chunks_mut(n)) {
                        let s = dot(gr, yr);
                        for ((x, &gy), &y) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += T::of(y.f64() * (gy.f64() - s));
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let [m, n] = val(*x).shape();
                let gv = val(*gain).data();
                acc(*gain, &mut |gg| {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += T::of(g[i * n + j].f64() * xhat[i * n + j]);
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                });
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        let dxhat: Vec<f64> = (0..n).map(|j| g[i * n + j].f64() * gv[j].f64()).collect();
                        let hrow = &xhat[i * n..(i + 1) * n];
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dh: f64 = dxhat.iter().zip(hrow).map(|(d, h)| d * h).sum();
                        let k = inv_std[i] / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += T::of(k * (n as f64 * dxhat[j] - sum_d - hrow[j] * sum_dh));
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let total_cols = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let [m, n] = val(p).shape();
                    if *axis == 0 {
                        let start = offset * total_cols;
                        acc(p, &mut |gp| {
                            gp.iter_mut()
                                .zip(&g[start..start + m * n])
                                .for_each(|(x, &y)| *x += y)
                        });
                        offset += m;
                    } else {
                        acc(p, &mut |gp| {
                            for i in 0..m {
                                let src = &g[i * total_cols + offset..i * total_cols + offset + n];
                                gp[i * n..(i + 1) * n]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(x, &y)| *x += y);
                            }
                        });
                        offset += n;
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let [m, n] = val(*x).shape();
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += if *axis == 0 {
                                T::of(g[j].f64() / m as f64)
                            } else {
                                T::of(g[i].f64() / n as f64)
                            };
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let n = val(*table).cols();
                acc(*table, &mut |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        gt[i * n..(i + 1) * n]
                            .iter_mut()
                            .zip(&g[r * n..(r + 1) * n])
                            .for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::SegmentAttention {
                q,
                k,
                v,
                segments,
                scale,
                probs,
            } => {
                let (qt, kt, vt) = (val(*q), val(*k), val(*v));
                let dq = qt.cols();
                let dv = vt.cols();
                // Score gradients first; they feed both q and k.
                let dscores: Vec<Vec<f64>> = segments
                    .iter()
                    .zip(probs)
                    .enumerate()
                    .map(|(i, (seg, p))| {
                        let go = &g[i * dv..(i + 1) * dv];
                        let dp: Vec<f64> = seg.iter().map(|&j| dot(go, vt.row(j))).collect();
                        let s: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                        p.iter().zip(&dp).map(|(pj, dpj)| pj * (dpj - s)).collect()
                    })
                    .collect();
                acc(*v, &mut |gv| {
                    for (i, (seg, p)) in segments.iter().zip(probs).enumerate() {
                        let go = &g[i * dv..(i + 1) * dv];
                        for (&j, &pj) in seg.iter().zip(p) {
                            for (x, &y) in gv[j * dv..(j + 1) * dv].iter_mut().zip(go) {
                                *x += T::of(pj * y.f64());
                            }
                        }
                    }
                });
                acc(*q, &mut |gq| {
                    for (i, (seg, ds)) in segments.iter().zip(&dscores).enumerate() {
                        let row = &mut gq[i * dq..(i + 1) * dq];
                        for (&j, &d) in seg.iter().zip(ds) {
                            for (x, &kv) in row.iter_mut().zip(kt.row(j)) {
                                *x += T::of(scale * d * kv.f64());
                            }
                        }
                    }
                });
                acc(*k, &mut |gk| {
                    for (i, (seg, ds)) in segments.iter().zip(&dscores).enumerate() {
                        let qi = qt.row(i);
                        for (&j, &d) in seg.iter().zip(ds) {
                            for (x, &qv) in gk[j * dq..(j + 1) * dq].iter_mut().zip(qi) {
                                *x += T::of(scale * d * qv.f64());
                            }
                        }
                    }
                });
            }
            Op::BceRows { p, target } => {
                let n = val(*p).cols();
                let pv = val(*p).data();
                acc(*p, &mut |gp| {
                    for (idx, (x, &y)) in gp.iter_mut().zip(target).enumerate() {
                        let raw = pv[idx].f64();
                        let pc = clamp_prob(raw);
                        if pc != raw {
                            continue;
                        }
                        let d = (-y / pc + (1.0 - y) / (1.0 - pc)) / n as f64;
                        *x += T::of(g[idx / n].f64() * d);
                    }
                });
            }
            Op::KlRows { p, q } => {
                let n = val(*p).cols();
                let pv = val(*p).data();
                acc(*p, &mut |gp| {
                    for (idx, (x, &qv)) in gp.iter_mut().zip(q).enumerate() {
                        let raw = pv[idx].f64();
                        let pc = clamp_prob(raw);
                        if pc != raw {
                            continue;
                        }
                        let qc = clamp_prob(qv);
                        let d = ((pc / qc).ln() - ((1.0 - pc) / (1.0 - qc)).ln()) / n as f64;
                        *x += T::of(g[idx / n].f64() * d);
                    }
                });
            }
            Op::KlRowsVar { p, q } => {
                let n = val(*p).cols();
                let (pv, qv) = (val(*p).data(), val(*q).data());
                let clamped = |x: f64| (clamp_prob(x), clamp_prob(x) == x);
                acc(*p, &mut |gp| {
                    for (idx, x) in gp.iter_mut().enumerate() {
                        let (pc, inside) = clamped(pv[idx].f64());
                        if !inside {
                            continue;
                        }
                        let qc = clamp_prob(qv[idx].f64());
                        let d = ((pc / qc).ln() - ((1.0 - pc) / (1.0 - qc)).ln()) / n as f64;
                        *x += T::of(g[idx / n].f64() * d);
                    }
                });
                acc(*q, &mut |gq| {
                    for (idx, x) in gq.iter_mut().enumerate() {
                        let (qc, inside) = clamped(qv[idx].f64());
                        if !inside {
                            continue;
                        }
                        let pc = clamp_prob(pv[idx].f64());
                        let d = (-pc / qc + (1.0 - pc) / (1.0 - qc)) / n as f64;
                        *x += T::of(g[idx / n].f64() * d);
                    }
                });
            }
            Op::SegmentMean { x, segments } => {
                let n = val(*x).cols();
                acc(*x, &mut |gx| {
                    for (i, seg) in segments.iter().enumerate() {
                        let w = 1.0 / seg.len() as f64;
                        for &j in seg {
                            for (a, &y) in gx[j * n..(j + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *a += T::of(w * y.f64());
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn softmax(xs: impl Iterator<Item = f64>) -> Vec<f64> {
    let xs: Vec<f64> = xs.collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Bernoulli KL divergence `KL(p ‖ q)` with both arguments clamped.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let (p, q) = (clamp_prob(p), clamp_prob(q));
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}

/// Binary cross-entropy of one clamped probability against a 0/1 target.
pub fn binary_cross_entropy(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}
