//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Tensor`] is a plain value: shape, row-major data, and an optional
//! gradient buffer. Computation happens on a [`Graph`], which records every
//! operation as a node in creation order. Because parents are always created
//! before their children, the node list is already a topological order and
//! [`Graph::backward`] is a single reverse sweep that visits each node once.
//!
//! Broadcasting is limited to scalar-vs-tensor for the elementwise ops. The
//! only other implicit expansion is [`Graph::bias_add`], which adds a
//! per-channel vector along dimension 1.

use serde::{Deserialize, Serialize};

use crate::activations::Family;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// One-dimensional tensor over `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![0.0] } else { data };
        Self {
            shape: vec![n],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn is_learnable(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// First element; convenient for scalar tensors.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows `[start, end)` along the leading dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * row..end * row].to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Gathers the given rows along the leading dimension.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            data.extend_from_slice(&self.data[r * row..(r + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive and rank at least 1".into(),
        });
    }
    Ok(())
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Exp(usize),
    Log1p(usize),
    Sigmoid(usize),
    Abs(usize),
    Scale(usize, f64),
    MaxScalar(usize, f64),
    Where(Vec<bool>, usize, usize),
    MatMul(usize, usize),
    BiasAdd(usize, usize),
    Conv2d {
        x: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },
    Reshape(usize),
    Reduce {
        a: usize,
        kind: Reduce,
        axis: Option<usize>,
        /// Flat source index of each output element (max only).
        argmax: Vec<usize>,
    },
    Paf {
        family: Family,
        x: usize,
        alpha: usize,
        beta: usize,
    },
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Kl {
        p: usize,
        q: usize,
        p_probs: Vec<f64>,
        q_probs: Vec<f64>,
        log_ratio: Vec<f64>,
        row_kl: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of operations. Create one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `t` as a leaf. It receives gradients iff `t` requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape.clone(), t.data.clone(), false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push_leaf(vec![1], vec![value], false)
    }

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_leaf(t.shape, t.data, requires_grad))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: false,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Copies the node's current value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Accumulated gradient of a requires-grad leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise ----

    fn binary_shape(&self, op: &'static str, a: usize, b: usize) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        let (na, nb) = (self.nodes[a].value.len(), self.nodes[b].value.len());
        if sa == sb || nb == 1 {
            Ok(sa.clone())
        } else if na == 1 {
            Ok(sb.clone())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.binary_shape(name, a.0, b.0)?;
        let n: usize = shape.iter().product();
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = (0..n)
            .map(|i| f(va[if va.len() == 1 { 0 } else { i }], vb[if vb.len() == 1 { 0 } else { i }]))
            .collect();
        Ok(self.push(shape, value, op, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let node = &self.nodes[a.0];
        let value = node.value.iter().map(|&x| f(x)).collect();
        let shape = node.shape.clone();
        self.push(shape, value, op, &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn log1p(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln_1p, Op::Log1p(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    /// Elementwise `|a|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a.0, c))
    }

    /// Elementwise `max(a, c)`; gradient flows only where `a > c`.
    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x.max(c), Op::MaxScalar(a.0, c))
    }

    /// Picks `a` where `mask` is true and `b` elsewhere.
    pub fn where_(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("where", a.0, b.0)?;
        let n: usize = shape.iter().product();
        if mask.len() != n {
            return Err(Error::ShapeMismatch {
                op: "where",
                lhs: vec![mask.len()],
                rhs: shape,
            });
        }
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = (0..n)
            .map(|i| {
                if mask[i] {
                    va[if va.len() == 1 { 0 } else { i }]
                } else {
                    vb[if vb.len() == 1 { 0 } else { i }]
                }
            })
            .collect();
        Ok(self.push(shape, value, Op::Where(mask.to_vec(), a.0, b.0), &[a.0, b.0]))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_raw(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        Ok(self.push(vec![m, n], value, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds `bias[c]` to every element of channel `c` (dimension 1).
    pub fn bias_add(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let nb = self.nodes[bias.0].value.len();
        if sa.len() < 2 || sa[1] != nb {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                lhs: sa,
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let inner: usize = sa[2..].iter().product();
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[bias.0].value;
        let value = va
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb[(i / inner) % nb])
            .collect();
        Ok(self.push(sa, value, Op::BiasAdd(a.0, bias.0), &[a.0, bias.0]))
    }

    /// 2-D cross-correlation of `x[N,C,H,W]` with `k[O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.nodes[x.0].shape.clone(), self.nodes[k.0].shape.clone());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        let geo = ConvGeometry::new(&sx, &sk, stride, padding)?;
        let value = geo.forward(&self.nodes[x.0].value, &self.nodes[k.0].value);
        Ok(self.push(
            vec![geo.n, geo.o, geo.oh, geo.ow],
            value,
            Op::Conv2d {
                x: x.0,
                k: k.0,
                stride,
                padding,
            },
            &[x.0, k.0],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.nodes[a.0].value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let value = self.nodes[a.0].value.clone();
        Ok(self.push(shape, value, Op::Reshape(a.0), &[a.0]))
    }

    /// Collapses all dimensions after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        let rest: usize = s[1..].iter().product();
        let n = s[0];
        self.reshape(a, vec![n, rest.max(1)])
    }

    // ---- reductions ----

    pub fn reduce(&mut self, kind: Reduce, a: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, self.nodes[a.0].value.len(), 1, vec![1]),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::InvalidAxis {
                        axis: ax,
                        rank: shape.len(),
                    });
                }
                let outer: usize = shape[..ax].iter().product();
                let inner: usize = shape[ax + 1..].iter().product();
                let mut out: Vec<usize> = shape[..ax].iter().chain(&shape[ax + 1..]).copied().collect();
                if out.is_empty() {
                    out.push(1);
                }
                (outer, shape[ax], inner, out)
            }
        };
        let va = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let s: f64 = (0..len).map(|j| va[idx(j)]).sum();
                        value.push(if kind == Reduce::Mean { s / len as f64 } else { s });
                    }
                    Reduce::Max => {
                        // strict `>` keeps the lowest flat index on ties
                        let mut best = idx(0);
                        for j in 1..len {
                            if va[idx(j)] > va[best] {
                                best = idx(j);
                            }
                        }
                        value.push(va[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        Ok(self.push(
            out_shape,
            value,
            Op::Reduce {
                a: a.0,
                kind,
                axis,
                argmax,
            },
            &[a.0],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(Reduce::Sum, a, None).expect("full reduction cannot fail")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(Reduce::Mean, a, None).expect("full reduction cannot fail")
    }

    // ---- fused ops ----

    /// Applies a parametric activation elementwise. `alpha` and `beta` are
    /// single-element nodes shared by every call site that passes them, so
    /// their gradients sum over all sites.
    pub fn paf(&mut self, family: Family, x: Var, alpha: Var, beta: Var) -> Result<Var> {
        for p in [alpha, beta] {
            if self.nodes[p.0].value.len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "paf parameter",
                    lhs: self.nodes[p.0].shape.clone(),
                    rhs: vec![1],
                });
            }
        }
        let (a, b) = (self.nodes[alpha.0].value[0], self.nodes[beta.0].value[0]);
        let value = self.nodes[x.0].value.iter().map(|&v| family.eval(v, a, b)).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(
            shape,
            value,
            Op::Paf {
                family,
                x: x.0,
                alpha: alpha.0,
                beta: beta.0,
            },
            &[x.0, alpha.0, beta.0],
        ))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let z = &self.nodes[logits.0].value;
        let mut probs = Vec::with_capacity(z.len());
        let mut total = 0.0;
        for (row, &y) in z.chunks(k).zip(labels) {
            let (lse, p) = log_softmax_parts(row);
            total += lse - row[y];
            probs.extend(p);
        }
        let n = labels.len() as f64;
        Ok(self.push(
            vec![1],
            vec![total / n],
            Op::SoftmaxCe {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            &[logits.0],
        ))
    }

    /// Batch-mean `KL(softmax(p) || softmax(q))`.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (sp, sq) = (self.nodes[p.0].shape.clone(), self.nodes[q.0].shape.clone());
        if sp != sq || sp.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "kl_divergence",
                lhs: sp,
                rhs: sq,
            });
        }
        let k = sp[1];
        let (zp, zq) = (&self.nodes[p.0].value, &self.nodes[q.0].value);
        let mut p_probs = Vec::with_capacity(zp.len());
        let mut q_probs = Vec::with_capacity(zp.len());
        let mut log_ratio = Vec::with_capacity(zp.len());
        let mut row_kl = Vec::with_capacity(sp[0]);
        for (rp, rq) in zp.chunks(k).zip(zq.chunks(k)) {
            let (lse_p, pp) = log_softmax_parts(rp);
            let (lse_q, pq) = log_softmax_parts(rq);
            let mut kl = 0.0;
            for j in 0..k {
                // log p_j - log q_j, with both log-softmaxes kept in shifted form
                let lr = (rp[j] - lse_p) - (rq[j] - lse_q);
                kl += pp[j] * lr;
                log_ratio.push(lr);
            }
            row_kl.push(kl);
            p_probs.extend(pp);
            q_probs.extend(pq);
        }
        let value = row_kl.iter().sum::<f64>() / sp[0] as f64;
        Ok(self.push(
            vec![1],
            vec![value],
            Op::Kl {
                p: p.0,
                q: q.0,
                p_probs,
                q_probs,
                log_ratio,
                row_kl,
            },
            &[p.0, q.0],
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a single-element output. Gradients are added into
    /// every requires-grad leaf; calling twice accumulates twice.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.nodes[out.0].value.len() != 1 {
            return Err(Error::NonScalarBackward(self.nodes[out.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                match &mut node.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| self.nodes[j].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    send_broadcast(grads, *a, val(*a).len(), g.to_vec());
                }
                if wants(*b) {
                    send_broadcast(grads, *b, val(*b).len(), g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    send_broadcast(grads, *a, val(*a).len(), g.to_vec());
                }
                if wants(*b) {
                    send_broadcast(grads, *b, val(*b).len(), g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    let ga = g.iter().enumerate().map(|(k, x)| x * pick(vb, k)).collect();
                    send_broadcast(grads, *a, va.len(), ga);
                }
                if wants(*b) {
                    let gb = g.iter().enumerate().map(|(k, x)| x * pick(va, k)).collect();
                    send_broadcast(grads, *b, vb.len(), gb);
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    let ga = g.iter().enumerate().map(|(k, x)| x / pick(vb, k)).collect();
                    send_broadcast(grads, *a, va.len(), ga);
                }
                if wants(*b) {
                    let gb = g
                        .iter()
                        .enumerate()
                        .map(|(k, x)| -x * pick(va, k) / (pick(vb, k) * pick(vb, k)))
                        .collect();
                    send_broadcast(grads, *b, vb.len(), gb);
                }
            }
            Op::Exp(a) => {
                let ga = g.iter().zip(&node.value).map(|(x, y)| x * y).collect();
                send(grads, *a, ga);
            }
            Op::Log1p(a) => {
                let ga = g.iter().zip(val(*a)).map(|(x, v)| x / (1.0 + v)).collect();
                send(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.iter().zip(&node.value).map(|(x, s)| x * s * (1.0 - s)).collect();
                send(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = g.iter().zip(val(*a)).map(|(x, v)| x * sign(*v)).collect();
                send(grads, *a, ga);
            }
            Op::Scale(a, c) => send(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::MaxScalar(a, c) => {
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(x, v)| if v > c { *x } else { 0.0 })
                    .collect();
                send(grads, *a, ga);
            }
            Op::Where(mask, a, b) => {
                if wants(*a) {
                    let ga = g.iter().zip(mask).map(|(x, &m)| if m { *x } else { 0.0 }).collect();
                    send_broadcast(grads, *a, val(*a).len(), ga);
                }
                if wants(*b) {
                    let gb = g.iter().zip(mask).map(|(x, &m)| if m { 0.0 } else { *x }).collect();
                    send_broadcast(grads, *b, val(*b).len(), gb);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let bt = transpose(val(*b), k, n);
                    send(grads, *a, matmul_raw(g, &bt, m, n, k));
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let at = transpose(val(*a), m, k);
                    send(grads, *b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::BiasAdd(a, bias) => {
                if wants(*a) {
                    send(grads, *a, g.to_vec());
                }
                if wants(*bias) {
                    let nb = val(*bias).len();
                    let inner: usize = node.shape[2..].iter().product();
                    let mut gb = vec![0.0; nb];
                    for (idx, x) in g.iter().enumerate() {
                        gb[(idx / inner) % nb] += x;
                    }
                    send(grads, *bias, gb);
                }
            }
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
            } => {
                let geo = ConvGeometry::new(&self.nodes[*x].shape, &self.nodes[*k].shape, *stride, *padding)
                    .expect("geometry validated in forward");
                if wants(*x) {
                    send(grads, *x, geo.grad_input(g, val(*k)));
                }
                if wants(*k) {
                    send(grads, *k, geo.grad_kernel(g, val(*x)));
                }
            }
            Op::Reshape(a) => send(grads, *a, g.to_vec()),
            Op::Reduce { a, kind, axis, argmax } => {
                let shape = &self.nodes[*a].shape;
                let total = val(*a).len();
                let mut ga = vec![0.0; total];
                match kind {
                    Reduce::Max => {
                        for (src, x) in argmax.iter().zip(g) {
                            ga[*src] += x;
                        }
                    }
                    Reduce::Sum | Reduce::Mean => {
                        let (len, inner) = match axis {
                            None => (total, 1),
                            Some(ax) => (shape[*ax], shape[ax + 1..].iter().product()),
                        };
                        let scale = if *kind == Reduce::Mean { 1.0 / len as f64 } else { 1.0 };
                        for (idx, slot) in ga.iter_mut().enumerate() {
                            let o = idx / (len * inner);
                            let i = idx % inner;
                            *slot = g[o * inner + i] * scale;
                        }
                    }
                }
                send(grads, *a, ga);
            }
            Op::Paf {
                family,
                x,
                alpha,
                beta,
            } => {
                let (a, b) = (val(*alpha)[0], val(*beta)[0]);
                let vx = val(*x);
                if wants(*x) {
                    let gx = g.iter().zip(vx).map(|(u, &v)| u * family.grad_x(v, a, b)).collect();
                    send(grads, *x, gx);
                }
                if wants(*alpha) {
                    let ga: f64 = g.iter().zip(vx).map(|(u, &v)| u * family.grad_alpha(v, a, b)).sum();
                    send(grads, *alpha, vec![ga]);
                }
                if wants(*beta) {
                    let gb: f64 = g.iter().zip(vx).map(|(u, &v)| u * family.grad_beta(v, a, b)).sum();
                    send(grads, *beta, vec![gb]);
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = self.nodes[*logits].shape[1];
                let scale = g[0] / labels.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &y) in labels.iter().enumerate() {
                    gl[row * k + y] -= scale;
                }
                send(grads, *logits, gl);
            }
            Op::Kl {
                p,
                q,
                p_probs,
                q_probs,
                log_ratio,
                row_kl,
            } => {
                let k = self.nodes[*p].shape[1];
                let scale = g[0] / row_kl.len() as f64;
                if wants(*p) {
                    let gp = (0..p_probs.len())
                        .map(|j| scale * p_probs[j] * (log_ratio[j] - row_kl[j / k]))
                        .collect();
                    send(grads, *p, gp);
                }
                if wants(*q) {
                    let gq = (0..q_probs.len()).map(|j| scale * (q_probs[j] - p_probs[j])).collect();
                    send(grads, *q, gq);
                }
            }
        }
    }
}

fn pick(v: &[f64], k: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[k]
    }
}

fn send(grads: &mut [Option<Vec<f64>>], to: usize, g: Vec<f64>) {
    match &mut grads[to] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
        slot @ None => *slot = Some(g),
    }
}

/// Sends `g` to a parent, summing it down when the parent was a broadcast scalar.
fn send_broadcast(grads: &mut [Option<Vec<f64>>], to: usize, parent_len: usize, g: Vec<f64>) {
    if parent_len == 1 && g.len() != 1 {
        send(grads, to, vec![g.iter().sum()]);
    } else {
        send(grads, to, g);
    }
}

/// `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Logistic sigmoid, branching on sign so neither tail overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Returns `(logsumexp(row), softmax(row))`.
pub fn log_softmax_parts(row: &[f64]) -> (f64, Vec<f64>) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    (m + s.ln(), exps.into_iter().map(|e| e / s).collect())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(sx: &[usize], sk: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::InvalidShape {
                shape: sk.to_vec(),
                reason: format!("kernel larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            });
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        })
    }

    /// Visits every (output, input, kernel) flat-index triple with an in-bounds input.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.n {
            for oc in 0..self.o {
                for oy in 0..self.oh {
                    for ox in 0..self.ow {
                        let out = ((b * self.o + oc) * self.oh + oy) * self.ow + ox;
                        for ic in 0..self.c {
                            for ky in 0..self.kh {
                                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                                if iy < 0 || iy >= self.h as isize {
                                    continue;
                                }
                                for kx in 0..self.kw {
                                    let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                    if ix < 0 || ix >= self.w as isize {
                                        continue;
                                    }
                                    let inp = ((b * self.c + ic) * self.h + iy as usize) * self.w + ix as usize;
                                    let ker = ((oc * self.c + ic) * self.kh + ky) * self.kw + kx;
                                    f(out, inp, ker);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n * self.o * self.oh * self.ow];
        self.for_each(|out, inp, ker| y[out] += x[inp] * k[ker]);
        y
    }

    fn grad_input(&self, g: &[f64], k: &[f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.n * self.c * self.h * self.w];
        self.for_each(|out, inp, ker| gx[inp] += g[out] * k[ker]);
        gx
    }

    fn grad_kernel(&self, g: &[f64], x: &[f64]) -> Vec<f64> {
        let mut gk = vec![0.0; self.o * self.c * self.kh * self.kw];
        self.for_each(|out, inp, ker| gk[ker] += g[out] * x[inp]);
        gk
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1.0) - 0.731_058_578_630_004_9).abs() < 1e-6);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!(sigmoid(-800.0).is_finite());
    }

    #[test]
    fn add_elementwise_and_scalar() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[2], &[1.0, 2.0]));
        let b = g.constant(&t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c), &[4.0, 6.0]);
        let s = g.scalar(10.0);
        let d = g.mul(a, s).unwrap();
        assert_eq!(g.value(d), &[10.0, 20.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2]));
        let b = g.constant(&Tensor::zeros(&[3]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn matmul_identity_and_row() {
        let mut g = Graph::new();
        let i2 = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let r = g.constant(&t(&[1, 2], &[1.0, 0.0]));
        let col = g.constant(&t(&[2, 1], &[2.0, 3.0]));
        let q = g.matmul(r, col).unwrap();
        assert_eq!(g.value(q), &[2.0]);
        assert!(g.matmul(col, col).is_err());
    }

    #[test]
    fn matmul_grad_is_ones_times_b_transpose() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 1.0, -1.0]).requires_grad(true));
        let b = g.constant(&t(&[3, 2], &[0.3, -0.7, 1.1, 2.0, -0.4, 0.9]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        // row sums of B, repeated for each row of A
        let expect = [-0.4, 3.1, 0.5, -0.4, 3.1, 0.5];
        for (x, e) in g.grad(a).unwrap().iter().zip(expect) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_identity_and_sum() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let k = g.constant(&t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let ones = g.constant(&Tensor::full(&[1, 1, 2, 2], 1.0));
        let k2 = g.constant(&Tensor::full(&[1, 1, 2, 2], 1.0));
        let z = g.conv2d(ones, k2, 1, 0).unwrap();
        assert_eq!(g.value(z), &[4.0]);
        assert_eq!(g.shape(z), &[1, 1, 1, 1]);

        let big = g.constant(&Tensor::full(&[1, 1, 3, 3], 1.0));
        assert!(g.conv2d(ones, big, 1, 0).is_err());
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(a);
        assert_eq!(g.item(s), 6.0);
        let c = g.constant(&Tensor::full(&[2, 3], 1.25));
        let m = g.mean(c);
        assert_eq!(g.item(m), 1.25);
        let m2 = g.constant(&t(&[2, 3], &[1.0, 5.0, 2.0, 7.0, 0.0, 7.0]));
        let rows = g.reduce(Reduce::Max, m2, Some(1)).unwrap();
        assert_eq!(g.value(rows), &[5.0, 7.0]);
        let cols = g.reduce(Reduce::Sum, m2, Some(0)).unwrap();
        assert_eq!(g.value(cols), &[8.0, 5.0, 9.0]);
        assert!(matches!(
            g.reduce(Reduce::Sum, m2, Some(2)),
            Err(Error::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn max_backward_tie_goes_to_lowest_index() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[3], &[3.0, 5.0, 5.0]).requires_grad(true));
        let m = g.reduce(Reduce::Max, a, None).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn square_gradient_and_accumulation() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::scalar(3.0).requires_grad(true));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn shared_leaf_sums_site_gradients() {
        let mut g = Graph::new();
        let alpha = g.leaf(&Tensor::scalar(0.7).requires_grad(true));
        let x1 = g.scalar(2.0);
        let x2 = g.scalar(-5.0);
        let a = g.mul(alpha, x1).unwrap();
        let b = g.mul(alpha, x2).unwrap();
        let s = g.add(a, b).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(alpha).unwrap(), &[-3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2]).requires_grad(true));
        assert!(matches!(g.backward(a), Err(Error::NonScalarBackward(_))));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::new();
        let z = g.constant(&t(&[1, 2], &[0.0, 0.0]));
        let l = g.softmax_cross_entropy(z, &[1]).unwrap();
        assert!((g.item(l) - std::f64::consts::LN_2).abs() < 1e-12);

        let big = g.constant(&t(&[1, 2], &[1000.0, -1000.0]));
        let l2 = g.softmax_cross_entropy(big, &[0]).unwrap();
        assert_eq!(g.item(l2), 0.0);

        assert!(matches!(
            g.softmax_cross_entropy(z, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let z = g.leaf(&t(&[1, 3], &[0.2, -1.0, 0.5]).requires_grad(true));
        let l = g.softmax_cross_entropy(z, &[2]).unwrap();
        g.backward(l).unwrap();
        let (_, p) = log_softmax_parts(&[0.2, -1.0, 0.5]);
        let grad = g.grad(z).unwrap();
        assert!((grad[0] - p[0]).abs() < 1e-14);
        assert!((grad[1] - p[1]).abs() < 1e-14);
        assert!((grad[2] - (p[2] - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn kl_self_is_zero_and_shape_checked() {
        let mut g = Graph::new();
        let p = g.constant(&t(&[2, 3], &[0.1, 2.0, -1.0, 3.0, 0.0, 0.0]));
        let kl = g.kl_divergence(p, p).unwrap();
        assert_eq!(g.item(kl), 0.0);
        let q = g.constant(&Tensor::zeros(&[2, 2]));
        assert!(g.kl_divergence(p, q).is_err());
    }

    #[test]
    fn where_routes_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[3], &[1.0, 2.0, 3.0]).requires_grad(true));
        let b = g.leaf(&t(&[3], &[-1.0, -2.0, -3.0]).requires_grad(true));
        let w = g.where_(&[true, false, true], a, b).unwrap();
        assert_eq!(g.value(w), &[1.0, -2.0, 3.0]);
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 0.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::scalar(2.0));
        let x = g.leaf(&Tensor::scalar(1.0).requires_grad(true));
        let y = g.mul(a, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }
}
