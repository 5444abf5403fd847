//! Reverse-mode automatic differentiation over an explicitly recorded graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Each method appends one
//! node holding its computed value and enough saved state to run the adjoint.
//! [`Graph::backward`] walks the nodes in reverse insertion order, which is a
//! valid topological order because a node can only reference earlier nodes.
//!
//! Parameters enter the graph by reference, so a forward pass over a large
//! model copies no weights. Their gradients come back as a [`Gradients`]
//! value that the caller folds into the parameters once the graph is gone.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::optim::{ParamId, Parameter};
use crate::tensor::{ensure_finite, Scalar, Tensor};

/// Lower/upper clamp applied to probabilities inside the BCE loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<S> {
    Input,
    Param(ParamId),
    MatMul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Reshape(NodeId),
    Add(NodeId, NodeId),
    /// `b` repeated end-to-end to cover `a`.
    AddTiled(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Vec<S>),
    Scale(NodeId, S),
    Sum(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    SoftmaxRows {
        x: NodeId,
        cols: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        cols: usize,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    SplitHeads {
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    MergeHeads {
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    Stack(Vec<NodeId>),
    PositionwiseDot {
        h: NodeId,
        w: NodeId,
        batch: usize,
        positions: usize,
        dim: usize,
    },
    Bce {
        probs: NodeId,
        labels: Vec<S>,
    },
    TransitionPenalty {
        probs: NodeId,
        lambda: S,
        batch: usize,
        positions: usize,
    },
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, [S]>,
    shape: Vec<usize>,
    op: Op<S>,
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients<S> {
    by_param: BTreeMap<ParamId, Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ParamId) -> Option<&[S]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[S])> {
        self.by_param.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    /// Adds every gradient into the matching parameter's gradient buffer.
    pub fn accumulate_into(&self, params: &mut [Parameter<S>]) -> Result<()> {
        for (id, g) in &self.by_param {
            let p = params.get_mut(id.0).ok_or_else(|| {
                Error::Contract(format!("gradient for unknown parameter {}", id.0))
            })?;
            p.tensor.accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// A recorded forward computation.
pub struct Graph<'a, S: Scalar = f32> {
    nodes: Vec<Node<'a, S>>,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Graph { nodes: Vec::new() }
    }
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [S]>, shape: Vec<usize>, op: Op<S>) -> NodeId {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<S> {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    /// Records a constant with no gradient.
    pub fn input(&mut self, t: Tensor<S>) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Input)
    }

    pub fn input_ref(&mut self, t: &'a Tensor<S>) -> NodeId {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Input)
    }

    /// Records a parameter leaf; its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, p: &'a Parameter<S>) -> NodeId {
        self.push(
            Cow::Borrowed(p.tensor.data()),
            p.tensor.shape().to_vec(),
            Op::Param(id),
        )
    }

    /// Matrix product. Accepts `[m, k] x [k, n]`, or batched
    /// `[g, m, k] x [g, k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// Product with the second operand transposed: `[.., m, k] x [.., n, k]^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, b_rows, b_cols) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [r, c]) => (1, *m, *k, *r, *c),
            ([g, m, k], [g2, r, c]) if g == g2 => (*g, *m, *k, *r, *c),
            _ => {
                return Err(Error::Dimension(format!(
                    "matmul operands {sa:?} and {sb:?}"
                )))
            }
        };
        let (inner, n) = if transpose_b {
            (b_cols, b_rows)
        } else {
            (b_rows, b_cols)
        };
        if inner != k {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {sa:?} x {sb:?}{}",
                if transpose_b { "^T" } else { "" }
            )));
        }
        let mut out = vec![S::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for g in 0..batch {
                let ab = &av[g * m * k..(g + 1) * m * k];
                let bb = &bv[g * k * n..(g + 1) * k * n];
                let ob = &mut out[g * m * n..(g + 1) * m * n];
                if transpose_b {
                    kernel_nt(ab, bb, ob, m, k, n);
                } else {
                    kernel_nn(ab, bb, ob, m, k, n);
                }
            }
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            },
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let value = match &self.nodes[a.0].value {
            Cow::Borrowed(v) => Cow::Borrowed(*v),
            Cow::Owned(v) => Cow::Owned(v.clone()),
        };
        Ok(self.push(value, shape, Op::Reshape(a)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add operands {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Add(a, b)))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s, i.e. `b` is broadcast
    /// over `a`'s leading dimensions. Covers bias rows and positional tables.
    pub fn add_tiled(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || !sa.ends_with(sb) || sb.is_empty() {
            return Err(Error::Dimension(format!(
                "cannot broadcast {sb:?} over {sa:?}"
            )));
        }
        let bv = self.value(b);
        let out: Vec<S> = self
            .value(a)
            .chunks(bv.len())
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(x, y)| *x + *y))
            .collect();
        let shape = sa.to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::AddTiled(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "mul operands {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Mul(a, b)))
    }

    /// Element-wise product with a constant factor (dropout masks).
    pub fn mul_const(&mut self, a: NodeId, factor: Vec<S>) -> Result<NodeId> {
        if factor.len() != self.value(a).len() {
            return Err(Error::Dimension(format!(
                "constant factor of length {} for shape {:?}",
                factor.len(),
                self.shape(a)
            )));
        }
        let out: Vec<S> = self
            .value(a)
            .iter()
            .zip(&factor)
            .map(|(x, f)| *x * *f)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::MulConst(a, factor)))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let out: Vec<S> = self.value(a).iter().map(|x| *x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).iter().fold(S::zero(), |acc, x| acc + *x);
        self.push(Cow::Owned(vec![s]), vec![], Op::Sum(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out: Vec<S> = self.value(a).iter().map(|x| sigmoid(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::Sigmoid(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<S> = self.value(a).iter().map(|x| gelu(*x).0).collect();
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::Gelu(a))
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::Dimension("softmax of a scalar".into()))?;
        ensure_finite("softmax input", self.value(x))?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().fold(S::neg_infinity(), |m, v| m.max(*v));
            let mut total = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        Ok(self.push(Cow::Owned(out), shape, Op::SoftmaxRows { x, cols }))
    }

    /// Normalizes each row of the last dimension to zero mean and unit
    /// (biased) variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: S) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::Dimension("layer_norm of a scalar".into()))?;
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::Dimension(format!(
                "layer_norm over {cols} features with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xv.len() / cols;
        let n = S::from_f64(cols as f64);
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().fold(S::zero(), |a, v| a + *v) / n;
            let var = row
                .iter()
                .fold(S::zero(), |a, v| a + (*v - mean) * (*v - mean))
                / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                xhat,
                rstd,
            },
        ))
    }

    /// `[batch*seq, heads*head_dim]` to `[batch*heads, seq, head_dim]`.
    pub fn split_heads(&mut self, x: NodeId, batch: usize, seq: usize, heads: usize) -> Result<NodeId> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[0] != batch * seq || !shape[1].is_multiple_of(heads) {
            return Err(Error::Dimension(format!(
                "split_heads of {shape:?} into batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let head_dim = shape[1] / heads;
        let mut out = vec![S::zero(); self.value(x).len()];
        permute_heads(self.value(x), &mut out, batch, seq, heads, head_dim, false);
        Ok(self.push(
            Cow::Owned(out),
            vec![batch * heads, seq, head_dim],
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            },
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: NodeId, batch: usize, heads: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != batch * heads {
            return Err(Error::Dimension(format!(
                "merge_heads of {shape:?} with batch {batch}, heads {heads}"
            )));
        }
        let (seq, head_dim) = (shape[1], shape[2]);
        let mut out = vec![S::zero(); self.value(x).len()];
        permute_heads(self.value(x), &mut out, batch, seq, heads, head_dim, true);
        Ok(self.push(
            Cow::Owned(out),
            vec![batch * seq, heads * head_dim],
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            },
        ))
    }

    /// Stacks same-shaped nodes along a new leading dimension.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("stack of nothing".into()))?;
        let inner = self.shape(*first).to_vec();
        let mut out = Vec::with_capacity(parts.len() * self.value(*first).len());
        for p in parts {
            if self.shape(*p) != inner.as_slice() {
                return Err(Error::Dimension(format!(
                    "stack of {inner:?} with {:?}",
                    self.shape(*p)
                )));
            }
            out.extend_from_slice(self.value(*p));
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        Ok(self.push(Cow::Owned(out), shape, Op::Stack(parts.to_vec())))
    }

    /// `out[b, t] = dot(h[b, t, :], w[t, :])`: a distinct weight vector per
    /// sequence position.
    pub fn positionwise_dot(&mut self, h: NodeId, w: NodeId) -> Result<NodeId> {
        let (sh, sw) = (self.shape(h).to_vec(), self.shape(w).to_vec());
        let (batch, positions, dim) = match (sh.as_slice(), sw.as_slice()) {
            ([b, t, d], [t2, d2]) if t == t2 && d == d2 => (*b, *t, *d),
            _ => {
                return Err(Error::Dimension(format!(
                    "positionwise_dot of {sh:?} with {sw:?}"
                )))
            }
        };
        let (hv, wv) = (self.value(h), self.value(w));
        let mut out = vec![S::zero(); batch * positions];
        for b in 0..batch {
            for t in 0..positions {
                let row = &hv[(b * positions + t) * dim..(b * positions + t + 1) * dim];
                out[b * positions + t] = dot(row, &wv[t * dim..(t + 1) * dim]);
            }
        }
        Ok(self.push(
            Cow::Owned(out),
            vec![batch, positions],
            Op::PositionwiseDot {
                h,
                w,
                batch,
                positions,
                dim,
            },
        ))
    }

    /// Mean binary cross-entropy over every element, with probabilities
    /// clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`. Labels must be 0 or 1.
    pub fn bce(&mut self, probs: NodeId, labels: &[S]) -> Result<NodeId> {
        let pv = self.value(probs);
        if pv.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "bce: {} probabilities, {} labels",
                pv.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|y| **y != S::zero() && **y != S::one()) {
            return Err(Error::Contract(format!("bce: non-binary label {bad}")));
        }
        ensure_finite("bce probabilities", pv)?;
        let (lo, hi) = clamp_bounds::<S>();
        let mut total = S::zero();
        for (p, y) in pv.iter().zip(labels) {
            let c = p.max(lo).min(hi);
            total = total + if *y == S::one() { c.ln() } else { (S::one() - c).ln() };
        }
        let loss = -total / S::from_f64(pv.len() as f64);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            vec![],
            Op::Bce {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `lambda` times the mean squared difference between neighbouring
    /// positions of a `[batch, positions]` probability map.
    pub fn transition_penalty(&mut self, probs: NodeId, lambda: S) -> Result<NodeId> {
        let (batch, positions) = match self.shape(probs) {
            [b, t] => (*b, *t),
            s => {
                return Err(Error::Dimension(format!(
                    "transition_penalty expects [batch, positions], got {s:?}"
                )))
            }
        };
        if positions < 2 {
            return Err(Error::Contract(format!(
                "transition_penalty needs at least 2 positions, got {positions}"
            )));
        }
        let pv = self.value(probs);
        let mut total = S::zero();
        for b in 0..batch {
            let row = &pv[b * positions..(b + 1) * positions];
            for w in row.windows(2) {
                total = total + (w[1] - w[0]) * (w[1] - w[0]);
            }
        }
        let pen = lambda * total / S::from_f64((batch * (positions - 1)) as f64);
        Ok(self.push(
            Cow::Owned(vec![pen]),
            vec![],
            Op::TransitionPenalty {
                probs,
                lambda,
                batch,
                positions,
            },
        ))
    }

    /// Gradients of the scalar node `loss` with respect to every parameter
    /// leaf it depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![S::one()]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match out.by_param.get_mut(id) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        out.by_param.insert(*id, g);
                    }
                },
                Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    transpose_b,
                } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = vec![S::zero(); av.len()];
                    let mut gb = vec![S::zero(); bv.len()];
                    for bi in 0..*batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        let bb = &bv[bi * k * n..(bi + 1) * k * n];
                        let gab = &mut ga[bi * m * k..(bi + 1) * m * k];
                        let gbb = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *transpose_b {
                            // C = A B^T, B is [n, k]
                            kernel_nn(gc, bb, gab, m, n, k);
                            kernel_tn(gc, ab, gbb, m, n, k);
                        } else {
                            // C = A B, B is [k, n]
                            kernel_nt(gc, bb, gab, m, n, k);
                            kernel_tn(ab, gc, gbb, m, k, n);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, g),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddTiled(a, b) => {
                    let blen = self.value(*b).len();
                    let mut gb = vec![S::zero(); blen];
                    for chunk in g.chunks(blen) {
                        add_into(&mut gb, chunk);
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.iter().zip(bv).map(|(g, y)| *g * *y).collect();
                    let gb = g.iter().zip(av).map(|(g, x)| *g * *x).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulConst(a, f) => {
                    let ga = g.iter().zip(f).map(|(g, f)| *g * *f).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, c) => {
                    let ga = g.iter().map(|v| *v * *c).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = vec![g[0]; self.value(*a).len()];
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g
                        .iter()
                        .zip(node.value.iter())
                        .map(|(g, y)| *g * *y * (S::one() - *y))
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let ga = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(g, x)| *g * gelu(*x).1)
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows { x, cols } => {
                    let mut gx = vec![S::zero(); g.len()];
                    for ((gr, yr), out) in g
                        .chunks(*cols)
                        .zip(node.value.chunks(*cols))
                        .zip(gx.chunks_mut(*cols))
                    {
                        let inner = dot(gr, yr);
                        for c in 0..*cols {
                            out[c] = yr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    cols,
                    xhat,
                    rstd,
                } => {
                    let cols = *cols;
                    let gv = self.value(*gain);
                    let n = S::from_f64(cols as f64);
                    let mut gx = vec![S::zero(); g.len()];
                    let mut ggain = vec![S::zero(); cols];
                    let mut gbias = vec![S::zero(); cols];
                    let mut dxhat = vec![S::zero(); cols];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = S::zero();
                        let mut mean_dh = S::zero();
                        for c in 0..cols {
                            ggain[c] = ggain[c] + gr[c] * hr[c];
                            gbias[c] = gbias[c] + gr[c];
                            dxhat[c] = gr[c] * gv[c];
                            mean_d = mean_d + dxhat[c];
                            mean_dh = mean_dh + dxhat[c] * hr[c];
                        }
                        mean_d = mean_d / n;
                        mean_dh = mean_dh / n;
                        let out = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            out[c] = *rs * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *bias, gbias);
                }
                Op::SplitHeads {
                    x,
                    batch,
                    seq,
                    heads,
                    head_dim,
                } => {
                    let mut gx = vec![S::zero(); g.len()];
                    permute_heads(&g, &mut gx, *batch, *seq, *heads, *head_dim, true);
                    accumulate(&mut grads, *x, gx);
                }
                Op::MergeHeads {
                    x,
                    batch,
                    seq,
                    heads,
                    head_dim,
                } => {
                    let mut gx = vec![S::zero(); g.len()];
                    permute_heads(&g, &mut gx, *batch, *seq, *heads, *head_dim, false);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Stack(parts) => {
                    let inner = g.len() / parts.len();
                    for (p, chunk) in parts.iter().zip(g.chunks(inner)) {
                        accumulate(&mut grads, *p, chunk.to_vec());
                    }
                }
                Op::PositionwiseDot {
                    h,
                    w,
                    batch,
                    positions,
                    dim,
                } => {
                    let (hv, wv) = (self.value(*h), self.value(*w));
                    let mut gh = vec![S::zero(); hv.len()];
                    let mut gw = vec![S::zero(); wv.len()];
                    for b in 0..*batch {
                        for t in 0..*positions {
                            let go = g[b * positions + t];
                            let base = (b * positions + t) * dim;
                            for d in 0..*dim {
                                gh[base + d] = go * wv[t * dim + d];
                                gw[t * dim + d] = gw[t * dim + d] + go * hv[base + d];
                            }
                        }
                    }
                    accumulate(&mut grads, *h, gh);
                    accumulate(&mut grads, *w, gw);
                }
                Op::Bce { probs, labels } => {
                    let (lo, hi) = clamp_bounds::<S>();
                    let scale = g[0] / S::from_f64(labels.len() as f64);
                    let gp = self
                        .value(*probs)
                        .iter()
                        .zip(labels)
                        .map(|(p, y)| {
                            if *p < lo || *p > hi {
                                S::zero()
                            } else if *y == S::one() {
                                -scale / *p
                            } else {
                                scale / (S::one() - *p)
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *probs, gp);
                }
                Op::TransitionPenalty {
                    probs,
                    lambda,
                    batch,
                    positions,
                } => {
                    let pv = self.value(*probs);
                    let two = S::from_f64(2.0);
                    let c = g[0] * *lambda * two / S::from_f64((batch * (positions - 1)) as f64);
                    let mut gp = vec![S::zero(); pv.len()];
                    for b in 0..*batch {
                        let base = b * positions;
                        for t in 1..*positions {
                            let d = c * (pv[base + t] - pv[base + t - 1]);
                            gp[base + t] = gp[base + t] + d;
                            gp[base + t - 1] = gp[base + t - 1] - d;
                        }
                    }
                    accumulate(&mut grads, *probs, gp);
                }
            }
        }
        Ok(out)
    }
}

fn clamp_bounds<S: Scalar>() -> (S, S) {
    (S::from_f64(PROB_CLAMP), S::from_f64(1.0 - PROB_CLAMP))
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], id: NodeId, g: Vec<S>) {
    match &mut grads[id.0] {
        Some(acc) => add_into(acc, &g),
        slot => *slot = Some(g),
    }
}

fn add_into<S: Scalar>(acc: &mut [S], g: &[S]) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a = *a + *v;
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// GELU (tanh form) and its derivative.
fn gelu<S: Scalar>(x: S) -> (S, S) {
    let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (S::one() + t);
    let dinner = c * (S::one() + S::from_f64(3.0) * a * x * x);
    let dy = half * (S::one() + t) + half * x * (S::one() - t * t) * dinner;
    (y, dy)
}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    // Eight independent partial sums let the compiler vectorize the loop.
    let mut acc = [S::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ca, cb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for j in 0..8 {
            acc[j] = acc[j] + ca[j] * cb[j];
        }
    }
    let mut tail = S::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `out[m, n] += a[m, k] * b[k, n]`
fn kernel_nn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * *bv;
            }
        }
    }
}

/// `out[m, n] += a[m, k] * b[n, k]^T`
fn kernel_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = out[i * n + j] + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k, n] += a[m, k]^T * b[m, n]`
fn kernel_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * *bv;
            }
        }
    }
}

/// Moves between token-major `[batch*seq, heads*head_dim]` and head-major
/// `[batch*heads, seq, head_dim]` layouts. `inverse` goes head-major to
/// token-major.
fn permute_heads<S: Scalar>(
    src: &[S],
    dst: &mut [S],
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
    inverse: bool,
) {
    let width = heads * head_dim;
    for b in 0..batch {
        for t in 0..seq {
            for h in 0..heads {
                let token = (b * seq + t) * width + h * head_dim;
                let head = ((b * heads + h) * seq + t) * head_dim;
                let (from, to) = if inverse { (head, token) } else { (token, head) };
                dst[to..to + head_dim].copy_from_slice(&src[from..from + head_dim]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
        let c = g.matmul(i, a).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2]));
        let mut expect = [0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for p in 0..4 {
                    expect[i * 2 + j] += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
            }
        }
        let mut g = Graph::new();
        let (na, nb) = (g.input(a.clone()), g.input(b.clone()));
        let c = g.matmul(na, nb).unwrap();
        assert_eq!(g.shape(c), &[3, 2]);
        for (x, y) in g.value(c).iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
        // A B == A (B^T)^T
        let bt: Vec<f64> = (0..2)
            .flat_map(|j| (0..4).map(move |p| (p, j)))
            .map(|(p, j)| b.data()[p * 2 + j])
            .collect();
        let nbt = g.input(t(&[2, 4], &bt));
        let c2 = g.matmul_nt(na, nbt).unwrap();
        for (x, y) in g.value(c2).iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
        assert!(g.matmul_nt(a, b).is_ok());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3, 2], &[0.0, 0.0, 2f64.ln(), 0.0, 5.0, 5.0]));
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        assert_eq!(&v[0..2], &[0.5, 0.5]);
        assert!((v[2] - 2.0 / 3.0).abs() < 1e-12 && (v[3] - 1.0 / 3.0).abs() < 1e-12);
        let x = g.input(t(&[1, 4], &[7.5; 4]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y), &[0.25; 4]);
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![1, 2], vec![f32::NAN, 0.0]).unwrap());
        assert!(matches!(g.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let ones = g.input(t(&[2], &[1.0, 1.0]));
        let zeros = g.input(t(&[2], &[0.0, 0.0]));
        let x = g.input(t(&[2, 2], &[3.0, 3.0, 1.0, -1.0]));
        let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
        let v = g.value(y);
        assert_eq!(&v[0..2], &[0.0, 0.0]);
        assert!((v[2] - 1.0).abs() < 1e-9 && (v[3] + 1.0).abs() < 1e-9);

        let bias = g.input(t(&[2], &[0.3, -0.7]));
        let y = g.layer_norm(x, zeros, bias, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0.3, -0.7, 0.3, -0.7]);

        let wrong = g.input(t(&[3], &[1.0; 3]));
        assert!(matches!(
            g.layer_norm(x, wrong, zeros, 1e-5),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn sigmoid_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[4], &[0.0, 2.0, 3.5, -3.5]));
        let y = g.sigmoid(x);
        let v = g.value(y);
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 0.880797).abs() < 1e-6);
        assert!((v[2] + v[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let p = Parameter::new(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let mut g = Graph::new();
        let w = g.param(ParamId(0), &p);
        let s = g.sum(w);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_square_is_identity() {
        let p = Parameter::new(t(&[3], &[1.0, -2.0, 0.25]));
        let mut g = Graph::new();
        let w = g.param(ParamId(0), &p);
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap(), p.tensor.data());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_accumulate_across_calls() {
        let mut params = vec![Parameter::new(t(&[2], &[1.0, 2.0]))];
        for _ in 0..2 {
            let grads = {
                let mut g = Graph::new();
                let w = g.param(ParamId(0), &params[0]);
                let s = g.sum(w);
                g.backward(s).unwrap()
            };
            grads.accumulate_into(&mut params).unwrap();
        }
        assert_eq!(params[0].tensor.grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn split_and_merge_heads_are_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[2 * 3, 4 * 2]);
        let mut g = Graph::new();
        let n = g.input(x.clone());
        let s = g.split_heads(n, 2, 3, 4).unwrap();
        assert_eq!(g.shape(s), &[8, 3, 2]);
        // head 1 of batch 0 at position 2 is columns 2..4 of row 2
        assert_eq!(&g.value(s)[(3 + 2) * 2..(3 + 2) * 2 + 2], &x.data()[2 * 8 + 2..2 * 8 + 4]);
        let m = g.merge_heads(s, 2, 4).unwrap();
        assert_eq!(g.value(m), x.data());
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.input(t(&[1, 2], &[0.9, 0.2]));
        let l = g.bce(p, &[1.0, 0.0]).unwrap();
        let expect = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((g.value(l)[0] - expect).abs() < 1e-12);
        assert!((g.value(l)[0] - 0.164252).abs() < 1e-6);

        let p = g.input(t(&[2, 3], &[0.5; 6]));
        let l = g.bce(p, &[1.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((g.value(l)[0] - 2f64.ln()).abs() < 1e-12);

        let p = g.input(t(&[1, 3], &[1.0, 0.0, 1.0]));
        let l = g.bce(p, &[1.0, 0.0, 1.0]).unwrap();
        assert!(g.value(l)[0] >= 0.0 && g.value(l)[0] < 2e-7);

        assert!(matches!(g.bce(p, &[1.0, 0.5, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn transition_penalty_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.input(t(&[1, 3], &[0.0, 1.0, 0.0]));
        let pen = g.transition_penalty(p, 1.0).unwrap();
        assert_eq!(g.value(pen), &[1.0]);
        let pen = g.transition_penalty(p, 0.0).unwrap();
        assert_eq!(g.value(pen), &[0.0]);
        let c = g.input(t(&[2, 4], &[0.3; 8]));
        let pen = g.transition_penalty(c, 2.0).unwrap();
        assert_eq!(g.value(pen), &[0.0]);
        let short = g.input(t(&[2, 1], &[0.3; 2]));
        assert!(matches!(
            g.transition_penalty(short, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn add_tiled_broadcasts_over_leading_dims() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2, 2, 2], &[0.0; 8]));
        let b = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.add_tiled(a, b).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let bad = g.input(t(&[3], &[0.0; 3]));
        assert!(g.add_tiled(a, bad).is_err());
    }
}
