use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        b_t: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: F,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Gelu {
        x: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: F,
    },
    Attention {
        qkv: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        causal: bool,
    },
    Softmax {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
    },
    Sum {
        x: usize,
    },
}

#[derive(Clone, Debug)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    /// Values kept for the backward pass (normalized inputs, attention
    /// probabilities, softmax outputs).
    saved: Vec<F>,
    needs_grad: bool,
    op: Op<F>,
}

/// Records primitive applications for one forward pass.
#[derive(Clone, Debug)]
pub struct Tape<F> {
    id: u64,
    nodes: Vec<Node<F>>,
}

/// Gradients of the trainable leaves of a tape.
#[derive(Debug)]
pub struct Gradients<F> {
    tape: u64,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&[F]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `tensor`'s grad buffer. Frozen leaves
    /// have no gradient, so nothing is written for them.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor<F>) -> Result<()> {
        if var.tape != self.tape {
            return Err(Error::ForeignVar);
        }
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn cols(shape: &[usize]) -> usize {
    *shape.last().unwrap()
}

fn rows(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product()
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(var.index)
    }

    fn node(&self, var: Var) -> &Node<F> {
        assert_eq!(var.tape, self.id, "variable recorded on another tape");
        &self.nodes[var.index]
    }

    pub fn value(&self, var: Var) -> &[F] {
        &self.node(var).value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.node(var).shape
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.node(var).needs_grad
    }

    pub fn to_tensor(&self, var: Var) -> Tensor<F> {
        let n = self.node(var);
        Tensor::new(&n.shape, n.value.clone()).expect("recorded shapes are consistent")
    }

    fn push(&mut self, op: Op<F>) -> Result<Var> {
        let (shape, value, saved) = compute(&op, &self.nodes)?;
        let needs_grad = inputs(&op).iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            saved,
            needs_grad,
            op,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Records a tensor as a leaf; it is differentiated iff it requires grad.
    pub fn leaf(&mut self, tensor: &Tensor<F>) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.values().to_vec(),
            saved: Vec::new(),
            needs_grad: tensor.requires_grad(),
            op: Op::Leaf,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    /// `a · b` for `a: [n×k]`, `b: [k×m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.push(Op::MatMul { a, b, b_t: false })
    }

    /// `a · bᵀ` for `a: [n×k]`, `b: [m×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.push(Op::MatMul { a, b, b_t: true })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.push(Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.push(Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Result<Var> {
        let a = self.idx(a)?;
        self.push(Op::Scale { a, factor })
    }

    /// Adds `bias: [d]` to every trailing-axis slice of `x: [...×d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (x, bias) = (self.idx(x)?, self.idx(bias)?);
        self.push(Op::AddBias { x, bias })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        self.push(Op::Gelu { x })
    }

    /// Gathers rows `ids` of `table: [V×d]` into `[len×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let table = self.idx(table)?;
        self.push(Op::Embedding {
            table,
            ids: ids.to_vec(),
        })
    }

    /// Selects rows of `x: [n×d]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let x = self.idx(x)?;
        self.push(Op::GatherRows {
            x,
            rows: rows.to_vec(),
        })
    }

    /// Concatenates `[n_i×d]` tensors along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let parts = parts
            .iter()
            .map(|&v| self.idx(v))
            .collect::<Result<Vec<_>>>()?;
        self.push(Op::ConcatRows { parts })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (x, gain, bias) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        self.push(Op::LayerNorm { x, gain, bias, eps })
    }

    /// Multi-head scaled dot-product attention over a packed
    /// `qkv: [batch·seq × 3d]` (query, key and value blocks side by side),
    /// returning `[batch·seq × d]`. With `causal`, position `i` attends to
    /// positions `≤ i` of its own sequence only.
    pub fn attention(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let qkv = self.idx(qkv)?;
        self.push(Op::Attention {
            qkv,
            batch,
            seq,
            heads,
            causal,
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        self.push(Op::Softmax { x })
    }

    /// Mean over rows of `-log softmax(logits)[target]`, fused through
    /// log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let logits = self.idx(logits)?;
        self.push(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        self.push(Op::Sum { x })
    }

    /// Recomputes every non-leaf node from the recorded leaves and reports
    /// whether all outputs are bit-identical to the recorded ones.
    pub fn replay_matches(&self) -> bool {
        let mut replayed: Vec<Node<F>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                _ => match compute(&node.op, &replayed) {
                    Ok((_, v, _)) => v,
                    Err(_) => return false,
                },
            };
            let same = value.len() == node.value.len()
                && value.iter().zip(&node.value).all(|(a, b)| a.to_bits_eq(*b));
            if !same {
                return false;
            }
            replayed.push(Node {
                shape: node.shape.clone(),
                value,
                saved: Vec::new(),
                needs_grad: node.needs_grad,
                op: node.op.clone(),
            });
        }
        true
    }

    /// Propagates d(loss)/d(node) back to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let li = self.idx(loss)?;
        let loss_node = &self.nodes[li];
        if loss_node.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        if loss_node.needs_grad {
            grads[li] = Some(vec![F::one()]);
        }
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(node, &g, &self.nodes, &mut grads);
        }
        // Only leaf gradients are returned.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<F: Scalar> BitsEq for F {
    fn to_bits_eq(self, other: Self) -> bool {
        // Both NaN or identical values (including signed zeros).
        (self.is_nan() && other.is_nan())
            || (self == other && self.is_sign_negative() == other.is_sign_negative())
    }
}

fn inputs<F>(op: &Op<F>) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::Scale { a, .. } => vec![*a],
        Op::AddBias { x, bias } => vec![*x, *bias],
        Op::Gelu { x } | Op::Softmax { x } | Op::Sum { x } => vec![*x],
        Op::Embedding { table, .. } => vec![*table],
        Op::GatherRows { x, .. } => vec![*x],
        Op::ConcatRows { parts } => parts.clone(),
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Attention { qkv, .. } => vec![*qkv],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

type Computed<F> = (Vec<usize>, Vec<F>, Vec<F>);

fn compute<F: Scalar>(op: &Op<F>, nodes: &[Node<F>]) -> Result<Computed<F>> {
    match op {
        Op::Leaf => unreachable!("leaves are not computed"),
        &Op::MatMul { a, b, b_t } => {
            let (na, nb) = (&nodes[a], &nodes[b]);
            if na.shape.len() != 2 || nb.shape.len() != 2 {
                return Err(mismatch("matmul", &na.shape, &nb.shape));
            }
            let (n, k) = (na.shape[0], na.shape[1]);
            let (kb, m) = if b_t {
                (nb.shape[1], nb.shape[0])
            } else {
                (nb.shape[0], nb.shape[1])
            };
            if k != kb {
                return Err(mismatch("matmul", &na.shape, &nb.shape));
            }
            let mut out = vec![F::zero(); n * m];
            F::gemm(n, k, m, &na.value, false, &nb.value, b_t, &mut out, false);
            Ok((vec![n, m], out, vec![]))
        }
        &Op::Add { a, b } | &Op::Mul { a, b } => {
            let (na, nb) = (&nodes[a], &nodes[b]);
            if na.shape != nb.shape {
                return Err(mismatch("elementwise", &na.shape, &nb.shape));
            }
            let out = if matches!(op, Op::Add { .. }) {
                na.value
                    .iter()
                    .zip(&nb.value)
                    .map(|(&x, &y)| x + y)
                    .collect()
            } else {
                na.value
                    .iter()
                    .zip(&nb.value)
                    .map(|(&x, &y)| x * y)
                    .collect()
            };
            Ok((na.shape.clone(), out, vec![]))
        }
        &Op::Scale { a, factor } => {
            let na = &nodes[a];
            Ok((
                na.shape.clone(),
                na.value.iter().map(|&x| x * factor).collect(),
                vec![],
            ))
        }
        &Op::AddBias { x, bias } => {
            let (nx, nb) = (&nodes[x], &nodes[bias]);
            let d = cols(&nx.shape);
            if nb.value.len() != d {
                return Err(mismatch("add_bias", &nx.shape, &nb.shape));
            }
            let mut out = nx.value.clone();
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(&nb.value).for_each(|(o, &b)| *o += b);
            }
            Ok((nx.shape.clone(), out, vec![]))
        }
        &Op::Gelu { x } => {
            let nx = &nodes[x];
            let (c, a) = (F::cst(GELU_C), F::cst(GELU_A));
            let half = F::cst(0.5);
            let t: Vec<F> = nx
                .value
                .iter()
                .map(|&v| (c * (v + a * v * v * v)).gelu_tanh())
                .collect();
            let out = nx
                .value
                .iter()
                .zip(&t)
                .map(|(&v, &t)| half * v * (F::one() + t))
                .collect();
            Ok((nx.shape.clone(), out, t))
        }
        Op::Embedding { table, ids } => {
            let nt = &nodes[*table];
            if nt.shape.len() != 2 {
                return Err(mismatch("embedding", &nt.shape, &[ids.len()]));
            }
            let (v, d) = (nt.shape[0], nt.shape[1]);
            if ids.is_empty() {
                return Err(Error::Empty("embedding ids"));
            }
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(Error::TokenOutOfRange { id, vocab: v });
                }
                out.extend_from_slice(&nt.value[id * d..(id + 1) * d]);
            }
            Ok((vec![ids.len(), d], out, vec![]))
        }
        Op::GatherRows { x, rows: sel } => {
            let nx = &nodes[*x];
            let (n, d) = (rows(&nx.shape), cols(&nx.shape));
            if sel.is_empty() {
                return Err(Error::Empty("gathered rows"));
            }
            let mut out = Vec::with_capacity(sel.len() * d);
            for &r in sel {
                if r >= n {
                    return Err(mismatch("gather_rows", &nx.shape, &[r]));
                }
                out.extend_from_slice(&nx.value[r * d..(r + 1) * d]);
            }
            Ok((vec![sel.len(), d], out, vec![]))
        }
        Op::ConcatRows { parts } => {
            if parts.is_empty() {
                return Err(Error::Empty("concat inputs"));
            }
            let d = cols(&nodes[parts[0]].shape);
            let mut out = Vec::new();
            let mut n = 0;
            for &p in parts {
                let np = &nodes[p];
                if cols(&np.shape) != d {
                    return Err(mismatch("concat_rows", &nodes[parts[0]].shape, &np.shape));
                }
                n += rows(&np.shape);
                out.extend_from_slice(&np.value);
            }
            Ok((vec![n, d], out, vec![]))
        }
        &Op::LayerNorm { x, gain, bias, eps } => {
            let (nx, ng, nb) = (&nodes[x], &nodes[gain], &nodes[bias]);
            let d = cols(&nx.shape);
            if ng.value.len() != d || nb.value.len() != d {
                return Err(mismatch("layer_norm", &nx.shape, &ng.shape));
            }
            let n = rows(&nx.shape);
            let df = F::cst(d as f64);
            let mut out = vec![F::zero(); n * d];
            // saved: xhat (n·d) followed by rstd (n)
            let mut saved = vec![F::zero(); n * d + n];
            for r in 0..n {
                let xr = &nx.value[r * d..(r + 1) * d];
                let mean = xr.iter().copied().sum::<F>() / df;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
                let rstd = F::one() / (var + eps).sqrt();
                saved[n * d + r] = rstd;
                for j in 0..d {
                    let xh = (xr[j] - mean) * rstd;
                    saved[r * d + j] = xh;
                    out[r * d + j] = xh * ng.value[j] + nb.value[j];
                }
            }
            Ok((nx.shape.clone(), out, saved))
        }
        &Op::Attention {
            qkv,
            batch,
            seq,
            heads,
            causal,
        } => {
            let nq = &nodes[qkv];
            let width = cols(&nq.shape);
            if rows(&nq.shape) != batch * seq || width % 3 != 0 || (width / 3) % heads != 0 {
                return Err(mismatch("attention", &nq.shape, &[batch, seq, heads]));
            }
            let d = width / 3;
            let dh = d / heads;
            let scale = F::one() / F::cst(dh as f64).sqrt();
            let mut out = vec![F::zero(); batch * seq * d];
            let mut probs = vec![F::zero(); batch * heads * seq * seq];
            let q = &nq.value;
            let mut scores = vec![F::zero(); seq];
            for b in 0..batch {
                for h in 0..heads {
                    let pbase = (b * heads + h) * seq * seq;
                    for i in 0..seq {
                        let qi = &q[(b * seq + i) * width + h * dh..][..dh];
                        let last = if causal { i + 1 } else { seq };
                        let mut max = F::neg_infinity();
                        for j in 0..last {
                            let kj = &q[(b * seq + j) * width + d + h * dh..][..dh];
                            let s = dot(qi, kj) * scale;
                            scores[j] = s;
                            if s > max {
                                max = s;
                            }
                        }
                        let mut total = F::zero();
                        for s in &mut scores[..last] {
                            *s = (*s - max).exp();
                            total += *s;
                        }
                        let prow = &mut probs[pbase + i * seq..][..seq];
                        let orow = &mut out[(b * seq + i) * d + h * dh..][..dh];
                        for j in 0..last {
                            let p = scores[j] / total;
                            prow[j] = p;
                            let vj = &q[(b * seq + j) * width + 2 * d + h * dh..][..dh];
                            orow.iter_mut().zip(vj).for_each(|(o, &v)| *o += p * v);
                        }
                    }
                }
            }
            Ok((vec![batch * seq, d], out, probs))
        }
        &Op::Softmax { x } => {
            let nx = &nodes[x];
            if nx.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("softmax input".into()));
            }
            let d = cols(&nx.shape);
            let mut out = nx.value.clone();
            out.chunks_mut(d).for_each(softmax_in_place);
            Ok((nx.shape.clone(), out, vec![]))
        }
        Op::CrossEntropy { logits, targets } => {
            let nl = &nodes[*logits];
            let (n, v) = (rows(&nl.shape), cols(&nl.shape));
            if targets.len() != n {
                return Err(mismatch("cross_entropy", &nl.shape, &[targets.len()]));
            }
            if let Some(&t) = targets.iter().find(|&&t| t >= v) {
                return Err(Error::TargetOutOfRange {
                    index: t,
                    classes: v,
                });
            }
            if nl.value.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("cross_entropy logits".into()));
            }
            let mut probs = nl.value.clone();
            let mut total = F::zero();
            for (r, row) in probs.chunks_mut(v).enumerate() {
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    z += *x;
                }
                total += z.ln() + max - nl.value[r * v + targets[r]];
                row.iter_mut().for_each(|x| *x /= z);
            }
            Ok((vec![1], vec![total / F::cst(n as f64)], probs))
        }
        &Op::Sum { x } => Ok((vec![1], vec![nodes[x].value.iter().copied().sum()], vec![])),
    }
}

#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x /= z);
}

fn slot<'a, F: Scalar>(
    grads: &'a mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    i: usize,
) -> Option<&'a mut Vec<F>> {
    if !nodes[i].needs_grad {
        return None;
    }
    let len = nodes[i].value.len();
    Some(grads[i].get_or_insert_with(|| vec![F::zero(); len]))
}

fn backprop<F: Scalar>(node: &Node<F>, g: &[F], nodes: &[Node<F>], grads: &mut [Option<Vec<F>>]) {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, b_t } => {
            let (na, nb) = (&nodes[a], &nodes[b]);
            let (n, k) = (na.shape[0], na.shape[1]);
            let m = node.shape[1];
            if let Some(ga) = slot(grads, nodes, a) {
                // dA = dC · op(B)ᵀ
                F::gemm(n, m, k, g, false, &nb.value, !b_t, ga, true);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                if b_t {
                    // dB = dCᵀ · A
                    F::gemm(m, n, k, g, true, &na.value, false, gb, true);
                } else {
                    // dB = Aᵀ · dC
                    F::gemm(k, n, m, &na.value, true, g, false, gb, true);
                }
            }
        }
        &Op::Add { a, b } => {
            for i in [a, b] {
                if let Some(gi) = slot(grads, nodes, i) {
                    gi.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                }
            }
        }
        &Op::Mul { a, b } => {
            let (va, vb) = (nodes[a].value.clone(), nodes[b].value.clone());
            if let Some(ga) = slot(grads, nodes, a) {
                for ((x, &d), &y) in ga.iter_mut().zip(g).zip(&vb) {
                    *x += d * y;
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for ((x, &d), &y) in gb.iter_mut().zip(g).zip(&va) {
                    *x += d * y;
                }
            }
        }
        &Op::Scale { a, factor } => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d * factor);
            }
        }
        &Op::AddBias { x, bias } => {
            let d = cols(&node.shape);
            if let Some(gx) = slot(grads, nodes, x) {
                gx.iter_mut().zip(g).for_each(|(v, &dv)| *v += dv);
            }
            if let Some(gb) = slot(grads, nodes, bias) {
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(v, &dv)| *v += dv);
                }
            }
        }
        &Op::Gelu { x } => {
            let c = F::cst(GELU_C);
            let half = F::cst(0.5);
            let three_a = F::cst(3.0 * GELU_A);
            let xv = &nodes[x].value;
            if let Some(gx) = slot(grads, nodes, x) {
                for (((out, &d), &v), &t) in gx.iter_mut().zip(g).zip(xv).zip(&node.saved) {
                    let dt = (F::one() - t * t) * c * (F::one() + three_a * v * v);
                    *out += d * (half * (F::one() + t) + half * v * dt);
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = node.shape[1];
            if let Some(gt) = slot(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    dst.iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(x, &v)| *x += v);
                }
            }
        }
        Op::GatherRows { x, rows: sel } => {
            let d = node.shape[1];
            if let Some(gx) = slot(grads, nodes, *x) {
                for (r, &src) in sel.iter().enumerate() {
                    let dst = &mut gx[src * d..(src + 1) * d];
                    dst.iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(x, &v)| *x += v);
                }
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(gp) = slot(grads, nodes, p) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(x, &v)| *x += v);
                }
                offset += len;
            }
        }
        &Op::LayerNorm { x, gain, bias, .. } => {
            let d = cols(&node.shape);
            let n = rows(&node.shape);
            let (xhat, rstd) = node.saved.split_at(n * d);
            let gv = &nodes[gain].value;
            let df = F::cst(d as f64);
            if let Some(gx) = slot(grads, nodes, x) {
                let mut dxhat = vec![F::zero(); d];
                for r in 0..n {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_d = F::zero();
                    let mut mean_dx = F::zero();
                    for j in 0..d {
                        dxhat[j] = gr[j] * gv[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xr[j];
                    }
                    mean_d /= df;
                    mean_dx /= df;
                    let out = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] += rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
            }
            if let Some(gg) = slot(grads, nodes, gain) {
                for r in 0..n {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, bias) {
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(v, &dv)| *v += dv);
                }
            }
        }
        &Op::Attention {
            qkv,
            batch,
            seq,
            heads,
            causal,
        } => {
            let q = &nodes[qkv].value;
            let width = cols(&nodes[qkv].shape);
            let d = width / 3;
            let dh = d / heads;
            let scale = F::one() / F::cst(dh as f64).sqrt();
            let probs = &node.saved;
            let Some(gq) = slot(grads, nodes, qkv) else {
                return;
            };
            let mut dp = vec![F::zero(); seq];
            let mut dq = vec![F::zero(); dh];
            for b in 0..batch {
                for h in 0..heads {
                    let pbase = (b * heads + h) * seq * seq;
                    for i in 0..seq {
                        let last = if causal { i + 1 } else { seq };
                        let prow = &probs[pbase + i * seq..][..seq];
                        let gi = &g[(b * seq + i) * d + h * dh..][..dh];
                        let mut weighted = F::zero();
                        for j in 0..last {
                            let vj = &q[(b * seq + j) * width + 2 * d + h * dh..][..dh];
                            dp[j] = dot(gi, vj);
                            weighted += prow[j] * dp[j];
                            // dV_j += p_ij · dOut_i
                            let gv = &mut gq[(b * seq + j) * width + 2 * d + h * dh..][..dh];
                            gv.iter_mut().zip(gi).for_each(|(x, &v)| *x += prow[j] * v);
                        }
                        let qi_off = (b * seq + i) * width + h * dh;
                        let qi = &q[qi_off..][..dh];
                        dq.iter_mut().for_each(|x| *x = F::zero());
                        for j in 0..last {
                            let ds = prow[j] * (dp[j] - weighted) * scale;
                            if ds == F::zero() {
                                continue;
                            }
                            let kj_off = (b * seq + j) * width + d + h * dh;
                            dq.iter_mut()
                                .zip(&q[kj_off..][..dh])
                                .for_each(|(x, &k)| *x += ds * k);
                            gq[kj_off..][..dh]
                                .iter_mut()
                                .zip(qi)
                                .for_each(|(x, &v)| *x += ds * v);
                        }
                        gq[qi_off..][..dh]
                            .iter_mut()
                            .zip(&dq)
                            .for_each(|(x, &v)| *x += v);
                    }
                }
            }
        }
        &Op::Softmax { x } => {
            let d = cols(&node.shape);
            let y = &node.value;
            if let Some(gx) = slot(grads, nodes, x) {
                for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let inner = dot(gr, yr);
                    for j in 0..d {
                        out[j] += yr[j] * (gr[j] - inner);
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets } => {
            let v = cols(&nodes[*logits].shape);
            let n = targets.len();
            let coef = g[0] / F::cst(n as f64);
            let probs = &node.saved;
            if let Some(gl) = slot(grads, nodes, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == t { F::one() } else { F::zero() };
                        gl[r * v + j] += coef * (probs[r * v + j] - onehot);
                    }
                }
            }
        }
        &Op::Sum { x } => {
            if let Some(gx) = slot(grads, nodes, x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(&[2, 2], &[1., 2., 3., 4.]));
        let eye = tape.leaf(&t(&[2, 2], &[1., 0., 0., 1.]));
        let zero = tape.leaf(&Tensor::zeros(&[2, 2]));
        let b = tape.leaf(&t(&[2, 2], &[5., 6., 7., 8.]));
        let r = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(r), &[1., 2., 3., 4.]);
        let r = tape.matmul(a, zero).unwrap();
        assert_eq!(tape.value(r), &[0., 0., 0., 0.]);
        let r = tape.matmul(a, b).unwrap();
        // scalar-loop reference
        let (av, bv) = ([1., 2., 3., 4.], [5., 6., 7., 8.]);
        let mut expect = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    expect[i * 2 + j] += av[i * 2 + k] * bv[k * 2 + j];
                }
            }
        }
        assert_eq!(expect, [19., 22., 43., 50.]);
        assert_eq!(tape.value(r), &expect);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2], &[0., 0.]));
        let s = tape.softmax(x).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);
        let x = tape.leaf(&t(&[3], &[7.5, 7.5, 7.5]));
        let s = tape.softmax(x).unwrap();
        for &p in tape.value(s) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.leaf(&t(&[3], &[1., 2., 3.]));
        let s = tape.softmax(x).unwrap();
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        for (k, &p) in tape.value(s).iter().enumerate() {
            assert!((p - ((k + 1) as f64).exp() / z).abs() < 1e-15);
        }
        let x = tape.leaf(&t(&[2], &[f64::NAN, 0.]));
        assert!(matches!(tape.softmax(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::full(&[1, 8], 0.3));
        let l = tape.cross_entropy(x, &[5]).unwrap();
        assert!((tape.value(l)[0] - 8f64.ln()).abs() < 1e-12);
        let mut v = vec![0.0; 8];
        v[2] = 1000.0;
        let x = tape.leaf(&t(&[1, 8], &v));
        let l = tape.cross_entropy(x, &[2]).unwrap();
        assert!(tape.value(l)[0].abs() < 1e-12);
        assert!(matches!(
            tape.cross_entropy(x, &[8]),
            Err(Error::TargetOutOfRange {
                index: 8,
                classes: 8
            })
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let g = tape.leaf(&Tensor::full(&[2], 1.0));
        let b = tape.leaf(&Tensor::zeros(&[2]));
        let x = tape.leaf(&t(&[1, 2], &[3.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0]);
        let x = tape.leaf(&t(&[1, 2], &[-1.0, 1.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!((tape.value(y)[0] + 1.0).abs() < 1e-9);
        assert!((tape.value(y)[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 3]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_skips_frozen_leaf() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::full(&[2, 2], 1.0).with_requires_grad(true));
        let w_tensor = Tensor::full(&[2, 2], 0.5);
        let w = tape.leaf(&w_tensor);
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert!(grads.get(x).is_some());
        let mut frozen = w_tensor.clone();
        grads.accumulate_into(w, &mut frozen).unwrap();
        assert!(frozen.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::zeros(&[3]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let mut other = Tape::<f32>::new();
        let y = other.leaf(&Tensor::zeros(&[1]));
        assert!(matches!(tape.backward(y), Err(Error::ForeignVar)));
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut tape = Tape::<f32>::new();
        let qkv = tape.leaf(&Tensor::from_fn(&[6, 12], |i| {
            ((i * 37 % 17) as f32 - 8.0) / 5.0
        }));
        let a = tape.attention(qkv, 2, 3, 2, true).unwrap();
        let g = tape.gelu(a).unwrap();
        let s = tape.softmax(g).unwrap();
        let _ = tape.cross_entropy(s, &[0, 1, 2, 3, 0, 1]).unwrap();
        assert!(tape.replay_matches());
    }
}
