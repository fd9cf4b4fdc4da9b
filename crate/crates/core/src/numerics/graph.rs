//! Tape of recorded tensor primitives with a reverse sweep.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction. A node whose inputs are all constants is stored
//! as a constant and never visited by [`Graph::backward`].

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{ParamId, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Leaf(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Mul(Var, Var),
    MulCol { x: Var, s: Var },
    Scale { x: Var, factor: f32 },
    Gelu(Var),
    Softmax { x: Var },
    MaskedSoftmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Dropout { x: Var, mask: Vec<f32> },
    Gather { table: Var, index: Vec<Option<usize>> },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    RowL2Norm(Var),
    Log(Var),
    Exp(Var),
    CrossEntropy { logits: Var, mask: Vec<bool>, targets: Vec<usize>, probs: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

/// Gradients harvested from one backward sweep, keyed by parameter identity.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        self.by_param.get(&t.id()).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    /// Accumulates this sweep's gradient into `t` if it is trainable.
    pub fn apply(&self, t: &mut Tensor) -> Result<()> {
        if !t.requires_grad() {
            return Ok(());
        }
        if let Some(g) = self.by_param.get(&t.id()) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.by_param.values().flatten().all(|v| v.is_finite())
    }
}

/// Recorded computation. Build it during a forward pass, then call
/// [`Graph::backward`] on a scalar loss.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    (n.checked_div(cols).unwrap_or(0), cols)
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by forward values on the tape.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len() * 4).sum()
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a value out of the graph as a detached tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_vec(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter leaf. Gradients flow to it only when the tensor
    /// is marked trainable.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let op = if t.requires_grad() {
            Op::Leaf(t.id())
        } else {
            Op::Const
        };
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], value: Vec<f32>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape("constant", &[shape, &[value.len()]]));
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            op: Op::Const,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a · b` for 2-D operands, or `a · bᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", &[sa, sb]));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape("matmul", &[sa, sb]));
        }
        let mut out = vec![0.0; m * n];
        let (av, bv) = (self.value(a), self.value(b));
        if trans_b {
            gemm_nt(av, bv, &mut out, m, k, n);
        } else {
            gemm_nn(av, bv, &mut out, m, k, n);
        }
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// Batched `[t,m,k] · [t,k,n]` (or `[t,n,k]ᵀ` when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("batch_matmul", &[sa, sb]));
        }
        let (t, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::shape("batch_matmul", &[sa, sb]));
        }
        let mut out = vec![0.0; t * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..t {
            let ab = &av[i * m * k..(i + 1) * m * k];
            let bb = &bv[i * k * n..(i + 1) * k * n];
            let cb = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(ab, bb, cb, m, k, n);
            } else {
                gemm_nn(ab, bb, cb, m, k, n);
            }
        }
        Ok(self.push(vec![t, m, n], out, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", &[self.shape(a), self.shape(b)]));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`c` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(x));
        if self.value(bias).len() != c {
            return Err(Error::shape("add_bias", &[self.shape(x), self.shape(bias)]));
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", &[self.shape(a), self.shape(b)]));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul(a, b), &[a, b]))
    }

    /// Scales row `r` of `x` by `s[r]`; `s` has one entry per row.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if self.value(s).len() != r {
            return Err(Error::shape("mul_col", &[self.shape(x), self.shape(s)]));
        }
        let sv = self.value(s);
        let out = self
            .value(x)
            .chunks(c.max(1))
            .zip(sv)
            .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::MulCol { x, s }, &[x, s]))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x, factor }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Gelu(x), &[x])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, c) = rows_cols(self.shape(x));
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row, None);
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Softmax { x }, &[x])
    }

    /// Softmax over the last dimension restricted to entries where `mask`
    /// is true. Masked entries come out as exactly zero; a fully masked row
    /// is all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("masked_softmax", &[self.shape(x), &[mask.len()]]));
        }
        let (_, c) = rows_cols(self.shape(x));
        let mut out = self.value(x).to_vec();
        for (row, m) in out.chunks_mut(c.max(1)).zip(mask.chunks(c.max(1))) {
            softmax_in_place(row, Some(m));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::MaskedSoftmax { x }, &[x]))
    }

    /// Row-wise layer normalisation with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "layer_norm",
                &[self.shape(x), self.shape(gamma), self.shape(beta)],
            ));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout. Identity when the graph is in evaluation mode or
    /// `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f32, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x, mask }, &[x]))
    }

    /// Row lookup into a 2-D table; `None` yields a zero row.
    pub fn gather(&mut self, table: Var, index: &[Option<usize>]) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(table));
        if self.shape(table).len() != 2 || index.iter().flatten().any(|&i| i >= r) {
            return Err(Error::shape("gather", &[self.shape(table), &[index.len()]]));
        }
        let tv = self.value(table);
        let mut out = vec![0.0; index.len() * c];
        for (k, idx) in index.iter().enumerate() {
            if let Some(i) = idx {
                out[k * c..(k + 1) * c].copy_from_slice(&tv[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(
            vec![index.len(), c],
            out,
            Op::Gather {
                table,
                index: index.to_vec(),
            },
            &[table],
        ))
    }

    /// Concatenates 2-D operands with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of zero operands".into()));
        };
        let r = self.shape(first)[0];
        if parts.iter().any(|&p| self.shape(p).len() != 2 || self.shape(p)[0] != r) {
            let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
            return Err(Error::shape("concat_cols", &shapes));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            vec![r, total],
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Columns `start..start+len` of a 2-D operand.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::shape("slice_cols", &[s, &[start, len]]));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", &[self.shape(x), shape]));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.value(x).iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        self.push(vec![1], vec![s as f32], Op::Mean(x), &[x])
    }

    /// Euclidean norm of each row, shape `[rows, 1]`.
    pub fn row_l2_norm(&mut self, x: Var) -> Var {
        let (r, c) = rows_cols(self.shape(x));
        let out = self
            .value(x)
            .chunks(c.max(1))
            .map(|row| dot(row, row).sqrt())
            .collect();
        self.push(vec![r, 1], out, Op::RowL2Norm(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Exp(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`, with the
    /// softmax restricted to `mask`. Each row's target must be unmasked.
    pub fn cross_entropy(&mut self, logits: Var, mask: &[bool], targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || mask.len() != s[0] * s[1] || targets.len() != s[0] {
            return Err(Error::shape("cross_entropy", &[s, &[mask.len()], &[targets.len()]]));
        }
        let (r, c) = (s[0], s[1]);
        if r == 0 {
            return Err(Error::Contract("cross entropy over an empty batch".into()));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0f64;
        for i in 0..r {
            let t = targets[i];
            if t >= c || !mask[i * c + t] {
                return Err(Error::Contract(format!("row {i}: target {t} is masked or out of range")));
            }
            let row = &mut probs[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for (v, &k) in row.iter().zip(m) {
                if k {
                    z += ((*v - max) as f64).exp();
                }
            }
            let lse = max as f64 + z.ln();
            total += lse - row[t] as f64;
            for (v, &k) in row.iter_mut().zip(m) {
                *v = if k { ((*v as f64) - lse).exp() as f32 } else { 0.0 };
            }
        }
        let loss = (total / r as f64) as f32;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                mask: mask.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar loss. Returns the gradients of every
    /// trainable leaf and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<f32>>> = (0..nodes.len()).map(|_| None).collect();
        let mut out = Gradients::default();
        if !nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Leaf(id) => match out.by_param.get_mut(id) {
                    Some(acc) => axpy(1.0, &g, acc),
                    None => {
                        out.by_param.insert(*id, g);
                    }
                },
                op => backprop(op, node, &g, &nodes, &mut grads),
            }
        }
        Ok(out)
    }
}

fn softmax_in_place(row: &mut [f32], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| keep(*j))
        .map(|(_, v)| *v)
        .fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut z = 0.0f32;
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - max).exp();
            z += *v;
        } else {
            *v = 0.0;
        }
    }
    row.iter_mut().for_each(|v| *v /= z);
}

fn acc<'a>(grads: &'a mut [Option<Vec<f32>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f32>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
}

fn backprop(op: &Op, node: &Node, g: &[f32], nodes: &[Node], grads: &mut [Option<Vec<f32>>]) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    let shp = |v: Var| nodes[v.0].shape.as_slice();
    match op {
        Op::Const | Op::Leaf(_) => unreachable!("handled by caller"),
        Op::MatMul { a, b, trans_b } => {
            let (m, k) = (shp(*a)[0], shp(*a)[1]);
            let n = node.shape[1];
            if let Some(ga) = acc(grads, nodes, *a) {
                if *trans_b {
                    gemm_nn(g, val(*b), ga, m, n, k);
                } else {
                    gemm_nt(g, val(*b), ga, m, n, k);
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                if *trans_b {
                    gemm_tn(g, val(*a), gb, m, n, k);
                } else {
                    gemm_tn(val(*a), g, gb, m, k, n);
                }
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (t, m, k) = (shp(*a)[0], shp(*a)[1], shp(*a)[2]);
            let n = node.shape[2];
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..t {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &val(*b)[i * k * n..(i + 1) * k * n];
                    let out = &mut ga[i * m * k..(i + 1) * m * k];
                    if *trans_b {
                        gemm_nn(gi, bi, out, m, n, k);
                    } else {
                        gemm_nt(gi, bi, out, m, n, k);
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for i in 0..t {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &val(*a)[i * m * k..(i + 1) * m * k];
                    let out = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        gemm_tn(gi, ai, out, m, n, k);
                    } else {
                        gemm_tn(ai, gi, out, m, k, n);
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(gv) = acc(grads, nodes, v) {
                    axpy(1.0, g, gv);
                }
            }
        }
        Op::AddBias { x, bias } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                axpy(1.0, g, gx);
            }
            if let Some(gb) = acc(grads, nodes, *bias) {
                let c = gb.len();
                for row in g.chunks(c) {
                    axpy(1.0, row, gb);
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::MulCol { x, s } => {
            let (xv, sv) = (val(*x), val(*s));
            let c = g.len() / sv.len().max(1);
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, &k) in sv.iter().enumerate() {
                    axpy(k, &g[r * c..(r + 1) * c], &mut gx[r * c..(r + 1) * c]);
                }
            }
            if let Some(gs) = acc(grads, nodes, *s) {
                for r in 0..sv.len() {
                    gs[r] += dot(&g[r * c..(r + 1) * c], &xv[r * c..(r + 1) * c]);
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                axpy(*factor, g, gx);
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * kernels::gelu_grad(xv[i]);
                }
            }
        }
        Op::Softmax { x } | Op::MaskedSoftmax { x } => {
            let c = *node.shape.last().unwrap_or(&1);
            let y = &node.value;
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((gr, yr), gxr) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let s = dot(gr, yr);
                    for j in 0..c {
                        gxr[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = *node.shape.last().unwrap_or(&1);
            let gv = val(*gamma).to_vec();
            if let Some(gb) = acc(grads, nodes, *beta) {
                for row in g.chunks(c) {
                    axpy(1.0, row, gb);
                }
            }
            if let Some(gg) = acc(grads, nodes, *gamma) {
                for (row, h) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        gg[j] += row[j] * h[j];
                    }
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                let mut dh = vec![0.0; c];
                for (r, ((row, h), gxr)) in g.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                    for j in 0..c {
                        dh[j] = row[j] * gv[j];
                    }
                    let mean_dh = dh.iter().sum::<f32>() / c as f32;
                    let mean_dhh = dot(&dh, h) / c as f32;
                    for j in 0..c {
                        gxr[j] += rstd[r] * (dh[j] - mean_dh - h[j] * mean_dhh);
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
        }
        Op::Gather { table, index } => {
            let c = node.shape[1];
            if let Some(gt) = acc(grads, nodes, *table) {
                for (k, idx) in index.iter().enumerate() {
                    if let Some(i) = idx {
                        axpy(1.0, &g[k * c..(k + 1) * c], &mut gt[i * c..(i + 1) * c]);
                    }
                }
            }
        }
        Op::ConcatCols { parts } => {
            let (r, total) = (node.shape[0], node.shape[1]);
            let mut off = 0;
            for &p in parts {
                let w = shp(p)[1];
                if let Some(gp) = acc(grads, nodes, p) {
                    for i in 0..r {
                        axpy(1.0, &g[i * total + off..i * total + off + w], &mut gp[i * w..(i + 1) * w]);
                    }
                }
                off += w;
            }
        }
        Op::SliceCols { x, start } => {
            let (r, len) = (node.shape[0], node.shape[1]);
            let c = shp(*x)[1];
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..r {
                    axpy(1.0, &g[i * len..(i + 1) * len], &mut gx[i * c + start..i * c + start + len]);
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                axpy(1.0, g, gx);
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let k = g[0] / gx.len().max(1) as f32;
                gx.iter_mut().for_each(|v| *v += k);
            }
        }
        Op::RowL2Norm(x) => {
            let xv = val(*x);
            let r = node.value.len();
            let c = xv.len() / r.max(1);
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..r {
                    let n = node.value[i];
                    if n > 0.0 {
                        axpy(g[i] / n, &xv[i * c..(i + 1) * c], &mut gx[i * c..(i + 1) * c]);
                    }
                }
            }
        }
        Op::Log(x) => {
            let xv = val(*x);
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] / xv[i];
                }
            }
        }
        Op::Exp(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * node.value[i];
                }
            }
        }
        Op::CrossEntropy {
            logits,
            mask,
            targets,
            probs,
        } => {
            let c = shp(*logits)[1];
            let r = targets.len();
            let k = g[0] / r as f32;
            if let Some(gl) = acc(grads, nodes, *logits) {
                for i in 0..r {
                    for j in 0..c {
                        if mask[i * c + j] {
                            gl[i * c + j] += k * probs[i * c + j];
                        }
                    }
                    gl[i * c + targets[i]] -= k;
                }
            }
        }
    }
}
