use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{ParamId, ParamKey, ParamStore, Tensor};
use crate::error::{Error, Result};

/// A user-defined differentiable primitive.
///
/// `backward` returns one gradient buffer per input, each the length of the
/// corresponding input.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    Softmax(usize, f64),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    SelectRows {
        input: usize,
        rows: Vec<usize>,
    },
    Concat(Vec<usize>),
    BlendRows {
        new: usize,
        old: usize,
        mask: Vec<f64>,
    },
    Stack {
        steps: Vec<usize>,
        mask: Option<Vec<f64>>,
    },
    ConvMaxPool {
        input: usize,
        filters: usize,
        bias: usize,
        argmax: Vec<usize>,
    },
    RowNorms(usize),
    L2Norm(usize),
    Clamp(usize, f64, f64),
    Reshape(usize),
    Dropout(usize, Vec<f64>),
    Custom(Box<dyn CustomOp>, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamKey>,
}

/// Append-only record of primitive operations.
///
/// Inputs of a node always precede it, so reverse index order is a valid
/// topological order for gradient replay.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamKey, usize>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: Vec<(ParamKey, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to a differentiable leaf, if it was reached.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        self.params.iter().find(|(k, _)| *k == key).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamKey, &Tensor)> {
        self.params.iter().map(|(k, g)| (*k, g))
    }
}

fn broadcast_len(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return Ok(sa.to_vec());
    }
    if sa.len() >= sb.len() && sa.ends_with(sb) {
        return Ok(sa.to_vec());
    }
    if sb.len() > sa.len() && sb.ends_with(sa) {
        return Ok(sb.to_vec());
    }
    Err(Error::Dimension {
        op,
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    })
}

fn map_binary(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (da, db) = (a.data(), b.data());
    let (la, lb) = (da.len(), db.len());
    let data = (0..n).map(|i| f(da[i % la], db[i % lb])).collect();
    Tensor::from_parts(shape, data)
}

fn map_unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

/// Rows and columns of a rank-1 or rank-2 tensor.
fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Rank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

fn slot<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    j: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[j].requires_grad {
        return None;
    }
    let len = nodes[j].value.len();
    Some(grads[j].get_or_insert_with(|| vec![0.0; len]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drops every recorded node and intermediate value.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
        self.params.get_mut().clear();
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, param: Option<ParamKey>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false, None)
    }

    /// A differentiable input that is not owned by any parameter store.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true, None)
    }

    /// Loads a stored parameter. Repeated loads return the same node, so every
    /// use of a parameter within one tape refers to the identical value.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let key = store.key(id);
        if let Some(&idx) = self.params.borrow().get(&key) {
            return Var { tape: self, id: idx };
        }
        let p = store.get(id);
        let var = self.push(p.value.clone(), Op::Leaf, p.requires_grad, Some(key));
        self.params.borrow_mut().insert(key, var.id);
        var
    }

    /// Registers a custom primitive.
    pub fn custom<'t>(&'t self, op: Box<dyn CustomOp>, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
            op.forward(&vals)?
        };
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::Custom(op, ids.clone()), rg, None))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: 0,
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut grads);
            if let Op::Leaf = node.op {
                let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                match node.param {
                    Some(key) => out.params.push((key, t)),
                    None => {
                        out.leaves.insert(i, t);
                    }
                }
            }
        }
        out.params.sort_by_key(|(k, _)| *k);
        Ok(out)
    }
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = as_matrix("matmul", va).unwrap();
            let (_, n) = as_matrix("matmul", vb).unwrap();
            if let Some(ga) = slot(grads, nodes, *a) {
                gemm_nt(m, n, k, g, vb.data(), ga);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                gemm_tn(m, k, n, va.data(), g, gb);
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(ga) = slot(grads, nodes, *a) {
                let la = ga.len();
                for (idx, gi) in g.iter().enumerate() {
                    ga[idx % la] += gi;
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                let lb = gb.len();
                for (idx, gi) in g.iter().enumerate() {
                    gb[idx % lb] += sign * gi;
                }
            }
        }
        Op::Mul(a, b) => {
            let (da, db) = (nodes[*a].value.data(), nodes[*b].value.data());
            let (la, lb) = (da.len(), db.len());
            if let Some(ga) = slot(grads, nodes, *a) {
                for (idx, gi) in g.iter().enumerate() {
                    ga[idx % la] += gi * db[idx % lb];
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for (idx, gi) in g.iter().enumerate() {
                    gb[idx % lb] += gi * da[idx % la];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += c * gi;
                }
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi;
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *x += gi * yi * (1.0 - yi);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *x += gi * (1.0 - yi * yi);
                }
            }
        }
        Op::Relu(a) => {
            let xa = nodes[*a].value.data();
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, gi), xi) in ga.iter_mut().zip(g).zip(xa) {
                    if *xi > 0.0 {
                        *x += gi;
                    }
                }
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *x += gi * yi;
                }
            }
        }
        Op::Log(a) => {
            let xa = nodes[*a].value.data();
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, gi), xi) in ga.iter_mut().zip(g).zip(xa) {
                    *x += gi / xi;
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                let s = g[0] / ga.len() as f64;
                for x in ga.iter_mut() {
                    *x += s;
                }
            }
        }
        Op::Softmax(a, temperature) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                let v = *node.value.shape().last().unwrap_or(&1);
                for ((gr, yr), xr) in g.chunks(v).zip(y.chunks(v)).zip(ga.chunks_mut(v)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((x, gi), yi) in xr.iter_mut().zip(gr).zip(yr) {
                        *x += yi * (gi - dot) / temperature;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
        } => {
            let xl = &nodes[*logits].value;
            let v = xl.shape()[1];
            if let Some(ga) = slot(grads, nodes, *logits) {
                let mut p = vec![0.0; v];
                for (b, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let s = g[b] * w;
                    if s == 0.0 {
                        continue;
                    }
                    kernels::softmax_row(xl.row(b), 1.0, &mut p);
                    let row = &mut ga[b * v..(b + 1) * v];
                    for (x, pi) in row.iter_mut().zip(&p) {
                        *x += s * pi;
                    }
                    row[t] -= s;
                }
            }
        }
        Op::Gather { table, ids } => {
            let d = nodes[*table].value.shape()[1];
            if let Some(gt) = slot(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    for (x, gi) in gt[id * d..(id + 1) * d].iter_mut().zip(src) {
                        *x += gi;
                    }
                }
            }
        }
        Op::SelectRows { input, rows } => {
            let d = *nodes[*input].value.shape().last().unwrap();
            if let Some(gi) = slot(grads, nodes, *input) {
                for (r, &src_row) in rows.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    for (x, v) in gi[src_row * d..(src_row + 1) * d].iter_mut().zip(src) {
                        *x += v;
                    }
                }
            }
        }
        Op::Concat(parts) => {
            let total = *node.value.shape().last().unwrap();
            let rows = node.value.len() / total;
            let mut offset = 0;
            for &p in parts {
                let w = *nodes[p].value.shape().last().unwrap();
                if let Some(gp) = slot(grads, nodes, p) {
                    for r in 0..rows {
                        let src = &g[r * total + offset..r * total + offset + w];
                        for (x, v) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                            *x += v;
                        }
                    }
                }
                offset += w;
            }
        }
        Op::BlendRows { new, old, mask } => {
            let d = *node.value.shape().last().unwrap();
            if let Some(gn) = slot(grads, nodes, *new) {
                for (r, &m) in mask.iter().enumerate() {
                    if m == 0.0 {
                        continue;
                    }
                    for (x, v) in gn[r * d..(r + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *x += m * v;
                    }
                }
            }
            if let Some(go) = slot(grads, nodes, *old) {
                for (r, &m) in mask.iter().enumerate() {
                    if m == 1.0 {
                        continue;
                    }
                    for (x, v) in go[r * d..(r + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *x += (1.0 - m) * v;
                    }
                }
            }
        }
        Op::Stack { steps, mask } => {
            let shape = node.value.shape();
            let (t_len, d) = (shape[1], shape[2]);
            for (t, &s) in steps.iter().enumerate() {
                if let Some(gs) = slot(grads, nodes, s) {
                    let rows = gs.len() / d;
                    for b in 0..rows {
                        let m = mask.as_ref().map_or(1.0, |m| m[b * t_len + t]);
                        if m == 0.0 {
                            continue;
                        }
                        let src = &g[(b * t_len + t) * d..(b * t_len + t + 1) * d];
                        for (x, v) in gs[b * d..(b + 1) * d].iter_mut().zip(src) {
                            *x += m * v;
                        }
                    }
                }
            }
        }
        Op::ConvMaxPool {
            input,
            filters,
            bias,
            argmax,
        } => {
            let xin = &nodes[*input].value;
            let f = &nodes[*filters].value;
            let (w, d, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
            let (batch, len) = conv_dims(xin);
            if let Some(gb) = slot(grads, nodes, *bias) {
                for b in 0..batch {
                    for ch in 0..c {
                        gb[ch] += g[b * c + ch];
                    }
                }
            }
            if let Some(gf) = slot(grads, nodes, *filters) {
                let xd = xin.data();
                for b in 0..batch {
                    for ch in 0..c {
                        let gv = g[b * c + ch];
                        if gv == 0.0 {
                            continue;
                        }
                        let t0 = argmax[b * c + ch];
                        for k in 0..w {
                            let row = &xd[(b * len + t0 + k) * d..(b * len + t0 + k + 1) * d];
                            for (j, xj) in row.iter().enumerate() {
                                gf[(k * d + j) * c + ch] += gv * xj;
                            }
                        }
                    }
                }
            }
            if let Some(gx) = slot(grads, nodes, *input) {
                let fd = f.data();
                for b in 0..batch {
                    for ch in 0..c {
                        let gv = g[b * c + ch];
                        if gv == 0.0 {
                            continue;
                        }
                        let t0 = argmax[b * c + ch];
                        for k in 0..w {
                            let base = (b * len + t0 + k) * d;
                            for j in 0..d {
                                gx[base + j] += gv * fd[(k * d + j) * c + ch];
                            }
                        }
                    }
                }
            }
        }
        Op::RowNorms(a) => {
            let xa = &nodes[*a].value;
            let d = *xa.shape().last().unwrap();
            if let Some(ga) = slot(grads, nodes, *a) {
                for (r, &norm) in y.iter().enumerate() {
                    if norm == 0.0 {
                        continue;
                    }
                    let s = g[r] / norm;
                    for (x, xi) in ga[r * d..(r + 1) * d].iter_mut().zip(xa.row(r)) {
                        *x += s * xi;
                    }
                }
            }
        }
        Op::L2Norm(a) => {
            let xa = nodes[*a].value.data();
            if let Some(ga) = slot(grads, nodes, *a) {
                if y[0] != 0.0 {
                    let s = g[0] / y[0];
                    for (x, xi) in ga.iter_mut().zip(xa) {
                        *x += s * xi;
                    }
                }
            }
        }
        Op::Clamp(a, lo, hi) => {
            let xa = nodes[*a].value.data();
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, gi), xi) in ga.iter_mut().zip(g).zip(xa) {
                    if *xi >= *lo && *xi <= *hi {
                        *x += gi;
                    }
                }
            }
        }
        Op::Dropout(a, mask) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                    *x += gi * m;
                }
            }
        }
        Op::Custom(op, inputs) => {
            let vals: Vec<&Tensor> = inputs.iter().map(|&j| &nodes[j].value).collect();
            let parts = op.backward(&vals, &node.value, g);
            for (&j, part) in inputs.iter().zip(parts) {
                if let Some(gj) = slot(grads, nodes, j) {
                    for (x, v) in gj.iter_mut().zip(part) {
                        *x += v;
                    }
                }
            }
        }
    }
}

fn conv_dims(x: &Tensor) -> (usize, usize) {
    match x.shape() {
        [l, _] => (1, *l),
        [b, l, _] => (*b, *l),
        _ => unreachable!("validated at construction"),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Position of this node on its tape; equal ids denote the same node.
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = self.with_value(|v| map_unary(v, f));
        self.tape.push(value, op, self.requires_grad(), None)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let shape = broadcast_len(name, a, b)?;
            map_binary(a, b, shape, f)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(value, op, rg, None))
    }

    /// Matrix product. Rank-1 operands are treated as a single row.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (m, k) = as_matrix("matmul", a)?;
            let (k2, n) = match b.shape() {
                [r, c] => (*r, *c),
                s => {
                    return Err(Error::Rank {
                        op: "matmul",
                        expected: 2,
                        shape: s.to_vec(),
                    })
                }
            };
            if k != k2 {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut out = vec![0.0; m * n];
            gemm_nn(m, k, n, a.data(), b.data(), &mut out);
            let shape = if a.rank() == 1 { vec![n] } else { vec![m, n] };
            Tensor::from_parts(shape, out)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg, None))
    }

    /// Elementwise sum; `other` may be broadcast if its shape is a suffix of ours.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|x| c * x, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, Op::AddScalar(self.id))
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Var<'t> {
        self.neg().add_scalar(1.0)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(kernels::sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.with_value(|v| v.data().iter().copied().find(|x| !(*x > 0.0))) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(f64::ln, Op::Log(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let value = self.with_value(|v| Tensor::scalar(v.data().iter().sum()));
        self.tape
            .push(value, Op::Sum(self.id), self.requires_grad(), None)
    }

    pub fn mean(&self) -> Var<'t> {
        let value = self.with_value(|v| {
            Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64)
        });
        self.tape
            .push(value, Op::Mean(self.id), self.requires_grad(), None)
    }

    /// Softmax of `x / temperature` over the last axis.
    pub fn softmax(&self, temperature: f64) -> Result<Var<'t>> {
        if !(temperature > 0.0) {
            return Err(Error::Domain {
                op: "softmax",
                detail: format!("temperature {temperature} must be positive"),
            });
        }
        let value = self.with_value(|v| {
            let last = *v.shape().last().unwrap_or(&1);
            let mut out = vec![0.0; v.len()];
            for (o, x) in out.chunks_mut(last).zip(v.data().chunks(last)) {
                kernels::softmax_row(x, temperature, o);
            }
            Tensor::from_parts(v.shape().to_vec(), out)
        });
        Ok(self.tape.push(
            value,
            Op::Softmax(self.id, temperature),
            self.requires_grad(),
            None,
        ))
    }

    /// Per-row weighted negative log-likelihood of `targets` under
    /// `softmax(self)`, for logits of shape `[rows, vocab]`. Output `[rows]`.
    pub fn cross_entropy(&self, targets: &[usize], weights: &[f64]) -> Result<Var<'t>> {
        let value = self.with_value(|v| -> Result<Tensor> {
            let (rows, vocab) = match v.shape() {
                [r, c] => (*r, *c),
                s => {
                    return Err(Error::Rank {
                        op: "cross_entropy",
                        expected: 2,
                        shape: s.to_vec(),
                    })
                }
            };
            if targets.len() != rows || weights.len() != rows {
                return Err(Error::Dimension {
                    op: "cross_entropy",
                    lhs: v.shape().to_vec(),
                    rhs: vec![targets.len(), weights.len()],
                });
            }
            if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
                return Err(Error::spec(format!("target id {t} outside vocabulary of {vocab}")));
            }
            let out = (0..rows)
                .map(|b| {
                    if weights[b] == 0.0 {
                        0.0
                    } else {
                        let row = v.row(b);
                        weights[b] * (kernels::logsumexp(row) - row[targets[b]])
                    }
                })
                .collect();
            Ok(Tensor::vector(out))
        })?;
        Ok(self.tape.push(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            self.requires_grad(),
            None,
        ))
    }

    /// Rows of an embedding table `[vocab, dim]` selected by `ids`.
    pub fn gather(&self, ids: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|t| -> Result<Tensor> {
            let (v, d) = match t.shape() {
                [v, d] => (*v, *d),
                s => {
                    return Err(Error::Rank {
                        op: "gather",
                        expected: 2,
                        shape: s.to_vec(),
                    })
                }
            };
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(Error::spec(format!("token id {id} outside table of {v} rows")));
                }
                out.extend_from_slice(t.row(id));
            }
            Ok(Tensor::from_parts(vec![ids.len(), d], out))
        })?;
        Ok(self.tape.push(
            value,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
            self.requires_grad(),
            None,
        ))
    }

    /// Rows picked (with repetition) from a rank-2 value; a rank-1 value is
    /// one row. Output `[rows.len(), dim]`.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|t| -> Result<Tensor> {
            let (r, d) = as_matrix("select_rows", t)?;
            let mut out = Vec::with_capacity(rows.len() * d);
            for &i in rows {
                if i >= r {
                    return Err(Error::spec(format!("row {i} outside {r} rows")));
                }
                out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
            Ok(Tensor::from_parts(vec![rows.len(), d], out))
        })?;
        Ok(self.tape.push(
            value,
            Op::SelectRows {
                input: self.id,
                rows: rows.to_vec(),
            },
            self.requires_grad(),
            None,
        ))
    }

    /// Broadcasts a rank-1 vector to `rows` identical rows.
    pub fn repeat_rows(&self, rows: usize) -> Result<Var<'t>> {
        self.select_rows(&vec![0; rows])
    }

    /// Mixes rows: `mask[r]·self[r] + (1 − mask[r])·old[r]`; a 0/1 mask copies
    /// the selected row exactly.
    pub fn blend_rows(&self, old: Var<'t>, mask: &[f64]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[old.id].value);
            if a.shape() != b.shape() || as_matrix("blend_rows", a)?.0 != mask.len() {
                return Err(Error::Dimension {
                    op: "blend_rows",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let d = *a.shape().last().unwrap();
            let mut out = Vec::with_capacity(a.len());
            for (r, &m) in mask.iter().enumerate() {
                let (ra, rb) = (&a.data()[r * d..(r + 1) * d], &b.data()[r * d..(r + 1) * d]);
                if m == 1.0 {
                    out.extend_from_slice(ra);
                } else if m == 0.0 {
                    out.extend_from_slice(rb);
                } else {
                    out.extend(ra.iter().zip(rb).map(|(x, y)| m * x + (1.0 - m) * y));
                }
            }
            Tensor::from_parts(a.shape().to_vec(), out)
        };
        let rg = self.tape.rg(&[self.id, old.id]);
        Ok(self.tape.push(
            value,
            Op::BlendRows {
                new: self.id,
                old: old.id,
                mask: mask.to_vec(),
            },
            rg,
            None,
        ))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(move |x| x.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape.to_vec())?;
        Ok(self
            .tape
            .push(value, Op::Reshape(self.id), self.requires_grad(), None))
    }

    /// Euclidean norm of all entries. The gradient at the origin is zero.
    pub fn l2_norm(&self) -> Var<'t> {
        let value = self.with_value(|v| Tensor::scalar(v.sq_norm().sqrt()));
        self.tape
            .push(value, Op::L2Norm(self.id), self.requires_grad(), None)
    }

    /// Euclidean norm of every row of a rank-2 value: `[rows, d] → [rows]`.
    pub fn row_norms(&self) -> Result<Var<'t>> {
        let value = self.with_value(|v| -> Result<Tensor> {
            let (r, d) = as_matrix("row_norms", v)?;
            Ok(Tensor::vector(
                (0..r)
                    .map(|i| {
                        v.data()[i * d..(i + 1) * d]
                            .iter()
                            .map(|x| x * x)
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect(),
            ))
        })?;
        Ok(self
            .tape
            .push(value, Op::RowNorms(self.id), self.requires_grad(), None))
    }

    /// Multiplies by a fixed 0 / (1/keep) mask (inverted dropout).
    pub fn dropout_mask(&self, mask: Vec<f64>) -> Result<Var<'t>> {
        let value = self.with_value(|v| -> Result<Tensor> {
            if v.len() != mask.len() {
                return Err(Error::Dimension {
                    op: "dropout",
                    lhs: v.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            Ok(Tensor::from_parts(
                v.shape().to_vec(),
                v.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
            ))
        })?;
        Ok(self.tape.push(
            value,
            Op::Dropout(self.id, mask),
            self.requires_grad(),
            None,
        ))
    }
}

impl Tape {
    /// Concatenates rank-1 or rank-2 values along the last axis.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat"));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[ids[0]].value;
            let (rows, _) = as_matrix("concat", first)?;
            let mut widths = Vec::with_capacity(ids.len());
            for &i in &ids {
                let v = &nodes[i].value;
                let (r, c) = as_matrix("concat", v)?;
                if r != rows || v.rank() != first.rank() {
                    return Err(Error::Dimension {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (&i, &w) in ids.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[i].value.data()[r * w..(r + 1) * w]);
                }
            }
            let shape = if first.rank() == 1 {
                vec![total]
            } else {
                vec![rows, total]
            };
            Tensor::from_parts(shape, out)
        };
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::Concat(ids), rg, None))
    }

    /// Stacks per-step `[batch, d]` values into `[batch, steps, d]`, scaling
    /// entry `(b, t)` by `mask[b·steps + t]` when a mask is given.
    pub fn stack_steps<'t>(&'t self, steps: &[Var<'t>], mask: Option<&[f64]>) -> Result<Var<'t>> {
        if steps.is_empty() {
            return Err(Error::EmptyInput("stack_steps"));
        }
        let ids: Vec<usize> = steps.iter().map(|p| p.id).collect();
        let t_len = ids.len();
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[ids[0]].value;
            let (batch, d) = as_matrix("stack_steps", first)?;
            if let Some(m) = mask {
                if m.len() != batch * t_len {
                    return Err(Error::Dimension {
                        op: "stack_steps",
                        lhs: vec![batch, t_len],
                        rhs: vec![m.len()],
                    });
                }
            }
            for &i in &ids {
                if nodes[i].value.shape() != first.shape() {
                    return Err(Error::Dimension {
                        op: "stack_steps",
                        lhs: first.shape().to_vec(),
                        rhs: nodes[i].value.shape().to_vec(),
                    });
                }
            }
            let mut out = vec![0.0; batch * t_len * d];
            for (t, &i) in ids.iter().enumerate() {
                let v = nodes[i].value.data();
                for b in 0..batch {
                    let m = mask.map_or(1.0, |m| m[b * t_len + t]);
                    let dst = &mut out[(b * t_len + t) * d..(b * t_len + t + 1) * d];
                    for (o, x) in dst.iter_mut().zip(&v[b * d..(b + 1) * d]) {
                        *o = m * x;
                    }
                }
            }
            Tensor::from_parts(vec![batch, t_len, d], out)
        };
        let rg = self.rg(&ids);
        Ok(self.push(
            value,
            Op::Stack {
                steps: ids,
                mask: mask.map(|m| m.to_vec()),
            },
            rg,
            None,
        ))
    }

    /// Valid 1-D convolution over time followed by max-over-time pooling.
    ///
    /// `input` is `[len, d]` or `[batch, len, d]`, `filters` is
    /// `[width, d, maps]` and `bias` is `[maps]`. The output is `[maps]` or
    /// `[batch, maps]`.
    pub fn conv1d_maxpool<'t>(
        &'t self,
        input: Var<'t>,
        filters: Var<'t>,
        bias: Var<'t>,
    ) -> Result<Var<'t>> {
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.id].value;
            let f = &nodes[filters.id].value;
            let bv = &nodes[bias.id].value;
            let (batch, len, d) = match x.shape() {
                [l, d] => (1, *l, *d),
                [b, l, d] => (*b, *l, *d),
                s => {
                    return Err(Error::Rank {
                        op: "conv1d_maxpool",
                        expected: 3,
                        shape: s.to_vec(),
                    })
                }
            };
            let (w, fd, c) = match f.shape() {
                [w, fd, c] => (*w, *fd, *c),
                s => {
                    return Err(Error::Rank {
                        op: "conv1d_maxpool",
                        expected: 3,
                        shape: s.to_vec(),
                    })
                }
            };
            if fd != d || bv.shape() != [c] {
                return Err(Error::Dimension {
                    op: "conv1d_maxpool",
                    lhs: x.shape().to_vec(),
                    rhs: f.shape().to_vec(),
                });
            }
            if len < w {
                return Err(Error::SequenceTooShort { len, width: w });
            }
            let windows = len - w + 1;
            let (xd, fdat) = (x.data(), f.data());
            let mut out = vec![f64::NEG_INFINITY; batch * c];
            let mut arg = vec![0usize; batch * c];
            let mut acc = vec![0.0; c];
            for b in 0..batch {
                for t in 0..windows {
                    acc.copy_from_slice(bv.data());
                    // The window is contiguous in memory: w·d inputs against a
                    // (w·d)×c filter matrix.
                    let win = &xd[(b * len + t) * d..(b * len + t + w) * d];
                    gemm_nn(1, w * d, c, win, fdat, &mut acc);
                    for ch in 0..c {
                        if acc[ch] > out[b * c + ch] {
                            out[b * c + ch] = acc[ch];
                            arg[b * c + ch] = t;
                        }
                    }
                }
            }
            let shape = if x.rank() == 2 { vec![c] } else { vec![batch, c] };
            (Tensor::from_parts(shape, out), arg)
        };
        let rg = self.rg(&[input.id, filters.id, bias.id]);
        Ok(self.push(
            value,
            Op::ConvMaxPool {
                input: input.id,
                filters: filters.id,
                bias: bias.id,
                argmax,
            },
            rg,
            None,
        ))
    }
}
