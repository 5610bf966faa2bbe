use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNt(Var, Var),
    MatVec(Var, Var),
    /// xᵀ · m
    VecMat(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
    Sum(Var),
    Softmax(Var),
    BroadcastRowAdd(Var, Var),
    FramewiseMax(Var, Vec<usize>),
    SoftmaxCrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of executed primitives. Nodes are appended in execution order, so
/// every node's inputs precede it and a single reverse sweep is a valid
/// topological replay.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax_forward(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(
            "softmax input contains a non-finite entry".into(),
        ));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    Ok(out)
}

/// Elementwise maximum over the leading (frame) axis of a `T×R×C` buffer.
/// Returns the pooled `R×C` values and, per cell, the winning frame
/// (lowest index on ties).
pub fn framewise_max_forward(
    data: &[f64],
    frames: usize,
    cells: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if frames == 0 {
        return Err(Error::Empty("framewise max over zero frames".into()));
    }
    if data.len() != frames * cells {
        return Err(Error::dim("framewise_max", &[frames, cells], &[data.len()]));
    }
    let mut out = data[..cells].to_vec();
    let mut arg = vec![0usize; cells];
    for t in 1..frames {
        let frame = &data[t * cells..(t + 1) * cells];
        for (i, &x) in frame.iter().enumerate() {
            if x > out[i] {
                out[i] = x;
                arg[i] = t;
            }
        }
    }
    Ok((out, arg))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    /// Drops every node recorded after `mark` (a previous [`Graph::len`]).
    /// Vars pointing past the mark become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::Contract(format!("var {} is not on this graph", v.0)))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `t` in as a leaf; it is differentiable iff `t` requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), rg)
    }

    /// Copies `t` in as a differentiable leaf regardless of its grad slot.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != data.len() {
            return Err(Error::dim("constant", shape, &[data.len()]));
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), data, false))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<Var> {
        self.constant(shape, vec![0.0; numel(shape)])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            grad: None,
        }
    }

    /// Accumulated gradient of a differentiable leaf, after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|n| n.grad.as_deref())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Adds the leaf gradient of `v` (if any) into `t`'s gradient slot.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        let n = self.node(v)?;
        if n.shape != t.shape() {
            return Err(Error::dim("accumulate_into", &n.shape, t.shape()));
        }
        match &n.grad {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; n.value.len()]),
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = &self.node(v)?.shape;
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    fn vector_len(&self, op: &'static str, v: Var) -> Result<usize> {
        let s = &self.node(v)?.shape;
        if s.len() != 1 {
            return Err(Error::dim(op, s, &[]));
        }
        Ok(s[0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for t in 0..k {
                let x = av[i * k + t];
                let brow = &bv[t * n..(t + 1) * n];
                for (o, y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out, rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMulNt(a, b), vec![m, n], out, rg))
    }

    /// `w · x` for `w: m×k`, `x: k`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matvec", w)?;
        let k2 = self.vector_len("matvec", x)?;
        if k != k2 {
            return Err(Error::dim("matvec", self.shape(w), self.shape(x)));
        }
        let (wv, xv) = (self.value(w), self.value(x));
        let out: Vec<f64> = (0..m)
            .map(|i| {
                wv[i * k..(i + 1) * k]
                    .iter()
                    .zip(xv)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let rg = self.rg(&[w, x]);
        Ok(self.push(Op::MatVec(w, x), vec![m], out, rg))
    }

    /// `xᵀ · m` for `x: r`, `m: r×n`; a weighted sum of the rows of `m`.
    pub fn vecmat(&mut self, x: Var, m: Var) -> Result<Var> {
        let r = self.vector_len("vecmat", x)?;
        let (r2, n) = self.matrix_dims("vecmat", m)?;
        if r != r2 {
            return Err(Error::dim("vecmat", self.shape(x), self.shape(m)));
        }
        let (xv, mv) = (self.value(x), self.value(m));
        let mut out = vec![0.0; n];
        for (i, &w) in xv.iter().enumerate() {
            for (o, y) in out.iter_mut().zip(&mv[i * n..(i + 1) * n]) {
                *o += w * y;
            }
        }
        let rg = self.rg(&[x, m]);
        Ok(self.push(Op::VecMat(x, m), vec![n], out, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.node(a)?.shape, &self.node(b)?.shape);
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add(a, b), shape, out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul(a, b), shape, out, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let n = self.node(a)?;
        let out = n.value.iter().map(|x| x * c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(Op::Scale(a, c), shape, out, rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?;
        let out = n.value.iter().map(|x| x.tanh()).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(Op::Tanh(a), shape, out, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?;
        let out = n.value.iter().map(|&x| sigmoid(x)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(Op::Sigmoid(a), shape, out, rg))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat of zero parts".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            self.vector_len("concat", p)?;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        let n = out.len();
        Ok(self.push(Op::Concat(parts.to_vec()), vec![n], out, rg))
    }

    /// Contiguous sub-vector `[start, start + len)`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.vector_len("slice", a)?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice", &[n], &[start, len]));
        }
        let out = self.value(a)[start..start + len].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Slice(a, start), vec![len], out, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.node(a)?;
        if shape.is_empty() || shape.contains(&0) || numel(shape) != n.value.len() {
            return Err(Error::dim("reshape", &n.shape, shape));
        }
        let (out, rg) = (n.value.clone(), n.requires_grad);
        Ok(self.push(Op::Reshape(a), shape.to_vec(), out, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?;
        let s = n.value.iter().sum();
        let rg = n.requires_grad;
        Ok(self.push(Op::Sum(a), vec![1], vec![s], rg))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let len = self.vector_len("softmax", a)?;
        let out = softmax_forward(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Softmax(a), vec![len], out, rg))
    }

    /// Adds vector `v` to every row of matrix `m`.
    pub fn broadcast_row_add(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, d) = self.matrix_dims("broadcast_row_add", m)?;
        let d2 = self.vector_len("broadcast_row_add", v)?;
        if d != d2 {
            return Err(Error::dim(
                "broadcast_row_add",
                self.shape(m),
                self.shape(v),
            ));
        }
        let vv = self.value(v);
        let out = self
            .value(m)
            .chunks(d)
            .flat_map(|row| row.iter().zip(vv).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(&[m, v]);
        Ok(self.push(Op::BroadcastRowAdd(m, v), vec![r, d], out, rg))
    }

    /// Max over the first axis of a `T×R×C` tensor, giving `R×C`.
    pub fn framewise_max(&mut self, frames: Var) -> Result<Var> {
        let s = self.node(frames)?.shape.clone();
        if s.len() != 3 {
            return Err(Error::dim("framewise_max", &s, &[]));
        }
        let (out, arg) = framewise_max_forward(self.value(frames), s[0], s[1] * s[2])?;
        let rg = self.rg(&[frames]);
        Ok(self.push(Op::FramewiseMax(frames, arg), vec![s[1], s[2]], out, rg))
    }

    /// Fused `−ln softmax(logits)[target]` via log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.vector_len("softmax_cross_entropy", logits)?;
        if target >= n {
            return Err(Error::Index {
                index: target,
                len: n,
            });
        }
        let lv = self.value(logits);
        let probs = softmax_forward(lv)?;
        let max = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - lv[target];
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            },
            vec![1],
            vec![loss],
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients are added to any
    /// already present, so repeated calls accumulate until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_adj = Vec::new();
        let nodes = &self.nodes;

        // Adds into the adjoint of `v`, allocating it on first touch.
        fn slot<'a>(
            adj: &'a mut [Option<Vec<f64>>],
            nodes: &[Node],
            v: Var,
        ) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]))
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => leaf_adj.push((i, g)),
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[1];
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(da) = slot(&mut adj, nodes, *a) {
                        for i in 0..m {
                            for t in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * bv[t * n + j];
                                }
                                da[i * k + t] += s;
                            }
                        }
                    }
                    if let Some(db) = slot(&mut adj, nodes, *b) {
                        for i in 0..m {
                            for t in 0..k {
                                let x = av[i * k + t];
                                for j in 0..n {
                                    db[t * n + j] += x * g[i * n + j];
                                }
                            }
                        }
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[0];
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(da) = slot(&mut adj, nodes, *a) {
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                for t in 0..k {
                                    da[i * k + t] += gij * bv[j * k + t];
                                }
                            }
                        }
                    }
                    if let Some(db) = slot(&mut adj, nodes, *b) {
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                for t in 0..k {
                                    db[j * k + t] += gij * av[i * k + t];
                                }
                            }
                        }
                    }
                }
                Op::MatVec(w, x) => {
                    let (m, k) = (nodes[w.0].shape[0], nodes[w.0].shape[1]);
                    let (wv, xv) = (&nodes[w.0].value, &nodes[x.0].value);
                    if let Some(dw) = slot(&mut adj, nodes, *w) {
                        for i in 0..m {
                            for t in 0..k {
                                dw[i * k + t] += g[i] * xv[t];
                            }
                        }
                    }
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        for i in 0..m {
                            for t in 0..k {
                                dx[t] += wv[i * k + t] * g[i];
                            }
                        }
                    }
                }
                Op::VecMat(x, mat) => {
                    let (r, n) = (nodes[mat.0].shape[0], nodes[mat.0].shape[1]);
                    let (xv, mv) = (&nodes[x.0].value, &nodes[mat.0].value);
                    if let Some(dx) = slot(&mut adj, nodes, *x) {
                        for i in 0..r {
                            dx[i] += mv[i * n..(i + 1) * n]
                                .iter()
                                .zip(&g)
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                    if let Some(dm) = slot(&mut adj, nodes, *mat) {
                        for i in 0..r {
                            for j in 0..n {
                                dm[i * n + j] += xv[i] * g[j];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if let Some(d) = slot(&mut adj, nodes, *v) {
                            d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(da) = slot(&mut adj, nodes, *a) {
                        for ((d, g), y) in da.iter_mut().zip(&g).zip(bv) {
                            *d += g * y;
                        }
                    }
                    if let Some(db) = slot(&mut adj, nodes, *b) {
                        for ((d, g), x) in db.iter_mut().zip(&g).zip(av) {
                            *d += g * x;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += c * g);
                    }
                }
                Op::Tanh(a) => {
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(&node.value) {
                            *d += g * (1.0 - y * y);
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(&node.value) {
                            *d += g * y * (1.0 - y);
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        if let Some(d) = slot(&mut adj, nodes, *p) {
                            d.iter_mut()
                                .zip(&g[off..off + len])
                                .for_each(|(d, g)| *d += g);
                        }
                        off += len;
                    }
                }
                Op::Slice(a, start) => {
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        d[*start..*start + g.len()]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(d, g)| *d += g);
                    }
                }
                Op::Reshape(a) => {
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                    }
                }
                Op::Sum(a) => {
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        d.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Softmax(a) => {
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        let y = &node.value;
                        let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += y * (g - dot);
                        }
                    }
                }
                Op::BroadcastRowAdd(m, v) => {
                    let cols = nodes[v.0].value.len();
                    if let Some(dm) = slot(&mut adj, nodes, *m) {
                        dm.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                    }
                    if let Some(dv) = slot(&mut adj, nodes, *v) {
                        for row in g.chunks(cols) {
                            dv.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                    }
                }
                Op::FramewiseMax(f, arg) => {
                    let cells = arg.len();
                    if let Some(d) = slot(&mut adj, nodes, *f) {
                        for (i, (&t, g)) in arg.iter().zip(&g).enumerate() {
                            d[t * cells + i] += g;
                        }
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    if let Some(d) = slot(&mut adj, nodes, *logits) {
                        for (j, (d, p)) in d.iter_mut().zip(probs).enumerate() {
                            let onehot = if j == *target { 1.0 } else { 0.0 };
                            *d += g[0] * (p - onehot);
                        }
                    }
                }
            }
        }

        for (i, g) in leaf_adj {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient at leaf {i}")));
            }
            let slot = self.nodes[i].grad.get_or_insert_with(|| vec![0.0; g.len()]);
            slot.iter_mut().zip(&g).for_each(|(s, g)| *s += g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(g: &mut Graph, r: usize, c: usize, d: &[f64]) -> Var {
        g.constant(&[r, c], d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i = mat(&mut g, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = mat(&mut g, 2, 2, &[3.0, 4.0, 5.0, 6.0]);
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let z = mat(&mut g, 2, 2, &[0.0; 4]);
        let c = g.matmul(z, b).unwrap();
        assert_eq!(g.value(c), &[0.0; 4]);

        let a = mat(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let col = mat(&mut g, 2, 1, &[5.0, 6.0]);
        let c = g.matmul(a, col).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 3, &[0.0; 6]);
        let b = mat(&mut g, 2, 3, &[0.0; 6]);
        match g.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let v = g.constant(&[4], vec![0.0; 4]).unwrap();
        let s = g.softmax(v).unwrap();
        assert_eq!(g.value(s), &[0.25; 4]);

        let v = g.constant(&[2], vec![0.0, 3f64.ln()]).unwrap();
        let s = g.softmax(v).unwrap();
        assert!((g.value(s)[0] - 0.25).abs() < 1e-15);
        assert!((g.value(s)[1] - 0.75).abs() < 1e-15);

        let base = [0.3, -1.2, 2.5];
        let a = softmax_forward(&base).unwrap();
        let b = softmax_forward(&base.map(|x| x + 17.0)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nan_and_survives_large_inputs() {
        assert!(matches!(
            softmax_forward(&[0.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        let s = softmax_forward(&[1000.0, -1000.0, 999.0]).unwrap();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.iter().all(|x| x.is_finite() && *x >= 0.0));
    }

    #[test]
    fn broadcast_row_add_examples() {
        let mut g = Graph::new();
        let m = g.zeros(&[2, 3]).unwrap();
        let v = g.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let o = g.broadcast_row_add(m, v).unwrap();
        assert_eq!(g.value(o), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

        let m = mat(&mut g, 2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let z = g.zeros(&[2]).unwrap();
        let o = g.broadcast_row_add(m, z).unwrap();
        assert_eq!(g.value(o), &[1.0, 1.0, 2.0, 2.0]);
        let v = g.constant(&[2], vec![10.0, 20.0]).unwrap();
        let o = g.broadcast_row_add(m, v).unwrap();
        assert_eq!(g.value(o), &[11.0, 21.0, 12.0, 22.0]);

        let bad = g.zeros(&[3]).unwrap();
        assert!(matches!(
            g.broadcast_row_add(m, bad),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn framewise_max_examples() {
        let mut g = Graph::new();
        let f = g.constant(&[2, 1, 2], vec![1.0, 5.0, 4.0, 2.0]).unwrap();
        let p = g.framewise_max(f).unwrap();
        assert_eq!(g.shape(p), &[1, 2]);
        assert_eq!(g.value(p), &[4.0, 5.0]);

        let one = g.constant(&[1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let p = g.framewise_max(one).unwrap();
        assert_eq!(g.value(p), &[1.0, -2.0, 3.0, 0.5]);

        assert!(matches!(
            framewise_max_forward(&[], 0, 4),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn framewise_max_ties_route_to_first_frame() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![3, 1, 1], vec![2.0, 2.0, 2.0]).unwrap();
        let f = g.param(&t);
        let p = g.framewise_max(f).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(f).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::vector(vec![2.0]).unwrap());
        let b = g.param(&Tensor::vector(vec![3.0]).unwrap());
        let f = g.mul(a, b).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[3.0]);
        assert_eq!(g.grad(b).unwrap(), &[2.0]);

        // a second sweep accumulates
        g.backward(f).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[6.0]);
        g.zero_grad();
        assert!(g.grad(a).is_none());
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::vector(vec![2.0, 1.0]).unwrap());
        let unused = g.param(&Tensor::vector(vec![5.0]).unwrap());
        let s = g.sum(a).unwrap();
        let _ = g.add(unused, unused).unwrap();
        g.backward(s).unwrap();
        let mut t = Tensor::vector(vec![5.0]).unwrap();
        g.accumulate_into(unused, &mut t).unwrap();
        assert_eq!(t.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::vector(vec![2.0, 1.0]).unwrap());
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut g = Graph::new();
        let a = g.constant(&[3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            g.softmax_cross_entropy(a, 3),
            Err(Error::Index { index: 3, len: 3 })
        ));
        let l = g.softmax_cross_entropy(a, 1).unwrap();
        assert!((g.scalar(l) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn truncate_discards_tail() {
        let mut g = Graph::new();
        let a = g.constant(&[1], vec![1.0]).unwrap();
        let mark = g.len();
        let _ = g.tanh(a).unwrap();
        g.truncate(mark);
        assert_eq!(g.len(), 1);
        assert!(g.tanh(Var(5)).is_err());
    }
}
