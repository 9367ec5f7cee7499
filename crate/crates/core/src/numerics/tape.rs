use std::cell::{Ref, RefCell};

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a·bᵀ`.
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<i64>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], kept for leaf nodes only.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records operations in execution order and replays them backwards.
///
/// A tape is single-threaded; create one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn shape2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Records a tensor as an input; it receives a gradient iff `requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn data(&self, v: Var) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_slice())
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor {
            shape: nodes[v.0].shape.clone(),
            data: nodes[v.0].value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        shape2(&shape).ok_or_else(|| Error::Dimension(format!("{what} expects a matrix, got shape {shape:?}")))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                [m, k],
                [k2, n]
            )));
        }
        let value = {
            let nodes = self.nodes.borrow();
            kernels::matmul(&nodes[a.0].value, &nodes[b.0].value, m, k, n)
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), ng))
    }

    /// `a[m×k]·b[n×k]ᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt inner dimensions differ: {:?} x {:?}ᵀ",
                [m, k],
                [n, k2]
            )));
        }
        let value = {
            let nodes = self.nodes.borrow();
            kernels::matmul_nt(&nodes[a.0].value, &nodes[b.0].value, m, k, n)
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], value, Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let value = kernels::transpose(&self.data(a), r, c);
        let ng = self.needs(a);
        Ok(self.push(vec![c, r], value, Op::Transpose(a), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(sa)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let value: Vec<f64> = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.iter().zip(&nodes[b.0].value).map(|(x, y)| x + y).collect()
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, value, Op::Add(a, b), ng))
    }

    /// Adds a `[d]` bias to every row of a `[..×d]` tensor.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x);
        let bshape = self.shape(bias);
        let d = last_dim(&shape);
        if bshape.iter().product::<usize>() != d || bshape.len() != 1 {
            return Err(Error::Dimension(format!("bias {bshape:?} does not match last dimension of {shape:?}")));
        }
        let value: Vec<f64> = {
            let nodes = self.nodes.borrow();
            let b = &nodes[bias.0].value;
            nodes[x.0].value.iter().enumerate().map(|(i, v)| v + b[i % d]).collect()
        };
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(shape, value, Op::AddBias(x, bias), ng))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        let value: Vec<f64> = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.iter().zip(&nodes[b.0].value).map(|(x, y)| x * y).collect()
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, value, Op::Mul(a, b), ng))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let shape = self.shape(a);
        let value: Vec<f64> = self.data(a).iter().map(|v| v * c).collect();
        let ng = self.needs(a);
        self.push(shape, value, Op::Scale(a, c), ng)
    }

    pub fn gelu(&self, a: Var) -> Var {
        let shape = self.shape(a);
        let value: Vec<f64> = self.data(a).iter().map(|&v| kernels::gelu(v)).collect();
        let ng = self.needs(a);
        self.push(shape, value, Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last dimension; columns with `keep[j] == false`
    /// behave as if their score were negative infinity.
    pub fn softmax_rows_masked(&self, a: Var, keep: &[bool]) -> Result<Var> {
        self.softmax_impl(a, Some(keep))
    }

    fn softmax_impl(&self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a);
        let cols = last_dim(&shape);
        if cols == 0 || shape.is_empty() {
            return Err(Error::Dimension(format!("softmax over empty rows, shape {shape:?}")));
        }
        if let Some(k) = keep {
            if k.len() != cols {
                return Err(Error::Dimension(format!("mask of length {} for {} columns", k.len(), cols)));
            }
        }
        let rows = shape.iter().product::<usize>() / cols;
        let value = kernels::softmax_rows(&self.data(a), rows, cols, keep)
            .ok_or_else(|| Error::Dimension("softmax row with every column masked".into()))?;
        let ng = self.needs(a);
        Ok(self.push(shape, value, Op::Softmax(a), ng))
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x);
        let d = last_dim(&shape);
        if d == 0 || shape.is_empty() {
            return Err(Error::Dimension(format!("layer_norm over empty last dimension, shape {shape:?}")));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension(format!(
                    "layer_norm {name} has shape {:?}, expected [{d}]",
                    self.shape(p)
                )));
            }
        }
        let rows = shape.iter().product::<usize>() / d;
        let (value, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let xs = &nodes[x.0].value;
            let g = &nodes[gamma.0].value;
            let b = &nodes[beta.0].value;
            let mut value = vec![0.0; xs.len()];
            let mut xhat = vec![0.0; xs.len()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = &xs[r * d..(r + 1) * d];
                let mut mean = 0.0;
                for v in row {
                    mean += v;
                }
                mean /= d as f64;
                let mut var = 0.0;
                for v in row {
                    var += (v - mean) * (v - mean);
                }
                var /= d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for j in 0..d {
                    let h = (row[j] - mean) * inv;
                    xhat[r * d + j] = h;
                    value[r * d + j] = g[j] * h + b[j];
                }
            }
            (value, xhat, inv_std)
        };
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            shape,
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let mut total = 0.0;
        for v in self.data(a).iter() {
            total += v;
        }
        let ng = self.needs(a);
        self.push(vec![1], vec![total], Op::Sum(a), ng)
    }

    /// Selects rows of a `[n×d]` table, e.g. an embedding lookup.
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(table, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("row index {bad} out of range for table of {n} rows")));
        }
        let value: Vec<f64> = {
            let data = self.data(table);
            idx.iter().flat_map(|&i| data[i * d..(i + 1) * d].iter().copied()).collect()
        };
        let ng = self.needs(table);
        Ok(self.push(
            vec![idx.len(), d],
            value,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start + len > r {
            return Err(Error::Dimension(format!("row slice {start}..{} of a {r}-row matrix", start + len)));
        }
        let value = self.data(x)[start * c..(start + len) * c].to_vec();
        let ng = self.needs(x);
        Ok(self.push(vec![len, c], value, Op::SliceRows { x, start }, ng))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_rows of nothing".into()));
        }
        let (_, c) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut value = Vec::new();
        let mut ng = false;
        for &p in parts {
            let (r, c2) = self.dims2(p, "concat_rows")?;
            if c2 != c {
                return Err(Error::Dimension(format!("concat_rows column mismatch: {c} vs {c2}")));
            }
            rows += r;
            value.extend_from_slice(&self.data(p));
            ng |= self.needs(p);
        }
        Ok(self.push(vec![rows, c], value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::Dimension(format!("column slice {start}..{} of a {c}-column matrix", start + len)));
        }
        let value: Vec<f64> = {
            let data = self.data(x);
            (0..r).flat_map(|i| data[i * c + start..i * c + start + len].iter().copied()).collect()
        };
        let ng = self.needs(x);
        Ok(self.push(vec![r, len], value, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols of nothing".into()));
        }
        let (r, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut ng = false;
        for &p in parts {
            let (r2, c) = self.dims2(p, "concat_cols")?;
            if r2 != r {
                return Err(Error::Dimension(format!("concat_cols row mismatch: {r} vs {r2}")));
            }
            widths.push(c);
            ng |= self.needs(p);
        }
        let total: usize = widths.iter().sum();
        let mut value = vec![0.0; r * total];
        {
            let nodes = self.nodes.borrow();
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &nodes[p.0].value;
                for i in 0..r {
                    value[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
                }
                offset += w;
            }
        }
        Ok(self.push(vec![r, total], value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x);
        if old.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::Dimension(format!("cannot reshape {old:?} into {shape:?}")));
        }
        let value = self.data(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), ng))
    }

    /// Mean negative log-likelihood over rows whose target is non-negative.
    pub fn cross_entropy(&self, logits: Var, targets: &[i64]) -> Result<Var> {
        let (n, c) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::Dimension(format!("{} targets for {n} logit rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c as i64) {
            return Err(Error::Contract(format!("target {bad} out of range for {c} classes")));
        }
        let count = targets.iter().filter(|&&t| t >= 0).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy without any labeled row".into()));
        }
        let (loss, probs) = {
            let data = self.data(logits);
            let probs = kernels::softmax_rows(&data, n, c, None).expect("unmasked softmax");
            let mut loss = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                if t >= 0 {
                    let row = &data[r * c..(r + 1) * c];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for v in row {
                        z += (v - max).exp();
                    }
                    loss += max + z.ln() - row[t as usize];
                }
            }
            (loss / count as f64, probs)
        };
        let ng = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients of a value used several times are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if loss.0 >= n {
            return Err(Error::Contract("loss is not recorded on this tape".into()));
        }
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if !nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut [f64]> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (m, k) = shape2(&nodes[a.0].shape).unwrap();
                    let (_, nn) = shape2(&nodes[b.0].shape).unwrap();
                    if nodes[a.0].needs_grad {
                        let da = kernels::matmul_nt(&g, &nodes[b.0].value, m, nn, k);
                        let s = slot(&mut grads, &nodes, *a).unwrap();
                        for (x, y) in s.iter_mut().zip(&da) {
                            *x += y;
                        }
                    }
                    if let Some(s) = slot(&mut grads, &nodes, *b) {
                        kernels::matmul_tn_acc(s, &nodes[a.0].value, &g, m, k, nn);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (m, k) = shape2(&nodes[a.0].shape).unwrap();
                    let (nn, _) = shape2(&nodes[b.0].shape).unwrap();
                    if nodes[a.0].needs_grad {
                        let da = kernels::matmul(&g, &nodes[b.0].value, m, nn, k);
                        let s = slot(&mut grads, &nodes, *a).unwrap();
                        for (x, y) in s.iter_mut().zip(&da) {
                            *x += y;
                        }
                    }
                    if let Some(s) = slot(&mut grads, &nodes, *b) {
                        kernels::matmul_tn_acc(s, &g, &nodes[a.0].value, m, nn, k);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = shape2(&node.shape).unwrap();
                    let t = kernels::transpose(&g, r, c);
                    let s = slot(&mut grads, &nodes, *a).unwrap();
                    for (x, y) in s.iter_mut().zip(&t) {
                        *x += y;
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if let Some(s) = slot(&mut grads, &nodes, *v) {
                            for (x, y) in s.iter_mut().zip(&g) {
                                *x += y;
                            }
                        }
                    }
                }
                Op::AddBias(x, bias) => {
                    if let Some(s) = slot(&mut grads, &nodes, *x) {
                        for (a, b) in s.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    if let Some(s) = slot(&mut grads, &nodes, *bias) {
                        let d = s.len();
                        for (j, v) in g.iter().enumerate() {
                            s[j % d] += v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(s) = slot(&mut grads, &nodes, *a) {
                        for ((x, gv), bv) in s.iter_mut().zip(&g).zip(&nodes[b.0].value) {
                            *x += gv * bv;
                        }
                    }
                    if let Some(s) = slot(&mut grads, &nodes, *b) {
                        for ((x, gv), av) in s.iter_mut().zip(&g).zip(&nodes[a.0].value) {
                            *x += gv * av;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let s = slot(&mut grads, &nodes, *a).unwrap();
                    for (x, gv) in s.iter_mut().zip(&g) {
                        *x += gv * c;
                    }
                }
                Op::Gelu(a) => {
                    let s = slot(&mut grads, &nodes, *a).unwrap();
                    for ((x, gv), &xv) in s.iter_mut().zip(&g).zip(&nodes[a.0].value) {
                        *x += gv * kernels::gelu_grad(xv);
                    }
                }
                Op::Softmax(a) => {
                    let cols = last_dim(&node.shape);
                    let y = &node.value;
                    let s = slot(&mut grads, &nodes, *a).unwrap();
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let inner = kernels::dot(yr, gr);
                        for j in 0..cols {
                            s[r * cols + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = last_dim(&node.shape);
                    let rows = inv_std.len();
                    if let Some(s) = slot(&mut grads, &nodes, *gamma) {
                        for r in 0..rows {
                            for j in 0..d {
                                s[j] += g[r * d + j] * xhat[r * d + j];
                            }
                        }
                    }
                    if let Some(s) = slot(&mut grads, &nodes, *beta) {
                        for r in 0..rows {
                            for j in 0..d {
                                s[j] += g[r * d + j];
                            }
                        }
                    }
                    if nodes[x.0].needs_grad {
                        let gm = &nodes[gamma.0].value;
                        let s = slot(&mut grads, &nodes, *x).unwrap();
                        let mut dxhat = vec![0.0; d];
                        for r in 0..rows {
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..d {
                                dxhat[j] = g[r * d + j] * gm[j];
                                sum_d += dxhat[j];
                                sum_dx += dxhat[j] * xhat[r * d + j];
                            }
                            let scale = inv_std[r] / d as f64;
                            for j in 0..d {
                                s[r * d + j] +=
                                    scale * (d as f64 * dxhat[j] - sum_d - xhat[r * d + j] * sum_dx);
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let s = slot(&mut grads, &nodes, *a).unwrap();
                    for x in s.iter_mut() {
                        *x += g[0];
                    }
                }
                Op::GatherRows { table, idx } => {
                    let d = last_dim(&node.shape);
                    let s = slot(&mut grads, &nodes, *table).unwrap();
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            s[i * d + j] += g[r * d + j];
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    let c = last_dim(&node.shape);
                    let s = slot(&mut grads, &nodes, *x).unwrap();
                    for (dst, v) in s[start * c..start * c + g.len()].iter_mut().zip(&g) {
                        *dst += v;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        if let Some(s) = slot(&mut grads, &nodes, *p) {
                            for (dst, v) in s.iter_mut().zip(&g[offset..offset + len]) {
                                *dst += v;
                            }
                        }
                        offset += len;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (r, w) = shape2(&node.shape).unwrap();
                    let c = last_dim(&nodes[x.0].shape);
                    let s = slot(&mut grads, &nodes, *x).unwrap();
                    for i in 0..r {
                        for j in 0..w {
                            s[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = shape2(&node.shape).unwrap();
                    let mut offset = 0;
                    for p in parts {
                        let w = last_dim(&nodes[p.0].shape);
                        if let Some(s) = slot(&mut grads, &nodes, *p) {
                            for i in 0..r {
                                for j in 0..w {
                                    s[i * w + j] += g[i * total + offset + j];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::Reshape(a) => {
                    let s = slot(&mut grads, &nodes, *a).unwrap();
                    for (x, v) in s.iter_mut().zip(&g) {
                        *x += v;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let c = last_dim(&nodes[logits.0].shape);
                    let scale = g[0] / *count as f64;
                    let s = slot(&mut grads, &nodes, *logits).unwrap();
                    for (r, &t) in targets.iter().enumerate() {
                        if t < 0 {
                            continue;
                        }
                        for j in 0..c {
                            let onehot = if j == t as usize { 1.0 } else { 0.0 };
                            s[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }

        for (i, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}
