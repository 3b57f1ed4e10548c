use super::kernels::{self, gelu, gelu_grad, sigmoid, softplus};
use super::{Result, Tensor, TensorError};
use crate::params::ParameterSet;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LayerNorm(NodeId, Vec<f64>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    RowDot(NodeId, NodeId),
    MeanRows(NodeId),
    Sum(NodeId),
    MaskedBce {
        logits: NodeId,
        targets: Vec<f64>,
        mask: Vec<bool>,
        denom: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A computation tape. Nodes are appended in evaluation order, so the node
/// list is already topologically sorted and the backward pass simply walks
/// it in reverse.
///
/// A graph is single-writer; build one per sample batch and per thread.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

/// Outcome of a masked binary cross-entropy node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    pub node: NodeId,
    /// Rows that had at least one contributing class.
    pub active_rows: usize,
    /// Set when no class in the whole batch contributed; the loss is then 0
    /// and carries no gradient signal.
    pub no_signal: bool,
}

fn colsum(t: &Tensor, rows: usize, cols: usize) -> Tensor {
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        for (o, v) in out.iter_mut().zip(&t.data()[i * cols..(i + 1) * cols]) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn row_broadcast(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let cols = row.len();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, row.data()[i % cols]))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), id));
        id
    }

    /// Registers every tensor of `params` as a trainable leaf.
    pub fn params_from(&mut self, params: &ParameterSet) -> Vec<(String, NodeId)> {
        params
            .iter()
            .map(|(name, t)| (name.to_string(), self.param(name, t.clone())))
            .collect()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("add", a, b));
        }
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, cols) = self.value(a).dims2("add_row")?;
        if self.value(row).len() != cols {
            return Err(self.mismatch("add_row", a, row));
        }
        let v = row_broadcast(self.value(a), self.value(row), |x, y| x + y);
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(v, Op::AddRow(a, row), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("mul", a, b));
        }
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// Multiplies every row of `a` elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, cols) = self.value(a).dims2("mul_row")?;
        if self.value(row).len() != cols {
            return Err(self.mismatch("mul_row", a, row));
        }
        let v = row_broadcast(self.value(a), self.value(row), |x, y| x * y);
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(v, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = kernels::softmax_rows(self.value(a))?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Softmax(a), ng))
    }

    /// Row-wise layer normalisation without the affine part.
    pub fn layer_norm_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (v, inv_std) = kernels::layer_norm_rows(self.value(a))?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::LayerNorm(a, inv_std), ng))
    }

    /// Layer normalisation followed by `gamma ⊙ x + beta`.
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let n = self.layer_norm_rows(a)?;
        let s = self.mul_row(n, gamma)?;
        self.add_row(s, beta)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let (_, cols) = self.value(parts[0]).dims2("concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != cols {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let v = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let (rows, _) = self.value(parts[0]).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != rows {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let v = Tensor::matrix(rows, total, data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(a).dims2("slice_rows")?;
        if start + len > rows {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                index: start + len,
                len: rows,
            });
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::matrix(len, cols, data)?,
            Op::SliceRows(a, start),
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(a).dims2("slice_cols")?;
        if start + len > cols {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                index: start + len,
                len: cols,
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&src[i * cols + start..i * cols + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::matrix(rows, len, data)?,
            Op::SliceCols(a, start),
            ng,
        ))
    }

    /// Embedding lookup: picks rows of `table` by index.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.value(table).dims2("gather_rows")?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::OutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(self.value(table).row(i));
        }
        let ng = self.ng(table);
        let v = Tensor::matrix(indices.len(), cols, data)?;
        Ok(self.push(v, Op::GatherRows(table, indices.to_vec()), ng))
    }

    /// Per-row dot product of two `n x m` matrices, giving a `1 x n` row.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, m) = self.value(a).dims2("row_dot")?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("row_dot", a, b));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out = (0..n)
            .map(|i| {
                ad[i * m..(i + 1) * m]
                    .iter()
                    .zip(&bd[i * m..(i + 1) * m])
                    .fold(0.0, |acc, (x, y)| acc + x * y)
            })
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(1, n, out)?, Op::RowDot(a, b), ng))
    }

    /// Column means, giving a `1 x cols` row.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(a).dims2("mean_rows")?;
        let mut v = colsum(self.value(a), rows, cols);
        for x in v.data_mut() {
            *x /= rows as f64;
        }
        let ng = self.ng(a);
        Ok(self.push(v.reshape(vec![1, cols])?, Op::MeanRows(a), ng))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// Binary cross-entropy on logits, restricted to entries where `mask`
    /// is true, summed over classes and averaged over the rows that have at
    /// least one contributing class.
    pub fn masked_bce(
        &mut self,
        logits: NodeId,
        targets: &[f64],
        mask: &[bool],
    ) -> Result<MaskedLoss> {
        let (rows, cols) = self.value(logits).dims2("masked_bce")?;
        if targets.len() != rows * cols || mask.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "masked_bce",
                left: self.value(logits).shape().to_vec(),
                right: vec![targets.len(), mask.len()],
            });
        }
        let active_rows = (0..rows)
            .filter(|i| mask[i * cols..(i + 1) * cols].iter().any(|&m| m))
            .count();
        let z = self.value(logits).data();
        let mut total = 0.0;
        for ((&zi, &yi), &mi) in z.iter().zip(targets).zip(mask) {
            if mi {
                total += softplus(zi) - yi * zi;
            }
        }
        let denom = active_rows.max(1) as f64;
        let ng = self.ng(logits);
        let node = self.push(
            Tensor::scalar(total / denom),
            Op::MaskedBce {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                denom,
            },
            ng,
        );
        Ok(MaskedLoss {
            node,
            active_rows,
            no_signal: active_rows == 0,
        })
    }

    /// Reverse pass from a scalar node. Returns one gradient slot per node.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Gradient for every entry of `params`, keyed identically. Entries that
    /// never reached the loss get zeros.
    pub fn gradients(&self, loss: NodeId, params: &ParameterSet) -> Result<ParameterSet> {
        let grads = self.backward(loss)?;
        let mut out = ParameterSet::new();
        for (name, t) in params.iter() {
            let mut acc: Option<Tensor> = None;
            for (pname, id) in &self.params {
                if pname == name {
                    if let Some(g) = &grads[id.0] {
                        acc = Some(match acc {
                            Some(a) => zip_map(&a, g, |x, y| x + y),
                            None => g.clone(),
                        });
                    }
                }
            }
            let g = match acc {
                Some(g) => g.reshape(t.shape().to_vec())?,
                None => Tensor::zeros(t.shape().to_vec()),
            };
            out.insert(name, g);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, contrib: Tensor) {
        if !self.ng(id) {
            return;
        }
        let contrib = if contrib.shape() == self.value(id).shape() {
            contrib
        } else {
            contrib
                .reshape(self.value(id).shape().to_vec())
                .expect("gradient size matches value")
        };
        grads[id.0] = Some(match grads[id.0].take() {
            Some(prev) => zip_map(&prev, &contrib, |x, y| x + y),
            None => contrib,
        });
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, kernels::matmul_nt(g, self.value(*b))?);
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, kernels::matmul_tn(self.value(*a), g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, kernels::matmul(g, self.value(*b))?);
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, kernels::matmul_tn(g, self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*row) {
                    let (r, c) = g.dims2("add_row")?;
                    self.accumulate(grads, *row, colsum(g, r, c));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::MulRow(a, row) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, row_broadcast(g, self.value(*row), |x, y| x * y));
                }
                if self.ng(*row) {
                    let (r, c) = g.dims2("mul_row")?;
                    let prod = zip_map(g, self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *row, colsum(&prod, r, c));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::Gelu(a) => {
                self.accumulate(
                    grads,
                    *a,
                    zip_map(g, self.value(*a), |gi, x| gi * gelu_grad(x)),
                );
            }
            Op::Sigmoid(a) => {
                self.accumulate(
                    grads,
                    *a,
                    zip_map(g, &node.value, |gi, y| gi * y * (1.0 - y)),
                );
            }
            Op::Softmax(a) => {
                let (r, c) = g.dims2("softmax")?;
                let y = node.value.data();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let span = i * c..(i + 1) * c;
                    let dot = g.data()[span.clone()]
                        .iter()
                        .zip(&y[span.clone()])
                        .fold(0.0, |acc, (gi, yi)| acc + gi * yi);
                    for j in span {
                        out[j] = y[j] * (g.data()[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), out)?);
            }
            Op::LayerNorm(a, inv_std) => {
                let (r, c) = g.dims2("layer_norm")?;
                let y = node.value.data();
                let gd = g.data();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let span = i * c..(i + 1) * c;
                    let mean_g = gd[span.clone()].iter().fold(0.0, |acc, v| acc + v) / c as f64;
                    let mean_gy = gd[span.clone()]
                        .iter()
                        .zip(&y[span.clone()])
                        .fold(0.0, |acc, (gi, yi)| acc + gi * yi)
                        / c as f64;
                    for j in span {
                        out[j] = inv_std[i] * (gd[j] - mean_g - y[j] * mean_gy);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), out)?);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let piece = Tensor::new(
                        self.value(p).shape().to_vec(),
                        g.data()[offset..offset + n].to_vec(),
                    )?;
                    offset += n;
                    self.accumulate(grads, p, piece);
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2("concat_cols")?;
                let mut start = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2("concat_cols")?;
                    let mut data = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        data.extend_from_slice(&g.data()[i * total + start..i * total + start + w]);
                    }
                    start += w;
                    self.accumulate(grads, p, Tensor::matrix(rows, w, data)?);
                }
            }
            Op::SliceRows(a, start) => {
                let (_, cols) = self.value(*a).dims2("slice_rows")?;
                let mut full = Tensor::zeros(self.value(*a).shape().to_vec());
                full.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, full);
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(*a).dims2("slice_cols")?;
                let (_, w) = g.dims2("slice_cols")?;
                let mut full = Tensor::zeros(self.value(*a).shape().to_vec());
                for i in 0..rows {
                    full.data_mut()[i * cols + start..i * cols + start + w]
                        .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *a, full);
            }
            Op::GatherRows(table, indices) => {
                let (_, cols) = self.value(*table).dims2("gather_rows")?;
                let mut full = Tensor::zeros(self.value(*table).shape().to_vec());
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..cols {
                        full.data_mut()[i * cols + j] += g.data()[k * cols + j];
                    }
                }
                self.accumulate(grads, *table, full);
            }
            Op::RowDot(a, b) => {
                let (_, m) = self.value(*a).dims2("row_dot")?;
                let scale_rows = |src: &Tensor| {
                    let data = src
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, v)| v * g.data()[k / m])
                        .collect();
                    Tensor::new(src.shape().to_vec(), data).expect("same shape")
                };
                if self.ng(*a) {
                    self.accumulate(grads, *a, scale_rows(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, scale_rows(self.value(*a)));
                }
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.value(*a).dims2("mean_rows")?;
                let data = (0..rows * cols)
                    .map(|k| g.data()[k % cols] / rows as f64)
                    .collect();
                self.accumulate(grads, *a, Tensor::matrix(rows, cols, data)?);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape().to_vec(), gv));
            }
            Op::MaskedBce {
                logits,
                targets,
                mask,
                denom,
            } => {
                let gv = g.data()[0];
                let data = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(mask)
                    .map(|((&z, &y), &m)| {
                        if m {
                            gv * (sigmoid(z) - y) / denom
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(
                    grads,
                    *logits,
                    Tensor::new(self.value(*logits).shape().to_vec(), data)?,
                );
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_loss_has_unit_gradient() {
        let mut params = ParameterSet::new();
        params.insert("x", Tensor::scalar(0.7));
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(0.7));
        let grads = g.gradients(x, &params).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[1.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let _w = g.param("w", params.get("w").unwrap().clone());
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let loss = g.sum(c);
        let grads = g.gradients(loss, &params).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn parameters_off_the_tape_get_zeros() {
        let mut params = ParameterSet::new();
        params.insert("a", Tensor::vector(vec![1.0]));
        params.insert("unused", Tensor::zeros(vec![2, 3]));
        let mut g = Graph::new();
        let a = g.param("a", Tensor::vector(vec![1.0]));
        let loss = g.sum(a);
        let grads = g.gradients(loss, &params).unwrap();
        assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros(vec![2, 3]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(a), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn masked_bce_without_contributing_classes_flags_no_signal() {
        let mut g = Graph::new();
        let z = g.param("z", Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap());
        let out = g.masked_bce(z, &[1.0, 0.0], &[false, false]).unwrap();
        assert!(out.no_signal);
        assert_eq!(g.value(out.node).data(), &[0.0]);
    }
}
