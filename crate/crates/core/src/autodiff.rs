//! Minimal reverse-mode automatic differentiation over the tensor
//! operations the network and loss require. Values are dense row-major
//! matrices of f64; the continuous convolutions are fused tape primitives
//! whose backward pass also produces gradients with respect to particle
//! positions (needed when a rollout feeds predictions back as inputs).

use std::rc::Rc;

use crate::conv::{materialize_antisym, ConvPlan, FREE_CELLS, GRID_CELLS};
use crate::error::{Error, Result};
use crate::math::{vec3, Vec3};

pub const POW_GUARD: f64 = 1e-9;

/// Dense row-major matrix. Scalars are 1x1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "tensor data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_vec3s(v: &[Vec3]) -> Tensor {
        let mut data = Vec::with_capacity(v.len() * 3);
        for p in v {
            data.extend_from_slice(&p.to_array());
        }
        Tensor {
            rows: v.len(),
            cols: 3,
            data,
        }
    }

    pub fn to_vec3s(&self) -> Vec<Vec3> {
        assert_eq!(self.cols, 3);
        self.data
            .chunks_exact(3)
            .map(|c| vec3(c[0], c[1], c[2]))
            .collect()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// k * x + b, elementwise.
    Affine(NodeId, f64, f64),
    MatMul(NodeId, NodeId),
    /// (n, c) plus a (1, c) bias row.
    AddBias(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    /// max(x, POW_GUARD)^gamma, elementwise.
    PowGuard(NodeId, f64),
    MeanRows(NodeId),
    BroadcastRows(NodeId, usize),
    GatherRows(NodeId, Rc<Vec<usize>>),
    /// Scatter-add rows of the input into `out_rows` rows at the given
    /// destination indices.
    ScatterSumRows(NodeId, Rc<Vec<usize>>, usize),
    /// Per-row L2 norm, (n, c) -> (n, 1).
    NormRows(NodeId),
    SumAll(NodeId),
    /// Expand an antisymmetric free half (32*cin, cout) to the full
    /// point-reflected grid (64*cin, cout).
    AntisymMaterialize(NodeId, usize),
    CConv {
        features: NodeId,
        kernel: NodeId,
        src_pos: NodeId,
        query_pos: NodeId,
        plan: Rc<ConvPlan>,
    },
    Ascc {
        query_features: NodeId,
        src_features: NodeId,
        kernel: NodeId,
        src_pos: NodeId,
        query_pos: NodeId,
        plan: Rc<ConvPlan>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when this node depends on a differentiable leaf; backward
    /// skips gradient work for nodes that cannot reach one.
    needs_grad: bool,
}

/// Append-only record of a forward computation; `backward` fills per-node
/// gradient accumulators in reverse order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` root with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.grads[id]
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let needs_grad = self.op_needs_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// A node needs gradients iff any input does; `Leaf` is handled by the
    /// constructors (`leaf` differentiable, `constant` not).
    fn op_needs_grad(&self, op: &Op) -> bool {
        match *op {
            Op::Leaf => true,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::ConcatCols(a, b) => self.needs(a) || self.needs(b),
            Op::Affine(a, _, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::PowGuard(a, _)
            | Op::MeanRows(a)
            | Op::BroadcastRows(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterSumRows(a, _, _)
            | Op::NormRows(a)
            | Op::SumAll(a)
            | Op::AntisymMaterialize(a, _) => self.needs(a),
            Op::CConv {
                features,
                kernel,
                src_pos,
                query_pos,
                ..
            } => {
                self.needs(features)
                    || self.needs(kernel)
                    || self.needs(src_pos)
                    || self.needs(query_pos)
            }
            Op::Ascc {
                query_features,
                src_features,
                kernel,
                src_pos,
                query_pos,
                ..
            } => {
                self.needs(query_features)
                    || self.needs(src_features)
                    || self.needs(kernel)
                    || self.needs(src_pos)
                    || self.needs(query_pos)
            }
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A leaf that no gradient is ever requested for (data inputs,
    /// precomputed weights); backward skips everything that depends on
    /// nothing else.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id].needs_grad = false;
        id
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<(usize, usize)> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if !ta.same_shape(tb) {
            return Err(Error::Config(format!(
                "{name}: shape mismatch {}x{} vs {}x{}",
                ta.rows, ta.cols, tb.rows, tb.cols
            )));
        }
        Ok((ta.rows, ta.cols))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.binary_same_shape(a, b, "add")?;
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Tensor { rows: r, cols: c, data }, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.binary_same_shape(a, b, "sub")?;
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Tensor { rows: r, cols: c, data }, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.binary_same_shape(a, b, "mul")?;
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Tensor { rows: r, cols: c, data }, Op::Mul(a, b)))
    }

    /// k * x + b elementwise.
    pub fn affine(&mut self, a: NodeId, k: f64, b: f64) -> NodeId {
        let t = &self.nodes[a].value;
        let data = t.data.iter().map(|x| k * x + b).collect();
        let (rows, cols) = (t.rows, t.cols);
        self.push(Tensor { rows, cols, data }, Op::Affine(a, k, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.cols != tb.rows {
            return Err(Error::Config(format!(
                "matmul: inner dimensions {} vs {}",
                ta.cols, tb.rows
            )));
        }
        let value = matmul(ta, tb);
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[bias].value);
        if tb.rows != 1 || tb.cols != ta.cols {
            return Err(Error::Config(format!(
                "add_bias: bias {}x{} does not broadcast over {}x{}",
                tb.rows, tb.cols, ta.rows, ta.cols
            )));
        }
        let mut out = ta.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += tb.data[c];
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.rows != tb.rows {
            return Err(Error::Config(format!(
                "concat_cols: row mismatch {} vs {}",
                ta.rows, tb.rows
            )));
        }
        let rows = ta.rows;
        let cols = ta.cols + tb.cols;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatCols(a, b)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let data = t.data.iter().map(|x| x.max(0.0)).collect();
        let (rows, cols) = (t.rows, t.cols);
        self.push(Tensor { rows, cols, data }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let data = t.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let (rows, cols) = (t.rows, t.cols);
        self.push(Tensor { rows, cols, data }, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let data = t.data.iter().map(|x| x.exp()).collect();
        let (rows, cols) = (t.rows, t.cols);
        self.push(Tensor { rows, cols, data }, Op::Exp(a))
    }

    /// max(x, 1e-9)^gamma; the guard keeps the derivative finite for
    /// exponents below one.
    pub fn pow_guard(&mut self, a: NodeId, gamma: f64) -> NodeId {
        let t = &self.nodes[a].value;
        let data = t.data.iter().map(|x| x.max(POW_GUARD).powf(gamma)).collect();
        let (rows, cols) = (t.rows, t.cols);
        self.push(Tensor { rows, cols, data }, Op::PowGuard(a, gamma))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        if t.rows == 0 {
            return Err(Error::RejectedInput("mean_rows over zero rows".into()));
        }
        let mut data = vec![0.0; t.cols];
        for r in 0..t.rows {
            for (c, v) in data.iter_mut().enumerate() {
                *v += t.data[r * t.cols + c];
            }
        }
        let inv = 1.0 / t.rows as f64;
        for v in data.iter_mut() {
            *v *= inv;
        }
        Ok(self.push(
            Tensor {
                rows: 1,
                cols: t.cols,
                data,
            },
            Op::MeanRows(a),
        ))
    }

    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        if t.rows != 1 {
            return Err(Error::Config("broadcast_rows expects a single row".into()));
        }
        let mut data = Vec::with_capacity(n * t.cols);
        for _ in 0..n {
            data.extend_from_slice(&t.data);
        }
        let cols = t.cols;
        Ok(self.push(Tensor { rows: n, cols, data }, Op::BroadcastRows(a, n)))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Rc<Vec<usize>>) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        let cols = t.cols;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            if i >= t.rows {
                return Err(Error::Config(format!(
                    "gather_rows index {i} out of range ({} rows)",
                    t.rows
                )));
            }
            data.extend_from_slice(t.row(i));
        }
        let rows = indices.len();
        Ok(self.push(Tensor { rows, cols, data }, Op::GatherRows(a, indices)))
    }

    pub fn scatter_sum_rows(
        &mut self,
        a: NodeId,
        indices: Rc<Vec<usize>>,
        out_rows: usize,
    ) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        if indices.len() != t.rows {
            return Err(Error::Config(format!(
                "scatter_sum_rows: {} indices for {} rows",
                indices.len(),
                t.rows
            )));
        }
        let cols = t.cols;
        let mut data = vec![0.0; out_rows * cols];
        for (r, &dst) in indices.iter().enumerate() {
            if dst >= out_rows {
                return Err(Error::Config(format!(
                    "scatter_sum_rows destination {dst} out of range ({out_rows})"
                )));
            }
            for c in 0..cols {
                data[dst * cols + c] += t.data[r * cols + c];
            }
        }
        Ok(self.push(
            Tensor {
                rows: out_rows,
                cols,
                data,
            },
            Op::ScatterSumRows(a, indices, out_rows),
        ))
    }

    pub fn norm_rows(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let data = (0..t.rows)
            .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rows = t.rows;
        self.push(Tensor { rows, cols: 1, data }, Op::NormRows(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Expands an antisymmetric free half into the full grid; gradients
    /// flow back to the free cells only, so the point-reflection invariant
    /// can never drift under training.
    pub fn antisym_materialize(&mut self, free: NodeId, cin: usize) -> Result<NodeId> {
        let t = &self.nodes[free].value;
        if t.rows != FREE_CELLS * cin {
            return Err(Error::Config(format!(
                "antisym_materialize: expected {} rows, got {}",
                FREE_CELLS * cin,
                t.rows
            )));
        }
        let cout = t.cols;
        let mut data = vec![0.0; GRID_CELLS * cin * cout];
        materialize_antisym(&t.data, cin, cout, &mut data);
        Ok(self.push(
            Tensor {
                rows: GRID_CELLS * cin,
                cols: cout,
                data,
            },
            Op::AntisymMaterialize(free, cin),
        ))
    }

    fn check_conv_shapes(
        &self,
        plan: &ConvPlan,
        kernel: NodeId,
        src_pos: NodeId,
        query_pos: NodeId,
        cin: usize,
    ) -> Result<usize> {
        let kt = &self.nodes[kernel].value;
        if kt.rows != GRID_CELLS * cin {
            return Err(Error::Config(format!(
                "conv kernel has {} rows; expected {} for {} input channels",
                kt.rows,
                GRID_CELLS * cin,
                cin
            )));
        }
        let sp = &self.nodes[src_pos].value;
        let qp = &self.nodes[query_pos].value;
        if sp.cols != 3 || qp.cols != 3 {
            return Err(Error::Config("conv positions must have 3 columns".into()));
        }
        if sp.rows != plan.n_sources || qp.rows != plan.n_queries() {
            return Err(Error::Config(format!(
                "conv positions ({} src, {} query) do not match plan ({}, {})",
                sp.rows,
                qp.rows,
                plan.n_sources,
                plan.n_queries()
            )));
        }
        Ok(kt.cols)
    }

    pub fn cconv(
        &mut self,
        features: NodeId,
        kernel: NodeId,
        src_pos: NodeId,
        query_pos: NodeId,
        plan: Rc<ConvPlan>,
    ) -> Result<NodeId> {
        let ft = &self.nodes[features].value;
        if ft.rows != plan.n_sources {
            return Err(Error::Config(format!(
                "cconv features rows {} != plan sources {}",
                ft.rows, plan.n_sources
            )));
        }
        let cin = ft.cols;
        let cout = self.check_conv_shapes(&plan, kernel, src_pos, query_pos, cin)?;
        let out = conv_fused(
            &plan,
            &self.nodes[features].value.data,
            None,
            cin,
            &self.nodes[kernel].value.data,
            cout,
        );
        Ok(self.push(
            Tensor {
                rows: plan.n_queries(),
                cols: cout,
                data: out,
            },
            Op::CConv {
                features,
                kernel,
                src_pos,
                query_pos,
                plan,
            },
        ))
    }

    pub fn ascc(
        &mut self,
        query_features: NodeId,
        src_features: NodeId,
        kernel: NodeId,
        src_pos: NodeId,
        query_pos: NodeId,
        plan: Rc<ConvPlan>,
    ) -> Result<NodeId> {
        let (qf, sf) = (
            &self.nodes[query_features].value,
            &self.nodes[src_features].value,
        );
        if sf.rows != plan.n_sources || qf.rows != plan.n_queries() || sf.cols != qf.cols {
            return Err(Error::Config(format!(
                "ascc features mismatch: query {}x{}, src {}x{}, plan ({}, {})",
                qf.rows,
                qf.cols,
                sf.rows,
                sf.cols,
                plan.n_queries(),
                plan.n_sources
            )));
        }
        let cin = qf.cols;
        let cout = self.check_conv_shapes(&plan, kernel, src_pos, query_pos, cin)?;
        let out = conv_fused(
            &plan,
            &sf.data,
            Some(&qf.data),
            cin,
            &self.nodes[kernel].value.data,
            cout,
        );
        Ok(self.push(
            Tensor {
                rows: plan.n_queries(),
                cols: cout,
                data: out,
            },
            Op::Ascc {
                query_features,
                src_features,
                kernel,
                src_pos,
                query_pos,
                plan,
            },
        ))
    }

    /// Reverse sweep from a scalar root; gradients for every node become
    /// available through `grad`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::RejectedInput(
                "backward root must be a scalar".into(),
            ));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.rows, n.value.cols))
            .collect();
        self.grads[root].data[0] = 1.0;

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad {
                // Depends on no differentiable leaf: nothing downstream of
                // this node's gradient is ever used.
                continue;
            }
            let op = self.nodes[id].op.clone();
            let g = std::mem::replace(&mut self.grads[id], Tensor::zeros(0, 0));
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut self.grads[a], &g.data);
                    accumulate(&mut self.grads[b], &g.data);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut self.grads[a], &g.data);
                    accumulate_scaled(&mut self.grads[b], &g.data, -1.0);
                }
                Op::Mul(a, b) => {
                    let bd: Vec<f64> = self.nodes[b]
                        .value
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(x, gy)| x * gy)
                        .collect();
                    let ad: Vec<f64> = self.nodes[a]
                        .value
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(x, gy)| x * gy)
                        .collect();
                    accumulate(&mut self.grads[a], &bd);
                    accumulate(&mut self.grads[b], &ad);
                }
                Op::Affine(a, k, b) => {
                    // The offset b shifts the value but not the gradient.
                    debug_assert!(b.is_finite());
                    accumulate_scaled(&mut self.grads[a], &g.data, k);
                }
                Op::MatMul(a, b) => {
                    if self.needs(a) {
                        let da = matmul_nt(&g, &self.nodes[b].value);
                        accumulate(&mut self.grads[a], &da.data);
                    }
                    if self.needs(b) {
                        let db = matmul_tn(&self.nodes[a].value, &g);
                        accumulate(&mut self.grads[b], &db.data);
                    }
                }
                Op::AddBias(a, bias) => {
                    accumulate(&mut self.grads[a], &g.data);
                    let cols = g.cols;
                    let gb = &mut self.grads[bias];
                    for r in 0..g.rows {
                        for c in 0..cols {
                            gb.data[c] += g.data[r * cols + c];
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a].value.cols;
                    let cb = self.nodes[b].value.cols;
                    for r in 0..g.rows {
                        let row = &g.data[r * (ca + cb)..(r + 1) * (ca + cb)];
                        for c in 0..ca {
                            self.grads[a].data[r * ca + c] += row[c];
                        }
                        for c in 0..cb {
                            self.grads[b].data[r * cb + c] += row[ca + c];
                        }
                    }
                }
                Op::Relu(a) => {
                    let d: Vec<f64> = self.nodes[a]
                        .value
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(x, gy)| if *x > 0.0 { *gy } else { 0.0 })
                        .collect();
                    accumulate(&mut self.grads[a], &d);
                }
                Op::Sigmoid(a) => {
                    let d: Vec<f64> = self.nodes[id]
                        .value
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(y, gy)| y * (1.0 - y) * gy)
                        .collect();
                    accumulate(&mut self.grads[a], &d);
                }
                Op::Exp(a) => {
                    let d: Vec<f64> = self.nodes[id]
                        .value
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(y, gy)| y * gy)
                        .collect();
                    accumulate(&mut self.grads[a], &d);
                }
                Op::PowGuard(a, gamma) => {
                    let d: Vec<f64> = self.nodes[a]
                        .value
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(x, gy)| {
                            if *x > POW_GUARD {
                                gamma * x.powf(gamma - 1.0) * gy
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut self.grads[a], &d);
                }
                Op::MeanRows(a) => {
                    let t = &mut self.grads[a];
                    let inv = 1.0 / t.rows as f64;
                    for r in 0..t.rows {
                        for c in 0..t.cols {
                            t.data[r * t.cols + c] += g.data[c] * inv;
                        }
                    }
                }
                Op::BroadcastRows(a, n) => {
                    let cols = g.cols;
                    let t = &mut self.grads[a];
                    for r in 0..n {
                        for c in 0..cols {
                            t.data[c] += g.data[r * cols + c];
                        }
                    }
                }
                Op::GatherRows(a, indices) => {
                    let cols = g.cols;
                    let t = &mut self.grads[a];
                    for (r, &src) in indices.iter().enumerate() {
                        for c in 0..cols {
                            t.data[src * cols + c] += g.data[r * cols + c];
                        }
                    }
                }
                Op::ScatterSumRows(a, indices, out_rows) => {
                    debug_assert_eq!(g.rows, out_rows);
                    let cols = g.cols;
                    let t = &mut self.grads[a];
                    for (r, &dst) in indices.iter().enumerate() {
                        for c in 0..cols {
                            t.data[r * cols + c] += g.data[dst * cols + c];
                        }
                    }
                }
                Op::NormRows(a) => {
                    let t = &self.nodes[a].value;
                    let mut d = vec![0.0; t.data.len()];
                    for r in 0..t.rows {
                        let norm = self.nodes[id].value.data[r];
                        if norm > 1e-12 {
                            let scale = g.data[r] / norm;
                            for c in 0..t.cols {
                                d[r * t.cols + c] = t.data[r * t.cols + c] * scale;
                            }
                        }
                    }
                    accumulate(&mut self.grads[a], &d);
                }
                Op::SumAll(a) => {
                    let gy = g.data[0];
                    for v in self.grads[a].data.iter_mut() {
                        *v += gy;
                    }
                }
                Op::AntisymMaterialize(free, cin) => {
                    let cout = g.cols;
                    let stride = cin * cout;
                    let gf = &mut self.grads[free];
                    for cell in 0..FREE_CELLS {
                        let mirror = GRID_CELLS - 1 - cell;
                        for k in 0..stride {
                            gf.data[cell * stride + k] +=
                                g.data[cell * stride + k] - g.data[mirror * stride + k];
                        }
                    }
                }
                Op::CConv {
                    features,
                    kernel,
                    src_pos,
                    query_pos,
                    plan,
                } => {
                    self.conv_backward(&g, features, None, kernel, src_pos, query_pos, &plan);
                }
                Op::Ascc {
                    query_features,
                    src_features,
                    kernel,
                    src_pos,
                    query_pos,
                    plan,
                } => {
                    self.conv_backward(
                        &g,
                        src_features,
                        Some(query_features),
                        kernel,
                        src_pos,
                        query_pos,
                        &plan,
                    );
                }
            }
            // The gradient was taken out to sidestep aliasing; restore it
            // so `grad` reports every node, not just leaves.
            self.grads[id] = g;
        }
        Ok(())
    }

    /// Shared backward for both convolution flavors. `query_features` is
    /// present for ASCC, where each edge carries (f_query + f_src).
    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &mut self,
        g: &Tensor,
        src_features: NodeId,
        query_features: Option<NodeId>,
        kernel: NodeId,
        src_pos: NodeId,
        query_pos: NodeId,
        plan: &ConvPlan,
    ) {
        let cin = self.nodes[src_features].value.cols;
        let cout = g.cols;
        let nq = plan.n_queries();
        let k = GRID_CELLS * cin;
        let sf = &self.nodes[src_features].value.data;
        let qf = query_features.map(|id| self.nodes[id].value.data.clone());
        let kernel_vals = &self.nodes[kernel].value.data;

        // Gradient targets that can actually reach a differentiable leaf;
        // the rest of the (expensive) sweep is skipped per target.
        let need_kernel = self.needs(kernel);
        let need_sf = self.needs(src_features);
        let need_qf = query_features.is_some_and(|id| self.needs(id));
        let need_feat = need_sf || need_qf;
        let need_pos = self.needs(src_pos) || self.needs(query_pos);
        if !need_kernel && !need_feat && !need_pos {
            return;
        }

        // Per query: recompute the scatter row (cheaper than caching it per
        // node), accumulate dKernel = S^T g, form the row of
        // dS = g kernel^T lazily on the touched cells, and distribute it to
        // the edges.
        let mut dkernel = vec![0.0; if need_kernel { k * cout } else { 0 }];
        let mut dsf = vec![0.0; if need_sf { sf.len() } else { 0 }];
        let mut dqf = if need_qf {
            qf.as_ref().map(|q| vec![0.0; q.len()])
        } else {
            None
        };
        let mut dsp = vec![Vec3::ZERO; if need_pos { plan.n_sources } else { 0 }];
        let mut dqp = vec![Vec3::ZERO; if need_pos { nq } else { 0 }];
        let mut scratch = ScatterRow::new(cin);
        let mut ds_row = vec![0.0; k];
        let mut edge_feat = vec![0.0; cin];
        for q in 0..nq {
            let grow = &g.data[q * cout..(q + 1) * cout];
            let mask = scratch.fill(plan, q, sf, qf.as_deref());
            if mask == 0 {
                continue;
            }
            for cell in BitCells(mask) {
                for i in 0..cin {
                    let j = cell * cin + i;
                    let kv = &kernel_vals[j * cout..(j + 1) * cout];
                    if need_kernel {
                        let sv = scratch.data()[j];
                        let dk = &mut dkernel[j * cout..(j + 1) * cout];
                        for (dkv, &gv) in dk.iter_mut().zip(grow) {
                            *dkv += sv * gv;
                        }
                    }
                    ds_row[j] = kv.iter().zip(grow).map(|(a, b)| a * b).sum();
                }
            }
            scratch.clear(mask);
            if !need_feat && !need_pos {
                continue;
            }
            // The per-edge sweep dominates backward cost; dispatch to
            // monomorphized loops the compiler can unroll, mirroring the
            // forward scatter.
            let dq_slice = dqf.as_deref_mut();
            let sweep = EdgeSweep {
                plan,
                q,
                sf,
                qf: qf.as_deref(),
                ds_row: &ds_row,
                need_sf,
                need_pos,
            };
            match cin {
                1 => sweep.run::<1>(&mut dsf, dq_slice, &mut dsp, &mut dqp),
                2 => sweep.run::<2>(&mut dsf, dq_slice, &mut dsp, &mut dqp),
                3 => sweep.run::<3>(&mut dsf, dq_slice, &mut dsp, &mut dqp),
                4 => sweep.run::<4>(&mut dsf, dq_slice, &mut dsp, &mut dqp),
                5 => sweep.run::<5>(&mut dsf, dq_slice, &mut dsp, &mut dqp),
                6 => sweep.run::<6>(&mut dsf, dq_slice, &mut dsp, &mut dqp),
                7 => sweep.run::<7>(&mut dsf, dq_slice, &mut dsp, &mut dqp),
                8 => sweep.run::<8>(&mut dsf, dq_slice, &mut dsp, &mut dqp),
                9 => sweep.run::<9>(&mut dsf, dq_slice, &mut dsp, &mut dqp),
                10 => sweep.run::<10>(&mut dsf, dq_slice, &mut dsp, &mut dqp),
                11 => sweep.run::<11>(&mut dsf, dq_slice, &mut dsp, &mut dqp),
                12 => sweep.run::<12>(&mut dsf, dq_slice, &mut dsp, &mut dqp),
                14 => sweep.run::<14>(&mut dsf, dq_slice, &mut dsp, &mut dqp),
                16 => sweep.run::<16>(&mut dsf, dq_slice, &mut dsp, &mut dqp),
                _ => sweep.run_dyn(cin, &mut dsf, dq_slice, &mut dsp, &mut dqp, &mut edge_feat),
            }
        }
        if need_kernel {
            accumulate(&mut self.grads[kernel], &dkernel);
        }
        if need_sf {
            accumulate(&mut self.grads[src_features], &dsf);
        }
        if let (Some(dq), Some(qid)) = (dqf, query_features) {
            accumulate(&mut self.grads[qid], &dq);
        }
        if need_pos {
            let dsp_flat = Tensor::from_vec3s(&dsp);
            accumulate(&mut self.grads[src_pos], &dsp_flat.data);
            let dqp_flat = Tensor::from_vec3s(&dqp);
            accumulate(&mut self.grads[query_pos], &dqp_flat.data);
        }
    }
}

/// One query's edge sweep of the convolution backward: distributes the
/// touched-cell gradient row `ds_row` to feature and position gradients,
/// skipping targets that cannot reach a differentiable leaf. `qf`/`dqf`
/// belong to the antisymmetric variant.
struct EdgeSweep<'a> {
    plan: &'a ConvPlan,
    q: usize,
    sf: &'a [f64],
    qf: Option<&'a [f64]>,
    ds_row: &'a [f64],
    need_sf: bool,
    need_pos: bool,
}

impl EdgeSweep<'_> {
    /// Monomorphized over the channel count so the compiler can unroll the
    /// inner dot products, mirroring the forward scatter.
    fn run<const CIN: usize>(
        &self,
        dsf: &mut [f64],
        mut dqf: Option<&mut [f64]>,
        dsp: &mut [Vec3],
        dqp: &mut [Vec3],
    ) {
        let q = self.q;
        let need_feat = self.need_sf || dqf.is_some();
        let mut dq_acc = [0.0; CIN];
        for edge in self.plan.edges_of(q) {
            if edge.window == 0.0 {
                continue;
            }
            let src = edge.src as usize;
            let mut feat = [0.0; CIN];
            feat.copy_from_slice(&self.sf[src * CIN..(src + 1) * CIN]);
            if let Some(qd) = self.qf {
                let qrow = &qd[q * CIN..(q + 1) * CIN];
                for i in 0..CIN {
                    feat[i] += qrow[i];
                }
            }
            let mut da = 0.0;
            let mut doffset = Vec3::ZERO;
            let mut dfeat = [0.0; CIN];
            for corner in 0..8 {
                let cell = edge.cells[corner] as usize;
                let block: &[f64; CIN] = self.ds_row[cell * CIN..cell * CIN + CIN]
                    .try_into()
                    .expect("exact channel block");
                if self.need_pos {
                    // D = f . dS block for this corner.
                    let mut d = 0.0;
                    for i in 0..CIN {
                        d += block[i] * feat[i];
                    }
                    da += edge.weights[corner] * d;
                    doffset += edge.dweights[corner] * (edge.window * d);
                }
                // Feature gradient: window * weight * dS block.
                let coeff = edge.coeffs[corner];
                if need_feat && coeff != 0.0 {
                    for i in 0..CIN {
                        dfeat[i] += coeff * block[i];
                    }
                }
            }
            if self.need_sf {
                for i in 0..CIN {
                    dsf[src * CIN + i] += dfeat[i];
                }
            }
            if dqf.is_some() {
                for i in 0..CIN {
                    dq_acc[i] += dfeat[i];
                }
            }
            if self.need_pos {
                doffset += edge.dwindow * da;
                dsp[src] += doffset;
                dqp[q] -= doffset;
            }
        }
        if let Some(dq) = dqf.as_mut() {
            for i in 0..CIN {
                dq[q * CIN + i] += dq_acc[i];
            }
        }
    }

    /// Fallback sweep for channel counts without a monomorphized arm.
    fn run_dyn(
        &self,
        cin: usize,
        dsf: &mut [f64],
        mut dqf: Option<&mut [f64]>,
        dsp: &mut [Vec3],
        dqp: &mut [Vec3],
        edge_feat: &mut [f64],
    ) {
        let q = self.q;
        let need_feat = self.need_sf || dqf.is_some();
        for edge in self.plan.edges_of(q) {
            if edge.window == 0.0 {
                continue;
            }
            let src = edge.src as usize;
            for (ch, f) in edge_feat.iter_mut().enumerate() {
                *f = self.sf[src * cin + ch]
                    + self.qf.map_or(0.0, |qd| qd[q * cin + ch]);
            }
            let mut da = 0.0;
            let mut doffset = Vec3::ZERO;
            for corner in 0..8 {
                let cell = edge.cells[corner] as usize;
                let block = &self.ds_row[cell * cin..(cell + 1) * cin];
                if self.need_pos {
                    let d: f64 =
                        block.iter().zip(edge_feat.iter()).map(|(a, b)| a * b).sum();
                    da += edge.weights[corner] * d;
                    doffset += edge.dweights[corner] * (edge.window * d);
                }
                let coeff = edge.coeffs[corner];
                if need_feat && coeff != 0.0 {
                    for (ch, bv) in block.iter().enumerate() {
                        if self.need_sf {
                            dsf[src * cin + ch] += coeff * bv;
                        }
                        if let Some(dq) = dqf.as_mut() {
                            dq[q * cin + ch] += coeff * bv;
                        }
                    }
                }
            }
            if self.need_pos {
                doffset += edge.dwindow * da;
                dsp[src] += doffset;
                dqp[q] -= doffset;
            }
        }
    }
}

fn accumulate(dst: &mut Tensor, src: &[f64]) {
    debug_assert_eq!(dst.data.len(), src.len());
    for (d, s) in dst.data.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate_scaled(dst: &mut Tensor, src: &[f64], k: f64) {
    for (d, s) in dst.data.iter_mut().zip(src) {
        *d += k * s;
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        let arow = a.row(r);
        let orow = &mut out.data[r * b.cols..(r + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = b.row(k);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a * b^T
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, b.rows);
    for r in 0..a.rows {
        let arow = a.row(r);
        for rb in 0..b.rows {
            let brow = b.row(rb);
            out.data[r * b.rows + rb] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// a^T * b
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (ca, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[ca * b.cols..(ca + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// One query's scatter row, reused across queries to stay cache-resident.
/// `row` has GRID_CELLS * cin entries and must be zero on entry; the
/// returned bitmask marks the cells this query touched, and the caller is
/// responsible for re-zeroing exactly those blocks before reuse.
pub(crate) struct ScatterRow {
    row: Vec<f64>,
    feat: Vec<f64>,
    cin: usize,
}

impl ScatterRow {
    pub(crate) fn new(cin: usize) -> ScatterRow {
        ScatterRow {
            row: vec![0.0; GRID_CELLS * cin],
            feat: vec![0.0; cin],
            cin,
        }
    }

    /// Accumulates every edge of query `q`; `query_features` switches
    /// between the plain convolution (features at the edge source) and the
    /// antisymmetric one (f_query + f_src). Small channel counts dispatch
    /// to monomorphized loops the compiler can unroll.
    pub(crate) fn fill(
        &mut self,
        plan: &ConvPlan,
        q: usize,
        src_features: &[f64],
        query_features: Option<&[f64]>,
    ) -> u64 {
        if plan.row_masks[q] == 0 {
            return 0;
        }
        match self.cin {
            1 => self.fill_n::<1>(plan, q, src_features, query_features),
            2 => self.fill_n::<2>(plan, q, src_features, query_features),
            3 => self.fill_n::<3>(plan, q, src_features, query_features),
            4 => self.fill_n::<4>(plan, q, src_features, query_features),
            5 => self.fill_n::<5>(plan, q, src_features, query_features),
            6 => self.fill_n::<6>(plan, q, src_features, query_features),
            7 => self.fill_n::<7>(plan, q, src_features, query_features),
            8 => self.fill_n::<8>(plan, q, src_features, query_features),
            9 => self.fill_n::<9>(plan, q, src_features, query_features),
            10 => self.fill_n::<10>(plan, q, src_features, query_features),
            11 => self.fill_n::<11>(plan, q, src_features, query_features),
            12 => self.fill_n::<12>(plan, q, src_features, query_features),
            14 => self.fill_n::<14>(plan, q, src_features, query_features),
            16 => self.fill_n::<16>(plan, q, src_features, query_features),
            _ => self.fill_dyn(plan, q, src_features, query_features),
        }
    }

    fn fill_n<const CIN: usize>(
        &mut self,
        plan: &ConvPlan,
        q: usize,
        src_features: &[f64],
        query_features: Option<&[f64]>,
    ) -> u64 {
        match query_features {
            None => {
                for edge in plan.edges_of(q) {
                    let src = edge.src as usize;
                    let feat: &[f64; CIN] = src_features[src * CIN..src * CIN + CIN]
                        .try_into()
                        .expect("exact channel slice");
                    scatter_edge_n::<CIN>(&mut self.row, edge, feat);
                }
            }
            Some(qf) => {
                let qrow = &qf[q * CIN..(q + 1) * CIN];
                let mut feat = [0.0; CIN];
                for edge in plan.edges_of(q) {
                    let src = edge.src as usize;
                    let srow = &src_features[src * CIN..(src + 1) * CIN];
                    for i in 0..CIN {
                        feat[i] = qrow[i] + srow[i];
                    }
                    scatter_edge_n::<CIN>(&mut self.row, edge, &feat);
                }
            }
        }
        plan.row_masks[q]
    }

    fn fill_dyn(
        &mut self,
        plan: &ConvPlan,
        q: usize,
        src_features: &[f64],
        query_features: Option<&[f64]>,
    ) -> u64 {
        let cin = self.cin;
        match query_features {
            None => {
                for edge in plan.edges_of(q) {
                    let src = edge.src as usize;
                    let feat = &src_features[src * cin..(src + 1) * cin];
                    scatter_edge(&mut self.row, edge, feat, cin);
                }
            }
            Some(qf) => {
                for edge in plan.edges_of(q) {
                    let qrow = &qf[q * cin..(q + 1) * cin];
                    let src = edge.src as usize;
                    let srow = &src_features[src * cin..(src + 1) * cin];
                    for ((f, a), b) in self.feat.iter_mut().zip(qrow).zip(srow) {
                        *f = a + b;
                    }
                    scatter_edge(&mut self.row, edge, &self.feat, cin);
                }
            }
        }
        plan.row_masks[q]
    }

    /// Re-zeroes the blocks named by `mask`, restoring the all-zero state.
    pub(crate) fn clear(&mut self, mask: u64) {
        let cin = self.cin;
        for cell in BitCells(mask) {
            self.row[cell * cin..(cell + 1) * cin].fill(0.0);
        }
    }

    pub(crate) fn data(&self) -> &[f64] {
        &self.row
    }
}

/// Iterator over the set bit positions of a cell mask.
pub(crate) struct BitCells(pub u64);

impl Iterator for BitCells {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        if self.0 == 0 {
            return None;
        }
        let cell = self.0.trailing_zeros() as usize;
        self.0 &= self.0 - 1;
        Some(cell)
    }
}

#[inline]
fn scatter_edge_n<const CIN: usize>(
    row: &mut [f64],
    edge: &crate::conv::ConvEdge,
    feat: &[f64; CIN],
) {
    for (cell, &coeff) in edge.cells.iter().zip(edge.coeffs.iter()) {
        let cell = *cell as usize;
        let block: &mut [f64; CIN] = (&mut row[cell * CIN..cell * CIN + CIN])
            .try_into()
            .expect("exact channel slice");
        for i in 0..CIN {
            block[i] += coeff * feat[i];
        }
    }
}

#[inline]
fn scatter_edge(row: &mut [f64], edge: &crate::conv::ConvEdge, feat: &[f64], cin: usize) {
    for (cell, &coeff) in edge.cells.iter().zip(edge.coeffs.iter()) {
        let cell = *cell as usize;
        let block = &mut row[cell * cin..cell * cin + cin];
        for (b, f) in block.iter_mut().zip(feat) {
            *b += coeff * f;
        }
    }
}

/// Fused scatter-and-apply convolution forward: per query, builds the
/// scatter row in a scratch buffer and immediately contracts it with the
/// kernel matrix over the touched cells only.
pub(crate) fn conv_fused(
    plan: &ConvPlan,
    src_features: &[f64],
    query_features: Option<&[f64]>,
    cin: usize,
    kernel: &[f64],
    cout: usize,
) -> Vec<f64> {
    match cout {
        1 => conv_fused_n::<1>(plan, src_features, query_features, cin, kernel),
        2 => conv_fused_n::<2>(plan, src_features, query_features, cin, kernel),
        3 => conv_fused_n::<3>(plan, src_features, query_features, cin, kernel),
        4 => conv_fused_n::<4>(plan, src_features, query_features, cin, kernel),
        5 => conv_fused_n::<5>(plan, src_features, query_features, cin, kernel),
        6 => conv_fused_n::<6>(plan, src_features, query_features, cin, kernel),
        7 => conv_fused_n::<7>(plan, src_features, query_features, cin, kernel),
        8 => conv_fused_n::<8>(plan, src_features, query_features, cin, kernel),
        9 => conv_fused_n::<9>(plan, src_features, query_features, cin, kernel),
        10 => conv_fused_n::<10>(plan, src_features, query_features, cin, kernel),
        11 => conv_fused_n::<11>(plan, src_features, query_features, cin, kernel),
        12 => conv_fused_n::<12>(plan, src_features, query_features, cin, kernel),
        14 => conv_fused_n::<14>(plan, src_features, query_features, cin, kernel),
        16 => conv_fused_n::<16>(plan, src_features, query_features, cin, kernel),
        _ => conv_fused_dyn(plan, src_features, query_features, cin, kernel, cout),
    }
}

fn conv_fused_n<const COUT: usize>(
    plan: &ConvPlan,
    src_features: &[f64],
    query_features: Option<&[f64]>,
    cin: usize,
    kernel: &[f64],
) -> Vec<f64> {
    let nq = plan.n_queries();
    let mut out = vec![0.0; nq * COUT];
    let mut scratch = ScatterRow::new(cin);
    for q in 0..nq {
        let mask = scratch.fill(plan, q, src_features, query_features);
        if mask == 0 {
            continue;
        }
        let mut dst = [0.0; COUT];
        for cell in BitCells(mask) {
            let block = &scratch.row[cell * cin..(cell + 1) * cin];
            let kblock = &kernel[cell * cin * COUT..(cell + 1) * cin * COUT];
            for (i, &sv) in block.iter().enumerate() {
                let g: &[f64; COUT] = kblock[i * COUT..i * COUT + COUT]
                    .try_into()
                    .expect("exact channel slice");
                for c in 0..COUT {
                    dst[c] += sv * g[c];
                }
            }
        }
        out[q * COUT..(q + 1) * COUT].copy_from_slice(&dst);
        scratch.clear(mask);
    }
    out
}

fn conv_fused_dyn(
    plan: &ConvPlan,
    src_features: &[f64],
    query_features: Option<&[f64]>,
    cin: usize,
    kernel: &[f64],
    cout: usize,
) -> Vec<f64> {
    let nq = plan.n_queries();
    let mut out = vec![0.0; nq * cout];
    let mut scratch = ScatterRow::new(cin);
    for q in 0..nq {
        let mask = scratch.fill(plan, q, src_features, query_features);
        if mask == 0 {
            continue;
        }
        let dst = &mut out[q * cout..(q + 1) * cout];
        for cell in BitCells(mask) {
            let block = &scratch.row[cell * cin..(cell + 1) * cin];
            let kblock = &kernel[cell * cin * cout..(cell + 1) * cin * cout];
            for (i, &sv) in block.iter().enumerate() {
                let g = &kblock[i * cout..(i + 1) * cout];
                for (d, gv) in dst.iter_mut().zip(g) {
                    *d += sv * gv;
                }
            }
        }
        scratch.clear(mask);
    }
    out
}
