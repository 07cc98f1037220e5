//! The recording tape: forward ops and their reverse-mode replay.
//!
//! Nodes are appended in execution order, so every parent index precedes its
//! child and a single reverse sweep visits each node exactly once. Leaves are
//! registered implicitly the first time a plain tensor enters an op; named
//! leaves (parameters, inputs, targets) can be registered explicitly so the
//! loss graph stays inspectable.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{TapeHandle, Tensor};

pub type NodeId = usize;

static NEXT_TAPE_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    AddConst { x: NodeId },
    Sigmoid { x: NodeId },
    Log { x: NodeId },
    Exp { x: NodeId },
    Relu { x: NodeId },
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { x: NodeId, m: usize, n: usize },
    SoftmaxRows { x: NodeId, n: usize },
    LogSoftmaxRows { x: NodeId, n: usize },
    // Backward is identical to SoftmaxRows: forbidden entries carry
    // probability 0, which zeroes their gradient automatically.
    MaskedSoftmaxRows { x: NodeId, n: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, n: usize },
    Sum { x: NodeId },
    AddRow { x: NodeId, row: NodeId, n: usize },
    RowScale { x: NodeId, s: NodeId, n: usize },
    GatherRows { x: NodeId, idx: Vec<usize>, n: usize },
    ScatterRows { base: NodeId, rows: NodeId, idx: Vec<usize>, n: usize },
    SelectRows { gate: NodeId, cur: NodeId, prev: NodeId, bits: Vec<bool>, n: usize },
    StraightThrough { soft: NodeId },
    SliceCols { x: NodeId, start: usize, width: usize, n: usize },
    ConcatCols { parts: Vec<(NodeId, usize)> },
    PickPerRow { x: NodeId, cols: Vec<usize>, n: usize },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    name: Option<String>,
}

/// Records a DAG of tensor ops; `backward` assigns gradients to leaves.
pub struct Tape {
    uid: u64,
    nodes: Vec<Node>,
    leaf_by_tensor: HashMap<u64, NodeId>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            uid: NEXT_TAPE_UID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_by_tensor: HashMap::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears all recorded state so the tape can be reused for a new pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.leaf_by_tensor.clear();
        self.grads = None;
    }

    /// Registers a tensor as a named leaf. Repeated registration of the same
    /// tensor returns the original node.
    pub fn leaf(&mut self, t: &Tensor, name: &str) -> Result<Tensor> {
        let id = self.bind_with_name(t, Some(name))?;
        Ok(self.tensor_for(id))
    }

    fn bind(&mut self, t: &Tensor, op: &'static str) -> Result<NodeId> {
        let _ = op;
        self.bind_inner(t, None, op)
    }

    fn bind_with_name(&mut self, t: &Tensor, name: Option<&str>) -> Result<NodeId> {
        self.bind_inner(t, name, "leaf")
    }

    fn bind_inner(&mut self, t: &Tensor, name: Option<&str>, op: &'static str) -> Result<NodeId> {
        if let Some(h) = t.tape_handle() {
            if h.tape_uid != self.uid {
                return Err(Error::ForeignTape { op });
            }
            return Ok(h.node);
        }
        if let Some(&id) = self.leaf_by_tensor.get(&t.tensor_id()) {
            if let Some(n) = name {
                if self.nodes[id].name.is_none() {
                    self.nodes[id].name = Some(n.to_string());
                }
            }
            return Ok(id);
        }
        let id = self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.values().to_vec(),
            name.map(|s| s.to_string()),
        );
        self.leaf_by_tensor.insert(t.tensor_id(), id);
        Ok(id)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, name: Option<String>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape, values, name });
        id
    }

    fn tensor_for(&self, id: NodeId) -> Tensor {
        Tensor::from_op(
            self.nodes[id].values.clone(),
            self.nodes[id].shape.clone(),
            TapeHandle { tape_uid: self.uid, node: id },
        )
    }

    fn emit(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        let id = self.push(op, shape, values, None);
        self.tensor_for(id)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary(
        &mut self,
        opname: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: fn(f64, f64) -> f64,
        mk: fn(NodeId, NodeId) -> Op,
    ) -> Result<Tensor> {
        let same = a.shape() == b.shape();
        if !same && !a.is_scalar() && !b.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: opname,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let na = self.bind(a, opname)?;
        let nb = self.bind(b, opname)?;
        let (shape, values) = if same || (a.is_scalar() && b.is_scalar()) {
            (
                a.shape().to_vec(),
                a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect(),
            )
        } else if b.is_scalar() {
            let s = b.values()[0];
            (a.shape().to_vec(), a.values().iter().map(|&x| f(x, s)).collect())
        } else {
            let s = a.values()[0];
            (b.shape().to_vec(), b.values().iter().map(|&y| f(s, y)).collect())
        };
        Ok(self.emit(mk(na, nb), shape, values))
    }

    /// Multiplies by a compile-time constant (no gradient into `c`).
    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        let nx = self.bind(x, "scale")?;
        let values = x.values().iter().map(|&v| v * c).collect();
        Ok(self.emit(Op::Scale { x: nx, c }, x.shape().to_vec(), values))
    }

    /// Adds a constant vector that carries no gradient (noise, offsets).
    /// `c` must be a single scalar or match `x` elementwise.
    pub fn add_const(&mut self, x: &Tensor, c: &[f64]) -> Result<Tensor> {
        if c.len() != 1 && c.len() != x.numel() {
            return Err(Error::BadShape {
                op: "add_const",
                shape: vec![c.len()],
                reason: "constant length must be 1 or numel",
            });
        }
        let nx = self.bind(x, "add_const")?;
        let values = if c.len() == 1 {
            x.values().iter().map(|&v| v + c[0]).collect()
        } else {
            x.values().iter().zip(c).map(|(&v, &a)| v + a).collect()
        };
        Ok(self.emit(Op::AddConst { x: nx }, x.shape().to_vec(), values))
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        let nx = self.bind(x, "sigmoid")?;
        let values = x.values().iter().map(|&v| stable_sigmoid(v)).collect();
        Ok(self.emit(Op::Sigmoid { x: nx }, x.shape().to_vec(), values))
    }

    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        if let Some(&bad) = x.values().iter().find(|v| **v <= 0.0) {
            return Err(Error::NonPositiveLog { value: bad });
        }
        let nx = self.bind(x, "log")?;
        let values = x.values().iter().map(|&v| v.ln()).collect();
        Ok(self.emit(Op::Log { x: nx }, x.shape().to_vec(), values))
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        let nx = self.bind(x, "exp")?;
        let values = x.values().iter().map(|&v| v.exp()).collect();
        Ok(self.emit(Op::Exp { x: nx }, x.shape().to_vec(), values))
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let nx = self.bind(x, "relu")?;
        let values = x.values().iter().map(|&v| v.max(0.0)).collect();
        Ok(self.emit(Op::Relu { x: nx }, x.shape().to_vec(), values))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let na = self.bind(a, "matmul")?;
        let nb = self.bind(b, "matmul")?;
        let values = matmul_vals(a.values(), b.values(), m, k, n);
        Ok(self.emit(Op::MatMul { a: na, b: nb, m, k, n }, vec![m, n], values))
    }

    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 {
            return Err(Error::BadShape {
                op: "transpose",
                shape: x.shape().to_vec(),
                reason: "rank-2 required",
            });
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let nx = self.bind(x, "transpose")?;
        let values = transpose_vals(x.values(), m, n);
        Ok(self.emit(Op::Transpose { x: nx, m, n }, vec![n, m], values))
    }

    /// Adds a length-n row vector to every row of an [m, n] matrix.
    pub fn add_row(&mut self, x: &Tensor, row: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || row.numel() != x.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: x.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let n = x.shape()[1];
        let nx = self.bind(x, "add_row")?;
        let nr = self.bind(row, "add_row")?;
        let mut values = x.values().to_vec();
        for r in values.chunks_mut(n) {
            for (v, &b) in r.iter_mut().zip(row.values()) {
                *v += b;
            }
        }
        Ok(self.emit(Op::AddRow { x: nx, row: nr, n }, x.shape().to_vec(), values))
    }

    /// Scales row i of an [m, n] matrix by the i-th entry of `s` (length
    /// m). The differentiable core of a soft gated residual.
    pub fn row_scale(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || s.numel() != x.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                lhs: x.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let nx = self.bind(x, "row_scale")?;
        let ns = self.bind(s, "row_scale")?;
        let mut values = Vec::with_capacity(m * n);
        for i in 0..m {
            let si = s.values()[i];
            values.extend(x.values()[i * n..(i + 1) * n].iter().map(|&v| v * si));
        }
        Ok(self.emit(Op::RowScale { x: nx, s: ns, n }, x.shape().to_vec(), values))
    }

    // ── softmax family ──────────────────────────────────────────────────

    pub fn softmax_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        self.softmax_impl(x, None, false)
    }

    pub fn log_softmax_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        self.softmax_impl(x, None, true)
    }

    /// Row softmax restricted to `allowed` entries; forbidden entries get
    /// probability 0 and no gradient. A row with no admissible entry is a
    /// caller bug and is rejected.
    pub fn masked_softmax_rows(&mut self, x: &Tensor, allowed: &[bool]) -> Result<Tensor> {
        self.softmax_impl(x, Some(allowed), false)
    }

    fn softmax_impl(&mut self, x: &Tensor, allowed: Option<&[bool]>, log: bool) -> Result<Tensor> {
        if x.rank() != 2 {
            return Err(Error::BadShape {
                op: "softmax_rows",
                shape: x.shape().to_vec(),
                reason: "rank-2 required",
            });
        }
        if x.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        if let Some(a) = allowed {
            if a.len() != m * n {
                return Err(Error::BadShape {
                    op: "masked_softmax_rows",
                    shape: vec![a.len()],
                    reason: "mask length must equal numel",
                });
            }
        }
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            let xr = &x.values()[i * n..(i + 1) * n];
            let adm = |j: usize| allowed.map_or(true, |a| a[i * n + j]);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if adm(j) && xr[j] > mx {
                    mx = xr[j];
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::EmptySoftmaxRow { row: i });
            }
            let mut denom = 0.0;
            for j in 0..n {
                if adm(j) {
                    denom += (xr[j] - mx).exp();
                }
            }
            let out = &mut values[i * n..(i + 1) * n];
            if log {
                let lse = mx + denom.ln();
                for j in 0..n {
                    out[j] = xr[j] - lse;
                }
            } else {
                for j in 0..n {
                    out[j] = if adm(j) { (xr[j] - mx).exp() / denom } else { 0.0 };
                }
            }
        }
        let nx = self.bind(x, "softmax_rows")?;
        let op = match (allowed, log) {
            (Some(_), false) => Op::MaskedSoftmaxRows { x: nx, n },
            (None, false) => Op::SoftmaxRows { x: nx, n },
            (None, true) => Op::LogSoftmaxRows { x: nx, n },
            (Some(_), true) => unreachable!("masked log-softmax is not recorded"),
        };
        Ok(self.emit(op, vec![m, n], values))
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Per-row layer norm with affine parameters; variance epsilon 1e-5.
    pub fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 {
            return Err(Error::BadShape {
                op: "layer_norm",
                shape: x.shape().to_vec(),
                reason: "rank-2 required",
            });
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        if n < 2 {
            return Err(Error::BadShape {
                op: "layer_norm",
                shape: x.shape().to_vec(),
                reason: "needs at least 2 columns",
            });
        }
        if gamma.numel() != n || beta.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let nx = self.bind(x, "layer_norm")?;
        let ng = self.bind(gamma, "layer_norm")?;
        let nb = self.bind(beta, "layer_norm")?;
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            let xr = &x.values()[i * n..(i + 1) * n];
            let (mean, inv_std) = row_moments(xr);
            for j in 0..n {
                values[i * n + j] = (xr[j] - mean) * inv_std * gamma.values()[j] + beta.values()[j];
            }
        }
        Ok(self.emit(Op::LayerNorm { x: nx, gamma: ng, beta: nb, n }, vec![m, n], values))
    }

    // ── reductions and indexing ─────────────────────────────────────────

    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let nx = self.bind(x, "sum")?;
        let total: f64 = x.values().iter().sum();
        Ok(self.emit(Op::Sum { x: nx }, vec![1], vec![total]))
    }

    /// Mean over all entries.
    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = x.numel() as f64;
        let s = self.sum(x)?;
        self.scale(&s, 1.0 / n)
    }

    /// Picks rows of an [m, n] matrix into a [len, n] matrix.
    pub fn gather_rows(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        if x.rank() != 2 {
            return Err(Error::BadShape {
                op: "gather_rows",
                shape: x.shape().to_vec(),
                reason: "rank-2 required",
            });
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        if idx.iter().any(|&i| i >= m) || idx.is_empty() {
            return Err(Error::BadShape {
                op: "gather_rows",
                shape: vec![idx.len()],
                reason: "row index out of range or empty",
            });
        }
        let nx = self.bind(x, "gather_rows")?;
        let mut values = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            values.extend_from_slice(&x.values()[i * n..(i + 1) * n]);
        }
        Ok(self.emit(
            Op::GatherRows { x: nx, idx: idx.to_vec(), n },
            vec![idx.len(), n],
            values,
        ))
    }

    /// Copies `base` and overwrites rows `idx` with the rows of `rows`.
    /// Indices must be unique; untouched rows pass through bit-exactly.
    pub fn scatter_rows(&mut self, base: &Tensor, idx: &[usize], rows: &Tensor) -> Result<Tensor> {
        if base.rank() != 2 || rows.rank() != 2 || base.shape()[1] != rows.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                lhs: base.shape().to_vec(),
                rhs: rows.shape().to_vec(),
            });
        }
        let (m, n) = (base.shape()[0], base.shape()[1]);
        if idx.len() != rows.shape()[0] || idx.iter().any(|&i| i >= m) {
            return Err(Error::BadShape {
                op: "scatter_rows",
                shape: vec![idx.len()],
                reason: "index count must match rows and stay in range",
            });
        }
        let mut seen = vec![false; m];
        for &i in idx {
            if seen[i] {
                return Err(Error::BadShape {
                    op: "scatter_rows",
                    shape: vec![i],
                    reason: "duplicate row index",
                });
            }
            seen[i] = true;
        }
        let nb = self.bind(base, "scatter_rows")?;
        let nr = self.bind(rows, "scatter_rows")?;
        let mut values = base.values().to_vec();
        for (j, &i) in idx.iter().enumerate() {
            values[i * n..(i + 1) * n].copy_from_slice(&rows.values()[j * n..(j + 1) * n]);
        }
        Ok(self.emit(
            Op::ScatterRows { base: nb, rows: nr, idx: idx.to_vec(), n },
            vec![m, n],
            values,
        ))
    }

    /// Hard row selection: row i of the output is `cur[i]` where the gate
    /// value is 1 and `prev[i]` where it is 0 — a bit-exact copy, never a
    /// blend. The gate input must hold exact {0, 1} values (a hardened gate
    /// vector); its gradient is `sum_c upstream[i][c] * (cur - prev)[i][c]`,
    /// so a straight-through gate upstream of this op trains end to end.
    pub fn select_rows(&mut self, gate: &Tensor, cur: &Tensor, prev: &Tensor) -> Result<Tensor> {
        if cur.shape() != prev.shape() || cur.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "select_rows",
                lhs: cur.shape().to_vec(),
                rhs: prev.shape().to_vec(),
            });
        }
        let (m, n) = (cur.shape()[0], cur.shape()[1]);
        if gate.numel() != m {
            return Err(Error::ShapeMismatch {
                op: "select_rows",
                lhs: gate.shape().to_vec(),
                rhs: cur.shape().to_vec(),
            });
        }
        let mut bits = Vec::with_capacity(m);
        for &g in gate.values() {
            if g == 1.0 {
                bits.push(true);
            } else if g == 0.0 {
                bits.push(false);
            } else {
                return Err(Error::BadShape {
                    op: "select_rows",
                    shape: gate.shape().to_vec(),
                    reason: "gate values must be exactly 0 or 1",
                });
            }
        }
        let ng = self.bind(gate, "select_rows")?;
        let nc = self.bind(cur, "select_rows")?;
        let np = self.bind(prev, "select_rows")?;
        let mut values = Vec::with_capacity(m * n);
        for (i, &bit) in bits.iter().enumerate() {
            let src = if bit { cur.values() } else { prev.values() };
            values.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        Ok(self.emit(
            Op::SelectRows { gate: ng, cur: nc, prev: np, bits, n },
            vec![m, n],
            values,
        ))
    }

    /// Straight-through wrapper: forward takes the given hard values, the
    /// backward pass treats the op as identity into `soft`.
    pub fn straight_through(&mut self, soft: &Tensor, hard: &[f64]) -> Result<Tensor> {
        if hard.len() != soft.numel() {
            return Err(Error::BadShape {
                op: "straight_through",
                shape: vec![hard.len()],
                reason: "hard values must match soft numel",
            });
        }
        let ns = self.bind(soft, "straight_through")?;
        Ok(self.emit(Op::StraightThrough { soft: ns }, soft.shape().to_vec(), hard.to_vec()))
    }

    /// Columns [start, start+width) of an [m, n] matrix.
    pub fn slice_cols(&mut self, x: &Tensor, start: usize, width: usize) -> Result<Tensor> {
        if x.rank() != 2 || start + width > x.shape()[1] || width == 0 {
            return Err(Error::BadShape {
                op: "slice_cols",
                shape: x.shape().to_vec(),
                reason: "column range out of bounds",
            });
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let nx = self.bind(x, "slice_cols")?;
        let mut values = Vec::with_capacity(m * width);
        for i in 0..m {
            values.extend_from_slice(&x.values()[i * n + start..i * n + start + width]);
        }
        Ok(self.emit(Op::SliceCols { x: nx, start, width, n }, vec![m, width], values))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::BadShape {
                op: "concat_cols",
                shape: vec![],
                reason: "no parts",
            });
        }
        let m = parts[0].shape()[0];
        for p in parts {
            if p.rank() != 2 || p.shape()[0] != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let mut bound = Vec::with_capacity(parts.len());
        for p in parts {
            bound.push((self.bind(p, "concat_cols")?, p.shape()[1]));
        }
        let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut values = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                let w = p.shape()[1];
                values.extend_from_slice(&p.values()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.emit(Op::ConcatCols { parts: bound }, vec![m, total], values))
    }

    /// out[i] = x[i, cols[i]] — one entry per row, as a rank-1 tensor.
    pub fn pick_per_row(&mut self, x: &Tensor, cols: &[usize]) -> Result<Tensor> {
        if x.rank() != 2 || cols.len() != x.shape()[0] {
            return Err(Error::BadShape {
                op: "pick_per_row",
                shape: x.shape().to_vec(),
                reason: "one column index per row required",
            });
        }
        let n = x.shape()[1];
        if cols.iter().any(|&c| c >= n) {
            return Err(Error::BadShape {
                op: "pick_per_row",
                shape: vec![n],
                reason: "column index out of range",
            });
        }
        let nx = self.bind(x, "pick_per_row")?;
        let values: Vec<f64> = cols.iter().enumerate().map(|(i, &c)| x.values()[i * n + c]).collect();
        Ok(self.emit(
            Op::PickPerRow { x: nx, cols: cols.to_vec(), n },
            vec![cols.len()],
            values,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every leaf reachable from the loss
    /// gets its total derivative; repeated calls without `reset` are
    /// rejected so gradients cannot silently accumulate across passes.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardAlreadyRun);
        }
        let root = match loss.tape_handle() {
            Some(h) if h.tape_uid == self.uid => h.node,
            Some(_) => return Err(Error::ForeignTape { op: "backward" }),
            None => return Err(Error::NonScalarLoss { shape: loss.shape().to_vec() }),
        };
        if self.nodes[root].values.len() != 1 {
            return Err(Error::NonScalarLoss { shape: loss.shape().to_vec() });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let up = match adj[id].take() {
                Some(u) => u,
                None => continue,
            };
            self.accumulate(id, &up, &mut adj);
            adj[id] = Some(up);
        }
        self.grads = Some(adj);
        Ok(())
    }

    /// Gradient of a tensor after `backward`; None if it was unreachable
    /// from the loss or backward has not run.
    pub fn grad(&self, t: &Tensor) -> Option<&[f64]> {
        let id = match t.tape_handle() {
            Some(h) if h.tape_uid == self.uid => h.node,
            Some(_) => return None,
            None => *self.leaf_by_tensor.get(&t.tensor_id())?,
        };
        self.grads.as_ref()?.get(id)?.as_deref()
    }

    /// Names of all named leaves with a path to the given tensor. The loss
    /// graph can be audited with this: gates must never appear as leaves.
    pub fn reachable_leaf_names(&self, t: &Tensor) -> Vec<String> {
        let root = match t.tape_handle() {
            Some(h) if h.tape_uid == self.uid => h.node,
            _ => return Vec::new(),
        };
        let mut reach = vec![false; self.nodes.len()];
        reach[root] = true;
        let mut names = Vec::new();
        for id in (0..=root).rev() {
            if !reach[id] {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                if let Some(name) = &self.nodes[id].name {
                    names.push(name.clone());
                }
                continue;
            }
            for p in op_parents(&self.nodes[id].op) {
                reach[p] = true;
            }
        }
        names.sort();
        names.dedup();
        names
    }

    fn accumulate(&self, id: NodeId, up: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut addto = |pid: NodeId, contrib: &dyn Fn(&mut [f64])| {
            let slot = &mut adj[pid];
            if slot.is_none() {
                *slot = Some(vec![0.0; self.nodes[pid].values.len()]);
            }
            contrib(slot.as_mut().unwrap());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.binary_backward(*a, *b, up, &mut addto, 1.0, 1.0);
            }
            Op::Sub { a, b } => {
                self.binary_backward(*a, *b, up, &mut addto, 1.0, -1.0);
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[*a].values;
                let bv = &self.nodes[*b].values;
                // d(a*b) = b da + a db, with scalar broadcast on either side
                addto(*a, &|g: &mut [f64]| {
                    if g.len() == up.len() {
                        for i in 0..up.len() {
                            let bb = if bv.len() == 1 { bv[0] } else { bv[i] };
                            g[i] += up[i] * bb;
                        }
                    } else {
                        // a is the scalar side
                        let mut s = 0.0;
                        for i in 0..up.len() {
                            let bb = if bv.len() == 1 { bv[0] } else { bv[i] };
                            s += up[i] * bb;
                        }
                        g[0] += s;
                    }
                });
                addto(*b, &|g: &mut [f64]| {
                    if g.len() == up.len() {
                        for i in 0..up.len() {
                            let aa = if av.len() == 1 { av[0] } else { av[i] };
                            g[i] += up[i] * aa;
                        }
                    } else {
                        let mut s = 0.0;
                        for i in 0..up.len() {
                            let aa = if av.len() == 1 { av[0] } else { av[i] };
                            s += up[i] * aa;
                        }
                        g[0] += s;
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                addto(*x, &|g: &mut [f64]| {
                    for (gi, &u) in g.iter_mut().zip(up) {
                        *gi += u * c;
                    }
                });
            }
            Op::AddConst { x } => {
                addto(*x, &|g: &mut [f64]| {
                    for (gi, &u) in g.iter_mut().zip(up) {
                        *gi += u;
                    }
                });
            }
            Op::Sigmoid { x } => {
                let out = &node.values;
                addto(*x, &|g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += up[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Log { x } => {
                let xv = &self.nodes[*x].values;
                addto(*x, &|g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += up[i] / xv[i];
                    }
                });
            }
            Op::Exp { x } => {
                let out = &node.values;
                addto(*x, &|g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += up[i] * out[i];
                    }
                });
            }
            Op::Relu { x } => {
                let xv = &self.nodes[*x].values;
                addto(*x, &|g: &mut [f64]| {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            g[i] += up[i];
                        }
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let av = &self.nodes[*a].values;
                let bv = &self.nodes[*b].values;
                let (m, k, n) = (*m, *k, *n);
                // dA = dC · Bᵀ
                addto(*a, &|g: &mut [f64]| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += up[i * n + j] * bv[p * n + j];
                            }
                            g[i * k + p] += s;
                        }
                    }
                });
                // dB = Aᵀ · dC
                addto(*b, &|g: &mut [f64]| {
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        let urow = &up[i * n..(i + 1) * n];
                        for (p, &ap) in arow.iter().enumerate() {
                            let grow = &mut g[p * n..(p + 1) * n];
                            for j in 0..n {
                                grow[j] += ap * urow[j];
                            }
                        }
                    }
                });
            }
            Op::Transpose { x, m, n } => {
                let (m, n) = (*m, *n);
                addto(*x, &|g: &mut [f64]| {
                    // up is [n, m]
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += up[j * m + i];
                        }
                    }
                });
            }
            Op::SoftmaxRows { x, n } | Op::MaskedSoftmaxRows { x, n } => {
                let p = &node.values;
                let n = *n;
                addto(*x, &|g: &mut [f64]| {
                    for i in 0..g.len() / n {
                        let pr = &p[i * n..(i + 1) * n];
                        let ur = &up[i * n..(i + 1) * n];
                        let dot: f64 = pr.iter().zip(ur).map(|(&a, &b)| a * b).sum();
                        let gr = &mut g[i * n..(i + 1) * n];
                        for j in 0..n {
                            gr[j] += pr[j] * (ur[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows { x, n } => {
                let y = &node.values;
                let n = *n;
                addto(*x, &|g: &mut [f64]| {
                    for i in 0..g.len() / n {
                        let yr = &y[i * n..(i + 1) * n];
                        let ur = &up[i * n..(i + 1) * n];
                        let usum: f64 = ur.iter().sum();
                        let gr = &mut g[i * n..(i + 1) * n];
                        for j in 0..n {
                            gr[j] += ur[j] - yr[j].exp() * usum;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, n } => {
                let xv = &self.nodes[*x].values;
                let gv = &self.nodes[*gamma].values;
                let n = *n;
                let m = xv.len() / n;
                addto(*x, &|g: &mut [f64]| {
                    for i in 0..m {
                        let xr = &xv[i * n..(i + 1) * n];
                        let ur = &up[i * n..(i + 1) * n];
                        let (mean, inv_std) = row_moments(xr);
                        // h = gamma ⊙ upstream, in normalized coordinates
                        let mut h_mean = 0.0;
                        let mut hx_mean = 0.0;
                        for j in 0..n {
                            let xh = (xr[j] - mean) * inv_std;
                            let h = ur[j] * gv[j];
                            h_mean += h;
                            hx_mean += h * xh;
                        }
                        h_mean /= n as f64;
                        hx_mean /= n as f64;
                        let gr = &mut g[i * n..(i + 1) * n];
                        for j in 0..n {
                            let xh = (xr[j] - mean) * inv_std;
                            gr[j] += (ur[j] * gv[j] - h_mean - xh * hx_mean) * inv_std;
                        }
                    }
                });
                addto(*gamma, &|g: &mut [f64]| {
                    for i in 0..m {
                        let xr = &xv[i * n..(i + 1) * n];
                        let ur = &up[i * n..(i + 1) * n];
                        let (mean, inv_std) = row_moments(xr);
                        for j in 0..n {
                            g[j] += ur[j] * (xr[j] - mean) * inv_std;
                        }
                    }
                });
                addto(*beta, &|g: &mut [f64]| {
                    for i in 0..m {
                        for j in 0..n {
                            g[j] += up[i * n + j];
                        }
                    }
                });
            }
            Op::Sum { x } => {
                addto(*x, &|g: &mut [f64]| {
                    for gi in g.iter_mut() {
                        *gi += up[0];
                    }
                });
            }
            Op::AddRow { x, row, n } => {
                let n = *n;
                addto(*x, &|g: &mut [f64]| {
                    for (gi, &u) in g.iter_mut().zip(up) {
                        *gi += u;
                    }
                });
                addto(*row, &|g: &mut [f64]| {
                    for (i, &u) in up.iter().enumerate() {
                        g[i % n] += u;
                    }
                });
            }
            Op::RowScale { x, s, n } => {
                let xv = &self.nodes[*x].values;
                let sv = &self.nodes[*s].values;
                let n = *n;
                addto(*x, &|g: &mut [f64]| {
                    for i in 0..sv.len() {
                        for c in 0..n {
                            g[i * n + c] += up[i * n + c] * sv[i];
                        }
                    }
                });
                addto(*s, &|g: &mut [f64]| {
                    for i in 0..g.len() {
                        let mut acc = 0.0;
                        for c in 0..n {
                            acc += up[i * n + c] * xv[i * n + c];
                        }
                        g[i] += acc;
                    }
                });
            }
            Op::GatherRows { x, idx, n } => {
                let n = *n;
                addto(*x, &|g: &mut [f64]| {
                    for (j, &i) in idx.iter().enumerate() {
                        for c in 0..n {
                            g[i * n + c] += up[j * n + c];
                        }
                    }
                });
            }
            Op::ScatterRows { base, rows, idx, n } => {
                let n = *n;
                addto(*base, &|g: &mut [f64]| {
                    let mut written = vec![false; g.len() / n];
                    for &i in idx {
                        written[i] = true;
                    }
                    for i in 0..g.len() / n {
                        if !written[i] {
                            for c in 0..n {
                                g[i * n + c] += up[i * n + c];
                            }
                        }
                    }
                });
                addto(*rows, &|g: &mut [f64]| {
                    for (j, &i) in idx.iter().enumerate() {
                        for c in 0..n {
                            g[j * n + c] += up[i * n + c];
                        }
                    }
                });
            }
            Op::SelectRows { gate, cur, prev, bits, n } => {
                let cv = &self.nodes[*cur].values;
                let pv = &self.nodes[*prev].values;
                let n = *n;
                addto(*gate, &|g: &mut [f64]| {
                    for i in 0..bits.len() {
                        let mut s = 0.0;
                        for c in 0..n {
                            s += up[i * n + c] * (cv[i * n + c] - pv[i * n + c]);
                        }
                        g[i] += s;
                    }
                });
                addto(*cur, &|g: &mut [f64]| {
                    for (i, &bit) in bits.iter().enumerate() {
                        if bit {
                            for c in 0..n {
                                g[i * n + c] += up[i * n + c];
                            }
                        }
                    }
                });
                addto(*prev, &|g: &mut [f64]| {
                    for (i, &bit) in bits.iter().enumerate() {
                        if !bit {
                            for c in 0..n {
                                g[i * n + c] += up[i * n + c];
                            }
                        }
                    }
                });
            }
            Op::StraightThrough { soft } => {
                addto(*soft, &|g: &mut [f64]| {
                    for (gi, &u) in g.iter_mut().zip(up) {
                        *gi += u;
                    }
                });
            }
            Op::SliceCols { x, start, width, n } => {
                let (start, width, n) = (*start, *width, *n);
                addto(*x, &|g: &mut [f64]| {
                    for i in 0..up.len() / width {
                        for c in 0..width {
                            g[i * n + start + c] += up[i * width + c];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|&(_, w)| w).sum();
                let m = node.values.len() / total;
                let mut offset = 0;
                for &(pid, w) in parts {
                    let off = offset;
                    addto(pid, &|g: &mut [f64]| {
                        for i in 0..m {
                            for c in 0..w {
                                g[i * w + c] += up[i * total + off + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::PickPerRow { x, cols, n } => {
                let n = *n;
                addto(*x, &|g: &mut [f64]| {
                    for (i, &c) in cols.iter().enumerate() {
                        g[i * n + c] += up[i];
                    }
                });
            }
        }
    }

    fn binary_backward(
        &self,
        a: NodeId,
        b: NodeId,
        up: &[f64],
        addto: &mut dyn FnMut(NodeId, &dyn Fn(&mut [f64])),
        ca: f64,
        cb: f64,
    ) {
        addto(a, &|g: &mut [f64]| {
            if g.len() == up.len() {
                for (gi, &u) in g.iter_mut().zip(up) {
                    *gi += ca * u;
                }
            } else {
                g[0] += ca * up.iter().sum::<f64>();
            }
        });
        addto(b, &|g: &mut [f64]| {
            if g.len() == up.len() {
                for (gi, &u) in g.iter_mut().zip(up) {
                    *gi += cb * u;
                }
            } else {
                g[0] += cb * up.iter().sum::<f64>();
            }
        });
    }
}

fn op_parents(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::MatMul { a, b, .. } => {
            vec![*a, *b]
        }
        Op::Scale { x, .. }
        | Op::AddConst { x }
        | Op::Sigmoid { x }
        | Op::Log { x }
        | Op::Exp { x }
        | Op::Relu { x }
        | Op::Transpose { x, .. }
        | Op::SoftmaxRows { x, .. }
        | Op::LogSoftmaxRows { x, .. }
        | Op::MaskedSoftmaxRows { x, .. }
        | Op::Sum { x }
        | Op::GatherRows { x, .. }
        | Op::SliceCols { x, .. }
        | Op::PickPerRow { x, .. } => vec![*x],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::AddRow { x, row, .. } => vec![*x, *row],
        Op::RowScale { x, s, .. } => vec![*x, *s],
        Op::ScatterRows { base, rows, .. } => vec![*base, *rows],
        Op::SelectRows { gate, cur, prev, .. } => vec![*gate, *cur, *prev],
        Op::StraightThrough { soft } => vec![*soft],
        Op::ConcatCols { parts } => parts.iter().map(|&(p, _)| p).collect(),
    }
}

pub(crate) fn matmul_vals(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn transpose_vals(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    const EPS: f64 = 1e-5;
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + EPS).sqrt())
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
