use std::borrow::Cow;
use std::sync::Once;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Denominator floor for cosine similarity on the tape.
pub const COSINE_EPS: f64 = 1e-8;
/// Upper clamp applied to ranking-loss exponents before `exp`.
pub const RANK_EXP_CLAMP: f64 = 30.0;

static COSINE_GUARD_NOTICE: Once = Once::new();

fn note_cosine_guard() {
    COSINE_GUARD_NOTICE.call_once(|| {
        log::info!(
            "cosine similarity on the tape uses an eps-guarded denominator (eps = {COSINE_EPS:e})"
        );
    });
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    SliceRow(NodeId, usize),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Max2(NodeId, NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Matrix),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    ReduceMaxRows(NodeId, Vec<usize>),
    ConcatRows(NodeId, NodeId),
    StackRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Transpose(NodeId),
    GatherRows(NodeId, Vec<usize>),
    Sum(NodeId),
    CosineSim(NodeId, NodeId),
    CosineMatrix(NodeId, NodeId),
    RankLoss(NodeId),
    NllRows(NodeId, Vec<Option<usize>>),
}

/// Reverse-mode tape over dense matrices.
///
/// Nodes are appended in execution order, so reverse insertion order is a
/// valid topological order for the backward sweep. Leaves may borrow their
/// data (`'a`) so frozen parameters are never copied onto the tape.
pub struct Graph<'a> {
    values: Vec<Cow<'a, Matrix>>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Matrix>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        self.grads.push(None);
        NodeId(self.values.len() - 1)
    }

    fn derived(&mut self, value: Matrix, op: Op, inputs: &[NodeId]) -> NodeId {
        let ng = inputs.iter().any(|i| self.needs_grad[i.0]);
        self.push(Cow::Owned(value), op, ng)
    }

    /// Trainable leaf that owns its value.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Trainable leaf that borrows its value.
    pub fn leaf_ref(&mut self, value: &'a Matrix) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.values[id.0].shape()
    }

    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of `id`, or zeros of its shape when nothing flowed into it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Matrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shape(id);
                Matrix::zeros(r, c)
            }
        }
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`; applies an `out × in` weight to row-vector activations.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                lhs: sa,
                rhs: sb,
            });
        }
        let v = self.value(a).matmul_t(self.value(b));
        Ok(self.derived(v, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.derived(v, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: sa,
                rhs: sr,
            });
        }
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sa.0 {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        Ok(self.derived(v, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.derived(v, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise maximum; ties resolve to `a`.
    pub fn max2(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("max2", a, b)?;
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| if x >= y { x } else { y });
        Ok(self.derived(v, Op::Max2(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.derived(v, Op::Scale(a, s), &[a])
    }

    /// Multiplies by a fixed (non-differentiated) matrix, e.g. a dropout mask.
    pub fn mul_const(&mut self, a: NodeId, c: Matrix) -> Result<NodeId> {
        if self.shape(a) != c.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                lhs: self.shape(a),
                rhs: c.shape(),
            });
        }
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        Ok(self.derived(v, Op::MulConst(a, c), &[a]))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.derived(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.derived(v, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.derived(v, Op::Relu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.derived(v, Op::SoftmaxRows(a), &[a])
    }

    /// Column-wise maximum over the rows of an `n×d` matrix, giving `1×d`.
    /// Ties resolve to the lowest row index.
    pub fn reduce_max_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let (n, d) = x.shape();
        if n == 0 {
            return Err(Error::invalid("reduce_max_rows", "no rows"));
        }
        let mut arg = vec![0usize; d];
        let mut out = Matrix::zeros(1, d);
        for j in 0..d {
            let mut best = x[(0, j)];
            for i in 1..n {
                if x[(i, j)] > best {
                    best = x[(i, j)];
                    arg[j] = i;
                }
            }
            out[(0, j)] = best;
        }
        Ok(self.derived(out, Op::ReduceMaxRows(a, arg), &[a]))
    }

    /// Juxtaposes two row vectors.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != 1 || sb.0 != 1 {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let v = Matrix::from_vec(1, sa.1 + sb.1, data)?;
        Ok(self.derived(v, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Stacks `1×d` row vectors into an `n×d` matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let first = rows
            .first()
            .ok_or_else(|| Error::invalid("stack_rows", "no rows"))?;
        let d = self.shape(*first).1;
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let s = self.shape(r);
            if s != (1, d) {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: (1, d),
                    rhs: s,
                });
            }
            data.extend_from_slice(self.value(r).data());
        }
        let v = Matrix::from_vec(rows.len(), d, data)?;
        Ok(self.derived(v, Op::StackRows(rows.to_vec()), rows))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(Error::invalid(
                "slice_cols",
                format!("columns {start}..{} of {:?}", start + len, x.shape()),
            ));
        }
        let mut v = Matrix::zeros(x.rows(), len);
        for i in 0..x.rows() {
            v.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        Ok(self.derived(v, Op::SliceCols(a, start), &[a]))
    }

    /// Row `i` as a `1×d` matrix.
    pub fn slice_row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let x = self.value(a);
        if i >= x.rows() {
            return Err(Error::invalid(
                "slice_row",
                format!("row {i} of {:?}", x.shape()),
            ));
        }
        let v = Matrix::row_vector(x.row(i));
        Ok(self.derived(v, Op::SliceRow(a, i), &[a]))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.derived(v, Op::Transpose(a), &[a])
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let d = t.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= t.rows() {
                return Err(Error::invalid(
                    "gather_rows",
                    format!("index {i} out of {} rows", t.rows()),
                ));
            }
            data.extend_from_slice(t.row(i));
        }
        let v = Matrix::from_vec(ids.len(), d, data)?;
        Ok(self.derived(v, Op::GatherRows(table, ids.to_vec()), &[table]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.derived(Matrix::scalar(s), Op::Sum(a), &[a])
    }

    /// Cosine similarity of two row vectors, as a `1×1` node.
    pub fn cosine_sim(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        let (su, sv) = (self.shape(u), self.shape(v));
        if su.0 != 1 || su != sv {
            return Err(Error::ShapeMismatch {
                op: "cosine_sim",
                lhs: su,
                rhs: sv,
            });
        }
        note_cosine_guard();
        let c = cosine_guarded(self.value(u).data(), self.value(v).data());
        Ok(self.derived(Matrix::scalar(c), Op::CosineSim(u, v), &[u, v]))
    }

    /// `S[i][j] = cos(p_i, y_j)` for the rows of two `B×d` matrices.
    pub fn cosine_matrix(&mut self, p: NodeId, y: NodeId) -> Result<NodeId> {
        let (sp, sy) = (self.shape(p), self.shape(y));
        if sp.1 != sy.1 {
            return Err(Error::ShapeMismatch {
                op: "cosine_matrix",
                lhs: sp,
                rhs: sy,
            });
        }
        note_cosine_guard();
        let (pm, ym) = (self.value(p), self.value(y));
        let mut s = Matrix::zeros(sp.0, sy.0);
        for i in 0..sp.0 {
            for j in 0..sy.0 {
                s[(i, j)] = cosine_guarded(pm.row(i), ym.row(j));
            }
        }
        Ok(self.derived(s, Op::CosineMatrix(p, y), &[p, y]))
    }

    /// Batch log-exp-sum pairwise ranking loss over a `B×B` similarity matrix
    /// whose diagonal holds the positive pairs.
    ///
    /// `L = log(1 + Σ_k Σ_{j≠k} [exp(S[k][j] − S[k][k]) + exp(S[j][k] − S[k][k])])`
    /// with every exponent clamped at [`RANK_EXP_CLAMP`].
    pub fn rank_loss(&mut self, s: NodeId) -> Result<NodeId> {
        let (b, c) = self.shape(s);
        if b != c || b < 2 {
            return Err(Error::invalid(
                "rank_loss",
                format!("needs a square similarity matrix with B >= 2, got {b}x{c}"),
            ));
        }
        let total = rank_terms(self.value(s)).0;
        Ok(self.derived(Matrix::scalar(total.ln_1p()), Op::RankLoss(s), &[s]))
    }

    /// Sum over rows of `−log softmax(logits_row)[target]`; rows with a
    /// `None` target are masked out.
    pub fn nll_rows(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let x = self.value(logits);
        if x.rows() != targets.len() {
            return Err(Error::invalid(
                "nll_rows",
                format!("{} targets for {} rows", targets.len(), x.rows()),
            ));
        }
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= x.cols() {
                    return Err(Error::invalid(
                        "nll_rows",
                        format!("target {t} >= {}", x.cols()),
                    ));
                }
                total -= log_softmax_at(x.row(i), t);
            }
        }
        Ok(self.derived(
            Matrix::scalar(total),
            Op::NllRows(logits, targets.to_vec()),
            &[logits],
        ))
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        let s = self.shape(output);
        if s != (1, 1) {
            return Err(Error::NonScalar(s));
        }
        self.backward_seeded(vec![(output, Matrix::scalar(1.0))])
    }

    /// Backpropagates from arbitrary seed gradients. Seeds on the same node
    /// are summed.
    pub fn backward_seeded(&mut self, seeds: Vec<(NodeId, Matrix)>) -> Result<()> {
        let mut last = 0;
        for (id, g) in seeds {
            if g.shape() != self.shape(id) {
                return Err(Error::ShapeMismatch {
                    op: "backward seed",
                    lhs: self.shape(id),
                    rhs: g.shape(),
                });
            }
            last = last.max(id.0);
            accumulate(&mut self.grads[id.0], g);
        }
        for i in (0..=last).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn send(&mut self, to: NodeId, g: Matrix) {
        if self.needs_grad[to.0] {
            accumulate(&mut self.grads[to.0], g);
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.needs_grad[id.0]
    }

    fn backprop_node(&mut self, i: usize, g: &Matrix) {
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    let ga = g.matmul_t(self.value(b));
                    self.send(a, ga);
                }
                if self.wants(b) {
                    let gb = self.value(a).t_matmul(g);
                    self.send(b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    let ga = g.matmul(self.value(b)).expect("shapes checked in forward");
                    self.send(a, ga);
                }
                if self.wants(b) {
                    let gb = g.t_matmul(self.value(a));
                    self.send(b, gb);
                }
            }
            Op::SliceRow(a, r) => {
                let (n, d) = self.shape(*a);
                let mut ga = Matrix::zeros(n, d);
                ga.row_mut(*r).copy_from_slice(g.data());
                self.send(*a, ga);
            }
            Op::Add(a, b) => {
                self.send(*a, g.clone());
                self.send(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.send(*a, g.clone());
                if self.wants(*row) {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    self.send(*row, gr);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    let ga = g.zip_map(self.value(b), |x, y| x * y);
                    self.send(a, ga);
                }
                if self.wants(b) {
                    let gb = g.zip_map(self.value(a), |x, y| x * y);
                    self.send(b, gb);
                }
            }
            Op::Max2(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (self.value(a), self.value(b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                for k in 0..g.len() {
                    if va.data()[k] >= vb.data()[k] {
                        gb.data_mut()[k] = 0.0;
                    } else {
                        ga.data_mut()[k] = 0.0;
                    }
                }
                self.send(a, ga);
                self.send(b, gb);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.send(*a, g.map(|x| x * s));
            }
            Op::MulConst(a, c) => {
                self.send(*a, g.zip_map(c, |x, m| x * m));
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(self.value(NodeId(i)), |x, y| x * (1.0 - y * y));
                self.send(*a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(self.value(NodeId(i)), |x, y| x * y * (1.0 - y));
                self.send(*a, ga);
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                self.send(*a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(NodeId(i));
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.send(*a, ga);
            }
            Op::ReduceMaxRows(a, arg) => {
                let (n, d) = self.shape(*a);
                let mut ga = Matrix::zeros(n, d);
                for (j, &r) in arg.iter().enumerate() {
                    ga[(r, j)] = g[(0, j)];
                }
                self.send(*a, ga);
            }
            Op::ConcatRows(a, b) => {
                let p = self.shape(*a).1;
                let ga = Matrix::row_vector(&g.data()[..p]);
                let gb = Matrix::row_vector(&g.data()[p..]);
                self.send(*a, ga);
                self.send(*b, gb);
            }
            Op::StackRows(rows) => {
                for (k, &r) in rows.iter().enumerate() {
                    if self.wants(r) {
                        self.send(r, Matrix::row_vector(g.row(k)));
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let (n, d) = self.shape(*a);
                let mut ga = Matrix::zeros(n, d);
                for r in 0..n {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.send(*a, ga);
            }
            Op::Transpose(a) => {
                self.send(*a, g.transpose());
            }
            Op::GatherRows(table, ids) => {
                let (n, d) = self.shape(*table);
                let mut gt = Matrix::zeros(n, d);
                for (k, &id) in ids.iter().enumerate() {
                    for (acc, x) in gt.row_mut(id).iter_mut().zip(g.row(k)) {
                        *acc += x;
                    }
                }
                self.send(*table, gt);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.send(*a, Matrix::filled(r, c, g.to_scalar()));
            }
            Op::CosineSim(u, v) => {
                let (u, v) = (*u, *v);
                let (gu, gv) = cosine_grads(self.value(u).data(), self.value(v).data());
                let s = g.to_scalar();
                let gu = Matrix::row_vector(&gu).map(|x| x * s);
                let gv = Matrix::row_vector(&gv).map(|x| x * s);
                self.send(u, gu);
                self.send(v, gv);
            }
            Op::CosineMatrix(p, y) => {
                let (p, y) = (*p, *y);
                let (pm, ym) = (self.value(p), self.value(y));
                let mut gp = Matrix::zeros(pm.rows(), pm.cols());
                let mut gy = Matrix::zeros(ym.rows(), ym.cols());
                for a in 0..pm.rows() {
                    for b in 0..ym.rows() {
                        let w = g[(a, b)];
                        if w == 0.0 {
                            continue;
                        }
                        let (du, dv) = cosine_grads(pm.row(a), ym.row(b));
                        for (acc, x) in gp.row_mut(a).iter_mut().zip(&du) {
                            *acc += w * x;
                        }
                        for (acc, x) in gy.row_mut(b).iter_mut().zip(&dv) {
                            *acc += w * x;
                        }
                    }
                }
                self.send(p, gp);
                self.send(y, gy);
            }
            Op::RankLoss(s) => {
                let sm = self.value(*s);
                let (total, gs) = rank_terms(sm);
                let scale = g.to_scalar() / (1.0 + total);
                self.send(*s, gs.map(|x| x * scale));
            }
            Op::NllRows(logits, targets) => {
                let x = self.value(*logits);
                let mut gl = Matrix::zeros(x.rows(), x.cols());
                let s = g.to_scalar();
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let p = softmax_slice(x.row(r));
                        for (o, pv) in gl.row_mut(r).iter_mut().zip(p) {
                            *o = s * pv;
                        }
                        gl[(r, t)] -= s;
                    }
                }
                self.send(*logits, gl);
            }
        }
        self.ops[i] = op;
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn log_softmax_at(x: &[f64], t: usize) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
    x[t] - m - z.ln()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        out.row_mut(r).copy_from_slice(&softmax_slice(x.row(r)));
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity with the denominator floored at [`COSINE_EPS`]; a
/// zero-norm input yields 0.
pub fn cosine_guarded(u: &[f64], v: &[f64]) -> f64 {
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    dot(u, v) / (nu * nv).max(COSINE_EPS)
}

fn cosine_grads(u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    let den = nu * nv;
    if den < COSINE_EPS {
        let gu = v.iter().map(|x| x / COSINE_EPS).collect();
        let gv = u.iter().map(|x| x / COSINE_EPS).collect();
        return (gu, gv);
    }
    let c = dot(u, v) / den;
    let gu = u
        .iter()
        .zip(v)
        .map(|(a, b)| b / den - c * a / (nu * nu))
        .collect();
    let gv = u
        .iter()
        .zip(v)
        .map(|(a, b)| a / den - c * b / (nv * nv))
        .collect();
    (gu, gv)
}

/// Returns the clamped exponential sum and its gradient with respect to `s`.
fn rank_terms(s: &Matrix) -> (f64, Matrix) {
    let b = s.rows();
    let mut total = 0.0;
    let mut gs = Matrix::zeros(b, b);
    let mut term = |e: f64| -> f64 {
        if e < RANK_EXP_CLAMP {
            let w = e.exp();
            total += w;
            w
        } else {
            total += RANK_EXP_CLAMP.exp();
            0.0
        }
    };
    for k in 0..b {
        let pos = s[(k, k)];
        for j in 0..b {
            if j == k {
                continue;
            }
            let w1 = term(s[(k, j)] - pos);
            gs[(k, j)] += w1;
            gs[(k, k)] -= w1;
            let w2 = term(s[(j, k)] - pos);
            gs[(j, k)] += w2;
            gs[(k, k)] -= w2;
        }
    }
    (total, gs)
}

/// Cosine similarity that rejects zero-norm inputs.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            lhs: (1, u.len()),
            rhs: (1, v.len()),
        });
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot(u, v) / (nu * nv))
}
