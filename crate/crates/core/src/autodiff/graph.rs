use std::rc::Rc;

use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    /// `x (b x n) + bias (1 x n)` added to every row.
    AddBias(Var, Var),
    /// Column sums: `b x n -> 1 x n`.
    SumRows(Var),
    /// Repeat a `1 x n` row: `1 x n -> r x n`.
    BroadcastRows(Var),
    /// Row sums: `b x n -> b x 1`.
    RowSum(Var),
    /// Repeat a `b x 1` column: `b x 1 -> b x c`.
    BroadcastCols(Var),
    Sum(Var),
    Fill(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Sqrt(Var),
    Tanh(Var),
    Elu(Var),
    /// Derivative of ELU evaluated at the input.
    EluDeriv(Var),
    ClampMin(Var, f64),
    /// Row-wise softmax.
    Softmax(Var),
    /// Row-wise `logsumexp(z) - z[label]`, output `b x 1`.
    SoftmaxXent { logits: Var, labels: Rc<[usize]> },
    /// Row `i` of the output is `M_i x_i` (or `M_i^T x_i`) for fixed matrices `M_i`.
    BatchMatVec {
        x: Var,
        mats: Rc<BatchMats>,
        transpose: bool,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::RowSum(..) => "row_sum",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Sum(..) => "sum",
            Op::Fill(..) => "fill",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Recip(..) => "recip",
            Op::Sqrt(..) => "sqrt",
            Op::Tanh(..) => "tanh",
            Op::Elu(..) => "elu",
            Op::EluDeriv(..) => "elu_deriv",
            Op::ClampMin(..) => "clamp_min",
            Op::Softmax(..) => "softmax",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::BatchMatVec { .. } => "batch_matvec",
        }
    }
}

/// A stack of constant `rows x cols` matrices, one per batch row.
#[derive(Debug)]
pub struct BatchMats {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl BatchMats {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert!(rows * cols > 0 && data.len() % (rows * cols) == 0);
        Self { rows, cols, data }
    }

    pub fn batch(&self) -> usize {
        self.data.len() / (self.rows * self.cols)
    }

    fn mat(&self, i: usize) -> &[f64] {
        let sz = self.rows * self.cols;
        &self.data[i * sz..(i + 1) * sz]
    }
}

fn op_parents(op: &Op) -> (Option<Var>, Option<Var>) {
    match *op {
        Op::Param | Op::Constant => (None, None),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => (Some(a), Some(b)),
        Op::MatMul { a, b, .. } => (Some(a), Some(b)),
        Op::SoftmaxXent { logits, .. } => (Some(logits), None),
        Op::BatchMatVec { x, .. } => (Some(x), None),
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::SumRows(a)
        | Op::BroadcastRows(a)
        | Op::RowSum(a)
        | Op::BroadcastCols(a)
        | Op::Sum(a)
        | Op::Fill(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Recip(a)
        | Op::Sqrt(a)
        | Op::Tanh(a)
        | Op::Elu(a)
        | Op::EluDeriv(a)
        | Op::ClampMin(a, _)
        | Op::Softmax(a) => (Some(a), None),
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation graph with eager evaluation.
///
/// Nodes are stored in creation order, so the node list is always a
/// topological order. [`Graph::backward`] appends the gradient computation
/// to the same graph, which makes the returned gradients differentiable
/// again (double backward).
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Parents of a node, in operand order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        let (a, b) = op_parents(&self.nodes[v.0].op);
        a.into_iter().chain(b).collect()
    }

    /// First node whose value contains NaN or an infinity.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.nodes.iter().position(|n| !n.value.is_finite())
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = match &op {
            Op::Param => true,
            Op::Constant => false,
            _ => {
                let (a, b) = op_parents(&op);
                a.into_iter().chain(b).any(|p| self.nodes[p.0].requires_grad)
            }
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- leaves ----------------------------------------------------------

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Param, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).zip(self.val(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).zip(self.val(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).zip(self.val(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.val(a).map(|x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a).map(|x| c * x);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a).map(|x| x + c);
        self.push(Op::AddScalar(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.val(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.val(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.val(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.val(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.val(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.val(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(Op::Elu(a), v)
    }

    fn elu_deriv(&mut self, a: Var) -> Var {
        let v = self.val(a).map(|x| if x > 0.0 { 1.0 } else { x.exp() });
        self.push(Op::EluDeriv(a), v)
    }

    /// `max(a, floor)` elementwise; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let v = self.val(a).map(|x| x.max(floor));
        self.push(Op::ClampMin(a, floor), v)
    }

    // ---- linear algebra and reductions -------------------------------------

    /// `op(a) op(b)`, where `ta`/`tb` select a transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let v = Tensor::matmul(self.val(a), self.val(b), ta, tb);
        self.push(Op::MatMul { a, b, ta, tb }, v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.val(x), self.val(bias));
        assert_eq!(bv.rows(), 1, "bias must be a row vector");
        assert_eq!(xv.cols(), bv.cols(), "bias width mismatch");
        let cols = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + bv.data()[i % cols])
            .collect();
        let v = Tensor::new(xv.rows(), cols, data);
        self.push(Op::AddBias(x, bias), v)
    }

    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.val(x);
        let mut out = vec![0.0; xv.cols()];
        for r in 0..xv.rows() {
            for (o, &a) in out.iter_mut().zip(xv.row_slice(r)) {
                *o += a;
            }
        }
        let v = Tensor::row(out);
        self.push(Op::SumRows(x), v)
    }

    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let xv = self.val(x);
        assert_eq!(xv.rows(), 1, "broadcast_rows expects a row vector");
        let data = xv.data().repeat(rows);
        let v = Tensor::new(rows, xv.cols(), data);
        self.push(Op::BroadcastRows(x), v)
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.val(x);
        let data = (0..xv.rows()).map(|r| xv.row_slice(r).iter().sum()).collect();
        let v = Tensor::column(data);
        self.push(Op::RowSum(x), v)
    }

    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Var {
        let xv = self.val(x);
        assert_eq!(xv.cols(), 1, "broadcast_cols expects a column vector");
        let data = xv
            .data()
            .iter()
            .flat_map(|&a| std::iter::repeat_n(a, cols))
            .collect();
        let v = Tensor::new(xv.rows(), cols, data);
        self.push(Op::BroadcastCols(x), v)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.val(x).data().iter().sum());
        self.push(Op::Sum(x), v)
    }

    /// Broadcast a scalar to a `rows x cols` tensor.
    pub fn fill(&mut self, s: Var, rows: usize, cols: usize) -> Var {
        let v = Tensor::filled(rows, cols, self.val(s).item());
        self.push(Op::Fill(s), v)
    }

    pub fn softmax(&mut self, logits: Var) -> Var {
        let zv = self.val(logits);
        let mut data = Vec::with_capacity(zv.len());
        for r in 0..zv.rows() {
            let row = zv.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / total));
        }
        let v = Tensor::new(zv.rows(), zv.cols(), data);
        self.push(Op::Softmax(logits), v)
    }

    /// Per-row cross-entropy `-log softmax(z)[label]`, computed stably.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Var {
        let zv = self.val(logits);
        assert_eq!(zv.rows(), labels.len(), "one label per logit row");
        let mut data = Vec::with_capacity(zv.rows());
        for (r, &label) in labels.iter().enumerate() {
            let row = zv.row_slice(r);
            assert!(label < row.len(), "label {label} out of range");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            data.push(lse - row[label]);
        }
        let v = Tensor::column(data);
        self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.into(),
            },
            v,
        )
    }

    pub fn batch_matvec(&mut self, x: Var, mats: Rc<BatchMats>, transpose: bool) -> Var {
        let xv = self.val(x);
        let (in_dim, out_dim) = if transpose {
            (mats.rows, mats.cols)
        } else {
            (mats.cols, mats.rows)
        };
        assert_eq!(xv.rows(), mats.batch(), "batch size mismatch");
        assert_eq!(xv.cols(), in_dim, "batch_matvec input width mismatch");
        let mut data = vec![0.0; xv.rows() * out_dim];
        for b in 0..xv.rows() {
            let m = mats.mat(b);
            let xr = xv.row_slice(b);
            let out = &mut data[b * out_dim..(b + 1) * out_dim];
            for i in 0..mats.rows {
                for j in 0..mats.cols {
                    let a = m[i * mats.cols + j];
                    if transpose {
                        out[j] += a * xr[i];
                    } else {
                        out[i] += a * xr[j];
                    }
                }
            }
        }
        let v = Tensor::new(xv.rows(), out_dim, data);
        self.push(Op::BatchMatVec { x, mats, transpose }, v)
    }

    /// Sum of elementwise products of two same-shape nodes.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    // ---- reverse mode ------------------------------------------------------

    /// Reverse-mode gradients of the scalar `output` with respect to `wrt`.
    ///
    /// Gradient computations are recorded as ordinary graph nodes, so the
    /// returned vars can be differentiated again. A `wrt` entry that does
    /// not influence `output` gets a zero constant.
    pub fn backward(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(
            self.shape(output),
            (1, 1),
            "backward requires a scalar output"
        );
        let seed = self.constant(Tensor::scalar(1.0));
        self.backward_with_seed(output, seed, wrt)
    }

    /// Vector-Jacobian product of `output` against the cotangent `seed`.
    pub fn backward_with_seed(&mut self, output: Var, seed: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.shape(output), self.shape(seed), "seed shape mismatch");
        let mut adj: Vec<Option<Var>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.vjp(Var(i), &op, g, &mut adj);
        }
        wrt.iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(w);
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect()
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contrib: Var) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        adj[target.0] = Some(match adj[target.0] {
            None => contrib,
            Some(prev) => self.add(prev, contrib),
        });
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn mask(&mut self, src: Var, pred: impl Fn(f64) -> bool) -> Var {
        let m = self.val(src).map(|x| if pred(x) { 1.0 } else { 0.0 });
        self.constant(m)
    }

    fn vjp(&mut self, y: Var, op: &Op, g: Var, adj: &mut [Option<Var>]) {
        match *op {
            Op::Param | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(adj, a, g);
                self.accumulate(adj, b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, a, g);
                if self.needs(b) {
                    let nb = self.neg(g);
                    self.accumulate(adj, b, nb);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let da = self.mul(g, b);
                    self.accumulate(adj, a, da);
                }
                if self.needs(b) {
                    let db = self.mul(g, a);
                    self.accumulate(adj, b, db);
                }
            }
            Op::Neg(a) => {
                let d = self.neg(g);
                self.accumulate(adj, a, d);
            }
            Op::Scale(a, c) => {
                let d = self.scale(g, c);
                self.accumulate(adj, a, d);
            }
            Op::AddScalar(a) => self.accumulate(adj, a, g),
            Op::MatMul { a, b, ta, tb } => {
                if self.needs(a) {
                    let da = match (ta, tb) {
                        (false, false) => self.matmul_t(g, b, false, true),
                        (true, false) => self.matmul_t(b, g, false, true),
                        (false, true) => self.matmul_t(g, b, false, false),
                        (true, true) => self.matmul_t(b, g, true, true),
                    };
                    self.accumulate(adj, a, da);
                }
                if self.needs(b) {
                    let db = match (ta, tb) {
                        (false, false) => self.matmul_t(a, g, true, false),
                        (true, false) => self.matmul_t(a, g, false, false),
                        (false, true) => self.matmul_t(g, a, true, false),
                        (true, true) => self.matmul_t(g, a, true, true),
                    };
                    self.accumulate(adj, b, db);
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(adj, x, g);
                if self.needs(bias) {
                    let db = self.sum_rows(g);
                    self.accumulate(adj, bias, db);
                }
            }
            Op::SumRows(x) => {
                let rows = self.val(x).rows();
                let d = self.broadcast_rows(g, rows);
                self.accumulate(adj, x, d);
            }
            Op::BroadcastRows(x) => {
                let d = self.sum_rows(g);
                self.accumulate(adj, x, d);
            }
            Op::RowSum(x) => {
                let cols = self.val(x).cols();
                let d = self.broadcast_cols(g, cols);
                self.accumulate(adj, x, d);
            }
            Op::BroadcastCols(x) => {
                let d = self.row_sum(g);
                self.accumulate(adj, x, d);
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(x);
                let d = self.fill(g, r, c);
                self.accumulate(adj, x, d);
            }
            Op::Fill(s) => {
                let d = self.sum(g);
                self.accumulate(adj, s, d);
            }
            Op::Exp(x) => {
                let d = self.mul(g, y);
                self.accumulate(adj, x, d);
            }
            Op::Log(x) => {
                let r = self.recip(x);
                let d = self.mul(g, r);
                self.accumulate(adj, x, d);
            }
            Op::Recip(x) => {
                let yy = self.mul(y, y);
                let gyy = self.mul(g, yy);
                let d = self.neg(gyy);
                self.accumulate(adj, x, d);
            }
            Op::Sqrt(x) => {
                let r = self.recip(y);
                let half = self.scale(r, 0.5);
                let d = self.mul(g, half);
                self.accumulate(adj, x, d);
            }
            Op::Tanh(x) => {
                let yy = self.mul(y, y);
                let nyy = self.neg(yy);
                let deriv = self.add_scalar(nyy, 1.0);
                let d = self.mul(g, deriv);
                self.accumulate(adj, x, d);
            }
            Op::Elu(x) => {
                let deriv = self.elu_deriv(x);
                let d = self.mul(g, deriv);
                self.accumulate(adj, x, d);
            }
            Op::EluDeriv(x) => {
                // d/dx elu'(x) = elu'(x) - [x > 0]
                let step = self.mask(x, |v| v > 0.0);
                let second = self.sub(y, step);
                let d = self.mul(g, second);
                self.accumulate(adj, x, d);
            }
            Op::ClampMin(x, floor) => {
                let m = self.mask(x, |v| v > floor);
                let d = self.mul(g, m);
                self.accumulate(adj, x, d);
            }
            Op::Softmax(z) => {
                let gs = self.mul(g, y);
                let rs = self.row_sum(gs);
                let cols = self.val(z).cols();
                let b = self.broadcast_cols(rs, cols);
                let centered = self.sub(g, b);
                let d = self.mul(y, centered);
                self.accumulate(adj, z, d);
            }
            Op::SoftmaxXent { logits, ref labels } => {
                let (rows, cols) = self.shape(logits);
                let mut onehot = Tensor::zeros(rows, cols).into_data();
                for (r, &l) in labels.iter().enumerate() {
                    onehot[r * cols + l] = 1.0;
                }
                let onehot = self.constant(Tensor::new(rows, cols, onehot));
                let probs = self.softmax(logits);
                let diff = self.sub(probs, onehot);
                let gb = self.broadcast_cols(g, cols);
                let d = self.mul(gb, diff);
                self.accumulate(adj, logits, d);
            }
            Op::BatchMatVec {
                x,
                ref mats,
                transpose,
            } => {
                let d = self.batch_matvec(g, Rc::clone(mats), !transpose);
                self.accumulate(adj, x, d);
            }
        }
    }
}
