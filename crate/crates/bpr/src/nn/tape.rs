//! Reverse-mode gradient tape over dense 2-D arrays.
//!
//! Every recorded value is an `Array2<f64>`; scalars are 1×1, row vectors
//! are 1×n. A forward computation appends nodes, `backward` walks the tape
//! in reverse and accumulates exact gradients for every node flagged as a
//! parameter. Constants (inputs, targets, sampled actions) never receive
//! gradients, which is how no-gradient contracts are enforced structurally.

use ndarray::{Array2, Axis};

use crate::error::{BprError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a · b
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// matrix + broadcast row vector
    AddRow(NodeId, NodeId),
    /// matrix ⊙ broadcast row vector
    MulRow(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Gelu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    /// per-row standardization (x − μ)/√(σ² + ε)
    RowStandardize(NodeId, f64),
    SumAll(NodeId),
    MeanAll(NodeId),
    RowSum(NodeId),
    LogSumExpRow(NodeId),
    /// column slice [start, end)
    Cols(NodeId, usize, usize),
    Reshape(NodeId),
    /// a / s with s a 1×1 node
    DivScalar(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::RowStandardize(..) => "row_standardize",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::RowSum(..) => "row_sum",
            Op::LogSumExpRow(..) => "logsumexp_row",
            Op::Cols(..) => "cols",
            Op::Reshape(..) => "reshape",
            Op::DivScalar(..) => "div_scalar",
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Exact GELU: x · Φ(x) with Φ the standard normal CDF.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// d/dx GELU = Φ(x) + x·φ(x).
pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Append-only computation record; see module docs.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable leaf: receives a gradient in `backward`.
    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf: gradients never flow into it.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.dim(), (1, 1), "scalar() on non-1x1 node");
        v[(0, 0)]
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b), self.needs(a) || self.needs(b))
    }

    /// a · bᵀ — the natural orientation for row-major batches against
    /// (out × in) weight matrices.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(v, Op::MatMulNT(a, b), self.needs(a) || self.needs(b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b), self.needs(a) || self.needs(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b), self.needs(a) || self.needs(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b), self.needs(a) || self.needs(b))
    }

    /// matrix + row vector broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(a, row), self.needs(a) || self.needs(row))
    }

    /// matrix ⊙ row vector broadcast over rows.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let v = &self.nodes[a.0].value * &self.nodes[row.0].value;
        self.push(v, Op::MulRow(a, row), self.needs(a) || self.needs(row))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a), self.needs(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| c * x);
        self.push(v, Op::Scale(a, c), self.needs(a))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddScalar(a), self.needs(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(gelu);
        self.push(v, Op::Gelu(a), self.needs(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a), self.needs(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a), self.needs(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Ln(a), self.needs(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, Op::Square(a), self.needs(a))
    }

    /// Hard clamp; gradient is zero outside [lo, hi].
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi), self.needs(a))
    }

    /// Per-row standardization to zero mean / unit variance (the core of
    /// layer normalization; affine gain and shift are separate ops).
    pub fn row_standardize(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = &self.nodes[a.0].value;
        let n = x.ncols() as f64;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / n;
            let r = (var + eps).sqrt();
            row.mapv_inplace(|e| (e - mean) / r);
        }
        self.push(v, Op::RowStandardize(a, eps), self.needs(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), self.needs(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let m = v.sum() / (v.len() as f64);
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a), self.needs(a))
    }

    /// m×n → m×1 row sums.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.sum_axis(Axis(1));
        let m = v.len();
        self.push(
            v.into_shape_with_order((m, 1)).unwrap(),
            Op::RowSum(a),
            self.needs(a),
        )
    }

    /// m×n → m×1 of log Σ_j exp(x_ij), computed with max subtraction.
    pub fn logsumexp_row(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let m = x.nrows();
        let mut out = Array2::zeros((m, 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&e| (e - mx).exp()).sum();
            out[(i, 0)] = mx + s.ln();
        }
        self.push(out, Op::LogSumExpRow(a), self.needs(a))
    }

    /// Column slice [start, end).
    pub fn cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![.., start..end])
            .to_owned();
        self.push(v, Op::Cols(a, start, end), self.needs(a))
    }

    /// Row-major reinterpretation to (rows, cols).
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order((rows, cols))
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a), self.needs(a))
    }

    /// a / s where s is a 1×1 node.
    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar(s);
        let v = self.nodes[a.0].value.mapv(|x| x / sv);
        self.push(v, Op::DivScalar(a, s), self.needs(a) || self.needs(s))
    }

    /// Reverse pass from a 1×1 loss node. Returns per-node gradients for
    /// every node on a differentiable path to the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        let lv = &self.nodes[loss.0].value;
        if lv.dim() != (1, 1) {
            return Err(BprError::shape("backward", "1x1 loss", format!("{:?}", lv.dim())));
        }
        if !lv[(0, 0)].is_finite() {
            // Find the first non-finite node for the diagnostic.
            let culprit = self
                .nodes
                .iter()
                .find(|n| n.value.iter().any(|v| !v.is_finite()))
                .map(|n| n.op.name())
                .unwrap_or("loss");
            return Err(BprError::NonFinite(format!("loss (first bad op: {culprit})")));
        }

        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Grads { by_node: grads })
    }

    fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, contrib: Array2<f64>) {
        match &mut grads[id.0] {
            Some(existing) => *existing += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        use Op::*;
        let val = |id: NodeId| &self.nodes[id.0].value;
        match self.nodes[idx].op {
            Leaf => {}
            MatMul(a, b) => {
                if self.needs(a) {
                    Self::accumulate(grads, a, g.dot(&val(b).t()));
                }
                if self.needs(b) {
                    Self::accumulate(grads, b, val(a).t().dot(g));
                }
            }
            MatMulNT(a, b) => {
                if self.needs(a) {
                    Self::accumulate(grads, a, g.dot(val(b)));
                }
                if self.needs(b) {
                    Self::accumulate(grads, b, g.t().dot(val(a)));
                }
            }
            Add(a, b) => {
                if self.needs(a) {
                    Self::accumulate(grads, a, g.clone());
                }
                if self.needs(b) {
                    Self::accumulate(grads, b, g.clone());
                }
            }
            Sub(a, b) => {
                if self.needs(a) {
                    Self::accumulate(grads, a, g.clone());
                }
                if self.needs(b) {
                    Self::accumulate(grads, b, g.mapv(|x| -x));
                }
            }
            Mul(a, b) => {
                if self.needs(a) {
                    Self::accumulate(grads, a, g * val(b));
                }
                if self.needs(b) {
                    Self::accumulate(grads, b, g * val(a));
                }
            }
            AddRow(a, row) => {
                if self.needs(a) {
                    Self::accumulate(grads, a, g.clone());
                }
                if self.needs(row) {
                    let col = g.sum_axis(Axis(0));
                    let n = col.len();
                    Self::accumulate(grads, row, col.into_shape_with_order((1, n)).unwrap());
                }
            }
            MulRow(a, row) => {
                if self.needs(a) {
                    Self::accumulate(grads, a, g * val(row));
                }
                if self.needs(row) {
                    let prod = g * val(a);
                    let col = prod.sum_axis(Axis(0));
                    let n = col.len();
                    Self::accumulate(grads, row, col.into_shape_with_order((1, n)).unwrap());
                }
            }
            Neg(a) => {
                if self.needs(a) {
                    Self::accumulate(grads, a, g.mapv(|x| -x));
                }
            }
            Scale(a, c) => {
                if self.needs(a) {
                    Self::accumulate(grads, a, g.mapv(|x| c * x));
                }
            }
            AddScalar(a) => {
                if self.needs(a) {
                    Self::accumulate(grads, a, g.clone());
                }
            }
            Gelu(a) => {
                if self.needs(a) {
                    let d = val(a).mapv(gelu_grad);
                    Self::accumulate(grads, a, g * &d);
                }
            }
            Tanh(a) => {
                if self.needs(a) {
                    let y = &self.nodes[idx].value;
                    Self::accumulate(grads, a, g * &y.mapv(|t| 1.0 - t * t));
                }
            }
            Exp(a) => {
                if self.needs(a) {
                    Self::accumulate(grads, a, g * &self.nodes[idx].value);
                }
            }
            Ln(a) => {
                if self.needs(a) {
                    Self::accumulate(grads, a, g / val(a));
                }
            }
            Square(a) => {
                if self.needs(a) {
                    Self::accumulate(grads, a, 2.0 * &(g * val(a)));
                }
            }
            Clamp(a, lo, hi) => {
                if self.needs(a) {
                    let mask = val(a).mapv(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 });
                    Self::accumulate(grads, a, g * &mask);
                }
            }
            RowStandardize(a, eps) => {
                if self.needs(a) {
                    let x = val(a);
                    let y = &self.nodes[idx].value;
                    let n = x.ncols() as f64;
                    let mut dx = Array2::zeros(x.raw_dim());
                    for i in 0..x.nrows() {
                        let xrow = x.row(i);
                        let yrow = y.row(i);
                        let grow = g.row(i);
                        let mean = xrow.sum() / n;
                        let var = xrow.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / n;
                        let r = (var + eps).sqrt();
                        let g_mean = grow.sum() / n;
                        let gy_mean = grow
                            .iter()
                            .zip(yrow.iter())
                            .map(|(&ge, &ye)| ge * ye)
                            .sum::<f64>()
                            / n;
                        for j in 0..x.ncols() {
                            dx[(i, j)] = (grow[j] - g_mean - yrow[j] * gy_mean) / r;
                        }
                    }
                    Self::accumulate(grads, a, dx);
                }
            }
            SumAll(a) => {
                if self.needs(a) {
                    let s = g[(0, 0)];
                    Self::accumulate(grads, a, Array2::from_elem(val(a).raw_dim(), s));
                }
            }
            MeanAll(a) => {
                if self.needs(a) {
                    let s = g[(0, 0)] / (val(a).len() as f64);
                    Self::accumulate(grads, a, Array2::from_elem(val(a).raw_dim(), s));
                }
            }
            RowSum(a) => {
                if self.needs(a) {
                    let mut dx = Array2::zeros(val(a).raw_dim());
                    for i in 0..dx.nrows() {
                        let gi = g[(i, 0)];
                        dx.row_mut(i).fill(gi);
                    }
                    Self::accumulate(grads, a, dx);
                }
            }
            LogSumExpRow(a) => {
                if self.needs(a) {
                    let x = val(a);
                    let y = &self.nodes[idx].value;
                    let mut dx = Array2::zeros(x.raw_dim());
                    for i in 0..x.nrows() {
                        let gi = g[(i, 0)];
                        let yi = y[(i, 0)];
                        for j in 0..x.ncols() {
                            dx[(i, j)] = gi * (x[(i, j)] - yi).exp();
                        }
                    }
                    Self::accumulate(grads, a, dx);
                }
            }
            Cols(a, start, _end) => {
                if self.needs(a) {
                    let mut dx = Array2::zeros(val(a).raw_dim());
                    dx.slice_mut(ndarray::s![.., start..start + g.ncols()])
                        .assign(g);
                    Self::accumulate(grads, a, dx);
                }
            }
            Reshape(a) => {
                if self.needs(a) {
                    let dx = g
                        .clone()
                        .into_shape_with_order(val(a).raw_dim())
                        .expect("reshape backward");
                    Self::accumulate(grads, a, dx);
                }
            }
            DivScalar(a, s) => {
                let sv = val(s)[(0, 0)];
                if self.needs(a) {
                    Self::accumulate(grads, a, g.mapv(|x| x / sv));
                }
                if self.needs(s) {
                    let ds = -(g * val(a)).sum() / (sv * sv);
                    Self::accumulate(grads, s, Array2::from_elem((1, 1), ds));
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads {
    by_node: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.by_node[id.0].as_ref()
    }

    /// Gradient of a node, or zeros when no path reached it.
    pub fn take_or_zeros(&mut self, id: NodeId, shape: (usize, usize)) -> Array2<f64> {
        self.by_node[id.0]
            .take()
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences on one tape-built scalar function.
    fn fd_check<F>(build: F, x0: Array2<f64>, tol: f64)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Array2::zeros(x0.raw_dim()));

        let h = 1e-6;
        for i in 0..x0.nrows() {
            for j in 0..x0.ncols() {
                let mut xp = x0.clone();
                xp[(i, j)] += h;
                let mut tp = Tape::new();
                let n = tp.param(xp);
                let lp = build(&mut tp, n);
                let fp = tp.scalar(lp);

                let mut xm = x0.clone();
                xm[(i, j)] -= h;
                let mut tm = Tape::new();
                let n = tm.param(xm);
                let lm = build(&mut tm, n);
                let fm = tm.scalar(lm);

                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic[(i, j)];
                let denom = a.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "fd mismatch at ({i},{j}): analytic {a}, numeric {numeric}"
                );
            }
        }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_case_matches_hand_gradient() {
        // loss = w·x with x = 2 → ∂loss/∂w = 2
        let mut tape = Tape::new();
        let w = tape.param(array![[3.0]]);
        let x = tape.constant(array![[2.0]]);
        let loss = tape.mul(w, x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap()[(0, 0)], 2.0);
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut tape = Tape::new();
        let used = tape.param(array![[1.0]]);
        let unused = tape.param(array![[5.0]]);
        let loss = tape.square(used);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        let _ = unused;
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        // GELU(1) = Φ(1)
        assert_relative_eq!(gelu(1.0), 0.841344746, epsilon = 1e-6);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut tape = Tape::new();
        let a = tape.param(array![[0.0]]);
        let loss = tape.ln(a); // ln 0 = −inf
        let err = tape.backward(loss).unwrap_err();
        assert!(matches!(err, BprError::NonFinite(_)));
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_mat(&mut rng, 3, 4);
        fd_check(|t, x| { let y = t.gelu(x); t.sum_all(y) }, x0.clone(), 1e-6);
        fd_check(|t, x| { let y = t.tanh(x); t.sum_all(y) }, x0.clone(), 1e-6);
        fd_check(|t, x| { let y = t.exp(x); t.mean_all(y) }, x0.clone(), 1e-6);
        fd_check(|t, x| { let y = t.square(x); t.sum_all(y) }, x0.clone(), 1e-6);
        fd_check(|t, x| { let y = t.neg(x); let z = t.scale(y, 2.5); t.sum_all(z) }, x0.clone(), 1e-6);
        let pos = x0.mapv(|v| v.abs() + 0.5);
        fd_check(|t, x| { let y = t.ln(x); t.sum_all(y) }, pos, 1e-6);
    }

    #[test]
    fn matmul_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 4, 2);
        let wt = w.t().to_owned();
        fd_check(
            move |t, x| {
                let wn = t.constant(w.clone());
                let y = t.matmul(x, wn);
                let y2 = t.square(y);
                t.sum_all(y2)
            },
            x0.clone(),
            1e-5,
        );
        fd_check(
            move |t, x| {
                let wn = t.constant(wt.clone());
                let y = t.matmul_nt(x, wn);
                let y2 = t.square(y);
                t.sum_all(y2)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn reductions_and_rows_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = rand_mat(&mut rng, 4, 5);
        fd_check(|t, x| { let y = t.row_sum(x); let z = t.square(y); t.sum_all(z) }, x0.clone(), 1e-5);
        fd_check(|t, x| { let y = t.logsumexp_row(x); t.sum_all(y) }, x0.clone(), 1e-5);
        fd_check(|t, x| { let y = t.cols(x, 1, 3); let z = t.square(y); t.sum_all(z) }, x0.clone(), 1e-5);
        fd_check(|t, x| { let y = t.reshape(x, 2, 10); let z = t.logsumexp_row(y); t.sum_all(z) }, x0.clone(), 1e-5);
        fd_check(|t, x| { let y = t.row_standardize(x, 1e-5); let z = t.square(y); t.sum_all(z) }, x0, 1e-4);
    }

    #[test]
    fn broadcast_row_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = rand_mat(&mut rng, 3, 4);
        let row0 = rand_mat(&mut rng, 1, 4);
        // grad w.r.t. the broadcast row
        let a2 = a.clone();
        fd_check(
            move |t, r| {
                let an = t.constant(a2.clone());
                let y = t.add_row(an, r);
                let z = t.square(y);
                t.sum_all(z)
            },
            row0.clone(),
            1e-5,
        );
        fd_check(
            move |t, r| {
                let an = t.constant(a.clone());
                let y = t.mul_row(an, r);
                let z = t.square(y);
                t.sum_all(z)
            },
            row0,
            1e-5,
        );
    }

    #[test]
    fn div_scalar_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_mat(&mut rng, 3, 3);
        // both numerator and denominator get gradients
        fd_check(
            |t, x| {
                let sq = t.square(x);
                let s = t.sum_all(sq);
                let s1 = t.add_scalar(s, 5.0);
                let y = t.div_scalar(x, s1);
                let y2 = t.square(y);
                t.sum_all(y2)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn clamp_gradient_masks_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.param(array![[-2.0, 0.5, 3.0]]);
        let y = tape.clamp(x, -1.0, 1.0);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &array![[0.0, 1.0, 0.0]]);
    }

    #[test]
    fn row_standardize_sends_constant_rows_to_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[4.0, 4.0, 4.0]]);
        let y = tape.row_standardize(x, 1e-5);
        assert_eq!(tape.value(y), &array![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn fan_out_accumulates_gradients() {
        // loss = sum(x⊙x) + sum(x) → grad = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(array![[1.0, 2.0]]);
        let sq = tape.square(x);
        let s1 = tape.sum_all(sq);
        let s2 = tape.sum_all(x);
        let loss = tape.add(s1, s2);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &array![[3.0, 5.0]]);
    }
}
