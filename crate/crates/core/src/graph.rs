//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] owns a vector of nodes; each node stores its value, an
//! optional gradient (allocated during the backward pass) and the operation
//! that produced it, referencing parent nodes by index. Nodes can only refer
//! to earlier nodes, so the tape order is already topological and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Gradients are reset at the start of every backward call; optimizers own
//! the zeroing contract after an update.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// (n x m) + (m,) broadcast over rows.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// (n x m) -> (n,): per-row sum.
    SumAxis1(NodeId),
    /// (n x m) -> (m,): per-column mean; zero rows pool to zeros.
    MeanAxis0(NodeId),
    /// (m,) or (1 x m) -> (n x m).
    RepeatRow(NodeId, usize),
    ConcatCols(NodeId, NodeId),
    ConcatRows(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    PermuteCols(NodeId, Vec<usize>),
    Reshape(NodeId, Vec<usize>),
    /// Scalars -> (n,).
    Stack(Vec<NodeId>),
    GaussianLogPdf {
        x: NodeId,
        mu: NodeId,
        sigma: NodeId,
    },
    /// (n,) -> scalar, max-shifted.
    LogMeanExp(NodeId),
    /// input (c_in x t), kernel (c_out x c_in x k) -> (c_out x t_out).
    Conv1d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    },
}

struct NodeData {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// A single forward/backward tape. Cheap to create per training iteration.
pub struct Graph {
    nodes: Vec<NodeData>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(NodeData { value, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a leaf node. Leaves receive gradients like any other node;
    /// whether they are trainable is the parameter store's business.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    // ---- elementwise and linear ops -------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.value(a).check_same_shape(self.value(b), "add")?;
        let v = {
            let (ta, tb) = (self.value(a), self.value(b));
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let cols_b = match sb.len() {
            1 => sb[0],
            2 if sb[0] == 1 => sb[1],
            _ => 0,
        };
        if sa.len() != 2 || cols_b != sa[1] {
            return Err(Error::ShapeMismatch { op: "add_row", lhs: sa, rhs: sb });
        }
        let v = {
            let (ta, tb) = (self.value(a), self.value(b));
            let m = sa[1];
            let data = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + tb.data()[i % m])
                .collect();
            Tensor::new(sa.clone(), data)
        };
        Ok(self.push(v, Op::AddRow(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.value(a).check_same_shape(self.value(b), "sub")?;
        let v = {
            let (ta, tb) = (self.value(a), self.value(b));
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.value(a).check_same_shape(self.value(b), "mul")?;
        let v = {
            let (ta, tb) = (self.value(a), self.value(b));
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    // ---- reductions and shape ops ---------------------------------------

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::EmptyInput("mean"));
        }
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        Ok(self.push(v, Op::Mean(a)))
    }

    pub fn sum_axis1(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "sum_axis1",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, m) = (t.rows(), t.cols());
        let data = (0..n).map(|i| t.row(i).iter().sum()).collect();
        let v = Tensor::vector(data);
        let _ = m;
        Ok(self.push(v, Op::SumAxis1(a)))
    }

    /// Column means of an (n x m) matrix. An empty (0 x m) matrix pools to
    /// zeros, which is what an empty context set should encode to.
    pub fn mean_axis0(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "mean_axis0",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, m) = (t.rows(), t.cols());
        let mut data = vec![0.0; m];
        if n > 0 {
            for i in 0..n {
                for (j, v) in t.row(i).iter().enumerate() {
                    data[j] += v;
                }
            }
            for v in data.iter_mut() {
                *v /= n as f64;
            }
        }
        let v = Tensor::vector(data);
        Ok(self.push(v, Op::MeanAxis0(a)))
    }

    pub fn repeat_row(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let t = self.value(a);
        let m = match t.shape() {
            [m] => *m,
            [1, m] => *m,
            s => {
                return Err(Error::ShapeMismatch {
                    op: "repeat_row",
                    lhs: s.to_vec(),
                    rhs: vec![1],
                })
            }
        };
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::matrix(n, m, data), Op::RepeatRow(a, n)))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.rows() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (n, ma, mb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        Ok(self.push(Tensor::matrix(n, ma + mb, data), Op::ConcatCols(a, b)))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (na, nb, m) = (ta.rows(), tb.rows(), ta.cols());
        let mut data = Vec::with_capacity((na + nb) * m);
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        Ok(self.push(Tensor::matrix(na + nb, m, data), Op::ConcatRows(a, b)))
    }

    /// Stack single-row matrices into one (n x m) matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let mut it = rows.iter();
        let first = *it.next().ok_or(Error::EmptyInput("stack_rows"))?;
        let mut acc = first;
        for &r in it {
            acc = self.concat_rows(acc, r)?;
        }
        Ok(acc)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape().len() != 2 || end > t.cols() || start >= end {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let n = t.rows();
        let mut data = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        Ok(self.push(Tensor::matrix(n, end - start, data), Op::SliceCols(a, start, end)))
    }

    /// Reorder columns: out[:, j] = a[:, perm[j]].
    pub fn permute_cols(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape().len() != 2 || perm.len() != t.cols() {
            return Err(Error::ShapeMismatch {
                op: "permute_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![perm.len()],
            });
        }
        let (n, m) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = t.row(i);
            data.extend(perm.iter().map(|&p| row[p]));
        }
        Ok(self.push(Tensor::matrix(n, m, data), Op::PermuteCols(a, perm.to_vec())))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let v = Tensor::new(shape.to_vec(), t.data().to_vec());
        Ok(self.push(v, Op::Reshape(a, shape.to_vec())))
    }

    /// Stack scalar nodes into a vector.
    pub fn stack(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("stack"));
        }
        let mut data = Vec::with_capacity(ids.len());
        for &id in ids {
            let t = self.value(id);
            if t.len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: t.shape().to_vec(),
                    rhs: vec![],
                });
            }
            data.push(t.data()[0]);
        }
        Ok(self.push(Tensor::vector(data), Op::Stack(ids.to_vec())))
    }

    // ---- probability ops -------------------------------------------------

    /// Elementwise log N(x; mu, sigma). All three arguments are nodes of the
    /// same shape; sigma must be strictly positive.
    pub fn gaussian_log_pdf(&mut self, x: NodeId, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
        self.value(x).check_same_shape(self.value(mu), "gaussian_log_pdf")?;
        self.value(x).check_same_shape(self.value(sigma), "gaussian_log_pdf")?;
        if let Some(&bad) = self.value(sigma).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::NonPositiveSigma { op: "gaussian_log_pdf", value: bad });
        }
        let v = {
            let (tx, tm, ts) = (self.value(x), self.value(mu), self.value(sigma));
            let data = tx
                .data()
                .iter()
                .zip(tm.data())
                .zip(ts.data())
                .map(|((&xv, &mv), &sv)| {
                    let z = (xv - mv) / sv;
                    -0.5 * LN_2PI - sv.ln() - 0.5 * z * z
                })
                .collect();
            Tensor::new(tx.shape().to_vec(), data)
        };
        Ok(self.push(v, Op::GaussianLogPdf { x, mu, sigma }))
    }

    /// log((1/m) sum exp(v_i)) over a vector node, max-shifted.
    pub fn log_mean_exp(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "log_mean_exp",
                lhs: t.shape().to_vec(),
                rhs: vec![0],
            });
        }
        let v = Tensor::scalar(crate::tensor::log_mean_exp(t.data())?);
        Ok(self.push(v, Op::LogMeanExp(a)))
    }

    /// 1-d convolution: input (c_in x t), kernel (c_out x c_in x k).
    pub fn conv1d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let (is, ks) = (ti.shape().to_vec(), tk.shape().to_vec());
        if is.len() != 2 || ks.len() != 3 || ks[1] != is[0] || stride == 0 {
            return Err(Error::ShapeMismatch { op: "conv1d", lhs: is, rhs: ks });
        }
        let (c_in, t) = (is[0], is[1]);
        let (c_out, k) = (ks[0], ks[2]);
        let padded = t + 2 * pad;
        if padded < k {
            return Err(Error::ShapeMismatch { op: "conv1d", lhs: is, rhs: ks });
        }
        let t_out = (padded - k) / stride + 1;
        let mut out = vec![0.0; c_out * t_out];
        let idata = ti.data();
        let kdata = tk.data();
        for o in 0..c_out {
            for ot in 0..t_out {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for j in 0..k {
                        let s = ot * stride + j;
                        if s < pad || s >= pad + t {
                            continue;
                        }
                        acc += kdata[(o * c_in + ci) * k + j] * idata[ci * t + (s - pad)];
                    }
                }
                out[o * t_out + ot] = acc;
            }
        }
        Ok(self.push(
            Tensor::matrix(c_out, t_out, out),
            Op::Conv1d { input, kernel, stride, pad },
        ))
    }

    // ---- composite helpers ------------------------------------------------

    /// x @ w + b with a broadcast bias row.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Smooth clamp of a node to (-bound, bound) via bound * tanh(x / bound).
    /// The identity near zero, so zero-initialized log-scales stay exact.
    pub fn soft_clamp(&mut self, a: NodeId, bound: f64) -> NodeId {
        let scaled = self.scale(a, 1.0 / bound);
        let t = self.tanh(scaled);
        self.scale(t, bound)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Existing gradients are cleared
    /// first, so repeated calls do not accumulate across losses.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(&seed_shape, 1.0));

        for i in (0..=loss.0).rev() {
            let g = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.dispatch_backward(i, &op, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Tensor {
        let shape = self.nodes[id.0].value.shape().to_vec();
        self.nodes[id.0]
            .grad
            .get_or_insert_with(|| Tensor::zeros(&shape))
    }

    fn dispatch_backward(&mut self, i: usize, op: &Op, g: &Tensor) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.grad_buf(a).add_assign(g);
                self.grad_buf(b).add_assign(g);
            }
            Op::AddRow(a, b) => {
                self.grad_buf(a).add_assign(g);
                let m = self.nodes[b.0].value.len();
                let gb = self.grad_buf(b);
                for (idx, &v) in g.data().iter().enumerate() {
                    gb.data_mut()[idx % m] += v;
                }
            }
            Op::Sub(a, b) => {
                self.grad_buf(a).add_assign(g);
                let gb = self.grad_buf(b);
                for (o, &v) in gb.data_mut().iter_mut().zip(g.data()) {
                    *o -= v;
                }
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.data().to_vec();
                let ga = self.grad_buf(a);
                for ((o, &gv), &v) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.iter()) {
                    *o += gv * v;
                }
                let av = self.nodes[a.0].value.data().to_vec();
                let gb = self.grad_buf(b);
                for ((o, &gv), &v) in gb.data_mut().iter_mut().zip(g.data()).zip(av.iter()) {
                    *o += gv * v;
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let m = self.nodes[b.0].value.cols();
                // dA += G . B^T
                {
                    let bdat = self.nodes[b.0].value.data().to_vec();
                    let ga = self.grad_buf(a);
                    let gad = ga.data_mut();
                    for i in 0..n {
                        for l in 0..k {
                            let brow = &bdat[l * m..(l + 1) * m];
                            let grow = &g.data()[i * m..(i + 1) * m];
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += grow[j] * brow[j];
                            }
                            gad[i * k + l] += acc;
                        }
                    }
                }
                // dB += A^T . G
                {
                    let adat = self.nodes[a.0].value.data().to_vec();
                    let gb = self.grad_buf(b);
                    let gbd = gb.data_mut();
                    for i in 0..n {
                        let grow = &g.data()[i * m..(i + 1) * m];
                        for l in 0..k {
                            let av = adat[i * k + l];
                            if av == 0.0 {
                                continue;
                            }
                            let out = &mut gbd[l * m..(l + 1) * m];
                            for j in 0..m {
                                out[j] += av * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = self.grad_buf(a);
                for (o, &v) in ga.data_mut().iter_mut().zip(g.data()) {
                    *o += c * v;
                }
            }
            Op::AddScalar(a, _) => self.grad_buf(a).add_assign(g),
            Op::Exp(a) => {
                let out = self.nodes[i].value.data().to_vec();
                let ga = self.grad_buf(a);
                for ((o, &gv), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.iter()) {
                    *o += gv * y;
                }
            }
            Op::Log(a) => {
                let av = self.nodes[a.0].value.data().to_vec();
                let ga = self.grad_buf(a);
                for ((o, &gv), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(av.iter()) {
                    *o += gv / x;
                }
            }
            Op::Tanh(a) => {
                let out = self.nodes[i].value.data().to_vec();
                let ga = self.grad_buf(a);
                for ((o, &gv), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.iter()) {
                    *o += gv * (1.0 - y * y);
                }
            }
            Op::Relu(a) => {
                let av = self.nodes[a.0].value.data().to_vec();
                let ga = self.grad_buf(a);
                for ((o, &gv), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(av.iter()) {
                    if x > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Softplus(a) => {
                let av = self.nodes[a.0].value.data().to_vec();
                let ga = self.grad_buf(a);
                for ((o, &gv), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(av.iter()) {
                    *o += gv * sigmoid(x);
                }
            }
            Op::Sigmoid(a) => {
                let out = self.nodes[i].value.data().to_vec();
                let ga = self.grad_buf(a);
                for ((o, &gv), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.iter()) {
                    *o += gv * y * (1.0 - y);
                }
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                let ga = self.grad_buf(a);
                for o in ga.data_mut() {
                    *o += gv;
                }
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let gv = g.data()[0] / n;
                let ga = self.grad_buf(a);
                for o in ga.data_mut() {
                    *o += gv;
                }
            }
            Op::SumAxis1(a) => {
                let m = self.nodes[a.0].value.cols();
                let ga = self.grad_buf(a);
                for (idx, o) in ga.data_mut().iter_mut().enumerate() {
                    *o += g.data()[idx / m];
                }
            }
            Op::MeanAxis0(a) => {
                let n = self.nodes[a.0].value.rows();
                if n == 0 {
                    return;
                }
                let m = self.nodes[a.0].value.cols();
                let inv = 1.0 / n as f64;
                let ga = self.grad_buf(a);
                for (idx, o) in ga.data_mut().iter_mut().enumerate() {
                    *o += g.data()[idx % m] * inv;
                }
            }
            Op::RepeatRow(a, n) => {
                let m = self.nodes[a.0].value.len();
                let ga = self.grad_buf(a);
                for r in 0..n {
                    for j in 0..m {
                        ga.data_mut()[j] += g.data()[r * m + j];
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, ma) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let mb = self.nodes[b.0].value.cols();
                let w = ma + mb;
                {
                    let ga = self.grad_buf(a);
                    for i in 0..n {
                        for j in 0..ma {
                            ga.data_mut()[i * ma + j] += g.data()[i * w + j];
                        }
                    }
                }
                let gb = self.grad_buf(b);
                for i in 0..n {
                    for j in 0..mb {
                        gb.data_mut()[i * mb + j] += g.data()[i * w + ma + j];
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].value.len();
                {
                    let ga = self.grad_buf(a);
                    for (o, &v) in ga.data_mut().iter_mut().zip(&g.data()[..na]) {
                        *o += v;
                    }
                }
                let gb = self.grad_buf(b);
                for (o, &v) in gb.data_mut().iter_mut().zip(&g.data()[na..]) {
                    *o += v;
                }
            }
            Op::SliceCols(a, start, end) => {
                let m = self.nodes[a.0].value.cols();
                let w = end - start;
                let ga = self.grad_buf(a);
                for i in 0..g.data().len() / w {
                    for j in 0..w {
                        ga.data_mut()[i * m + start + j] += g.data()[i * w + j];
                    }
                }
            }
            Op::PermuteCols(a, ref perm) => {
                let m = self.nodes[a.0].value.cols();
                let ga = self.grad_buf(a);
                for i in 0..g.data().len() / m {
                    for (j, &p) in perm.iter().enumerate() {
                        ga.data_mut()[i * m + p] += g.data()[i * m + j];
                    }
                }
            }
            Op::Reshape(a, _) => {
                let ga = self.grad_buf(a);
                for (o, &v) in ga.data_mut().iter_mut().zip(g.data()) {
                    *o += v;
                }
            }
            Op::Stack(ref ids) => {
                for (j, &id) in ids.iter().enumerate() {
                    let gv = g.data()[j];
                    self.grad_buf(id).data_mut()[0] += gv;
                }
            }
            Op::GaussianLogPdf { x, mu, sigma } => {
                let xv = self.nodes[x.0].value.data().to_vec();
                let mv = self.nodes[mu.0].value.data().to_vec();
                let sv = self.nodes[sigma.0].value.data().to_vec();
                {
                    let gx = self.grad_buf(x);
                    for (idx, o) in gx.data_mut().iter_mut().enumerate() {
                        *o += g.data()[idx] * (-(xv[idx] - mv[idx]) / (sv[idx] * sv[idx]));
                    }
                }
                {
                    let gm = self.grad_buf(mu);
                    for (idx, o) in gm.data_mut().iter_mut().enumerate() {
                        *o += g.data()[idx] * ((xv[idx] - mv[idx]) / (sv[idx] * sv[idx]));
                    }
                }
                let gs = self.grad_buf(sigma);
                for (idx, o) in gs.data_mut().iter_mut().enumerate() {
                    let d = xv[idx] - mv[idx];
                    let s = sv[idx];
                    *o += g.data()[idx] * (d * d / (s * s * s) - 1.0 / s);
                }
            }
            Op::LogMeanExp(a) => {
                // d/dv_i = softmax(v)_i
                let av = self.nodes[a.0].value.data().to_vec();
                let max = av.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = av.iter().map(|&x| (x - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                let gv = g.data()[0];
                let ga = self.grad_buf(a);
                for (o, e) in ga.data_mut().iter_mut().zip(exps) {
                    *o += gv * e / total;
                }
            }
            Op::Conv1d { input, kernel, stride, pad } => {
                let (c_in, t) = {
                    let v = &self.nodes[input.0].value;
                    (v.rows(), v.cols())
                };
                let ks = self.nodes[kernel.0].value.shape().to_vec();
                let (c_out, k) = (ks[0], ks[2]);
                let t_out = self.nodes[i].value.cols();
                let idata = self.nodes[input.0].value.data().to_vec();
                let kdata = self.nodes[kernel.0].value.data().to_vec();
                {
                    let gi = self.grad_buf(input);
                    let gid = gi.data_mut();
                    for o in 0..c_out {
                        for ot in 0..t_out {
                            let gv = g.data()[o * t_out + ot];
                            if gv == 0.0 {
                                continue;
                            }
                            for ci in 0..c_in {
                                for j in 0..k {
                                    let s = ot * stride + j;
                                    if s < pad || s >= pad + t {
                                        continue;
                                    }
                                    gid[ci * t + (s - pad)] += gv * kdata[(o * c_in + ci) * k + j];
                                }
                            }
                        }
                    }
                }
                let gk = self.grad_buf(kernel);
                let gkd = gk.data_mut();
                for o in 0..c_out {
                    for ot in 0..t_out {
                        let gv = g.data()[o * t_out + ot];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..c_in {
                            for j in 0..k {
                                let s = ot * stride + j;
                                if s < pad || s >= pad + t {
                                    continue;
                                }
                                gkd[(o * c_in + ci) * k + j] += gv * idata[ci * t + (s - pad)];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Compare the reverse-mode gradient of a scalar function against central
/// finite differences, coordinate by coordinate. Returns the maximum
/// relative error with denominator max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf(t.clone());
        let loss = f(&mut g, leaf)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let leaf = g.leaf(x.clone());
    let loss = f(&mut g, leaf)?;
    g.backward(loss)?;
    let analytic = g
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros_like(x));

    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn forward_op_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-3.0, 3.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 3.0]);

        let z = g.leaf(Tensor::scalar(0.0));
        let sp = g.softplus(z);
        assert_relative_eq!(g.value(sp).item(), 2f64.ln(), epsilon = 1e-12);

        let mu = g.scalar(0.0);
        let sigma = g.scalar(1.0);
        let x0 = g.scalar(0.0);
        let lp = g.gaussian_log_pdf(x0, mu, sigma).unwrap();
        assert_relative_eq!(g.value(lp).item(), -0.5 * LN_2PI, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_log_pdf_rejects_nonpositive_sigma() {
        let mut g = Graph::new();
        let x = g.scalar(0.0);
        let mu = g.scalar(0.0);
        let sigma = g.scalar(0.0);
        assert!(matches!(
            g.gaussian_log_pdf(x, mu, sigma),
            Err(Error::NonPositiveSigma { .. })
        ));
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::new();
        let x = g.scalar(3.0);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_relative_eq!(g.grad(x).unwrap().item(), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn backward_gaussian_at_two() {
        let mut g = Graph::new();
        let x = g.scalar(2.0);
        let mu = g.scalar(0.0);
        let sigma = g.scalar(1.0);
        let lp = g.gaussian_log_pdf(x, mu, sigma).unwrap();
        g.backward(lp).unwrap();
        assert_relative_eq!(g.grad(x).unwrap().item(), -2.0, epsilon = 1e-12);
    }

    #[test]
    fn backward_bilinear_matrix() {
        // loss = sum(W . v), W 2x2 of ones, v = (1, 2)^T => dL/dW = [[1,2],[1,2]]
        let mut g = Graph::new();
        let w = g.leaf(Tensor::matrix(2, 2, vec![1.0; 4]));
        let v = g.leaf(Tensor::matrix(2, 1, vec![1.0, 2.0]));
        let wv = g.matmul(w, v).unwrap();
        let loss = g.sum(wv);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_resets_between_calls() {
        let mut g = Graph::new();
        let x = g.scalar(3.0);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        // reset-first: no accumulation across calls
        assert_relative_eq!(g.grad(x).unwrap().item(), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn grad_check_squared_norm() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5]);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    /// Every registered op, checked against central differences on random
    /// inputs. The weighted-sum wrapper makes the loss scalar while keeping
    /// per-element gradients distinguishable.
    #[test]
    fn grad_check_all_ops() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for trial in 0..20 {
            let n = 2 + (trial % 3);
            let m = 3;
            let randvec = |rng: &mut ChaCha12Rng, len: usize, lo: f64, hi: f64| -> Vec<f64> {
                (0..len).map(|_| rng.gen_range(lo..hi)).collect()
            };
            let a = Tensor::matrix(n, m, randvec(&mut rng, n * m, -2.0, 2.0));
            let b = Tensor::matrix(n, m, randvec(&mut rng, n * m, 0.2, 2.0));
            let w = Tensor::matrix(m, 2, randvec(&mut rng, m * 2, -1.0, 1.0));
            let weights = Tensor::matrix(n, m, randvec(&mut rng, n * m, -1.0, 1.0));

            let cases: Vec<(&str, Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>)> = vec![
                ("add", {
                    let b = b.clone();
                    let wt = weights.clone();
                    Box::new(move |g, x| {
                        let bb = g.leaf(b.clone());
                        let s = g.add(x, bb)?;
                        weighted_sum(g, s, &wt)
                    })
                }),
                ("sub", {
                    let b = b.clone();
                    let wt = weights.clone();
                    Box::new(move |g, x| {
                        let bb = g.leaf(b.clone());
                        let s = g.sub(x, bb)?;
                        weighted_sum(g, s, &wt)
                    })
                }),
                ("mul", {
                    let b = b.clone();
                    let wt = weights.clone();
                    Box::new(move |g, x| {
                        let bb = g.leaf(b.clone());
                        let s = g.mul(x, bb)?;
                        weighted_sum(g, s, &wt)
                    })
                }),
                ("matmul", {
                    let w = w.clone();
                    Box::new(move |g, x| {
                        let ww = g.leaf(w.clone());
                        let s = g.matmul(x, ww)?;
                        Ok(g.sum(s))
                    })
                }),
                ("exp", Box::new(|g, x| {
                    let s = g.exp(x);
                    Ok(g.sum(s))
                })),
                ("log", {
                    Box::new(move |g, x| {
                        // shift inputs positive before log
                        let s = g.add_scalar(x, 5.0);
                        let l = g.log(s);
                        Ok(g.sum(l))
                    })
                }),
                ("tanh", Box::new(|g, x| {
                    let s = g.tanh(x);
                    Ok(g.sum(s))
                })),
                ("softplus", Box::new(|g, x| {
                    let s = g.softplus(x);
                    Ok(g.sum(s))
                })),
                ("sigmoid", Box::new(|g, x| {
                    let s = g.sigmoid(x);
                    Ok(g.sum(s))
                })),
                ("mean", Box::new(|g, x| g.mean(x))),
                ("sum_axis1", Box::new(|g, x| {
                    let s = g.sum_axis1(x)?;
                    let sq = g.mul(s, s)?;
                    Ok(g.sum(sq))
                })),
                ("mean_axis0", Box::new(|g, x| {
                    let s = g.mean_axis0(x)?;
                    let sq = g.mul(s, s)?;
                    Ok(g.sum(sq))
                })),
                ("slice_cols", Box::new(|g, x| {
                    let s = g.slice_cols(x, 1, 3)?;
                    let sq = g.mul(s, s)?;
                    Ok(g.sum(sq))
                })),
                ("permute_cols", Box::new(|g, x| {
                    let s = g.permute_cols(x, &[2, 0, 1])?;
                    let e = g.exp(s);
                    Ok(g.sum(e))
                })),
                ("concat_cols", {
                    let b = b.clone();
                    Box::new(move |g, x| {
                        let bb = g.leaf(b.clone());
                        let s = g.concat_cols(x, bb)?;
                        let sq = g.mul(s, s)?;
                        Ok(g.sum(sq))
                    })
                }),
                ("concat_rows", {
                    let b = b.clone();
                    Box::new(move |g, x| {
                        let bb = g.leaf(b.clone());
                        let s = g.concat_rows(x, bb)?;
                        let t = g.tanh(s);
                        Ok(g.sum(t))
                    })
                }),
                ("gaussian_log_pdf_mu", {
                    let b = b.clone();
                    Box::new(move |g, x| {
                        let sigma = g.leaf(b.clone());
                        let obs = g.leaf(Tensor::zeros(&[x_rows(g, x), 3]));
                        let lp = g.gaussian_log_pdf(obs, x, sigma)?;
                        Ok(g.sum(lp))
                    })
                }),
                ("gaussian_log_pdf_sigma", {
                    let a = a.clone();
                    Box::new(move |g, x| {
                        let x_pos = g.add_scalar(x, 3.0); // sigma > 0
                        let mu = g.leaf(Tensor::zeros(&[x_rows(g, x), 3]));
                        let obs = g.leaf(a.clone());
                        let lp = g.gaussian_log_pdf(obs, mu, x_pos)?;
                        Ok(g.sum(lp))
                    })
                }),
                ("log_mean_exp", Box::new(|g, x| {
                    let flat_len = g.value(x).len();
                    let v = g.reshape(x, &[flat_len])?;
                    g.log_mean_exp(v)
                })),
                ("repeat_row", Box::new(|g, x| {
                    let pooled = g.mean_axis0(x)?;
                    let rep = g.repeat_row(pooled, 4)?;
                    let e = g.tanh(rep);
                    Ok(g.sum(e))
                })),
                ("conv1d_input_side", Box::new(|g, x| {
                    let flat_len = g.value(x).len();
                    let series = g.reshape(x, &[1, flat_len])?;
                    let kern = g.leaf(Tensor::new(vec![2, 1, 3], vec![0.5, -1.0, 0.25, 0.3, 0.2, -0.7]));
                    let out = g.conv1d(series, kern, 2, 1)?;
                    let sq = g.mul(out, out)?;
                    Ok(g.sum(sq))
                })),
                ("conv1d_kernel_side", Box::new(|g, x| {
                    let flat_len = g.value(x).len();
                    let flat = g.reshape(x, &[1, flat_len])?;
                    let first6 = g.slice_cols(flat, 0, 6)?;
                    let kern = g.reshape(first6, &[2, 1, 3])?;
                    let series = g.leaf(Tensor::matrix(
                        1,
                        8,
                        vec![0.4, -0.2, 1.1, 0.0, -0.9, 0.6, 0.3, -1.4],
                    ));
                    let out = g.conv1d(series, kern, 1, 2)?;
                    let sq = g.mul(out, out)?;
                    Ok(g.sum(sq))
                })),
            ];

            for (name, f) in &cases {
                // keep relu-style kinks away from the sampled points
                let x = if *name == "log" { &b } else { &a };
                let err = grad_check(f, x, 1e-5).unwrap();
                assert!(err < 1e-4, "op {name} trial {trial}: rel err {err}");
            }

            // relu separately, with inputs bounded away from the kink
            let mut ar = a.clone();
            for v in ar.data_mut() {
                if v.abs() < 0.05 {
                    *v += 0.1;
                }
            }
            let err = grad_check(
                |g, x| {
                    let r = g.relu(x);
                    Ok(g.sum(r))
                },
                &ar,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "op relu trial {trial}: rel err {err}");
        }
    }

    fn x_rows(g: &Graph, x: NodeId) -> usize {
        g.value(x).rows()
    }

    fn weighted_sum(g: &mut Graph, s: NodeId, weights: &Tensor) -> Result<NodeId> {
        let w = g.leaf(weights.clone());
        let p = g.mul(s, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn log_mean_exp_node_matches_plain() {
        let v = vec![0.3, -2.0, 1.7, 0.0];
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(v.clone()));
        let lme = g.log_mean_exp(x).unwrap();
        assert_relative_eq!(
            g.value(lme).item(),
            crate::tensor::log_mean_exp(&v).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn empty_context_pools_to_zeros() {
        let mut g = Graph::new();
        let empty = g.leaf(Tensor::matrix(0, 4, vec![]));
        let pooled = g.mean_axis0(empty).unwrap();
        assert_eq!(g.value(pooled).data(), &[0.0; 4]);
    }
}
