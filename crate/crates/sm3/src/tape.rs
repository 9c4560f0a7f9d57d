//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive operation during a forward pass.
//! [`Tape::backward`] walks the recording in reverse and accumulates
//! gradients into per-node buffers. Graphs here are small (one training
//! step each), so an explicit tape is the simplest correct scheme.
//!
//! All tape math is f64.

use crate::tensor::{Tensor, NORM_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C = A B
    MatMul(ValueId, ValueId),
    /// C = A Bᵀ
    MatMulNt(ValueId, ValueId),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    /// (m,n) + row-broadcast (n)
    AddBias(ValueId, ValueId),
    Scale(ValueId, f64),
    Relu(ValueId),
    Tanh(ValueId),
    /// L2-normalize each row, norms clamped below at NORM_EPS.
    RowNormalize(ValueId),
    /// (m,n) -> (m): log Σ_j exp(a_ij), row-max stabilized.
    LogSumExpRows(ValueId),
    SoftmaxRows(ValueId),
    LogSoftmaxRows(ValueId),
    /// (m,m) -> (m): main diagonal.
    Diag(ValueId),
    /// (m,n) -> (m): picks a[i, idx[i]].
    GatherCols(ValueId, Vec<usize>),
    ConcatCols(ValueId, ValueId),
    MeanAll(ValueId),
    SumAll(ValueId),
    /// Per-row layer norm with learnable gain/shift: (x, gamma, beta).
    LayerNormRows(ValueId, ValueId, ValueId),
    /// Contiguous row range of a matrix.
    SliceRows(ValueId, usize, usize),
    /// Vertical stack of equal-width matrices.
    ConcatRows(Vec<ValueId>),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
}

/// Records a forward computation and evaluates its reverse-mode gradient.
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> ValueId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the last `backward` call; zeros if the node
    /// was never reached.
    pub fn grad(&self, id: ValueId) -> Tensor {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape().to_vec()),
        }
    }

    /// Differentiable input.
    pub fn var(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input (data, masks).
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data()[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data()[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out).unwrap(), needs)
    }

    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, n, k2) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += ta.data()[i * k + p] * tb.data()[j * k + p];
                }
                out[i * n + j] = s;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMulNt(a, b), Tensor::matrix(m, n, out).unwrap(), needs)
    }

    fn zip(&mut self, a: ValueId, b: ValueId, f: impl Fn(f64, f64) -> f64, op: Op) -> ValueId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(op, Tensor::new(shape, data).unwrap(), needs)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_bias(&mut self, a: ValueId, bias: ValueId) -> ValueId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let (m, n) = (ta.rows(), ta.cols());
        assert_eq!(tb.len(), n, "bias length {} vs {} cols", tb.len(), n);
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += tb.data()[j];
            }
        }
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(bias);
        self.push(Op::AddBias(a, bias), Tensor::new(shape, data).unwrap(), needs)
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x * c).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), Tensor::new(shape, data).unwrap(), needs)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x.max(0.0)).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        self.push(Op::Relu(a), Tensor::new(shape, data).unwrap(), needs)
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x.tanh()).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        self.push(Op::Tanh(a), Tensor::new(shape, data).unwrap(), needs)
    }

    pub fn row_normalize(&mut self, a: ValueId) -> ValueId {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = ta.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            for j in 0..n {
                data[i * n + j] = row[j] / norm;
            }
        }
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        self.push(Op::RowNormalize(a), Tensor::new(shape, data).unwrap(), needs)
    }

    pub fn logsumexp_rows(&mut self, a: ValueId) -> ValueId {
        let ta = &self.nodes[a.0].value;
        let m = ta.rows();
        let mut data = vec![0.0; m];
        for i in 0..m {
            let row = ta.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            data[i] = mx + s.ln();
        }
        let needs = self.needs(a);
        self.push(Op::LogSumExpRows(a), Tensor::vector(data), needs)
    }

    fn softmax_values(ta: &Tensor) -> Tensor {
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = ta.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        Tensor::new(ta.shape().to_vec(), data).unwrap()
    }

    pub fn softmax_rows(&mut self, a: ValueId) -> ValueId {
        let out = Self::softmax_values(&self.nodes[a.0].value);
        let needs = self.needs(a);
        self.push(Op::SoftmaxRows(a), out, needs)
    }

    pub fn log_softmax_rows(&mut self, a: ValueId) -> ValueId {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = ta.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                data[i * n + j] = row[j] - lse;
            }
        }
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        self.push(Op::LogSoftmaxRows(a), Tensor::new(shape, data).unwrap(), needs)
    }

    pub fn diag(&mut self, a: ValueId) -> ValueId {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        assert_eq!(m, n, "diag needs a square matrix");
        let data = (0..m).map(|i| ta.get2(i, i)).collect();
        let needs = self.needs(a);
        self.push(Op::Diag(a), Tensor::vector(data), needs)
    }

    pub fn gather_cols(&mut self, a: ValueId, idx: Vec<usize>) -> ValueId {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        assert_eq!(idx.len(), m, "gather_cols index count");
        let data = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < n, "gather_cols index {j} out of {n}");
                ta.get2(i, j)
            })
            .collect();
        let needs = self.needs(a);
        self.push(Op::GatherCols(a, idx), Tensor::vector(data), needs)
    }

    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let m = ta.rows();
        assert_eq!(m, tb.rows(), "concat_cols row mismatch");
        let (na, nb) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Op::ConcatCols(a, b),
            Tensor::matrix(m, na + nb, data).unwrap(),
            needs,
        )
    }

    pub fn slice_rows(&mut self, a: ValueId, start: usize, count: usize) -> ValueId {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        assert!(start + count <= m, "slice_rows {start}+{count} out of {m}");
        let data = ta.data()[start * n..(start + count) * n].to_vec();
        let needs = self.needs(a);
        self.push(
            Op::SliceRows(a, start, count),
            Tensor::matrix(count, n, data).unwrap(),
            needs,
        )
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let n = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = &self.nodes[p.0].value;
            assert_eq!(tp.cols(), n, "concat_rows width mismatch");
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::matrix(rows, n, data).unwrap(),
            needs,
        )
    }

    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let ta = &self.nodes[a.0].value;
        let v = ta.data().iter().sum::<f64>() / ta.len() as f64;
        let needs = self.needs(a);
        self.push(Op::MeanAll(a), Tensor::scalar(v), needs)
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let ta = &self.nodes[a.0].value;
        let v = ta.data().iter().sum::<f64>();
        let needs = self.needs(a);
        self.push(Op::SumAll(a), Tensor::scalar(v), needs)
    }

    pub fn layer_norm_rows(&mut self, a: ValueId, gamma: ValueId, beta: ValueId) -> ValueId {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        let tg = &self.nodes[gamma.0].value;
        let tb = &self.nodes[beta.0].value;
        assert_eq!(tg.len(), n, "layer_norm gamma length");
        assert_eq!(tb.len(), n, "layer_norm beta length");
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = ta.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(gamma) || self.needs(beta);
        self.push(
            Op::LayerNormRows(a, gamma, beta),
            Tensor::new(shape, data).unwrap(),
            needs,
        )
    }

    fn accum(&mut self, id: ValueId, delta: &Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += di;
                }
            }
            None => node.grad = Some(delta.clone()),
        }
    }

    /// Reverse pass from a scalar output; seeds d(out)/d(out) = 1.
    pub fn backward(&mut self, out: ValueId) {
        assert_eq!(self.nodes[out.0].value.len(), 1, "backward needs a scalar");
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[out.0].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=out.0).rev() {
            let Some(grad) = self.nodes[idx].grad.clone() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    // dA = dC Bᵀ ; dB = Aᵀ dC
                    let (ta, tb) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if self.needs(a) {
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += grad.data()[i * n + j] * tb.data()[p * n + j];
                                }
                                da[i * k + p] = s;
                            }
                        }
                        self.accum(a, &Tensor::matrix(m, k, da).unwrap());
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; k * n];
                        for p in 0..k {
                            for i in 0..m {
                                let av = ta.data()[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] += av * grad.data()[i * n + j];
                                }
                            }
                        }
                        self.accum(b, &Tensor::matrix(k, n, db).unwrap());
                    }
                }
                Op::MatMulNt(a, b) => {
                    // C = A Bᵀ: dA = dC B ; dB = dCᵀ A
                    let (ta, tb) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    if self.needs(a) {
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gv = grad.data()[i * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    da[i * k + p] += gv * tb.data()[j * k + p];
                                }
                            }
                        }
                        self.accum(a, &Tensor::matrix(m, k, da).unwrap());
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; n * k];
                        for j in 0..n {
                            for i in 0..m {
                                let gv = grad.data()[i * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    db[j * k + p] += gv * ta.data()[i * k + p];
                                }
                            }
                        }
                        self.accum(b, &Tensor::matrix(n, k, db).unwrap());
                    }
                }
                Op::Add(a, b) => {
                    self.accum(a, &grad);
                    self.accum(b, &grad);
                }
                Op::Sub(a, b) => {
                    self.accum(a, &grad);
                    let neg = Tensor::new(
                        grad.shape().to_vec(),
                        grad.data().iter().map(|x| -x).collect(),
                    )
                    .unwrap();
                    self.accum(b, &neg);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
                    if self.needs(a) {
                        let da = Tensor::new(
                            grad.shape().to_vec(),
                            grad.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect(),
                        )
                        .unwrap();
                        self.accum(a, &da);
                    }
                    if self.needs(b) {
                        let db = Tensor::new(
                            grad.shape().to_vec(),
                            grad.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect(),
                        )
                        .unwrap();
                        self.accum(b, &db);
                    }
                }
                Op::AddBias(a, bias) => {
                    self.accum(a, &grad);
                    if self.needs(bias) {
                        let n = self.nodes[bias.0].value.len();
                        let m = grad.len() / n;
                        let mut db = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                db[j] += grad.data()[i * n + j];
                            }
                        }
                        self.accum(bias, &Tensor::vector(db));
                    }
                }
                Op::Scale(a, c) => {
                    let da = Tensor::new(
                        grad.shape().to_vec(),
                        grad.data().iter().map(|x| x * c).collect(),
                    )
                    .unwrap();
                    self.accum(a, &da);
                }
                Op::Relu(a) => {
                    let ta = self.nodes[a.0].value.clone();
                    let da = Tensor::new(
                        grad.shape().to_vec(),
                        grad.data()
                            .iter()
                            .zip(ta.data())
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    )
                    .unwrap();
                    self.accum(a, &da);
                }
                Op::Tanh(a) => {
                    let ty = self.nodes[idx].value.clone();
                    let da = Tensor::new(
                        grad.shape().to_vec(),
                        grad.data()
                            .iter()
                            .zip(ty.data())
                            .map(|(g, y)| g * (1.0 - y * y))
                            .collect(),
                    )
                    .unwrap();
                    self.accum(a, &da);
                }
                Op::RowNormalize(a) => {
                    let ta = self.nodes[a.0].value.clone();
                    let ty = self.nodes[idx].value.clone();
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let xrow = ta.row(i);
                        let yrow = ty.row(i);
                        let grow = &grad.data()[i * n..(i + 1) * n];
                        let norm = xrow.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if norm < NORM_EPS {
                            // clamped branch: y = x / NORM_EPS
                            for j in 0..n {
                                da[i * n + j] = grow[j] / NORM_EPS;
                            }
                        } else {
                            let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                            for j in 0..n {
                                da[i * n + j] = (grow[j] - yrow[j] * dot) / norm;
                            }
                        }
                    }
                    self.accum(a, &Tensor::matrix(m, n, da).unwrap());
                }
                Op::LogSumExpRows(a) => {
                    let sm = Self::softmax_values(&self.nodes[a.0].value);
                    let (m, n) = (sm.rows(), sm.cols());
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let g = grad.data()[i];
                        for j in 0..n {
                            da[i * n + j] = g * sm.get2(i, j);
                        }
                    }
                    self.accum(a, &Tensor::matrix(m, n, da).unwrap());
                }
                Op::SoftmaxRows(a) => {
                    let ty = self.nodes[idx].value.clone();
                    let (m, n) = (ty.rows(), ty.cols());
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let yrow = ty.row(i);
                        let grow = &grad.data()[i * n..(i + 1) * n];
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            da[i * n + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    self.accum(a, &Tensor::matrix(m, n, da).unwrap());
                }
                Op::LogSoftmaxRows(a) => {
                    let sm = Self::softmax_values(&self.nodes[a.0].value);
                    let (m, n) = (sm.rows(), sm.cols());
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let grow = &grad.data()[i * n..(i + 1) * n];
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..n {
                            da[i * n + j] = grow[j] - sm.get2(i, j) * gsum;
                        }
                    }
                    self.accum(a, &Tensor::matrix(m, n, da).unwrap());
                }
                Op::Diag(a) => {
                    let m = grad.len();
                    let mut da = vec![0.0; m * m];
                    for i in 0..m {
                        da[i * m + i] = grad.data()[i];
                    }
                    self.accum(a, &Tensor::matrix(m, m, da).unwrap());
                }
                Op::GatherCols(a, idx_v) => {
                    let ta = &self.nodes[a.0].value;
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut da = vec![0.0; m * n];
                    for (i, &j) in idx_v.iter().enumerate() {
                        da[i * n + j] = grad.data()[i];
                    }
                    self.accum(a, &Tensor::matrix(m, n, da).unwrap());
                }
                Op::ConcatCols(a, b) => {
                    let (na, nb) = (self.nodes[a.0].value.cols(), self.nodes[b.0].value.cols());
                    let m = self.nodes[a.0].value.rows();
                    let mut da = vec![0.0; m * na];
                    let mut db = vec![0.0; m * nb];
                    for i in 0..m {
                        let grow = &grad.data()[i * (na + nb)..(i + 1) * (na + nb)];
                        da[i * na..(i + 1) * na].copy_from_slice(&grow[..na]);
                        db[i * nb..(i + 1) * nb].copy_from_slice(&grow[na..]);
                    }
                    self.accum(a, &Tensor::matrix(m, na, da).unwrap());
                    self.accum(b, &Tensor::matrix(m, nb, db).unwrap());
                }
                Op::SliceRows(a, start, count) => {
                    let ta = &self.nodes[a.0].value;
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut da = vec![0.0; m * n];
                    da[start * n..(start + count) * n].copy_from_slice(grad.data());
                    self.accum(a, &Tensor::matrix(m, n, da).unwrap());
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let tp = &self.nodes[p.0].value;
                        let (r, n) = (tp.rows(), tp.cols());
                        let dp = grad.data()[offset..offset + r * n].to_vec();
                        offset += r * n;
                        self.accum(p, &Tensor::matrix(r, n, dp).unwrap());
                    }
                }
                Op::MeanAll(a) => {
                    let ta = &self.nodes[a.0].value;
                    let g = grad.item() / ta.len() as f64;
                    let da = Tensor::new(ta.shape().to_vec(), vec![g; ta.len()]).unwrap();
                    self.accum(a, &da);
                }
                Op::SumAll(a) => {
                    let ta = &self.nodes[a.0].value;
                    let g = grad.item();
                    let da = Tensor::new(ta.shape().to_vec(), vec![g; ta.len()]).unwrap();
                    self.accum(a, &da);
                }
                Op::LayerNormRows(a, gamma, beta) => {
                    let ta = self.nodes[a.0].value.clone();
                    let tg = self.nodes[gamma.0].value.clone();
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut da = vec![0.0; m * n];
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    for i in 0..m {
                        let row = ta.row(i);
                        let grow = &grad.data()[i * n..(i + 1) * n];
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|x| (x - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            grow.iter().zip(tg.data()).map(|(g, gm)| g * gm).collect();
                        let mean_dx = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dxx =
                            dxhat.iter().zip(&xhat).map(|(d, x)| d * x).sum::<f64>() / n as f64;
                        for j in 0..n {
                            da[i * n + j] = inv * (dxhat[j] - mean_dx - xhat[j] * mean_dxx);
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                        }
                    }
                    self.accum(a, &Tensor::matrix(m, n, da).unwrap());
                    self.accum(gamma, &Tensor::vector(dgamma));
                    self.accum(beta, &Tensor::vector(dbeta));
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Softmax with temperature over a plain vector (no tape).
///
/// Shift-invariant; entries positive and summing to 1.
pub fn softmax(v: &[f64], temperature: f64) -> Vec<f64> {
    assert!(temperature > 0.0, "softmax temperature must be positive");
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| ((x - mx) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let y = tape.mul(x, x);
        tape.backward(y);
        assert_eq!(tape.value(y).item(), 9.0);
        assert_eq!(tape.grad(x).item(), 6.0);
    }

    #[test]
    fn bilinear_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let y = tape.var(Tensor::scalar(3.0));
        let z = tape.mul(x, y);
        tape.backward(z);
        assert_eq!(tape.grad(x).item(), 3.0);
        assert_eq!(tape.grad(y).item(), 2.0);
    }

    #[test]
    fn constant_gets_no_grad() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(5.0));
        let x = tape.var(Tensor::scalar(2.0));
        let y = tape.mul(c, x);
        tape.backward(y);
        assert_eq!(tape.grad(x).item(), 5.0);
        assert_eq!(tape.grad(c).item(), 0.0);
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        assert_eq!(softmax(&[0.0, 0.0], 1.0), vec![0.5, 0.5]);
        let p = softmax(&[3f64.ln(), 0.0], 1.0);
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
        let q = softmax(&[5.0, 5.0, 5.0], 1.0);
        for v in q {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let a = softmax(&[0.3, -1.0, 2.0], 0.7);
        let b = softmax(&[0.3 + 10.0, -1.0 + 10.0, 2.0 + 10.0], 0.7);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        let s: f64 = a.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}
