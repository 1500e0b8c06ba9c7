//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! Every operation appends a node holding its forward value. Calling
//! [`Tape::backward`] walks the nodes in reverse and accumulates adjoints
//! into each input. The tape is single use and owned by one evaluation;
//! concurrent evaluations each build their own.

use super::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise scalar functions.
#[derive(Clone, Copy, Debug)]
pub enum Unary {
    /// `x · σ(x)`, also known as swish-1 / SiLU.
    Swish,
    Exp,
    Ln,
    Square,
    /// Hand-supplied function and derivative.
    Custom { f: fn(f64) -> f64, df: fn(f64) -> f64 },
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Swish => x * sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Square => x * x,
            Unary::Custom { f, .. } => f(x),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Custom { df, .. } => df(x),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Swish => "swish",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Square => "square",
            Unary::Custom { .. } => "custom",
        }
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

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddConst(Var),
    MatMul(Var, Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Conv2d { x: Var, w: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Unary(Var, Unary),
    BatchNorm { x: Var, x_hat: Vec<f64>, inv_std: Vec<f64> },
    FixedNorm { x: Var, inv_std: Vec<f64> },
    PairwiseSqDist(Var, Var),
    PairwiseNegCos(Var, Var),
    CrossEntropyRows { logits: Var, labels: Vec<usize>, weights: Vec<f64> },
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    SumSquares(Var),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    ConcatRows(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::AddConst(..) => "add_const",
            Op::MatMul(..) => "matmul",
            Op::AddChannel(..) => "add_channel",
            Op::MulChannel(..) => "mul_channel",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Unary(_, u) => u.name(),
            Op::BatchNorm { .. } => "batch_norm",
            Op::FixedNorm { .. } => "fixed_norm",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::PairwiseNegCos(..) => "pairwise_neg_cos",
            Op::CrossEntropyRows { .. } => "cross_entropy_rows",
            Op::Sum(..) => "sum",
            Op::WeightedSum(..) => "weighted_sum",
            Op::SumSquares(..) => "sum_squares",
            Op::SliceRows { .. } => "slice_rows",
            Op::Reshape(..) => "reshape",
            Op::ConcatRows(..) => "concat_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-channel batch statistics recorded by [`Tape::batch_norm`].
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Operation tape. Build values with the methods below, then call
/// [`Tape::backward`] on a scalar output.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<(usize, &'static str)>,
}

/// Adjoints for every node reachable from the differentiated output.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn channel_dims(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "channel op needs rank >= 2, got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation name of the first node whose value was not finite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite.map(|(_, n)| n)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "expected a scalar node, got shape {:?}", t.shape());
        t.data()[0]
    }

    /// Leaf node. Parameters and fixed inputs are both leaves; gradients are
    /// available for either after [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let t = Tensor::new(x.shape().to_vec(), data);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect());
        self.push(t, Op::Scale(a, s))
    }

    /// Multiplies every entry of `a` by the single-entry node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar_value(s);
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * k).collect());
        self.push(t, Op::ScaleBy(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + c).collect());
        self.push(t, Op::AddConst(a))
    }

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape().len(), 2, "matmul lhs must be a matrix");
        assert_eq!(y.shape().len(), 2, "matmul rhs must be a matrix");
        let (m, k) = (x.shape()[0], x.shape()[1]);
        let (k2, n) = (y.shape()[0], y.shape()[1]);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, x.data(), false, y.data(), false, 0.0, &mut out);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b))
    }

    /// Adds `v[c]` to every entry of channel `c` of `x[N, C, ...]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let (xs, vs) = (self.value(x), self.value(v));
        let (n, c, s) = channel_dims(xs.shape());
        assert_eq!(vs.len(), c, "channel vector length mismatch");
        let mut data = xs.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let b = vs.data()[ci];
                let base = (ni * c + ci) * s;
                for d in &mut data[base..base + s] {
                    *d += b;
                }
            }
        }
        let t = Tensor::new(xs.shape().to_vec(), data);
        self.push(t, Op::AddChannel(x, v))
    }

    /// Multiplies channel `c` of `x[N, C, ...]` by `v[c]`.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Var {
        let (xs, vs) = (self.value(x), self.value(v));
        let (n, c, s) = channel_dims(xs.shape());
        assert_eq!(vs.len(), c, "channel vector length mismatch");
        let mut data = xs.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let g = vs.data()[ci];
                let base = (ni * c + ci) * s;
                for d in &mut data[base..base + s] {
                    *d *= g;
                }
            }
        }
        let t = Tensor::new(xs.shape().to_vec(), data);
        self.push(t, Op::MulChannel(x, v))
    }

    /// Same-size convolution, stride 1, zero padding `k/2`, odd square kernels.
    /// `x[N,Cin,H,W]`, `w[Cout,Cin,k,k]` → `[N,Cout,H,W]`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Var {
        let (xs, ws) = (self.value(x), self.value(w));
        let &[n, cin, h, wd] = xs.shape() else { panic!("conv2d input must be rank 4") };
        let &[cout, cin2, kh, kw] = ws.shape() else { panic!("conv2d kernel must be rank 4") };
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        assert!(kh == kw && kh % 2 == 1, "conv2d expects odd square kernels");
        let hw = h * wd;
        let kk = cin * kh * kw;
        let mut out = vec![0.0; n * cout * hw];
        let mut col = vec![0.0; kk * hw];
        for ni in 0..n {
            im2col(&xs.data()[ni * cin * hw..(ni + 1) * cin * hw], cin, h, wd, kh, &mut col);
            gemm(cout, kk, hw, ws.data(), false, &col, false, 0.0, &mut out[ni * cout * hw..(ni + 1) * cout * hw]);
        }
        self.push(Tensor::new(vec![n, cout, h, wd], out), Op::Conv2d { x, w })
    }

    /// 2×2 max pooling with stride 2 over `[N,C,H,W]`; odd trailing rows and
    /// columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let &[n, c, h, w] = xs.shape() else { panic!("max_pool2 input must be rank 4") };
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh > 0 && ow > 0, "max_pool2 input too small");
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let d = xs.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + (2 * i) * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(Tensor::new(vec![n, c, oh, ow], out), Op::MaxPool2 { x, argmax })
    }

    /// `[N,C,...] → [N,C]` mean over trailing axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let (n, c, s) = channel_dims(xs.shape());
        let d = xs.data();
        let out = (0..n * c).map(|p| d[p * s..(p + 1) * s].iter().sum::<f64>() / s as f64).collect();
        self.push(Tensor::matrix(n, c, out), Op::GlobalAvgPool(x))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let xs = self.value(x);
        let t = Tensor::new(xs.shape().to_vec(), xs.data().iter().map(|&v| f.apply(v)).collect());
        self.push(t, Op::Unary(x, f))
    }

    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Swish)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    /// Standardizes each channel of `x[N,C,...]` with batch statistics taken
    /// over the batch and trailing axes. Returns the normalized node and the
    /// statistics used (biased variance).
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> (Var, ChannelStats) {
        let xs = self.value(x);
        let (n, c, s) = channel_dims(xs.shape());
        let m = (n * s) as f64;
        let d = xs.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                mean[ci] += d[base..base + s].iter().sum::<f64>();
            }
        }
        for mu in &mut mean {
            *mu /= m;
        }
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                var[ci] += d[base..base + s].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut x_hat = vec![0.0; d.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                for k in base..base + s {
                    x_hat[k] = (d[k] - mean[ci]) * inv_std[ci];
                }
            }
        }
        let shape = xs.shape().to_vec();
        let var_out = self.push(
            Tensor::new(shape, x_hat.clone()),
            Op::BatchNorm { x, x_hat, inv_std },
        );
        (var_out, ChannelStats { mean, var })
    }

    /// Standardizes each channel with externally supplied statistics, which
    /// are treated as constants.
    pub fn fixed_norm(&mut self, x: Var, stats: &ChannelStats, eps: f64) -> Var {
        let xs = self.value(x);
        let (n, c, s) = channel_dims(xs.shape());
        assert_eq!(stats.mean.len(), c);
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let d = xs.data();
        let mut out = vec![0.0; d.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                for k in base..base + s {
                    out[k] = (d[k] - stats.mean[ci]) * inv_std[ci];
                }
            }
        }
        let t = Tensor::new(xs.shape().to_vec(), out);
        self.push(t, Op::FixedNorm { x, inv_std })
    }

    /// `D[i,j] = Σ_d (z[i,d] − c[j,d])²`.
    pub fn pairwise_sq_dist(&mut self, z: Var, c: Var) -> Var {
        let (zs, cs) = (self.value(z), self.value(c));
        let (q, dz) = (zs.rows(), zs.row_len());
        let k = cs.rows();
        assert_eq!(cs.row_len(), dz, "embedding dimensions differ");
        let mut out = vec![0.0; q * k];
        for i in 0..q {
            for j in 0..k {
                out[i * k + j] = zs.row(i).iter().zip(cs.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        self.push(Tensor::matrix(q, k, out), Op::PairwiseSqDist(z, c))
    }

    /// `D[i,j] = −(z_i · c_j) / (‖z_i‖ ‖c_j‖)`.
    pub fn pairwise_neg_cos(&mut self, z: Var, c: Var) -> Var {
        let (zs, cs) = (self.value(z), self.value(c));
        let (q, dz) = (zs.rows(), zs.row_len());
        let k = cs.rows();
        assert_eq!(cs.row_len(), dz, "embedding dimensions differ");
        let mut out = vec![0.0; q * k];
        for i in 0..q {
            let nz = norm(zs.row(i));
            for j in 0..k {
                let nc = norm(cs.row(j));
                out[i * k + j] = -dot(zs.row(i), cs.row(j)) / (nz * nc);
            }
        }
        self.push(Tensor::matrix(q, k, out), Op::PairwiseNegCos(z, c))
    }

    /// `Σ_i w_i [logsumexp(l_i) − l_{i, y_i}]` for logits `l[n, K]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Var {
        let ls = self.value(logits);
        let (n, k) = (ls.rows(), ls.row_len());
        assert_eq!(labels.len(), n);
        assert_eq!(weights.len(), n);
        let mut total = 0.0;
        for i in 0..n {
            assert!(labels[i] < k, "label {} out of range for {k} classes", labels[i]);
            if weights[i] == 0.0 {
                continue;
            }
            let row = ls.row(i);
            total += weights[i] * (log_sum_exp(row) - row[labels[i]]);
        }
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropyRows { logits, labels: labels.to_vec(), weights: weights.to_vec() },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let xs = self.value(x);
        assert_eq!(xs.len(), weights.len());
        let s = xs.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum(x, weights))
    }

    /// Selects one flat entry as a scalar node.
    pub fn select(&mut self, x: Var, index: usize) -> Var {
        let mut w = vec![0.0; self.value(x).len()];
        w[index] = 1.0;
        self.weighted_sum(x, w)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xs = self.value(x);
        assert!(start <= end && end <= xs.rows());
        let w = xs.row_len();
        let mut shape = xs.shape().to_vec();
        shape[0] = end - start;
        let t = Tensor::new(shape, xs.data()[start * w..end * w].to_vec());
        self.push(t, Op::SliceRows { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self.value(x).clone().reshape(shape);
        self.push(t, Op::Reshape(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::stack_rows(&ts);
        self.push(t, Op::ConcatRows(parts.to_vec()))
    }

    /// Differentiates the scalar node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(self.value(output).shape().to_vec(), 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, map(g, |v| -v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, zip(g, y, |p, q| p * q));
                accumulate(grads, *b, zip(g, x, |p, q| p * q));
            }
            Op::Scale(a, s) => accumulate(grads, *a, map(g, |v| v * s)),
            Op::ScaleBy(a, s) => {
                let k = self.scalar_value(*s);
                let x = self.value(*a);
                let ds: f64 = gd.iter().zip(x.data()).map(|(p, q)| p * q).sum();
                accumulate(grads, *a, map(g, |v| v * k));
                accumulate(grads, *s, Tensor::new(self.shape(*s).to_vec(), vec![ds]));
            }
            Op::AddConst(a) => accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, gd, false, y.data(), true, 0.0, &mut da);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, x.data(), true, gd, false, 0.0, &mut db);
                accumulate(grads, *a, Tensor::matrix(m, k, da));
                accumulate(grads, *b, Tensor::matrix(k, n, db));
            }
            Op::AddChannel(x, v) => {
                let (n, c, s) = channel_dims(g.shape());
                let mut dv = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        dv[ci] += gd[base..base + s].iter().sum::<f64>();
                    }
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *v, Tensor::new(self.shape(*v).to_vec(), dv));
            }
            Op::MulChannel(x, v) => {
                let (xs, vs) = (self.value(*x), self.value(*v));
                let (n, c, s) = channel_dims(g.shape());
                let mut dx = gd.to_vec();
                let mut dv = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        for k in base..base + s {
                            dv[ci] += gd[k] * xs.data()[k];
                            dx[k] *= vs.data()[ci];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx));
                accumulate(grads, *v, Tensor::new(vs.shape().to_vec(), dv));
            }
            Op::Conv2d { x, w } => {
                let (xs, ws) = (self.value(*x), self.value(*w));
                let &[n, cin, h, wd] = xs.shape() else { unreachable!() };
                let &[cout, _, kh, kw] = ws.shape() else { unreachable!() };
                let hw = h * wd;
                let kk = cin * kh * kw;
                let mut dw = vec![0.0; ws.len()];
                let mut dx = vec![0.0; xs.len()];
                let mut col = vec![0.0; kk * hw];
                let mut dcol = vec![0.0; kk * hw];
                for ni in 0..n {
                    let gy = &gd[ni * cout * hw..(ni + 1) * cout * hw];
                    im2col(&xs.data()[ni * cin * hw..(ni + 1) * cin * hw], cin, h, wd, kh, &mut col);
                    gemm(cout, hw, kk, gy, false, &col, true, 1.0, &mut dw);
                    gemm(kk, cout, hw, ws.data(), true, gy, false, 0.0, &mut dcol);
                    col2im(&dcol, cin, h, wd, kh, &mut dx[ni * cin * hw..(ni + 1) * cin * hw]);
                }
                accumulate(grads, *x, Tensor::new(xs.shape().to_vec(), dx));
                accumulate(grads, *w, Tensor::new(ws.shape().to_vec(), dw));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (gv, &src) in gd.iter().zip(argmax) {
                    dx[src] += gv;
                }
                accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx));
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.shape(*x).to_vec();
                let (n, c, s) = channel_dims(&shape);
                let mut dx = vec![0.0; n * c * s];
                for p in 0..n * c {
                    let v = gd[p] / s as f64;
                    for d in &mut dx[p * s..(p + 1) * s] {
                        *d = v;
                    }
                }
                accumulate(grads, *x, Tensor::new(shape, dx));
            }
            Op::Unary(x, f) => {
                let xs = self.value(*x);
                let ys = &node.value;
                let dx = gd
                    .iter()
                    .zip(xs.data())
                    .zip(ys.data())
                    .map(|((gv, &xv), &yv)| gv * f.derivative(xv, yv))
                    .collect();
                accumulate(grads, *x, Tensor::new(xs.shape().to_vec(), dx));
            }
            Op::BatchNorm { x, x_hat, inv_std } => {
                let (n, c, s) = channel_dims(g.shape());
                let m = (n * s) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        for k in base..base + s {
                            sum_g[ci] += gd[k];
                            sum_gx[ci] += gd[k] * x_hat[k];
                        }
                    }
                }
                let mut dx = vec![0.0; gd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        for k in base..base + s {
                            dx[k] = inv_std[ci] / m * (m * gd[k] - sum_g[ci] - x_hat[k] * sum_gx[ci]);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx));
            }
            Op::FixedNorm { x, inv_std } => {
                let (n, c, s) = channel_dims(g.shape());
                let mut dx = gd.to_vec();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        for d in &mut dx[base..base + s] {
                            *d *= inv_std[ci];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx));
            }
            Op::PairwiseSqDist(z, c) => {
                let (zs, cs) = (self.value(*z), self.value(*c));
                let (q, dz, k) = (zs.rows(), zs.row_len(), cs.rows());
                let mut dzv = vec![0.0; zs.len()];
                let mut dcv = vec![0.0; cs.len()];
                for i in 0..q {
                    for j in 0..k {
                        let gij = 2.0 * gd[i * k + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for d in 0..dz {
                            let diff = zs.row(i)[d] - cs.row(j)[d];
                            dzv[i * dz + d] += gij * diff;
                            dcv[j * dz + d] -= gij * diff;
                        }
                    }
                }
                accumulate(grads, *z, Tensor::new(zs.shape().to_vec(), dzv));
                accumulate(grads, *c, Tensor::new(cs.shape().to_vec(), dcv));
            }
            Op::PairwiseNegCos(z, c) => {
                let (zs, cs) = (self.value(*z), self.value(*c));
                let (q, dz, k) = (zs.rows(), zs.row_len(), cs.rows());
                let mut dzv = vec![0.0; zs.len()];
                let mut dcv = vec![0.0; cs.len()];
                for i in 0..q {
                    let zi = zs.row(i);
                    let nz = norm(zi);
                    for j in 0..k {
                        let gij = gd[i * k + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let cj = cs.row(j);
                        let nc = norm(cj);
                        let cos = dot(zi, cj) / (nz * nc);
                        for d in 0..dz {
                            dzv[i * dz + d] -= gij * (cj[d] / (nz * nc) - cos * zi[d] / (nz * nz));
                            dcv[j * dz + d] -= gij * (zi[d] / (nz * nc) - cos * cj[d] / (nc * nc));
                        }
                    }
                }
                accumulate(grads, *z, Tensor::new(zs.shape().to_vec(), dzv));
                accumulate(grads, *c, Tensor::new(cs.shape().to_vec(), dcv));
            }
            Op::CrossEntropyRows { logits, labels, weights } => {
                let ls = self.value(*logits);
                let (n, k) = (ls.rows(), ls.row_len());
                let mut dl = vec![0.0; n * k];
                for i in 0..n {
                    if weights[i] == 0.0 {
                        continue;
                    }
                    let row = ls.row(i);
                    let lse = log_sum_exp(row);
                    let wi = weights[i] * gd[0];
                    for j in 0..k {
                        let p = (row[j] - lse).exp();
                        dl[i * k + j] = wi * (p - if j == labels[i] { 1.0 } else { 0.0 });
                    }
                }
                accumulate(grads, *logits, Tensor::new(ls.shape().to_vec(), dl));
            }
            Op::Sum(x) => {
                accumulate(grads, *x, Tensor::filled(self.shape(*x).to_vec(), gd[0]));
            }
            Op::WeightedSum(x, w) => {
                let t = Tensor::new(self.shape(*x).to_vec(), w.iter().map(|v| v * gd[0]).collect());
                accumulate(grads, *x, t);
            }
            Op::SumSquares(x) => {
                let xs = self.value(*x);
                accumulate(grads, *x, map(xs, |v| 2.0 * v * gd[0]));
            }
            Op::SliceRows { x, start } => {
                let xs = self.value(*x);
                let w = xs.row_len();
                let mut dx = vec![0.0; xs.len()];
                dx[start * w..start * w + gd.len()].copy_from_slice(gd);
                accumulate(grads, *x, Tensor::new(xs.shape().to_vec(), dx));
            }
            Op::Reshape(x) => {
                let t = g.clone().reshape(self.shape(*x).to_vec());
                accumulate(grads, *x, t);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let t = Tensor::new(self.shape(p).to_vec(), gd[offset..offset + len].to_vec());
                    accumulate(grads, p, t);
                    offset += len;
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oh in 0..h {
                    let ih = oh as isize + ki as isize - p as isize;
                    for ow in 0..w {
                        let iw = ow as isize + kj as isize - p as isize;
                        dst[oh * w + ow] = if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                            x[ci * hw + ih as usize * w + iw as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], cin: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * hw..(row + 1) * hw];
                for oh in 0..h {
                    let ih = oh as isize + ki as isize - p as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    for ow in 0..w {
                        let iw = ow as isize + kj as isize - p as isize;
                        if iw >= 0 && (iw as usize) < w {
                            dx[ci * hw + ih as usize * w + iw as usize] += src[oh * w + ow];
                        }
                    }
                }
            }
        }
    }
}
