//! Dynamic tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value, so append order
//! is a topological order and `backward` is a single reverse sweep.

use num_complex::Complex64;

use super::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Softmax(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    GatherCols(Var, Vec<usize>),
    ScatterCols(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    PairwiseDist(Var),
    PowerNormalize(Var, f64),
    ComplexScale(Var, Vec<Complex64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::Log(..) => "log",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::GatherCols(..) => "gather_cols",
            Op::ScatterCols(..) => "scatter_cols",
            Op::Gather(..) => "gather",
            Op::PairwiseDist(..) => "pairwise_dist",
            Op::PowerNormalize(..) => "power_normalize",
            Op::ComplexScale(..) => "complex_scale",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient, available after [`Graph::backward`] for nodes
    /// reachable from the root.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient or zeros when the node did not influence the root.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    /// First node (in evaluation order) whose value contains NaN or infinity.
    pub fn first_non_finite(&self) -> Option<Error> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| Error::NonFinite {
                op: n.op.name(),
                node: i,
            })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, name)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[m×n] + bias[n]`, bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let cols = av.cols();
        if bv.numel() != cols {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, &b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(a, bias)))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| scale * x + shift).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::Affine(a, scale))
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("shape preserved");
        self.push(t, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map_unary(a, f64::ln, Op::Log(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map_unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::Softmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Keep the listed columns of every row, in the listed order.
    pub fn gather_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let width = av.cols();
        if cols.is_empty() {
            return Err(Error::contract("gather_cols with no columns"));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
            return Err(Error::contract(format!(
                "column {bad} out of range for width {width}"
            )));
        }
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * cols.len());
        for r in 0..rows {
            let row = av.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        let t = Tensor::new(vec![rows, cols.len()], data)?;
        Ok(self.push(t, Op::GatherCols(a, cols.to_vec())))
    }

    /// Inverse of [`Graph::gather_cols`]: write the input's columns at `cols`
    /// of a zero-filled `width`-wide matrix.
    pub fn scatter_cols(&mut self, a: Var, cols: &[usize], width: usize) -> Result<Var> {
        let av = self.value(a);
        if av.cols() != cols.len() {
            return Err(Error::Shape {
                op: "scatter_cols",
                lhs: av.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
            return Err(Error::contract(format!(
                "column {bad} out of range for width {width}"
            )));
        }
        let rows = av.rows();
        let mut data = vec![0.0; rows * width];
        for r in 0..rows {
            for (k, &c) in cols.iter().enumerate() {
                data[r * width + c] = av.row(r)[k];
            }
        }
        let t = Tensor::new(vec![rows, width], data)?;
        Ok(self.push(t, Op::ScatterCols(a, cols.to_vec())))
    }

    /// Pick elements by flat index into a 1-D tensor.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if idx.is_empty() {
            return Err(Error::contract("gather with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.numel()) {
            return Err(Error::contract(format!(
                "index {bad} out of range for {} elements",
                av.numel()
            )));
        }
        let data = idx.iter().map(|&i| av.data()[i]).collect();
        let t = Tensor::new(vec![idx.len()], data)?;
        Ok(self.push(t, Op::Gather(a, idx.to_vec())))
    }

    /// All-pairs Euclidean distances between rows, `[n×n]`.
    pub fn pairwise_dist(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.rows();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = av
                    .row(i)
                    .iter()
                    .zip(av.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        let t = Tensor::new(vec![n, n], data).expect("square");
        self.push(t, Op::PairwiseDist(a))
    }

    /// Scale every row to Euclidean norm `target`.
    pub fn power_normalize(&mut self, a: Var, target: f64) -> Result<Var> {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateInput);
            }
            let c = target / norm;
            row.iter_mut().for_each(|x| *x *= c);
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::PowerNormalize(a, target)))
    }

    /// Multiply interleaved (re, im) pairs of row `r` by `coeffs[r]`, or by
    /// `coeffs[0]` for every row when a single coefficient is given.
    pub fn complex_scale(&mut self, a: Var, coeffs: &[Complex64]) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        if cols % 2 != 0 || !(coeffs.len() == rows || coeffs.len() == 1) {
            return Err(Error::Shape {
                op: "complex_scale",
                lhs: av.shape().to_vec(),
                rhs: vec![coeffs.len()],
            });
        }
        let mut data = av.data().to_vec();
        for (r, row) in data.chunks_mut(cols).enumerate() {
            let h = coeffs[if coeffs.len() == 1 { 0 } else { r }];
            for pair in row.chunks_mut(2) {
                let z = h * Complex64::new(pair[0], pair[1]);
                pair[0] = z.re;
                pair[1] = z.im;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::ComplexScale(a, coeffs.to_vec())))
    }

    /// Reverse sweep from a scalar root; gradients accumulate additively.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.grads[i] = Some(g);
            for (parent, delta) in contributions {
                accumulate(
                    &mut self.grads[parent.0],
                    self.nodes[parent.0].value.shape(),
                    delta,
                );
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` w.r.t. each parent.
    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                vec![
                    (*a, matmul_nt(gd, bv.data(), m, n, k)),
                    (*b, matmul_tn(av.data(), gd, m, k, n)),
                ]
            }
            Op::Add(a, b) => vec![(*a, gd.to_vec()), (*b, gd.to_vec())],
            Op::Sub(a, b) => vec![(*a, gd.to_vec()), (*b, gd.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, gd.iter().zip(bv).map(|(g, y)| g * y).collect()),
                    (*b, gd.iter().zip(av).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::AddBias(a, bias) => {
                let cols = out.cols();
                let mut gb = vec![0.0; cols];
                for row in gd.chunks(cols) {
                    gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                vec![(*a, gd.to_vec()), (*bias, gb)]
            }
            Op::Affine(a, scale) => vec![(*a, gd.iter().map(|g| g * scale).collect())],
            Op::Relu(a) => {
                let av = self.value(*a).data();
                vec![(
                    *a,
                    gd.iter()
                        .zip(av)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Log(a) => {
                let av = self.value(*a).data();
                vec![(*a, gd.iter().zip(av).map(|(g, x)| g / x).collect())]
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a).data();
                let pass = |x: f64| x >= *lo && x <= *hi;
                vec![(
                    *a,
                    gd.iter()
                        .zip(av)
                        .map(|(g, &x)| if pass(x) { *g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                let mut ga = vec![0.0; out.numel()];
                for ((y, gr), dst) in out
                    .data()
                    .chunks(cols)
                    .zip(gd.chunks(cols))
                    .zip(ga.chunks_mut(cols))
                {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yi), gi) in dst.iter_mut().zip(y).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::Sum(a) => vec![(*a, vec![gd[0]; self.value(*a).numel()])],
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![(*a, vec![gd[0] / n as f64; n])]
            }
            Op::GatherCols(a, cols) => {
                let width = self.value(*a).cols();
                let mut ga = vec![0.0; self.value(*a).numel()];
                for (r, grow) in gd.chunks(cols.len()).enumerate() {
                    for (k, &c) in cols.iter().enumerate() {
                        ga[r * width + c] += grow[k];
                    }
                }
                vec![(*a, ga)]
            }
            Op::ScatterCols(a, cols) => {
                let width = out.cols();
                let mut ga = Vec::with_capacity(self.value(*a).numel());
                for grow in gd.chunks(width) {
                    ga.extend(cols.iter().map(|&c| grow[c]));
                }
                vec![(*a, ga)]
            }
            Op::Gather(a, idx) => {
                let mut ga = vec![0.0; self.value(*a).numel()];
                for (k, &i) in idx.iter().enumerate() {
                    ga[i] += gd[k];
                }
                vec![(*a, ga)]
            }
            Op::PairwiseDist(a) => {
                let av = self.value(*a);
                let (n, d) = (av.rows(), av.cols());
                let mut ga = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..n {
                        let dist = out.data()[i * n + j];
                        let gij = gd[i * n + j];
                        if i == j || dist == 0.0 || gij == 0.0 {
                            continue;
                        }
                        let coef = gij / dist;
                        for c in 0..d {
                            let diff = av.row(i)[c] - av.row(j)[c];
                            ga[i * d + c] += coef * diff;
                            ga[j * d + c] -= coef * diff;
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::PowerNormalize(a, target) => {
                let av = self.value(*a);
                let cols = av.cols();
                let mut ga = vec![0.0; av.numel()];
                for ((x, gr), dst) in av
                    .data()
                    .chunks(cols)
                    .zip(gd.chunks(cols))
                    .zip(ga.chunks_mut(cols))
                {
                    let sq: f64 = x.iter().map(|v| v * v).sum();
                    let norm = sq.sqrt();
                    let xg: f64 = x.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let c = target / norm;
                    for ((d, xi), gi) in dst.iter_mut().zip(x).zip(gr) {
                        *d = c * (gi - xi * xg / sq);
                    }
                }
                vec![(*a, ga)]
            }
            Op::ComplexScale(a, coeffs) => {
                let cols = out.cols();
                let mut ga = vec![0.0; out.numel()];
                for (r, (gr, dst)) in gd.chunks(cols).zip(ga.chunks_mut(cols)).enumerate() {
                    let h = coeffs[if coeffs.len() == 1 { 0 } else { r }];
                    for (gp, dp) in gr.chunks(2).zip(dst.chunks_mut(2)) {
                        // adjoint of multiplication by h is multiplication by conj(h)
                        let v = h.conj() * Complex64::new(gp[0], gp[1]);
                        dp[0] = v.re;
                        dp[1] = v.im;
                    }
                }
                vec![(*a, ga)]
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: Vec<f64>) {
    match slot {
        Some(t) => t
            .data_mut()
            .iter_mut()
            .zip(delta)
            .for_each(|(a, d)| *a += d),
        None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape matches value"))
        }
    }
}
