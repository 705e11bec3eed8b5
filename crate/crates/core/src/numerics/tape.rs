//! Reverse-mode differentiation over whole tensors.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse and accumulates adjoints, so
//! the tape doubles as the computation graph. Operations are coarse (matmul,
//! gather, scatter-add, cosine rows, log-softmax, ...) which keeps the node
//! count per GNN forward in the dozens instead of the millions.

use std::sync::Arc;

use super::{SparseMatrix, Tensor};

/// Handle to a node on a [`Tape`].
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
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Transpose(Var),
    Gather(Var, Arc<Vec<usize>>),
    ScatterAdd(Var, Arc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    CosineRows(Var, Var),
    LogSoftmax(Var),
    SparseMul(Var, Arc<SparseMatrix>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`]. Nodes that do not influence the
/// output have no entry.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when `v` did not contribute.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    /// Adds a `[1, m]` row to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1, "add_row expects a [1, m] row");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let m = av.cols();
        let mut out = av.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += rv.data()[i % m];
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(super::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// `ln σ(x)`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.min(0.0) - (-x.abs()).exp().ln_1p());
        self.push(v, Op::LogSigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Sum of all elements, as a `[1, 1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Selects rows of `a` by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let av = self.value(a);
        let m = av.cols();
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx.iter() {
            data.extend_from_slice(av.row_slice(i));
        }
        let v = Tensor::matrix(idx.len(), m, data).expect("gather shape");
        self.push(v, Op::Gather(a, idx))
    }

    /// Repeats a `[1, m]` row `n` times.
    pub fn broadcast_row(&mut self, a: Var, n: usize) -> Var {
        self.gather_rows(a, Arc::new(vec![0; n]))
    }

    /// Sums row `i` of `a` into output row `idx[i]` of an `[n_out, m]` result.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Arc<Vec<usize>>, n_out: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), idx.len(), "scatter index length mismatch");
        let m = av.cols();
        let mut out = Tensor::zeros(n_out, m);
        let od = out.data_mut();
        for (i, &t) in idx.iter().enumerate() {
            let src = av.row_slice(i);
            for (o, s) in od[t * m..(t + 1) * m].iter_mut().zip(src) {
                *o += s;
            }
        }
        self.push(out, Op::ScatterAdd(a, idx))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), n, "concat_cols row mismatch");
                data.extend_from_slice(pv.row_slice(r));
            }
        }
        let v = Tensor::matrix(n, total, data).expect("concat shape");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Row-wise cosine similarity of two `[n, m]` matrices, as `[n, 1]`.
    /// Rows with zero norm yield 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert!(av.same_shape(bv), "cosine_rows shape mismatch");
        let out: Vec<f64> = (0..av.rows())
            .map(|r| super::cosine_sim(av.row_slice(r), bv.row_slice(r)))
            .collect();
        self.push(Tensor::column(out), Op::CosineRows(a, b))
    }

    /// Log-softmax over all elements of `a`, keeping its shape.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let max = av.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + av.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let v = av.map(|x| x - lse);
        self.push(v, Op::LogSoftmax(a))
    }

    /// `m · a` for a constant sparse matrix `m`.
    pub fn sparse_mul(&mut self, m: Arc<SparseMatrix>, a: Var) -> Var {
        let v = m.matmul_dense(self.value(a));
        self.push(v, Op::SparseMul(a, m))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                    acc(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    acc(&mut grads, *a, g.zip_map(bv, |x, y| x / y));
                    let gb = g
                        .zip_map(&node.value, |x, q| x * q)
                        .zip_map(bv, |x, y| -x / y);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let m = g.cols();
                    let mut gr = vec![0.0; m];
                    for (k, x) in g.data().iter().enumerate() {
                        gr[k % m] += x;
                    }
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *row, Tensor::row(gr));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|x| c * x)),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, s| x * s * (1.0 - s));
                    acc(&mut grads, *a, ga);
                }
                Op::LogSigmoid(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| x * super::sigmoid(-y));
                    acc(&mut grads, *a, ga);
                }
                Op::Log(a) => acc(&mut grads, *a, g.zip_map(self.value(*a), |x, y| x / y)),
                Op::Exp(a) => acc(&mut grads, *a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Sum(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, Tensor::filled(av.rows(), av.cols(), g.item()));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Gather(a, idx) => {
                    let av = self.value(*a);
                    let m = av.cols();
                    let mut ga = Tensor::zeros(av.rows(), m);
                    let gd = ga.data_mut();
                    for (k, &src) in idx.iter().enumerate() {
                        for (o, x) in gd[src * m..(src + 1) * m].iter_mut().zip(g.row_slice(k)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ScatterAdd(a, idx) => {
                    let m = g.cols();
                    let mut data = Vec::with_capacity(idx.len() * m);
                    for &t in idx.iter() {
                        data.extend_from_slice(g.row_slice(t));
                    }
                    acc(&mut grads, *a, Tensor::matrix(idx.len(), m, data).expect("shape"));
                }
                Op::ConcatCols(parts) => {
                    let n = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut data = Vec::with_capacity(n * w);
                        for r in 0..n {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        acc(&mut grads, p, Tensor::matrix(n, w, data).expect("shape"));
                        offset += w;
                    }
                }
                Op::CosineRows(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let m = av.cols();
                    let mut ga = Tensor::zeros(av.rows(), m);
                    let mut gb = Tensor::zeros(av.rows(), m);
                    for r in 0..av.rows() {
                        let x = av.row_slice(r);
                        let y = bv.row_slice(r);
                        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if nx == 0.0 || ny == 0.0 {
                            continue;
                        }
                        let c = node.value.get(r, 0);
                        let gr = g.get(r, 0);
                        for j in 0..m {
                            ga.set(r, j, gr * (y[j] / (nx * ny) - c * x[j] / (nx * nx)));
                            gb.set(r, j, gr * (x[j] / (nx * ny) - c * y[j] / (ny * ny)));
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::LogSoftmax(a) => {
                    let total = g.sum();
                    let ga = g.zip_map(&node.value, |x, ls| x - ls.exp() * total);
                    acc(&mut grads, *a, ga);
                }
                Op::SparseMul(a, m) => acc(&mut grads, *a, m.t_matmul_dense(&g)),
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= eps;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        out
    }

    fn check(build: impl Fn(&mut Tape, Var) -> Var, x: Tensor) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = build(&mut tape, xv);
        let grads = tape.backward(out);
        let analytic = grads.get_or_zeros(xv, x.rows(), x.cols());
        let numeric = finite_diff(
            |p| {
                let mut t = Tape::new();
                let v = t.leaf(p.clone());
                let o = build(&mut t, v);
                t.value(o).item()
            },
            &x,
            1e-6,
        );
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "analytic {a} numeric {n}");
        }
    }

    fn sample() -> Tensor {
        Tensor::matrix(3, 2, vec![0.3, -1.2, 0.7, 0.4, -0.5, 0.9]).unwrap()
    }

    #[test]
    fn matmul_transpose_grad() {
        check(
            |t, x| {
                let xt = t.transpose(x);
                let m = t.matmul(xt, x);
                let s = t.sigmoid(m);
                t.sum(s)
            },
            sample(),
        );
    }

    #[test]
    fn gather_scatter_grad() {
        check(
            |t, x| {
                let g = t.gather_rows(x, Arc::new(vec![2, 0, 2, 1]));
                let s = t.scatter_add_rows(g, Arc::new(vec![1, 1, 0, 3]), 4);
                let sq = t.mul(s, s);
                t.sum(sq)
            },
            sample(),
        );
    }

    #[test]
    fn cosine_and_log_softmax_grad() {
        check(
            |t, x| {
                let y = t.exp(x);
                let c = t.cosine_rows(x, y);
                let ls = t.log_softmax(c);
                let picked = t.gather_rows(ls, Arc::new(vec![1]));
                t.sum(picked)
            },
            sample(),
        );
    }

    #[test]
    fn concat_add_row_div_grad() {
        check(
            |t, x| {
                let r = t.leaf(Tensor::row(vec![0.1, 0.2]));
                let a = t.add_row(x, r);
                let e = t.exp(x);
                let d = t.div(a, e);
                let c = t.concat_cols(&[d, x]);
                let c = t.relu(c);
                let c = t.add_scalar(c, 1.0);
                let l = t.log(c);
                t.mean(l)
            },
            sample(),
        );
    }

    #[test]
    fn sparse_mul_grad() {
        let m = Arc::new(SparseMatrix::from_triplets(
            3,
            3,
            vec![(0, 0, 1.0), (0, 1, -0.5), (1, 0, -0.5), (1, 1, 1.0), (2, 2, 1.0), (2, 0, 0.3)],
        ));
        check(
            move |t, x| {
                let y = t.sparse_mul(m.clone(), x);
                let p = t.mul(x, y);
                t.sum(p)
            },
            sample(),
        );
    }

    #[test]
    fn log_sigmoid_grad_and_saturation() {
        check(
            |t, x| {
                let y = t.log_sigmoid(x);
                t.sum(y)
            },
            sample(),
        );
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![-800.0, 0.0, 800.0]));
        let y = t.log_sigmoid(x);
        assert_eq!(t.value(y).data(), &[-800.0, -std::f64::consts::LN_2, 0.0]);
    }
}
