//! Single-use tape of recorded tensor operations. Values are dense
//! row-major f64 matrices; the reverse pass visits nodes in recording
//! order, which is already topological.

use crate::error::{domain, Error, Result};

/// Dense row-major matrix. Vectors are n x 1 or 1 x n; scalars 1 x 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), rows * cols, "tensor shape/data mismatch");
        Tensor { data, rows, cols }
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { data: vec![0.0; rows * cols], rows, cols }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { data: vec![v], rows: 1, cols: 1 }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Node handle on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

/// A hand-differentiated operation (used by the splat rasterizer).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;
    /// Returns one gradient tensor per input, same shapes as the inputs.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRowBroadcast(usize, usize), // (n x c) + (1 x c)
    MulColBroadcast(usize, usize), // (n x c) * (n x 1)
    MatMul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Relu(usize),
    Exp(usize),
    Sigmoid(usize),
    Sin(usize),
    Cos(usize),
    Abs(usize),
    Square(usize),
    SumAll(usize),
    MeanAll(usize),
    SumRows(usize),        // (n x c) -> (n x 1)
    NormRows(usize, f64),  // (n x c) -> (n x 1), sqrt(sumsq + eps)
    NormalizeRows(usize, f64),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize), // input, start, len
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    Reshape(usize),
    SumRowGroups(usize, usize), // input, group size: (g*n x c) -> (g x c)
    QuatRotate(usize, usize), // unit quats (n x 4), vectors (n x 3)
    Custom(Box<dyn CustomOp>, Vec<usize>),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Records primal operations; `backward` runs the reverse pass once.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        // Constants are leaves; their gradients are simply never consumed.
        self.push(Op::Leaf, t)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows, t.cols)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        self.push(op, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Div(a.0, b.0), |x, y| x / y)
    }

    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Var {
        let (n, c) = self.shape(a);
        assert_eq!(self.shape(bias), (1, c), "bias must be 1 x cols");
        let ta = self.value(a);
        let tb = self.value(bias);
        let mut data = ta.data.clone();
        for r in 0..n {
            for j in 0..c {
                data[r * c + j] += tb.data[j];
            }
        }
        self.push(Op::AddRowBroadcast(a.0, bias.0), Tensor::new(n, c, data))
    }

    pub fn mul_col_broadcast(&mut self, a: Var, w: Var) -> Var {
        let (n, c) = self.shape(a);
        assert_eq!(self.shape(w), (n, 1), "column weight must be n x 1");
        let ta = self.value(a);
        let tw = self.value(w);
        let mut data = ta.data.clone();
        for r in 0..n {
            for j in 0..c {
                data[r * c + j] *= tw.data[r];
            }
        }
        self.push(Op::MulColBroadcast(a.0, w.0), Tensor::new(n, c, data))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let ta = self.value(a);
        let tb = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ta.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        self.push(Op::MatMul(a.0, b.0), Tensor::new(m, n, out))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.rows, ta.cols, ta.data.iter().map(|&x| f(x)).collect());
        self.push(op, t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a.0, s), |x| x * s)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddConst(a.0), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a.0), f64::exp)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a.0), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.map(a, Op::Sin(a.0), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.map(a, Op::Cos(a.0), f64::cos)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a.0), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a.0), |x| x * x)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Op::SumAll(a.0), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s: f64 = ta.data.iter().sum();
        let n = ta.data.len() as f64;
        self.push(Op::MeanAll(a.0), Tensor::scalar(s / n))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data: Vec<f64> = (0..ta.rows).map(|r| ta.row(r).iter().sum()).collect();
        let t = Tensor::new(ta.rows, 1, data);
        self.push(Op::SumRows(a.0), t)
    }

    /// Per-row Euclidean norm, smoothed: sqrt(sum x^2 + eps).
    pub fn norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let data: Vec<f64> = (0..ta.rows)
            .map(|r| (ta.row(r).iter().map(|x| x * x).sum::<f64>() + eps).sqrt())
            .collect();
        let t = Tensor::new(ta.rows, 1, data);
        self.push(Op::NormRows(a.0, eps), t)
    }

    /// Row-wise L2 normalization: x / sqrt(sum x^2 + eps).
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let (n, c) = (ta.rows, ta.cols);
        let mut data = vec![0.0; n * c];
        for r in 0..n {
            let nrm = (ta.row(r).iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
            for j in 0..c {
                data[r * c + j] = ta.data[r * c + j] / nrm;
            }
        }
        self.push(Op::NormalizeRows(a.0, eps), Tensor::new(n, c, data))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.rows, n, "concat_cols row mismatch");
            for r in 0..n {
                data[r * total + off..r * total + off + tp.cols].copy_from_slice(tp.row(r));
            }
            off += tp.cols;
        }
        self.push(Op::ConcatCols(parts.iter().map(|v| v.0).collect()), Tensor::new(n, total, data))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        assert!(start + len <= ta.cols, "slice_cols out of range");
        let mut data = vec![0.0; ta.rows * len];
        for r in 0..ta.rows {
            data[r * len..(r + 1) * len].copy_from_slice(&ta.row(r)[start..start + len]);
        }
        let t = Tensor::new(ta.rows, len, data);
        self.push(Op::SliceCols(a.0, start, len), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut data = Vec::with_capacity(total * c);
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.cols, c, "concat_rows col mismatch");
            data.extend_from_slice(&tp.data);
        }
        self.push(Op::ConcatRows(parts.iter().map(|v| v.0).collect()), Tensor::new(total, c, data))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let ta = self.value(a);
        let c = ta.cols;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(ta.row(i));
        }
        let t = Tensor::new(indices.len(), c, data);
        self.push(Op::GatherRows(a.0, indices.to_vec()), t)
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.data.len(), rows * cols, "reshape element count mismatch");
        let t = Tensor::new(rows, cols, ta.data.clone());
        self.push(Op::Reshape(a.0), t)
    }

    /// Sums consecutive groups of `group` rows: (g*group x c) -> (g x c).
    pub fn sum_row_groups(&mut self, a: Var, group: usize) -> Var {
        let ta = self.value(a);
        assert!(group > 0 && ta.rows % group == 0, "row count not divisible by group");
        let (groups, c) = (ta.rows / group, ta.cols);
        let mut data = vec![0.0; groups * c];
        for r in 0..ta.rows {
            for j in 0..c {
                data[(r / group) * c + j] += ta.at(r, j);
            }
        }
        self.push(Op::SumRowGroups(a.0, group), Tensor::new(groups, c, data))
    }

    /// Rotates each row of `v` (n x 3) by the matching unit quaternion row of
    /// `q` (n x 4, wxyz). Quaternions are assumed normalized.
    pub fn quat_rotate(&mut self, q: Var, v: Var) -> Var {
        let (n, cq) = self.shape(q);
        assert_eq!(cq, 4, "quat_rotate expects n x 4 quats");
        assert_eq!(self.shape(v), (n, 3), "quat_rotate expects n x 3 vectors");
        let tq = self.value(q);
        let tv = self.value(v);
        let mut data = vec![0.0; n * 3];
        for r in 0..n {
            let (w, u) = split_quat(tq.row(r));
            let vec = [tv.at(r, 0), tv.at(r, 1), tv.at(r, 2)];
            let t = scale3(cross(u, vec), 2.0);
            let out = add3(add3(vec, scale3(t, w)), cross(u, t));
            data[r * 3..r * 3 + 3].copy_from_slice(&out);
        }
        self.push(Op::QuatRotate(q.0, v.0), Tensor::new(n, 3, data))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&tensors);
        self.push(Op::Custom(op, inputs.iter().map(|v| v.0).collect()), out)
    }

    /// Reverse pass from a scalar loss node. Returns one gradient slot per
    /// tape node (leaves included); unused slots are None.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let lt = self.value(loss);
        if lt.rows != 1 || lt.cols != 1 {
            return Err(domain("backward: loss must be a scalar node"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !g.is_finite() {
                return Err(Error::Numeric(format!("NaN gradient at tape node {id}")));
            }
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
        match &mut grads[id] {
            Some(t) => {
                debug_assert_eq!((t.rows, t.cols), (delta.rows, delta.cols));
                for (a, b) in t.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        use Op::*;
        let val = |i: usize| &self.nodes[i].value;
        match &self.nodes[id].op {
            Leaf => {}
            Add(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Sub(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                let neg = Tensor::new(g.rows, g.cols, g.data.iter().map(|x| -x).collect());
                Self::accumulate(grads, *b, neg);
            }
            Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = Tensor::new(g.rows, g.cols, g.data.iter().zip(&tb.data).map(|(&g, &y)| g * y).collect());
                let gb = Tensor::new(g.rows, g.cols, g.data.iter().zip(&ta.data).map(|(&g, &x)| g * x).collect());
                Self::accumulate(grads, *a, ga);
                Self::accumulate(grads, *b, gb);
            }
            Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = Tensor::new(g.rows, g.cols, g.data.iter().zip(&tb.data).map(|(&g, &y)| g / y).collect());
                let gb = Tensor::new(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(ta.data.iter().zip(&tb.data))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect(),
                );
                Self::accumulate(grads, *a, ga);
                Self::accumulate(grads, *b, gb);
            }
            AddRowBroadcast(a, bias) => {
                Self::accumulate(grads, *a, g.clone());
                let c = g.cols;
                let mut gb = vec![0.0; c];
                for r in 0..g.rows {
                    for j in 0..c {
                        gb[j] += g.data[r * c + j];
                    }
                }
                Self::accumulate(grads, *bias, Tensor::new(1, c, gb));
            }
            MulColBroadcast(a, w) => {
                let (ta, tw) = (val(*a), val(*w));
                let c = g.cols;
                let mut ga = vec![0.0; g.rows * c];
                let mut gw = vec![0.0; g.rows];
                for r in 0..g.rows {
                    for j in 0..c {
                        ga[r * c + j] = g.data[r * c + j] * tw.data[r];
                        gw[r] += g.data[r * c + j] * ta.data[r * c + j];
                    }
                }
                Self::accumulate(grads, *a, Tensor::new(g.rows, c, ga));
                Self::accumulate(grads, *w, Tensor::new(g.rows, 1, gw));
            }
            MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.rows, ta.cols);
                let n = tb.cols;
                // dA = G B^T
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.data[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            ga[i * k + p] += gij * tb.data[p * n + j];
                        }
                    }
                }
                // dB = A^T G
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = ta.data[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += aip * g.data[i * n + j];
                        }
                    }
                }
                Self::accumulate(grads, *a, Tensor::new(m, k, ga));
                Self::accumulate(grads, *b, Tensor::new(k, n, gb));
            }
            Scale(a, s) => {
                let ga = Tensor::new(g.rows, g.cols, g.data.iter().map(|x| x * s).collect());
                Self::accumulate(grads, *a, ga);
            }
            AddConst(a) => Self::accumulate(grads, *a, g.clone()),
            Relu(a) => {
                let ta = val(*a);
                let ga = Tensor::new(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&ta.data).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect(),
                );
                Self::accumulate(grads, *a, ga);
            }
            Exp(a) => {
                let out = &self.nodes[id].value;
                let ga = Tensor::new(g.rows, g.cols, g.data.iter().zip(&out.data).map(|(&g, &y)| g * y).collect());
                Self::accumulate(grads, *a, ga);
            }
            Sigmoid(a) => {
                let out = &self.nodes[id].value;
                let ga = Tensor::new(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&out.data).map(|(&g, &y)| g * y * (1.0 - y)).collect(),
                );
                Self::accumulate(grads, *a, ga);
            }
            Sin(a) => {
                let ta = val(*a);
                let ga = Tensor::new(g.rows, g.cols, g.data.iter().zip(&ta.data).map(|(&g, &x)| g * x.cos()).collect());
                Self::accumulate(grads, *a, ga);
            }
            Cos(a) => {
                let ta = val(*a);
                let ga = Tensor::new(g.rows, g.cols, g.data.iter().zip(&ta.data).map(|(&g, &x)| -g * x.sin()).collect());
                Self::accumulate(grads, *a, ga);
            }
            Abs(a) => {
                let ta = val(*a);
                let ga = Tensor::new(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&ta.data).map(|(&g, &x)| g * x.signum()).collect(),
                );
                Self::accumulate(grads, *a, ga);
            }
            Square(a) => {
                let ta = val(*a);
                let ga =
                    Tensor::new(g.rows, g.cols, g.data.iter().zip(&ta.data).map(|(&g, &x)| 2.0 * g * x).collect());
                Self::accumulate(grads, *a, ga);
            }
            SumAll(a) => {
                let ta = val(*a);
                let ga = Tensor::new(ta.rows, ta.cols, vec![g.data[0]; ta.data.len()]);
                Self::accumulate(grads, *a, ga);
            }
            MeanAll(a) => {
                let ta = val(*a);
                let s = g.data[0] / ta.data.len() as f64;
                let ga = Tensor::new(ta.rows, ta.cols, vec![s; ta.data.len()]);
                Self::accumulate(grads, *a, ga);
            }
            SumRows(a) => {
                let ta = val(*a);
                let mut ga = vec![0.0; ta.rows * ta.cols];
                for r in 0..ta.rows {
                    for j in 0..ta.cols {
                        ga[r * ta.cols + j] = g.data[r];
                    }
                }
                Self::accumulate(grads, *a, Tensor::new(ta.rows, ta.cols, ga));
            }
            NormRows(a, eps) => {
                let ta = val(*a);
                let mut ga = vec![0.0; ta.rows * ta.cols];
                for r in 0..ta.rows {
                    let nrm = (ta.row(r).iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
                    for j in 0..ta.cols {
                        ga[r * ta.cols + j] = g.data[r] * ta.at(r, j) / nrm;
                    }
                }
                Self::accumulate(grads, *a, Tensor::new(ta.rows, ta.cols, ga));
            }
            NormalizeRows(a, eps) => {
                let ta = val(*a);
                let (n, c) = (ta.rows, ta.cols);
                let mut ga = vec![0.0; n * c];
                for r in 0..n {
                    let row = ta.row(r);
                    let nsq = row.iter().map(|x| x * x).sum::<f64>() + eps;
                    let nrm = nsq.sqrt();
                    let grow = &g.data[r * c..(r + 1) * c];
                    let gd: f64 = grow.iter().zip(row).map(|(&g, &x)| g * x).sum();
                    for j in 0..c {
                        ga[r * c + j] = grow[j] / nrm - row[j] * gd / (nsq * nrm);
                    }
                }
                Self::accumulate(grads, *a, Tensor::new(n, c, ga));
            }
            ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = val(p);
                    let mut gp = vec![0.0; tp.rows * tp.cols];
                    for r in 0..tp.rows {
                        gp[r * tp.cols..(r + 1) * tp.cols]
                            .copy_from_slice(&g.data[r * g.cols + off..r * g.cols + off + tp.cols]);
                    }
                    Self::accumulate(grads, p, Tensor::new(tp.rows, tp.cols, gp));
                    off += tp.cols;
                }
            }
            SliceCols(a, start, len) => {
                let ta = val(*a);
                let mut ga = vec![0.0; ta.rows * ta.cols];
                for r in 0..ta.rows {
                    ga[r * ta.cols + start..r * ta.cols + start + len]
                        .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                }
                Self::accumulate(grads, *a, Tensor::new(ta.rows, ta.cols, ga));
            }
            ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = val(p);
                    let gp = g.data[off..off + tp.data.len()].to_vec();
                    Self::accumulate(grads, p, Tensor::new(tp.rows, tp.cols, gp));
                    off += tp.data.len();
                }
            }
            GatherRows(a, indices) => {
                let ta = val(*a);
                let c = ta.cols;
                let mut ga = vec![0.0; ta.rows * c];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += g.data[r * c + j];
                    }
                }
                Self::accumulate(grads, *a, Tensor::new(ta.rows, c, ga));
            }
            Reshape(a) => {
                let ta = val(*a);
                Self::accumulate(grads, *a, Tensor::new(ta.rows, ta.cols, g.data.clone()));
            }
            SumRowGroups(a, group) => {
                let ta = val(*a);
                let c = ta.cols;
                let mut ga = vec![0.0; ta.rows * c];
                for r in 0..ta.rows {
                    for j in 0..c {
                        ga[r * c + j] = g.data[(r / group) * c + j];
                    }
                }
                Self::accumulate(grads, *a, Tensor::new(ta.rows, c, ga));
            }
            QuatRotate(q, v) => {
                let (tq, tv) = (val(*q), val(*v));
                let n = tq.rows;
                let mut gq = vec![0.0; n * 4];
                let mut gv = vec![0.0; n * 3];
                for r in 0..n {
                    let (w, u) = split_quat(tq.row(r));
                    let vec = [tv.at(r, 0), tv.at(r, 1), tv.at(r, 2)];
                    let gr = [g.at(r, 0), g.at(r, 1), g.at(r, 2)];
                    let t = scale3(cross(u, vec), 2.0);
                    // out = v + w t + u x t
                    let grad_w = dot3(gr, t);
                    // d(u x t)/dt contributes -u x g; d(w t)/dt contributes w g
                    let grad_t = sub3(scale3(gr, w), cross(u, gr));
                    // direct u term from u x t: t x g
                    let mut grad_u = cross(t, gr);
                    // t = 2 u x v: du += 2 (v x grad_t), dv += -2 (u x grad_t) + g
                    grad_u = add3(grad_u, scale3(cross(vec, grad_t), 2.0));
                    let grad_v = add3(gr, scale3(cross(grad_t, u), 2.0));
                    gq[r * 4] = grad_w;
                    gq[r * 4 + 1..r * 4 + 4].copy_from_slice(&grad_u);
                    gv[r * 3..r * 3 + 3].copy_from_slice(&grad_v);
                }
                Self::accumulate(grads, *q, Tensor::new(n, 4, gq));
                Self::accumulate(grads, *v, Tensor::new(n, 3, gv));
            }
            Custom(op, inputs) => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
                let gs = op.backward(&tensors, &self.nodes[id].value, g);
                assert_eq!(gs.len(), inputs.len(), "custom op {} gradient count", op.name());
                for (&i, gi) in inputs.iter().zip(gs) {
                    Self::accumulate(grads, i, gi);
                }
            }
        }
    }
}

fn split_quat(row: &[f64]) -> (f64, [f64; 3]) {
    (row[0], [row[1], row[2], row[3]])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}
