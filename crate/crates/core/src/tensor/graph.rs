//! Dynamic tape: each operation appends a node holding its output value and
//! enough structure to push gradients back to its inputs. A fresh graph is
//! built per forward pass and dropped afterwards; parameters enter as leaves
//! and their gradients are read back out after [`Graph::backward`].

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Handle to a node in one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `a[m,k] * b[k,n]`
    Matmul { a: Var, b: Var },
    /// `a[m,k] * b[n,k]^T`
    MatmulNt { a: Var, b: Var },
    /// `x[m,k] * w[k,n] + bias[n]` broadcast over rows
    Linear { x: Var, w: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Exp { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
    L2NormalizeRows { x: Var, eps: f64 },
    SoftmaxRows { x: Var },
    /// Mean over rows of `logsumexp(row) - row[target]`.
    LogSoftmaxCrossEntropy { logits: Var, targets: Vec<usize> },
    /// `out[r, :] = x[idx[r], :]`
    GatherRows { x: Var, idx: Vec<usize> },
    /// Vector `[d]` repeated as `copies` rows.
    TileRows { x: Var },
    /// Column vectors `[n]` stacked into `[n, parts.len()]`.
    StackCols { parts: Vec<Var> },
    /// Column `j` of a matrix as `[rows]`.
    Col { x: Var, j: usize },
    /// `out[r, c] = x[r, c] * w[r]`
    MulCol { x: Var, w: Var },
    /// `out[r, c] = w[r]*a[r, c] + (1 - w[r])*b[r, c]`
    Lerp { a: Var, b: Var, w: Var },
    /// `x` times a one-element tensor.
    MulScalar { x: Var, s: Var },
    /// One-element tensor repeated into `[n]`.
    BroadcastScalar { s: Var },
    /// Single element at flat offset `i`, as a scalar.
    Pick { x: Var, i: usize },
    Transpose { x: Var },
    Reshape { x: Var },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── Leaves and accessors ────────────────────────────────────────────

    /// Copies a tensor into the graph; tracks gradients per its flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Non-differentiable input built in place.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim(format!("constant shape {shape:?} vs {} values", data.len())));
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(vec![], vec![x], false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn item(&self, v: Var) -> f64 {
        debug_assert_eq!(self.numel(v), 1);
        self.nodes[v.0].data[0]
    }

    /// Detached copy of a node's value.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node shape is consistent by construction")
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        match n.shape.len() {
            2 => (n.shape[0], n.shape[1]),
            1 => (1, n.shape[0]),
            _ => (1, 1),
        }
    }

    fn want_matrix(&self, v: Var, ctx: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::dim(format!("{ctx}: expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn want_vector(&self, v: Var, ctx: &str) -> Result<usize> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 1 {
            return Err(Error::dim(format!("{ctx}: expected a vector, got shape {s:?}")));
        }
        Ok(s[0])
    }

    // ── Products ────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.want_matrix(a, "matmul lhs")?;
        let (kb, n) = self.want_matrix(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::dim(format!("matmul inner dims {ka} vs {kb}")));
        }
        let data = linalg::matmul_nn(self.value(a), self.value(b), m, ka, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], data, rg, Op::Matmul { a, b }))
    }

    /// `a * b^T` where `b` is stored `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.want_matrix(a, "matmul_nt lhs")?;
        let (n, kb) = self.want_matrix(b, "matmul_nt rhs")?;
        if ka != kb {
            return Err(Error::dim(format!("matmul_nt inner dims {ka} vs {kb}")));
        }
        let data = linalg::matmul_nt(self.value(a), self.value(b), m, ka, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], data, rg, Op::MatmulNt { a, b }))
    }

    /// Affine layer `x*w + bias`, bias broadcast across rows.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (m, kx) = self.want_matrix(x, "linear input")?;
        let (kw, n) = self.want_matrix(w, "linear weight")?;
        let nb = self.want_vector(bias, "linear bias")?;
        if kx != kw || nb != n {
            return Err(Error::dim(format!(
                "linear shapes: x[{m},{kx}] w[{kw},{n}] bias[{nb}]"
            )));
        }
        let mut data = linalg::matmul_nn(self.value(x), self.value(w), m, kx, n);
        let bv = self.value(bias);
        for row in data.chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(bias);
        Ok(self.push(vec![m, n], data, rg, Op::Linear { x, w, bias }))
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::dim(format!(
                "{name}: shapes {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.requires(x);
        self.push(self.nodes[x.0].shape.clone(), data, rg, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|v| v + c).collect();
        let rg = self.requires(x);
        self.push(self.nodes[x.0].shape.clone(), data, rg, Op::AddScalar { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|v| v.exp()).collect();
        let rg = self.requires(x);
        self.push(self.nodes[x.0].shape.clone(), data, rg, Op::Exp { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.requires(x);
        self.push(self.nodes[x.0].shape.clone(), data, rg, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        let rg = self.requires(x);
        self.push(self.nodes[x.0].shape.clone(), data, rg, Op::Sigmoid { x })
    }

    // ── Reductions ──────────────────────────────────────────────────────

    fn reduce_shape(&self, x: Var, axis: Option<usize>, name: &str) -> Result<Vec<usize>> {
        let s = &self.nodes[x.0].shape;
        match (s.len(), axis) {
            (_, None) => Ok(vec![]),
            (1, Some(0)) => Ok(vec![]),
            (2, Some(0)) => Ok(vec![s[1]]),
            (2, Some(1)) => Ok(vec![s[0]]),
            (_, Some(a)) => Err(Error::dim(format!("{name}: axis {a} on shape {s:?}"))),
        }
    }

    fn reduce_data(&self, x: Var, axis: Option<usize>, mean: bool) -> Vec<f64> {
        let v = self.value(x);
        let (r, c) = self.rows_cols(x);
        let scale = |total: f64, count: usize| if mean { total / count as f64 } else { total };
        match (self.nodes[x.0].shape.len(), axis) {
            (_, None) | (1, Some(0)) => {
                vec![scale(v.iter().sum(), v.len().max(1))]
            }
            (2, Some(0)) => {
                let mut out = vec![0.0; c];
                for row in v.chunks_exact(c) {
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                out.iter_mut().for_each(|o| *o = scale(*o, r));
                out
            }
            (2, Some(1)) => v.chunks_exact(c).map(|row| scale(row.iter().sum(), c)).collect(),
            _ => unreachable!("validated by reduce_shape"),
        }
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.reduce_shape(x, axis, "sum")?;
        let data = self.reduce_data(x, axis, false);
        let rg = self.requires(x);
        Ok(self.push(shape, data, rg, Op::Sum { x, axis }))
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.reduce_shape(x, axis, "mean")?;
        let data = self.reduce_data(x, axis, true);
        let rg = self.requires(x);
        Ok(self.push(shape, data, rg, Op::Mean { x, axis }))
    }

    // ── Row-wise normalization and softmax ──────────────────────────────

    /// Divides each row by `max(||row||, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.is_empty() {
            return Err(Error::dim("l2_normalize_rows: scalar input"));
        }
        let (_, c) = self.rows_cols(x);
        let mut data = self.value(x).to_vec();
        for row in data.chunks_exact_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let rg = self.requires(x);
        Ok(self.push(s.clone(), data, rg, Op::L2NormalizeRows { x, eps }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.want_matrix(x, "softmax_rows")?;
        let (_, c) = self.rows_cols(x);
        let mut data = self.value(x).to_vec();
        for row in data.chunks_exact_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.requires(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, rg, Op::SoftmaxRows { x }))
    }

    /// Mean cross-entropy between row-wise softmax of `logits` and integer
    /// targets. Row maxima are subtracted before exponentiation, so large
    /// logits do not overflow.
    pub fn log_softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.want_matrix(logits, "cross entropy logits")?;
        if targets.len() != b {
            return Err(Error::dim(format!("{} targets for {b} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("target class {bad} out of {c}")));
        }
        let v = self.value(logits);
        let mut total = 0.0;
        for (row, &t) in v.chunks_exact(c).zip(targets) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let rg = self.requires(logits);
        Ok(self.push(
            vec![],
            vec![total / b as f64],
            rg,
            Op::LogSoftmaxCrossEntropy { logits, targets: targets.to_vec() },
        ))
    }

    // ── Structure ───────────────────────────────────────────────────────

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.want_matrix(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("gather row {bad} out of {r}")));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let rg = self.requires(x);
        Ok(self.push(vec![idx.len(), c], data, rg, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Repeats a vector `[d]` into a matrix `[copies, d]`.
    pub fn tile_rows(&mut self, x: Var, copies: usize) -> Result<Var> {
        let d = self.want_vector(x, "tile_rows")?;
        let v = self.value(x);
        let mut data = Vec::with_capacity(copies * d);
        for _ in 0..copies {
            data.extend_from_slice(v);
        }
        let rg = self.requires(x);
        Ok(self.push(vec![copies, d], data, rg, Op::TileRows { x }))
    }

    pub fn stack_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("stack_cols: no inputs"));
        }
        let n = self.want_vector(parts[0], "stack_cols")?;
        for &p in parts {
            if self.want_vector(p, "stack_cols")? != n {
                return Err(Error::dim("stack_cols: length mismatch"));
            }
        }
        let k = parts.len();
        let mut data = vec![0.0; n * k];
        for (j, &p) in parts.iter().enumerate() {
            for (r, &v) in self.value(p).iter().enumerate() {
                data[r * k + j] = v;
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(vec![n, k], data, rg, Op::StackCols { parts: parts.to_vec() }))
    }

    pub fn col(&mut self, x: Var, j: usize) -> Result<Var> {
        let (r, c) = self.want_matrix(x, "col")?;
        if j >= c {
            return Err(Error::Index(format!("column {j} out of {c}")));
        }
        let v = self.value(x);
        let data: Vec<f64> = (0..r).map(|i| v[i * c + j]).collect();
        let rg = self.requires(x);
        Ok(self.push(vec![r], data, rg, Op::Col { x, j }))
    }

    /// Scales row `r` of `x` by `w[r]`.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = self.want_matrix(x, "mul_col")?;
        let wn = self.want_vector(w, "mul_col weights")?;
        if wn != r {
            return Err(Error::dim(format!("mul_col: {r} rows vs {wn} weights")));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut data = Vec::with_capacity(r * c);
        for (row, &wr) in xv.chunks_exact(c).zip(wv) {
            data.extend(row.iter().map(|v| v * wr));
        }
        let rg = self.requires(x) || self.requires(w);
        Ok(self.push(vec![r, c], data, rg, Op::MulCol { x, w }))
    }

    /// Row-wise convex mix `w[r]*a + (1-w[r])*b`.
    pub fn lerp(&mut self, a: Var, b: Var, w: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "lerp")?;
        let (r, c) = self.want_matrix(a, "lerp")?;
        let wn = self.want_vector(w, "lerp weights")?;
        if wn != r {
            return Err(Error::dim(format!("lerp: {r} rows vs {wn} weights")));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let wv = self.value(w);
        let mut data = Vec::with_capacity(r * c);
        for ((ra, rb), &wr) in av.chunks_exact(c).zip(bv.chunks_exact(c)).zip(wv) {
            data.extend(ra.iter().zip(rb).map(|(x, y)| wr * x + (1.0 - wr) * y));
        }
        let rg = self.requires(a) || self.requires(b) || self.requires(w);
        Ok(self.push(vec![r, c], data, rg, Op::Lerp { a, b, w }))
    }

    /// Multiplies every element of `x` by a one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.numel(s) != 1 {
            return Err(Error::dim(format!("mul_scalar: scale has shape {:?}", self.shape(s))));
        }
        let sv = self.item(s);
        let data: Vec<f64> = self.value(x).iter().map(|v| v * sv).collect();
        let rg = self.requires(x) || self.requires(s);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, rg, Op::MulScalar { x, s }))
    }

    pub fn broadcast_scalar(&mut self, s: Var, n: usize) -> Result<Var> {
        if self.numel(s) != 1 {
            return Err(Error::dim(format!(
                "broadcast_scalar: source has shape {:?}",
                self.shape(s)
            )));
        }
        let sv = self.item(s);
        let rg = self.requires(s);
        Ok(self.push(vec![n], vec![sv; n], rg, Op::BroadcastScalar { s }))
    }

    /// Extracts the element at flat offset `i` as a scalar node.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        if i >= self.numel(x) {
            return Err(Error::Index(format!("pick {i} out of {}", self.numel(x))));
        }
        let v = self.value(x)[i];
        let rg = self.requires(x);
        Ok(self.push(vec![], vec![v], rg, Op::Pick { x, i }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.want_matrix(x, "transpose")?;
        let v = self.value(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.requires(x);
        Ok(self.push(vec![c, r], data, rg, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(Error::dim(format!(
                "reshape {:?} -> {shape:?}",
                self.nodes[x.0].shape
            )));
        }
        let data = self.value(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(shape, data, rg, Op::Reshape { x }))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a one-element node. Gradients of every node that
    /// requires them are accumulated in reverse insertion order, which is a
    /// valid topological order for a tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::dim(format!(
                "backward from non-scalar node of shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].data[0].is_finite() {
            return Err(Error::numeric("backward from non-finite loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.push_back(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass for `v`, if one was accumulated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn accumulate<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        target: Var,
        len: usize,
    ) -> &'a mut [f64] {
        grads[target.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
    }

    fn push_back(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = self.rows_cols(*a);
                let n = self.rows_cols(*b).1;
                if self.requires(*a) {
                    let da = Self::accumulate(grads, *a, m * k);
                    linalg::matmul_nt_acc(da, g, self.value(*b), m, n, k);
                }
                if self.requires(*b) {
                    let db = Self::accumulate(grads, *b, k * n);
                    linalg::matmul_tn_acc(db, self.value(*a), g, k, m, n);
                }
            }

            Op::MatmulNt { a, b } => {
                let (m, k) = self.rows_cols(*a);
                let n = self.rows_cols(*b).0;
                if self.requires(*a) {
                    let da = Self::accumulate(grads, *a, m * k);
                    linalg::matmul_nn_acc(da, g, self.value(*b), m, n, k);
                }
                if self.requires(*b) {
                    let db = Self::accumulate(grads, *b, n * k);
                    linalg::matmul_tn_acc(db, g, self.value(*a), n, m, k);
                }
            }

            Op::Linear { x, w, bias } => {
                let (m, k) = self.rows_cols(*x);
                let n = self.rows_cols(*w).1;
                if self.requires(*x) {
                    let dx = Self::accumulate(grads, *x, m * k);
                    linalg::matmul_nt_acc(dx, g, self.value(*w), m, n, k);
                }
                if self.requires(*w) {
                    let dw = Self::accumulate(grads, *w, k * n);
                    linalg::matmul_tn_acc(dw, self.value(*x), g, k, m, n);
                }
                if self.requires(*bias) {
                    let db = Self::accumulate(grads, *bias, n);
                    for row in g.chunks_exact(n) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }

            Op::Add { a, b } => {
                for &(v, sign) in &[(*a, 1.0), (*b, 1.0)] {
                    if self.requires(v) {
                        let d = Self::accumulate(grads, v, g.len());
                        for (di, gi) in d.iter_mut().zip(g) {
                            *di += sign * gi;
                        }
                    }
                }
            }

            Op::Sub { a, b } => {
                for &(v, sign) in &[(*a, 1.0), (*b, -1.0)] {
                    if self.requires(v) {
                        let d = Self::accumulate(grads, v, g.len());
                        for (di, gi) in d.iter_mut().zip(g) {
                            *di += sign * gi;
                        }
                    }
                }
            }

            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let bv = self.value(*b);
                    let da = Self::accumulate(grads, *a, g.len());
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if self.requires(*b) {
                    let av = self.value(*a);
                    let db = Self::accumulate(grads, *b, g.len());
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }

            Op::Scale { x, c } => {
                if self.requires(*x) {
                    let d = Self::accumulate(grads, *x, g.len());
                    for (di, gi) in d.iter_mut().zip(g) {
                        *di += c * gi;
                    }
                }
            }

            Op::AddScalar { x } => {
                if self.requires(*x) {
                    let d = Self::accumulate(grads, *x, g.len());
                    for (di, gi) in d.iter_mut().zip(g) {
                        *di += gi;
                    }
                }
            }

            Op::Exp { x } => {
                if self.requires(*x) {
                    let out = &node.data;
                    let d = Self::accumulate(grads, *x, g.len());
                    for ((di, gi), oi) in d.iter_mut().zip(g).zip(out) {
                        *di += gi * oi;
                    }
                }
            }

            Op::Relu { x } => {
                if self.requires(*x) {
                    let xv = self.value(*x);
                    let d = Self::accumulate(grads, *x, g.len());
                    for ((di, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *di += gi;
                        }
                    }
                }
            }

            Op::Sigmoid { x } => {
                if self.requires(*x) {
                    let out = &node.data;
                    let d = Self::accumulate(grads, *x, g.len());
                    for ((di, gi), oi) in d.iter_mut().zip(g).zip(out) {
                        *di += gi * oi * (1.0 - oi);
                    }
                }
            }

            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                if !self.requires(*x) {
                    return;
                }
                let mean = matches!(node.op, Op::Mean { .. });
                let (r, c) = self.rows_cols(*x);
                let xlen = self.numel(*x);
                let x_is_matrix = self.nodes[x.0].shape.len() == 2;
                let d = Self::accumulate(grads, *x, xlen);
                match (x_is_matrix, axis) {
                    (_, None) | (false, Some(0)) => {
                        let s = g[0] / if mean { xlen as f64 } else { 1.0 };
                        d.iter_mut().for_each(|di| *di += s);
                    }
                    (true, Some(0)) => {
                        let denom = if mean { r as f64 } else { 1.0 };
                        for row in d.chunks_exact_mut(c) {
                            for (di, gj) in row.iter_mut().zip(g) {
                                *di += gj / denom;
                            }
                        }
                    }
                    (true, Some(1)) => {
                        let denom = if mean { c as f64 } else { 1.0 };
                        for (row, gi) in d.chunks_exact_mut(c).zip(g) {
                            row.iter_mut().for_each(|di| *di += gi / denom);
                        }
                    }
                    _ => unreachable!("validated at construction"),
                }
            }

            Op::L2NormalizeRows { x, eps } => {
                if !self.requires(*x) {
                    return;
                }
                let (_, c) = self.rows_cols(*x);
                let xv = self.value(*x);
                let yv = &node.data;
                let d = Self::accumulate(grads, *x, xv.len());
                for (((dr, gr), xr), yr) in d
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(xv.chunks_exact(c))
                    .zip(yv.chunks_exact(c))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gi)| y * gi).sum();
                        for ((di, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *di += (gi - yi * dot) / norm;
                        }
                    } else {
                        for (di, gi) in dr.iter_mut().zip(gr) {
                            *di += gi / eps;
                        }
                    }
                }
            }

            Op::SoftmaxRows { x } => {
                if !self.requires(*x) {
                    return;
                }
                let (_, c) = self.rows_cols(*x);
                let p = &node.data;
                let d = Self::accumulate(grads, *x, p.len());
                for ((dr, gr), pr) in
                    d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(p.chunks_exact(c))
                {
                    let dot: f64 = pr.iter().zip(gr).map(|(pi, gi)| pi * gi).sum();
                    for ((di, gi), pi) in dr.iter_mut().zip(gr).zip(pr) {
                        *di += pi * (gi - dot);
                    }
                }
            }

            Op::LogSoftmaxCrossEntropy { logits, targets } => {
                if !self.requires(*logits) {
                    return;
                }
                let (b, c) = self.rows_cols(*logits);
                let v = self.value(*logits);
                let scale = g[0] / b as f64;
                let d = Self::accumulate(grads, *logits, v.len());
                for ((dr, row), &t) in
                    d.chunks_exact_mut(c).zip(v.chunks_exact(c)).zip(targets)
                {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                    for (j, (di, xj)) in dr.iter_mut().zip(row).enumerate() {
                        let p = (xj - m).exp() / z;
                        let ind = if j == t { 1.0 } else { 0.0 };
                        *di += (p - ind) * scale;
                    }
                }
            }

            Op::GatherRows { x, idx } => {
                if self.requires(*x) {
                    let c = self.rows_cols(*x).1;
                    let xlen = self.numel(*x);
                    let d = Self::accumulate(grads, *x, xlen);
                    for (gr, &src) in g.chunks_exact(c).zip(idx) {
                        for (di, gi) in d[src * c..(src + 1) * c].iter_mut().zip(gr) {
                            *di += gi;
                        }
                    }
                }
            }

            Op::TileRows { x } => {
                if self.requires(*x) {
                    let dlen = self.numel(*x);
                    let d = Self::accumulate(grads, *x, dlen);
                    for gr in g.chunks_exact(dlen) {
                        for (di, gi) in d.iter_mut().zip(gr) {
                            *di += gi;
                        }
                    }
                }
            }

            Op::StackCols { parts } => {
                let k = parts.len();
                for (j, &p) in parts.iter().enumerate() {
                    if self.requires(p) {
                        let n = self.numel(p);
                        let d = Self::accumulate(grads, p, n);
                        for (r, di) in d.iter_mut().enumerate() {
                            *di += g[r * k + j];
                        }
                    }
                }
            }

            Op::Col { x, j } => {
                if self.requires(*x) {
                    let (_, c) = self.rows_cols(*x);
                    let xlen = self.numel(*x);
                    let d = Self::accumulate(grads, *x, xlen);
                    for (r, gi) in g.iter().enumerate() {
                        d[r * c + j] += gi;
                    }
                }
            }

            Op::MulCol { x, w } => {
                let (_, c) = self.rows_cols(*x);
                if self.requires(*x) {
                    let wv = self.value(*w);
                    let d = Self::accumulate(grads, *x, self.numel(*x));
                    for ((dr, gr), &wr) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(wv)
                    {
                        for (di, gi) in dr.iter_mut().zip(gr) {
                            *di += gi * wr;
                        }
                    }
                }
                if self.requires(*w) {
                    let xv = self.value(*x);
                    let d = Self::accumulate(grads, *w, self.numel(*w));
                    for ((dw, gr), xr) in
                        d.iter_mut().zip(g.chunks_exact(c)).zip(xv.chunks_exact(c))
                    {
                        *dw += gr.iter().zip(xr).map(|(gi, xi)| gi * xi).sum::<f64>();
                    }
                }
            }

            Op::Lerp { a, b, w } => {
                let (_, c) = self.rows_cols(*a);
                let wv = self.value(*w);
                if self.requires(*a) {
                    let d = Self::accumulate(grads, *a, self.numel(*a));
                    for ((dr, gr), &wr) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(wv)
                    {
                        for (di, gi) in dr.iter_mut().zip(gr) {
                            *di += gi * wr;
                        }
                    }
                }
                if self.requires(*b) {
                    let d = Self::accumulate(grads, *b, self.numel(*b));
                    for ((dr, gr), &wr) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(wv)
                    {
                        for (di, gi) in dr.iter_mut().zip(gr) {
                            *di += gi * (1.0 - wr);
                        }
                    }
                }
                if self.requires(*w) {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let d = Self::accumulate(grads, *w, self.numel(*w));
                    for (((dw, gr), ar), br) in d
                        .iter_mut()
                        .zip(g.chunks_exact(c))
                        .zip(av.chunks_exact(c))
                        .zip(bv.chunks_exact(c))
                    {
                        *dw += gr
                            .iter()
                            .zip(ar.iter().zip(br))
                            .map(|(gi, (ai, bi))| gi * (ai - bi))
                            .sum::<f64>();
                    }
                }
            }

            Op::MulScalar { x, s } => {
                if self.requires(*x) {
                    let sv = self.item(*s);
                    let d = Self::accumulate(grads, *x, g.len());
                    for (di, gi) in d.iter_mut().zip(g) {
                        *di += gi * sv;
                    }
                }
                if self.requires(*s) {
                    let xv = self.value(*x);
                    let d = Self::accumulate(grads, *s, 1);
                    d[0] += g.iter().zip(xv).map(|(gi, xi)| gi * xi).sum::<f64>();
                }
            }

            Op::BroadcastScalar { s } => {
                if self.requires(*s) {
                    let d = Self::accumulate(grads, *s, 1);
                    d[0] += g.iter().sum::<f64>();
                }
            }

            Op::Pick { x, i } => {
                if self.requires(*x) {
                    let d = Self::accumulate(grads, *x, self.numel(*x));
                    d[*i] += g[0];
                }
            }

            Op::Transpose { x } => {
                if self.requires(*x) {
                    let (r, c) = self.rows_cols(*x);
                    let d = Self::accumulate(grads, *x, r * c);
                    // g has shape [c, r]
                    for j in 0..c {
                        for i in 0..r {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }

            Op::Reshape { x } => {
                if self.requires(*x) {
                    let d = Self::accumulate(grads, *x, g.len());
                    for (di, gi) in d.iter_mut().zip(g) {
                        *di += gi;
                    }
                }
            }
        }
    }
}
