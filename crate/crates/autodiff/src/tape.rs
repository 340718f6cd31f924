//! Tensor-level reverse-mode tape.
//!
//! Every op evaluates eagerly and appends a node holding its value and the
//! operand ids needed to replay the chain rule. Nodes are only ever
//! appended, so operands always precede their results and a single reverse
//! sweep in [`Tape::backward`] visits each record once.
//!
//! Methods take `&self` (the node list sits behind a `RefCell`) so that
//! calls nest naturally: `tape.relu(tape.matmul(x, w)?)`.

use std::cell::{Ref, RefCell};

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Geometry of a square-kernel 2-D convolution over an `[H, W, C]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if hp < self.kernel || wp < self.kernel || self.stride == 0 {
            return None;
        }
        Some((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }
}

/// Affine map from metric BEV coordinates to continuous cell coordinates.
/// Cell `(c, r)` has its center at `origin + (c + 0.5, r + 0.5) * cell`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleFrame {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell: f64,
}

#[derive(Clone, Copy, Debug)]
struct BilinearTap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    // false when the coordinate was clamped, which zeroes its gradient.
    free_x: bool,
    free_y: bool,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax(Var),
    MaxLast(Var, Vec<usize>),
    SegmentMax(Var, Vec<Option<usize>>),
    Concat(Var, Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    Transpose(Var),
    Reshape(Var),
    ScaleRows(Var, Var),
    SumRowGroups(Var, usize),
    SumAll(Var),
    L1(Var, Var),
    NegLogProb(Var, Vec<usize>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Bilinear {
        grid: Var,
        points: Var,
        inv_cell: f64,
        taps: Vec<BilinearTap>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, with zeros for nodes the loss does not reach.
    pub fn get_or_zero(&self, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn last(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

/// `c = beta * c + op(a) * op(b)` for row-major operands, where `op` optionally
/// transposes. `m x k` times `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // row-major (or transposed row-major) layouts within those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Records `t` as a leaf. Gradients are tracked if `t.requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    /// Records a trainable leaf regardless of `t.requires_grad`.
    pub fn param(&self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_slice())
    }

    pub fn to_vec(&self, v: Var) -> Vec<f64> {
        self.value(v).to_vec()
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor::new(nodes[v.0].shape.clone(), nodes[v.0].value.clone())
            .expect("tape nodes hold consistent shapes")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(Var) -> Op) -> Var {
        let (shape, value, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (
                n.shape.clone(),
                n.value.iter().map(|&v| f(v)).collect(),
                n.requires_grad,
            )
        };
        self.push(shape, value, rg, op(x))
    }

    fn binary_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape != nb.shape {
                return Err(mismatch(name, &na.shape, &nb.shape));
            }
            let value = na
                .value
                .iter()
                .zip(&nb.value)
                .map(|(&x, &y)| f(x, y))
                .collect();
            (na.shape.clone(), value)
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, rg, op))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, n, value) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
                return Err(mismatch("matmul", &na.shape, &nb.shape));
            }
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &na.value, false, &nb.value, false, &mut c, 0.0);
            (m, n, c)
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], value, rg, Op::MatMul(a, b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[D]` vector to every row of `x`, whose last axis is `D`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (nx, nb) = (&nodes[x.0], &nodes[bias.0]);
            let d = last(&nx.shape);
            if nb.value.len() != d {
                return Err(mismatch("add_bias", &nx.shape, &nb.shape));
            }
            let mut out = nx.value.clone();
            for row in out.chunks_mut(d) {
                for (o, b) in row.iter_mut().zip(&nb.value) {
                    *o += b;
                }
            }
            (nx.shape.clone(), out)
        };
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, value, rg, Op::AddBias(x, bias)))
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, |x| Op::Scale(x, s))
    }

    pub fn add_scalar(&self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp)
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_lastaxis(&self, x: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            if nx.value.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::InvalidArgument {
                    op: "softmax_lastaxis",
                    reason: "non-finite input".into(),
                });
            }
            let d = last(&nx.shape);
            let mut out = nx.value.clone();
            for row in out.chunks_mut(d) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            (nx.shape.clone(), out)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::Softmax(x)))
    }

    /// Max along the last axis. Returns the reduced node and, per row, the
    /// winning index (lowest index among ties).
    pub fn max_lastaxis(&self, x: Var) -> (Var, Vec<usize>) {
        let (shape, value, args) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            let d = last(&nx.shape);
            let mut value = Vec::with_capacity(nx.value.len() / d);
            let mut args = Vec::with_capacity(nx.value.len() / d);
            for row in nx.value.chunks(d) {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = i;
                    }
                }
                value.push(row[best]);
                args.push(best);
            }
            let mut shape = nx.shape.clone();
            if shape.len() > 1 {
                shape.pop();
            } else {
                shape = vec![1];
            }
            (shape, value, args)
        };
        let rg = self.rg(&[x]);
        let out = self.push(shape, value, rg, Op::MaxLast(x, args.clone()));
        (out, args)
    }

    /// Channel-wise max over consecutive row segments of a `[R, D]` node.
    /// `offsets` has one entry per segment boundary (`G + 1` entries, starting
    /// at 0 and ending at `R`); empty segments produce zero rows.
    pub fn segment_max_rows(&self, x: Var, offsets: &[usize]) -> Result<Var> {
        let (d, value, args) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            let d = last(&nx.shape);
            let rows = nx.value.len() / d;
            let valid = offsets.first() == Some(&0)
                && offsets.last() == Some(&rows)
                && offsets.windows(2).all(|w| w[0] <= w[1]);
            if !valid {
                return Err(AutodiffError::InvalidArgument {
                    op: "segment_max_rows",
                    reason: format!("offsets do not partition {rows} rows"),
                });
            }
            let groups = offsets.len() - 1;
            let mut value = vec![0.0; groups * d];
            let mut args = vec![None; groups * d];
            for g in 0..groups {
                let (lo, hi) = (offsets[g], offsets[g + 1]);
                if lo == hi {
                    continue;
                }
                for c in 0..d {
                    let mut best = lo;
                    for r in lo + 1..hi {
                        if nx.value[r * d + c] > nx.value[best * d + c] {
                            best = r;
                        }
                    }
                    value[g * d + c] = nx.value[best * d + c];
                    args[g * d + c] = Some(best * d + c);
                }
            }
            (d, value, args)
        };
        let rg = self.rg(&[x]);
        let groups = offsets.len() - 1;
        Ok(self.push(vec![groups, d], value, rg, Op::SegmentMax(x, args)))
    }

    /// Concatenates two nodes with equal row counts along the last axis.
    pub fn concat_lastaxis(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (da, db) = (last(&na.shape), last(&nb.shape));
            let same_prefix = na.shape.len() == nb.shape.len()
                && na.shape[..na.shape.len() - 1] == nb.shape[..nb.shape.len() - 1];
            if !same_prefix {
                return Err(mismatch("concat_lastaxis", &na.shape, &nb.shape));
            }
            let rows = na.value.len() / da;
            let mut out = Vec::with_capacity(rows * (da + db));
            for r in 0..rows {
                out.extend_from_slice(&na.value[r * da..(r + 1) * da]);
                out.extend_from_slice(&nb.value[r * db..(r + 1) * db]);
            }
            let mut shape = na.shape.clone();
            *shape.last_mut().unwrap() = da + db;
            (shape, out)
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, rg, Op::Concat(a, b)))
    }

    /// Selects rows of a `[R, D]` node; indices may repeat.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let (d, value) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            let d = last(&nx.shape);
            let rows = nx.value.len() / d;
            let mut out = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                if i >= rows {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "gather_rows",
                        index: i,
                        len: rows,
                    });
                }
                out.extend_from_slice(&nx.value[i * d..(i + 1) * d]);
            }
            (d, out)
        };
        if idx.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                reason: "empty index list".into(),
            });
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![idx.len(), d], value, rg, Op::GatherRows(x, idx.to_vec())))
    }

    /// Places row `i` of a `[P, D]` node at row `positions[i]` of a zero
    /// `[total, D]` result. Positions must be unique and in range.
    pub fn scatter_rows(&self, x: Var, positions: &[usize], total: usize) -> Result<Var> {
        let (d, value) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            let d = last(&nx.shape);
            if nx.value.len() / d != positions.len() {
                return Err(mismatch("scatter_rows", &nx.shape, &[positions.len()]));
            }
            let mut out = vec![0.0; total * d];
            let mut seen = vec![false; total];
            for (r, &p) in positions.iter().enumerate() {
                if p >= total {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "scatter_rows",
                        index: p,
                        len: total,
                    });
                }
                if std::mem::replace(&mut seen[p], true) {
                    return Err(AutodiffError::InvalidArgument {
                        op: "scatter_rows",
                        reason: format!("duplicate target row {p}"),
                    });
                }
                out[p * d..(p + 1) * d].copy_from_slice(&nx.value[r * d..(r + 1) * d]);
            }
            (d, out)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(vec![total, d], value, rg, Op::ScatterRows(x, positions.to_vec())))
    }

    /// Columns `start..start + len` of a node viewed as `[rows, D]`.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            let d = last(&nx.shape);
            if len == 0 || start + len > d {
                return Err(AutodiffError::InvalidArgument {
                    op: "slice_cols",
                    reason: format!("columns {start}..{} of {d}", start + len),
                });
            }
            let value = nx
                .value
                .chunks(d)
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect();
            let mut shape = nx.shape.clone();
            *shape.last_mut().unwrap() = len;
            (shape, value)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::SliceCols(x, start)))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            if nx.shape.len() != 2 {
                return Err(mismatch("transpose", &nx.shape, &[]));
            }
            let (r, c) = (nx.shape[0], nx.shape[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = nx.value[i * c + j];
                }
            }
            (vec![c, r], out)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::Transpose(x)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            if shape.iter().product::<usize>() != nx.value.len() || shape.contains(&0) {
                return Err(mismatch("reshape", &nx.shape, shape));
            }
            nx.value.clone()
        };
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(x)))
    }

    /// Multiplies row `r` of `x` by the scalar `w[r]`.
    pub fn scale_rows(&self, x: Var, w: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (nx, nw) = (&nodes[x.0], &nodes[w.0]);
            let d = last(&nx.shape);
            if nx.value.len() / d != nw.value.len() {
                return Err(mismatch("scale_rows", &nx.shape, &nw.shape));
            }
            let mut out = nx.value.clone();
            for (row, &s) in out.chunks_mut(d).zip(&nw.value) {
                row.iter_mut().for_each(|v| *v *= s);
            }
            (nx.shape.clone(), out)
        };
        let rg = self.rg(&[x, w]);
        Ok(self.push(shape, value, rg, Op::ScaleRows(x, w)))
    }

    /// Sums each run of `group` consecutive rows: `[G * group, D] -> [G, D]`.
    pub fn sum_row_groups(&self, x: Var, group: usize) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            let d = last(&nx.shape);
            let rows = nx.value.len() / d;
            if group == 0 || rows % group != 0 {
                return Err(mismatch("sum_row_groups", &nx.shape, &[group]));
            }
            let g = rows / group;
            let mut out = vec![0.0; g * d];
            for (r, row) in nx.value.chunks(d).enumerate() {
                let o = &mut out[(r / group) * d..(r / group + 1) * d];
                for (a, b) in o.iter_mut().zip(row) {
                    *a += b;
                }
            }
            (vec![g, d], out)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::SumRowGroups(x, group)))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let value = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![value], rg, Op::SumAll(x))
    }

    /// Sum of absolute differences, as a scalar.
    pub fn l1(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.value.len() != nb.value.len() {
                return Err(mismatch("l1", &na.shape, &nb.shape));
            }
            na.value.iter().zip(&nb.value).map(|(x, y)| (x - y).abs()).sum()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![1], vec![value], rg, Op::L1(a, b)))
    }

    /// `-ln max(p[r, class[r]], PROB_FLOOR)` for each row of a probability node.
    pub fn neg_log_prob(&self, p: Var, class: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let np = &nodes[p.0];
            let d = last(&np.shape);
            let rows = np.value.len() / d;
            if rows != class.len() {
                return Err(mismatch("neg_log_prob", &np.shape, &[class.len()]));
            }
            let mut out = Vec::with_capacity(rows);
            for (r, &c) in class.iter().enumerate() {
                if c >= d {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "neg_log_prob",
                        index: c,
                        len: d,
                    });
                }
                let v = np.value[r * d + c];
                if !v.is_finite() {
                    return Err(AutodiffError::InvalidArgument {
                        op: "neg_log_prob",
                        reason: "non-finite probability".into(),
                    });
                }
                out.push(-v.max(PROB_FLOOR).ln());
            }
            out
        };
        let rg = self.rg(&[p]);
        let n = value.len();
        Ok(self.push(vec![n], value, rg, Op::NegLogProb(p, class.to_vec())))
    }

    /// 2-D convolution of an `[H, W, Cin]` map with weights laid out as
    /// `[k * k * Cin, Cout]` (kernel row, kernel column, input channel) and a
    /// `[Cout]` bias. Zero padding.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let (shape, value, cols) = {
            let nodes = self.nodes.borrow();
            let (ni, nw, nb) = (&nodes[input.0], &nodes[weight.0], &nodes[bias.0]);
            if ni.shape.len() != 3 {
                return Err(mismatch("conv2d", &ni.shape, &nw.shape));
            }
            let (h, w, cin) = (ni.shape[0], ni.shape[1], ni.shape[2]);
            let k = geom.kernel;
            if nw.shape.len() != 2 || nw.shape[0] != k * k * cin {
                return Err(mismatch("conv2d", &ni.shape, &nw.shape));
            }
            let cout = nw.shape[1];
            if nb.value.len() != cout {
                return Err(mismatch("conv2d", &nw.shape, &nb.shape));
            }
            let (ho, wo) = geom
                .output_size(h, w)
                .ok_or_else(|| mismatch("conv2d", &ni.shape, &[k, k]))?;
            let cols = im2col(&ni.value, h, w, cin, geom, ho, wo);
            let mut out = vec![0.0; ho * wo * cout];
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(&nb.value);
            }
            gemm(ho * wo, k * k * cin, cout, &cols, false, &nw.value, false, &mut out, 1.0);
            (vec![ho, wo, cout], out, cols)
        };
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// Bilinearly samples an `[H, W, C]` grid at metric `[N, 2]` points.
    /// Coordinates outside the span of cell centers are clamped to it.
    /// Differentiable with respect to both the grid and the points.
    pub fn bilinear_sample(&self, grid: Var, points: Var, frame: SampleFrame) -> Result<Var> {
        let (shape, value, taps) = {
            let nodes = self.nodes.borrow();
            let (ng, np) = (&nodes[grid.0], &nodes[points.0]);
            if ng.shape.len() != 3 || last(&np.shape) != 2 {
                return Err(mismatch("bilinear_sample", &ng.shape, &np.shape));
            }
            let (h, w, c) = (ng.shape[0], ng.shape[1], ng.shape[2]);
            let n = np.value.len() / 2;
            let mut out = vec![0.0; n * c];
            let mut taps = Vec::with_capacity(n);
            for (i, pt) in np.value.chunks(2).enumerate() {
                let u = (pt[0] - frame.origin_x) / frame.cell - 0.5;
                let v = (pt[1] - frame.origin_y) / frame.cell - 0.5;
                let (x0, x1, fx, free_x) = axis_tap(u, w);
                let (y0, y1, fy, free_y) = axis_tap(v, h);
                let tap = BilinearTap {
                    x0,
                    x1,
                    y0,
                    y1,
                    fx,
                    fy,
                    free_x,
                    free_y,
                };
                let o = &mut out[i * c..(i + 1) * c];
                for (yy, xx, wgt) in tap.corners() {
                    if wgt == 0.0 {
                        continue;
                    }
                    let cell = &ng.value[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                    for (a, b) in o.iter_mut().zip(cell) {
                        *a += wgt * b;
                    }
                }
                taps.push(tap);
            }
            (vec![n, c], out, taps)
        };
        let rg = self.rg(&[grid, points]);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Bilinear {
                grid,
                points,
                inv_cell: 1.0 / frame.cell,
                taps,
            },
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::NotScalar(nodes[loss.0].shape.clone()));
        }
        let lens: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, node, &g, &mut grads, &lens);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, lens })
    }
}

impl BilinearTap {
    fn corners(&self) -> [(usize, usize, f64); 4] {
        [
            (self.y0, self.x0, (1.0 - self.fx) * (1.0 - self.fy)),
            (self.y0, self.x1, self.fx * (1.0 - self.fy)),
            (self.y1, self.x0, (1.0 - self.fx) * self.fy),
            (self.y1, self.x1, self.fx * self.fy),
        ]
    }
}

fn axis_tap(u: f64, size: usize) -> (usize, usize, f64, bool) {
    let hi = (size - 1) as f64;
    let free = u > 0.0 && u < hi;
    let uc = u.clamp(0.0, hi);
    if size == 1 {
        return (0, 0, 0.0, false);
    }
    let i0 = (uc.floor() as usize).min(size - 2);
    (i0, i0 + 1, uc - i0 as f64, free)
}

fn im2col(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    geom: ConvGeometry,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let k = geom.kernel;
    let width = k * k * cin;
    let mut cols = vec![0.0; ho * wo * width];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * width..(oy * wo + ox + 1) * width];
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * cin;
                    let dst = (ky * k + kx) * cin;
                    row[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    geom: ConvGeometry,
    ho: usize,
    wo: usize,
    dinput: &mut [f64],
) {
    let k = geom.kernel;
    let width = k * k * cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &dcols[(oy * wo + ox) * width..(oy * wo + ox + 1) * width];
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * cin;
                    let src = (ky * k + kx) * cin;
                    for c in 0..cin {
                        dinput[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

fn backprop(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    lens: &[usize],
) {
    let wants = |v: Var| nodes[v.0].requires_grad;
    macro_rules! acc {
        ($v:expr, $f:expr) => {{
            let v: Var = $v;
            if wants(v) {
                accumulate(&mut grads[v.0], lens[v.0], $f);
            }
        }};
    }
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            acc!(*a, |ga| gemm(m, n, k, g, false, &nb.value, true, ga, 1.0));
            acc!(*b, |gb| gemm(k, m, n, &na.value, true, g, false, gb, 1.0));
        }
        Op::Add(a, b) => {
            acc!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc!(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::Sub(a, b) => {
            acc!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc!(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            acc!(*a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * vb[i];
                }
            });
            acc!(*b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * va[i];
                }
            });
        }
        Op::AddBias(x, b) => {
            acc!(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, y)| *a += y));
            acc!(*b, |gb| {
                let d = gb.len();
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                }
            });
        }
        Op::Scale(x, s) => acc!(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, y)| *a += s * y)),
        Op::AddScalar(x) => acc!(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, y)| *a += y)),
        Op::Relu(x) => {
            let vx = &nodes[x.0].value;
            acc!(*x, |gx| {
                for i in 0..gx.len() {
                    if vx[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            acc!(*x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Exp(x) => {
            let y = &node.value;
            acc!(*x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * y[i];
                }
            });
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let d = last(&node.shape);
            acc!(*x, |gx| {
                for ((gr, yr), xr) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        xr[i] += yr[i] * (gr[i] - dot);
                    }
                }
            });
        }
        Op::MaxLast(x, args) => {
            let d = last(&nodes[x.0].shape);
            acc!(*x, |gx| {
                for (r, &a) in args.iter().enumerate() {
                    gx[r * d + a] += g[r];
                }
            });
        }
        Op::SegmentMax(x, args) => acc!(*x, |gx| {
            for (o, a) in args.iter().enumerate() {
                if let Some(src) = a {
                    gx[*src] += g[o];
                }
            }
        }),
        Op::Concat(a, b) => {
            let (da, db) = (last(&nodes[a.0].shape), last(&nodes[b.0].shape));
            acc!(*a, |ga| {
                for (r, row) in g.chunks(da + db).enumerate() {
                    for i in 0..da {
                        ga[r * da + i] += row[i];
                    }
                }
            });
            acc!(*b, |gb| {
                for (r, row) in g.chunks(da + db).enumerate() {
                    for i in 0..db {
                        gb[r * db + i] += row[da + i];
                    }
                }
            });
        }
        Op::GatherRows(x, idx) => {
            let d = last(&node.shape);
            acc!(*x, |gx| {
                for (o, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        gx[i * d + c] += g[o * d + c];
                    }
                }
            });
        }
        Op::ScatterRows(x, positions) => {
            let d = last(&node.shape);
            acc!(*x, |gx| {
                for (r, &p) in positions.iter().enumerate() {
                    for c in 0..d {
                        gx[r * d + c] += g[p * d + c];
                    }
                }
            });
        }
        Op::SliceCols(x, start) => {
            let dx = last(&nodes[x.0].shape);
            let len = last(&node.shape);
            acc!(*x, |gx| {
                for (r, row) in g.chunks(len).enumerate() {
                    for i in 0..len {
                        gx[r * dx + start + i] += row[i];
                    }
                }
            });
        }
        Op::Transpose(x) => {
            let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
            acc!(*x, |gx| {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Reshape(x) => acc!(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, y)| *a += y)),
        Op::ScaleRows(x, w) => {
            let d = last(&node.shape);
            let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
            acc!(*x, |gx| {
                for (r, &s) in vw.iter().enumerate() {
                    for c in 0..d {
                        gx[r * d + c] += g[r * d + c] * s;
                    }
                }
            });
            acc!(*w, |gw| {
                for (r, gr) in gw.iter_mut().enumerate() {
                    let row = &vx[r * d..(r + 1) * d];
                    *gr += row.iter().zip(&g[r * d..(r + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                }
            });
        }
        Op::SumRowGroups(x, group) => {
            let d = last(&node.shape);
            acc!(*x, |gx| {
                for (r, row) in gx.chunks_mut(d).enumerate() {
                    let src = &g[(r / group) * d..(r / group + 1) * d];
                    row.iter_mut().zip(src).for_each(|(a, y)| *a += y);
                }
            });
        }
        Op::SumAll(x) => acc!(*x, |gx| gx.iter_mut().for_each(|a| *a += g[0])),
        Op::L1(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let sign = |i: usize| {
                let d = va[i] - vb[i];
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            };
            acc!(*a, |ga| (0..ga.len()).for_each(|i| ga[i] += g[0] * sign(i)));
            acc!(*b, |gb| (0..gb.len()).for_each(|i| gb[i] -= g[0] * sign(i)));
        }
        Op::NegLogProb(p, class) => {
            let d = last(&nodes[p.0].shape);
            let vp = &nodes[p.0].value;
            acc!(*p, |gp| {
                for (r, &c) in class.iter().enumerate() {
                    let v = vp[r * d + c];
                    if v > PROB_FLOOR {
                        gp[r * d + c] -= g[r] / v;
                    }
                }
            });
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            let ni = &nodes[input.0];
            let (h, w, cin) = (ni.shape[0], ni.shape[1], ni.shape[2]);
            let (ho, wo, cout) = (node.shape[0], node.shape[1], node.shape[2]);
            let width = geom.kernel * geom.kernel * cin;
            acc!(*bias, |gb| {
                for row in g.chunks(cout) {
                    gb.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                }
            });
            acc!(*weight, |gw| gemm(width, ho * wo, cout, cols, true, g, false, gw, 1.0));
            if wants(*input) {
                let mut dcols = vec![0.0; ho * wo * width];
                gemm(ho * wo, cout, width, g, false, &nodes[weight.0].value, true, &mut dcols, 0.0);
                acc!(*input, |gi| col2im(&dcols, h, w, cin, *geom, ho, wo, gi));
            }
        }
        Op::Bilinear {
            grid,
            points,
            inv_cell,
            taps,
        } => {
            let ng = &nodes[grid.0];
            let (w, c) = (ng.shape[1], ng.shape[2]);
            acc!(*grid, |gg| {
                for (i, tap) in taps.iter().enumerate() {
                    let gi = &g[i * c..(i + 1) * c];
                    for (yy, xx, wgt) in tap.corners() {
                        if wgt == 0.0 {
                            continue;
                        }
                        let cell = &mut gg[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                        cell.iter_mut().zip(gi).for_each(|(a, y)| *a += wgt * y);
                    }
                }
            });
            let gv = &ng.value;
            acc!(*points, |gp| {
                let at = |yy: usize, xx: usize| &gv[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                for (i, tap) in taps.iter().enumerate() {
                    let gi = &g[i * c..(i + 1) * c];
                    let (v00, v01) = (at(tap.y0, tap.x0), at(tap.y0, tap.x1));
                    let (v10, v11) = (at(tap.y1, tap.x0), at(tap.y1, tap.x1));
                    let mut du = 0.0;
                    let mut dv = 0.0;
                    for ch in 0..c {
                        let dfx = (1.0 - tap.fy) * (v01[ch] - v00[ch]) + tap.fy * (v11[ch] - v10[ch]);
                        let dfy = (1.0 - tap.fx) * (v10[ch] - v00[ch]) + tap.fx * (v11[ch] - v01[ch]);
                        du += gi[ch] * dfx;
                        dv += gi[ch] * dfy;
                    }
                    if tap.free_x {
                        gp[2 * i] += du * inv_cell;
                    }
                    if tap.free_y {
                        gp[2 * i + 1] += dv * inv_cell;
                    }
                }
            });
        }
    }
}
