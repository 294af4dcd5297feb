//! Reverse-mode differentiation over a closed set of dense primitives.
//!
//! Values are evaluated eagerly as operations are pushed onto the tape.
//! `backward` emits gradient computations as *new tape nodes*, so gradients
//! are themselves differentiable — running `backward` on a node produced by
//! a previous `backward` yields exact second-order derivatives. The bi-level
//! machinery relies on this to differentiate through an unrolled descent step.
//!
//! All tensors are dense row-major `rows x cols` matrices in double
//! precision. Scalars are `1x1`, row vectors `1xn`.

use std::rc::Rc;

use ndarray::Array2;
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("non-finite value produced by primitive `{op}` (node {node})")]
    NonFinite { op: &'static str, node: NodeId },
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("gradient requested for node that is not a scalar (shape {rows}x{cols})")]
    NonScalarOutput { rows: usize, cols: usize },
}

/// Recorded primitive operation. The set is closed: anything else must be
/// composed from these, which keeps every backward rule auditable.
#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Constant,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Relu,
    /// x * ln(x) with the convention 0 * ln 0 = 0.
    XLogX,
    ClampMin(f64),
    AddScalar(f64),
    MulScalar(f64),
    SumAll,
    /// (m,n) -> (1,n)
    SumRows,
    /// (m,n) -> (m,1)
    SumCols,
    /// (1,n) -> (m,n)
    RepeatRows(usize),
    /// (m,1) -> (m,n)
    RepeatCols(usize),
    /// (1,1) -> (m,n)
    BroadcastScalar(usize, usize),
    /// out.flat[o] = in.flat[idx[o]], or 0 where idx[o] < 0.
    Gather {
        idx: Rc<Vec<i64>>,
        rows: usize,
        cols: usize,
    },
    /// out.flat[idx[i]] += in.flat[i]; entries with idx[i] < 0 are dropped.
    ScatterAdd {
        idx: Rc<Vec<i64>>,
        rows: usize,
        cols: usize,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Relu => "relu",
            Op::XLogX => "xlogx",
            Op::ClampMin(_) => "clamp_min",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::SumAll => "sum_all",
            Op::SumRows => "sum_rows",
            Op::SumCols => "sum_cols",
            Op::RepeatRows(_) => "repeat_rows",
            Op::RepeatCols(_) => "repeat_cols",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Array2<f64>,
}

/// A Wengert list of primitive operations with eagerly computed values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[(0, 0)]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id].value.dim()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Array2<f64>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, inputs, value });
        id
    }

    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Input, vec![], value)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Constant, vec![], value)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn zeros_const(&mut self, rows: usize, cols: usize) -> NodeId {
        self.constant(Array2::zeros((rows, cols)))
    }

    /// Re-creates a node's value as a gradient-blocking constant.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (am, ak) = self.shape(a);
        let (bk, bn) = self.shape(b);
        assert_eq!(ak, bk, "matmul inner dims {}x{} . {}x{}", am, ak, bk, bn);
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(Op::MatMul, vec![a, b], v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.t().to_owned();
        self.push(Op::Transpose, vec![a], v)
    }

    fn binary_same_shape(&mut self, op: Op, a: NodeId, b: NodeId, f: fn(f64, f64) -> f64) -> NodeId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{} operand shapes differ",
            op.name()
        );
        let mut v = self.nodes[a].value.clone();
        v.zip_mut_with(&self.nodes[b].value, |x, &y| *x = f(*x, y));
        self.push(op, vec![a, b], v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(Op::Div, a, b, |x, y| x / y)
    }

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.nodes[a].value.mapv(f);
        self.push(op, vec![a], v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log, a, f64::ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sqrt, a, f64::sqrt)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu, a, |x| x.max(0.0))
    }

    pub fn xlogx(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::XLogX, a, |x| if x == 0.0 { 0.0 } else { x * x.ln() })
    }

    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::ClampMin(c), a, move |x| x.max(c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::AddScalar(c), a, move |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::MulScalar(c), a, move |x| x * c)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.sum();
        self.push(Op::SumAll, vec![a], Array2::from_elem((1, 1), s))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let (_, n) = self.shape(a);
        let v = self
            .nodes[a]
            .value
            .sum_axis(ndarray::Axis(0))
            .into_shape((1, n))
            .unwrap();
        self.push(Op::SumRows, vec![a], v)
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let (m, _) = self.shape(a);
        let v = self
            .nodes[a]
            .value
            .sum_axis(ndarray::Axis(1))
            .into_shape((m, 1))
            .unwrap();
        self.push(Op::SumCols, vec![a], v)
    }

    pub fn repeat_rows(&mut self, a: NodeId, m: usize) -> NodeId {
        let (r, n) = self.shape(a);
        assert_eq!(r, 1, "repeat_rows expects a 1xn input");
        let row = self.nodes[a].value.row(0).to_owned();
        let v = Array2::from_shape_fn((m, n), |(_, j)| row[j]);
        self.push(Op::RepeatRows(m), vec![a], v)
    }

    pub fn repeat_cols(&mut self, a: NodeId, n: usize) -> NodeId {
        let (m, c) = self.shape(a);
        assert_eq!(c, 1, "repeat_cols expects an mx1 input");
        let col = self.nodes[a].value.column(0).to_owned();
        let v = Array2::from_shape_fn((m, n), |(i, _)| col[i]);
        self.push(Op::RepeatCols(n), vec![a], v)
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, m: usize, n: usize) -> NodeId {
        assert_eq!(self.shape(a), (1, 1), "broadcast_scalar expects a scalar");
        let s = self.nodes[a].value[(0, 0)];
        self.push(Op::BroadcastScalar(m, n), vec![a], Array2::from_elem((m, n), s))
    }

    pub fn gather(&mut self, a: NodeId, idx: Rc<Vec<i64>>, rows: usize, cols: usize) -> NodeId {
        assert_eq!(idx.len(), rows * cols, "gather index length");
        let src = &self.nodes[a].value;
        let flat: Vec<f64> = src.iter().cloned().collect();
        let data: Vec<f64> = idx
            .iter()
            .map(|&i| if i < 0 { 0.0 } else { flat[i as usize] })
            .collect();
        let v = Array2::from_shape_vec((rows, cols), data).unwrap();
        self.push(Op::Gather { idx, rows, cols }, vec![a], v)
    }

    pub fn scatter_add(&mut self, a: NodeId, idx: Rc<Vec<i64>>, rows: usize, cols: usize) -> NodeId {
        let src = &self.nodes[a].value;
        assert_eq!(idx.len(), src.len(), "scatter_add index length");
        let mut data = vec![0.0; rows * cols];
        for (&i, &x) in idx.iter().zip(src.iter()) {
            if i >= 0 {
                data[i as usize] += x;
            }
        }
        let v = Array2::from_shape_vec((rows, cols), data).unwrap();
        self.push(Op::ScatterAdd { idx, rows, cols }, vec![a], v)
    }

    /// Mean over all entries, as a scalar node.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / (m * n) as f64)
    }

    /// Row-wise softmax, composed from primitives. The per-row max is
    /// subtracted as a detached constant; softmax is shift-invariant so the
    /// gradient is unaffected.
    pub fn softmax_rows(&mut self, logits: NodeId) -> NodeId {
        let (m, n) = self.shape(logits);
        let maxes: Vec<f64> = self
            .nodes[logits]
            .value
            .rows()
            .into_iter()
            .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let max_col = self.constant(Array2::from_shape_vec((m, 1), maxes).unwrap());
        let max_mat = self.repeat_cols(max_col, n);
        let shifted = self.sub(logits, max_mat);
        let e = self.exp(shifted);
        let z = self.sum_cols(e);
        let z_mat = self.repeat_cols(z, n);
        self.div(e, z_mat)
    }

    /// Elementwise logistic sigmoid: 1 / (1 + exp(-x)).
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let neg = self.neg(a);
        let e = self.exp(neg);
        let denom = self.add_scalar(e, 1.0);
        let ones = self.constant(Array2::from_elem((m, n), 1.0));
        self.div(ones, denom)
    }

    /// Gradient of a scalar node with respect to `wrt`, returned as node ids
    /// on this tape. Nodes unreachable from `output` get zero gradients.
    pub fn backward(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, DiffError> {
        let (m, n) = self.shape(output);
        if (m, n) != (1, 1) {
            return Err(DiffError::NonScalarOutput { rows: m, cols: n });
        }
        if !self.scalar(output).is_finite() {
            // Report the earliest primitive that went non-finite.
            for (id, node) in self.nodes.iter().enumerate() {
                if node.value.iter().any(|v| !v.is_finite()) {
                    return Err(DiffError::NonFinite {
                        op: node.op.name(),
                        node: id,
                    });
                }
            }
            return Err(DiffError::NonFinite {
                op: self.nodes[output].op.name(),
                node: output,
            });
        }

        // Mark ancestors of the output.
        let mut reachable = vec![false; output + 1];
        reachable[output] = true;
        for id in (0..=output).rev() {
            if reachable[id] {
                for &inp in &self.nodes[id].inputs.clone() {
                    reachable[inp] = true;
                }
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; output + 1];
        adjoint[output] = Some(self.scalar_const(1.0));

        for id in (0..=output).rev() {
            if !reachable[id] {
                continue;
            }
            let g = match adjoint[id] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            let inputs = self.nodes[id].inputs.clone();
            let contribs: Vec<(NodeId, NodeId)> = match op {
                Op::Input | Op::Constant => vec![],
                Op::MatMul => {
                    let (a, b) = (inputs[0], inputs[1]);
                    let bt = self.transpose(b);
                    let da = self.matmul(g, bt);
                    let at = self.transpose(a);
                    let db = self.matmul(at, g);
                    vec![(a, da), (b, db)]
                }
                Op::Transpose => {
                    let da = self.transpose(g);
                    vec![(inputs[0], da)]
                }
                Op::Add => vec![(inputs[0], g), (inputs[1], g)],
                Op::Sub => {
                    let db = self.neg(g);
                    vec![(inputs[0], g), (inputs[1], db)]
                }
                Op::Mul => {
                    let (a, b) = (inputs[0], inputs[1]);
                    let da = self.mul(g, b);
                    let db = self.mul(g, a);
                    vec![(a, da), (b, db)]
                }
                Op::Div => {
                    let (a, b) = (inputs[0], inputs[1]);
                    let da = self.div(g, b);
                    let bb = self.mul(b, b);
                    let a_over_bb = self.div(a, bb);
                    let gd = self.mul(g, a_over_bb);
                    let db = self.neg(gd);
                    vec![(a, da), (b, db)]
                }
                Op::Neg => {
                    let da = self.neg(g);
                    vec![(inputs[0], da)]
                }
                Op::Exp => {
                    // d(exp a) = exp(a) = this node's own value
                    let da = self.mul(g, id);
                    vec![(inputs[0], da)]
                }
                Op::Log => {
                    let da = self.div(g, inputs[0]);
                    vec![(inputs[0], da)]
                }
                Op::Sqrt => {
                    let two = self.mul_scalar(id, 2.0);
                    let da = self.div(g, two);
                    vec![(inputs[0], da)]
                }
                Op::Relu => {
                    let mask = self.nodes[inputs[0]]
                        .value
                        .mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let mask = self.constant(mask);
                    let da = self.mul(g, mask);
                    vec![(inputs[0], da)]
                }
                Op::XLogX => {
                    let la = self.log(inputs[0]);
                    let d = self.add_scalar(la, 1.0);
                    let da = self.mul(g, d);
                    vec![(inputs[0], da)]
                }
                Op::ClampMin(c) => {
                    let mask = self.nodes[inputs[0]]
                        .value
                        .mapv(|x| if x > c { 1.0 } else { 0.0 });
                    let mask = self.constant(mask);
                    let da = self.mul(g, mask);
                    vec![(inputs[0], da)]
                }
                Op::AddScalar(_) => vec![(inputs[0], g)],
                Op::MulScalar(c) => {
                    let da = self.mul_scalar(g, c);
                    vec![(inputs[0], da)]
                }
                Op::SumAll => {
                    let (im, inn) = self.shape(inputs[0]);
                    let da = self.broadcast_scalar(g, im, inn);
                    vec![(inputs[0], da)]
                }
                Op::SumRows => {
                    let (im, _) = self.shape(inputs[0]);
                    let da = self.repeat_rows(g, im);
                    vec![(inputs[0], da)]
                }
                Op::SumCols => {
                    let (_, inn) = self.shape(inputs[0]);
                    let da = self.repeat_cols(g, inn);
                    vec![(inputs[0], da)]
                }
                Op::RepeatRows(_) => {
                    let da = self.sum_rows(g);
                    vec![(inputs[0], da)]
                }
                Op::RepeatCols(_) => {
                    let da = self.sum_cols(g);
                    vec![(inputs[0], da)]
                }
                Op::BroadcastScalar(..) => {
                    let da = self.sum_all(g);
                    vec![(inputs[0], da)]
                }
                Op::Gather { idx, .. } => {
                    let (im, inn) = self.shape(inputs[0]);
                    let da = self.scatter_add(g, idx, im, inn);
                    vec![(inputs[0], da)]
                }
                Op::ScatterAdd { idx, .. } => {
                    let (im, inn) = self.shape(inputs[0]);
                    let da = self.gather(g, idx, im, inn);
                    vec![(inputs[0], da)]
                }
            };
            for (inp, d) in contribs {
                adjoint[inp] = Some(match adjoint[inp] {
                    None => d,
                    Some(prev) => self.add(prev, d),
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match adjoint.get(w).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    let (r, c) = self.shape(w);
                    out.push(self.zeros_const(r, c));
                }
            }
        }
        Ok(out)
    }

    /// Recomputes every node's value from the recorded operations and checks
    /// the result is bit-identical to the stored values.
    pub fn replay_matches(&self) -> bool {
        let mut values: Vec<Array2<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input | Op::Constant => node.value.clone(),
                Op::MatMul => values[node.inputs[0]].dot(&values[node.inputs[1]]),
                Op::Transpose => values[node.inputs[0]].t().to_owned(),
                Op::Add => &values[node.inputs[0]] + &values[node.inputs[1]],
                Op::Sub => &values[node.inputs[0]] - &values[node.inputs[1]],
                Op::Mul => &values[node.inputs[0]] * &values[node.inputs[1]],
                Op::Div => &values[node.inputs[0]] / &values[node.inputs[1]],
                Op::Neg => values[node.inputs[0]].mapv(|x| -x),
                Op::Exp => values[node.inputs[0]].mapv(f64::exp),
                Op::Log => values[node.inputs[0]].mapv(f64::ln),
                Op::Sqrt => values[node.inputs[0]].mapv(f64::sqrt),
                Op::Relu => values[node.inputs[0]].mapv(|x| x.max(0.0)),
                Op::XLogX => values[node.inputs[0]]
                    .mapv(|x| if x == 0.0 { 0.0 } else { x * x.ln() }),
                Op::ClampMin(c) => values[node.inputs[0]].mapv(|x| x.max(*c)),
                Op::AddScalar(c) => values[node.inputs[0]].mapv(|x| x + c),
                Op::MulScalar(c) => values[node.inputs[0]].mapv(|x| x * c),
                Op::SumAll => Array2::from_elem((1, 1), values[node.inputs[0]].sum()),
                Op::SumRows => {
                    let a = &values[node.inputs[0]];
                    let n = a.ncols();
                    a.sum_axis(ndarray::Axis(0)).into_shape((1, n)).unwrap()
                }
                Op::SumCols => {
                    let a = &values[node.inputs[0]];
                    let m = a.nrows();
                    a.sum_axis(ndarray::Axis(1)).into_shape((m, 1)).unwrap()
                }
                Op::RepeatRows(m) => {
                    let a = &values[node.inputs[0]];
                    Array2::from_shape_fn((*m, a.ncols()), |(_, j)| a[(0, j)])
                }
                Op::RepeatCols(n) => {
                    let a = &values[node.inputs[0]];
                    Array2::from_shape_fn((a.nrows(), *n), |(i, _)| a[(i, 0)])
                }
                Op::BroadcastScalar(m, n) => Array2::from_elem((*m, *n), values[node.inputs[0]][(0, 0)]),
                Op::Gather { idx, rows, cols } => {
                    let flat: Vec<f64> = values[node.inputs[0]].iter().cloned().collect();
                    let data: Vec<f64> = idx
                        .iter()
                        .map(|&i| if i < 0 { 0.0 } else { flat[i as usize] })
                        .collect();
                    Array2::from_shape_vec((*rows, *cols), data).unwrap()
                }
                Op::ScatterAdd { idx, rows, cols } => {
                    let mut data = vec![0.0; rows * cols];
                    for (&i, &x) in idx.iter().zip(values[node.inputs[0]].iter()) {
                        if i >= 0 {
                            data[i as usize] += x;
                        }
                    }
                    Array2::from_shape_vec((*rows, *cols), data).unwrap()
                }
            };
            values.push(v);
        }
        self.nodes
            .iter()
            .zip(values.iter())
            .all(|(n, v)| n.value.iter().zip(v.iter()).all(|(a, b)| a.to_bits() == b.to_bits()))
    }
}
