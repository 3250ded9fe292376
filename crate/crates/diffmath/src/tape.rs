//! Recording tape with eager forward values and reverse-mode adjoints.
//!
//! Every recorded node is evaluated immediately so builders can inspect
//! intermediate values. [`Tape::forward`] replays the whole program on new
//! input values; [`Tape::backward`] walks the nodes in exact reverse recording
//! order.

use crate::error::{DiffError, Result};
use crate::matrix::{gemm_into, Matrix};
use crate::real::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed primitive set.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Leaf whose value is supplied by [`Tape::forward`]; the payload is its slot.
    Input(usize),
    /// Leaf with a fixed value.
    Constant,
    /// `a * b`, or `a * b^T` when `trans_b` is set.
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    /// Elementwise product.
    Mul(Var, Var),
    RowSoftmax(Var),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    RowL2Normalize(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    /// Identity forward, zero adjoint upstream.
    StopGradient(Var),
    /// Identity forward, adjoint multiplied by the factor upstream.
    ScaleGradient(Var, f64),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::RowSoftmax(_) => "row_softmax",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::RowL2Normalize(_) => "row_l2_normalize",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Scale(..) => "scale",
            Op::StopGradient(_) => "stop_gradient",
            Op::ScaleGradient(..) => "scale_gradient",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    op: Op,
    value: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    inputs: Vec<Var>,
    stale: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            inputs: Vec::new(),
            stale: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input leaves in slot order.
    pub fn input_vars(&self) -> &[Var] {
        &self.inputs
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// The most recently recorded node.
    pub fn last(&self) -> Option<Var> {
        self.nodes.len().checked_sub(1).map(Var)
    }

    pub fn input(&mut self, value: Matrix<T>) -> Var {
        let slot = self.inputs.len();
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Input(slot),
            value,
        });
        self.inputs.push(v);
        v
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Constant,
            value,
        });
        v
    }

    pub fn ones(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Matrix::filled(rows, cols, T::one()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul { a, b, trans_b: false })
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul { a, b, trans_b: true })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    /// `a - b`, recorded as `a + (-1) * b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowSoftmax(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowL2Normalize(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(a, factor))
    }

    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        self.push(Op::StopGradient(a))
    }

    pub fn scale_gradient(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.push(Op::ScaleGradient(a, factor))
    }

    /// Replaces one input leaf. The tape is stale until [`Tape::recompute`]
    /// or [`Tape::forward`] runs.
    pub fn set_input(&mut self, slot: usize, value: Matrix<T>) -> Result<()> {
        let var = *self.inputs.get(slot).ok_or_else(|| {
            DiffError::Contract(format!(
                "input slot {slot} out of range ({} inputs)",
                self.inputs.len()
            ))
        })?;
        let expected = self.nodes[var.0].value.shape();
        if value.shape() != expected {
            return Err(DiffError::Dimension {
                node: var.0,
                op: "input",
                detail: format!("expected {:?}, got {:?}", expected, value.shape()),
            });
        }
        self.nodes[var.0].value = value;
        self.stale = true;
        Ok(())
    }

    /// Re-evaluates every node in recording order.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input(_) | Op::Constant) {
                continue;
            }
            let value = self.eval(i, &self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        self.stale = false;
        Ok(())
    }

    /// Runs the recorded program on `inputs` (one matrix per input slot) and
    /// returns the final node value.
    pub fn forward(&mut self, inputs: &[Matrix<T>]) -> Result<&Matrix<T>> {
        if inputs.len() != self.inputs.len() {
            return Err(DiffError::Contract(format!(
                "forward expects {} inputs, got {}",
                self.inputs.len(),
                inputs.len()
            )));
        }
        for (slot, m) in inputs.iter().enumerate() {
            self.set_input(slot, m.clone())?;
        }
        self.recompute()?;
        self.last()
            .map(|v| self.value(v))
            .ok_or_else(|| DiffError::State("forward on an empty tape".into()))
    }

    /// Copy of the program evaluated in another precision.
    pub fn to_precision<U: Real>(&self) -> Result<Tape<U>> {
        let mut out = Tape {
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    op: n.op.clone(),
                    value: n.value.cast(),
                })
                .collect(),
            inputs: self.inputs.clone(),
            stale: false,
        };
        out.recompute()?;
        Ok(out)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let idx = self.nodes.len();
        let value = self.eval(idx, &op)?;
        self.nodes.push(Node { op, value });
        Ok(Var(idx))
    }

    fn arg(&self, idx: usize, op: &'static str, v: Var) -> Result<&Matrix<T>> {
        if v.0 >= idx {
            return Err(DiffError::Dimension {
                node: idx,
                op,
                detail: format!("operand node {} is not recorded before this node", v.0),
            });
        }
        Ok(&self.nodes[v.0].value)
    }

    fn eval(&self, idx: usize, op: &Op) -> Result<Matrix<T>> {
        let name = op.name();
        let dim_err = |detail: String| DiffError::Dimension {
            node: idx,
            op: name,
            detail,
        };
        let out = match *op {
            Op::Input(_) | Op::Constant => {
                return Err(DiffError::State("leaf nodes are not evaluated".into()))
            }
            Op::MatMul { a, b, trans_b } => {
                let (x, y) = (self.arg(idx, name, a)?, self.arg(idx, name, b)?);
                let (inner, n) = if trans_b {
                    (y.cols(), y.rows())
                } else {
                    (y.rows(), y.cols())
                };
                if x.cols() != inner {
                    return Err(dim_err(format!(
                        "{:?} times {}{:?}",
                        x.shape(),
                        if trans_b { "transposed " } else { "" },
                        y.shape()
                    )));
                }
                let mut out = Matrix::zeros(x.rows(), n);
                gemm_into(x, false, y, trans_b, &mut out, T::zero());
                out
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (x, y) = (self.arg(idx, name, a)?, self.arg(idx, name, b)?);
                if x.shape() != y.shape() {
                    return Err(dim_err(format!("{:?} vs {:?}", x.shape(), y.shape())));
                }
                let data = if matches!(op, Op::Add(..)) {
                    x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect()
                } else {
                    x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect()
                };
                Matrix::new(x.rows(), x.cols(), data)?
            }
            Op::RowSoftmax(a) => {
                let mut out = self.arg(idx, name, a)?.clone();
                for r in 0..out.rows() {
                    softmax_in_place(out.row_mut(r));
                }
                out
            }
            Op::Log(a) => self.arg(idx, name, a)?.map(|x| x.ln()),
            Op::Exp(a) => self.arg(idx, name, a)?.map(|x| x.exp()),
            Op::Sigmoid(a) => self.arg(idx, name, a)?.map(sigmoid),
            Op::Tanh(a) => self.arg(idx, name, a)?.map(|x| x.tanh()),
            Op::Relu(a) => self.arg(idx, name, a)?.map(|x| x.max(T::zero())),
            Op::RowL2Normalize(a) => self.arg(idx, name, a)?.normalize_rows(),
            Op::Sum(a) => Matrix::scalar(self.arg(idx, name, a)?.sum()),
            Op::Mean(a) => {
                let x = self.arg(idx, name, a)?;
                if x.is_empty() {
                    return Err(dim_err("mean of an empty matrix".into()));
                }
                Matrix::scalar(x.sum() / T::from_f64(x.len() as f64))
            }
            Op::Scale(a, f) => {
                let f = T::from_f64(f);
                self.arg(idx, name, a)?.map(|x| x * f)
            }
            Op::StopGradient(a) | Op::ScaleGradient(a, _) => self.arg(idx, name, a)?.clone(),
        };
        Ok(out)
    }

    /// Reverse pass from the last recorded node.
    pub fn backward(&self) -> Result<Gradients<T>> {
        let out = self
            .last()
            .ok_or_else(|| DiffError::State("backward on an empty tape".into()))?;
        self.backward_from(out)
    }

    /// Reverse pass from `output`, which must be `1 x 1`.
    pub fn backward_from(&self, output: Var) -> Result<Gradients<T>> {
        if self.stale {
            return Err(DiffError::State(
                "inputs changed since the last forward pass".into(),
            ));
        }
        if output.0 >= self.nodes.len() {
            return Err(DiffError::State(format!(
                "node {} has not been recorded",
                output.0
            )));
        }
        if self.shape(output) != (1, 1) {
            return Err(DiffError::Contract(format!(
                "backward needs a scalar output, node {} is {:?}",
                output.0,
                self.shape(output)
            )));
        }

        let mut adj: Vec<Option<Matrix<T>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Matrix::scalar(T::one()));

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Input(_) | Op::Constant | Op::StopGradient(_) => {}
                Op::MatMul { a, b, trans_b } => {
                    let (x, y) = (self.value(a), self.value(b));
                    // C = X Y   : dX = G Y^T, dY = X^T G
                    // C = X Y^T : dX = G Y,   dY = G^T X
                    let da = slot(&mut adj, a, x.shape());
                    gemm_into(&g, false, y, !trans_b, da, T::one());
                    let db = slot(&mut adj, b, y.shape());
                    if trans_b {
                        gemm_into(&g, true, x, false, db, T::one());
                    } else {
                        gemm_into(x, true, &g, false, db, T::one());
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, a, &g, |gv, _| gv, &g);
                    accumulate(&mut adj, b, &g, |gv, _| gv, &g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(a), self.value(b));
                    accumulate(&mut adj, a, &g, |gv, yv| gv * yv, y);
                    accumulate(&mut adj, b, &g, |gv, xv| gv * xv, x);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((d, &p), &q) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = p * (q - dot);
                        }
                    }
                    accumulate(&mut adj, a, &dx, |d, _| d, &dx);
                }
                Op::Log(a) => accumulate(&mut adj, a, &g, |gv, xv| gv / xv, self.value(a)),
                Op::Exp(a) => accumulate(&mut adj, a, &g, |gv, yv| gv * yv, &node.value),
                Op::Sigmoid(a) => accumulate(
                    &mut adj,
                    a,
                    &g,
                    |gv, yv| gv * yv * (T::one() - yv),
                    &node.value,
                ),
                Op::Tanh(a) => accumulate(
                    &mut adj,
                    a,
                    &g,
                    |gv, yv| gv * (T::one() - yv * yv),
                    &node.value,
                ),
                Op::Relu(a) => accumulate(
                    &mut adj,
                    a,
                    &g,
                    |gv, xv| if xv > T::zero() { gv } else { T::zero() },
                    self.value(a),
                ),
                Op::RowL2Normalize(a) => {
                    let (x, y) = (self.value(a), &node.value);
                    let mut dx = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let norm = x.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
                        if norm == T::zero() {
                            continue;
                        }
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((d, &p), &q) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = (q - p * dot) / norm;
                        }
                    }
                    accumulate(&mut adj, a, &dx, |d, _| d, &dx);
                }
                Op::Sum(a) | Op::Mean(a) => {
                    let (rows, cols) = self.shape(a);
                    let mut s = g.get(0, 0);
                    if matches!(node.op, Op::Mean(_)) {
                        s = s / T::from_f64((rows * cols) as f64);
                    }
                    let d = slot(&mut adj, a, (rows, cols));
                    d.data_mut().iter_mut().for_each(|v| *v = *v + s);
                }
                Op::Scale(a, f) | Op::ScaleGradient(a, f) => {
                    let f = T::from_f64(f);
                    accumulate(&mut adj, a, &g, |gv, _| gv * f, &g);
                }
            }
            adj[i] = Some(g);
        }

        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            inputs: self.inputs.clone(),
        })
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Max-subtracted softmax of one row.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

fn slot<T: Real>(
    adj: &mut [Option<Matrix<T>>],
    v: Var,
    shape: (usize, usize),
) -> &mut Matrix<T> {
    adj[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

/// `adj[v] += f(g, aux)` elementwise.
fn accumulate<T: Real>(
    adj: &mut [Option<Matrix<T>>],
    v: Var,
    g: &Matrix<T>,
    f: impl Fn(T, T) -> T,
    aux: &Matrix<T>,
) {
    let d = slot(adj, v, g.shape());
    for ((d, &gv), &av) in d.data_mut().iter_mut().zip(g.data()).zip(aux.data()) {
        *d = *d + f(gv, av);
    }
}

/// Adjoints produced by one reverse pass.
#[derive(Clone, Debug)]
pub struct Gradients<T: Real = f64> {
    adjoints: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
    inputs: Vec<Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the output with respect to `v`; zeros when no path exists.
    pub fn wrt(&self, v: Var) -> Matrix<T> {
        match self.adjoints.get(v.0) {
            Some(Some(m)) => m.clone(),
            _ => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Borrowing variant of [`Gradients::wrt`]; `None` when no path exists.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every input leaf, in slot order.
    pub fn inputs(&self) -> Vec<Matrix<T>> {
        self.inputs.iter().map(|&v| self.wrt(v)).collect()
    }
}
