//! Dense row-major matrices with a define-by-run reverse-mode tape.
//!
//! Every value is a 2-D matrix; a scalar is `1 x 1`. Broadcasting is limited
//! to a `1 x cols` bias row added to each row and to scalar-tensor ops, so
//! every adjoint rule below is a short closed form.
//!
//! A [`Tape`] is built fresh for each forward pass. Leaves are registered
//! with [`Tape::leaf`] (optionally named), every op appends a node whose
//! parents already live on the tape, and [`Tape::backward`] walks the nodes
//! once in reverse.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("tensor data length {len} does not match shape {rows}x{cols}")]
    Length { rows: usize, cols: usize, len: usize },
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward without an explicit adjoint needs a scalar output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("invalid column range {start}..{end} for {cols} columns")]
    ColumnRange { start: usize, end: usize, cols: usize },
}

/// Row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if rows * cols != data.len() {
            return Err(TensorError::Length {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self * other^T` without materialising the transpose.
    fn matmul_bt(&self, other: &Tensor) -> Tensor {
        let (m, k, n) = (self.rows, self.cols, other.rows);
        debug_assert_eq!(k, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Tensor {
            rows: m,
            cols: n,
            data: out,
        }
    }

    /// `self^T * other` without materialising the transpose.
    fn matmul_at(&self, other: &Tensor) -> Tensor {
        let (k, m, n) = (self.rows, self.cols, other.cols);
        debug_assert_eq!(k, other.rows);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor {
            rows: m,
            cols: n,
            data: out,
        }
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: self.shape(),
                rhs: bias.shape(),
            });
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols.max(1)) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Softplus(..) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::Minimum(..) => "minimum",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    names: HashMap<String, Var>,
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

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn named_leaf(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.leaf(value);
        self.names.insert(name.into(), v);
        v
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var, TensorError> {
        let node = self.nodes.len();
        if !value.all_finite() {
            return Err(TensorError::NonFinite {
                node,
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(node))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), out)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("minimum", a, b)?;
        let out = self.value(a).zip(self.value(b), f64::min);
        self.push(Op::Minimum(a, b), out)
    }

    /// `x + bias` with `bias` a `1 x cols` row broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let out = self.value(x).add_row(self.value(bias))?;
        self.push(Op::AddBias(x, bias), out)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), out)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Log(a), out)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), out)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(softplus);
        self.push(Op::Softplus(a), out)
    }

    /// Hard clamp; the adjoint is zero wherever the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), out)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows != tb.rows {
            return Err(TensorError::Shape {
                op: "concat_cols",
                lhs: ta.shape(),
                rhs: tb.shape(),
            });
        }
        let cols = ta.cols + tb.cols;
        let mut data = Vec::with_capacity(ta.rows * cols);
        for r in 0..ta.rows {
            data.extend_from_slice(ta.row_slice(r));
            data.extend_from_slice(tb.row_slice(r));
        }
        let out = Tensor {
            rows: ta.rows,
            cols,
            data,
        };
        self.push(Op::ConcatCols(a, b), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        if start >= end || end > t.cols {
            return Err(TensorError::ColumnRange {
                start,
                end,
                cols: t.cols,
            });
        }
        let mut data = Vec::with_capacity(t.rows * (end - start));
        for r in 0..t.rows {
            data.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let out = Tensor {
            rows: t.rows,
            cols: end - start,
            data,
        };
        self.push(Op::SliceCols(a, start), out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(Op::Sum(a), out)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let out = Tensor::scalar(t.data.iter().sum::<f64>() / t.len() as f64);
        self.push(Op::Mean(a), out)
    }

    /// Row sums, `rows x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let data = (0..t.rows).map(|r| t.row_slice(r).iter().sum()).collect();
        let out = Tensor::column(data);
        self.push(Op::SumCols(a), out)
    }

    /// Reverse sweep from `output`. Without an explicit adjoint the output
    /// must be scalar and is seeded with 1.
    pub fn backward(&self, output: Var, adjoint: Option<Tensor>) -> Result<Gradients, TensorError> {
        let out_value = self.value(output);
        let seed = match adjoint {
            Some(adj) => {
                if adj.shape() != out_value.shape() {
                    return Err(TensorError::Shape {
                        op: "backward",
                        lhs: out_value.shape(),
                        rhs: adj.shape(),
                    });
                }
                adj
            }
            None => {
                if !out_value.is_scalar() {
                    return Err(TensorError::NonScalarOutput {
                        rows: out_value.rows,
                        cols: out_value.cols,
                    });
                }
                Tensor::scalar(1.0)
            }
        };

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let y = &node.value;
            match node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(b));
                    let gb = self.value(a).matmul_at(&g);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, b, g.map(|v| -v));
                    accumulate(&mut grads, a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip(self.value(b), |gv, bv| gv * bv);
                    let gb = g.zip(self.value(a), |gv, av| gv * av);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Minimum(a, b) => {
                    // ties route the adjoint to the first argument
                    let (ta, tb) = (self.value(a), self.value(b));
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    let mut gb = Tensor::zeros(g.rows, g.cols);
                    for i in 0..g.len() {
                        if ta.data[i] <= tb.data[i] {
                            ga.data[i] = g.data[i];
                        } else {
                            gb.data[i] = g.data[i];
                        }
                    }
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::AddBias(x, bias) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in gb.data.iter_mut().zip(g.row_slice(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, bias, gb);
                    accumulate(&mut grads, x, g);
                }
                Op::Scale(a, factor) => accumulate(&mut grads, a, g.map(|v| v * factor)),
                Op::AddScalar(a) => accumulate(&mut grads, a, g),
                Op::Tanh(a) => {
                    let ga = g.zip(y, |gv, yv| gv * (1.0 - yv * yv));
                    accumulate(&mut grads, a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip(self.value(a), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, a, g.zip(y, |gv, yv| gv * yv)),
                Op::Log(a) => {
                    let ga = g.zip(self.value(a), |gv, xv| gv / xv);
                    accumulate(&mut grads, a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip(self.value(a), |gv, xv| 2.0 * gv * xv);
                    accumulate(&mut grads, a, ga);
                }
                Op::Softplus(a) => {
                    let ga = g.zip(self.value(a), |gv, xv| gv * sigmoid(xv));
                    accumulate(&mut grads, a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = g.zip(self.value(a), |gv, xv| {
                        if xv >= lo && xv <= hi {
                            gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(a).cols;
                    let cb = self.value(b).cols;
                    let mut ga = Vec::with_capacity(g.rows * ca);
                    let mut gb = Vec::with_capacity(g.rows * cb);
                    for r in 0..g.rows {
                        let row = g.row_slice(r);
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    accumulate(&mut grads, a, Tensor { rows: g.rows, cols: ca, data: ga });
                    accumulate(&mut grads, b, Tensor { rows: g.rows, cols: cb, data: gb });
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(a);
                    let mut ga = Tensor::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        let dst = &mut ga.data[r * src.cols + start..r * src.cols + start + g.cols];
                        dst.copy_from_slice(g.row_slice(r));
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Sum(a) => {
                    let src = self.value(a);
                    accumulate(&mut grads, a, Tensor::filled(src.rows, src.cols, g.item()));
                }
                Op::Mean(a) => {
                    let src = self.value(a);
                    let v = g.item() / src.len() as f64;
                    accumulate(&mut grads, a, Tensor::filled(src.rows, src.cols, v));
                }
                Op::SumCols(a) => {
                    let src = self.value(a);
                    let mut ga = Tensor::zeros(src.rows, src.cols);
                    for r in 0..src.rows {
                        let gv = g.data[r];
                        for v in &mut ga.data[r * src.cols..(r + 1) * src.cols] {
                            *v = gv;
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients {
            grads,
            shapes,
            names: self.names.clone(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints of every leaf reached by a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
    names: HashMap<String, Var>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` was not reachable from the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn by_name(&self, name: &str) -> Option<Tensor> {
        self.names.get(name).map(|&v| self.wrt(v))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

/// Adam with bias correction over a list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64, shapes: &[[usize; 2]]) -> Self {
        Self::with_betas(learning_rate, 0.9, 0.999, 1e-8, shapes)
    }

    pub fn with_betas(
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        shapes: &[[usize; 2]],
    ) -> Self {
        let zeros: Vec<Vec<f64>> = shapes.iter().map(|[r, c]| vec![0.0; r * c]).collect();
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn for_params(learning_rate: f64, params: &[Tensor]) -> Self {
        let shapes: Vec<_> = params.iter().map(Tensor::shape).collect();
        Self::new(learning_rate, &shapes)
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }
}

/// One Adam update of `params` in place. The step counter advances even
/// when every gradient is zero.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(TensorError::Shape {
            op: "adam_step",
            lhs: [params.len(), 0],
            rhs: [grads.len(), state.first_moment.len()],
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.shape() != g.shape() || p.len() != m.len() {
            return Err(TensorError::Shape {
                op: "adam_step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..p.data.len() {
            let gj = g.data[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p.data[j] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn square_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.named_leaf("x", Tensor::scalar(3.0));
        let y = tape.square(x).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        let g = tape.backward(y, None).unwrap();
        assert_eq!(g.by_name("x").unwrap().item(), 6.0);
    }

    #[test]
    fn tanh_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
        assert_eq!(tape.backward(y, None).unwrap().wrt(x).item(), 1.0);
    }

    #[test]
    fn hand_matmul() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = tape.leaf(Tensor::column(vec![1.0, 1.0]));
        let y = tape.matmul(w, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape { op: "matmul", .. })));
        let c = tape.leaf(Tensor::zeros(3, 2));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn non_finite_names_the_node() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0));
        let err = tape.log(x).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { node: 1, op: "log" });
    }

    #[test]
    fn non_scalar_output_needs_adjoint() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        let y = tape.tanh(x).unwrap();
        assert!(matches!(
            tape.backward(y, None),
            Err(TensorError::NonScalarOutput { .. })
        ));
        let g = tape.backward(y, Some(Tensor::filled(2, 2, 1.0))).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 4]);
    }

    #[test]
    fn unreachable_leaves_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::zeros(3, 2));
        let y = tape.square(x).unwrap();
        let g = tape.backward(y, None).unwrap();
        assert_eq!(g.wrt(unused), Tensor::zeros(3, 2));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + 3x, dy/dx = 2x + 3
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0).unwrap();
        let y = tape.add(sq, lin).unwrap();
        let g = tape.backward(y, None).unwrap();
        assert_relative_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut params = vec![Tensor::row(vec![1.0, -2.0])];
        let mut st = AdamState::for_params(0.1, &params);
        adam_step(&mut params, &[Tensor::zeros(1, 2)], &mut st).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr*g/(|g|+eps)
        let mut params = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::for_params(0.1, &params);
        adam_step(&mut params, &[Tensor::scalar(1.0)], &mut st).unwrap();
        assert_relative_eq!(params[0].item(), -0.1 / (1.0 + 1e-8), max_relative = 1e-15);
    }

    #[test]
    fn adam_two_step_trace() {
        // scripted by hand: g1 = 1, g2 = 0.5, lr = 0.1
        // m1 = 0.1, v1 = 0.001; step1 = 0.1 * 1 / (1 + 1e-8)
        // m2 = 0.9*0.1 + 0.1*0.5 = 0.14, v2 = 0.999*0.001 + 0.001*0.25 = 0.001249
        // m_hat = 0.14/0.19, v_hat = 0.001249/0.001999
        let mut params = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::for_params(0.1, &params);
        adam_step(&mut params, &[Tensor::scalar(1.0)], &mut st).unwrap();
        adam_step(&mut params, &[Tensor::scalar(0.5)], &mut st).unwrap();
        let m_hat: f64 = 0.14 / 0.19;
        let v_hat: f64 = 0.001249 / (1.0 - 0.999f64.powi(2));
        let expected = -0.1 / (1.0 + 1e-8) - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert_relative_eq!(params[0].item(), expected, max_relative = 1e-12);
        assert_eq!(st.step_count, 2);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut params = vec![Tensor::row(vec![1.0, 2.0])];
        let mut st = AdamState::for_params(0.1, &params);
        assert!(adam_step(&mut params, &[Tensor::scalar(1.0)], &mut st).is_err());
    }

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>;

    /// Scalar probe `sum(w * f(inputs))` with weights fixed by `seed`, so
    /// every adjoint entry of the op output gets exercised.
    fn probe(inputs: &[Tensor], build: &Build, seed: u64) -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = build(&mut tape, &vars).unwrap();
        let [r, c] = tape.value(y).shape();
        let mut wr = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::new(r, c, (0..r * c).map(|_| wr.gen_range(-1.0..1.0)).collect()).unwrap();
        let wv = tape.leaf(w);
        let prod = tape.mul(y, wv).unwrap();
        let out = tape.sum(prod).unwrap();
        let value = tape.value(out).item();
        let grads = tape.backward(out, None).unwrap();
        (value, vars.iter().map(|&v| grads.wrt(v)).collect())
    }

    /// Central differences against the tape, relative tolerance with a unit
    /// floor on the scale.
    fn fd_check(inputs: &[Tensor], build: &Build, seed: u64, tol: f64) {
        let (_, analytic) = probe(inputs, build, seed);
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            for i in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let fd = (probe(&plus, build, seed).0 - probe(&minus, build, seed).0) / (2.0 * h);
                let an = analytic[k].data()[i];
                assert!(
                    (fd - an).abs() <= tol * an.abs().max(1.0),
                    "input {k} entry {i}: fd {fd} vs tape {an}"
                );
            }
        }
    }

    /// Uniform draws in `[lo, hi]` kept at least `gap` away from each kink.
    fn draw(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor {
        let data = (0..r * c)
            .map(|_| loop {
                let v = rng.gen_range(lo..hi);
                if kinks.iter().all(|k| (v - k).abs() > gap) {
                    break v;
                }
            })
            .collect();
        Tensor::new(r, c, data).unwrap()
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for draw_idx in 0..64u64 {
            let g = |rng: &mut ChaCha8Rng, r, c| draw(rng, r, c, -2.0, 2.0, &[], 0.0);
            let a23 = g(&mut rng, 2, 3);
            let b23 = g(&mut rng, 2, 3);
            let b34 = g(&mut rng, 3, 4);
            let bias = g(&mut rng, 1, 3);
            let pos = draw(&mut rng, 2, 3, 0.2, 3.0, &[], 0.0);
            let kinked = draw(&mut rng, 2, 3, -2.0, 2.0, &[0.0, -0.5, 0.5], 1e-3);
            // keep pairs away from ties for minimum
            let m2 = Tensor::new(2, 3, a23.data().iter().zip(kinked.data()).map(|(x, y)| {
                if (x - y).abs() < 1e-3 { y + 0.01 } else { *y }
            }).collect()).unwrap();
            let c21 = g(&mut rng, 2, 1);
            let seed = 7 + draw_idx;
            let tol = 1e-5;
            let cases: Vec<(Vec<Tensor>, Box<Build>)> = vec![
                (vec![a23.clone(), b34.clone()], Box::new(|t, v| t.matmul(v[0], v[1]))),
                (vec![a23.clone(), b23.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
                (vec![a23.clone(), b23.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
                (vec![a23.clone(), b23.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
                (vec![a23.clone(), m2.clone()], Box::new(|t, v| t.minimum(v[0], v[1]))),
                (vec![a23.clone(), bias.clone()], Box::new(|t, v| t.add_bias(v[0], v[1]))),
                (vec![a23.clone()], Box::new(|t, v| t.scale(v[0], -1.7))),
                (vec![a23.clone()], Box::new(|t, v| t.add_scalar(v[0], 0.3))),
                (vec![a23.clone()], Box::new(|t, v| t.tanh(v[0]))),
                (vec![kinked.clone()], Box::new(|t, v| t.relu(v[0]))),
                (vec![a23.clone()], Box::new(|t, v| t.exp(v[0]))),
                (vec![pos.clone()], Box::new(|t, v| t.log(v[0]))),
                (vec![a23.clone()], Box::new(|t, v| t.square(v[0]))),
                (vec![a23.clone()], Box::new(|t, v| t.softplus(v[0]))),
                (vec![kinked.clone()], Box::new(|t, v| t.clamp(v[0], -0.5, 0.5))),
                (vec![a23.clone(), c21.clone()], Box::new(|t, v| t.concat_cols(v[0], v[1]))),
                (vec![b34.clone()], Box::new(|t, v| t.slice_cols(v[0], 1, 3))),
                (vec![a23.clone()], Box::new(|t, v| t.sum(v[0]))),
                (vec![a23.clone()], Box::new(|t, v| t.mean(v[0]))),
                (vec![a23.clone()], Box::new(|t, v| t.sum_cols(v[0]))),
            ];
            for (inputs, build) in &cases {
                fd_check(inputs, build.as_ref(), seed, tol);
            }
        }
    }

    #[test]
    fn two_layer_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for draw_idx in 0..16u64 {
            let g = |rng: &mut ChaCha8Rng, r, c| draw(rng, r, c, -1.0, 1.0, &[], 0.0);
            let inputs = vec![
                g(&mut rng, 5, 4),
                g(&mut rng, 4, 6),
                g(&mut rng, 1, 6),
                g(&mut rng, 6, 2),
                g(&mut rng, 1, 2),
            ];
            let build: Box<Build> = Box::new(|t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add_bias(h, v[2])?;
                let h = t.tanh(h)?;
                let o = t.matmul(h, v[3])?;
                let o = t.add_bias(o, v[4])?;
                let sq = t.square(o)?;
                t.mean(sq)
            });
            fd_check(&inputs, build.as_ref(), draw_idx, 1e-5);
        }
    }
}
