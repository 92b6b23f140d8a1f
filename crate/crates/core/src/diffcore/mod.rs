//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is an append-only tape: every forward op pushes a node whose
//! inputs are earlier nodes, so insertion order is a topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Binary elementwise ops broadcast only in two ways: a one-element operand
//! against any tensor, or an operand whose shape is a trailing suffix of the
//! other's (e.g. `[H, W]` against `[C, H, W]`). Anything else is a shape
//! error; use [`Graph::reshape`] or [`Graph::broadcast_to`] explicitly.

mod gradcheck;
pub(crate) mod kernels;

use std::fmt;

pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Every differentiable operation the engine knows about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Abs,
    Pow,
    Sigmoid,
    Relu,
    Minimum,
    Clamp,
    Sum,
    Mean,
    MeanAxis0,
    MatMul,
    Transpose,
    Conv2d,
    AvgPool3,
    Upsample2,
    BilinearSample,
    Concat,
    Slice,
    Reshape,
    Broadcast,
    Cosine,
    AxisAngle,
}

impl OpKind {
    pub const ALL: [OpKind; 29] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sqrt,
        OpKind::Abs,
        OpKind::Pow,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Minimum,
        OpKind::Clamp,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanAxis0,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Conv2d,
        OpKind::AvgPool3,
        OpKind::Upsample2,
        OpKind::BilinearSample,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Reshape,
        OpKind::Broadcast,
        OpKind::Cosine,
        OpKind::AxisAngle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Abs => "abs",
            OpKind::Pow => "pow",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Minimum => "minimum",
            OpKind::Clamp => "clamp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanAxis0 => "mean_axis0",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Conv2d => "conv2d",
            OpKind::AvgPool3 => "avgpool3",
            OpKind::Upsample2 => "upsample2",
            OpKind::BilinearSample => "bilinear_sample",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Broadcast => "broadcast",
            OpKind::Cosine => "cosine",
            OpKind::AxisAngle => "axis_angle",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Abs(usize),
    Pow(usize, f64),
    Sigmoid(usize),
    Relu(usize),
    Minimum(usize, usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    MeanAxis0(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AvgPool3(usize),
    Upsample2(usize),
    BilinearSample {
        image: usize,
        grid: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Broadcast(usize),
    Cosine(usize, usize),
    AxisAngle(usize),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf | Op::Const => return None,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Neg(_) => OpKind::Neg,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Abs(_) => OpKind::Abs,
            Op::Pow(..) => OpKind::Pow,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::Minimum(..) => OpKind::Minimum,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::MeanAxis0(_) => OpKind::MeanAxis0,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AvgPool3(_) => OpKind::AvgPool3,
            Op::Upsample2(_) => OpKind::Upsample2,
            Op::BilinearSample { .. } => OpKind::BilinearSample,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Broadcast(_) => OpKind::Broadcast,
            Op::Cosine(..) => OpKind::Cosine,
            Op::AxisAngle(_) => OpKind::AxisAngle,
        })
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches node shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient matches node shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Tape of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

enum Bcast {
    Same,
    /// Right operand is repeated over the left one's leading axes.
    Right,
    Left,
}

fn broadcast_rule(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>)> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Ok((Bcast::Same, a.to_vec()))
    } else if nb == 1 || (b.len() <= a.len() && a.ends_with(b)) {
        Ok((Bcast::Right, a.to_vec()))
    } else if na == 1 || (a.len() <= b.len() && b.ends_with(a)) {
        Ok((Bcast::Left, b.to_vec()))
    } else {
        Err(Error::shape(op, &[a, b]))
    }
}

/// Sums `g` (shaped like the broadcast output) down to `n` values.
fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for (i, v) in g.iter().enumerate() {
        out[i % n] += v;
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Skew-symmetric generator of the cross product with `w`.
fn hat(w: [f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Rodrigues coefficients `A = sin t / t`, `B = (1 - cos t) / t^2` and their
/// derivatives with respect to `s = t^2`.
pub(crate) fn rodrigues_coeffs(s: f64) -> (f64, f64, f64, f64) {
    // Below this the closed forms lose precision to cancellation; the
    // truncated series are exact to well under 1e-20 here.
    if s < 1e-8 {
        let a = 1.0 - s / 6.0 + s * s / 120.0;
        let b = 0.5 - s / 24.0 + s * s / 720.0;
        let da = -1.0 / 6.0 + s / 60.0;
        let db = -1.0 / 24.0 + s / 360.0;
        (a, b, da, db)
    } else {
        let t = s.sqrt();
        let a = t.sin() / t;
        let b = (1.0 - t.cos()) / s;
        let da = (t.cos() - a) / (2.0 * s);
        let db = (0.5 * a - b) / s;
        (a, b, da, db)
    }
}

/// Rotation matrix `exp([w]x)` for an axis-angle vector.
pub fn axis_angle_matrix(w: [f64; 3]) -> [[f64; 3]; 3] {
    let s = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b, _, _) = rodrigues_coeffs(s);
    let k = hat(w);
    let k2 = mat3_mul(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph whose backward pass deliberately corrupts gradients of `kind`.
    /// Used to prove that the gradient checks catch broken derivatives.
    pub fn with_fault(kind: Option<OpKind>) -> Self {
        Graph {
            nodes: Vec::new(),
            fault: kind,
        }
    }

    pub fn fault(&self) -> Option<OpKind> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `op` unless no input needs a gradient, in which case the
    /// result is stored as a constant and the saved state is dropped.
    fn record(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        if rg {
            self.push(value, op, true)
        } else {
            self.push(value, Op::Const, false)
        }
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise binary -------------------------------------------------

    fn binary(
        &mut self,
        kind: OpKind,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Bcast)> {
        let (mode, shape) = broadcast_rule(kind.name(), self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let n: usize = shape.iter().product();
        let out: Vec<f64> = match mode {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Right => (0..n).map(|i| f(da[i], db[i % db.len()])).collect(),
            Bcast::Left => (0..n).map(|i| f(da[i % da.len()], db[i])).collect(),
        };
        Ok((Tensor::new(&shape, out)?, mode))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(OpKind::Add, a, b, |x, y| x + y)?;
        Ok(self.record(t, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(OpKind::Sub, a, b, |x, y| x - y)?;
        Ok(self.record(t, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(OpKind::Mul, a, b, |x, y| x * y)?;
        Ok(self.record(t, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(b).contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let (t, _) = self.binary(OpKind::Div, a, b, |x, y| x / y)?;
        Ok(self.record(t, Op::Div(a.0, b.0), &[a.0, b.0]))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(OpKind::Minimum, a, b, f64::min)?;
        Ok(self.record(t, Op::Minimum(a.0, b.0), &[a.0, b.0]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let c = self.scalar(s);
        self.add(a, c)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let c = self.scalar(s);
        self.mul(a, c)
    }

    // ---- elementwise unary --------------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = &self.nodes[a.0].value;
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect())
            .expect("unary op preserves shape")
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| -x);
        self.record(t, Op::Neg(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::exp);
        self.record(t, Op::Exp(a.0), &[a.0])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.data(a).iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive argument {v}"),
            });
        }
        let t = self.unary(a, f64::ln);
        Ok(self.record(t, Op::Log(a.0), &[a.0]))
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.data(a).iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: format!("negative argument {v}"),
            });
        }
        let t = self.unary(a, f64::sqrt);
        Ok(self.record(t, Op::Sqrt(a.0), &[a.0]))
    }

    /// Absolute value; sub-gradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::abs);
        self.record(t, Op::Abs(a.0), &[a.0])
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let integral = p.fract() == 0.0;
        for &v in self.data(a) {
            if (v < 0.0 && !integral) || (v == 0.0 && p < 1.0) {
                return Err(Error::Domain {
                    op: "pow",
                    msg: format!("{v}^{p} is outside the differentiable domain"),
                });
            }
        }
        let t = self.unary(a, |x| x.powf(p));
        Ok(self.record(t, Op::Pow(a.0, p), &[a.0]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.record(t, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.max(0.0));
        self.record(t, Op::Relu(a.0), &[a.0])
    }

    /// Clamps into `[lo, hi]`; the gradient passes on the closed interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Invalid(format!("clamp bounds {lo} > {hi}")));
        }
        let t = self.unary(a, |x| x.clamp(lo, hi));
        Ok(self.record(t, Op::Clamp(a.0, lo, hi), &[a.0]))
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.record(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean();
        self.record(Tensor::scalar(m), Op::Mean(a.0), &[a.0])
    }

    /// Mean over the leading axis: `[N, ...rest] -> [...rest]`.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("mean_axis0", &[&shape]));
        }
        let inner: usize = shape[1..].iter().product();
        let d = self.data(a);
        let mut out = vec![0.0; inner];
        for row in d.chunks(inner) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = shape[0] as f64;
        out.iter_mut().for_each(|v| *v /= n);
        let t = Tensor::new(&shape[1..], out)?;
        Ok(self.record(t, Op::MeanAxis0(a.0), &[a.0]))
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::gemm_new(m, k, n, self.data(a), false, self.data(b), false);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.record(t, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", &[&s]));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(a);
        let out = (0..r * c).map(|i| d[(i % r) * c + i / r]).collect();
        let t = Tensor::new(&[c, r], out)?;
        Ok(self.record(t, Op::Transpose(a.0), &[a.0]))
    }

    /// 2-D convolution of a `[Cin, H, W]` input with `[Cout, Cin, k, k]`
    /// kernels, zero padding `pad` and the given stride.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        let bad = || Error::shape("conv2d", &[&si, &sw]);
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != sw[3] {
            return Err(bad());
        }
        let geom = ConvGeom::new(si[0], si[1], si[2], sw[2], stride, pad).ok_or_else(bad)?;
        let cout = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d", &[&si, &sw, self.shape(b)]));
            }
        }
        let cols = kernels::im2col(self.data(input), &geom);
        let ncols = geom.cols();
        let mut out = vec![0.0; cout * ncols];
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(ncols).zip(self.data(b)) {
                row.fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        kernels::gemm(
            cout,
            geom.rows(),
            ncols,
            self.data(weight),
            false,
            &cols,
            false,
            beta,
            &mut out,
        );
        let t = Tensor::new(&[cout, geom.ho, geom.wo], out)?;
        let mut ins = vec![input.0, weight.0];
        ins.extend(bias.map(|b| b.0));
        let rg = ins.iter().any(|&i| self.nodes[i].requires_grad);
        let op = Op::Conv2d {
            input: input.0,
            weight: weight.0,
            bias: bias.map(|b| b.0),
            geom,
            // Only the weight gradient needs the unfolded input.
            cols: if self.nodes[weight.0].requires_grad {
                cols
            } else {
                Vec::new()
            },
        };
        Ok(if rg {
            self.push(t, op, true)
        } else {
            self.push(t, Op::Const, false)
        })
    }

    /// 3x3 stride-1 box filter over the last two axes with replicate padding.
    pub fn avgpool3(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("avgpool3", &[&s]));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.value(a).numel() / (h * w);
        let out = kernels::avgpool3(self.data(a), planes, h, w);
        let t = Tensor::new(&s, out)?;
        Ok(self.record(t, Op::AvgPool3(a.0), &[a.0]))
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` tensor.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("upsample2", &[&s]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = self.data(a);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + x] = d[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let t = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        Ok(self.record(t, Op::Upsample2(a.0), &[a.0]))
    }

    /// Samples a `[C, H, W]` image at continuous pixel coordinates given by a
    /// `[Ho, Wo, 2]` grid of `(u, v)` = (column, row) pairs.
    ///
    /// Coordinates outside the image are clamped to the border (edge
    /// replication) and receive zero coordinate gradient. See
    /// [`kernels::tap`] for the cell convention at integer coordinates.
    pub fn bilinear_sample(&mut self, image: Var, grid: Var) -> Result<Var> {
        let (si, sg) = (self.shape(image).to_vec(), self.shape(grid).to_vec());
        if si.len() != 3 || sg.len() != 3 || sg[2] != 2 {
            return Err(Error::shape("bilinear_sample", &[&si, &sg]));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (ho, wo) = (sg[0], sg[1]);
        let img = self.data(image);
        let gd = self.data(grid);
        let np = ho * wo;
        let mut out = vec![0.0; c * np];
        for p in 0..np {
            let tx = kernels::tap(gd[2 * p], w);
            let ty = kernels::tap(gd[2 * p + 1], h);
            for ch in 0..c {
                let base = ch * h * w;
                let i00 = img[base + ty.i0 * w + tx.i0];
                let i01 = img[base + ty.i0 * w + tx.i1];
                let i10 = img[base + ty.i1 * w + tx.i0];
                let i11 = img[base + ty.i1 * w + tx.i1];
                let top = i00 + tx.frac * (i01 - i00);
                let bot = i10 + tx.frac * (i11 - i10);
                out[ch * np + p] = top + ty.frac * (bot - top);
            }
        }
        let t = Tensor::new(&[c, ho, wo], out)?;
        Ok(self.record(
            t,
            Op::BilinearSample {
                image: image.0,
                grid: grid.0,
            },
            &[image.0, grid.0],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *inputs
                    .first()
                    .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &[&first]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape("concat", &[&first, s]));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let t = Tensor::new(&shape, out)?;
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        Ok(self.record(
            t,
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::Invalid(format!(
                "slice {start}..{end} on axis {axis} of shape {s:?}"
            )));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.data(a);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let t = Tensor::new(&shape, out)?;
        Ok(self.record(
            t,
            Op::Slice {
                input: a.0,
                axis,
                start,
            },
            &[a.0],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.record(t, Op::Reshape(a.0), &[a.0]))
    }

    /// Repeats `a` to `shape`; `a` must be one element or a trailing suffix.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if !(self.value(a).is_scalar() || (s.len() <= shape.len() && shape.ends_with(s))) {
            return Err(Error::shape("broadcast", &[s, shape]));
        }
        let d = self.data(a);
        let t = Tensor::from_fn(shape, |i| d[i % d.len()]);
        Ok(self.record(t, Op::Broadcast(a.0), &[a.0]))
    }

    /// Per-pixel cosine similarity of two `[D, H, W]` feature fields.
    /// Pixels where either vector has zero norm get cosine 0.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || sa.len() != 3 {
            return Err(Error::shape("cosine", &[&sa, &sb]));
        }
        let (d, np) = (sa[0], sa[1] * sa[2]);
        let (fa, fb) = (self.data(a), self.data(b));
        let out = (0..np)
            .map(|p| {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for k in 0..d {
                    let (x, y) = (fa[k * np + p], fb[k * np + p]);
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na.sqrt() * nb.sqrt())
                }
            })
            .collect();
        let t = Tensor::new(&sa[1..], out)?;
        Ok(self.record(t, Op::Cosine(a.0, b.0), &[a.0, b.0]))
    }

    /// Exponential map of an axis-angle 3-vector to a `[3, 3]` rotation.
    pub fn axis_angle(&mut self, w: Var) -> Result<Var> {
        if self.shape(w) != [3] {
            return Err(Error::shape("axis_angle", &[self.shape(w)]));
        }
        let d = self.data(w);
        let r = axis_angle_matrix([d[0], d[1], d[2]]);
        let t = Tensor::new(&[3, 3], r.iter().flatten().copied().collect())?;
        Ok(self.record(t, Op::AxisAngle(w.0), &[w.0]))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a one-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_val = self.value(output);
        if !out_val.is_scalar() {
            return Err(Error::NonScalar(out_val.shape().to_vec()));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf | Op::Const) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut contribs = self.node_backward(id, &g);
            if let (Some(f), Some(k)) = (self.fault, node.op.kind()) {
                if f == k {
                    for (_, cg) in contribs.iter_mut() {
                        cg.iter_mut().for_each(|v| *v *= 1.5);
                    }
                }
            }
            for (input, cg) in contribs {
                if self.nodes[input].requires_grad {
                    accumulate(&mut grads[input], cg);
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Gradient contributions `(input id, gradient)` of one node.
    fn node_backward(&self, id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = node.value.data();
        let dat = |i: usize| self.nodes[i].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                out.push((*a, reduce_to(g, dat(*a).len())));
                out.push((*b, reduce_to(g, dat(*b).len())));
            }
            Op::Sub(a, b) => {
                out.push((*a, reduce_to(g, dat(*a).len())));
                let nb: Vec<f64> = g.iter().map(|v| -v).collect();
                out.push((*b, reduce_to(&nb, dat(*b).len())));
            }
            Op::Mul(a, b) | Op::Div(a, b) | Op::Minimum(a, b) => {
                let (da, db) = (dat(*a), dat(*b));
                let (la, lb) = (da.len(), db.len());
                let x = |i: usize| da[i % la];
                let y = |i: usize| db[i % lb];
                let (ga, gb): (Vec<f64>, Vec<f64>) = match &node.op {
                    Op::Mul(..) => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| (gv * y(i), gv * x(i)))
                        .unzip(),
                    Op::Div(..) => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| (gv / y(i), -gv * x(i) / (y(i) * y(i))))
                        .unzip(),
                    _ => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| if x(i) <= y(i) { (gv, 0.0) } else { (0.0, gv) })
                        .unzip(),
                };
                if self.rg(*a) {
                    out.push((*a, reduce_to(&ga, la)));
                }
                if self.rg(*b) {
                    out.push((*b, reduce_to(&gb, lb)));
                }
            }
            Op::Neg(a) => out.push((*a, g.iter().map(|v| -v).collect())),
            Op::Exp(a) => out.push((*a, g.iter().zip(val).map(|(g, y)| g * y).collect())),
            Op::Log(a) => out.push((*a, g.iter().zip(dat(*a)).map(|(g, x)| g / x).collect())),
            Op::Sqrt(a) => out.push((
                *a,
                g.iter()
                    .zip(val)
                    .map(|(g, y)| if *y > 0.0 { g * 0.5 / y } else { 0.0 })
                    .collect(),
            )),
            Op::Abs(a) => out.push((
                *a,
                g.iter()
                    .zip(dat(*a))
                    .map(|(g, x)| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )),
            Op::Pow(a, p) => out.push((
                *a,
                g.iter()
                    .zip(dat(*a))
                    .map(|(g, x)| g * p * x.powf(p - 1.0))
                    .collect(),
            )),
            Op::Sigmoid(a) => out.push((
                *a,
                g.iter().zip(val).map(|(g, s)| g * s * (1.0 - s)).collect(),
            )),
            Op::Relu(a) => out.push((
                *a,
                g.iter()
                    .zip(dat(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )),
            Op::Clamp(a, lo, hi) => out.push((
                *a,
                g.iter()
                    .zip(dat(*a))
                    .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                    .collect(),
            )),
            Op::Sum(a) => out.push((*a, vec![g[0]; dat(*a).len()])),
            Op::Mean(a) => {
                let n = dat(*a).len();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::MeanAxis0(a) => {
                let s = self.nodes[*a].value.shape();
                let n = s[0] as f64;
                let mut d = Vec::with_capacity(dat(*a).len());
                for _ in 0..s[0] {
                    d.extend(g.iter().map(|v| v / n));
                }
                out.push((*a, d));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let ga = kernels::gemm_new(m, n, k, g, false, dat(*b), true);
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let gb = kernels::gemm_new(k, m, n, dat(*a), true, g, false);
                    out.push((*b, gb));
                }
            }
            Op::Transpose(a) => {
                let s = self.nodes[*a].value.shape();
                let (r, c) = (s[0], s[1]);
                // output is [c, r]; element (j, i) -> input (i, j)
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                out.push((*a, d));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let cout = self.nodes[*weight].value.shape()[0];
                let ncols = geom.cols();
                if self.rg(*weight) {
                    let gw = kernels::gemm_new(cout, ncols, geom.rows(), g, false, cols, true);
                    out.push((*weight, gw));
                }
                if let Some(b) = bias {
                    if self.rg(*b) {
                        out.push((*b, g.chunks(ncols).map(|r| r.iter().sum()).collect()));
                    }
                }
                if self.rg(*input) {
                    let gcols =
                        kernels::gemm_new(geom.rows(), cout, ncols, dat(*weight), true, g, false);
                    let mut gx = vec![0.0; geom.cin * geom.h * geom.w];
                    kernels::col2im(&gcols, geom, &mut gx);
                    out.push((*input, gx));
                }
            }
            Op::AvgPool3(a) => {
                let s = self.nodes[*a].value.shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                out.push((*a, kernels::avgpool3_backward(g, g.len() / (h * w), h, w)));
            }
            Op::Upsample2(a) => {
                let s = self.nodes[*a].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            d[(ch * h + y / 2) * w + x / 2] += g[(ch * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                out.push((*a, d));
            }
            Op::BilinearSample { image, grid } => {
                let si = self.nodes[*image].value.shape();
                let (c, h, w) = (si[0], si[1], si[2]);
                let gd = dat(*grid);
                let img = dat(*image);
                let np = gd.len() / 2;
                let want_img = self.rg(*image);
                let want_grid = self.rg(*grid);
                let mut gi = if want_img {
                    vec![0.0; img.len()]
                } else {
                    Vec::new()
                };
                let mut gg = vec![0.0; gd.len()];
                for p in 0..np {
                    let tx = kernels::tap(gd[2 * p], w);
                    let ty = kernels::tap(gd[2 * p + 1], h);
                    let (fx, fy) = (tx.frac, ty.frac);
                    for ch in 0..c {
                        let gv = g[ch * np + p];
                        let base = ch * h * w;
                        let (a00, a01) = (base + ty.i0 * w + tx.i0, base + ty.i0 * w + tx.i1);
                        let (a10, a11) = (base + ty.i1 * w + tx.i0, base + ty.i1 * w + tx.i1);
                        if want_img {
                            gi[a00] += gv * (1.0 - fx) * (1.0 - fy);
                            gi[a01] += gv * fx * (1.0 - fy);
                            gi[a10] += gv * (1.0 - fx) * fy;
                            gi[a11] += gv * fx * fy;
                        }
                        if want_grid {
                            let (i00, i01, i10, i11) = (img[a00], img[a01], img[a10], img[a11]);
                            if tx.inside && w > 1 {
                                gg[2 * p] += gv * ((1.0 - fy) * (i01 - i00) + fy * (i11 - i10));
                            }
                            if ty.inside && h > 1 {
                                gg[2 * p + 1] += gv * ((1.0 - fx) * (i10 - i00) + fx * (i11 - i01));
                            }
                        }
                    }
                }
                if want_img {
                    out.push((*image, gi));
                }
                if want_grid {
                    out.push((*grid, gg));
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &i in inputs {
                    let n = self.nodes[i].value.shape()[*axis];
                    let mut d = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        d.extend_from_slice(&g[s..s + n * inner]);
                    }
                    offset += n;
                    out.push((i, d));
                }
            }
            Op::Slice { input, axis, start } => {
                let s = self.nodes[*input].value.shape();
                let (outer, n, inner) = axis_split(s, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    d[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*input, d));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Broadcast(a) => out.push((*a, reduce_to(g, dat(*a).len()))),
            Op::Cosine(a, b) => {
                let s = self.nodes[*a].value.shape();
                let (d, np) = (s[0], s[1] * s[2]);
                let (fa, fb) = (dat(*a), dat(*b));
                let mut ga = vec![0.0; fa.len()];
                let mut gb = vec![0.0; fb.len()];
                for p in 0..np {
                    let (mut na, mut nb) = (0.0, 0.0);
                    for k in 0..d {
                        na += fa[k * np + p] * fa[k * np + p];
                        nb += fb[k * np + p] * fb[k * np + p];
                    }
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let (la, lb) = (na.sqrt(), nb.sqrt());
                    let cos = val[p];
                    for k in 0..d {
                        let (x, y) = (fa[k * np + p], fb[k * np + p]);
                        ga[k * np + p] = g[p] * (y / (la * lb) - cos * x / na);
                        gb[k * np + p] = g[p] * (x / (la * lb) - cos * y / nb);
                    }
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::AxisAngle(wv) => {
                let d = dat(*wv);
                let w = [d[0], d[1], d[2]];
                let s = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
                let (ca, cb, da, db) = rodrigues_coeffs(s);
                let k = hat(w);
                let k2 = mat3_mul(&k, &k);
                let mut gw = vec![0.0; 3];
                for (i, gwi) in gw.iter_mut().enumerate() {
                    let mut e = [0.0; 3];
                    e[i] = 1.0;
                    let ei = hat(e);
                    let eik = mat3_mul(&ei, &k);
                    let kei = mat3_mul(&k, &ei);
                    let ds = 2.0 * w[i];
                    let mut acc = 0.0;
                    for r in 0..3 {
                        for c in 0..3 {
                            let dr = ds * (da * k[r][c] + db * k2[r][c])
                                + ca * ei[r][c]
                                + cb * (eik[r][c] + kei[r][c]);
                            acc += g[r * 3 + c] * dr;
                        }
                    }
                    *gwi = acc;
                }
                out.push((*wv, gw));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(a);
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut g = Graph::new();
        let img = Tensor::from_fn(&[1, 5, 7], |i| (i as f64 * 0.37).sin());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let x = g.constant(img.clone());
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y), &img);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 6.0);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.leaf(Tensor::scalar(5.0));
        let z = g.mul(x, y).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.wrt(x).item(), 5.0);
        assert_eq!(grads.wrt(y).item(), 2.0);
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let unused = g.leaf(Tensor::zeros(&[2, 3]));
        let y = g.exp(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(unused), Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalar(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        match g.add(a, b) {
            Err(Error::Shape { op, shapes }) => {
                assert_eq!(op, "add");
                assert_eq!(shapes, vec![vec![2, 3], vec![3, 2]]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let z = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(z), Err(Error::Domain { op: "log", .. })));
        let one = g.scalar(1.0);
        assert!(matches!(
            g.div(one, z),
            Err(Error::Domain { op: "div", .. })
        ));
        let neg = g.scalar(-1.0);
        assert!(g.sqrt(neg).is_err());
        assert!(g.pow(neg, 0.5).is_err());
    }

    #[test]
    fn trailing_broadcast() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let b = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 3]);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        // d/db sums a over the leading axis
        assert_eq!(grads.wrt(b).data(), &[6.0, 8.0, 10.0, 12.0, 14.0, 16.0]);
    }

    #[test]
    fn bilinear_integer_coordinate_convention() {
        // 1x1x3 image [0, 1, 3]; at u = 1 the derivative comes from cell [1, 2].
        let mut g = Graph::new();
        let img = g.constant(t(&[1, 1, 3], &[0.0, 1.0, 3.0]));
        let grid = g.leaf(t(&[1, 1, 2], &[1.0, 0.0]));
        let s = g.bilinear_sample(img, grid).unwrap();
        assert_eq!(g.value(s).item(), 1.0);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(grid).data(), &[2.0, 0.0]);

        // the last column belongs to the cell on its left
        let mut g = Graph::new();
        let img = g.constant(t(&[1, 1, 3], &[0.0, 1.0, 3.0]));
        let grid = g.leaf(t(&[1, 1, 2], &[2.0, 0.0]));
        let s = g.bilinear_sample(img, grid).unwrap();
        assert_eq!(g.value(s).item(), 3.0);
        assert_eq!(g.backward(s).unwrap().wrt(grid).data(), &[2.0, 0.0]);
    }

    #[test]
    fn bilinear_clamps_outside() {
        let mut g = Graph::new();
        let img = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let grid = g.leaf(t(&[1, 2, 2], &[-3.0, 0.5, 9.0, 9.0]));
        let s = g.bilinear_sample(img, grid).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 4.0]);
        let sum = g.sum(s);
        let gr = g.backward(sum).unwrap().wrt(grid);
        assert_eq!(gr.data()[0], 0.0);
        assert_eq!(gr.data()[1], 2.0);
        assert_eq!(&gr.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn axis_angle_is_rotation() {
        for w in [
            [0.0, 0.0, 0.0],
            [1e-9, -2e-9, 0.0],
            [0.3, -1.2, 0.7],
            [3.0, 0.1, 0.0],
        ] {
            let r = axis_angle_matrix(w);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - e).abs() < 1e-12);
                }
            }
        }
        assert_eq!(
            axis_angle_matrix([0.0; 3]),
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        );
    }

    #[test]
    fn constant_only_ops_are_not_recorded() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.exp(a);
        assert!(!g.requires_grad(b));
        let x = g.leaf(Tensor::scalar(1.0));
        let c = g.mul(b, x).unwrap();
        assert!(g.requires_grad(c));
    }
}
