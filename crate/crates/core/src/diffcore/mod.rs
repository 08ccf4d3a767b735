//! Reverse-mode differentiation over dense f64 tensors.
//!
//! A [`Tape`] records primitive operations in topological order; [`Tape::backward`]
//! replays them once in reverse, accumulating gradients into every recorded
//! node that requires them. Gradients of shared subexpressions sum, values are
//! checked finite after every primitive, and identical inputs produce bitwise
//! identical outputs and gradients.
//!
//! Tapes are single-owner, single-threaded. Parallel training builds one tape
//! per episode and reduces the per-parameter gradients afterwards.

pub mod optim;

use crate::error::{KrcError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    /// rhs has the row shape of lhs and is added to every row.
    AddBroadcast(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Recip(usize),
    MatMul(usize, usize),
    /// lhs · rhsᵀ
    MatMulNT(usize, usize),
    MatVec(usize, usize),
    Transpose(usize),
    Reshape(usize),
    ConcatVec(Vec<usize>),
    StackRows(Vec<usize>),
    SliceVec(usize, usize),
    RowOf(usize, usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Sqrt(usize),
    Square(usize),
    Softplus(usize),
    Clamp(usize, f64, f64),
    Softmax(usize),
    SumAll(usize),
    MeanAll(usize),
    SumRows(usize),
    Dot(usize, usize),
    Outer(usize, usize),
    DiagEmbed(usize),
    CholFactor(usize),
    CholSolveVec(usize, usize),
    CholSolveMat(usize, usize),
    LogDet(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    /// true when a gradient must flow to or through this node
    rg: bool,
    /// factor or other forward byproduct reused by the backward rule
    saved: Option<Tensor>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by a backward pass.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    /// Gradient of a var, or zeros of its shape if none flowed.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.by_node[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(tape.value(v).shape().to_vec()),
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, rg: bool, saved: Option<Tensor>) -> Result<Var> {
        if !value.is_finite() {
            return Err(KrcError::numeric(op_name, "non-finite values in result".to_string()));
        }
        self.nodes.push(Node { value, op, rg, saved });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].rg
    }

    /// Constant input; no gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, rg: false, saved: None });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input; gradients accumulate here.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, rg: true, saved: None });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(Tensor::scalar(x))
    }

    // ---- arithmetic -------------------------------------------------------

    /// Elementwise sum, or row-broadcast when `b` matches the trailing
    /// dimensions of matrix `a` (the only broadcast supported).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() == vb.shape() {
            let out = va.add(vb)?;
            return self.push("add", out, Op::Add(a.0, b.0), self.rg(a.0) || self.rg(b.0), None);
        }
        if va.rank() == 2 && vb.rank() == 1 && va.shape()[1] == vb.len() {
            let (r, c) = (va.shape()[0], va.shape()[1]);
            let mut data = va.data().to_vec();
            for i in 0..r {
                for j in 0..c {
                    data[i * c + j] += vb.data()[j];
                }
            }
            let out = Tensor::from_vec(vec![r, c], data)?;
            return self.push("add", out, Op::AddBroadcast(a.0, b.0), self.rg(a.0) || self.rg(b.0), None);
        }
        Err(KrcError::dim("add", format!("{:?} vs {:?}", va.shape(), vb.shape())))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        self.push("sub", out, Op::Sub(a.0, b.0), self.rg(a.0) || self.rg(b.0), None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.mul(&self.nodes[b.0].value)?;
        self.push("mul", out, Op::Mul(a.0, b.0), self.rg(a.0) || self.rg(b.0), None)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.scale(-1.0);
        self.push("neg", out, Op::Neg(a.0), self.rg(a.0), None)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.nodes[a.0].value.scale(c);
        self.push("scale", out, Op::Scale(a.0, c), self.rg(a.0), None)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| v + c);
        self.push("add_scalar", out, Op::AddScalar(a.0), self.rg(a.0), None)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| 1.0 / v);
        self.push("recip", out, Op::Recip(a.0), self.rg(a.0), None)
    }

    // ---- matrix ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        self.push("matmul", out, Op::MatMul(a.0, b.0), self.rg(a.0) || self.rg(b.0), None)
    }

    /// `a · bᵀ`; the common dense-layer orientation with row-major weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.matmul_nt(&self.nodes[b.0].value)?;
        self.push("matmul_nt", out, Op::MatMulNT(a.0, b.0), self.rg(a.0) || self.rg(b.0), None)
    }

    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.matvec(&self.nodes[x.0].value)?;
        self.push("matvec", out, Op::MatVec(a.0, x.0), self.rg(a.0) || self.rg(x.0), None)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.transpose()?;
        self.push("transpose", out, Op::Transpose(a.0), self.rg(a.0), None)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.nodes[a.0].value.reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a.0), self.rg(a.0), None)
    }

    pub fn concat_vec(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.rank() != 1 {
                return Err(KrcError::dim("concat", format!("part shape {:?} not a vector", v.shape())));
            }
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let out = Tensor::vector(data);
        self.push("concat", out, Op::ConcatVec(parts.iter().map(|p| p.0).collect()), rg, None)
    }

    /// Stack equal-length vectors as matrix rows.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(KrcError::dim("stack_rows", "no rows".to_string()));
        }
        let n = self.nodes[parts[0].0].value.len();
        let mut data = Vec::with_capacity(parts.len() * n);
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.rank() != 1 || v.len() != n {
                return Err(KrcError::dim("stack_rows", format!("row shape {:?}", v.shape())));
            }
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let out = Tensor::from_vec(vec![parts.len(), n], data)?;
        self.push("stack_rows", out, Op::StackRows(parts.iter().map(|p| p.0).collect()), rg, None)
    }

    pub fn slice_vec(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.rank() != 1 || start + len > v.len() {
            return Err(KrcError::dim("slice", format!("{}..{} of {:?}", start, start + len, v.shape())));
        }
        let out = Tensor::vector(v.data()[start..start + len].to_vec());
        self.push("slice", out, Op::SliceVec(a.0, start), self.rg(a.0), None)
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.rank() != 2 || i >= v.shape()[0] {
            return Err(KrcError::dim("row", format!("row {} of {:?}", i, v.shape())));
        }
        let out = Tensor::vector(v.row(i).to_vec());
        self.push("row", out, Op::RowOf(a.0, i), self.rg(a.0), None)
    }

    // ---- nonlinearities ----------------------------------------------------

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(f64::exp);
        self.push("exp", out, Op::Exp(a.0), self.rg(a.0), None)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(f64::ln);
        self.push("log", out, Op::Log(a.0), self.rg(a.0), None)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a.0), self.rg(a.0), None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push("sigmoid", out, Op::Sigmoid(a.0), self.rg(a.0), None)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(f64::sqrt);
        self.push("sqrt", out, Op::Sqrt(a.0), self.rg(a.0), None)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| v * v);
        self.push("square", out, Op::Square(a.0), self.rg(a.0), None)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        // max(x,0) + log1p(exp(-|x|)) avoids overflow on both tails
        let out = self.nodes[a.0].value.map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.push("softplus", out, Op::Softplus(a.0), self.rg(a.0), None)
    }

    /// Hard clamp; gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| v.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp(a.0, lo, hi), self.rg(a.0), None)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.rank() != 1 {
            return Err(KrcError::dim("softmax", format!("expected vector, got {:?}", v.shape())));
        }
        let m = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.data().iter().map(|x| (x - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        let out = Tensor::vector(exps.iter().map(|e| e / s).collect());
        self.push("softmax", out, Op::Softmax(a.0), self.rg(a.0), None)
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push("sum", out, Op::SumAll(a.0), self.rg(a.0), None)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push("mean", out, Op::MeanAll(a.0), self.rg(a.0), None)
    }

    /// Row sums of a matrix, as a vector.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.rank() != 2 {
            return Err(KrcError::dim("sum_rows", format!("{:?}", v.shape())));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let out = Tensor::vector((0..r).map(|i| v.data()[i * c..(i + 1) * c].iter().sum()).collect());
        self.push("sum_rows", out, Op::SumRows(a.0), self.rg(a.0), None)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Tensor::scalar(self.nodes[a.0].value.dot(&self.nodes[b.0].value)?);
        self.push("dot", out, Op::Dot(a.0, b.0), self.rg(a.0) || self.rg(b.0), None)
    }

    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.outer(&self.nodes[b.0].value)?;
        self.push("outer", out, Op::Outer(a.0, b.0), self.rg(a.0) || self.rg(b.0), None)
    }

    pub fn diag_embed(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.rank() != 1 {
            return Err(KrcError::dim("diag_embed", format!("{:?}", v.shape())));
        }
        let out = Tensor::diag_from(v.data());
        self.push("diag_embed", out, Op::DiagEmbed(a.0), self.rg(a.0), None)
    }

    // ---- symmetric factorizations -------------------------------------------

    /// Lower Cholesky factor; the input is symmetrized first.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let l = self.nodes[a.0].value.cholesky()?;
        self.push("cholesky", l.clone(), Op::CholFactor(a.0), self.rg(a.0), Some(l))
    }

    /// `M⁻¹ b` for symmetric positive-definite M and vector b.
    pub fn chol_solve_vec(&mut self, m: Var, b: Var) -> Result<Var> {
        let l = self.nodes[m.0].value.cholesky()?;
        let x = Tensor::chol_solve_vec(&l, &self.nodes[b.0].value)?;
        self.push("chol_solve_vec", x, Op::CholSolveVec(m.0, b.0), self.rg(m.0) || self.rg(b.0), Some(l))
    }

    /// `M⁻¹ B` for symmetric positive-definite M and matrix B.
    pub fn chol_solve_mat(&mut self, m: Var, b: Var) -> Result<Var> {
        let l = self.nodes[m.0].value.cholesky()?;
        let x = Tensor::chol_solve_mat(&l, &self.nodes[b.0].value)?;
        self.push("chol_solve_mat", x, Op::CholSolveMat(m.0, b.0), self.rg(m.0) || self.rg(b.0), Some(l))
    }

    /// log-determinant of a symmetric positive-definite matrix.
    pub fn logdet(&mut self, m: Var) -> Result<Var> {
        let l = self.nodes[m.0].value.cholesky()?;
        let out = Tensor::scalar(Tensor::logdet_from_chol(&l));
        self.push("logdet", out, Op::LogDet(m.0), self.rg(m.0), Some(l))
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse pass from a scalar loss. Each node is visited exactly once;
    /// gradients of shared subexpressions accumulate by summation.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(KrcError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].rg {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) -> Result<()> {
        let val = |j: usize| &self.nodes[j].value;
        let mut acc = |j: usize, delta: Tensor| -> Result<()> {
            if !self.nodes[j].rg {
                return Ok(());
            }
            match &mut grads[j] {
                Some(t) => *t = t.add(&delta)?,
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::AddBroadcast(a, b) => {
                acc(*a, g.clone())?;
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut col = vec![0.0; c];
                for ri in 0..r {
                    for ci in 0..c {
                        col[ci] += g.data()[ri * c + ci];
                    }
                }
                acc(*b, Tensor::vector(col))?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(val(*b))?)?;
                acc(*b, g.mul(val(*a))?)?;
            }
            Op::Neg(a) => acc(*a, g.scale(-1.0))?,
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::AddScalar(a) => acc(*a, g.clone())?,
            Op::Recip(a) => {
                let out = &self.nodes[i].value;
                acc(*a, g.mul(&out.mul(out)?)?.scale(-1.0))?;
            }
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_nt(val(*b))?)?;
                acc(*b, val(*a).matmul_tn(g)?)?;
            }
            Op::MatMulNT(a, b) => {
                acc(*a, g.matmul(val(*b))?)?;
                acc(*b, g.matmul_tn(val(*a))?)?;
            }
            Op::MatVec(a, x) => {
                acc(*a, g.outer(val(*x))?)?;
                acc(*x, val(*a).matvec_t(g)?)?;
            }
            Op::Transpose(a) => acc(*a, g.transpose()?)?,
            Op::Reshape(a) => acc(*a, g.reshaped(val(*a).shape().to_vec())?)?,
            Op::ConcatVec(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    acc(*p, Tensor::vector(g.data()[off..off + n].to_vec()))?;
                    off += n;
                }
            }
            Op::StackRows(parts) => {
                let n = g.shape()[1];
                for (ri, p) in parts.iter().enumerate() {
                    acc(*p, Tensor::vector(g.data()[ri * n..(ri + 1) * n].to_vec()))?;
                }
            }
            Op::SliceVec(a, start) => {
                let mut full = Tensor::zeros(val(*a).shape().to_vec());
                full.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                acc(*a, full)?;
            }
            Op::RowOf(a, r) => {
                let mut full = Tensor::zeros(val(*a).shape().to_vec());
                let c = g.len();
                full.data_mut()[r * c..(r + 1) * c].copy_from_slice(g.data());
                acc(*a, full)?;
            }
            Op::Exp(a) => acc(*a, g.mul(&self.nodes[i].value)?)?,
            Op::Log(a) => acc(*a, g.mul(&val(*a).map(|v| 1.0 / v))?)?,
            Op::Tanh(a) => {
                let out = &self.nodes[i].value;
                acc(*a, g.mul(&out.map(|v| 1.0 - v * v))?)?;
            }
            Op::Sigmoid(a) => {
                let out = &self.nodes[i].value;
                acc(*a, g.mul(&out.map(|v| v * (1.0 - v)))?)?;
            }
            Op::Sqrt(a) => {
                let out = &self.nodes[i].value;
                acc(*a, g.mul(&out.map(|v| 0.5 / v))?)?;
            }
            Op::Square(a) => acc(*a, g.mul(&val(*a).scale(2.0))?)?,
            Op::Softplus(a) => acc(*a, g.mul(&val(*a).map(|v| 1.0 / (1.0 + (-v).exp())))?)?,
            Op::Clamp(a, lo, hi) => {
                let mask = val(*a).map(|v| if v > *lo && v < *hi { 1.0 } else { 0.0 });
                acc(*a, g.mul(&mask)?)?;
            }
            Op::Softmax(a) => {
                let out = &self.nodes[i].value;
                let inner = g.dot(out)?;
                acc(*a, out.mul(&g.map(|v| v - inner))?)?;
            }
            Op::SumAll(a) => acc(*a, Tensor::filled(val(*a).shape().to_vec(), g.data()[0]))?,
            Op::MeanAll(a) => {
                let n = val(*a).len() as f64;
                acc(*a, Tensor::filled(val(*a).shape().to_vec(), g.data()[0] / n))?;
            }
            Op::SumRows(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let mut full = Tensor::zeros(vec![r, c]);
                for ri in 0..r {
                    for ci in 0..c {
                        full.data_mut()[ri * c + ci] = g.data()[ri];
                    }
                }
                acc(*a, full)?;
            }
            Op::Dot(a, b) => {
                let s = g.data()[0];
                acc(*a, val(*b).scale(s))?;
                acc(*b, val(*a).scale(s))?;
            }
            Op::Outer(a, b) => {
                acc(*a, g.matvec(val(*b))?)?;
                acc(*b, g.matvec_t(val(*a))?)?;
            }
            Op::DiagEmbed(a) => acc(*a, g.diag()?)?,
            Op::CholFactor(a) => {
                let l = self.nodes[i].saved.as_ref().unwrap();
                acc(*a, chol_factor_backward(l, g)?)?;
            }
            Op::CholSolveVec(m, b) => {
                let l = self.nodes[i].saved.as_ref().unwrap();
                let gb = Tensor::chol_solve_vec(l, g)?;
                let x = &self.nodes[i].value;
                let gm = gb.outer(x)?.scale(-1.0).symmetrized()?;
                acc(*m, gm)?;
                acc(*b, gb)?;
            }
            Op::CholSolveMat(m, b) => {
                let l = self.nodes[i].saved.as_ref().unwrap();
                let gb = Tensor::chol_solve_mat(l, g)?;
                let x = &self.nodes[i].value;
                let gm = gb.matmul_nt(x)?.scale(-1.0).symmetrized()?;
                acc(*m, gm)?;
                acc(*b, gb)?;
            }
            Op::LogDet(m) => {
                let l = self.nodes[i].saved.as_ref().unwrap();
                let n = l.shape()[0];
                let inv = Tensor::chol_solve_mat(l, &Tensor::eye(n))?;
                acc(*m, inv.scale(g.data()[0]).symmetrized()?)?;
            }
        }
        Ok(())
    }
}

/// Solve `Lᵀ X = B` for lower-triangular L.
fn tri_solve_lower_t(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = l.shape()[0];
    let c = b.shape()[1];
    let mut x = b.clone();
    for j in 0..c {
        for i in (0..n).rev() {
            let mut acc = x.at2(i, j);
            for k in (i + 1)..n {
                acc -= l.at2(k, i) * x.at2(k, j);
            }
            x.set2(i, j, acc / l.at2(i, i));
        }
    }
    Ok(x)
}

/// Gradient of the symmetrized-input Cholesky factorization.
fn chol_factor_backward(l: &Tensor, lbar: &Tensor) -> Result<Tensor> {
    let n = l.shape()[0];
    // only the lower triangle of the upstream gradient is meaningful
    let mut lb = lbar.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            lb.set2(i, j, 0.0);
        }
    }
    let mut p = l.transpose()?.matmul(&lb)?;
    for i in 0..n {
        for j in 0..n {
            if j > i {
                p.set2(i, j, 0.0);
            } else if j == i {
                let v = p.at2(i, i);
                p.set2(i, i, 0.5 * v);
            }
        }
    }
    // S = L⁻ᵀ P L⁻¹, computed with two triangular solves
    let z = tri_solve_lower_t(l, &p)?;
    let s = tri_solve_lower_t(l, &z.transpose()?)?.transpose()?;
    // forward symmetrizes its input, so the gradient symmetrizes too
    s.add(&s.transpose()?)?.scale(0.5).symmetrized()
}

/// Gradients for named parameters of a scalar function, by reverse mode.
pub fn grad<F>(f: F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars.iter().map(|v| grads.get_or_zeros(&tape, *v)).collect())
}

/// Max relative error between reverse-mode and central-difference gradients:
/// `max over elements of |analytic − fd| / max(1, |fd|)`.
/// Returns 0 for a parameterless function.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(KrcError::Contract("grad_check needs eps > 0".to_string()));
    }
    let analytic = grad(&f, params)?;
    if params.is_empty() {
        return Ok(0.0);
    }

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for pi in 0..params.len() {
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let err = (a - fd).abs() / fd.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

// ---- parameter store ---------------------------------------------------------

/// Index of a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Owns every trainable tensor of a model, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }
}

/// Tape variables for every parameter in a store, aligned by index.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wrap an externally built var list (grad-check harnesses).
    pub fn from_vars(vars: Vec<Var>) -> Binding {
        Binding { vars }
    }

    /// Clone all parameters onto a tape as gradient-tracked leaves.
    pub fn bind_all(store: &ParamStore, tape: &mut Tape) -> Binding {
        let vars = store.values.iter().map(|t| tape.param(t.clone())).collect();
        Binding { vars }
    }

    /// Same, but frozen: no gradients tracked (inference-only tapes).
    pub fn bind_all_frozen(store: &ParamStore, tape: &mut Tape) -> Binding {
        let vars = store.values.iter().map(|t| tape.leaf(t.clone())).collect();
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-store-parameter gradients (zeros where none flowed).
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.get_or_zeros(tape, *v)).collect()
    }
}
