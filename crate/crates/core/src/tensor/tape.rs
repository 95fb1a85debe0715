//! Reverse-mode autodiff tape.
//!
//! Forward ops append nodes; `backward` consumes the tape in reverse
//! topological order (which is just creation order) and returns accumulated
//! gradients for every `requires_grad` node. A tape is confined to one
//! logical execution context; distinct tapes may run concurrently on
//! disjoint data.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::tensor::array::Array;
use crate::tensor::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
pub enum BcKind {
    Add,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op<E: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Silu(usize),
    Softplus(usize),
    AddConst(usize, E),
    MulConst(usize, E),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Softmax { x: usize, tau: E },
    LogSoftmax { x: usize, tau: E },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: E },
    SumAll(usize),
    MeanAll(usize),
    SumAxis { x: usize, axis: usize },
    MeanAxis { x: usize, axis: usize },
    MaxAxis { x: usize, axis: usize, argmax: Vec<usize> },
    GatherRows { x: usize, idx: Vec<usize> },
    Concat { xs: Vec<usize>, axis: usize },
    CumsumRows(usize),
    /// Broadcast `b` ([cols]) across every row of `a` ([rows x cols]).
    BcastRow { kind: BcKind, a: usize, b: usize },
    /// Broadcast `b` ([rows]) across every column entry of its row.
    BcastCol { kind: BcKind, a: usize, b: usize },
}

struct Node<E: Scalar> {
    value: Array<E>,
    op: Op<E>,
    requires_grad: bool,
}

pub struct Tape<E: Scalar> {
    nodes: RefCell<Vec<Node<E>>>,
    tie_hit: Cell<bool>,
}

pub struct Gradients<E: Scalar> {
    grads: Vec<Option<Array<E>>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn get(&self, id: TensorId) -> Option<&Array<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            tie_hit: Cell::new(false),
        }
    }

    /// True when a max reduction hit an exact tie since the last reset; the
    /// gradient at such a point is one-sided.
    pub fn nondiff_hit(&self) -> bool {
        self.tie_hit.get()
    }

    pub fn reset_nondiff_flag(&self) {
        self.tie_hit.set(false);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, id: TensorId) -> Array<E> {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn shape(&self, id: TensorId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes.borrow()[id.0].requires_grad
    }

    fn push(&self, value: Array<E>, op: Op<E>, requires_grad: bool) -> Result<TensorId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{:?}", op_name(&op))));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(TensorId(nodes.len() - 1))
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn val<'a>(nodes: &'a [Node<E>], i: usize) -> &'a Array<E> {
        &nodes[i].value
    }

    // ---- leaves ----

    pub fn leaf(&self, value: Array<E>) -> Result<TensorId> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf_grad(&self, value: Array<E>) -> Result<TensorId> {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&self, v: E) -> Result<TensorId> {
        self.leaf(Array::scalar(v))
    }

    // ---- elementwise binary (equal shape or scalar operand) ----

    fn check_binary(&self, a: TensorId, b: TensorId, name: &str) -> Result<Vec<usize>> {
        let nodes = self.nodes.borrow();
        let sa = nodes[a.0].value.shape();
        let sb = nodes[b.0].value.shape();
        if sa == sb {
            return Ok(sa.to_vec());
        }
        if nodes[a.0].value.is_scalar() {
            return Ok(sb.to_vec());
        }
        if nodes[b.0].value.is_scalar() {
            return Ok(sa.to_vec());
        }
        Err(Error::shape(format!("{name}: {:?} vs {:?}", sa, sb)))
    }

    fn binary_apply(
        &self,
        a: TensorId,
        b: TensorId,
        shape: Vec<usize>,
        f: impl Fn(E, E) -> E,
    ) -> Array<E> {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.0].value;
        let vb = &nodes[b.0].value;
        let n: usize = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        match (va.is_scalar() && n != 1, vb.is_scalar() && n != 1) {
            (true, _) => {
                let s = va.scalar_value();
                out.extend(vb.data().iter().map(|&x| f(s, x)));
            }
            (_, true) => {
                let s = vb.scalar_value();
                out.extend(va.data().iter().map(|&x| f(x, s)));
            }
            _ => out.extend(
                va.data()
                    .iter()
                    .zip(vb.data().iter())
                    .map(|(&x, &y)| f(x, y)),
            ),
        }
        Array::new(shape, out).expect("binary shape")
    }

    pub fn add(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.check_binary(a, b, "add")?;
        let v = self.binary_apply(a, b, shape, |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0), self.any_grad(&[a.0, b.0]))
    }

    pub fn sub(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.check_binary(a, b, "sub")?;
        let v = self.binary_apply(a, b, shape, |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0), self.any_grad(&[a.0, b.0]))
    }

    pub fn mul(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.check_binary(a, b, "mul")?;
        let v = self.binary_apply(a, b, shape, |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0), self.any_grad(&[a.0, b.0]))
    }

    pub fn div(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.check_binary(a, b, "div")?;
        {
            let nodes = self.nodes.borrow();
            if nodes[b.0].value.data().iter().any(|&v| v == E::zero()) {
                return Err(Error::domain("division by zero operand"));
            }
        }
        let v = self.binary_apply(a, b, shape, |x, y| x / y);
        self.push(v, Op::Div(a.0, b.0), self.any_grad(&[a.0, b.0]))
    }

    // ---- elementwise unary ----

    pub fn neg(&self, a: TensorId) -> Result<TensorId> {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a.0), self.any_grad(&[a.0]))
    }

    pub fn exp(&self, a: TensorId) -> Result<TensorId> {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a.0), self.any_grad(&[a.0]))
    }

    pub fn log(&self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        if va.data().iter().any(|&v| v <= E::zero()) {
            return Err(Error::domain("log of non-positive operand"));
        }
        let v = va.map(|x| x.ln());
        self.push(v, Op::Log(a.0), self.any_grad(&[a.0]))
    }

    pub fn sqrt(&self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        if va.data().iter().any(|&v| v < E::zero()) {
            return Err(Error::domain("sqrt of negative operand"));
        }
        let v = va.map(|x| x.sqrt());
        self.push(v, Op::Sqrt(a.0), self.any_grad(&[a.0]))
    }

    pub fn silu(&self, a: TensorId) -> Result<TensorId> {
        let v = self.value(a).map(silu_val);
        self.push(v, Op::Silu(a.0), self.any_grad(&[a.0]))
    }

    pub fn softplus(&self, a: TensorId) -> Result<TensorId> {
        let v = self.value(a).map(softplus_val);
        self.push(v, Op::Softplus(a.0), self.any_grad(&[a.0]))
    }

    pub fn add_const(&self, a: TensorId, c: E) -> Result<TensorId> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a.0, c), self.any_grad(&[a.0]))
    }

    pub fn mul_const(&self, a: TensorId, c: E) -> Result<TensorId> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::MulConst(a.0, c), self.any_grad(&[a.0]))
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = {
            let nodes = self.nodes.borrow();
            Self::val(&nodes, a.0).matmul(Self::val(&nodes, b.0))?
        };
        self.push(v, Op::Matmul(a.0, b.0), self.any_grad(&[a.0, b.0]))
    }

    pub fn transpose(&self, a: TensorId) -> Result<TensorId> {
        let v = self.value(a).transpose2()?;
        self.push(v, Op::Transpose(a.0), self.any_grad(&[a.0]))
    }

    pub fn reshape(&self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a.0), self.any_grad(&[a.0]))
    }

    // ---- row-structured ops (2-d, rows = tokens) ----

    /// Temperature softmax over the last axis of a 2-d array.
    pub fn softmax_t(&self, x: TensorId, tau: E) -> Result<TensorId> {
        if tau <= E::zero() {
            return Err(Error::domain("softmax temperature must be positive"));
        }
        let vx = self.value(x);
        let (r, c) = vx.dims2()?;
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            softmax_row(&vx.data()[i * c..(i + 1) * c], tau, &mut out[i * c..(i + 1) * c]);
        }
        let v = Array::new(vec![r, c], out)?;
        self.push(v, Op::Softmax { x: x.0, tau }, self.any_grad(&[x.0]))
    }

    /// log(softmax(x/tau)) over the last axis, computed stably.
    pub fn log_softmax_t(&self, x: TensorId, tau: E) -> Result<TensorId> {
        if tau <= E::zero() {
            return Err(Error::domain("softmax temperature must be positive"));
        }
        let vx = self.value(x);
        let (r, c) = vx.dims2()?;
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            let row = &vx.data()[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(E::neg_infinity(), E::max);
            let lse = row
                .iter()
                .map(|&v| ((v - mx) / tau).exp())
                .fold(E::zero(), |a, b| a + b)
                .ln();
            for j in 0..c {
                out[i * c + j] = (row[j] - mx) / tau - lse;
            }
        }
        let v = Array::new(vec![r, c], out)?;
        self.push(v, Op::LogSoftmax { x: x.0, tau }, self.any_grad(&[x.0]))
    }

    /// Per-row layer normalization with affine.
    pub fn layernorm(&self, x: TensorId, gamma: TensorId, beta: TensorId, eps: E) -> Result<TensorId> {
        let vx = self.value(x);
        let (r, c) = vx.dims2()?;
        let vg = self.value(gamma);
        let vb = self.value(beta);
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(Error::shape(format!(
                "layernorm affine shapes {:?}/{:?} vs D={}",
                vg.shape(),
                vb.shape(),
                c
            )));
        }
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            let row = &vx.data()[i * c..(i + 1) * c];
            let (mean, istd) = row_stats(row, eps);
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * istd * vg.data()[j] + vb.data()[j];
            }
        }
        let v = Array::new(vec![r, c], out)?;
        self.push(
            v,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            self.any_grad(&[x.0, gamma.0, beta.0]),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: TensorId) -> Result<TensorId> {
        let v = Array::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a.0), self.any_grad(&[a.0]))
    }

    pub fn mean_all(&self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        if va.numel() == 0 {
            return Err(Error::shape("mean over empty array"));
        }
        let v = Array::scalar(va.mean());
        self.push(v, Op::MeanAll(a.0), self.any_grad(&[a.0]))
    }

    fn check_axis(&self, a: TensorId, axis: usize) -> Result<(usize, usize)> {
        let va = self.value(a);
        let (r, c) = va.dims2()?;
        if axis > 1 {
            return Err(Error::shape(format!("invalid axis {axis} for 2-d array")));
        }
        if (axis == 0 && r == 0) || (axis == 1 && c == 0) {
            return Err(Error::shape("reduction over empty axis selection"));
        }
        Ok((r, c))
    }

    pub fn sum_axis(&self, a: TensorId, axis: usize) -> Result<TensorId> {
        let (r, c) = self.check_axis(a, axis)?;
        let va = self.value(a);
        let v = reduce_axis(&va, r, c, axis, |acc, x| acc + x, E::zero());
        self.push(v, Op::SumAxis { x: a.0, axis }, self.any_grad(&[a.0]))
    }

    pub fn mean_axis(&self, a: TensorId, axis: usize) -> Result<TensorId> {
        let (r, c) = self.check_axis(a, axis)?;
        let va = self.value(a);
        let n = if axis == 0 { r } else { c };
        let mut v = reduce_axis(&va, r, c, axis, |acc, x| acc + x, E::zero());
        let inv = E::one() / E::c(n as f64);
        v = v.map(|x| x * inv);
        self.push(v, Op::MeanAxis { x: a.0, axis }, self.any_grad(&[a.0]))
    }

    /// Max along an axis; backward routes to the argmax element, ties broken
    /// by lowest index (and flagged on the tape).
    pub fn max_axis(&self, a: TensorId, axis: usize) -> Result<TensorId> {
        let (r, c) = self.check_axis(a, axis)?;
        let va = self.value(a);
        let (out_len, lane_len) = if axis == 0 { (c, r) } else { (r, c) };
        let mut out = vec![E::neg_infinity(); out_len];
        let mut argmax = vec![0usize; out_len];
        for lane in 0..out_len {
            for k in 0..lane_len {
                let v = if axis == 0 {
                    va.at2(k, lane)
                } else {
                    va.at2(lane, k)
                };
                if v > out[lane] {
                    out[lane] = v;
                    argmax[lane] = k;
                } else if v == out[lane] && k != argmax[lane] {
                    self.tie_hit.set(true);
                }
            }
        }
        let v = Array::new(vec![out_len], out)?;
        self.push(
            v,
            Op::MaxAxis {
                x: a.0,
                axis,
                argmax,
            },
            self.any_grad(&[a.0]),
        )
    }

    // ---- structure ops ----

    pub fn gather_rows(&self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let va = self.value(a);
        let (r, c) = va.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape(format!("gather index {bad} out of {r} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&va.data()[i * c..(i + 1) * c]);
        }
        let v = Array::new(vec![idx.len(), c], out)?;
        self.push(
            v,
            Op::GatherRows {
                x: a.0,
                idx: idx.to_vec(),
            },
            self.any_grad(&[a.0]),
        )
    }

    pub fn concat(&self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::shape("concat of empty list"));
        }
        let vals: Vec<Array<E>> = xs.iter().map(|&x| self.value(x)).collect();
        let dims: Vec<(usize, usize)> = vals
            .iter()
            .map(|v| v.dims2())
            .collect::<Result<Vec<_>>>()?;
        let v = match axis {
            0 => {
                let c = dims[0].1;
                if dims.iter().any(|d| d.1 != c) {
                    return Err(Error::shape("concat axis 0: column counts differ"));
                }
                let r: usize = dims.iter().map(|d| d.0).sum();
                let mut out = Vec::with_capacity(r * c);
                for v in &vals {
                    out.extend_from_slice(v.data());
                }
                Array::new(vec![r, c], out)?
            }
            1 => {
                let r = dims[0].0;
                if dims.iter().any(|d| d.0 != r) {
                    return Err(Error::shape("concat axis 1: row counts differ"));
                }
                let c: usize = dims.iter().map(|d| d.1).sum();
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    for (v, d) in vals.iter().zip(dims.iter()) {
                        out.extend_from_slice(&v.data()[i * d.1..(i + 1) * d.1]);
                    }
                }
                Array::new(vec![r, c], out)?
            }
            _ => return Err(Error::shape("concat axis must be 0 or 1")),
        };
        self.push(
            v,
            Op::Concat {
                xs: xs.iter().map(|x| x.0).collect(),
                axis,
            },
            self.any_grad(&xs.iter().map(|x| x.0).collect::<Vec<_>>()),
        )
    }

    /// Inclusive cumulative sum down the rows of a 2-d array.
    pub fn cumsum_rows(&self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        let (r, c) = va.dims2()?;
        let mut out = va.data().to_vec();
        for i in 1..r {
            for j in 0..c {
                out[i * c + j] = out[i * c + j] + out[(i - 1) * c + j];
            }
        }
        let v = Array::new(vec![r, c], out)?;
        self.push(v, Op::CumsumRows(a.0), self.any_grad(&[a.0]))
    }

    fn bcast(&self, kind: BcKind, a: TensorId, b: TensorId, row: bool) -> Result<TensorId> {
        let va = self.value(a);
        let vb = self.value(b);
        let (r, c) = va.dims2()?;
        let expect = if row { c } else { r };
        if vb.shape() != [expect] {
            return Err(Error::shape(format!(
                "broadcast operand shape {:?}, expected [{}]",
                vb.shape(),
                expect
            )));
        }
        if matches!(kind, BcKind::Div) && vb.data().iter().any(|&v| v == E::zero()) {
            return Err(Error::domain("broadcast division by zero"));
        }
        let f = |x: E, y: E| match kind {
            BcKind::Add => x + y,
            BcKind::Mul => x * y,
            BcKind::Div => x / y,
        };
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let y = if row { vb.data()[j] } else { vb.data()[i] };
                out.push(f(va.at2(i, j), y));
            }
        }
        let v = Array::new(vec![r, c], out)?;
        let op = if row {
            Op::BcastRow {
                kind,
                a: a.0,
                b: b.0,
            }
        } else {
            Op::BcastCol {
                kind,
                a: a.0,
                b: b.0,
            }
        };
        self.push(v, op, self.any_grad(&[a.0, b.0]))
    }

    pub fn add_row(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.bcast(BcKind::Add, a, b, true)
    }
    pub fn mul_row(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.bcast(BcKind::Mul, a, b, true)
    }
    pub fn div_row(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.bcast(BcKind::Div, a, b, true)
    }
    pub fn add_col(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.bcast(BcKind::Add, a, b, false)
    }
    pub fn mul_col(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.bcast(BcKind::Mul, a, b, false)
    }
    pub fn div_col(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.bcast(BcKind::Div, a, b, false)
    }

    // ---- composites ----

    /// x @ w + bias (bias broadcast across rows).
    pub fn linear(&self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Unit l2-normalize each row: x / sqrt(sum(x^2) + eps).
    pub fn normalize_rows(&self, x: TensorId, eps: E) -> Result<TensorId> {
        let sq = self.mul(x, x)?;
        let s = self.sum_axis(sq, 1)?;
        let s = self.add_const(s, eps)?;
        let norm = self.sqrt(s)?;
        self.div_col(x, norm)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. The tape is cleared afterward; the
    /// returned gradients are indexed by the ids handed out during forward.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<E>> {
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Array<E>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Array::scalar(E::one()));

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {:?}",
                    op_name(&nodes[i].op)
                )));
            }
            backprop_node(&nodes, i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn silu_val<E: Scalar>(x: E) -> E {
    x / (E::one() + (-x).exp())
}

fn softplus_val<E: Scalar>(x: E) -> E {
    // log(1 + e^x), stable for large |x|
    if x > E::c(30.0) {
        x
    } else if x < E::c(-30.0) {
        x.exp()
    } else {
        (E::one() + x.exp()).ln()
    }
}

fn sigmoid<E: Scalar>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

fn softmax_row<E: Scalar>(row: &[E], tau: E, out: &mut [E]) {
    let mx = row.iter().copied().fold(E::neg_infinity(), E::max);
    let mut sum = E::zero();
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = ((v - mx) / tau).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn row_stats<E: Scalar>(row: &[E], eps: E) -> (E, E) {
    let n = E::c(row.len() as f64);
    let mean = row.iter().copied().fold(E::zero(), |a, b| a + b) / n;
    let var = row
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .fold(E::zero(), |a, b| a + b)
        / n;
    (mean, E::one() / (var + eps).sqrt())
}

fn reduce_axis<E: Scalar>(
    a: &Array<E>,
    r: usize,
    c: usize,
    axis: usize,
    f: impl Fn(E, E) -> E,
    init: E,
) -> Array<E> {
    if axis == 0 {
        let mut out = vec![init; c];
        for i in 0..r {
            for j in 0..c {
                out[j] = f(out[j], a.at2(i, j));
            }
        }
        Array::new(vec![c], out).expect("reduce shape")
    } else {
        let mut out = vec![init; r];
        for i in 0..r {
            for j in 0..c {
                out[i] = f(out[i], a.at2(i, j));
            }
        }
        Array::new(vec![r], out).expect("reduce shape")
    }
}

fn accumulate<E: Scalar>(slot: &mut Option<Array<E>>, shape: &[usize], add: impl Fn(&mut [E])) {
    if slot.is_none() {
        *slot = Some(Array::zeros(shape));
    }
    add(slot.as_mut().unwrap().data_mut());
}

/// Accumulate `g` into the grad slot of parent `p`, reducing over a
/// broadcast scalar operand when needed.
fn acc_binary<E: Scalar>(
    nodes: &[Node<E>],
    grads: &mut [Option<Array<E>>],
    p: usize,
    g: &[E],
    contrib: impl Fn(usize) -> E,
) {
    if !nodes[p].requires_grad {
        return;
    }
    let pshape = nodes[p].value.shape().to_vec();
    let pn: usize = pshape.iter().product();
    accumulate(&mut grads[p], &pshape, |dst| {
        if pn == 1 && g.len() != 1 {
            let mut s = E::zero();
            for k in 0..g.len() {
                s = s + contrib(k);
            }
            dst[0] = dst[0] + s;
        } else {
            for (k, d) in dst.iter_mut().enumerate() {
                *d = *d + contrib(k);
            }
        }
    });
}

/// Fetch operand value at broadcast position k.
fn bval<E: Scalar>(v: &Array<E>, k: usize) -> E {
    if v.is_scalar() {
        v.scalar_value()
    } else {
        v.data()[k]
    }
}

fn backprop_node<E: Scalar>(
    nodes: &[Node<E>],
    i: usize,
    g: &Array<E>,
    grads: &mut [Option<Array<E>>],
) -> Result<()> {
    let gd = g.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_binary(nodes, grads, *a, gd, |k| gd[k]);
            acc_binary(nodes, grads, *b, gd, |k| gd[k]);
        }
        Op::Sub(a, b) => {
            acc_binary(nodes, grads, *a, gd, |k| gd[k]);
            acc_binary(nodes, grads, *b, gd, |k| -gd[k]);
        }
        Op::Mul(a, b) => {
            let va = &nodes[*a].value;
            let vb = &nodes[*b].value;
            acc_binary(nodes, grads, *a, gd, |k| gd[k] * bval(vb, k));
            acc_binary(nodes, grads, *b, gd, |k| gd[k] * bval(va, k));
        }
        Op::Div(a, b) => {
            let va = &nodes[*a].value;
            let vb = &nodes[*b].value;
            acc_binary(nodes, grads, *a, gd, |k| gd[k] / bval(vb, k));
            acc_binary(nodes, grads, *b, gd, |k| {
                let d = bval(vb, k);
                -gd[k] * bval(va, k) / (d * d)
            });
        }
        Op::Neg(a) => acc_binary(nodes, grads, *a, gd, |k| -gd[k]),
        Op::Exp(a) => {
            let vo = &nodes[i].value;
            acc_binary(nodes, grads, *a, gd, |k| gd[k] * vo.data()[k]);
        }
        Op::Log(a) => {
            let va = &nodes[*a].value;
            acc_binary(nodes, grads, *a, gd, |k| gd[k] / va.data()[k]);
        }
        Op::Sqrt(a) => {
            let vo = &nodes[i].value;
            let half = E::c(0.5);
            acc_binary(nodes, grads, *a, gd, |k| gd[k] * half / vo.data()[k]);
        }
        Op::Silu(a) => {
            let va = &nodes[*a].value;
            acc_binary(nodes, grads, *a, gd, |k| {
                let x = va.data()[k];
                let s = sigmoid(x);
                gd[k] * (s + x * s * (E::one() - s))
            });
        }
        Op::Softplus(a) => {
            let va = &nodes[*a].value;
            acc_binary(nodes, grads, *a, gd, |k| gd[k] * sigmoid(va.data()[k]));
        }
        Op::AddConst(a, _) => acc_binary(nodes, grads, *a, gd, |k| gd[k]),
        Op::MulConst(a, c) => {
            let c = *c;
            acc_binary(nodes, grads, *a, gd, |k| gd[k] * c);
        }
        Op::Matmul(a, b) => {
            let va = &nodes[*a].value;
            let vb = &nodes[*b].value;
            if nodes[*a].requires_grad {
                let da = g.matmul(&vb.transpose2()?)?;
                accumulate(&mut grads[*a], va.shape(), |dst| {
                    for (d, s) in dst.iter_mut().zip(da.data()) {
                        *d = *d + *s;
                    }
                });
            }
            if nodes[*b].requires_grad {
                let db = va.transpose2()?.matmul(g)?;
                accumulate(&mut grads[*b], vb.shape(), |dst| {
                    for (d, s) in dst.iter_mut().zip(db.data()) {
                        *d = *d + *s;
                    }
                });
            }
        }
        Op::Transpose(a) => {
            if nodes[*a].requires_grad {
                let da = g.transpose2()?;
                accumulate(&mut grads[*a], nodes[*a].value.shape(), |dst| {
                    for (d, s) in dst.iter_mut().zip(da.data()) {
                        *d = *d + *s;
                    }
                });
            }
        }
        Op::Reshape(a) => acc_binary(nodes, grads, *a, gd, |k| gd[k]),
        Op::Softmax { x, tau } => {
            if nodes[*x].requires_grad {
                let p = &nodes[i].value;
                let (r, c) = p.dims2()?;
                let inv_tau = E::one() / *tau;
                accumulate(&mut grads[*x], p.shape(), |dst| {
                    for row in 0..r {
                        let pr = &p.data()[row * c..(row + 1) * c];
                        let gr = &gd[row * c..(row + 1) * c];
                        let dot = pr
                            .iter()
                            .zip(gr.iter())
                            .map(|(&pv, &gv)| pv * gv)
                            .fold(E::zero(), |a, b| a + b);
                        for j in 0..c {
                            dst[row * c + j] =
                                dst[row * c + j] + pr[j] * (gr[j] - dot) * inv_tau;
                        }
                    }
                });
            }
        }
        Op::LogSoftmax { x, tau } => {
            if nodes[*x].requires_grad {
                let lp = &nodes[i].value;
                let (r, c) = lp.dims2()?;
                let inv_tau = E::one() / *tau;
                accumulate(&mut grads[*x], lp.shape(), |dst| {
                    for row in 0..r {
                        let lr = &lp.data()[row * c..(row + 1) * c];
                        let gr = &gd[row * c..(row + 1) * c];
                        let gsum = gr.iter().copied().fold(E::zero(), |a, b| a + b);
                        for j in 0..c {
                            let p = lr[j].exp();
                            dst[row * c + j] =
                                dst[row * c + j] + (gr[j] - p * gsum) * inv_tau;
                        }
                    }
                });
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            eps,
        } => {
            let vx = &nodes[*x].value;
            let vg = &nodes[*gamma].value;
            let (r, c) = vx.dims2()?;
            let nf = E::c(c as f64);
            // recompute per-row stats; the normalized value xhat is needed by
            // all three parents
            for row in 0..r {
                let xr = &vx.data()[row * c..(row + 1) * c];
                let gr = &gd[row * c..(row + 1) * c];
                let (mean, istd) = row_stats(xr, *eps);
                let xhat: Vec<E> = xr.iter().map(|&v| (v - mean) * istd).collect();
                if nodes[*beta].requires_grad {
                    accumulate(&mut grads[*beta], &[c], |dst| {
                        for j in 0..c {
                            dst[j] = dst[j] + gr[j];
                        }
                    });
                }
                if nodes[*gamma].requires_grad {
                    accumulate(&mut grads[*gamma], &[c], |dst| {
                        for j in 0..c {
                            dst[j] = dst[j] + gr[j] * xhat[j];
                        }
                    });
                }
                if nodes[*x].requires_grad {
                    // dL/dx = istd/n * (n*gy - sum(gy) - xhat * sum(gy*xhat)),
                    // gy = g * gamma
                    let gy: Vec<E> = (0..c).map(|j| gr[j] * vg.data()[j]).collect();
                    let s1 = gy.iter().copied().fold(E::zero(), |a, b| a + b);
                    let s2 = gy
                        .iter()
                        .zip(xhat.iter())
                        .map(|(&a, &b)| a * b)
                        .fold(E::zero(), |a, b| a + b);
                    accumulate(&mut grads[*x], vx.shape(), |dst| {
                        for j in 0..c {
                            let d = (gy[j] * nf - s1 - xhat[j] * s2) * istd / nf;
                            dst[row * c + j] = dst[row * c + j] + d;
                        }
                    });
                }
            }
        }
        Op::SumAll(a) => {
            let gv = gd[0];
            acc_binary(nodes, grads, *a, gd, |_| gv);
        }
        Op::MeanAll(a) => {
            let n = nodes[*a].value.numel();
            let gv = gd[0] / E::c(n as f64);
            acc_binary(nodes, grads, *a, gd, |_| gv);
        }
        Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
            if nodes[*x].requires_grad {
                let vx = &nodes[*x].value;
                let (r, c) = vx.dims2()?;
                let scale = match &nodes[i].op {
                    Op::MeanAxis { axis, .. } => {
                        let n = if *axis == 0 { r } else { c };
                        E::one() / E::c(n as f64)
                    }
                    _ => E::one(),
                };
                let axis = *axis;
                accumulate(&mut grads[*x], vx.shape(), |dst| {
                    for row in 0..r {
                        for j in 0..c {
                            let lane = if axis == 0 { j } else { row };
                            dst[row * c + j] = dst[row * c + j] + gd[lane] * scale;
                        }
                    }
                });
            }
        }
        Op::MaxAxis { x, axis, argmax } => {
            if nodes[*x].requires_grad {
                let vx = &nodes[*x].value;
                let (_, c) = vx.dims2()?;
                let axis = *axis;
                accumulate(&mut grads[*x], vx.shape(), |dst| {
                    for (lane, &k) in argmax.iter().enumerate() {
                        let pos = if axis == 0 { k * c + lane } else { lane * c + k };
                        dst[pos] = dst[pos] + gd[lane];
                    }
                });
            }
        }
        Op::GatherRows { x, idx } => {
            if nodes[*x].requires_grad {
                let vx = &nodes[*x].value;
                let (_, c) = vx.dims2()?;
                accumulate(&mut grads[*x], vx.shape(), |dst| {
                    for (out_row, &src_row) in idx.iter().enumerate() {
                        for j in 0..c {
                            dst[src_row * c + j] = dst[src_row * c + j] + gd[out_row * c + j];
                        }
                    }
                });
            }
        }
        Op::Concat { xs, axis } => {
            let dims: Vec<(usize, usize)> = xs
                .iter()
                .map(|&p| nodes[p].value.dims2())
                .collect::<Result<Vec<_>>>()?;
            if *axis == 0 {
                let c = dims[0].1;
                let mut row0 = 0usize;
                for (&p, d) in xs.iter().zip(dims.iter()) {
                    if nodes[p].requires_grad {
                        accumulate(&mut grads[p], nodes[p].value.shape(), |dst| {
                            for k in 0..d.0 * c {
                                dst[k] = dst[k] + gd[row0 * c + k];
                            }
                        });
                    }
                    row0 += d.0;
                }
            } else {
                let r = dims[0].0;
                let total_c: usize = dims.iter().map(|d| d.1).sum();
                let mut col0 = 0usize;
                for (&p, d) in xs.iter().zip(dims.iter()) {
                    if nodes[p].requires_grad {
                        accumulate(&mut grads[p], nodes[p].value.shape(), |dst| {
                            for row in 0..r {
                                for j in 0..d.1 {
                                    dst[row * d.1 + j] =
                                        dst[row * d.1 + j] + gd[row * total_c + col0 + j];
                                }
                            }
                        });
                    }
                    col0 += d.1;
                }
            }
        }
        Op::CumsumRows(a) => {
            if nodes[*a].requires_grad {
                let va = &nodes[*a].value;
                let (r, c) = va.dims2()?;
                // grad of inclusive cumsum = reverse cumsum of grad
                accumulate(&mut grads[*a], va.shape(), |dst| {
                    for j in 0..c {
                        let mut acc = E::zero();
                        for row in (0..r).rev() {
                            acc = acc + gd[row * c + j];
                            dst[row * c + j] = dst[row * c + j] + acc;
                        }
                    }
                });
            }
        }
        Op::BcastRow { kind, a, b } | Op::BcastCol { kind, a, b } => {
            let row_mode = matches!(&nodes[i].op, Op::BcastRow { .. });
            let va = &nodes[*a].value;
            let vb = &nodes[*b].value;
            let (r, c) = va.dims2()?;
            let kind = *kind;
            let bview = |row: usize, col: usize| {
                if row_mode {
                    vb.data()[col]
                } else {
                    vb.data()[row]
                }
            };
            if nodes[*a].requires_grad {
                accumulate(&mut grads[*a], va.shape(), |dst| {
                    for row in 0..r {
                        for j in 0..c {
                            let k = row * c + j;
                            let d = match kind {
                                BcKind::Add => gd[k],
                                BcKind::Mul => gd[k] * bview(row, j),
                                BcKind::Div => gd[k] / bview(row, j),
                            };
                            dst[k] = dst[k] + d;
                        }
                    }
                });
            }
            if nodes[*b].requires_grad {
                accumulate(&mut grads[*b], vb.shape(), |dst| {
                    for row in 0..r {
                        for j in 0..c {
                            let k = row * c + j;
                            let lane = if row_mode { j } else { row };
                            let d = match kind {
                                BcKind::Add => gd[k],
                                BcKind::Mul => gd[k] * va.data()[k],
                                BcKind::Div => {
                                    let y = bview(row, j);
                                    -gd[k] * va.data()[k] / (y * y)
                                }
                            };
                            dst[lane] = dst[lane] + d;
                        }
                    }
                });
            }
        }
    }
    Ok(())
}

fn op_name<E: Scalar>(op: &Op<E>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Neg(..) => "neg",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sqrt(..) => "sqrt",
        Op::Silu(..) => "silu",
        Op::Softplus(..) => "softplus",
        Op::AddConst(..) => "add_const",
        Op::MulConst(..) => "mul_const",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Softmax { .. } => "softmax_t",
        Op::LogSoftmax { .. } => "log_softmax_t",
        Op::LayerNorm { .. } => "layernorm",
        Op::SumAll(..) => "sum",
        Op::MeanAll(..) => "mean",
        Op::SumAxis { .. } => "sum_axis",
        Op::MeanAxis { .. } => "mean_axis",
        Op::MaxAxis { .. } => "max_axis",
        Op::GatherRows { .. } => "gather_rows",
        Op::Concat { .. } => "concat",
        Op::CumsumRows(..) => "cumsum_rows",
        Op::BcastRow { .. } => "bcast_row",
        Op::BcastCol { .. } => "bcast_col",
    }
}
