//! Reverse-mode automatic differentiation on a growing tape.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! walks the records in reverse and accumulates gradients. Values are dense
//! `f64` arrays ([`ndarray::ArrayD`]). Nodes are appended in topological
//! order by construction, so the reverse sweep is a single pass.
//!
//! Parameters live outside the tape in [`Param`] structs with process-unique
//! ids; binding the same parameter to a tape twice yields the same node, so
//! gradients from multiple uses accumulate naturally.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, Axis, IxDyn};

use crate::error::{NumkitError, Result};

/// Process-unique identifier of a trainable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A named trainable tensor. The value is owned here; tapes copy it on bind.
#[derive(Debug, Clone)]
pub struct Param {
    id: ParamId,
    name: String,
    pub value: ArrayD<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        Param {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Gradients keyed by parameter id, as produced by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct GradMap {
    grads: HashMap<ParamId, ArrayD<f64>>,
}

impl GradMap {
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: ArrayD<f64>) {
        self.grads.insert(id, grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ArrayD<f64>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Constant, input, or bound parameter. No parents.
    Leaf,
    /// Value copy whose gradient is never propagated.
    StopGradient,
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Tanh(usize),
    Sigmoid(usize),
    Gelu(usize),
    Softplus(usize),
    Abs(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MinElem(usize, usize),
    Matmul(usize, usize),
    BatchedMatmul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(usize, usize, usize),
    Narrow {
        parent: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    SoftmaxLast(usize),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for later gradient extraction.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of one backward pass, addressable by [`Var`] or parameter id.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
    params: GradMap,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was reachable.
    pub fn wrt(&self, var: Var<'_>) -> Option<&ArrayD<f64>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &GradMap {
        &self.params
    }

    pub fn into_params(self) -> GradMap {
        self.params
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value with no gradient.
    pub fn constant(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(ndarray::arr0(value).into_dyn())
    }

    /// A leaf that receives a gradient (for inputs we differentiate against).
    pub fn input(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter; repeated binds of the same parameter share a node.
    pub fn param<'t>(&'t self, p: &Param) -> Var<'t> {
        if let Some(&id) = self.bound.borrow().get(&p.id) {
            return Var { tape: self, id };
        }
        let var = self.push(p.value.clone(), Op::Leaf, true);
        self.bound.borrow_mut().insert(p.id, var.id);
        var
    }

    fn value_ref(&self, id: usize) -> std::cell::Ref<'_, ArrayD<f64>> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Runs the reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss from another tape");
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(NumkitError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }

        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(ArrayD::ones(loss_node.value.raw_dim()));

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.needs_grad {
                backprop_one(&nodes, id, &grad, &mut grads);
            }
            grads[id] = Some(grad);
        }

        let mut params = GradMap::default();
        for (&pid, &nid) in self.bound.borrow().iter() {
            if let Some(g) = &grads[nid] {
                params.insert(pid, g.clone());
            }
        }
        Ok(Gradients { grads, params })
    }
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, delta: ArrayD<f64>) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta),
    }
}

/// Sums `grad` down to `target` shape, undoing numpy-style broadcasting.
fn unbroadcast(grad: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut g = grad.clone();
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, (&gd, &td)) in g.shape().to_vec().iter().zip(target.iter()).enumerate() {
        if td == 1 && gd != 1 {
            let summed = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
            g = summed;
        }
    }
    g
}

fn broadcast_to(value: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    value
        .broadcast(IxDyn(shape))
        .unwrap_or_else(|| {
            panic!(
                "cannot broadcast {:?} to {:?}",
                value.shape(),
                shape
            )
        })
        .to_owned()
}

fn backprop_one(nodes: &[Node], id: usize, grad: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>) {
    let parent_needs = |p: usize| nodes[p].needs_grad;
    match &nodes[id].op {
        Op::Leaf | Op::StopGradient => {}
        Op::Neg(p) => {
            if parent_needs(*p) {
                accumulate(&mut grads[*p], -grad.clone());
            }
        }
        Op::Exp(p) => {
            if parent_needs(*p) {
                accumulate(&mut grads[*p], grad * &nodes[id].value);
            }
        }
        Op::Ln(p) => {
            if parent_needs(*p) {
                accumulate(&mut grads[*p], grad / &nodes[*p].value);
            }
        }
        Op::Sqrt(p) => {
            if parent_needs(*p) {
                let d = nodes[id].value.mapv(|y| 0.5 / y);
                accumulate(&mut grads[*p], grad * &d);
            }
        }
        Op::Square(p) => {
            if parent_needs(*p) {
                accumulate(&mut grads[*p], grad * &nodes[*p].value.mapv(|x| 2.0 * x));
            }
        }
        Op::Tanh(p) => {
            if parent_needs(*p) {
                let d = nodes[id].value.mapv(|y| 1.0 - y * y);
                accumulate(&mut grads[*p], grad * &d);
            }
        }
        Op::Sigmoid(p) => {
            if parent_needs(*p) {
                let d = nodes[id].value.mapv(|y| y * (1.0 - y));
                accumulate(&mut grads[*p], grad * &d);
            }
        }
        Op::Gelu(p) => {
            if parent_needs(*p) {
                let d = nodes[*p].value.mapv(gelu_derivative);
                accumulate(&mut grads[*p], grad * &d);
            }
        }
        Op::Softplus(p) => {
            if parent_needs(*p) {
                let d = nodes[*p].value.mapv(sigmoid_scalar);
                accumulate(&mut grads[*p], grad * &d);
            }
        }
        Op::Abs(p) => {
            if parent_needs(*p) {
                let d = nodes[*p].value.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                accumulate(&mut grads[*p], grad * &d);
            }
        }
        Op::Scale(p, c) => {
            if parent_needs(*p) {
                accumulate(&mut grads[*p], grad * *c);
            }
        }
        Op::AddScalar(p, _) => {
            if parent_needs(*p) {
                accumulate(&mut grads[*p], grad.clone());
            }
        }
        Op::Add(a, b) => {
            if parent_needs(*a) {
                accumulate(&mut grads[*a], unbroadcast(grad, nodes[*a].value.shape()));
            }
            if parent_needs(*b) {
                accumulate(&mut grads[*b], unbroadcast(grad, nodes[*b].value.shape()));
            }
        }
        Op::Sub(a, b) => {
            if parent_needs(*a) {
                accumulate(&mut grads[*a], unbroadcast(grad, nodes[*a].value.shape()));
            }
            if parent_needs(*b) {
                accumulate(&mut grads[*b], -unbroadcast(grad, nodes[*b].value.shape()));
            }
        }
        Op::Mul(a, b) => {
            if parent_needs(*a) {
                let vb = broadcast_to(&nodes[*b].value, grad.shape());
                accumulate(&mut grads[*a], unbroadcast(&(grad * &vb), nodes[*a].value.shape()));
            }
            if parent_needs(*b) {
                let va = broadcast_to(&nodes[*a].value, grad.shape());
                accumulate(&mut grads[*b], unbroadcast(&(grad * &va), nodes[*b].value.shape()));
            }
        }
        Op::Div(a, b) => {
            let vb = broadcast_to(&nodes[*b].value, grad.shape());
            if parent_needs(*a) {
                accumulate(&mut grads[*a], unbroadcast(&(grad / &vb), nodes[*a].value.shape()));
            }
            if parent_needs(*b) {
                let va = broadcast_to(&nodes[*a].value, grad.shape());
                let d = grad * &(-&va / &(&vb * &vb));
                accumulate(&mut grads[*b], unbroadcast(&d, nodes[*b].value.shape()));
            }
        }
        Op::MinElem(a, b) => {
            // Ties route to the first argument.
            let va = &nodes[*a].value;
            let vb = &nodes[*b].value;
            let mut mask = va.clone();
            ndarray::Zip::from(&mut mask).and(va).and(vb).for_each(|m, &x, &y| {
                *m = if x <= y { 1.0 } else { 0.0 };
            });
            if parent_needs(*a) {
                accumulate(&mut grads[*a], grad * &mask);
            }
            if parent_needs(*b) {
                accumulate(&mut grads[*b], grad * &mask.mapv(|m| 1.0 - m));
            }
        }
        Op::Matmul(a, b) => {
            let va = as2(&nodes[*a].value);
            let vb = as2(&nodes[*b].value);
            let g = as2(grad);
            if parent_needs(*a) {
                accumulate(&mut grads[*a], g.dot(&vb.t()).into_dyn());
            }
            if parent_needs(*b) {
                accumulate(&mut grads[*b], va.t().dot(&g).into_dyn());
            }
        }
        Op::BatchedMatmul(a, b) => {
            let va = &nodes[*a].value;
            let vb = &nodes[*b].value;
            let bsz = va.shape()[0];
            if parent_needs(*a) {
                let mut da = ArrayD::zeros(va.raw_dim());
                for i in 0..bsz {
                    let gi = as2(&grad.index_axis(Axis(0), i).to_owned());
                    let bi = as2(&vb.index_axis(Axis(0), i).to_owned());
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                }
                accumulate(&mut grads[*a], da);
            }
            if parent_needs(*b) {
                let mut db = ArrayD::zeros(vb.raw_dim());
                for i in 0..bsz {
                    let gi = as2(&grad.index_axis(Axis(0), i).to_owned());
                    let ai = as2(&va.index_axis(Axis(0), i).to_owned());
                    db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                accumulate(&mut grads[*b], db);
            }
        }
        Op::Reshape(p) => {
            if parent_needs(*p) {
                let shaped = grad
                    .clone()
                    .into_shape_with_order(nodes[*p].value.raw_dim())
                    .expect("reshape backward");
                accumulate(&mut grads[*p], shaped);
            }
        }
        Op::Permute(p, axes) => {
            if parent_needs(*p) {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let g = grad.clone().permuted_axes(IxDyn(&inverse));
                accumulate(&mut grads[*p], g.as_standard_layout().to_owned());
            }
        }
        Op::Concat(a, b, axis) => {
            let la = nodes[*a].value.shape()[*axis];
            if parent_needs(*a) {
                let ga = grad
                    .slice_axis(Axis(*axis), ndarray::Slice::from(0..la))
                    .to_owned();
                accumulate(&mut grads[*a], ga);
            }
            if parent_needs(*b) {
                let gb = grad
                    .slice_axis(Axis(*axis), ndarray::Slice::from(la..))
                    .to_owned();
                accumulate(&mut grads[*b], gb);
            }
        }
        Op::Narrow {
            parent,
            axis,
            start,
            len,
        } => {
            if parent_needs(*parent) {
                let mut g = ArrayD::zeros(nodes[*parent].value.raw_dim());
                g.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..start + len))
                    .assign(grad);
                accumulate(&mut grads[*parent], g);
            }
        }
        Op::SumAll(p) => {
            if parent_needs(*p) {
                let g = grad.iter().next().copied().unwrap_or(0.0);
                accumulate(&mut grads[*p], ArrayD::from_elem(nodes[*p].value.raw_dim(), g));
            }
        }
        Op::MeanAll(p) => {
            if parent_needs(*p) {
                let n = nodes[*p].value.len() as f64;
                let g = grad.iter().next().copied().unwrap_or(0.0) / n;
                accumulate(&mut grads[*p], ArrayD::from_elem(nodes[*p].value.raw_dim(), g));
            }
        }
        Op::SumAxis(p, axis) => {
            if parent_needs(*p) {
                let g = broadcast_to(grad, nodes[*p].value.shape());
                accumulate(&mut grads[*p], g);
            }
        }
        Op::MeanAxis(p, axis) => {
            if parent_needs(*p) {
                let n = nodes[*p].value.shape()[*axis] as f64;
                let g = broadcast_to(grad, nodes[*p].value.shape()) / n;
                accumulate(&mut grads[*p], g);
            }
        }
        Op::SoftmaxLast(p) => {
            if parent_needs(*p) {
                let y = &nodes[id].value;
                let gy = grad * y;
                let last = y.ndim() - 1;
                let dot = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
                let d = &gy - &(y * &broadcast_to(&dot, y.shape()));
                accumulate(&mut grads[*p], d);
            }
        }
    }
}

fn as2(a: &ArrayD<f64>) -> ndarray::Array2<f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected rank-2 tensor")
        .to_owned()
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> ArrayD<f64> {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    /// Scalar value of a single-element tensor.
    pub fn scalar_value(&self) -> f64 {
        let v = self.tape.value_ref(self.id);
        assert_eq!(v.len(), 1, "scalar_value on tensor of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn unary(self, op: impl FnOnce(usize) -> Op, value: ArrayD<f64>) -> Var<'t> {
        let needs = self.needs_grad();
        self.tape.push(value, op(self.id), needs)
    }

    fn binary(self, rhs: Var<'t>, op: impl FnOnce(usize, usize) -> Op, value: ArrayD<f64>) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
        let needs = self.needs_grad() || rhs.needs_grad();
        self.tape.push(value, op(self.id, rhs.id), needs)
    }

    /// Value-transparent, gradient-opaque copy.
    pub fn stop_gradient(self) -> Var<'t> {
        let v = self.value();
        self.tape.push(v, Op::StopGradient, false)
    }

    pub fn neg(self) -> Var<'t> {
        let v = -self.value();
        self.unary(Op::Neg, v)
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        self.unary(Op::Exp, v)
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().mapv(f64::ln);
        self.unary(Op::Ln, v)
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().mapv(f64::sqrt);
        self.unary(Op::Sqrt, v)
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().mapv(|x| x * x);
        self.unary(Op::Square, v)
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().mapv(f64::tanh);
        self.unary(Op::Tanh, v)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().mapv(sigmoid_scalar);
        self.unary(Op::Sigmoid, v)
    }

    pub fn gelu(self) -> Var<'t> {
        let v = self.value().mapv(gelu_scalar);
        self.unary(Op::Gelu, v)
    }

    pub fn softplus(self) -> Var<'t> {
        let v = self.value().mapv(softplus_scalar);
        self.unary(Op::Softplus, v)
    }

    pub fn abs(self) -> Var<'t> {
        let v = self.value().mapv(f64::abs);
        self.unary(Op::Abs, v)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value() * c;
        self.unary(|p| Op::Scale(p, c), v)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value() + c;
        self.unary(|p| Op::AddScalar(p, c), v)
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        let v = broadcast_binary(&self.value(), &rhs.value(), |a, b| a + b);
        self.binary(rhs, Op::Add, v)
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let v = broadcast_binary(&self.value(), &rhs.value(), |a, b| a - b);
        self.binary(rhs, Op::Sub, v)
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let v = broadcast_binary(&self.value(), &rhs.value(), |a, b| a * b);
        self.binary(rhs, Op::Mul, v)
    }

    pub fn div(self, rhs: Var<'t>) -> Var<'t> {
        let v = broadcast_binary(&self.value(), &rhs.value(), |a, b| a / b);
        self.binary(rhs, Op::Div, v)
    }

    /// Elementwise minimum; on ties the gradient routes to `self`.
    pub fn min_elem(self, rhs: Var<'t>) -> Var<'t> {
        let v = broadcast_binary(&self.value(), &rhs.value(), |a, b| a.min(b));
        self.binary(rhs, Op::MinElem, v)
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.ndim(), 2, "matmul lhs must be rank 2, got {:?}", a.shape());
        assert_eq!(b.ndim(), 2, "matmul rhs must be rank 2, got {:?}", b.shape());
        assert_eq!(
            a.shape()[1],
            b.shape()[0],
            "matmul inner dims: {:?} x {:?}",
            a.shape(),
            b.shape()
        );
        let v = as2(&a).dot(&as2(&b)).into_dyn();
        self.binary(rhs, Op::Matmul, v)
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn batched_matmul(self, rhs: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.ndim(), 3, "batched_matmul lhs rank 3, got {:?}", a.shape());
        assert_eq!(b.ndim(), 3, "batched_matmul rhs rank 3, got {:?}", b.shape());
        assert_eq!(a.shape()[0], b.shape()[0], "batch dims differ");
        assert_eq!(a.shape()[2], b.shape()[1], "inner dims differ");
        let bsz = a.shape()[0];
        let mut out = ArrayD::zeros(IxDyn(&[bsz, a.shape()[1], b.shape()[2]]));
        for i in 0..bsz {
            let ai = as2(&a.index_axis(Axis(0), i).to_owned());
            let bi = as2(&b.index_axis(Axis(0), i).to_owned());
            out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        self.binary(rhs, Op::BatchedMatmul, out)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self
            .value()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape to {:?}: {}", shape, e));
        self.unary(Op::Reshape, v)
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let v = self
            .value()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let axes = axes.to_vec();
        self.unary(|p| Op::Permute(p, axes), v)
    }

    pub fn concat(self, rhs: Var<'t>, axis: usize) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        let v = ndarray::concatenate(Axis(axis), &[a.view(), b.view()])
            .unwrap_or_else(|e| panic!("concat axis {}: {}", axis, e));
        self.binary(rhs, |x, y| Op::Concat(x, y, axis), v)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let v = self
            .value()
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.unary(
            |parent| Op::Narrow {
                parent,
                axis,
                start,
                len,
            },
            v,
        )
    }

    pub fn sum_all(self) -> Var<'t> {
        let v = ndarray::arr0(self.value().sum()).into_dyn();
        self.unary(Op::SumAll, v)
    }

    pub fn mean_all(self) -> Var<'t> {
        let value = self.value();
        let v = ndarray::arr0(value.sum() / value.len() as f64).into_dyn();
        self.unary(Op::MeanAll, v)
    }

    /// Sum along `axis`, keeping it as size 1.
    pub fn sum_axis_keep(self, axis: usize) -> Var<'t> {
        let v = self.value().sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.unary(|p| Op::SumAxis(p, axis), v)
    }

    /// Mean along `axis`, keeping it as size 1.
    pub fn mean_axis_keep(self, axis: usize) -> Var<'t> {
        let value = self.value();
        let n = value.shape()[axis] as f64;
        let v = value.sum_axis(Axis(axis)).insert_axis(Axis(axis)) / n;
        self.unary(|p| Op::MeanAxis(p, axis), v)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(self) -> Var<'t> {
        let x = self.value();
        let last = x.ndim() - 1;
        let maxes = x.map_axis(Axis(last), |row| {
            row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        });
        let maxes = maxes.insert_axis(Axis(last));
        let shifted = &x - &broadcast_to(&maxes, x.shape());
        let exps = shifted.mapv(f64::exp);
        let sums = exps.sum_axis(Axis(last)).insert_axis(Axis(last));
        let v = &exps / &broadcast_to(&sums, x.shape());
        self.unary(Op::SoftmaxLast, v)
    }

    /// Squared L2 norm summed over the last axis (kept), a common loss block.
    pub fn squared_l2_last(self) -> Var<'t> {
        self.square().sum_axis_keep(self.shape().len() - 1)
    }
}

fn broadcast_binary(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = broadcast_to(a, &shape);
    let bv = broadcast_to(b, &shape);
    let mut out = av;
    ndarray::Zip::from(&mut out).and(&bv).for_each(|x, &y| *x = f(*x, y));
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut shape = vec![0usize; n];
    for i in 0..n {
        let ad = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let bd = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            ad == bd || ad == 1 || bd == 1,
            "incompatible broadcast: {:?} vs {:?}",
            a,
            b
        );
        shape[i] = ad.max(bd);
    }
    shape
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.input(arr1(&[3.0]).into_dyn());
        let y = x.square().sum_all();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap()[[0]], 6.0);
    }

    #[test]
    fn stop_gradient_blocks_one_path() {
        let tape = Tape::new();
        let x = tape.input(arr1(&[2.0]).into_dyn());
        let y = x.stop_gradient().mul(x).sum_all();
        let grads = tape.backward(y).unwrap();
        // d/dx sg(x)*x = sg(x) = 2, not 4.
        assert_eq!(grads.wrt(x).unwrap()[[0]], 2.0);
    }

    #[test]
    fn stop_gradient_is_value_transparent() {
        let tape = Tape::new();
        let x = tape.input(arr1(&[1.0, 2.0]).into_dyn());
        let s = x.stop_gradient();
        assert_eq!(s.value(), arr1(&[1.0, 2.0]).into_dyn());
        let loss = s.sum_all();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(x).is_none(), "sum(sg(x)) must not reach x");
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let tape = Tape::new();
        let x = tape.input(arr1(&[1.0, 2.0]).into_dyn());
        let y = x.square();
        assert!(matches!(tape.backward(y), Err(NumkitError::Contract(_))));
    }

    #[test]
    fn param_bound_twice_shares_a_node() {
        let p = Param::new("w", arr1(&[1.5]).into_dyn());
        let tape = Tape::new();
        let a = tape.param(&p);
        let b = tape.param(&p);
        assert_eq!(a.id(), b.id());
        let loss = a.mul(b).sum_all(); // w^2
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.params().get(p.id()).unwrap()[[0]], 3.0);
    }

    #[test]
    fn matmul_matches_manual() {
        let tape = Tape::new();
        let a = tape.input(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = tape.input(arr2(&[[5.0], [6.0]]).into_dyn());
        let c = a.matmul(b);
        assert_eq!(c.value(), arr2(&[[17.0], [39.0]]).into_dyn());
        let loss = c.sum_all();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(a).unwrap(), &arr2(&[[5.0, 6.0], [5.0, 6.0]]).into_dyn());
        assert_eq!(grads.wrt(b).unwrap(), &arr2(&[[4.0], [6.0]]).into_dyn());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let tape = Tape::new();
        let x = tape.input(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = tape.input(arr1(&[10.0, 20.0]).into_dyn());
        let y = x.add(b).sum_all();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(b).unwrap(), &arr1(&[2.0, 2.0]).into_dyn());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.input(arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]).into_dyn());
        let y = x.softmax_last();
        let v = y.value();
        for row in 0..2 {
            let s: f64 = (0..3).map(|c| v[[row, c]]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn min_elem_routes_gradient() {
        let tape = Tape::new();
        let a = tape.input(arr1(&[1.0, 5.0]).into_dyn());
        let b = tape.input(arr1(&[3.0, 2.0]).into_dyn());
        let y = a.min_elem(b).sum_all();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(a).unwrap(), &arr1(&[1.0, 0.0]).into_dyn());
        assert_eq!(grads.wrt(b).unwrap(), &arr1(&[0.0, 1.0]).into_dyn());
    }

    #[test]
    fn gelu_zero_is_zero() {
        assert_eq!(gelu_scalar(0.0), 0.0);
    }

    #[test]
    fn concat_narrow_roundtrip_gradients() {
        let tape = Tape::new();
        let a = tape.input(arr2(&[[1.0, 2.0]]).into_dyn());
        let b = tape.input(arr2(&[[3.0, 4.0, 5.0]]).into_dyn());
        let c = a.concat(b, 1);
        assert_eq!(c.shape(), vec![1, 5]);
        let right = c.narrow(1, 2, 3);
        let loss = right.sum_all();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(a).is_none() || grads.wrt(a).unwrap().iter().all(|&g| g == 0.0));
        assert_eq!(grads.wrt(b).unwrap(), &arr2(&[[1.0, 1.0, 1.0]]).into_dyn());
    }
}
