//! Reverse-mode automatic differentiation on a tape.
//!
//! Every backward rule is itself written in terms of [`Var`] operations, so the
//! gradients returned by [`Graph::grad`] are ordinary nodes of the same tape and
//! can be differentiated again. Gradient-penalty objectives rely on this.
//!
//! Shape errors inside a graph are programming errors and panic with the
//! offending op named; public APIs above this layer validate their inputs.

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::Tensor;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    RecipSafe(usize),
    Abs(usize),
    LeakyRelu(usize, f64),
    Clamp(usize, f64, f64),
    SumAxes(usize),
    Expand(usize),
    Reshape(usize),
    Transpose(usize),
    MatMul(usize, usize),
    Conv(usize, usize, ConvGeom),
    ConvInputGrad(usize, usize, ConvGeom),
    ConvWeightGrad(usize, usize, ConvGeom),
    Crop(usize, usize, usize),
    Embed(usize, usize, usize),
    Resample(usize, Rc<Tensor>, Rc<Tensor>),
    Gather(usize, Rc<Vec<usize>>),
    ScatterAdd(usize, Rc<Vec<usize>>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// A tape of recorded operations. Create one per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

fn check_same(op: &str, a: &[usize], b: &[usize]) {
    assert!(a == b, "{op}: shape mismatch {a:?} vs {b:?}");
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf node. Leaves are differentiable with respect to whatever
    /// [`Graph::grad`] is asked for; a leaf that is never listed in `wrt`
    /// behaves as a constant.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Alias of [`Graph::leaf`] that documents intent at call sites.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`, as
    /// nodes of this graph. Inputs that `output` does not depend on get a zero
    /// tensor.
    pub fn grad<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>]) -> Vec<Var<'g>> {
        let out_id = output.id;
        assert_eq!(output.value().len(), 1, "grad: output must be a scalar");
        let (ops, reaches) = {
            let nodes = self.nodes.borrow();
            let mut reaches = vec![false; out_id + 1];
            for w in wrt {
                if w.id <= out_id {
                    reaches[w.id] = true;
                }
            }
            for id in 0..=out_id {
                if reaches[id] {
                    continue;
                }
                reaches[id] = parents(&nodes[id].op).iter().any(|&p| reaches[p]);
            }
            let ops: Vec<Op> = nodes[..=out_id].iter().map(|n| n.op.clone()).collect();
            (ops, reaches)
        };

        let mut grads: Vec<Option<Var<'g>>> = vec![None; out_id + 1];
        let seed_shape = output.value().shape().to_vec();
        grads[out_id] = Some(self.constant(Tensor::ones(&seed_shape)));
        for id in (0..=out_id).rev() {
            if !reaches[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            for (parent, contrib) in self.backward_rule(id, &ops[id], g) {
                if !reaches[parent] {
                    continue;
                }
                grads[parent] = Some(match grads[parent] {
                    Some(acc) => acc + contrib,
                    None => contrib,
                });
            }
        }
        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect()
    }

    /// First-order gradients as plain tensors.
    pub fn backward(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Vec<Tensor> {
        self.grad(output, wrt)
            .into_iter()
            .map(|g| (*g.value()).clone())
            .collect()
    }

    fn backward_rule<'g>(&'g self, id: usize, op: &Op, g: Var<'g>) -> Vec<(usize, Var<'g>)> {
        let y = self.var(id);
        let v = |i: usize| self.var(i);
        match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => vec![(a, g), (b, -g)],
            Op::Mul(a, b) => vec![(a, g * v(b)), (b, g * v(a))],
            Op::Div(a, b) => vec![(a, g / v(b)), (b, -(g * y / v(b)))],
            Op::Neg(a) => vec![(a, -g)],
            Op::Scale(a, c) => vec![(a, g.scale(c))],
            Op::AddScalar(a) => vec![(a, g)],
            Op::Tanh(a) => vec![(a, g - g * y * y)],
            Op::Exp(a) => vec![(a, g * y)],
            Op::Ln(a) => vec![(a, g / v(a))],
            Op::Sqrt(a) => vec![(a, (g * y.recip_safe()).scale(0.5))],
            Op::RecipSafe(a) => vec![(a, -(g * y * y))],
            Op::Abs(a) => {
                let sign = v(a).value().map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                vec![(a, g * self.constant(sign))]
            }
            Op::LeakyRelu(a, slope) => {
                let mask = v(a).value().map(|x| if x > 0.0 { 1.0 } else { slope });
                vec![(a, g * self.constant(mask))]
            }
            Op::Clamp(a, lo, hi) => {
                let mask = v(a)
                    .value()
                    .map(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 });
                vec![(a, g * self.constant(mask))]
            }
            Op::SumAxes(a) => vec![(a, g.expand(&v(a).shape()))],
            Op::Expand(a) => {
                let src = v(a).shape();
                let dst = g.shape();
                let axes: Vec<usize> = (0..src.len()).filter(|&d| src[d] == 1 && dst[d] != 1).collect();
                let summed = if axes.is_empty() { g } else { g.sum_axes(&axes) };
                vec![(a, summed)]
            }
            Op::Reshape(a) => vec![(a, g.reshape(&v(a).shape()))],
            Op::Transpose(a) => vec![(a, g.transpose())],
            Op::MatMul(a, b) => vec![
                (a, g.matmul(v(b).transpose())),
                (b, v(a).transpose().matmul(g)),
            ],
            Op::Conv(x, w, geom) => vec![
                (x, g.conv2d_input_grad(v(w), &v(x).shape(), geom)),
                (w, v(x).conv2d_weight_grad(g, &v(w).shape(), geom)),
            ],
            Op::ConvInputGrad(g0, w, geom) => vec![
                (g0, g.conv2d(v(w), geom)),
                (w, g.conv2d_weight_grad(v(g0), &v(w).shape(), geom)),
            ],
            Op::ConvWeightGrad(x, g0, geom) => vec![
                (x, v(g0).conv2d_input_grad(g, &v(x).shape(), geom)),
                (g0, v(x).conv2d(g, geom)),
            ],
            Op::Crop(a, top, left) => {
                let s = v(a).shape();
                let n = s.len();
                vec![(a, g.embed(top, left, s[n - 2], s[n - 1]))]
            }
            Op::Embed(a, top, left) => {
                let s = v(a).shape();
                let n = s.len();
                vec![(a, g.crop(top, left, s[n - 2], s[n - 1]))]
            }
            Op::Resample(a, ref ry, ref rx) => {
                let ryt = Rc::new(kernels::transpose2d(ry));
                let rxt = Rc::new(kernels::transpose2d(rx));
                vec![(a, g.resample_rc(ryt, rxt))]
            }
            Op::Gather(a, ref idx) => vec![(a, g.scatter_add_rc(Rc::clone(idx), &v(a).shape()))],
            Op::ScatterAdd(a, ref idx) => vec![(a, g.gather_rc(Rc::clone(idx)))],
        }
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::MatMul(a, b)
        | Op::Conv(a, b, _)
        | Op::ConvInputGrad(a, b, _)
        | Op::ConvWeightGrad(a, b, _) => vec![a, b],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Tanh(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Sqrt(a)
        | Op::RecipSafe(a)
        | Op::Abs(a)
        | Op::LeakyRelu(a, _)
        | Op::Clamp(a, _, _)
        | Op::SumAxes(a)
        | Op::Expand(a)
        | Op::Reshape(a)
        | Op::Transpose(a)
        | Op::Crop(a, _, _)
        | Op::Embed(a, _, _)
        | Op::Resample(a, _, _)
        | Op::Gather(a, _)
        | Op::ScatterAdd(a, _) => vec![a],
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let out = self.value().map(f);
        self.graph.push(out, op)
    }

    fn binary(self, other: Var<'g>, name: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        check_same(name, a.shape(), b.shape());
        let out = a.zip_map(&b, f).expect("shapes checked");
        self.graph.push(out, op)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    /// `1 / x`, defined as 0 where `x == 0`.
    pub fn recip_safe(self) -> Var<'g> {
        self.unary(Op::RecipSafe(self.id), |x| if x == 0.0 { 0.0 } else { 1.0 / x })
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn square(self) -> Var<'g> {
        self * self
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.unary(Op::LeakyRelu(self.id, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn relu(self) -> Var<'g> {
        self.leaky_relu(0.0)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(Op::Clamp(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'g> {
        let out = kernels::sum_axes(&self.value(), axes);
        self.graph.push(out, Op::SumAxes(self.id))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'g> {
        let nd = self.value().ndim();
        let axes: Vec<usize> = (0..nd).collect();
        self.sum_axes(&axes).reshape(&[1])
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Broadcast size-1 dimensions up to `shape` (same rank).
    pub fn expand(self, shape: &[usize]) -> Var<'g> {
        let src = self.shape();
        assert!(
            src.len() == shape.len() && src.iter().zip(shape).all(|(&s, &d)| s == d || s == 1),
            "expand: cannot broadcast {src:?} to {shape:?}"
        );
        if src == shape {
            return self;
        }
        let out = kernels::expand(&self.value(), shape);
        self.graph.push(out, Op::Expand(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let out = self
            .value()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        self.graph.push(out, Op::Reshape(self.id))
    }

    pub fn transpose(self) -> Var<'g> {
        assert_eq!(self.value().ndim(), 2, "transpose: expects a matrix");
        let out = kernels::transpose2d(&self.value());
        self.graph.push(out, Op::Transpose(self.id))
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert!(
            a.ndim() == 2 && b.ndim() == 2 && a.shape()[1] == b.shape()[0],
            "matmul: incompatible {:?} x {:?}",
            a.shape(),
            b.shape()
        );
        let out = kernels::matmul(&a, &b);
        self.graph.push(out, Op::MatMul(self.id, other.id))
    }

    /// 2-D cross-correlation of `[N, Ci, H, W]` with weights `[Co, Ci, kh, kw]`.
    pub fn conv2d(self, weight: Var<'g>, geom: ConvGeom) -> Var<'g> {
        let (x, w) = (self.value(), weight.value());
        assert!(
            x.ndim() == 4 && w.ndim() == 4 && x.shape()[1] == w.shape()[1],
            "conv2d: incompatible input {:?} and weight {:?}",
            x.shape(),
            w.shape()
        );
        assert!(
            geom.out_len(x.shape()[2], w.shape()[2]).is_some()
                && geom.out_len(x.shape()[3], w.shape()[3]).is_some(),
            "conv2d: kernel {:?} larger than padded input {:?}",
            w.shape(),
            x.shape()
        );
        let out = kernels::conv2d(&x, &w, geom);
        self.graph.push(out, Op::Conv(self.id, weight.id, geom))
    }

    fn conv2d_input_grad(self, weight: Var<'g>, x_shape: &[usize], geom: ConvGeom) -> Var<'g> {
        let out = kernels::conv2d_input_grad(&self.value(), &weight.value(), x_shape, geom);
        self.graph.push(out, Op::ConvInputGrad(self.id, weight.id, geom))
    }

    fn conv2d_weight_grad(self, g: Var<'g>, w_shape: &[usize], geom: ConvGeom) -> Var<'g> {
        let out = kernels::conv2d_weight_grad(&self.value(), &g.value(), w_shape, geom);
        self.graph.push(out, Op::ConvWeightGrad(self.id, g.id, geom))
    }

    /// Window of the last two axes.
    pub fn crop(self, top: usize, left: usize, h: usize, w: usize) -> Var<'g> {
        let s = self.shape();
        let n = s.len();
        assert!(
            n >= 2 && top + h <= s[n - 2] && left + w <= s[n - 1],
            "crop: window ({top},{left},{h},{w}) outside {s:?}"
        );
        let out = kernels::crop(&self.value(), top, left, h, w);
        self.graph.push(out, Op::Crop(self.id, top, left))
    }

    /// Place into zeros whose last two axes are `(hh, ww)`.
    pub fn embed(self, top: usize, left: usize, hh: usize, ww: usize) -> Var<'g> {
        let s = self.shape();
        let n = s.len();
        assert!(
            n >= 2 && top + s[n - 2] <= hh && left + s[n - 1] <= ww,
            "embed: {s:?} at ({top},{left}) does not fit in ({hh},{ww})"
        );
        let out = kernels::embed(&self.value(), top, left, hh, ww);
        self.graph.push(out, Op::Embed(self.id, top, left))
    }

    /// Separable linear resampling of the last two axes: `Ry X Rx^T`.
    pub fn resample(self, ry: &Tensor, rx: &Tensor) -> Var<'g> {
        self.resample_rc(Rc::new(ry.clone()), Rc::new(rx.clone()))
    }

    fn resample_rc(self, ry: Rc<Tensor>, rx: Rc<Tensor>) -> Var<'g> {
        let s = self.shape();
        let n = s.len();
        assert!(
            ry.ndim() == 2 && rx.ndim() == 2 && ry.shape()[1] == s[n - 2] && rx.shape()[1] == s[n - 1],
            "resample: matrices {:?}/{:?} do not match input {s:?}",
            ry.shape(),
            rx.shape()
        );
        let out = kernels::resample(&self.value(), &ry, &rx);
        self.graph.push(out, Op::Resample(self.id, ry, rx))
    }

    /// Elements at the given flat indices, shape `[indices.len()]`.
    pub fn gather(self, indices: &[usize]) -> Var<'g> {
        self.gather_rc(Rc::new(indices.to_vec()))
    }

    fn gather_rc(self, idx: Rc<Vec<usize>>) -> Var<'g> {
        let x = self.value();
        let data: Vec<f64> = idx.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::from_vec(&[idx.len()], data).expect("gather length");
        self.graph.push(out, Op::Gather(self.id, idx))
    }

    fn scatter_add_rc(self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Var<'g> {
        let mut out = Tensor::zeros(shape);
        let src = self.value();
        for (k, &i) in idx.iter().enumerate() {
            out.data_mut()[i] += src.data()[k];
        }
        self.graph.push(out, Op::ScatterAdd(self.id, idx))
    }
}

impl<'g> ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, "add", Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'g> ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, "sub", Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

impl<'g> ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, "mul", Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}

impl<'g> ops::Div for Var<'g> {
    type Output = Var<'g>;
    fn div(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, "div", Op::Div(self.id, rhs.id), |a, b| a / b)
    }
}

impl<'g> ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.unary(Op::Neg(self.id), |x| -x)
    }
}
