//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] owns an append-only arena of nodes; [`Var`] is an index into
//! it. Every operation evaluates eagerly (the node stores its value) and
//! records enough structure to build its vector-Jacobian product later.
//!
//! The defining property of this tape: [`Graph::backward`] emits the vjp
//! computations as *ordinary graph nodes*. Gradients are therefore
//! themselves differentiable, and a second `backward` call from any scalar
//! built out of first-order gradients yields exact second-order derivatives.
//! The gradient-penalty objective needs exactly this: the penalty term is a
//! function of d(score)/d(input), and training differentiates it with
//! respect to the network parameters.
//!
//! Piecewise-linear activations (relu, leaky relu, clamp) treat their
//! activation masks as constants, which is the correct almost-everywhere
//! derivative. Everything else (including the three convolution primitives,
//! whose derivatives are again members of the convolution family) is smooth
//! and closed under differentiation.

use crate::conv;
use crate::scalar::Scalar;
use ndarray::{concatenate, linalg::general_mat_mul, Array2, ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn, Slice};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Sqrt,
    Sigmoid,
    Tanh,
    Softplus,
    Relu,
    LeakyRelu(f64),
    ClampPass(f64, f64),
    MulScalar(f64),
    AddScalar(f64),
    SumAll,
    SumAxes,
    SumTo,
    BroadcastTo,
    Reshape,
    Transpose(Vec<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    PadZero { axis: usize, before: usize },
    Matmul,
    Bmm,
    Conv2d { stride: usize, pad: usize },
    ConvT2d { stride: usize, pad: usize },
    ConvWgrad { stride: usize, pad: usize },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    parents: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Result of a backward pass: gradient node per tape position.
pub struct Gradients {
    grads: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, if any path
    /// connects them.
    pub fn wrt(&self, v: Var) -> Option<Var> {
        self.grads.get(v.0).copied().flatten()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {a:?} and {b:?} do not broadcast"
        );
        out[i] = da.max(db);
    }
    out
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<F>, parents: Vec<usize>, op: Op) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node { value, parents, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not require gradients.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.nodes.push(Node { value, parents: vec![], op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: ArrayD<F>) -> Var {
        self.nodes.push(Node { value, parents: vec![], op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(ndarray::arr0(F::c(v)).into_dyn())
    }

    pub fn val(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> F {
        let node = &self.nodes[v.0].value;
        assert_eq!(node.len(), 1, "scalar_value on non-scalar node");
        *node.iter().next().expect("non-empty")
    }

    /// Constant copy of a node's value: blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    // ---- elementwise binary (numpy-style broadcasting) ----

    fn binary(&mut self, a: Var, b: Var, op: Op) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (a, b) = if sa == sb {
            (a, b)
        } else {
            let bs = broadcast_shape(&sa, &sb);
            let a = if sa != bs { self.broadcast_to(a, &bs) } else { a };
            let b = if sb != bs { self.broadcast_to(b, &bs) } else { b };
            (a, b)
        };
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = match op {
            Op::Add => va + vb,
            Op::Sub => va - vb,
            Op::Mul => va * vb,
            Op::Div => va / vb,
            _ => unreachable!("binary dispatch"),
        };
        self.push(value, vec![a.0, b.0], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div)
    }

    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    // ---- elementwise unary ----

    fn unary(&mut self, a: Var, op: Op) -> Var {
        let x = &self.nodes[a.0].value;
        let value = match &op {
            Op::Neg => x.mapv(|t| -t),
            Op::Exp => x.mapv(F::exp),
            Op::Ln => x.mapv(F::ln),
            Op::Sqrt => x.mapv(F::sqrt),
            Op::Sigmoid => x.mapv(|t| {
                if t >= F::zero() {
                    F::one() / (F::one() + (-t).exp())
                } else {
                    let e = t.exp();
                    e / (F::one() + e)
                }
            }),
            Op::Tanh => x.mapv(F::tanh),
            Op::Softplus => x.mapv(|t| t.max(F::zero()) + (-t.abs()).exp().ln_1p()),
            Op::Relu => x.mapv(|t| t.max(F::zero())),
            Op::LeakyRelu(s) => {
                let s = F::c(*s);
                x.mapv(|t| if t > F::zero() { t } else { t * s })
            }
            Op::ClampPass(lo, hi) => {
                let (lo, hi) = (F::c(*lo), F::c(*hi));
                x.mapv(|t| t.max(lo).min(hi))
            }
            Op::MulScalar(c) => {
                let c = F::c(*c);
                x.mapv(|t| t * c)
            }
            Op::AddScalar(c) => {
                let c = F::c(*c);
                x.mapv(|t| t + c)
            }
            _ => unreachable!("unary dispatch"),
        };
        self.push(value, vec![a.0], op)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu)
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(slope))
    }
    /// Clip to `[lo, hi]`; the gradient passes through inside the interval
    /// (inclusive) and is zero outside.
    pub fn clamp_pass(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::ClampPass(lo, hi))
    }
    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::MulScalar(c))
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(c))
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    // ---- reductions and shape ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(ndarray::arr0(s).into_dyn(), vec![a.0], Op::SumAll)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Sum over `axes`, keeping reduced axes as size 1.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &ax in sorted.iter().rev() {
            value = value.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        self.push(value, vec![a.0], Op::SumAxes)
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let shape = self.shape(a).to_vec();
        let n: usize = axes.iter().map(|&ax| shape[ax]).product();
        let s = self.sum_axes(a, axes);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Reduce `a` to `shape` by summing broadcast axes (adjoint of
    /// [`Graph::broadcast_to`]).
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = sum_to_eager(&self.nodes[a.0].value, shape);
        self.push(value, vec![a.0], Op::SumTo)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0]
            .value
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {shape:?}", self.shape(a)))
            .to_owned();
        self.push(value, vec![a.0], Op::BroadcastTo)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0]
            .value
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {shape:?}: {e}", self.shape(a)));
        self.push(value, vec![a.0], Op::Reshape)
    }

    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Var {
        let value = self.nodes[a.0]
            .value
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        self.push(value, vec![a.0], Op::Transpose(perm.to_vec()))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = concatenate(Axis(axis), &views).expect("concat shapes");
        self.push(value, parts.iter().map(|v| v.0).collect(), Op::Concat(axis))
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self.nodes[a.0]
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(value, vec![a.0], Op::Slice { axis, start, len })
    }

    pub fn pad_zero_axis(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Var {
        let src = &self.nodes[a.0].value;
        let mut shape = src.shape().to_vec();
        shape[axis] += before + after;
        let mut value = ArrayD::<F>::zeros(IxDyn(&shape));
        value
            .slice_axis_mut(Axis(axis), Slice::from(before..before + src.shape()[axis]))
            .assign(src);
        self.push(value, vec![a.0], Op::PadZero { axis, before })
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-d");
        let vb = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-d");
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dims");
        let mut out = Array2::<F>::zeros((va.nrows(), vb.ncols()));
        general_mat_mul(F::one(), &va, &vb, F::zero(), &mut out);
        self.push(out.into_dyn(), vec![a.0, b.0], Op::Matmul)
    }

    /// Batched matrix product: `[B,M,K] @ [B,K,N] -> [B,M,N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let va = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().expect("bmm lhs 3-d");
        let vb = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().expect("bmm rhs 3-d");
        let (ba, m, k) = va.dim();
        let (bb, k2, n) = vb.dim();
        assert_eq!(ba, bb, "bmm batch dims");
        assert_eq!(k, k2, "bmm inner dims");
        let mut out = ndarray::Array3::<F>::zeros((ba, m, n));
        for i in 0..ba {
            let (sa, sb) = (va.index_axis(Axis(0), i), vb.index_axis(Axis(0), i));
            let mut so = out.index_axis_mut(Axis(0), i);
            general_mat_mul(F::one(), &sa, &sb, F::zero(), &mut so);
        }
        self.push(out.into_dyn(), vec![a.0, b.0], Op::Bmm)
    }

    // ---- convolution family (NCHW) ----

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().expect("conv2d input 4-d");
        let vw = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().expect("conv2d weight 4-d");
        let value = conv::conv2d(&vx, &vw, stride, pad);
        self.push(value.into_dyn(), vec![x.0, w.0], Op::Conv2d { stride, pad })
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().expect("convT input 4-d");
        let vw = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().expect("convT weight 4-d");
        let value = conv::conv_transpose2d(&vx, &vw, stride, pad);
        self.push(value.into_dyn(), vec![x.0, w.0], Op::ConvT2d { stride, pad })
    }

    /// Weight-gradient primitive `[O,C,kh,kw]` of a strided convolution;
    /// exposed as a graph op so that second derivatives of convolutions stay
    /// inside the tape.
    pub fn conv_wgrad(&mut self, x: Var, g: Var, kh: usize, kw: usize, stride: usize, pad: usize) -> Var {
        let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().expect("wgrad input 4-d");
        let vg = self.nodes[g.0].value.view().into_dimensionality::<Ix4>().expect("wgrad grad 4-d");
        let value = conv::conv_wgrad(&vx, &vg, kh, kw, stride, pad);
        self.push(value.into_dyn(), vec![x.0, g.0], Op::ConvWgrad { stride, pad })
    }

    // ---- composite helpers ----

    /// Row-stochastic softmax over the last axis. The running maximum is
    /// subtracted as a constant, which leaves the value and all derivatives
    /// unchanged while keeping `exp` in range.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let last = shape.len() - 1;
        let maxes = self.nodes[a.0]
            .value
            .map_axis(Axis(last), |row| row.iter().cloned().fold(F::neg_infinity(), F::max))
            .insert_axis(Axis(last));
        let m = self.constant(maxes.into_dyn());
        let shifted = self.sub(a, m);
        let e = self.exp(shifted);
        let s = self.sum_axes(e, &[last]);
        self.div(e, s)
    }

    // ---- backward ----

    /// Reverse sweep from scalar node `out`. Gradient nodes are appended to
    /// the tape, so they may be composed further and differentiated again.
    pub fn backward(&mut self, out: Var) -> Gradients {
        assert_eq!(self.nodes[out.0].value.len(), 1, "backward root must be scalar");
        let n = out.0 + 1;
        let mut grads: Vec<Option<Var>> = vec![None; n];
        let seed_shape = self.nodes[out.0].value.raw_dim();
        let seed = self.constant(ArrayD::ones(seed_shape));
        grads[out.0] = Some(seed);
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let parents = self.nodes[i].parents.clone();
            let contribs = self.vjp(i, g);
            debug_assert_eq!(parents.len(), contribs.len());
            for (p, c) in parents.into_iter().zip(contribs) {
                let Some(c) = c else { continue };
                grads[p] = Some(match grads[p] {
                    Some(prev) => self.add(prev, c),
                    None => c,
                });
            }
        }
        Gradients { grads }
    }

    /// Per-parent cotangent contributions of node `i` given output cotangent `g`.
    fn vjp(&mut self, i: usize, g: Var) -> Vec<Option<Var>> {
        let op = self.nodes[i].op.clone();
        let parents = self.nodes[i].parents.clone();
        let y = Var(i);
        let need: Vec<bool> = parents.iter().map(|&p| self.nodes[p].needs_grad).collect();
        match op {
            Op::Leaf => vec![],
            Op::Add => vec![
                need[0].then_some(g),
                need[1].then_some(g),
            ],
            Op::Sub => vec![
                need[0].then_some(g),
                need[1].then(|| self.neg(g)),
            ],
            Op::Mul => {
                let (a, b) = (Var(parents[0]), Var(parents[1]));
                vec![
                    need[0].then(|| self.mul(g, b)),
                    need[1].then(|| self.mul(g, a)),
                ]
            }
            Op::Div => {
                let b = Var(parents[1]);
                vec![
                    need[0].then(|| self.div(g, b)),
                    need[1].then(|| {
                        let gy = self.mul(g, y);
                        let gyb = self.div(gy, b);
                        self.neg(gyb)
                    }),
                ]
            }
            Op::Neg => vec![need[0].then(|| self.neg(g))],
            Op::Exp => vec![need[0].then(|| self.mul(g, y))],
            Op::Ln => {
                let x = Var(parents[0]);
                vec![need[0].then(|| self.div(g, x))]
            }
            Op::Sqrt => vec![need[0].then(|| {
                let two_y = self.mul_scalar(y, 2.0);
                self.div(g, two_y)
            })],
            Op::Sigmoid => vec![need[0].then(|| {
                let ny = self.neg(y);
                let one_m = self.add_scalar(ny, 1.0);
                let d = self.mul(y, one_m);
                self.mul(g, d)
            })],
            Op::Tanh => vec![need[0].then(|| {
                let y2 = self.mul(y, y);
                let ny2 = self.neg(y2);
                let d = self.add_scalar(ny2, 1.0);
                self.mul(g, d)
            })],
            Op::Softplus => {
                let x = Var(parents[0]);
                vec![need[0].then(|| {
                    let s = self.sigmoid(x);
                    self.mul(g, s)
                })]
            }
            Op::Relu => vec![need[0].then(|| {
                let mask = self.nodes[parents[0]].value.mapv(|t| if t > F::zero() { F::one() } else { F::zero() });
                let m = self.constant(mask);
                self.mul(g, m)
            })],
            Op::LeakyRelu(slope) => vec![need[0].then(|| {
                let s = F::c(slope);
                let mask = self.nodes[parents[0]].value.mapv(|t| if t > F::zero() { F::one() } else { s });
                let m = self.constant(mask);
                self.mul(g, m)
            })],
            Op::ClampPass(lo, hi) => vec![need[0].then(|| {
                let (lo, hi) = (F::c(lo), F::c(hi));
                let mask = self.nodes[parents[0]]
                    .value
                    .mapv(|t| if t >= lo && t <= hi { F::one() } else { F::zero() });
                let m = self.constant(mask);
                self.mul(g, m)
            })],
            Op::MulScalar(c) => vec![need[0].then(|| self.mul_scalar(g, c))],
            Op::AddScalar(_) => vec![need[0].then_some(g)],
            Op::SumAll | Op::SumAxes | Op::SumTo => {
                let shape = self.nodes[parents[0]].value.shape().to_vec();
                vec![need[0].then(|| self.broadcast_to(g, &shape))]
            }
            Op::BroadcastTo => {
                let shape = self.nodes[parents[0]].value.shape().to_vec();
                vec![need[0].then(|| self.sum_to(g, &shape))]
            }
            Op::Reshape => {
                let shape = self.nodes[parents[0]].value.shape().to_vec();
                vec![need[0].then(|| self.reshape(g, &shape))]
            }
            Op::Transpose(perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![need[0].then(|| self.transpose(g, &inv))]
            }
            Op::Concat(axis) => {
                let mut out = Vec::with_capacity(parents.len());
                let mut offset = 0usize;
                for (idx, &p) in parents.iter().enumerate() {
                    let len = self.nodes[p].value.shape()[axis];
                    out.push(need[idx].then(|| self.slice_axis(g, axis, offset, len)));
                    offset += len;
                }
                out
            }
            Op::Slice { axis, start, len } => {
                let full = self.nodes[parents[0]].value.shape()[axis];
                vec![need[0].then(|| self.pad_zero_axis(g, axis, start, full - start - len))]
            }
            Op::PadZero { axis, before } => {
                let orig = self.nodes[parents[0]].value.shape()[axis];
                vec![need[0].then(|| self.slice_axis(g, axis, before, orig))]
            }
            Op::Matmul => {
                let (a, b) = (Var(parents[0]), Var(parents[1]));
                vec![
                    need[0].then(|| {
                        let bt = self.transpose(b, &[1, 0]);
                        self.matmul(g, bt)
                    }),
                    need[1].then(|| {
                        let at = self.transpose(a, &[1, 0]);
                        self.matmul(at, g)
                    }),
                ]
            }
            Op::Bmm => {
                let (a, b) = (Var(parents[0]), Var(parents[1]));
                vec![
                    need[0].then(|| {
                        let bt = self.transpose(b, &[0, 2, 1]);
                        self.bmm(g, bt)
                    }),
                    need[1].then(|| {
                        let at = self.transpose(a, &[0, 2, 1]);
                        self.bmm(at, g)
                    }),
                ]
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (Var(parents[0]), Var(parents[1]));
                let wshape = self.nodes[parents[1]].value.shape().to_vec();
                vec![
                    need[0].then(|| self.conv_transpose2d(g, w, stride, pad)),
                    need[1].then(|| self.conv_wgrad(x, g, wshape[2], wshape[3], stride, pad)),
                ]
            }
            Op::ConvT2d { stride, pad } => {
                let (x, w) = (Var(parents[0]), Var(parents[1]));
                let wshape = self.nodes[parents[1]].value.shape().to_vec();
                vec![
                    need[0].then(|| self.conv2d(g, w, stride, pad)),
                    // d/dw of convT(x,w) in [C_in,C_out,kh,kw] layout is the
                    // conv weight-gradient with the roles of x and g swapped.
                    need[1].then(|| self.conv_wgrad(g, x, wshape[2], wshape[3], stride, pad)),
                ]
            }
            Op::ConvWgrad { stride, pad } => {
                let (x, gy) = (Var(parents[0]), Var(parents[1]));
                vec![
                    need[0].then(|| self.conv_transpose2d(gy, g, stride, pad)),
                    need[1].then(|| self.conv2d(x, g, stride, pad)),
                ]
            }
        }
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Reduce `x` to `shape` by summing over broadcast axes (right-aligned).
fn sum_to_eager<F: Scalar>(x: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    let sx = x.shape().to_vec();
    assert!(shape.len() <= sx.len(), "sum_to target rank exceeds source");
    let offset = sx.len() - shape.len();
    let mut cur = x.clone();
    for ax in (0..sx.len()).rev() {
        let target = if ax < offset { 1 } else { shape[ax - offset] };
        if sx[ax] != target {
            assert_eq!(target, 1, "sum_to {sx:?} -> {shape:?}");
            cur = cur.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    cur.into_shape_with_order(IxDyn(shape)).expect("sum_to reshape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, ArrayD};

    fn arrd(v: &[f64]) -> ArrayD<f64> {
        arr1(v).into_dyn()
    }

    #[test]
    fn second_derivative_of_cube() {
        // f(x) = sum(x^3): f' = 3x^2, f'' applied to a ones-cotangent = 6x.
        let mut g = Graph::<f64>::new();
        let x = g.param(arrd(&[1.5, -2.0, 0.5]));
        let x2 = g.mul(x, x);
        let x3 = g.mul(x2, x);
        let f = g.sum_all(x3);
        let grads = g.backward(f);
        let gx = grads.wrt(x).unwrap();
        let expect: Vec<f64> = [1.5, -2.0, 0.5].iter().map(|v| 3.0 * v * v).collect();
        assert_eq!(g.val(gx).as_slice().unwrap(), expect.as_slice());

        let gsum = g.sum_all(gx);
        let grads2 = g.backward(gsum);
        let gxx = grads2.wrt(x).unwrap();
        let expect2: Vec<f64> = [1.5, -2.0, 0.5].iter().map(|v| 6.0 * v).collect();
        assert_eq!(g.val(gxx).as_slice().unwrap(), expect2.as_slice());
    }

    #[test]
    fn broadcasting_add_reduces_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = g.param(arrd(&[10.0, 20.0]));
        let y = g.add(a, b);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(g.val(grads.wrt(a).unwrap()).shape(), &[2, 2]);
        let gb = grads.wrt(b).unwrap();
        assert_eq!(g.val(gb).shape(), &[2]);
        assert_eq!(g.val(gb).as_slice().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.param(arr2(&[[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]).into_dyn());
        let p = g.softmax_last(x);
        for row in g.val(p).rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn detached_nodes_block_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param(arrd(&[2.0]));
        let d = g.detach(x);
        let y = g.mul(x, d);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        // d(x * const)/dx = const = 2, not 2x = 4.
        assert_eq!(g.val(grads.wrt(x).unwrap()).as_slice().unwrap(), &[2.0]);
    }

    #[test]
    fn matmul_gradients_match_hand_computation() {
        let mut g = Graph::<f64>::new();
        let a = g.param(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = g.param(arr2(&[[5.0], [6.0]]).into_dyn());
        let y = g.matmul(a, b);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        // dS/dA = ones(2,1) @ B^T
        assert_eq!(
            g.val(grads.wrt(a).unwrap()).as_slice().unwrap(),
            &[5.0, 6.0, 5.0, 6.0]
        );
        // dS/dB = A^T @ ones(2,1)
        assert_eq!(g.val(grads.wrt(b).unwrap()).as_slice().unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn concat_slice_roundtrip_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(arrd(&[1.0, 2.0]));
        let b = g.param(arrd(&[3.0]));
        let c = g.concat(&[a, b], 0);
        let sliced = g.slice_axis(c, 0, 1, 2); // [2.0, 3.0]
        assert_eq!(g.val(sliced).as_slice().unwrap(), &[2.0, 3.0]);
        let s = g.sum_all(sliced);
        let grads = g.backward(s);
        assert_eq!(g.val(grads.wrt(a).unwrap()).as_slice().unwrap(), &[0.0, 1.0]);
        assert_eq!(g.val(grads.wrt(b).unwrap()).as_slice().unwrap(), &[1.0]);
    }
}
