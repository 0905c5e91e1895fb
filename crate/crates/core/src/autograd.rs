//! A small reverse-mode automatic differentiation tape.
//!
//! Every operation records its parents by index; indices are assigned in
//! creation order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep. Operations whose backward
//! pass is itself expressed with tape operations (see
//! [`Var::conv2d_input_grad`]) give access to exact second-order terms such
//! as the gradient-penalty gradient with respect to critic weights.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{conv2d_forward, conv2d_input_grad, conv2d_weight_grad, Scalar, Tensor};

const NORM_EPS: f64 = 1e-12;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MulConst(usize, Rc<Tensor<T>>),
    Relu(usize),
    LeakyRelu(usize, T),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Sqr(usize),
    SumAll(usize),
    MeanAll(usize),
    MeanInner(usize),
    Reshape(usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    ConvInputGrad { dy: usize, w: usize, stride: usize, pad: usize },
    AddBias(usize, usize),
    ChannelAffine { x: usize, gamma: usize, beta: usize },
    InstanceNorm { x: usize, stats: Rc<Vec<(T, T)>> },
    Upsample2x(usize),
    GlobalAvgPool(usize),
    Matmul { a: usize, b: usize, trans_b: bool },
    GatherPixels { x: usize, index: Rc<Vec<(usize, usize)>> },
    L2NormalizeRows(usize),
    RowNorm(usize),
    CrossEntropyRows { logits: usize, targets: Rc<Vec<usize>>, probs: Rc<Tensor<T>> },
    SumLast(usize),
    ConcatLast(Vec<usize>),
    WindowGram { x: usize, window_len: usize },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    idx: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.idx, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.idx).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(512)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_rc(Rc::new(value), op, requires_grad)
    }

    fn push_rc(&self, value: Rc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf sharing storage with the caller (used for parameters).
    pub fn leaf_shared(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push_rc(value, Op::Leaf, requires_grad)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn value_of(&self, idx: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[idx].value.clone()
    }

    fn requires(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let out_node = &nodes[output.idx];
        assert_eq!(out_node.value.numel(), 1, "backward expects a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.idx] = Some(Tensor::full(out_node.value.shape().to_vec(), T::one()));
        for i in (0..=output.idx).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(&nodes, i, &g, &mut grads);
        }
        Gradients { grads }
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
    if !nodes[idx].requires_grad {
        return;
    }
    debug_assert_eq!(g.shape(), nodes[idx].value.shape(), "gradient shape mismatch at node {idx}");
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backward_node<T: Scalar>(nodes: &[Node<T>], i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let val = |j: usize| nodes[j].value.clone();
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, g.zip_map(&vb, |g, b| g * b));
            accumulate(nodes, grads, *b, g.zip_map(&va, |g, a| g * a));
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(nodes, grads, *a, g.map(|v| v * c));
        }
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::MulConst(a, c) => accumulate(nodes, grads, *a, g.zip_map(c, |g, c| g * c)),
        Op::Relu(a) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, g.zip_map(&x, |g, x| if x > T::zero() { g } else { T::zero() }));
        }
        Op::LeakyRelu(a, s) => {
            let (x, s) = (val(*a), *s);
            accumulate(nodes, grads, *a, g.zip_map(&x, |g, x| if x > T::zero() { g } else { g * s }));
        }
        Op::Tanh(a) => accumulate(nodes, grads, *a, g.zip_map(out, |g, y| g * (T::one() - y * y))),
        Op::Exp(a) => accumulate(nodes, grads, *a, g.zip_map(out, |g, y| g * y)),
        Op::Log(a) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, g.zip_map(&x, |g, x| g / x));
        }
        Op::Abs(a) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, g.zip_map(&x, |g, x| if x > T::zero() { g } else if x < T::zero() { -g } else { T::zero() }));
        }
        Op::Sqr(a) => {
            let x = val(*a);
            let two = T::from_f64(2.0);
            accumulate(nodes, grads, *a, g.zip_map(&x, |g, x| two * g * x));
        }
        Op::SumAll(a) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, Tensor::full(x.shape().to_vec(), g.item()));
        }
        Op::MeanAll(a) => {
            let x = val(*a);
            let v = g.item() / T::from_f64(x.numel() as f64);
            accumulate(nodes, grads, *a, Tensor::full(x.shape().to_vec(), v));
        }
        Op::MeanInner(a) => {
            let x = val(*a);
            let n = x.shape()[0];
            let inner = x.numel() / n;
            let scale = T::one() / T::from_f64(inner as f64);
            let mut d = Vec::with_capacity(x.numel());
            for &gv in g.data() {
                d.extend(std::iter::repeat_n(gv * scale, inner));
            }
            accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), d));
        }
        Op::Reshape(a) => {
            let shape = nodes[*a].value.shape().to_vec();
            accumulate(nodes, grads, *a, g.clone().reshaped(shape));
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let (vx, vw) = (val(*x), val(*w));
            if nodes[*x].requires_grad {
                accumulate(nodes, grads, *x, conv2d_input_grad(g, &vw, vx.dims4(), *stride, *pad));
            }
            if nodes[*w].requires_grad {
                let k = vw.shape()[2];
                accumulate(nodes, grads, *w, conv2d_weight_grad(&vx, g, k, *stride, *pad));
            }
            if let Some(b) = b {
                accumulate(nodes, grads, *b, channel_sums(g));
            }
        }
        Op::ConvInputGrad { dy, w, stride, pad } => {
            let (vdy, vw) = (val(*dy), val(*w));
            if nodes[*dy].requires_grad {
                accumulate(nodes, grads, *dy, conv2d_forward(g, &vw, None, *stride, *pad));
            }
            if nodes[*w].requires_grad {
                let k = vw.shape()[2];
                accumulate(nodes, grads, *w, conv2d_weight_grad(g, &vdy, k, *stride, *pad));
            }
        }
        Op::AddBias(x, b) => {
            accumulate(nodes, grads, *x, g.clone());
            accumulate(nodes, grads, *b, channel_sums(g));
        }
        Op::ChannelAffine { x, gamma, beta } => {
            let (vx, vg) = (val(*x), val(*gamma));
            let (n, c) = vg.dims2();
            let hw = vx.numel() / (n * c);
            let mut dx = Vec::with_capacity(vx.numel());
            let mut dgamma = vec![T::zero(); n * c];
            let mut dbeta = vec![T::zero(); n * c];
            for nc in 0..n * c {
                let gm = vg.data()[nc];
                let gs = &g.data()[nc * hw..(nc + 1) * hw];
                let xs = &vx.data()[nc * hw..(nc + 1) * hw];
                let mut sg = T::zero();
                let mut sgx = T::zero();
                for (&gv, &xv) in gs.iter().zip(xs) {
                    dx.push(gv * gm);
                    sg += gv;
                    sgx += gv * xv;
                }
                dgamma[nc] = sgx;
                dbeta[nc] = sg;
            }
            accumulate(nodes, grads, *x, Tensor::new(vx.shape().to_vec(), dx));
            accumulate(nodes, grads, *gamma, Tensor::new(vec![n, c], dgamma));
            accumulate(nodes, grads, *beta, Tensor::new(vec![n, c], dbeta));
        }
        Op::InstanceNorm { x, stats } => {
            let vx = val(*x);
            let (n, c, h, w) = vx.dims4();
            let hw = h * w;
            let hwf = T::from_f64(hw as f64);
            let eps = T::from_f64(crate::model::ADAIN_EPS);
            let mut dx = vec![T::zero(); vx.numel()];
            for nc in 0..n * c {
                let (mean, std) = stats[nc];
                let s = std + eps;
                let gs = &g.data()[nc * hw..(nc + 1) * hw];
                let xs = &vx.data()[nc * hw..(nc + 1) * hw];
                let gmean = gs.iter().copied().sum::<T>() / hwf;
                let gdot: T = gs.iter().zip(xs).map(|(&gv, &xv)| gv * (xv - mean)).sum();
                let coef = if std > T::zero() { gdot / (hwf * std * s * s) } else { T::zero() };
                for k in 0..hw {
                    dx[nc * hw + k] = (gs[k] - gmean) / s - (xs[k] - mean) * coef;
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(vx.shape().to_vec(), dx));
        }
        Op::Upsample2x(a) => {
            let x = val(*a);
            let (n, c, h, w) = x.dims4();
            let mut dx = vec![T::zero(); x.numel()];
            let ow = 2 * w;
            for nc in 0..n * c {
                for y in 0..2 * h {
                    for xx in 0..ow {
                        dx[nc * h * w + (y / 2) * w + xx / 2] += g.data()[nc * 4 * h * w + y * ow + xx];
                    }
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), dx));
        }
        Op::GlobalAvgPool(a) => {
            let x = val(*a);
            let (n, c, h, w) = x.dims4();
            let scale = T::one() / T::from_f64((h * w) as f64);
            let mut dx = Vec::with_capacity(x.numel());
            for nc in 0..n * c {
                dx.extend(std::iter::repeat_n(g.data()[nc] * scale, h * w));
            }
            accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), dx));
        }
        Op::Matmul { a, b, trans_b } => {
            let (va, vb) = (val(*a), val(*b));
            let (batch, m, k) = batch_dims(va.shape());
            let (_, b1, b2) = batch_dims(vb.shape());
            let n = if *trans_b { b1 } else { b2 };
            if nodes[*a].requires_grad {
                let mut da = vec![T::zero(); va.numel()];
                for bi in 0..batch {
                    let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                    let bs = &vb.data()[bi * k * n..(bi + 1) * k * n];
                    // dA = dC · op(B)ᵀ
                    crate::tensor::gemm(m, n, k, gs, false, bs, !*trans_b, &mut da[bi * m * k..(bi + 1) * m * k], false);
                }
                accumulate(nodes, grads, *a, Tensor::new(va.shape().to_vec(), da));
            }
            if nodes[*b].requires_grad {
                let mut db = vec![T::zero(); vb.numel()];
                for bi in 0..batch {
                    let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                    let as_ = &va.data()[bi * m * k..(bi + 1) * m * k];
                    let dbs = &mut db[bi * k * n..(bi + 1) * k * n];
                    if *trans_b {
                        crate::tensor::gemm(n, m, k, gs, true, as_, false, dbs, false);
                    } else {
                        crate::tensor::gemm(k, m, n, as_, true, gs, false, dbs, false);
                    }
                }
                accumulate(nodes, grads, *b, Tensor::new(vb.shape().to_vec(), db));
            }
        }
        Op::GatherPixels { x, index } => {
            let vx = val(*x);
            let (_, c, h, w) = vx.dims4();
            let mut dx = vec![T::zero(); vx.numel()];
            for (row, &(n, p)) in index.iter().enumerate() {
                for ch in 0..c {
                    dx[(n * c + ch) * h * w + p] += g.data()[row * c + ch];
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(vx.shape().to_vec(), dx));
        }
        Op::L2NormalizeRows(a) => {
            let x = val(*a);
            let k = *x.shape().last().unwrap();
            let mut dx = vec![T::zero(); x.numel()];
            let eps = T::from_f64(NORM_EPS);
            for r in 0..x.numel() / k {
                let xs = &x.data()[r * k..(r + 1) * k];
                let ys = &out.data()[r * k..(r + 1) * k];
                let gs = &g.data()[r * k..(r + 1) * k];
                let norm = xs.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm > eps {
                    let dot: T = ys.iter().zip(gs).map(|(&y, &gv)| y * gv).sum();
                    for j in 0..k {
                        dx[r * k + j] = (gs[j] - ys[j] * dot) / norm;
                    }
                } else {
                    for j in 0..k {
                        dx[r * k + j] = gs[j] / eps;
                    }
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), dx));
        }
        Op::RowNorm(a) => {
            let x = val(*a);
            let k = *x.shape().last().unwrap();
            let mut dx = vec![T::zero(); x.numel()];
            for r in 0..x.numel() / k {
                let norm = out.data()[r];
                if norm > T::zero() {
                    let s = g.data()[r] / norm;
                    for j in 0..k {
                        dx[r * k + j] = s * x.data()[r * k + j];
                    }
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), dx));
        }
        Op::CrossEntropyRows { logits, targets, probs } => {
            let (m, c) = probs.dims2();
            let mut d = probs.data().to_vec();
            for r in 0..m {
                d[r * c + targets[r]] -= T::one();
                let gr = g.data()[r];
                d[r * c..(r + 1) * c].iter_mut().for_each(|v| *v *= gr);
            }
            accumulate(nodes, grads, *logits, Tensor::new(vec![m, c], d));
        }
        Op::SumLast(a) => {
            let x = val(*a);
            let k = *x.shape().last().unwrap();
            let mut dx = Vec::with_capacity(x.numel());
            for &gv in g.data() {
                dx.extend(std::iter::repeat_n(gv, k));
            }
            accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), dx));
        }
        Op::ConcatLast(parts) => {
            let total = *out.shape().last().unwrap();
            let rows = out.numel() / total;
            let mut offset = 0;
            for &p in parts {
                let vp = val(p);
                let k = vp.numel() / rows;
                let mut dp = Vec::with_capacity(vp.numel());
                for r in 0..rows {
                    dp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + k]);
                }
                offset += k;
                accumulate(nodes, grads, p, Tensor::new(vp.shape().to_vec(), dp));
            }
        }
        Op::WindowGram { x, window_len } => {
            let vx = val(*x);
            let k = vx.shape()[1];
            let t = vx.shape()[0] / window_len;
            let tri = k * (k + 1) / 2;
            let scale = T::one() / T::from_f64(*window_len as f64);
            let mut dx = vec![T::zero(); vx.numel()];
            // Symmetric adjoint S with S_ab = dU_ab for a != b and 2·dU_aa on the diagonal.
            let mut sym = vec![T::zero(); k * k];
            for ti in 0..t {
                let gu = &g.data()[ti * tri..(ti + 1) * tri];
                let mut idx = 0;
                for a in 0..k {
                    for b in a..k {
                        if a == b {
                            sym[a * k + a] = gu[idx] + gu[idx];
                        } else {
                            sym[a * k + b] = gu[idx];
                            sym[b * k + a] = gu[idx];
                        }
                        idx += 1;
                    }
                }
                let fs = &vx.data()[ti * window_len * k..(ti + 1) * window_len * k];
                let ds = &mut dx[ti * window_len * k..(ti + 1) * window_len * k];
                // d f_j = scale · S f_j  (rows of F times symmetric S)
                crate::tensor::gemm(*window_len, k, k, fs, false, &sym, false, ds, false);
                ds.iter_mut().for_each(|v| *v *= scale);
            }
            accumulate(nodes, grads, *x, Tensor::new(vx.shape().to_vec(), dx));
        }
    }
}

fn channel_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let shape = g.shape();
    let n = shape[0];
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let s = &g.data()[(b * c + ch) * inner..(b * c + ch + 1) * inner];
            *acc += s.iter().copied().sum::<T>();
        }
    }
    Tensor::new(vec![c], db)
}

fn batch_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [m, k] => (1, *m, *k),
        [b, m, k] => (*b, *m, *k),
        _ => panic!("matmul expects rank 2 or 3, got {shape:?}"),
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.idx)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn add(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(other, v, Op::Add(self.idx, other.idx))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.idx, other.idx))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.idx, other.idx))
    }

    pub fn scale(&self, c: f64) -> Var<'t, T> {
        let c = T::from_f64(c);
        self.unary(self.value().map(|v| v * c), Op::Scale(self.idx, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t, T> {
        let c = T::from_f64(c);
        self.unary(self.value().map(|v| v + c), Op::AddScalar(self.idx))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&self, c: Tensor<T>) -> Var<'t, T> {
        let v = self.value().zip_map(&c, |a, b| a * b);
        self.unary(v, Op::MulConst(self.idx, Rc::new(c)))
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(self.value().map(|v| v.max(T::zero())), Op::Relu(self.idx))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t, T> {
        let s = T::from_f64(slope);
        self.unary(
            self.value().map(|v| if v > T::zero() { v } else { v * s }),
            Op::LeakyRelu(self.idx, s),
        )
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(self.value().map(|v| v.tanh()), Op::Tanh(self.idx))
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(self.value().map(|v| v.exp()), Op::Exp(self.idx))
    }

    pub fn ln(&self) -> Var<'t, T> {
        self.unary(self.value().map(|v| v.ln()), Op::Log(self.idx))
    }

    pub fn abs(&self) -> Var<'t, T> {
        self.unary(self.value().map(|v| v.abs()), Op::Abs(self.idx))
    }

    pub fn sqr(&self) -> Var<'t, T> {
        self.unary(self.value().map(|v| v * v), Op::Sqr(self.idx))
    }

    pub fn sum(&self) -> Var<'t, T> {
        self.unary(Tensor::scalar(self.value().sum()), Op::SumAll(self.idx))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let x = self.value();
        let m = x.sum() / T::from_f64(x.numel() as f64);
        self.unary(Tensor::scalar(m), Op::MeanAll(self.idx))
    }

    /// Mean over every axis except the first: `[N, ...] -> [N]`.
    pub fn mean_per_sample(&self) -> Var<'t, T> {
        let x = self.value();
        let n = x.shape()[0];
        let inner = x.numel() / n;
        let d = x
            .data()
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<T>() / T::from_f64(inner as f64))
            .collect();
        self.unary(Tensor::new(vec![n], d), Op::MeanInner(self.idx))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<'t, T> {
        let v = (*self.value()).clone().reshaped(shape);
        self.unary(v, Op::Reshape(self.idx))
    }

    /// Zero-padded 2-D convolution over `N×C×H×W` with an `O×C×k×k` kernel.
    pub fn conv2d(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>, stride: usize, pad: usize) -> Var<'t, T> {
        let bv = b.map(|b| b.value());
        let v = conv2d_forward(&self.value(), &w.value(), bv.as_deref(), stride, pad);
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        self.tape.push(v, Op::Conv2d { x: self.idx, w: w.idx, b: b.map(|b| b.idx), stride, pad }, rg)
    }

    /// Input gradient of a convolution, `self` being the output gradient.
    /// Differentiable in both `self` and the kernel.
    pub fn conv2d_input_grad(
        &self,
        w: &Var<'t, T>,
        in_shape: (usize, usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Var<'t, T> {
        let v = conv2d_input_grad(&self.value(), &w.value(), in_shape, stride, pad);
        self.binary(w, v, Op::ConvInputGrad { dy: self.idx, w: w.idx, stride, pad })
    }

    /// Adds a per-channel bias; channel axis is axis 1.
    pub fn add_bias(&self, b: &Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let bv = b.value();
        let shape = x.shape();
        let (n, c) = (shape[0], shape[1]);
        assert_eq!(bv.numel(), c, "bias length");
        let inner: usize = shape[2..].iter().product();
        let mut d = x.data().to_vec();
        for bi in 0..n {
            for ch in 0..c {
                let bb = bv.data()[ch];
                d[(bi * c + ch) * inner..(bi * c + ch + 1) * inner].iter_mut().for_each(|v| *v += bb);
            }
        }
        self.binary(b, Tensor::new(shape.to_vec(), d), Op::AddBias(self.idx, b.idx))
    }

    /// `y[n,c] = gamma[n,c] · x[n,c] + beta[n,c]` broadcast over space.
    pub fn channel_affine(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let (n, c) = gv.dims2();
        assert_eq!(bv.shape(), gv.shape());
        assert_eq!(&x.shape()[..2], &[n, c], "affine parameters must be [N, C]");
        let hw = x.numel() / (n * c);
        let mut d = Vec::with_capacity(x.numel());
        for nc in 0..n * c {
            let (g, b) = (gv.data()[nc], bv.data()[nc]);
            d.extend(x.data()[nc * hw..(nc + 1) * hw].iter().map(|&v| g * v + b));
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.tape.push(
            Tensor::new(x.shape().to_vec(), d),
            Op::ChannelAffine { x: self.idx, gamma: gamma.idx, beta: beta.idx },
            rg,
        )
    }

    /// Per-sample, per-channel standardization with population statistics:
    /// `(x − μ) / (σ + ε)`.
    pub fn instance_norm(&self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let hwf = T::from_f64(hw as f64);
        let eps = T::from_f64(crate::model::ADAIN_EPS);
        let mut stats = Vec::with_capacity(n * c);
        let mut d = Vec::with_capacity(x.numel());
        for nc in 0..n * c {
            let s = &x.data()[nc * hw..(nc + 1) * hw];
            let mean = s.iter().copied().sum::<T>() / hwf;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hwf;
            let std = var.sqrt();
            stats.push((mean, std));
            d.extend(s.iter().map(|&v| (v - mean) / (std + eps)));
        }
        self.unary(Tensor::new(x.shape().to_vec(), d), Op::InstanceNorm { x: self.idx, stats: Rc::new(stats) })
    }

    /// Nearest-neighbour ×2 spatial upsampling.
    pub fn upsample2x(&self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let mut d = Vec::with_capacity(x.numel() * 4);
        for nc in 0..n * c {
            let plane = &x.data()[nc * h * w..(nc + 1) * h * w];
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for &v in row {
                    d.push(v);
                    d.push(v);
                }
            }
        }
        self.unary(Tensor::new(vec![n, c, 2 * h, 2 * w], d), Op::Upsample2x(self.idx))
    }

    /// `N×C×H×W -> N×C` spatial mean.
    pub fn global_avg_pool(&self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = T::from_f64((h * w) as f64);
        let d = x.data().chunks(h * w).map(|s| s.iter().copied().sum::<T>() / hw).collect();
        self.unary(Tensor::new(vec![n, c], d), Op::GlobalAvgPool(self.idx))
    }

    /// (Batched) matrix product. `self` is `[B,]M×K`; `other` is `[B,]K×N`,
    /// or `[B,]N×K` when `trans_b`.
    pub fn matmul_ex(&self, other: &Var<'t, T>, trans_b: bool) -> Var<'t, T> {
        let (va, vb) = (self.value(), other.value());
        let (batch, m, k) = batch_dims(va.shape());
        let (batch_b, b1, b2) = batch_dims(vb.shape());
        assert_eq!(batch, batch_b, "matmul batch mismatch");
        let (kb, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        assert_eq!(k, kb, "matmul inner dimension mismatch: {:?} x {:?}", va.shape(), vb.shape());
        let mut d = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            crate::tensor::gemm(
                m,
                k,
                n,
                &va.data()[bi * m * k..(bi + 1) * m * k],
                false,
                &vb.data()[bi * k * n..(bi + 1) * k * n],
                trans_b,
                &mut d[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let shape = if va.shape().len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        self.binary(other, Tensor::new(shape, d), Op::Matmul { a: self.idx, b: other.idx, trans_b })
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.matmul_ex(other, false)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.matmul_ex(other, true)
    }

    /// Picks channel vectors of an `N×C×H×W` map at `(sample, flat spatial index)`
    /// pairs, producing `M×C`.
    pub fn gather_pixels(&self, index: Vec<(usize, usize)>) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let mut d = Vec::with_capacity(index.len() * c);
        for &(b, p) in &index {
            assert!(b < n && p < h * w, "pixel index ({b}, {p}) out of range for {:?}", x.shape());
            for ch in 0..c {
                d.push(x.data()[(b * c + ch) * h * w + p]);
            }
        }
        let m = index.len();
        self.unary(Tensor::new(vec![m, c], d), Op::GatherPixels { x: self.idx, index: Rc::new(index) })
    }

    /// Rows scaled to unit L2 norm (last axis).
    pub fn l2_normalize_rows(&self) -> Var<'t, T> {
        let x = self.value();
        let k = *x.shape().last().unwrap();
        let eps = T::from_f64(NORM_EPS);
        let mut d = Vec::with_capacity(x.numel());
        for row in x.data().chunks(k) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            d.extend(row.iter().map(|&v| v / norm));
        }
        self.unary(Tensor::new(x.shape().to_vec(), d), Op::L2NormalizeRows(self.idx))
    }

    /// L2 norm of each row (last axis); zero rows get a zero subgradient.
    pub fn row_norm(&self) -> Var<'t, T> {
        let x = self.value();
        let k = *x.shape().last().unwrap();
        let d = x.data().chunks(k).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
        let rows = x.numel() / k;
        self.unary(Tensor::new(vec![rows], d), Op::RowNorm(self.idx))
    }

    /// Per-row softmax cross-entropy `logsumexp(row) − row[target]`, computed
    /// with the max-shift so large logits stay finite.
    pub fn cross_entropy_rows(&self, targets: Vec<usize>) -> Var<'t, T> {
        let x = self.value();
        let (m, c) = x.dims2();
        assert_eq!(targets.len(), m);
        let mut probs = vec![T::zero(); m * c];
        let mut losses = Vec::with_capacity(m);
        for r in 0..m {
            let row = &x.data()[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            assert!(targets[r] < c);
            losses.push(lse - row[targets[r]]);
        }
        self.unary(
            Tensor::new(vec![m], losses),
            Op::CrossEntropyRows {
                logits: self.idx,
                targets: Rc::new(targets),
                probs: Rc::new(Tensor::new(vec![m, c], probs)),
            },
        )
    }

    /// Sum over the last axis.
    pub fn sum_last(&self) -> Var<'t, T> {
        let x = self.value();
        let k = *x.shape().last().unwrap();
        let shape = x.shape()[..x.shape().len() - 1].to_vec();
        let d = x.data().chunks(k).map(|r| r.iter().copied().sum()).collect();
        self.unary(Tensor::new(shape, d), Op::SumLast(self.idx))
    }

    /// Concatenates along the last axis. Rank-1 inputs count as one column.
    pub fn concat_last(parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].shape()[0];
        let widths: Vec<usize> = vals.iter().map(|v| v.numel() / rows).collect();
        for v in &vals {
            assert_eq!(v.shape()[0], rows, "concat row mismatch");
        }
        let total: usize = widths.iter().sum();
        let mut d = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &k) in vals.iter().zip(&widths) {
                d.extend_from_slice(&v.data()[r * k..(r + 1) * k]);
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        tape.push(Tensor::new(vec![rows, total], d), Op::ConcatLast(parts.iter().map(|p| p.idx).collect()), rg)
    }

    /// For `self` = `(T·w)×K` rows grouped in windows of `window_len`, the
    /// per-window second-moment matrix `G = (1/w) Σ f fᵀ`, flattened to its
    /// upper triangle (diagonal included): `T × K(K+1)/2`.
    pub fn window_gram(&self, window_len: usize) -> Var<'t, T> {
        let x = self.value();
        let (rows, k) = x.dims2();
        assert!(window_len > 0 && rows % window_len == 0, "rows must group into windows");
        let t = rows / window_len;
        let tri = k * (k + 1) / 2;
        let scale = T::one() / T::from_f64(window_len as f64);
        let mut full = vec![T::zero(); k * k];
        let mut d = Vec::with_capacity(t * tri);
        for ti in 0..t {
            let fs = &x.data()[ti * window_len * k..(ti + 1) * window_len * k];
            crate::tensor::gemm(k, window_len, k, fs, true, fs, false, &mut full, false);
            for a in 0..k {
                for b in a..k {
                    d.push(full[a * k + b] * scale);
                }
            }
        }
        self.unary(Tensor::new(vec![t, tri], d), Op::WindowGram { x: self.idx, window_len })
    }
}

/// Full symmetric `K×K` second-moment matrix of a window, for property checks.
pub fn window_gram_full<T: Scalar>(window: &[T], k: usize) -> Vec<T> {
    let w = window.len() / k;
    let mut full = vec![T::zero(); k * k];
    crate::tensor::gemm(k, w, k, window, true, window, false, &mut full, false);
    let scale = T::one() / T::from_f64(w as f64);
    full.iter_mut().for_each(|v| *v *= scale);
    full
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks the analytic gradient of `f` against central differences for
    /// every input tensor.
    fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
    where
        F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
    {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
            for j in 0..input.numel() {
                let eval = |delta: f64| {
                    let tape = Tape::new();
                    let vs: Vec<_> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, t)| {
                            let mut t = t.clone();
                            if k == i {
                                t.data_mut()[j] += delta;
                            }
                            tape.leaf(t)
                        })
                        .collect();
                    f(&tape, &vs).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[j];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-4));
                assert!(err < 1e-5, "input {i} elem {j}: analytic {a} vs numeric {numeric}");
            }
        }
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, vec![2, 3]);
        let b = rand_tensor(&mut rng, vec![2, 3]).map(|v| v + 2.0);
        check(vec![a.clone(), b.clone()], |_, v| {
            v[0].mul(&v[1]).add(&v[0].tanh()).sub(&v[1].ln()).add(&v[0].exp().scale(0.3)).sqr().sum()
        });
        check(vec![a.clone()], |_, v| v[0].leaky_relu(0.2).abs().add_scalar(0.5).mean());
        check(vec![a], |_, v| v[0].relu().mul_const(Tensor::full(vec![2, 3], 3.0)).sum());
    }

    #[test]
    fn conv_and_transpose_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, vec![2, 2, 6, 6]);
        let w = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, vec![3]);
        check(vec![x.clone(), w.clone(), b], |_, v| v[0].conv2d(&v[1], Some(&v[2]), 2, 1).sqr().sum());
        let dy = rand_tensor(&mut rng, vec![2, 3, 3, 3]);
        check(vec![dy, w], |_, v| v[0].conv2d_input_grad(&v[1], (2, 2, 6, 6), 2, 1).sqr().sum());
    }

    #[test]
    fn normalization_and_pooling_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![2, 3, 4, 4]);
        let gamma = rand_tensor(&mut rng, vec![2, 3]);
        let beta = rand_tensor(&mut rng, vec![2, 3]);
        let probe = rand_tensor(&mut rng, vec![2, 3, 4, 4]);
        check(vec![x.clone(), gamma, beta], |tape, v| {
            let p = tape.constant(probe.clone());
            v[0].instance_norm().channel_affine(&v[1], &v[2]).mul(&p).sum()
        });
        let bias = rand_tensor(&mut rng, vec![3]);
        check(vec![x.clone(), bias], |_, v| v[0].add_bias(&v[1]).upsample2x().sqr().global_avg_pool().sum());
        check(vec![x], |_, v| v[0].mean_per_sample().sqr().sum());
    }

    #[test]
    fn matrix_and_row_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 5]);
        let bt = rand_tensor(&mut rng, vec![5, 4]);
        check(vec![a.clone(), b], |_, v| v[0].matmul(&v[1]).sqr().sum());
        check(vec![a.clone(), bt], |_, v| {
            v[0].l2_normalize_rows().matmul_t(&v[1]).scale(2.0).cross_entropy_rows(vec![0, 3, 4]).sum()
        });
        let ba = rand_tensor(&mut rng, vec![2, 3, 4]);
        let bb = rand_tensor(&mut rng, vec![2, 5, 4]);
        check(vec![ba, bb], |_, v| v[0].matmul_t(&v[1]).sqr().sum());
        let c = rand_tensor(&mut rng, vec![3, 4]);
        check(vec![a, c], |_, v| {
            let d = v[0].mul(&v[1]).sum_last();
            let n = v[1].row_norm();
            Var::concat_last(&[d, n, v[0]]).sqr().sum()
        });
    }

    #[test]
    fn gather_and_gram_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, vec![2, 3, 3, 3]);
        let index = vec![(0, 4), (1, 0), (1, 8), (0, 4), (0, 2), (1, 5)];
        check(vec![x], move |_, v| v[0].gather_pixels(index.clone()).window_gram(3).l2_normalize_rows().sqr().sum());
        let f = rand_tensor(&mut rng, vec![6, 3]);
        let probe = rand_tensor(&mut rng, vec![2, 6]);
        check(vec![f], |tape, v| v[0].window_gram(3).mul(&tape.constant(probe.clone())).sum());
    }

    #[test]
    fn cross_entropy_survives_large_logits() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0 / 0.01, -1.0 / 0.01]));
        let l = x.cross_entropy_rows(vec![0]).item();
        assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![2], 1.0));
        let w = tape.leaf(Tensor::full(vec![2], 2.0));
        let out = x.mul(&w).sum();
        let grads = tape.backward(out);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0]);
    }
}
