//! Reverse-mode automatic differentiation over dense real tensors.
//!
//! A [`Tape`] records a Wengert list: every operation appends a node holding
//! its output tensor and the indices of its inputs, so replay order is
//! topological by construction. [`Tape::backward`] walks the list in reverse
//! from a scalar loss, accumulating adjoints, and fails if any gradient comes
//! out non-finite. One backward pass per tape; training builds a fresh tape
//! per step.
//!
//! Complex data is carried as paired real planes (`[2, H, W]`), which keeps
//! the engine real-valued; the FFT op treats plane 0 as the real part and
//! plane 1 as the imaginary part.

use crate::error::{Error, Result};
use crate::fft;
use crate::scalar::Scalar;
use crate::tensor::{broadcast_shape, broadcast_zip, reduce_to_shape, Tensor};
use rayon::prelude::*;
use std::cell::RefCell;
use std::rc::Rc;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Abs,
    Square,
    Sqrt,
    Neg,
    Sin,
    Cos,
    Tanh,
    Relu,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(BinaryOp, Value, Value),
    Unary(UnaryOp, Value),
    Atan2(Value, Value),
    SumAll(Value),
    MeanAll(Value),
    Reshape(Value),
    Concat0(Vec<Value>),
    Index0(Value, usize),
    Narrow0 { v: Value, start: usize, len: usize },
    Conv2d { x: Value, w: Value, b: Value },
    ChannelLinear { x: Value, w: Value, b: Option<Value> },
    Linear1d { x: Value, w: Value, b: Value },
    Bilinear { x: Value, coords: Value },
    AvgPool2(Value),
    Upsample2(Value),
    DiffX(Value),
    DiffY(Value),
    Softmax0(Value),
    Fft2 { v: Value, inverse: bool },
}

struct Node<T> {
    op: Op,
    data: Rc<Tensor<T>>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Value`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Value) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Single-graph autodiff tape.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    backward_done: RefCell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            backward_done: RefCell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, data: Tensor<T>, needs_grad: bool) -> Value {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            data: Rc::new(data),
            needs_grad,
        });
        Value(nodes.len() - 1)
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Registers an input tensor. Gradients flow into it iff `requires_grad`.
    pub fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Value {
        self.push(Op::Leaf, t, requires_grad)
    }

    /// Registers a non-differentiable constant.
    pub fn constant(&self, t: Tensor<T>) -> Value {
        self.leaf(t, false)
    }

    pub fn scalar_const(&self, v: f64) -> Value {
        self.constant(Tensor::scalar(T::of(v)))
    }

    /// Snapshot of a node's output tensor.
    pub fn value(&self, v: Value) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].data)
    }

    pub fn shape(&self, v: Value) -> Vec<usize> {
        self.nodes.borrow()[v.0].data.shape().to_vec()
    }

    // ---- elementwise -----------------------------------------------------

    pub fn binary(&self, op: BinaryOp, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (self.value(a), self.value(b));
        broadcast_shape(ta.shape(), tb.shape())?;
        let f = match op {
            BinaryOp::Add => |x: T, y: T| x + y,
            BinaryOp::Sub => |x: T, y: T| x - y,
            BinaryOp::Mul => |x: T, y: T| x * y,
            BinaryOp::Div => |x: T, y: T| x / y,
        };
        let out = broadcast_zip(&ta, &tb, f)?;
        Ok(self.push(Op::Binary(op, a, b), out, self.needs(a) || self.needs(b)))
    }

    pub fn add(&self, a: Value, b: Value) -> Result<Value> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: Value, b: Value) -> Result<Value> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&self, a: Value, b: Value) -> Result<Value> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&self, a: Value, b: Value) -> Result<Value> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&self, op: UnaryOp, v: Value) -> Value {
        let t = self.value(v);
        let f = |x: T| match op {
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Abs => x.abs(),
            UnaryOp::Square => x * x,
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Neg => -x,
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            // stable softplus: max(x, 0) + ln(1 + e^{-|x|})
            UnaryOp::Softplus => x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln(),
        };
        let out = t.map(f);
        self.push(Op::Unary(op, v), out, self.needs(v))
    }

    pub fn exp(&self, v: Value) -> Value {
        self.unary(UnaryOp::Exp, v)
    }

    pub fn log(&self, v: Value) -> Value {
        self.unary(UnaryOp::Log, v)
    }

    pub fn abs(&self, v: Value) -> Value {
        self.unary(UnaryOp::Abs, v)
    }

    pub fn square(&self, v: Value) -> Value {
        self.unary(UnaryOp::Square, v)
    }

    pub fn sqrt(&self, v: Value) -> Value {
        self.unary(UnaryOp::Sqrt, v)
    }

    pub fn neg(&self, v: Value) -> Value {
        self.unary(UnaryOp::Neg, v)
    }

    pub fn sin(&self, v: Value) -> Value {
        self.unary(UnaryOp::Sin, v)
    }

    pub fn cos(&self, v: Value) -> Value {
        self.unary(UnaryOp::Cos, v)
    }

    pub fn tanh(&self, v: Value) -> Value {
        self.unary(UnaryOp::Tanh, v)
    }

    pub fn relu(&self, v: Value) -> Value {
        self.unary(UnaryOp::Relu, v)
    }

    pub fn softplus(&self, v: Value) -> Value {
        self.unary(UnaryOp::Softplus, v)
    }

    /// atan2(y, x), elementwise on equal shapes.
    pub fn atan2(&self, y: Value, x: Value) -> Result<Value> {
        let (ty, tx) = (self.value(y), self.value(x));
        if ty.shape() != tx.shape() {
            return Err(Error::Dimension(format!(
                "atan2 shapes {:?} vs {:?}",
                ty.shape(),
                tx.shape()
            )));
        }
        let data = ty
            .data()
            .iter()
            .zip(tx.data())
            .map(|(&a, &b)| a.atan2(b))
            .collect();
        let out = Tensor::new(ty.shape(), data)?;
        Ok(self.push(Op::Atan2(y, x), out, self.needs(y) || self.needs(x)))
    }

    pub fn scale(&self, v: Value, c: f64) -> Result<Value> {
        let s = self.scalar_const(c);
        self.mul(v, s)
    }

    pub fn add_scalar(&self, v: Value, c: f64) -> Result<Value> {
        let s = self.scalar_const(c);
        self.add(v, s)
    }

    // ---- reductions and shape ops ---------------------------------------

    pub fn sum_all(&self, v: Value) -> Value {
        let out = Tensor::scalar(self.value(v).sum());
        self.push(Op::SumAll(v), out, self.needs(v))
    }

    pub fn mean_all(&self, v: Value) -> Value {
        let out = Tensor::scalar(self.value(v).mean());
        self.push(Op::MeanAll(v), out, self.needs(v))
    }

    pub fn reshape(&self, v: Value, shape: &[usize]) -> Result<Value> {
        let out = self.value(v).reshaped(shape)?;
        Ok(self.push(Op::Reshape(v), out, self.needs(v)))
    }

    /// Concatenates along axis 0. All inputs must share trailing dimensions.
    pub fn concat0(&self, vs: &[Value]) -> Result<Value> {
        if vs.is_empty() {
            return Err(Error::Dimension("concat0 of zero tensors".into()));
        }
        let first = self.value(vs[0]);
        let rank = first.shape().len();
        if rank == 0 {
            return Err(Error::Dimension("concat0 needs rank >= 1".into()));
        }
        let tail = first.shape()[1..].to_vec();
        let mut n0 = 0usize;
        let mut data = Vec::new();
        for &v in vs {
            let t = self.value(v);
            if t.shape().len() != rank || t.shape()[1..] != tail[..] {
                return Err(Error::Dimension(format!(
                    "concat0 mismatch: {:?} vs leading {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
            n0 += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![n0];
        shape.extend_from_slice(&tail);
        let needs = vs.iter().any(|&v| self.needs(v));
        Ok(self.push(Op::Concat0(vs.to_vec()), Tensor::new(&shape, data)?, needs))
    }

    /// Stacks rank-R tensors into a rank-(R+1) tensor along a new axis 0.
    pub fn stack0(&self, vs: &[Value]) -> Result<Value> {
        let reshaped: Vec<Value> = vs
            .iter()
            .map(|&v| {
                let mut s = vec![1usize];
                s.extend_from_slice(&self.shape(v));
                self.reshape(v, &s)
            })
            .collect::<Result<_>>()?;
        self.concat0(&reshaped)
    }

    /// Takes `len` slices along axis 0 starting at `start`, keeping the axis.
    pub fn narrow0(&self, v: Value, start: usize, len: usize) -> Result<Value> {
        let t = self.value(v);
        if t.shape().is_empty() || start + len > t.shape()[0] {
            return Err(Error::Dimension(format!(
                "narrow0 [{start}, {start}+{len}) out of bounds for {:?}",
                t.shape()
            )));
        }
        let rest: usize = t.shape()[1..].iter().product();
        let data = t.data()[start * rest..(start + len) * rest].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&t.shape()[1..]);
        Ok(self.push(
            Op::Narrow0 { v, start, len },
            Tensor::new(&shape, data)?,
            self.needs(v),
        ))
    }

    /// Extracts slice `i` along axis 0, dropping that axis.
    pub fn index0(&self, v: Value, i: usize) -> Result<Value> {
        let t = self.value(v);
        if t.shape().is_empty() || i >= t.shape()[0] {
            return Err(Error::Dimension(format!(
                "index0 {i} out of bounds for {:?}",
                t.shape()
            )));
        }
        let rest: usize = t.shape()[1..].iter().product();
        let data = t.data()[i * rest..(i + 1) * rest].to_vec();
        let out = Tensor::new(&t.shape()[1..], data)?;
        Ok(self.push(Op::Index0(v, i), out, self.needs(v)))
    }

    // ---- structured ops --------------------------------------------------

    /// 3x3 convolution (cross-correlation), zero padding 1, stride 1.
    pub fn conv2d(&self, x: Value, w: Value, b: Value) -> Result<Value> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws, bs) = (tx.shape(), tw.shape(), tb.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::Dimension(format!(
                "conv2d wants x[C,H,W], w[Co,Ci,3,3]; got {xs:?}, {ws:?}"
            )));
        }
        if ws[1] != xs[0] || bs != [ws[0]] {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let co = ws[0];
        let out = conv2d_forward(tx.data(), tw.data(), tb.data(), ci, co, h, wd);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Op::Conv2d { x, w, b },
            Tensor::new(&[co, h, wd], out)?,
            needs,
        ))
    }

    /// Per-pixel channel mixing (a 1x1 convolution).
    pub fn channel_linear(&self, x: Value, w: Value, b: Option<Value>) -> Result<Value> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 3 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(Error::Dimension(format!(
                "channel_linear wants x[Ci,H,W], w[Co,Ci]; got {xs:?}, {ws:?}"
            )));
        }
        if let Some(bv) = b {
            let tb = self.value(bv);
            if tb.shape() != [ws[0]] {
                return Err(Error::Dimension(format!(
                    "channel_linear bias {:?} vs Co {}",
                    tb.shape(),
                    ws[0]
                )));
            }
        }
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let co = ws[0];
        let hw = h * wd;
        let mut out = vec![T::zero(); co * hw];
        let bias = b.map(|bv| self.value(bv));
        for o in 0..co {
            let seed = bias.as_ref().map_or(T::zero(), |t| t.data()[o]);
            let dst = &mut out[o * hw..(o + 1) * hw];
            for v in dst.iter_mut() {
                *v = seed;
            }
            for i in 0..ci {
                let wv = tw.data()[o * ci + i];
                let src = &tx.data()[i * hw..(i + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + wv * s;
                }
            }
        }
        let needs =
            self.needs(x) || self.needs(w) || b.map_or(false, |bv| self.needs(bv));
        Ok(self.push(
            Op::ChannelLinear { x, w, b },
            Tensor::new(&[co, h, wd], out)?,
            needs,
        ))
    }

    /// Dense layer on a rank-1 input: `y = W x + b`.
    pub fn linear1d(&self, x: Value, w: Value, b: Value) -> Result<Value> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] || tb.shape() != [ws[0]] {
            return Err(Error::Dimension(format!(
                "linear1d wants x[n], w[m,n], b[m]; got {:?}, {:?}, {:?}",
                xs,
                ws,
                tb.shape()
            )));
        }
        let (m, n) = (ws[0], ws[1]);
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let mut acc = tb.data()[r];
            for c in 0..n {
                acc += tw.data()[r * n + c] * tx.data()[c];
            }
            out.push(acc);
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Linear1d { x, w, b }, Tensor::new(&[m], out)?, needs))
    }

    /// Bilinear sampling of `x`[C,H,W] at fractional positions given by
    /// `coords`[2,H,W] (plane 0 = row, plane 1 = column). Out-of-bounds
    /// samples read as zero; the integer-lattice tie-break uses the
    /// left/lower cell (floor).
    pub fn bilinear_sample(&self, x: Value, coords: Value) -> Result<Value> {
        let (tx, tc) = (self.value(x), self.value(coords));
        let (xs, cs) = (tx.shape(), tc.shape());
        if xs.len() != 3 || cs.len() != 3 || cs[0] != 2 {
            return Err(Error::Dimension(format!(
                "bilinear_sample wants x[C,H,W], coords[2,H,W]; got {xs:?}, {cs:?}"
            )));
        }
        if cs[1] != xs[1] || cs[2] != xs[2] {
            return Err(Error::Dimension(format!(
                "bilinear_sample spatial mismatch {xs:?} vs {cs:?}"
            )));
        }
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let out = bilinear_forward(tx.data(), tc.data(), c, h, wd);
        let needs = self.needs(x) || self.needs(coords);
        Ok(self.push(
            Op::Bilinear { x, coords },
            Tensor::new(&[c, h, wd], out)?,
            needs,
        ))
    }

    /// 2x2 average pooling, stride 2. Extents must be even.
    pub fn avg_pool2(&self, v: Value) -> Result<Value> {
        let t = self.value(v);
        let s = t.shape();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::Dimension(format!("avg_pool2 wants [C,2h,2w]; got {s:?}")));
        }
        let (c, h, wd) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, wd / 2);
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            let src = &t.data()[ch * h * wd..(ch + 1) * h * wd];
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for r in 0..oh {
                for q in 0..ow {
                    let i = 2 * r * wd + 2 * q;
                    dst[r * ow + q] =
                        (src[i] + src[i + 1] + src[i + wd] + src[i + wd + 1]) * quarter;
                }
            }
        }
        Ok(self.push(Op::AvgPool2(v), Tensor::new(&[c, oh, ow], out)?, self.needs(v)))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&self, v: Value) -> Result<Value> {
        let t = self.value(v);
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::Dimension(format!("upsample2 wants [C,H,W]; got {s:?}")));
        }
        let (c, h, wd) = (s[0], s[1], s[2]);
        let (oh, ow) = (2 * h, 2 * wd);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            let src = &t.data()[ch * h * wd..(ch + 1) * h * wd];
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for r in 0..oh {
                for q in 0..ow {
                    dst[r * ow + q] = src[(r / 2) * wd + q / 2];
                }
            }
        }
        Ok(self.push(Op::Upsample2(v), Tensor::new(&[c, oh, ow], out)?, self.needs(v)))
    }

    /// Forward difference along the last axis; the final column is zero.
    pub fn diff_x(&self, v: Value) -> Result<Value> {
        let t = self.value(v);
        let s = t.shape();
        if s.is_empty() {
            return Err(Error::Dimension("diff_x needs rank >= 1".into()));
        }
        let wd = s[s.len() - 1];
        let rows = t.numel() / wd;
        let mut out = vec![T::zero(); t.numel()];
        for r in 0..rows {
            let src = &t.data()[r * wd..(r + 1) * wd];
            let dst = &mut out[r * wd..(r + 1) * wd];
            for j in 0..wd.saturating_sub(1) {
                dst[j] = src[j + 1] - src[j];
            }
        }
        Ok(self.push(Op::DiffX(v), Tensor::new(s, out)?, self.needs(v)))
    }

    /// Forward difference along the second-to-last axis; last row is zero.
    pub fn diff_y(&self, v: Value) -> Result<Value> {
        let t = self.value(v);
        let s = t.shape();
        if s.len() < 2 {
            return Err(Error::Dimension("diff_y needs rank >= 2".into()));
        }
        let wd = s[s.len() - 1];
        let h = s[s.len() - 2];
        let blocks = t.numel() / (h * wd);
        let mut out = vec![T::zero(); t.numel()];
        for bl in 0..blocks {
            let src = &t.data()[bl * h * wd..(bl + 1) * h * wd];
            let dst = &mut out[bl * h * wd..(bl + 1) * h * wd];
            for r in 0..h.saturating_sub(1) {
                for j in 0..wd {
                    dst[r * wd + j] = src[(r + 1) * wd + j] - src[r * wd + j];
                }
            }
        }
        Ok(self.push(Op::DiffY(v), Tensor::new(s, out)?, self.needs(v)))
    }

    /// Softmax over axis 0 of an `[N, ...]` tensor.
    pub fn softmax0(&self, v: Value) -> Result<Value> {
        let t = self.value(v);
        let s = t.shape();
        if s.is_empty() {
            return Err(Error::Dimension("softmax0 needs rank >= 1".into()));
        }
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        let mut out = vec![T::zero(); t.numel()];
        for i in 0..rest {
            let mut m = T::neg_infinity();
            for k in 0..n {
                m = m.max(t.data()[k * rest + i]);
            }
            let mut z = T::zero();
            for k in 0..n {
                let e = (t.data()[k * rest + i] - m).exp();
                out[k * rest + i] = e;
                z += e;
            }
            for k in 0..n {
                out[k * rest + i] = out[k * rest + i] / z;
            }
        }
        Ok(self.push(Op::Softmax0(v), Tensor::new(s, out)?, self.needs(v)))
    }

    /// Unitary 2-D FFT of a complex pair `[2, H, W]`. The backward pass is
    /// the opposite-direction transform (the adjoint of a unitary map).
    pub fn fft2(&self, v: Value, inverse: bool) -> Result<Value> {
        let t = self.value(v);
        let s = t.shape();
        if s.len() != 3 || s[0] != 2 {
            return Err(Error::Dimension(format!("fft2 wants [2,H,W]; got {s:?}")));
        }
        let (h, wd) = (s[1], s[2]);
        let hw = h * wd;
        let mut re = t.data()[..hw].to_vec();
        let mut im = t.data()[hw..].to_vec();
        fft::fft2(&mut re, &mut im, h, wd, inverse)?;
        re.extend_from_slice(&im);
        Ok(self.push(Op::Fft2 { v, inverse }, Tensor::new(s, re)?, self.needs(v)))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar loss. Returns per-node gradients and fails
    /// on non-finite gradients (e.g. after a division by zero) or when called
    /// twice on the same tape.
    pub fn backward(&self, loss: Value) -> Result<Gradients<T>> {
        if *self.backward_done.borrow() {
            return Err(Error::State(
                "backward already ran on this tape; build a fresh graph".into(),
            ));
        }
        *self.backward_done.borrow_mut() = true;
        let nodes = self.nodes.borrow();
        if nodes[loss.0].data.numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss; got shape {:?}",
                nodes[loss.0].data.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].data.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            if !nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.adjoint(&nodes, idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::Numeric(
                    "non-finite gradient encountered during backward".into(),
                ));
            }
        }
        Ok(Gradients { grads })
    }

    fn adjoint(
        &self,
        nodes: &[Node<T>],
        idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let accumulate = |grads: &mut [Option<Tensor<T>>], v: Value, inc: Tensor<T>| {
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(inc.data()) {
                        *a += *b;
                    }
                }
                slot @ None => *slot = Some(inc),
            }
        };
        let flow = |v: Value| nodes[v.0].needs_grad;
        let out = &nodes[idx].data;

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (ta, tb) = (&nodes[a.0].data, &nodes[b.0].data);
                match op {
                    BinaryOp::Add => {
                        if flow(*a) {
                            accumulate(grads, *a, reduce_to_shape(g, ta.shape()));
                        }
                        if flow(*b) {
                            accumulate(grads, *b, reduce_to_shape(g, tb.shape()));
                        }
                    }
                    BinaryOp::Sub => {
                        if flow(*a) {
                            accumulate(grads, *a, reduce_to_shape(g, ta.shape()));
                        }
                        if flow(*b) {
                            let neg = g.map(|x| -x);
                            accumulate(grads, *b, reduce_to_shape(&neg, tb.shape()));
                        }
                    }
                    BinaryOp::Mul => {
                        if flow(*a) {
                            let t = broadcast_zip(g, tb, |gv, bv| gv * bv)?;
                            accumulate(grads, *a, reduce_to_shape(&t, ta.shape()));
                        }
                        if flow(*b) {
                            let t = broadcast_zip(g, ta, |gv, av| gv * av)?;
                            accumulate(grads, *b, reduce_to_shape(&t, tb.shape()));
                        }
                    }
                    BinaryOp::Div => {
                        if flow(*a) {
                            let t = broadcast_zip(g, tb, |gv, bv| gv / bv)?;
                            accumulate(grads, *a, reduce_to_shape(&t, ta.shape()));
                        }
                        if flow(*b) {
                            let num = broadcast_zip(g, ta, |gv, av| gv * av)?;
                            let t = broadcast_zip(&num, tb, |nv, bv| -nv / (bv * bv))?;
                            accumulate(grads, *b, reduce_to_shape(&t, tb.shape()));
                        }
                    }
                }
            }
            Op::Unary(op, v) => {
                if flow(*v) {
                    let x = &nodes[v.0].data;
                    let mut inc = Tensor::zeros(x.shape());
                    for i in 0..x.numel() {
                        let xv = x.data()[i];
                        let yv = out.data()[i];
                        let gv = g.data()[i];
                        inc.data_mut()[i] = gv
                            * match op {
                                UnaryOp::Exp => yv,
                                UnaryOp::Log => T::one() / xv,
                                UnaryOp::Abs => {
                                    if xv > T::zero() {
                                        T::one()
                                    } else if xv < T::zero() {
                                        -T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                                UnaryOp::Square => xv + xv,
                                UnaryOp::Sqrt => T::of(0.5) / yv,
                                UnaryOp::Neg => -T::one(),
                                UnaryOp::Sin => xv.cos(),
                                UnaryOp::Cos => -xv.sin(),
                                UnaryOp::Tanh => T::one() - yv * yv,
                                UnaryOp::Relu => {
                                    if xv > T::zero() {
                                        T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                                UnaryOp::Softplus => {
                                    // sigmoid(x)
                                    T::one() / (T::one() + (-xv).exp())
                                }
                            };
                    }
                    accumulate(grads, *v, inc);
                }
            }
            Op::Atan2(y, x) => {
                let (ty, tx) = (&nodes[y.0].data, &nodes[x.0].data);
                let floor = T::min_positive_value();
                if flow(*y) {
                    let mut inc = Tensor::zeros(ty.shape());
                    for i in 0..ty.numel() {
                        let (a, b) = (ty.data()[i], tx.data()[i]);
                        let d = (a * a + b * b).max(floor);
                        inc.data_mut()[i] = g.data()[i] * b / d;
                    }
                    accumulate(grads, *y, inc);
                }
                if flow(*x) {
                    let mut inc = Tensor::zeros(tx.shape());
                    for i in 0..tx.numel() {
                        let (a, b) = (ty.data()[i], tx.data()[i]);
                        let d = (a * a + b * b).max(floor);
                        inc.data_mut()[i] = -g.data()[i] * a / d;
                    }
                    accumulate(grads, *x, inc);
                }
            }
            Op::SumAll(v) => {
                if flow(*v) {
                    let shape = nodes[v.0].data.shape().to_vec();
                    accumulate(grads, *v, Tensor::full(&shape, g.data()[0]));
                }
            }
            Op::MeanAll(v) => {
                if flow(*v) {
                    let shape = nodes[v.0].data.shape().to_vec();
                    let n: usize = shape.iter().product();
                    accumulate(
                        grads,
                        *v,
                        Tensor::full(&shape, g.data()[0] / T::of(n as f64)),
                    );
                }
            }
            Op::Reshape(v) => {
                if flow(*v) {
                    let shape = nodes[v.0].data.shape().to_vec();
                    accumulate(grads, *v, g.reshaped(&shape)?);
                }
            }
            Op::Concat0(vs) => {
                let rest: usize = out.shape()[1..].iter().product();
                let mut off = 0usize;
                for &v in vs {
                    let n0 = nodes[v.0].data.shape()[0];
                    let chunk = n0 * rest;
                    if flow(v) {
                        let shape = nodes[v.0].data.shape().to_vec();
                        let inc =
                            Tensor::new(&shape, g.data()[off..off + chunk].to_vec())?;
                        accumulate(grads, v, inc);
                    }
                    off += chunk;
                }
            }
            Op::Index0(v, i) => {
                if flow(*v) {
                    let shape = nodes[v.0].data.shape().to_vec();
                    let rest: usize = shape[1..].iter().product();
                    let mut inc = Tensor::zeros(&shape);
                    inc.data_mut()[i * rest..(i + 1) * rest].copy_from_slice(g.data());
                    accumulate(grads, *v, inc);
                }
            }
            Op::Narrow0 { v, start, len } => {
                if flow(*v) {
                    let shape = nodes[v.0].data.shape().to_vec();
                    let rest: usize = shape[1..].iter().product();
                    let mut inc = Tensor::zeros(&shape);
                    inc.data_mut()[start * rest..(start + len) * rest]
                        .copy_from_slice(g.data());
                    accumulate(grads, *v, inc);
                }
            }
            Op::Conv2d { x, w, b } => {
                let (tx, tw) = (&nodes[x.0].data, &nodes[w.0].data);
                let (ci, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let co = tw.shape()[0];
                if flow(*x) {
                    let gx = conv2d_backward_x(g.data(), tw.data(), ci, co, h, wd);
                    accumulate(grads, *x, Tensor::new(tx.shape(), gx)?);
                }
                if flow(*w) {
                    let gw = conv2d_backward_w(g.data(), tx.data(), ci, co, h, wd);
                    accumulate(grads, *w, Tensor::new(tw.shape(), gw)?);
                }
                if flow(*b) {
                    let hw = h * wd;
                    let mut gb = vec![T::zero(); co];
                    for o in 0..co {
                        for i in 0..hw {
                            gb[o] += g.data()[o * hw + i];
                        }
                    }
                    accumulate(grads, *b, Tensor::new(&[co], gb)?);
                }
            }
            Op::ChannelLinear { x, w, b } => {
                let (tx, tw) = (&nodes[x.0].data, &nodes[w.0].data);
                let (ci, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let co = tw.shape()[0];
                let hw = h * wd;
                if flow(*x) {
                    let mut gx = vec![T::zero(); ci * hw];
                    for o in 0..co {
                        let gsl = &g.data()[o * hw..(o + 1) * hw];
                        for i in 0..ci {
                            let wv = tw.data()[o * ci + i];
                            let dst = &mut gx[i * hw..(i + 1) * hw];
                            for (d, &s) in dst.iter_mut().zip(gsl) {
                                *d += wv * s;
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(tx.shape(), gx)?);
                }
                if flow(*w) {
                    let mut gw = vec![T::zero(); co * ci];
                    for o in 0..co {
                        let gsl = &g.data()[o * hw..(o + 1) * hw];
                        for i in 0..ci {
                            let xsl = &tx.data()[i * hw..(i + 1) * hw];
                            let mut acc = T::zero();
                            for (a, bq) in gsl.iter().zip(xsl) {
                                acc += *a * *bq;
                            }
                            gw[o * ci + i] = acc;
                        }
                    }
                    accumulate(grads, *w, Tensor::new(tw.shape(), gw)?);
                }
                if let Some(bv) = b {
                    if flow(*bv) {
                        let mut gb = vec![T::zero(); co];
                        for o in 0..co {
                            for i in 0..hw {
                                gb[o] += g.data()[o * hw + i];
                            }
                        }
                        accumulate(grads, *bv, Tensor::new(&[co], gb)?);
                    }
                }
            }
            Op::Linear1d { x, w, b } => {
                let (tx, tw) = (&nodes[x.0].data, &nodes[w.0].data);
                let (m, n) = (tw.shape()[0], tw.shape()[1]);
                if flow(*x) {
                    let mut gx = vec![T::zero(); n];
                    for r in 0..m {
                        let gr = g.data()[r];
                        for c in 0..n {
                            gx[c] += tw.data()[r * n + c] * gr;
                        }
                    }
                    accumulate(grads, *x, Tensor::new(&[n], gx)?);
                }
                if flow(*w) {
                    let mut gw = vec![T::zero(); m * n];
                    for r in 0..m {
                        let gr = g.data()[r];
                        for c in 0..n {
                            gw[r * n + c] = gr * tx.data()[c];
                        }
                    }
                    accumulate(grads, *w, Tensor::new(&[m, n], gw)?);
                }
                if flow(*b) {
                    accumulate(grads, *b, Tensor::new(&[m], g.data().to_vec())?);
                }
            }
            Op::Bilinear { x, coords } => {
                let (tx, tc) = (&nodes[x.0].data, &nodes[coords.0].data);
                let (c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (gx, gc) = bilinear_backward(
                    tx.data(),
                    tc.data(),
                    g.data(),
                    c,
                    h,
                    wd,
                    flow(*x),
                    flow(*coords),
                );
                if flow(*x) {
                    accumulate(grads, *x, Tensor::new(tx.shape(), gx)?);
                }
                if flow(*coords) {
                    accumulate(grads, *coords, Tensor::new(tc.shape(), gc)?);
                }
            }
            Op::AvgPool2(v) => {
                if flow(*v) {
                    let shape = nodes[v.0].data.shape().to_vec();
                    let (c, h, wd) = (shape[0], shape[1], shape[2]);
                    let (oh, ow) = (h / 2, wd / 2);
                    let quarter = T::of(0.25);
                    let mut gx = vec![T::zero(); c * h * wd];
                    for ch in 0..c {
                        let gsl = &g.data()[ch * oh * ow..(ch + 1) * oh * ow];
                        let dst = &mut gx[ch * h * wd..(ch + 1) * h * wd];
                        for r in 0..oh {
                            for q in 0..ow {
                                let gv = gsl[r * ow + q] * quarter;
                                let i = 2 * r * wd + 2 * q;
                                dst[i] += gv;
                                dst[i + 1] += gv;
                                dst[i + wd] += gv;
                                dst[i + wd + 1] += gv;
                            }
                        }
                    }
                    accumulate(grads, *v, Tensor::new(&shape, gx)?);
                }
            }
            Op::Upsample2(v) => {
                if flow(*v) {
                    let shape = nodes[v.0].data.shape().to_vec();
                    let (c, h, wd) = (shape[0], shape[1], shape[2]);
                    let (oh, ow) = (2 * h, 2 * wd);
                    let mut gx = vec![T::zero(); c * h * wd];
                    for ch in 0..c {
                        let gsl = &g.data()[ch * oh * ow..(ch + 1) * oh * ow];
                        let dst = &mut gx[ch * h * wd..(ch + 1) * h * wd];
                        for r in 0..oh {
                            for q in 0..ow {
                                dst[(r / 2) * wd + q / 2] += gsl[r * ow + q];
                            }
                        }
                    }
                    accumulate(grads, *v, Tensor::new(&shape, gx)?);
                }
            }
            Op::DiffX(v) => {
                if flow(*v) {
                    let shape = nodes[v.0].data.shape().to_vec();
                    let wd = shape[shape.len() - 1];
                    let rows = g.numel() / wd;
                    let mut gx = vec![T::zero(); g.numel()];
                    for r in 0..rows {
                        let gs = &g.data()[r * wd..(r + 1) * wd];
                        let dst = &mut gx[r * wd..(r + 1) * wd];
                        for j in 0..wd.saturating_sub(1) {
                            dst[j] -= gs[j];
                            dst[j + 1] += gs[j];
                        }
                    }
                    accumulate(grads, *v, Tensor::new(&shape, gx)?);
                }
            }
            Op::DiffY(v) => {
                if flow(*v) {
                    let shape = nodes[v.0].data.shape().to_vec();
                    let wd = shape[shape.len() - 1];
                    let h = shape[shape.len() - 2];
                    let blocks = g.numel() / (h * wd);
                    let mut gx = vec![T::zero(); g.numel()];
                    for bl in 0..blocks {
                        let gs = &g.data()[bl * h * wd..(bl + 1) * h * wd];
                        let dst = &mut gx[bl * h * wd..(bl + 1) * h * wd];
                        for r in 0..h.saturating_sub(1) {
                            for j in 0..wd {
                                dst[r * wd + j] -= gs[r * wd + j];
                                dst[(r + 1) * wd + j] += gs[r * wd + j];
                            }
                        }
                    }
                    accumulate(grads, *v, Tensor::new(&shape, gx)?);
                }
            }
            Op::Softmax0(v) => {
                if flow(*v) {
                    let shape = nodes[v.0].data.shape().to_vec();
                    let n = shape[0];
                    let rest: usize = shape[1..].iter().product();
                    let y = out;
                    let mut gx = vec![T::zero(); y.numel()];
                    for i in 0..rest {
                        let mut dot = T::zero();
                        for k in 0..n {
                            dot += g.data()[k * rest + i] * y.data()[k * rest + i];
                        }
                        for k in 0..n {
                            gx[k * rest + i] =
                                y.data()[k * rest + i] * (g.data()[k * rest + i] - dot);
                        }
                    }
                    accumulate(grads, *v, Tensor::new(&shape, gx)?);
                }
            }
            Op::Fft2 { v, inverse } => {
                if flow(*v) {
                    let shape = nodes[v.0].data.shape().to_vec();
                    let (h, wd) = (shape[1], shape[2]);
                    let hw = h * wd;
                    let mut re = g.data()[..hw].to_vec();
                    let mut im = g.data()[hw..].to_vec();
                    fft::fft2(&mut re, &mut im, h, wd, !*inverse)?;
                    re.extend_from_slice(&im);
                    accumulate(grads, *v, Tensor::new(&shape, re)?);
                }
            }
        }
        Ok(())
    }
}

// ---- structured-op kernels (shared by forward and backward) ---------------

fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
) -> Vec<T> {
    let hw = h * wd;
    let mut out = vec![T::zero(); co * hw];
    out.par_chunks_mut(hw).enumerate().for_each(|(o, dst)| {
        for v in dst.iter_mut() {
            *v = b[o];
        }
        for i in 0..ci {
            let plane = &x[i * hw..(i + 1) * hw];
            for kr in 0..3usize {
                for kc in 0..3usize {
                    let wv = w[((o * ci + i) * 3 + kr) * 3 + kc];
                    if wv == T::zero() {
                        continue;
                    }
                    let (dr, dc) = (kr as isize - 1, kc as isize - 1);
                    let r0 = (-dr).max(0) as usize;
                    let r1 = (h as isize - dr).min(h as isize) as usize;
                    let c0 = (-dc).max(0) as usize;
                    let c1 = (wd as isize - dc).min(wd as isize) as usize;
                    for r in r0..r1 {
                        let src_off = ((r as isize + dr) as usize) * wd;
                        let srow = &plane[src_off + ((c0 as isize + dc) as usize)
                            ..src_off + ((c1 as isize + dc) as usize)];
                        let drow = &mut dst[r * wd + c0..r * wd + c1];
                        for (d, &s) in drow.iter_mut().zip(srow) {
                            *d = *d + wv * s;
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv2d_backward_x<T: Scalar>(
    g: &[T],
    w: &[T],
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
) -> Vec<T> {
    let hw = h * wd;
    let mut gx = vec![T::zero(); ci * hw];
    // gx[i, r+dr, c+dc] += w[o,i,kr,kc] * g[o,r,c]; flip the shift to keep
    // the destination contiguous per tap.
    gx.par_chunks_mut(hw).enumerate().for_each(|(i, dst)| {
        for o in 0..co {
            let gplane = &g[o * hw..(o + 1) * hw];
            for kr in 0..3usize {
                for kc in 0..3usize {
                    let wv = w[((o * ci + i) * 3 + kr) * 3 + kc];
                    if wv == T::zero() {
                        continue;
                    }
                    let (dr, dc) = (kr as isize - 1, kc as isize - 1);
                    // dst index = src index + (dr, dc): iterate over valid src
                    let r0 = (-dr).max(0) as usize;
                    let r1 = (h as isize - dr).min(h as isize) as usize;
                    let c0 = (-dc).max(0) as usize;
                    let c1 = (wd as isize - dc).min(wd as isize) as usize;
                    for r in r0..r1 {
                        let dst_off = ((r as isize + dr) as usize) * wd;
                        let drow = &mut dst[dst_off + ((c0 as isize + dc) as usize)
                            ..dst_off + ((c1 as isize + dc) as usize)];
                        let grow = &gplane[r * wd + c0..r * wd + c1];
                        for (d, &s) in drow.iter_mut().zip(grow) {
                            *d = *d + wv * s;
                        }
                    }
                }
            }
        }
    });
    gx
}

fn conv2d_backward_w<T: Scalar>(
    g: &[T],
    x: &[T],
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
) -> Vec<T> {
    let hw = h * wd;
    let mut gw = vec![T::zero(); co * ci * 9];
    gw.par_chunks_mut(ci * 9).enumerate().for_each(|(o, dst)| {
        let gplane = &g[o * hw..(o + 1) * hw];
        for i in 0..ci {
            let plane = &x[i * hw..(i + 1) * hw];
            for kr in 0..3usize {
                for kc in 0..3usize {
                    let (dr, dc) = (kr as isize - 1, kc as isize - 1);
                    let r0 = (-dr).max(0) as usize;
                    let r1 = (h as isize - dr).min(h as isize) as usize;
                    let c0 = (-dc).max(0) as usize;
                    let c1 = (wd as isize - dc).min(wd as isize) as usize;
                    let mut acc = T::zero();
                    for r in r0..r1 {
                        let src_off = ((r as isize + dr) as usize) * wd;
                        let srow = &plane[src_off + ((c0 as isize + dc) as usize)
                            ..src_off + ((c1 as isize + dc) as usize)];
                        let grow = &gplane[r * wd + c0..r * wd + c1];
                        for (&a, &bq) in grow.iter().zip(srow) {
                            acc += a * bq;
                        }
                    }
                    dst[i * 9 + kr * 3 + kc] = acc;
                }
            }
        }
    });
    gw
}

struct BilinearCell {
    r0: isize,
    c0: isize,
    fr: f64,
    fc: f64,
}

fn bilinear_cells<T: Scalar>(coords: &[T], h: usize, wd: usize) -> Vec<BilinearCell> {
    let hw = h * wd;
    (0..hw)
        .map(|i| {
            let u = coords[i].to_f64_c();
            let v = coords[hw + i].to_f64_c();
            let r0 = u.floor();
            let c0 = v.floor();
            BilinearCell {
                r0: r0 as isize,
                c0: c0 as isize,
                fr: u - r0,
                fc: v - c0,
            }
        })
        .collect()
}

#[inline]
fn read_zero_pad<T: Scalar>(plane: &[T], h: usize, wd: usize, r: isize, c: isize) -> T {
    if r < 0 || c < 0 || r >= h as isize || c >= wd as isize {
        T::zero()
    } else {
        plane[r as usize * wd + c as usize]
    }
}

fn bilinear_forward<T: Scalar>(x: &[T], coords: &[T], ch: usize, h: usize, wd: usize) -> Vec<T> {
    let hw = h * wd;
    let cells = bilinear_cells(coords, h, wd);
    let mut out = vec![T::zero(); ch * hw];
    out.par_chunks_mut(hw).enumerate().for_each(|(c, dst)| {
        let plane = &x[c * hw..(c + 1) * hw];
        for (i, cell) in cells.iter().enumerate() {
            let (fr, fc) = (T::of(cell.fr), T::of(cell.fc));
            let one = T::one();
            let x00 = read_zero_pad(plane, h, wd, cell.r0, cell.c0);
            let x01 = read_zero_pad(plane, h, wd, cell.r0, cell.c0 + 1);
            let x10 = read_zero_pad(plane, h, wd, cell.r0 + 1, cell.c0);
            let x11 = read_zero_pad(plane, h, wd, cell.r0 + 1, cell.c0 + 1);
            dst[i] = (one - fr) * ((one - fc) * x00 + fc * x01)
                + fr * ((one - fc) * x10 + fc * x11);
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn bilinear_backward<T: Scalar>(
    x: &[T],
    coords: &[T],
    g: &[T],
    ch: usize,
    h: usize,
    wd: usize,
    want_gx: bool,
    want_gc: bool,
) -> (Vec<T>, Vec<T>) {
    let hw = h * wd;
    let cells = bilinear_cells(coords, h, wd);
    let mut gx = vec![T::zero(); if want_gx { ch * hw } else { 0 }];
    let mut gc = vec![T::zero(); if want_gc { 2 * hw } else { 0 }];
    let scatter = |buf: &mut [T], r: isize, c: isize, v: T| {
        if r >= 0 && c >= 0 && r < h as isize && c < wd as isize {
            buf[r as usize * wd + c as usize] += v;
        }
    };
    for c in 0..ch {
        let plane = &x[c * hw..(c + 1) * hw];
        let gplane = &g[c * hw..(c + 1) * hw];
        for (i, cell) in cells.iter().enumerate() {
            let gv = gplane[i];
            if gv == T::zero() {
                continue;
            }
            let (fr, fc) = (T::of(cell.fr), T::of(cell.fc));
            let one = T::one();
            if want_gx {
                let gplane_x = &mut gx[c * hw..(c + 1) * hw];
                scatter(gplane_x, cell.r0, cell.c0, gv * (one - fr) * (one - fc));
                scatter(gplane_x, cell.r0, cell.c0 + 1, gv * (one - fr) * fc);
                scatter(gplane_x, cell.r0 + 1, cell.c0, gv * fr * (one - fc));
                scatter(gplane_x, cell.r0 + 1, cell.c0 + 1, gv * fr * fc);
            }
            if want_gc {
                let x00 = read_zero_pad(plane, h, wd, cell.r0, cell.c0);
                let x01 = read_zero_pad(plane, h, wd, cell.r0, cell.c0 + 1);
                let x10 = read_zero_pad(plane, h, wd, cell.r0 + 1, cell.c0);
                let x11 = read_zero_pad(plane, h, wd, cell.r0 + 1, cell.c0 + 1);
                // d/d(row frac) and d/d(col frac) of the bilinear blend
                let dfr = (one - fc) * (x10 - x00) + fc * (x11 - x01);
                let dfc = (one - fr) * (x01 - x00) + fr * (x11 - x10);
                gc[i] += gv * dfr;
                gc[hw + i] += gv * dfc;
            }
        }
    }
    (gx, gc)
}

// ---- small MLP ------------------------------------------------------------

/// One dense layer of [`mlp_forward`].
#[derive(Clone, Copy)]
pub struct MlpLayer {
    pub weight: Value,
    pub bias: Value,
    pub activation: Activation,
}

/// Runs a rank-1 input through dense layers with optional activations.
pub fn mlp_forward<T: Scalar>(tape: &Tape<T>, x: Value, layers: &[MlpLayer]) -> Result<Value> {
    let mut cur = x;
    for layer in layers {
        cur = tape.linear1d(cur, layer.weight, layer.bias)?;
        cur = match layer.activation {
            Activation::Relu => tape.relu(cur),
            Activation::Tanh => tape.tanh(cur),
            Activation::None => cur,
        };
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_values() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2], &[1.0, 2.0]), false);
        let b = tape.leaf(t64(&[2], &[3.0, 4.0]), false);
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn square_grad_at_three() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.square(x);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(x).unwrap().data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn broadcast_mul_grad_wrt_scalar() {
        // mul broadcast [2,2] x scalar 0.5: grad wrt scalar = sum of input
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let s = tape.leaf(Tensor::scalar(0.5), true);
        let y = tape.mul(a, s).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(s).unwrap().data()[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn div_by_zero_flags_backward() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(1.0), true);
        let b = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.div(a, b).unwrap();
        assert!(tape.value(y).data()[0].is_infinite());
        let loss = tape.sum_all(y);
        assert!(matches!(tape.backward(loss), Err(Error::Numeric(_))));
    }

    #[test]
    fn second_backward_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.square(x);
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::State(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[4]), false);
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]), false);
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0; // center tap
        let w = tape.leaf(w, false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let y = tape.conv2d(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_all_ones_on_constant() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 5, 5], 2.0), false);
        let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let y = tape.conv2d(x, w, b).unwrap();
        // interior pixel: 9 * v
        assert!((tape.value(y).data()[2 * 5 + 2] - 18.0).abs() < 1e-12);
    }

    #[test]
    fn conv_channel_mismatch() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 4, 4]), false);
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        assert!(tape.conv2d(x, w, b).is_err());
    }

    #[test]
    fn bilinear_integer_and_midpoint() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]), false);
        // integer lattice: gather
        let coords = tape.leaf(t64(&[2, 2, 2], &[0., 0., 1., 1., 0., 1., 0., 1.]), false);
        let y = tape.bilinear_sample(x, coords).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 2.0, 3.0]);
        // midpoint of the four pixels {0,1,2,3} -> 1.5
        let mid = tape.leaf(Tensor::full(&[2, 2, 2], 0.5), false);
        let ym = tape.bilinear_sample(x, mid).unwrap();
        for &v in tape.value(ym).data() {
            assert!((v - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_out_of_bounds_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 2], 5.0), false);
        let coords = tape.leaf(Tensor::full(&[2, 2, 2], 10.0), false);
        let y = tape.bilinear_sample(x, coords).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_identity_and_relu() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[-1.0, 2.0]), false);
        let w = tape.leaf(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        let ident = mlp_forward(
            &tape,
            x,
            &[MlpLayer {
                weight: w,
                bias: b,
                activation: Activation::None,
            }],
        )
        .unwrap();
        assert_eq!(tape.value(ident).data(), &[-1.0, 2.0]);
        let relu = mlp_forward(
            &tape,
            x,
            &[MlpLayer {
                weight: w,
                bias: b,
                activation: Activation::Relu,
            }],
        )
        .unwrap();
        assert_eq!(tape.value(relu).data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax0_normalizes() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2, 2], &[0.0, 10.0, 1.0, -5.0]), false);
        let y = tape.softmax0(x).unwrap();
        let d = tape.value(y);
        assert!((d.data()[0] + d.data()[2] - 1.0).abs() < 1e-12);
        assert!((d.data()[1] + d.data()[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fft2_of_ones_concentrates_dc() {
        let tape = Tape::<f64>::new();
        let mut planes = Tensor::<f64>::zeros(&[2, 4, 4]);
        for i in 0..16 {
            planes.data_mut()[i] = 1.0;
        }
        let v = tape.leaf(planes, false);
        let f = tape.fft2(v, false).unwrap();
        let d = tape.value(f);
        assert!((d.data()[0] - 4.0).abs() < 1e-12);
        let rest: f64 = d.data()[1..].iter().map(|x| x.abs()).sum();
        assert!(rest < 1e-10);
    }

    #[test]
    fn fft2_rejects_non_power_of_two() {
        let tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::zeros(&[2, 3, 4]), false);
        assert!(tape.fft2(v, false).is_err());
    }

    #[test]
    fn diff_ops_shapes_and_values() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2, 3], &[0., 1., 3., 2., 2., 0.]), false);
        let dx = tape.diff_x(x).unwrap();
        assert_eq!(tape.value(dx).data(), &[1., 2., 0., 0., -2., 0.]);
        let dy = tape.diff_y(x).unwrap();
        assert_eq!(tape.value(dy).data(), &[2., 1., -3., 0., 0., 0.]);
    }
}
