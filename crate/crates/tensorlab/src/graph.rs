//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape: every op pushes a node holding its
//! value and enough of its inputs to replay the vector-Jacobian product.
//! Build a fresh graph for every forward pass.

use std::collections::HashMap;
use std::sync::Arc;

use crate::conv::{self, ConvGeom};
use crate::error::{Result, TensorError};
use crate::norm::{self, GroupStats};
use crate::param::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Clamp(Var, f64, f64),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    ChannelMean(Var),
    ChannelVar(Var),
    Sum(Var),
    Mean(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Narrow(Var, usize),
    Upsample(Var),
    Conv3d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: GroupStats,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    grad: Option<Tensor<T>>,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.shared(name)?;
        let requires_grad = !store.is_frozen();
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
            param: Some(name.to_string()),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros if none reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    /// `(name, grad)` for every parameter leaf that received a gradient.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.nodes.iter().filter_map(|n| match (&n.param, &n.grad) {
            (Some(name), Some(g)) => Some((name.as_str(), g)),
            _ => None,
        })
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        record: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::shape(op, va.shape(), vb.shape()));
        }
        let out = va.zip_map(vb, f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, record(a, b), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let st = T::lit(s);
        self.unary(a, |x| x * st, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let st = T::lit(s);
        self.unary(a, |x| x + st, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.recip(), Op::Recip(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x / (T::one() + (-x).exp()), Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::lit(lo), T::lit(hi));
        self.unary(a, |x| x.max(l).min(h), Op::Clamp(a, lo, hi))
    }

    fn per_channel(&self, op: &'static str, x: Var, v: Var) -> Result<()> {
        let c = self.value(x).channels();
        if self.shape(v) != [c] {
            return Err(TensorError::shape(op, &[c], self.shape(v)));
        }
        Ok(())
    }

    /// `x[c, ...] + v[c]`
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        self.per_channel("add_channel", x, v)?;
        let mut out = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for (c, b) in vv.into_iter().enumerate() {
            out.channel_mut(c).iter_mut().for_each(|o| *o += b);
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(out, Op::AddChannel(x, v), rg))
    }

    /// `x[c, ...] * v[c]`
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        self.per_channel("mul_channel", x, v)?;
        let mut out = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for (c, s) in vv.into_iter().enumerate() {
            out.channel_mut(c).iter_mut().for_each(|o| *o *= s);
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(out, Op::MulChannel(x, v), rg))
    }

    /// Mean over everything but axis 0, shape `[c]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(&[t.channels()], |c| T::lit(channel_mean(t.channel(c))));
        let rg = self.rg(x);
        self.push(out, Op::ChannelMean(x), rg)
    }

    /// Population variance over everything but axis 0, shape `[c]`.
    pub fn channel_var(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(&[t.channels()], |c| {
            let ch = t.channel(c);
            let m = channel_mean(ch);
            T::lit(ch.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / ch.len() as f64)
        });
        let rg = self.rg(x);
        self.push(out, Op::ChannelVar(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(T::lit(self.value(x).sum_f64()));
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(T::lit(self.value(x).mean_f64()));
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            out.data_mut(),
            (n as isize, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = transpose2(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().expect("rank >= 1");
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += v.as_f64();
            }
            let inv = T::lit(1.0 / total);
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "nothing to concatenate"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(TensorError::shape("concat", &tail, &t.shape()[1..]));
            }
            channels += t.channels();
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![channels];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `start..start + len` along axis 0.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if len == 0 || start + len > t.channels() {
            return Err(TensorError::invalid(
                "narrow",
                format!("range {start}..{} exceeds {} channels", start + len, t.channels()),
            ));
        }
        let m = t.channel_len();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(&shape, t.data()[start * m..(start + len) * m].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Narrow(a, start), rg))
    }

    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let out = conv::upsample2_forward(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Upsample(a), rg))
    }

    /// Cross-correlation of `[c_in, w, h, d]` with `[c_out, c_in, k, k, k]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = conv::conv3d_forward(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let rg = self.rg(x) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv3d {
                x,
                kernel,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Group normalization with per-channel affine `gamma`, `beta`.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let (out, stats) = norm::group_norm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            groups,
            eps,
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Mean absolute difference.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let ab = self.abs(d);
        Ok(self.mean(ab))
    }

    /// Runs the reverse sweep from a scalar `loss`, adding into every
    /// reachable node's gradient. Calling twice without rebuilding doubles
    /// the gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&shape));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => acc.add_assign(&g)?,
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match grads[v.0].as_mut() {
            Some(acc) => acc.add_assign(&g)?,
            None => grads[v.0] = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &*node.value;
        let val = |v: Var| &*self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone())?;
                self.send(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone())?;
                self.send(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.send(grads, *a, g.mul(val(*b))?)?;
                }
                if self.rg(*b) {
                    self.send(grads, *b, g.mul(val(*a))?)?;
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                if self.rg(*a) {
                    self.send(grads, *a, g.zip_map(vb, |gv, bv| gv / bv)?)?;
                }
                if self.rg(*b) {
                    let t = g.mul(out)?.zip_map(vb, |x, bv| -x / bv)?;
                    self.send(grads, *b, t)?;
                }
            }
            Op::Scale(a, s) => self.send(grads, *a, g.scale(*s))?,
            Op::AddScalar(a) => self.send(grads, *a, g.clone())?,
            Op::Square(a) => {
                let two = T::lit(2.0);
                self.send(grads, *a, g.zip_map(val(*a), |gv, x| two * x * gv)?)?;
            }
            Op::Sqrt(a) => {
                let half = T::lit(0.5);
                self.send(grads, *a, g.zip_map(out, |gv, y| half * gv / y)?)?;
            }
            Op::Abs(a) => {
                let t = g.zip_map(val(*a), |gv, x| {
                    if x > T::zero() {
                        gv
                    } else if x < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })?;
                self.send(grads, *a, t)?;
            }
            Op::Exp(a) => self.send(grads, *a, g.mul(out)?)?,
            Op::Log(a) => self.send(grads, *a, g.zip_map(val(*a), |gv, x| gv / x)?)?,
            Op::Recip(a) => self.send(grads, *a, g.zip_map(out, |gv, y| -gv * y * y)?)?,
            Op::Silu(a) => {
                let t = g.zip_map(val(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (T::one() + x * (T::one() - s))
                })?;
                self.send(grads, *a, t)?;
            }
            Op::Sigmoid(a) => {
                self.send(grads, *a, g.zip_map(out, |gv, y| gv * y * (T::one() - y))?)?
            }
            Op::Tanh(a) => self.send(grads, *a, g.zip_map(out, |gv, y| gv * (T::one() - y * y))?)?,
            Op::Clamp(a, lo, hi) => {
                let (l, h) = (T::lit(*lo), T::lit(*hi));
                let t = g.zip_map(val(*a), |gv, x| if x >= l && x <= h { gv } else { T::zero() })?;
                self.send(grads, *a, t)?;
            }
            Op::AddChannel(x, v) => {
                self.send(grads, *x, g.clone())?;
                if self.rg(*v) {
                    let t = Tensor::from_fn(&[g.channels()], |c| T::lit(sum64(g.channel(c))));
                    self.send(grads, *v, t)?;
                }
            }
            Op::MulChannel(x, v) => {
                let (vx, vv) = (val(*x), val(*v));
                if self.rg(*x) {
                    let mut t = g.clone();
                    for c in 0..t.channels() {
                        let s = vv.data()[c];
                        t.channel_mut(c).iter_mut().for_each(|e| *e *= s);
                    }
                    self.send(grads, *x, t)?;
                }
                if self.rg(*v) {
                    let t = Tensor::from_fn(&[g.channels()], |c| {
                        T::lit(dot64(g.channel(c), vx.channel(c)))
                    });
                    self.send(grads, *v, t)?;
                }
            }
            Op::ChannelMean(x) => {
                let vx = val(*x);
                let m = vx.channel_len();
                let mut t = Tensor::zeros(vx.shape());
                for c in 0..vx.channels() {
                    let s = g.data()[c] / T::lit(m as f64);
                    t.channel_mut(c).fill(s);
                }
                self.send(grads, *x, t)?;
            }
            Op::ChannelVar(x) => {
                let vx = val(*x);
                let m = vx.channel_len();
                let mut t = Tensor::zeros(vx.shape());
                for c in 0..vx.channels() {
                    let mean = channel_mean(vx.channel(c));
                    let s = g.data()[c].as_f64() * 2.0 / m as f64;
                    for (o, &xv) in t.channel_mut(c).iter_mut().zip(vx.channel(c)) {
                        *o = T::lit(s * (xv.as_f64() - mean));
                    }
                }
                self.send(grads, *x, t)?;
            }
            Op::Sum(x) => self.send(grads, *x, Tensor::full(self.shape(*x), g.item()))?,
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                self.send(grads, *x, Tensor::full(self.shape(*x), g.item() / T::lit(n)))?;
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(va.shape());
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        (n as isize, 1),
                        vb.data(),
                        (1, n as isize),
                        T::zero(),
                        ga.data_mut(),
                        (k as isize, 1),
                    );
                    self.send(grads, *a, ga)?;
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(vb.shape());
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        va.data(),
                        (1, k as isize),
                        g.data(),
                        (n as isize, 1),
                        T::zero(),
                        gb.data_mut(),
                        (n as isize, 1),
                    );
                    self.send(grads, *b, gb)?;
                }
            }
            Op::Transpose(a) => self.send(grads, *a, transpose2(g)?)?,
            Op::Softmax(a) => {
                let n = *out.shape().last().expect("rank >= 1");
                let mut t = g.clone();
                for (trow, yrow) in t.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let d = T::lit(dot64(trow, yrow));
                    for (tv, &y) in trow.iter_mut().zip(yrow) {
                        *tv = y * (*tv - d);
                    }
                }
                self.send(grads, *a, t)?;
            }
            Op::Reshape(a) => self.send(grads, *a, g.clone().reshape(self.shape(*a))?)?,
            Op::Concat(parts) => {
                let m = g.channel_len();
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p);
                    let len = shape[0] * m;
                    if self.rg(p) {
                        let t = Tensor::new(shape, g.data()[offset..offset + len].to_vec())?;
                        self.send(grads, p, t)?;
                    }
                    offset += len;
                }
            }
            Op::Narrow(a, start) => {
                let mut t = Tensor::zeros(self.shape(*a));
                let m = t.channel_len();
                t.data_mut()[start * m..start * m + g.numel()].copy_from_slice(g.data());
                self.send(grads, *a, t)?;
            }
            Op::Upsample(a) => {
                self.send(grads, *a, conv::upsample2_backward(g, self.shape(*a)))?;
            }
            Op::Conv3d {
                x,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let want_b = bias.is_some_and(|b| self.rg(b));
                let cg = conv::conv3d_backward(
                    val(*x),
                    val(*kernel),
                    g,
                    *stride,
                    *pad,
                    [self.rg(*x), self.rg(*kernel), want_b],
                )?;
                if let Some(t) = cg.input {
                    self.send(grads, *x, t)?;
                }
                if let Some(t) = cg.kernel {
                    self.send(grads, *kernel, t)?;
                }
                if let (Some(b), Some(t)) = (bias, cg.bias) {
                    self.send(grads, *b, t)?;
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (dx, dg, db) = norm::group_norm_backward(val(*x), val(*gamma), stats, g);
                self.send(grads, *x, dx)?;
                self.send(grads, *gamma, dg)?;
                self.send(grads, *beta, db)?;
            }
        }
        Ok(())
    }
}

/// Output geometry of a convolution, without running it.
pub fn conv_out_shape(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<[usize; 4]> {
    Ok(ConvGeom::new(input, kernel, stride, pad)?.out_shape())
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn sum64<T: Real>(xs: &[T]) -> f64 {
    xs.iter().map(|v| v.as_f64()).sum()
}

fn dot64<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

fn channel_mean<T: Real>(xs: &[T]) -> f64 {
    sum64(xs) / xs.len() as f64
}

fn transpose2<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    if t.rank() != 2 {
        return Err(TensorError::invalid(
            "transpose",
            format!("expected rank 2, got {:?}", t.shape()),
        ));
    }
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let src = t.data();
    Ok(Tensor::from_fn(&[c, r], |i| src[(i % r) * c + i / r]))
}
