//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] on a scalar walks the tape in reverse. Nodes created
//! with [`Graph::constant`] (and everything computed only from constants)
//! never receive gradients, which is how frozen networks are evaluated.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{col2im, gemm, im2col, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ReflectPad {
        x: Var,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape(Var),
    GlobalAvgPool(Var),
    AvgPool {
        x: Var,
        factor: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Concat(Vec<Var>),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
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

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let needs = self.needs(&[x]);
        self.push(out, op, needs)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            if va.shape() != vb.shape() {
                return shape_err(format!(
                    "elementwise operands {:?} and {:?}",
                    va.shape(),
                    vb.shape()
                ));
            }
            va.zip_map(&vb, f)
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, op, needs))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = self.value(x).mean();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Sum over every axis but the leading one: `[N, ...] -> [N]`.
    pub fn sum_rows(&self, x: Var) -> Var {
        let out = {
            let v = self.value(x);
            let n = v.shape().first().copied().unwrap_or(1);
            let inner = v.len() / n.max(1);
            let data = v.data().chunks(inner.max(1)).map(|c| c.iter().sum()).collect();
            Tensor::new(vec![n], data).expect("row sums")
        };
        let needs = self.needs(&[x]);
        self.push(out, Op::SumRows(x), needs)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Rows `indices` of the leading axis, in order (repeats allowed).
    pub fn gather(&self, x: Var, indices: &[usize]) -> Result<Var> {
        let out = {
            let v = self.value(x);
            let n = v.shape()[0];
            let inner = v.len() / n;
            let mut data = Vec::with_capacity(indices.len() * inner);
            for &i in indices {
                if i >= n {
                    return shape_err(format!("gather index {i} out of {n} rows"));
                }
                data.extend_from_slice(&v.data()[i * inner..(i + 1) * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[0] = indices.len();
            Tensor::new(shape, data)?
        };
        let needs = self.needs(&[x]);
        Ok(self.push(
            out,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Concatenate along the leading axis.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let vals: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
            Tensor::stack(&vals)?
        };
        let needs = self.needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), needs))
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            let (n, c, h, wd) = xv.dims4()?;
            let (cout, cin, kh, kw) = wv.dims4()?;
            if cin != c {
                return shape_err(format!("conv2d input has {c} channels, kernel expects {cin}"));
            }
            if h + 2 * pad < kh || wd + 2 * pad < kw {
                return shape_err(format!("conv2d input {h}x{wd} smaller than kernel {kh}x{kw}"));
            }
            let g = ConvGeometry {
                channels: c,
                height: h,
                width: wd,
                kernel_h: kh,
                kernel_w: kw,
                stride,
                pad,
            };
            let (ho, wo) = (g.out_height(), g.out_width());
            let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
            let mut out = Tensor::zeros(&[n, cout, ho, wo]);
            let plane = cout * ho * wo;
            for i in 0..n {
                im2col(&xv.data()[i * c * h * wd..(i + 1) * c * h * wd], &g, &mut cols);
                let dst = &mut out.data_mut()[i * plane..(i + 1) * plane];
                gemm(cout, g.col_rows(), ho * wo, wv.data(), false, &cols, false, dst, 1.0, 0.0);
            }
            if let Some(b) = b {
                add_channel_bias(&mut out, &self.value(b))?;
            }
            out
        };
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.needs(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// Fractionally strided convolution. `w` is laid out `[Cin, Cout, kh, kw]`;
    /// output side is `(H - 1) * stride - 2 * pad + k + output_pad`.
    pub fn conv_transpose2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            let (n, c, h, wd) = xv.dims4()?;
            let (cin, cout, kh, kw) = wv.dims4()?;
            if cin != c {
                return shape_err(format!(
                    "conv_transpose2d input has {c} channels, kernel expects {cin}"
                ));
            }
            if output_pad >= stride {
                return shape_err("output padding must be smaller than stride".into());
            }
            let ho = (h - 1) * stride + kh + output_pad - 2 * pad;
            let wo = (wd - 1) * stride + kw + output_pad - 2 * pad;
            let g = ConvGeometry {
                channels: cout,
                height: ho,
                width: wo,
                kernel_h: kh,
                kernel_w: kw,
                stride,
                pad,
            };
            debug_assert_eq!(g.out_height(), h);
            let mut cols = vec![0.0; g.col_rows() * h * wd];
            let mut out = Tensor::zeros(&[n, cout, ho, wo]);
            let plane = cout * ho * wo;
            for i in 0..n {
                let xi = &xv.data()[i * c * h * wd..(i + 1) * c * h * wd];
                gemm(g.col_rows(), c, h * wd, wv.data(), true, xi, false, &mut cols, 1.0, 0.0);
                col2im(&cols, &g, &mut out.data_mut()[i * plane..(i + 1) * plane]);
            }
            if let Some(b) = b {
                add_channel_bias(&mut out, &self.value(b))?;
            }
            out
        };
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.needs(&deps);
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        ))
    }

    pub fn reflect_pad(&self, x: Var, pad: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4()?;
            if pad >= h || pad >= w {
                return shape_err(format!("reflection pad {pad} too large for {h}x{w}"));
            }
            let (ho, wo) = (h + 2 * pad, w + 2 * pad);
            let mut out = Tensor::zeros(&[n, c, ho, wo]);
            let src = xv.data();
            let dst = out.data_mut();
            for p in 0..n * c {
                for y in 0..ho {
                    let sy = reflect(y as isize - pad as isize, h);
                    for xx in 0..wo {
                        let sx = reflect(xx as isize - pad as isize, w);
                        dst[p * ho * wo + y * wo + xx] = src[p * h * w + sy * w + sx];
                    }
                }
            }
            out
        };
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::ReflectPad { x, pad }, needs))
    }

    /// Per-sample, per-channel normalization to zero mean and unit variance.
    pub fn instance_norm(&self, x: Var, eps: f64) -> Result<Var> {
        let (out, inv_std) = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4()?;
            let hw = h * w;
            let mut out = xv.clone();
            let mut inv_std = Vec::with_capacity(n * c);
            for plane in out.data_mut().chunks_mut(hw) {
                let mean = plane.iter().sum::<f64>() / hw as f64;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
                let inv = 1.0 / (var + eps).sqrt();
                plane.iter_mut().for_each(|v| *v = (*v - mean) * inv);
                inv_std.push(inv);
            }
            debug_assert_eq!(inv_std.len(), n * c);
            (out, inv_std)
        };
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::InstanceNorm { x, inv_std }, needs))
    }

    /// `x [N, in] * w^T [in, out] + b`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            let (n, fin) = match xv.shape() {
                [n, f] => (*n, *f),
                s => return shape_err(format!("linear input must be 2-d, got {s:?}")),
            };
            let (fout, win) = match wv.shape() {
                [o, i] => (*o, *i),
                s => return shape_err(format!("linear weight must be 2-d, got {s:?}")),
            };
            if win != fin {
                return shape_err(format!("linear expects {win} features, got {fin}"));
            }
            let mut out = Tensor::zeros(&[n, fout]);
            gemm(n, fin, fout, xv.data(), false, wv.data(), true, out.data_mut(), 1.0, 0.0);
            if let Some(b) = b {
                let bv = self.value(b);
                if bv.shape() != [fout] {
                    return shape_err(format!("linear bias {:?} for {fout} outputs", bv.shape()));
                }
                for row in out.data_mut().chunks_mut(fout) {
                    row.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
                }
            }
            out
        };
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.needs(&deps);
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4()?;
            let data = xv
                .data()
                .chunks(h * w)
                .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
                .collect();
            Tensor::new(vec![n, c], data)?
        };
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), needs))
    }

    /// Non-overlapping `factor x factor` box downsampling.
    pub fn avg_pool(&self, x: Var, factor: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4()?;
            if factor == 0 || h % factor != 0 || w % factor != 0 {
                return shape_err(format!("cannot pool {h}x{w} by {factor}"));
            }
            let (ho, wo) = (h / factor, w / factor);
            let norm = 1.0 / (factor * factor) as f64;
            let mut out = Tensor::zeros(&[n, c, ho, wo]);
            let src = xv.data();
            let dst = out.data_mut();
            for p in 0..n * c {
                for y in 0..h {
                    for xx in 0..w {
                        dst[p * ho * wo + (y / factor) * wo + xx / factor] +=
                            src[p * h * w + y * w + xx] * norm;
                    }
                }
            }
            out
        };
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::AvgPool { x, factor }, needs))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&self, x: Var) -> Result<Var> {
        let (out, argmax) = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4()?;
            let (ho, wo) = (h / 2, w / 2);
            if ho == 0 || wo == 0 {
                return shape_err(format!("cannot max-pool {h}x{w}"));
            }
            let src = xv.data();
            let mut out = Tensor::zeros(&[n, c, ho, wo]);
            let mut argmax = Vec::with_capacity(n * c * ho * wo);
            let dst = out.data_mut();
            for p in 0..n * c {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut best = p * h * w + 2 * y * w + 2 * xx;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let k = p * h * w + (2 * y + dy) * w + 2 * xx + dx;
                            if src[k] > src[best] {
                                best = k;
                            }
                        }
                        dst[p * ho * wo + y * wo + xx] = src[best];
                        argmax.push(best);
                    }
                }
            }
            (out, argmax)
        };
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, needs))
    }

    /// Scale each row of `[N, D]` to unit Euclidean length.
    pub fn l2_normalize_rows(&self, x: Var) -> Result<Var> {
        let (out, norms) = {
            let xv = self.value(x);
            let d = match xv.shape() {
                [_, d] => *d,
                s => return shape_err(format!("row normalization needs 2-d input, got {s:?}")),
            };
            let mut out = xv.clone();
            let mut norms = Vec::new();
            for row in out.data_mut().chunks_mut(d) {
                let norm = (row.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
                row.iter_mut().for_each(|v| *v /= norm);
                norms.push(norm);
            }
            (out, norms)
        };
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, needs))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return shape_err(format!(
                "backward needs a scalar, got {:?}",
                nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let mut acc = |v: Var, t: Tensor| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(g) => g.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            let wants = |v: Var| nodes[v.0].needs_grad;
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gout);
                    continue;
                }
                Op::Relu(x) => acc(*x, gout.zip_map(val(*x), |g, v| if v > 0.0 { g } else { 0.0 })),
                Op::LeakyRelu(x, s) => acc(
                    *x,
                    gout.zip_map(val(*x), |g, v| if v > 0.0 { g } else { g * s }),
                ),
                Op::Tanh(x) => acc(*x, gout.zip_map(y, |g, t| g * (1.0 - t * t))),
                Op::Sigmoid(x) => acc(*x, gout.zip_map(y, |g, s| g * s * (1.0 - s))),
                Op::Softplus(x) => acc(*x, gout.zip_map(val(*x), |g, v| g * sigmoid(v))),
                Op::Abs(x) => acc(*x, gout.zip_map(val(*x), |g, v| g * sign(v))),
                Op::Square(x) => acc(*x, gout.zip_map(val(*x), |g, v| 2.0 * g * v)),
                Op::Scale(x, c) => acc(*x, gout.map(|g| g * c)),
                Op::AddScalar(x) | Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    acc(*x, gout.reshape(&shape)?)
                }
                Op::Add(a, b) => {
                    if wants(*b) {
                        acc(*b, gout.clone());
                    }
                    acc(*a, gout);
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        acc(*b, gout.map(|g| -g));
                    }
                    acc(*a, gout);
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc(*a, gout.zip_map(val(*b), |g, v| g * v));
                    }
                    if wants(*b) {
                        acc(*b, gout.zip_map(val(*a), |g, v| g * v));
                    }
                }
                Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), gout.item())),
                Op::Mean(x) => {
                    let n = val(*x).len() as f64;
                    acc(*x, Tensor::full(val(*x).shape(), gout.item() / n))
                }
                Op::SumRows(x) => {
                    let xv = val(*x);
                    let inner = xv.len() / gout.len().max(1);
                    acc(*x, Tensor::from_fn(xv.shape(), |k| gout.data()[k / inner]))
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut gx = Tensor::zeros(val(*x).shape());
                    for (g, &k) in gout.data().iter().zip(argmax) {
                        gx.data_mut()[k] += g;
                    }
                    acc(*x, gx)
                }
                Op::Gather { x, indices } => {
                    let xv = val(*x);
                    let inner = xv.len() / xv.shape()[0];
                    let mut gx = Tensor::zeros(xv.shape());
                    for (row, &src) in indices.iter().enumerate() {
                        let dst = &mut gx.data_mut()[src * inner..(src + 1) * inner];
                        let g = &gout.data()[row * inner..(row + 1) * inner];
                        dst.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                    acc(*x, gx)
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).len();
                        if wants(p) {
                            let t = Tensor::new(
                                val(p).shape().to_vec(),
                                gout.data()[offset..offset + n].to_vec(),
                            )?;
                            acc(p, t);
                        }
                        offset += n;
                    }
                }
                Op::ReflectPad { x, pad } => {
                    let xv = val(*x);
                    let (n, c, h, w) = xv.dims4()?;
                    let (ho, wo) = (h + 2 * pad, w + 2 * pad);
                    let mut gx = Tensor::zeros(xv.shape());
                    let dst = gx.data_mut();
                    for p in 0..n * c {
                        for yy in 0..ho {
                            let sy = reflect(yy as isize - *pad as isize, h);
                            for xx in 0..wo {
                                let sx = reflect(xx as isize - *pad as isize, w);
                                dst[p * h * w + sy * w + sx] += gout.data()[p * ho * wo + yy * wo + xx];
                            }
                        }
                    }
                    acc(*x, gx)
                }
                Op::InstanceNorm { x, inv_std } => {
                    let (_, _, h, w) = y.dims4()?;
                    let hw = (h * w) as f64;
                    let mut gx = Tensor::zeros(y.shape());
                    let planes = gx
                        .data_mut()
                        .chunks_mut(h * w)
                        .zip(gout.data().chunks(h * w))
                        .zip(y.data().chunks(h * w))
                        .zip(inv_std);
                    for (((dx, dy), yn), inv) in planes {
                        let mean_dy = dy.iter().sum::<f64>() / hw;
                        let mean_dy_y = dy.iter().zip(yn).map(|(a, b)| a * b).sum::<f64>() / hw;
                        for k in 0..dx.len() {
                            dx[k] = inv * (dy[k] - mean_dy - yn[k] * mean_dy_y);
                        }
                    }
                    acc(*x, gx)
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let xv = val(*x);
                    let wv = val(*w);
                    let (n, c, h, wd) = xv.dims4()?;
                    let (cout, _, kh, kw) = wv.dims4()?;
                    let g = ConvGeometry {
                        channels: c,
                        height: h,
                        width: wd,
                        kernel_h: kh,
                        kernel_w: kw,
                        stride: *stride,
                        pad: *pad,
                    };
                    let (k, hw) = (g.col_rows(), g.col_cols());
                    let mut cols = vec![0.0; k * hw];
                    let mut dcols = vec![0.0; k * hw];
                    let mut gw = Tensor::zeros(wv.shape());
                    let mut gx = Tensor::zeros(xv.shape());
                    let (need_x, need_w) = (wants(*x), wants(*w));
                    let img = c * h * wd;
                    for i in 0..n {
                        let dy = &gout.data()[i * cout * hw..(i + 1) * cout * hw];
                        if need_w {
                            im2col(&xv.data()[i * img..(i + 1) * img], &g, &mut cols);
                            gemm(cout, hw, k, dy, false, &cols, true, gw.data_mut(), 1.0, 1.0);
                        }
                        if need_x {
                            gemm(k, cout, hw, wv.data(), true, dy, false, &mut dcols, 1.0, 0.0);
                            col2im(&dcols, &g, &mut gx.data_mut()[i * img..(i + 1) * img]);
                        }
                    }
                    if let Some(b) = b {
                        if wants(*b) {
                            acc(*b, channel_sums(&gout)?);
                        }
                    }
                    if need_w {
                        acc(*w, gw);
                    }
                    if need_x {
                        acc(*x, gx);
                    }
                }
                Op::ConvTranspose2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let xv = val(*x);
                    let wv = val(*w);
                    let (n, c, h, wd) = xv.dims4()?;
                    let (_, cout, kh, kw) = wv.dims4()?;
                    let (_, _, ho, wo) = y.dims4()?;
                    let g = ConvGeometry {
                        channels: cout,
                        height: ho,
                        width: wo,
                        kernel_h: kh,
                        kernel_w: kw,
                        stride: *stride,
                        pad: *pad,
                    };
                    let (k, hw) = (g.col_rows(), h * wd);
                    let mut dcols = vec![0.0; k * hw];
                    let mut gw = Tensor::zeros(wv.shape());
                    let mut gx = Tensor::zeros(xv.shape());
                    let (need_x, need_w) = (wants(*x), wants(*w));
                    let (img_in, img_out) = (c * hw, cout * ho * wo);
                    for i in 0..n {
                        im2col(&gout.data()[i * img_out..(i + 1) * img_out], &g, &mut dcols);
                        if need_x {
                            let dst = &mut gx.data_mut()[i * img_in..(i + 1) * img_in];
                            gemm(c, k, hw, wv.data(), false, &dcols, false, dst, 1.0, 0.0);
                        }
                        if need_w {
                            let xi = &xv.data()[i * img_in..(i + 1) * img_in];
                            gemm(c, hw, k, xi, false, &dcols, true, gw.data_mut(), 1.0, 1.0);
                        }
                    }
                    if let Some(b) = b {
                        if wants(*b) {
                            acc(*b, channel_sums(&gout)?);
                        }
                    }
                    if need_w {
                        acc(*w, gw);
                    }
                    if need_x {
                        acc(*x, gx);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = val(*x);
                    let wv = val(*w);
                    let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                    let fout = wv.shape()[0];
                    if wants(*x) {
                        let mut gx = Tensor::zeros(xv.shape());
                        gemm(n, fout, fin, gout.data(), false, wv.data(), false, gx.data_mut(), 1.0, 0.0);
                        acc(*x, gx);
                    }
                    if wants(*w) {
                        let mut gw = Tensor::zeros(wv.shape());
                        gemm(fout, n, fin, gout.data(), true, xv.data(), false, gw.data_mut(), 1.0, 0.0);
                        acc(*w, gw);
                    }
                    if let Some(b) = b {
                        if wants(*b) {
                            let mut gb = Tensor::zeros(&[fout]);
                            for row in gout.data().chunks(fout) {
                                gb.data_mut().iter_mut().zip(row).for_each(|(s, g)| *s += g);
                            }
                            acc(*b, gb);
                        }
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let xv = val(*x);
                    let (_, _, h, w) = xv.dims4()?;
                    let hw = h * w;
                    acc(
                        *x,
                        Tensor::from_fn(xv.shape(), |k| gout.data()[k / hw] / hw as f64),
                    )
                }
                Op::AvgPool { x, factor } => {
                    let xv = val(*x);
                    let (_, _, h, w) = xv.dims4()?;
                    let (ho, wo) = (h / factor, w / factor);
                    let norm = 1.0 / (factor * factor) as f64;
                    acc(
                        *x,
                        Tensor::from_fn(xv.shape(), |k| {
                            let p = k / (h * w);
                            let yy = (k % (h * w)) / w;
                            let xx = k % w;
                            gout.data()[p * ho * wo + (yy / factor) * wo + xx / factor] * norm
                        }),
                    )
                }
                Op::L2NormalizeRows { x, norms } => {
                    let d = y.shape()[1];
                    let mut gx = Tensor::zeros(y.shape());
                    let rows = gx
                        .data_mut()
                        .chunks_mut(d)
                        .zip(gout.data().chunks(d))
                        .zip(y.data().chunks(d))
                        .zip(norms);
                    for (((dx, dy), yn), norm) in rows {
                        let dot: f64 = dy.iter().zip(yn).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            dx[k] = (dy[k] - yn[k] * dot) / norm;
                        }
                    }
                    acc(*x, gx)
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn add_channel_bias(out: &mut Tensor, bias: &Tensor) -> Result<()> {
    let (_, c, h, w) = out.dims4()?;
    if bias.shape() != [c] {
        return shape_err(format!("bias {:?} for {c} channels", bias.shape()));
    }
    for (k, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let b = bias.data()[k % c];
        plane.iter_mut().for_each(|v| *v += b);
    }
    Ok(())
}

fn channel_sums(t: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = t.dims4()?;
    let mut out = Tensor::zeros(&[c]);
    for (k, plane) in t.data().chunks(h * w).enumerate() {
        out.data_mut()[k % c] += plane.iter().sum::<f64>();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Compare the tape gradient of `f` w.r.t. every input element against
    /// central differences.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&Graph, &[Var]) -> Var) {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars);
        let grads = g.backward(out).unwrap();
        let h = 1e-5;
        for (vi, t) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[vi], t.shape());
            for k in 0..t.len() {
                let eval = |delta: f64| {
                    let g2 = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, u)| {
                            let mut u = u.clone();
                            if j == vi {
                                u.data_mut()[k] += delta;
                            }
                            g2.param(u)
                        })
                        .collect();
                    let o = f(&g2, &vs);
                    g2.scalar(o)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[k];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
                assert!(
                    err < 1e-5 || (a - numeric).abs() < 1e-8,
                    "input {vi} element {k}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    /// Random projection to a scalar so every output element matters.
    fn readout(g: &Graph, y: Var) -> Var {
        let shape = g.shape(y);
        let w = Tensor::from_fn(&shape, |k| ((k as f64) * 0.7).sin());
        let c = g.constant(w);
        let p = g.mul(y, c).unwrap();
        g.sum(p)
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![
            random(&[2, 2, 5, 5], &mut rng),
            random(&[3, 2, 3, 3], &mut rng),
            random(&[3], &mut rng),
        ];
        check(inputs, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
            readout(g, y)
        });
    }

    #[test]
    fn conv_transpose2d_gradients_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            random(&[1, 3, 3, 3], &mut rng),
            random(&[3, 2, 3, 3], &mut rng),
            random(&[2], &mut rng),
        ];
        let g = Graph::new();
        let x = g.constant(inputs[0].clone());
        let w = g.constant(inputs[1].clone());
        let y = g.conv_transpose2d(x, w, None, 2, 1, 1).unwrap();
        assert_eq!(g.shape(y), vec![1, 2, 6, 6]);
        check(inputs, |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1).unwrap();
            readout(g, y)
        });
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x, w), y> == <x, conv_transpose(y, w)> without bias
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 2, 6, 6], &mut rng);
        let w = random(&[4, 2, 3, 3], &mut rng);
        let g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let cx = g.conv2d(xv, wv, None, 2, 1).unwrap();
        let y = random(&g.shape(cx), &mut rng);
        let yv = g.constant(y.clone());
        let ty = g.conv_transpose2d(yv, wv, None, 2, 1, 1).unwrap();
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn elementwise_and_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![random(&[2, 2, 4, 4], &mut rng)];
        check(inputs.clone(), |g, v| {
            let p = g.reflect_pad(v[0], 2).unwrap();
            let n = g.instance_norm(p, 1e-5).unwrap();
            readout(g, n)
        });
        check(inputs.clone(), |g, v| {
            let a = g.leaky_relu(v[0], 0.2);
            let b = g.tanh(a);
            let c = g.softplus(b);
            let d = g.sigmoid(c);
            let e = g.avg_pool(d, 2).unwrap();
            let m = g.max_pool2(d).unwrap();
            let s = g.add(e, m).unwrap();
            readout(g, s)
        });
        check(inputs, |g, v| {
            let pooled = g.global_avg_pool(v[0]).unwrap();
            let n = g.l2_normalize_rows(pooled).unwrap();
            let s = g.square(n);
            let r = g.sum_rows(s);
            readout(g, r)
        });
    }

    #[test]
    fn linear_gather_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![
            random(&[3, 4], &mut rng),
            random(&[2, 4], &mut rng),
            random(&[2], &mut rng),
            random(&[1, 4], &mut rng),
        ];
        check(inputs, |g, v| {
            let c = g.concat(&[v[0], v[3]]).unwrap();
            let y = g.linear(c, v[1], Some(v[2])).unwrap();
            let r = g.gather(y, &[3, 0, 0, 2]).unwrap();
            let a = g.abs(r);
            let m = g.mean(a);
            let s = g.sum(r);
            let t = g.add(m, s).unwrap();
            g.scale(t, 1.5)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let w = g.constant(Tensor::full(&[2, 1, 1, 1], 0.5));
        let x = g.param(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }
}
