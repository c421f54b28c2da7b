//! Tape of differentiable operations and its reverse sweep.

use crate::conv::{self, ConvGeom};
use crate::error::{shape_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Variance floor used by batch normalization.
pub const BN_EPSILON: f64 = 1e-3;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

enum Op<S> {
    Leaf,
    Conv2d {
        x: usize,
        k: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    ScaleChannels(usize, Vec<S>),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
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
    Repeat {
        input: usize,
        times: usize,
    },
    AvgPool {
        input: usize,
        factor: usize,
    },
    Upsample {
        input: usize,
        factor: usize,
    },
    RegionMean {
        input: usize,
        rows: (usize, usize),
        cols: (usize, usize),
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    LstmState {
        z: usize,
        c: Option<usize>,
    },
    LstmOutput {
        z: usize,
        c: usize,
    },
    MaskedMsle {
        pred: usize,
        target: Vec<S>,
        count: usize,
    },
    Sum(usize),
    Mean(usize),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records a forward pass. One graph per worker and per pass.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node that required one.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_4d(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => shape_err(format!("{what} expects a 4-D (N,H,W,C) tensor, got {shape:?}")),
    }
}

fn grad_buf<'a, S: Scalar>(
    grads: &'a mut [Option<Tensor<S>>],
    idx: usize,
    shape: &[usize],
) -> &'a mut Tensor<S> {
    grads[idx].get_or_insert_with(|| Tensor::zeros(shape))
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Sign pattern of every relu input on the tape, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                bits.extend(self.nodes[a].value.data().iter().map(|&v| v > S::zero()));
            }
        }
        bits
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives gradients (parameters, or inputs under test).
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Same-padded, stride-1 cross-correlation of `x` (N,H,W,Cin) with
    /// `kernel` (kh,kw,Cin,Cout), plus an optional bias (Cout).
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (n, h, w, cin) = check_4d(self.shape(x), "conv2d input")?;
        let (kh, kw, kcin, cout) = match *self.shape(kernel) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return shape_err(format!("conv2d kernel must be (kh,kw,Cin,Cout), got {s:?}")),
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return shape_err(format!("conv2d kernel extents must be odd, got {kh}x{kw}"));
        }
        if kcin != cin {
            return shape_err(format!(
                "conv2d channel mismatch: input has {cin}, kernel expects {kcin}"
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return shape_err(format!(
                    "conv2d bias must be ({cout}), got {:?}",
                    self.shape(b)
                ));
            }
        }
        let geom = ConvGeom {
            n,
            h,
            w,
            cin,
            cout,
            kh,
            kw,
        };
        let out = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x.0) || self.rg(kernel.0) || bias.is_some_and(|b| self.rg(b.0));
        let value = Tensor::from_vec(&[n, h, w, cout], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                k: kernel.0,
                b: bias.map(|b| b.0),
                geom,
            },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a.0);
        self.push(value, Op::Scale(a.0, factor), rg)
    }

    /// Multiplies every position of the last axis by a fixed per-channel factor.
    pub fn scale_channels(&mut self, a: Var, factors: &[S]) -> Result<Var> {
        let c = self.value(a).channels();
        if factors.len() != c {
            return shape_err(format!(
                "scale_channels: {} factors for {c} channels",
                factors.len()
            ));
        }
        let mut value = self.value(a).clone();
        for px in value.data_mut().chunks_exact_mut(c) {
            for (x, &f) in px.iter_mut().zip(factors) {
                *x *= f;
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::ScaleChannels(a.0, factors.to_vec()), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| if x > S::zero() { x } else { S::zero() });
        let rg = self.rg(a.0);
        self.push(value, Op::Relu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a.0);
        self.push(value, Op::Sigmoid(a.0), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a.0);
        self.push(value, Op::Tanh(a.0), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err(format!(
                    "concat along axis {axis}: {s:?} incompatible with {base:?}"
                ));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let rg = inputs.iter().any(|v| self.rg(v.0));
        let value = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err(format!(
                "slice [{start}, {}) on axis {axis} out of range for {shape:?}",
                start + len
            ));
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_vec(&out_shape, data)?;
        let rg = self.rg(a.0);
        Ok(self.push(
            value,
            Op::Slice {
                input: a.0,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    /// Tiles the whole tensor `times` along axis 0: `(d0, ..)` becomes `(times*d0, ..)`.
    pub fn repeat(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(TensorError::InvalidParameter("repeat count must be >= 1".into()));
        }
        let src = self.value(a);
        let mut shape = src.shape().to_vec();
        if shape.is_empty() {
            return shape_err("repeat needs at least one axis");
        }
        shape[0] *= times;
        let mut data = Vec::with_capacity(src.numel() * times);
        for _ in 0..times {
            data.extend_from_slice(src.data());
        }
        let value = Tensor::from_vec(&shape, data)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::Repeat { input: a.0, times }, rg))
    }

    /// Mean over non-overlapping `factor x factor` blocks of a (N,H,W,C) tensor.
    pub fn avg_pool2d(&mut self, a: Var, factor: usize) -> Result<Var> {
        let (n, h, w, c) = check_4d(self.shape(a), "avg_pool2d")?;
        if factor == 0 {
            return Err(TensorError::InvalidParameter("pool factor must be >= 1".into()));
        }
        if h % factor != 0 || w % factor != 0 {
            return shape_err(format!("avg_pool2d: {h}x{w} not divisible by {factor}"));
        }
        let (oh, ow) = (h / factor, w / factor);
        let src = self.value(a).data();
        let mut out = vec![S::zero(); n * oh * ow * c];
        let norm = S::one() / S::lit((factor * factor) as f64);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let s = ((b * h + y) * w + x) * c;
                    let d = ((b * oh + y / factor) * ow + x / factor) * c;
                    for ch in 0..c {
                        out[d + ch] += src[s + ch];
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= norm);
        let value = Tensor::from_vec(&[n, oh, ow, c], out)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::AvgPool { input: a.0, factor }, rg))
    }

    /// Nearest-neighbour upsampling of a (N,H,W,C) tensor by an integer factor.
    pub fn upsample_nearest2d(&mut self, a: Var, factor: usize) -> Result<Var> {
        let (n, h, w, c) = check_4d(self.shape(a), "upsample_nearest2d")?;
        if factor == 0 {
            return Err(TensorError::InvalidParameter("upsample factor must be >= 1".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for y in 0..oh {
                for x in 0..ow {
                    let s = ((b * h + y / factor) * w + x / factor) * c;
                    out.extend_from_slice(&src[s..s + c]);
                }
            }
        }
        let value = Tensor::from_vec(&[n, oh, ow, c], out)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::Upsample { input: a.0, factor }, rg))
    }

    /// Averages the window `rows x cols` of a (N,H,W,C) tensor per image and
    /// channel, then replicates the mean over an `out_h x out_w` grid.
    pub fn region_mean(
        &mut self,
        a: Var,
        rows: (usize, usize),
        cols: (usize, usize),
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let (n, h, w, c) = check_4d(self.shape(a), "region_mean")?;
        if rows.0 >= rows.1 || cols.0 >= cols.1 || rows.1 > h || cols.1 > w {
            return shape_err(format!(
                "region_mean window rows {rows:?} cols {cols:?} invalid for {h}x{w}"
            ));
        }
        let area = S::lit(((rows.1 - rows.0) * (cols.1 - cols.0)) as f64);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * out_h * out_w * c);
        for b in 0..n {
            let mut acc = vec![S::zero(); c];
            for y in rows.0..rows.1 {
                for x in cols.0..cols.1 {
                    let s = ((b * h + y) * w + x) * c;
                    for ch in 0..c {
                        acc[ch] += src[s + ch];
                    }
                }
            }
            acc.iter_mut().for_each(|v| *v /= area);
            for _ in 0..out_h * out_w {
                out.extend_from_slice(&acc);
            }
        }
        let value = Tensor::from_vec(&[n, out_h, out_w, c], out)?;
        let rg = self.rg(a.0);
        Ok(self.push(
            value,
            Op::RegionMean {
                input: a.0,
                rows,
                cols,
            },
            rg,
        ))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = self.value(x).channels();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!(
                "batch_norm: input has {c} channels, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        Ok(c)
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: Vec<S>, inv_std: Vec<S>, train: bool) -> Var {
        let c = mean.len();
        let mut value = self.value(x).clone();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        for px in value.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] = g[ch] * (px[ch] - mean[ch]) * inv_std[ch] + b[ch];
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        self.push(
            value,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                inv_std,
                train,
            },
            rg,
        )
    }

    /// Batch normalization with batch statistics over every axis but the last.
    /// Returns the (biased) batch statistics for running-average updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats<S>)> {
        let c = self.bn_check(x, gamma, beta)?;
        let data = self.value(x).data();
        let m = data.len() / c;
        if m == 0 {
            return shape_err("batch_norm over an empty batch");
        }
        let mut mean = vec![S::zero(); c];
        for px in data.chunks_exact(c) {
            for ch in 0..c {
                mean[ch] += px[ch];
            }
        }
        let mf = S::lit(m as f64);
        mean.iter_mut().for_each(|v| *v /= mf);
        let mut var = vec![S::zero(); c];
        for px in data.chunks_exact(c) {
            for ch in 0..c {
                let d = px[ch] - mean[ch];
                var[ch] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= mf);
        let eps = S::lit(BN_EPSILON);
        let inv_std = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, mean.clone(), inv_std, true);
        Ok((out, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[S], var: &[S]) -> Result<Var> {
        let c = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return shape_err(format!("batch_norm running stats do not match {c} channels"));
        }
        let eps = S::lit(BN_EPSILON);
        let inv_std = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, mean.to_vec(), inv_std, false))
    }

    /// New cell state of an LSTM from gate pre-activations `z` laid out as
    /// `[i | f | g | o]` along the last axis: `c' = σ(f)⊙c + σ(i)⊙tanh(g)`.
    /// An absent `c` is treated as zeros.
    pub fn lstm_cell_state(&mut self, z: Var, c: Option<Var>) -> Result<Var> {
        let zs = self.shape(z).to_vec();
        let four = *zs.last().unwrap_or(&0);
        if four == 0 || four % 4 != 0 {
            return shape_err(format!("lstm gates need a multiple of 4 channels, got {zs:?}"));
        }
        let ch = four / 4;
        let mut out_shape = zs.clone();
        *out_shape.last_mut().unwrap() = ch;
        if let Some(c) = c {
            if self.shape(c) != out_shape.as_slice() {
                return shape_err(format!(
                    "lstm cell state {:?} does not match gates {zs:?}",
                    self.shape(c)
                ));
            }
        }
        let zd = self.value(z).data();
        let cd = c.map(|c| self.value(c).data());
        let mut out = Vec::with_capacity(zd.len() / 4);
        for (p, gates) in zd.chunks_exact(four).enumerate() {
            for k in 0..ch {
                let i = sigmoid(gates[k]);
                let g = gates[2 * ch + k].tanh();
                let mut v = i * g;
                if let Some(cd) = cd {
                    v += sigmoid(gates[ch + k]) * cd[p * ch + k];
                }
                out.push(v);
            }
        }
        let value = Tensor::from_vec(&out_shape, out)?;
        let rg = self.rg(z.0) || c.is_some_and(|c| self.rg(c.0));
        Ok(self.push(
            value,
            Op::LstmState {
                z: z.0,
                c: c.map(|c| c.0),
            },
            rg,
        ))
    }

    /// LSTM hidden state `h' = σ(o)⊙tanh(c')` from gates `z` and the new cell state.
    pub fn lstm_cell_output(&mut self, z: Var, c_new: Var) -> Result<Var> {
        let zs = self.shape(z).to_vec();
        let four = *zs.last().unwrap_or(&0);
        let ch = four / 4;
        let mut expect = zs.clone();
        if let Some(l) = expect.last_mut() {
            *l = ch;
        }
        if four % 4 != 0 || self.shape(c_new) != expect.as_slice() {
            return shape_err(format!(
                "lstm output: gates {zs:?} incompatible with cell {:?}",
                self.shape(c_new)
            ));
        }
        let zd = self.value(z).data();
        let cd = self.value(c_new).data();
        let mut out = Vec::with_capacity(cd.len());
        for (p, gates) in zd.chunks_exact(four).enumerate() {
            for k in 0..ch {
                out.push(sigmoid(gates[3 * ch + k]) * cd[p * ch + k].tanh());
            }
        }
        let value = Tensor::from_vec(&expect, out)?;
        let rg = self.rg(z.0) || self.rg(c_new.0);
        Ok(self.push(value, Op::LstmOutput { z: z.0, c: c_new.0 }, rg))
    }

    /// One ConvLSTM step without peephole connections:
    /// gates `z = W_x * x + W_h * h + b` (layout `[i | f | g | o]`), then
    /// `c' = σ(f)⊙c + σ(i)⊙tanh(g)` and `h' = σ(o)⊙tanh(c')`.
    /// `state` is `(h, c)`; `None` means the zero state.
    pub fn convlstm_step(
        &mut self,
        x: Var,
        state: Option<(Var, Var)>,
        w_input: Var,
        w_state: Var,
        bias: Var,
    ) -> Result<(Var, Var)> {
        let zx = self.conv2d(x, w_input, Some(bias))?;
        self.convlstm_step_projected(zx, state, w_state)
    }

    /// ConvLSTM step where the input-to-state convolution (with bias) has
    /// already been applied, e.g. for a whole sequence at once.
    pub fn convlstm_step_projected(
        &mut self,
        zx: Var,
        state: Option<(Var, Var)>,
        w_state: Var,
    ) -> Result<(Var, Var)> {
        let (z, c) = match state {
            Some((h, c)) => {
                let zh = self.conv2d(h, w_state, None)?;
                (self.add(zx, zh)?, Some(c))
            }
            None => (zx, None),
        };
        let c_new = self.lstm_cell_state(z, c)?;
        let h_new = self.lstm_cell_output(z, c_new)?;
        Ok((h_new, c_new))
    }

    fn msle_node(&mut self, pred: Var, target: &Tensor<S>, allow_empty: bool) -> Result<(Var, usize)> {
        if self.shape(pred) != target.shape() {
            return shape_err(format!(
                "masked_msle: prediction {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            ));
        }
        let p = self.value(pred).data();
        let mut sum = S::zero();
        let mut count = 0usize;
        for (&x, &t) in p.iter().zip(target.data()) {
            if t.is_nan() {
                continue;
            }
            let d = x.ln_1p() - t.ln_1p();
            sum += d * d;
            count += 1;
        }
        if count == 0 && !allow_empty {
            return Err(TensorError::NoValidCells);
        }
        let loss = if count == 0 {
            S::zero()
        } else {
            sum / S::lit(count as f64)
        };
        let rg = self.rg(pred.0);
        let v = self.push(
            Tensor::scalar(loss),
            Op::MaskedMsle {
                pred: pred.0,
                target: target.data().to_vec(),
                count,
            },
            rg,
        );
        Ok((v, count))
    }

    /// Mean of `(ln(1+pred) - ln(1+target))²` over cells whose target is not
    /// NaN. Returns the loss and the number of valid cells.
    pub fn masked_msle(&mut self, pred: Var, target: &Tensor<S>) -> Result<(Var, usize)> {
        self.msle_node(pred, target, false)
    }

    /// Like [`Graph::masked_msle`], but a fully masked target yields a zero
    /// loss that still sits on the tape and back-propagates exact zeros.
    pub fn masked_msle_or_zero(&mut self, pred: Var, target: &Tensor<S>) -> Result<(Var, usize)> {
        self.msle_node(pred, target, true)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: S = t.data().iter().copied().sum();
        let m = s / S::lit(t.numel().max(1) as f64);
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(m), Op::Mean(a.0), rg)
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        if self.value(root).numel() != 1 {
            return shape_err(format!(
                "backward root must hold one element, got {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), S::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gout, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, gout: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| &nodes[j].value;
        let rg = |j: usize| nodes[j].requires_grad;
        let go = gout.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, geom } => {
                let mut gx = rg(*x).then(|| grads[*x].take().unwrap_or_else(|| Tensor::zeros(val(*x).shape())));
                let mut gk = rg(*k).then(|| grads[*k].take().unwrap_or_else(|| Tensor::zeros(val(*k).shape())));
                let mut gb = b
                    .filter(|&b| rg(b))
                    .map(|b| grads[b].take().unwrap_or_else(|| Tensor::zeros(val(b).shape())));
                conv::backward(
                    geom,
                    val(*x).data(),
                    val(*k).data(),
                    go,
                    gx.as_mut().map(|t| t.data_mut()),
                    gk.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = gx {
                    grads[*x] = Some(t);
                }
                if let Some(t) = gk {
                    grads[*k] = Some(t);
                }
                if let (Some(t), Some(b)) = (gb, b) {
                    grads[*b] = Some(t);
                }
            }
            Op::Add(a, b) => {
                for &p in [a, b].into_iter() {
                    if rg(p) {
                        grad_buf(grads, p, val(p).shape()).add_assign(gout);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (&p, &q) in [(a, b), (b, a)] {
                    if rg(p) {
                        let other = val(q).data();
                        let buf = grad_buf(grads, p, val(p).shape()).data_mut();
                        for ((d, &g), &o) in buf.iter_mut().zip(go).zip(other) {
                            *d += g * o;
                        }
                    }
                }
            }
            Op::Scale(a, f) => {
                if rg(*a) {
                    let buf = grad_buf(grads, *a, val(*a).shape()).data_mut();
                    for (d, &g) in buf.iter_mut().zip(go) {
                        *d += g * *f;
                    }
                }
            }
            Op::ScaleChannels(a, factors) => {
                if rg(*a) {
                    let c = factors.len();
                    let buf = grad_buf(grads, *a, val(*a).shape()).data_mut();
                    for (d, g) in buf.chunks_exact_mut(c).zip(go.chunks_exact(c)) {
                        for ch in 0..c {
                            d[ch] += g[ch] * factors[ch];
                        }
                    }
                }
            }
            Op::Relu(a) | Op::Sigmoid(a) | Op::Tanh(a) => {
                if rg(*a) {
                    let y = nodes[i].value.data();
                    let op = &nodes[i].op;
                    let buf = grad_buf(grads, *a, val(*a).shape()).data_mut();
                    for ((d, &g), &y) in buf.iter_mut().zip(go).zip(y) {
                        let local = match op {
                            Op::Relu(_) => {
                                if y > S::zero() {
                                    S::one()
                                } else {
                                    S::zero()
                                }
                            }
                            Op::Sigmoid(_) => y * (S::one() - y),
                            _ => S::one() - y * y,
                        };
                        *d += g * local;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = nodes[i].value.shape();
                let (outer, _, inner) = axis_split(out_shape, *axis);
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in inputs {
                    let block = val(p).shape()[*axis] * inner;
                    if rg(p) {
                        let buf = grad_buf(grads, p, val(p).shape()).data_mut();
                        for o in 0..outer {
                            let src = &go[o * total + offset..][..block];
                            for (d, &g) in buf[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    }
                    offset += block;
                }
            }
            Op::Slice { input, axis, start } => {
                if rg(*input) {
                    let in_shape = val(*input).shape();
                    let (outer, dim, inner) = axis_split(in_shape, *axis);
                    let len = nodes[i].value.shape()[*axis];
                    let buf = grad_buf(grads, *input, in_shape).data_mut();
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        let src = &go[o * len * inner..][..len * inner];
                        for (d, &g) in buf[dst..dst + len * inner].iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if rg(*a) {
                    let buf = grad_buf(grads, *a, val(*a).shape()).data_mut();
                    for (d, &g) in buf.iter_mut().zip(go) {
                        *d += g;
                    }
                }
            }
            Op::Repeat { input, times } => {
                if rg(*input) {
                    let n = val(*input).numel();
                    let buf = grad_buf(grads, *input, val(*input).shape()).data_mut();
                    for r in 0..*times {
                        for (d, &g) in buf.iter_mut().zip(&go[r * n..(r + 1) * n]) {
                            *d += g;
                        }
                    }
                }
            }
            Op::AvgPool { input, factor } => {
                if rg(*input) {
                    let s = val(*input).shape();
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h / factor, w / factor);
                    let norm = S::one() / S::lit((factor * factor) as f64);
                    let buf = grad_buf(grads, *input, s).data_mut();
                    for b in 0..n {
                        for y in 0..h {
                            for x in 0..w {
                                let d = ((b * h + y) * w + x) * c;
                                let o = ((b * oh + y / factor) * ow + x / factor) * c;
                                for ch in 0..c {
                                    buf[d + ch] += go[o + ch] * norm;
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample { input, factor } => {
                if rg(*input) {
                    let s = val(*input).shape();
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h * factor, w * factor);
                    let buf = grad_buf(grads, *input, s).data_mut();
                    for b in 0..n {
                        for y in 0..oh {
                            for x in 0..ow {
                                let o = ((b * oh + y) * ow + x) * c;
                                let d = ((b * h + y / factor) * w + x / factor) * c;
                                for ch in 0..c {
                                    buf[d + ch] += go[o + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::RegionMean { input, rows, cols } => {
                if rg(*input) {
                    let s = val(*input).shape();
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let os = nodes[i].value.shape();
                    let per_image = os[1] * os[2] * c;
                    let area = S::lit(((rows.1 - rows.0) * (cols.1 - cols.0)) as f64);
                    let buf = grad_buf(grads, *input, s).data_mut();
                    for b in 0..n {
                        let mut acc = vec![S::zero(); c];
                        for px in go[b * per_image..(b + 1) * per_image].chunks_exact(c) {
                            for ch in 0..c {
                                acc[ch] += px[ch];
                            }
                        }
                        for y in rows.0..rows.1 {
                            for x in cols.0..cols.1 {
                                let d = ((b * h + y) * w + x) * c;
                                for ch in 0..c {
                                    buf[d + ch] += acc[ch] / area;
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let c = mean.len();
                let xd = val(*x).data();
                let gd = val(*gamma).data();
                let m = xd.len() / c;
                let mut sum_g = vec![S::zero(); c];
                let mut sum_gx = vec![S::zero(); c];
                for (px, g) in xd.chunks_exact(c).zip(go.chunks_exact(c)) {
                    for ch in 0..c {
                        let xhat = (px[ch] - mean[ch]) * inv_std[ch];
                        sum_g[ch] += g[ch];
                        sum_gx[ch] += g[ch] * xhat;
                    }
                }
                if rg(*gamma) {
                    grad_buf(grads, *gamma, &[c]).add_assign(&Tensor::from_vec(&[c], sum_gx.clone()).expect("c"));
                }
                if rg(*beta) {
                    grad_buf(grads, *beta, &[c]).add_assign(&Tensor::from_vec(&[c], sum_g.clone()).expect("c"));
                }
                if rg(*x) {
                    let mf = S::lit(m as f64);
                    let buf = grad_buf(grads, *x, val(*x).shape()).data_mut();
                    for ((d, px), g) in buf.chunks_exact_mut(c).zip(xd.chunks_exact(c)).zip(go.chunks_exact(c)) {
                        for ch in 0..c {
                            let scale = gd[ch] * inv_std[ch];
                            if *train {
                                let xhat = (px[ch] - mean[ch]) * inv_std[ch];
                                d[ch] += scale * (g[ch] - sum_g[ch] / mf - xhat * sum_gx[ch] / mf);
                            } else {
                                d[ch] += scale * g[ch];
                            }
                        }
                    }
                }
            }
            Op::LstmState { z, c } => {
                let zd = val(*z).data();
                let four = val(*z).channels();
                let ch = four / 4;
                if rg(*z) {
                    let cd = c.map(|c| val(c).data());
                    let buf = grad_buf(grads, *z, val(*z).shape()).data_mut();
                    for (p, (gates, dz)) in zd.chunks_exact(four).zip(buf.chunks_exact_mut(four)).enumerate() {
                        for k in 0..ch {
                            let g = go[p * ch + k];
                            let si = sigmoid(gates[k]);
                            let tg = gates[2 * ch + k].tanh();
                            dz[k] += g * tg * si * (S::one() - si);
                            dz[2 * ch + k] += g * si * (S::one() - tg * tg);
                            if let Some(cd) = cd {
                                let sf = sigmoid(gates[ch + k]);
                                dz[ch + k] += g * cd[p * ch + k] * sf * (S::one() - sf);
                            }
                        }
                    }
                }
                if let Some(c) = c.filter(|&c| rg(c)) {
                    let buf = grad_buf(grads, c, val(c).shape()).data_mut();
                    for (p, gates) in zd.chunks_exact(four).enumerate() {
                        for k in 0..ch {
                            buf[p * ch + k] += go[p * ch + k] * sigmoid(gates[ch + k]);
                        }
                    }
                }
            }
            Op::LstmOutput { z, c } => {
                let zd = val(*z).data();
                let cd = val(*c).data();
                let four = val(*z).channels();
                let ch = four / 4;
                if rg(*z) {
                    let buf = grad_buf(grads, *z, val(*z).shape()).data_mut();
                    for (p, (gates, dz)) in zd.chunks_exact(four).zip(buf.chunks_exact_mut(four)).enumerate() {
                        for k in 0..ch {
                            let so = sigmoid(gates[3 * ch + k]);
                            dz[3 * ch + k] += go[p * ch + k] * cd[p * ch + k].tanh() * so * (S::one() - so);
                        }
                    }
                }
                if rg(*c) {
                    let buf = grad_buf(grads, *c, val(*c).shape()).data_mut();
                    for (p, gates) in zd.chunks_exact(four).enumerate() {
                        for k in 0..ch {
                            let so = sigmoid(gates[3 * ch + k]);
                            let t = cd[p * ch + k].tanh();
                            buf[p * ch + k] += go[p * ch + k] * so * (S::one() - t * t);
                        }
                    }
                }
            }
            Op::MaskedMsle { pred, target, count } => {
                if rg(*pred) {
                    let buf = grad_buf(grads, *pred, val(*pred).shape()).data_mut();
                    if *count > 0 {
                        let scale = go[0] * S::lit(2.0) / S::lit(*count as f64);
                        for ((d, &p), &t) in buf.iter_mut().zip(val(*pred).data()).zip(target) {
                            if t.is_nan() {
                                continue;
                            }
                            *d += scale * (p.ln_1p() - t.ln_1p()) / (S::one() + p);
                        }
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if rg(*a) {
                    let n = val(*a).numel();
                    let g = if matches!(nodes[i].op, Op::Mean(_)) {
                        go[0] / S::lit(n.max(1) as f64)
                    } else {
                        go[0]
                    };
                    let buf = grad_buf(grads, *a, val(*a).shape()).data_mut();
                    buf.iter_mut().for_each(|d| *d += g);
                }
            }
        }
    }
}
