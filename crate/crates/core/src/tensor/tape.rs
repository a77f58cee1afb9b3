use std::collections::BTreeMap;
use std::str::FromStr;

use super::kernels::{col2im, conv_out, im2col, transpose, upsample, upsample_backward};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Lower clamp applied to `ln` inputs and to sigmoid outputs (and `1 - clamp` above).
pub const CLAMP_EPS: f64 = 1e-7;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation together with the attributes backward needs.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Matmul,
    Linear,
    Conv2d { stride: usize },
    Relu,
    Sigmoid,
    Tanh,
    Abs,
    Ln,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Reshape,
    Transpose,
    Concat { axis: usize },
    GlobalAvgPool,
    Upsample { height: usize, width: usize },
    MaskedSoftmax { mask: Option<Vec<bool>> },
    SumAxis { axis: usize },
    SumAll,
    MeanAll,
    ScaleChannels,
    SliceRows { start: usize, len: usize },
    Embedding { ids: Vec<usize> },
}

/// Name-level op identifier for dynamic dispatch through [`Tape::op_forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Matmul,
    Linear,
    Conv2d,
    Relu,
    Sigmoid,
    Tanh,
    Abs,
    Ln,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Reshape,
    Transpose,
    Concat,
    GlobalAvgPool,
    Upsample2x,
    UpsampleTo,
    MaskedSoftmax,
    SumAxis,
    SumAll,
    MeanAll,
    ScaleChannels,
    SliceRows,
    Embedding,
}

impl OpKind {
    pub const ALL: [OpKind; 27] = [
        OpKind::Matmul,
        OpKind::Linear,
        OpKind::Conv2d,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Abs,
        OpKind::Ln,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::Concat,
        OpKind::GlobalAvgPool,
        OpKind::Upsample2x,
        OpKind::UpsampleTo,
        OpKind::MaskedSoftmax,
        OpKind::SumAxis,
        OpKind::SumAll,
        OpKind::MeanAll,
        OpKind::ScaleChannels,
        OpKind::SliceRows,
        OpKind::Embedding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Abs => "abs",
            OpKind::Ln => "ln",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Concat => "concat",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Upsample2x => "upsample2x",
            OpKind::UpsampleTo => "upsample_to",
            OpKind::MaskedSoftmax => "masked_softmax",
            OpKind::SumAxis => "sum_axis",
            OpKind::SumAll => "sum_all",
            OpKind::MeanAll => "mean_all",
            OpKind::ScaleChannels => "scale_channels",
            OpKind::SliceRows => "slice_rows",
            OpKind::Embedding => "embedding",
        }
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// Loose attribute bag for [`Tape::op_forward`]; each kind reads only the fields it needs.
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    pub stride: Option<usize>,
    pub axis: Option<usize>,
    pub scalar: Option<f64>,
    pub shape: Option<Vec<usize>>,
    pub size: Option<(usize, usize)>,
    pub mask: Option<Vec<bool>>,
    pub start: Option<usize>,
    pub len: Option<usize>,
    pub ids: Option<Vec<usize>>,
}

#[derive(Debug)]
struct Node<F> {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor<F>,
    saved: Vec<F>,
}

/// Append-only record of a forward computation; backward replays it in reverse.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    bindings: BTreeMap<String, Var>,
    grad_enabled: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients (inference).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    /// Sign (`x > 0`) of every element fed to a relu or abs node, in tape order.
    pub fn kink_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu | Op::Abs))
            .flat_map(|n| self.nodes[n.inputs[0].0].value.data())
            .map(|&v| v > F::zero())
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad()
    }

    /// Records a leaf; it tracks gradients when the tensor asks for them and the tape allows it.
    pub fn leaf(&mut self, mut t: Tensor<F>) -> Var {
        let rg = t.requires_grad() && self.grad_enabled;
        t = t.with_requires_grad(rg);
        t.set_grad(None);
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: t,
            saved: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn bind(&mut self, name: impl Into<String>, v: Var) {
        self.bindings.insert(name.into(), v);
    }

    pub fn binding(&self, name: &str) -> Option<Var> {
        self.bindings.get(name).copied()
    }

    pub fn bindings(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bindings.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Looks up a bound parameter, binding it from `store` on first use.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        if let Some(v) = self.binding(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?
            .clone();
        let v = self.input(t);
        self.bind(name, v);
        Ok(v)
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor<F>, saved: Vec<F>) -> Var {
        debug_assert!(
            value.is_finite() || inputs.iter().any(|&i| !self.value(i).is_finite()),
            "{op:?} produced non-finite output from finite inputs"
        );
        let rg = self.grad_enabled && inputs.iter().any(|&i| self.value(i).requires_grad());
        self.nodes.push(Node {
            op,
            inputs,
            value: value.with_requires_grad(rg),
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    fn out(shape: &[usize], data: Vec<F>) -> Tensor<F> {
        Tensor::new(shape, data).expect("op output shape")
    }

    // ---- dynamic dispatch -------------------------------------------------

    pub fn op_forward(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() < n {
                Err(Error::invalid(format!(
                    "{} expects {n} inputs, got {}",
                    kind.name(),
                    inputs.len()
                )))
            } else {
                Ok(())
            }
        };
        let attr = |v: Option<usize>, what: &str| -> Result<usize> {
            v.ok_or_else(|| Error::invalid(format!("{} requires `{what}`", kind.name())))
        };
        match kind {
            OpKind::Matmul => {
                need(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Linear => {
                need(3)?;
                self.linear(inputs[0], inputs[1], inputs[2])
            }
            OpKind::Conv2d => {
                need(3)?;
                self.conv2d(inputs[0], inputs[1], inputs[2], attrs.stride.unwrap_or(1))
            }
            OpKind::Relu => {
                need(1)?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::Sigmoid => {
                need(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            OpKind::Tanh => {
                need(1)?;
                Ok(self.tanh(inputs[0]))
            }
            OpKind::Abs => {
                need(1)?;
                Ok(self.abs(inputs[0]))
            }
            OpKind::Ln => {
                need(1)?;
                Ok(self.ln(inputs[0]))
            }
            OpKind::Add => {
                need(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                need(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                need(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Div => {
                need(2)?;
                self.div(inputs[0], inputs[1])
            }
            OpKind::Scale => {
                need(1)?;
                let s = attrs
                    .scalar
                    .ok_or_else(|| Error::invalid("scale requires `scalar`"))?;
                Ok(self.scale(inputs[0], s))
            }
            OpKind::AddScalar => {
                need(1)?;
                let s = attrs
                    .scalar
                    .ok_or_else(|| Error::invalid("add_scalar requires `scalar`"))?;
                Ok(self.add_scalar(inputs[0], s))
            }
            OpKind::Reshape => {
                need(1)?;
                let shape = attrs
                    .shape
                    .as_ref()
                    .ok_or_else(|| Error::invalid("reshape requires `shape`"))?;
                self.reshape(inputs[0], shape)
            }
            OpKind::Transpose => {
                need(1)?;
                self.transpose(inputs[0])
            }
            OpKind::Concat => {
                need(1)?;
                self.concat(inputs, attrs.axis.unwrap_or(0))
            }
            OpKind::GlobalAvgPool => {
                need(1)?;
                self.global_avg_pool(inputs[0])
            }
            OpKind::Upsample2x => {
                need(1)?;
                self.upsample2x(inputs[0])
            }
            OpKind::UpsampleTo => {
                need(1)?;
                let (h, w) = attrs
                    .size
                    .ok_or_else(|| Error::invalid("upsample_to requires `size`"))?;
                self.upsample_to(inputs[0], h, w)
            }
            OpKind::MaskedSoftmax => {
                need(1)?;
                self.masked_softmax(inputs[0], attrs.mask.as_deref())
            }
            OpKind::SumAxis => {
                need(1)?;
                self.sum_axis(inputs[0], attr(attrs.axis, "axis")?)
            }
            OpKind::SumAll => {
                need(1)?;
                Ok(self.sum_all(inputs[0]))
            }
            OpKind::MeanAll => {
                need(1)?;
                Ok(self.mean_all(inputs[0]))
            }
            OpKind::ScaleChannels => {
                need(2)?;
                self.scale_channels(inputs[0], inputs[1])
            }
            OpKind::SliceRows => {
                need(1)?;
                self.slice_rows(
                    inputs[0],
                    attr(attrs.start, "start")?,
                    attr(attrs.len, "len")?,
                )
            }
            OpKind::Embedding => {
                need(1)?;
                let ids = attrs
                    .ids
                    .as_ref()
                    .ok_or_else(|| Error::invalid("embedding requires `ids`"))?;
                self.embedding(inputs[0], ids)
            }
        }
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.data(a), false, self.data(b), false, &mut c, false);
        Ok(self.push(Op::Matmul, vec![a, b], Self::out(&[m, n], c), Vec::new()))
    }

    /// `x·w + b` with `x` rows×in (or a bare in-vector), `w` in×out, `b` out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let (rows, inp) = match sx {
            [i] => (1, *i),
            [r, i] => (*r, *i),
            _ => return Err(shape_err("linear", sx, sw)),
        };
        if sw.len() != 2 || sw[0] != inp {
            return Err(shape_err("linear", sx, sw));
        }
        let outp = sw[1];
        if sb != [outp] {
            return Err(shape_err("linear", sw, sb));
        }
        let mut y = vec![F::zero(); rows * outp];
        for r in 0..rows {
            y[r * outp..(r + 1) * outp].copy_from_slice(self.data(b));
        }
        F::gemm(rows, inp, outp, self.data(x), false, self.data(w), false, &mut y, true);
        let shape = if sx.len() == 1 {
            vec![outp]
        } else {
            vec![rows, outp]
        };
        Ok(self.push(Op::Linear, vec![x, w, b], Self::out(&shape, y), Vec::new()))
    }

    /// 3×3 convolution with zero padding 1; `x` C×H×W, `w` O×C×3×3, `b` O.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return Err(Error::invalid(format!("conv2d: unsupported stride {stride}")));
        }
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != 3 || sw[3] != 3 {
            return Err(shape_err("conv2d", sx, sw));
        }
        let (c, h, wd, o) = (sx[0], sx[1], sx[2], sw[0]);
        if sb != [o] {
            return Err(shape_err("conv2d", sw, sb));
        }
        let (ho, wo) = (conv_out(h, stride), conv_out(wd, stride));
        let cols = im2col(self.data(x), c, h, wd, stride);
        let plane = ho * wo;
        let mut y = vec![F::zero(); o * plane];
        for (oc, bias) in self.data(b).iter().enumerate() {
            y[oc * plane..(oc + 1) * plane].iter_mut().for_each(|v| *v = *bias);
        }
        F::gemm(o, c * 9, plane, self.data(w), false, &cols, false, &mut y, true);
        let saved = if self.grad_enabled { cols } else { Vec::new() };
        Ok(self.push(
            Op::Conv2d { stride },
            vec![x, w, b],
            Self::out(&[o, ho, wo], y),
            saved,
        ))
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(F) -> F) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(op, vec![x], Self::out(&shape, data), Vec::new())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Op::Relu, x, |v| if v > F::zero() { v } else { F::zero() })
    }

    /// Logistic sigmoid, clamped to `[1e-7, 1 - 1e-7]`.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let lo = F::of(CLAMP_EPS);
        let hi = F::one() - lo;
        self.unary(Op::Sigmoid, x, |v| {
            let s = if v >= F::zero() {
                F::one() / (F::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (F::one() + e)
            };
            s.max(lo).min(hi)
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Op::Tanh, x, |v| v.tanh())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Op::Abs, x, |v| v.abs())
    }

    /// Natural log with the input clamped below at 1e-7.
    pub fn ln(&mut self, x: Var) -> Var {
        let lo = F::of(CLAMP_EPS);
        self.unary(Op::Ln, x, |v| v.max(lo).ln())
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let sf = F::of(s);
        self.unary(Op::Scale(s), x, |v| v * sf)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let sf = F::of(s);
        self.unary(Op::AddScalar(s), x, |v| v + sf)
    }

    fn binary(
        &mut self,
        op: Op,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(op, vec![a, b], Self::out(&shape, data), Vec::new()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, "div", a, b, |x, y| x / y)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().with_requires_grad(false);
        let from = t.shape().to_vec();
        let t = t
            .reshaped(shape)
            .map_err(|_| shape_err("reshape", &from, shape))?;
        Ok(self.push(Op::Reshape, vec![x], t, Vec::new()))
    }

    /// Swaps the last two axes (rank 2 or 3).
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, r, c) = match s.as_slice() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            _ => return Err(shape_err("transpose", &s, &[])),
        };
        let data = transpose(self.data(x), batch, r, c);
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Ok(self.push(Op::Transpose, vec![x], Self::out(&shape, data), Vec::new()))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.data(x)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Op::Concat { axis },
            xs.to_vec(),
            Self::out(&shape, data),
            Vec::new(),
        ))
    }

    /// C×H×W → C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("global_avg_pool", &s, &[]));
        }
        let plane = s[1] * s[2];
        let inv = F::of(1.0 / plane as f64);
        let data = self
            .data(x)
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<F>() * inv)
            .collect();
        Ok(self.push(
            Op::GlobalAvgPool,
            vec![x],
            Self::out(&[s[0]], data),
            Vec::new(),
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("upsample2x", &s, &[]));
        }
        self.upsample_to(x, s[1] * 2, s[2] * 2)
    }

    /// Bilinear resampling of C×H×W to C×height×width (half-pixel centers).
    pub fn upsample_to(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || height == 0 || width == 0 {
            return Err(shape_err("upsample_to", &s, &[height, width]));
        }
        let data = upsample(self.data(x), s[0], (s[1], s[2]), (height, width));
        Ok(self.push(
            Op::Upsample { height, width },
            vec![x],
            Self::out(&[s[0], height, width], data),
            Vec::new(),
        ))
    }

    /// Softmax over the last axis; `mask[j] == false` removes column `j` from every row.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().unwrap();
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(shape_err("masked_softmax", &s, &[m.len()]));
            }
            if !m.iter().any(|&v| v) {
                return Err(Error::invalid("masked_softmax: every column is masked"));
            }
        }
        let valid = |j: usize| mask.is_none_or(|m| m[j]);
        let mut out = vec![F::zero(); self.value(x).numel()];
        for (row, dst) in self.data(x).chunks(cols).zip(out.chunks_mut(cols)) {
            let max = (0..cols)
                .filter(|&j| valid(j))
                .map(|j| row[j])
                .fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for j in 0..cols {
                if valid(j) {
                    let e = (row[j] - max).exp();
                    dst[j] = e;
                    sum = sum + e;
                }
            }
            let inv = F::one() / sum;
            for j in 0..cols {
                if valid(j) {
                    dst[j] = dst[j] * inv;
                }
            }
        }
        Ok(self.push(
            Op::MaskedSoftmax {
                mask: mask.map(<[bool]>::to_vec),
            },
            vec![x],
            Self::out(&s, out),
            Vec::new(),
        ))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("sum_axis", &s, &[axis]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let n = s[axis];
        let mut data = vec![F::zero(); outer * inner];
        let src = self.data(x);
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + src[base + i];
                }
            }
        }
        let mut shape: Vec<usize> = s.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(
            Op::SumAxis { axis },
            vec![x],
            Self::out(&shape, data),
            Vec::new(),
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<F>();
        self.push(Op::SumAll, vec![x], Tensor::scalar(s), Vec::new())
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<F>() / F::of(t.numel() as f64);
        self.push(Op::MeanAll, vec![x], Tensor::scalar(s), Vec::new())
    }

    /// Multiplies channel `c` of a C×… tensor by `g[c]`.
    pub fn scale_channels(&mut self, x: Var, g: Var) -> Result<Var> {
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(g).to_vec());
        if sx.len() < 2 || sg != [sx[0]] {
            return Err(shape_err("scale_channels", &sx, &sg));
        }
        let plane: usize = sx[1..].iter().product();
        let gates = self.data(g);
        let data = self
            .data(x)
            .chunks(plane)
            .zip(gates)
            .flat_map(|(ch, &gv)| ch.iter().map(move |&v| v * gv))
            .collect();
        Ok(self.push(
            Op::ScaleChannels,
            vec![x, g],
            Self::out(&sx, data),
            Vec::new(),
        ))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(shape_err("slice_rows", &s, &[start, len]));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.data(x)[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        Ok(self.push(
            Op::SliceRows { start, len },
            vec![x],
            Self::out(&shape, data),
            Vec::new(),
        ))
    }

    /// Gathers rows `ids` of a V×E table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() || ids.iter().any(|&i| i >= s[0]) {
            return Err(shape_err("embedding", &s, ids));
        }
        let e = s[1];
        let src = self.data(table);
        let data = ids
            .iter()
            .flat_map(|&i| src[i * e..(i + 1) * e].iter().copied())
            .collect();
        Ok(self.push(
            Op::Embedding { ids: ids.to_vec() },
            vec![table],
            Self::out(&[ids.len(), e], data),
            Vec::new(),
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar root; gradients land in each tracked node's `grad` slot.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].value.requires_grad() {
                self.backward_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                let len = node.value.numel();
                node.value
                    .set_grad(Some(g.unwrap_or_else(|| vec![F::zero(); len])));
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let acc = |grads: &mut [Option<Vec<F>>], v: Var, f: &dyn Fn(&mut [F])| {
            let t = self.value(v);
            if t.requires_grad() {
                f(grads[v.0].get_or_insert_with(|| vec![F::zero(); t.numel()]));
            }
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul => {
                let (a, b) = (ins[0], ins[1]);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let (da, db) = (self.data(a), self.data(b));
                acc(grads, a, &|ga| F::gemm(m, n, k, g, false, db, true, ga, true));
                acc(grads, b, &|gb| F::gemm(k, m, n, da, true, g, false, gb, true));
            }
            Op::Linear => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let (inp, outp) = (self.shape(w)[0], self.shape(w)[1]);
                let rows = self.value(x).numel() / inp;
                let (dx, dw) = (self.data(x), self.data(w));
                acc(grads, x, &|gx| F::gemm(rows, outp, inp, g, false, dw, true, gx, true));
                acc(grads, w, &|gw| F::gemm(inp, rows, outp, dx, true, g, false, gw, true));
                acc(grads, b, &|gb| {
                    for row in g.chunks(outp) {
                        for (d, &v) in gb.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                });
            }
            Op::Conv2d { stride } => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let sx = self.shape(x);
                let (c, h, wd) = (sx[0], sx[1], sx[2]);
                let o = self.shape(w)[0];
                let plane = g.len() / o;
                let cols = &node.saved;
                let wdata = self.data(w);
                acc(grads, w, &|gw| F::gemm(o, plane, c * 9, g, false, cols, true, gw, true));
                acc(grads, b, &|gb| {
                    for (d, ch) in gb.iter_mut().zip(g.chunks(plane)) {
                        *d = *d + ch.iter().copied().sum::<F>();
                    }
                });
                acc(grads, x, &|gx| {
                    let mut dcols = vec![F::zero(); c * 9 * plane];
                    F::gemm(c * 9, o, plane, wdata, true, g, false, &mut dcols, false);
                    col2im(&dcols, c, h, wd, *stride, gx);
                });
            }
            Op::Relu => {
                let x = self.data(ins[0]);
                acc(grads, ins[0], &|gx| {
                    for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(x) {
                        if xv > F::zero() {
                            *d = *d + gv;
                        }
                    }
                });
            }
            Op::Sigmoid => acc(grads, ins[0], &|gx| {
                for ((d, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                    *d = *d + gv * yv * (F::one() - yv);
                }
            }),
            Op::Tanh => acc(grads, ins[0], &|gx| {
                for ((d, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                    *d = *d + gv * (F::one() - yv * yv);
                }
            }),
            Op::Abs => {
                let x = self.data(ins[0]);
                acc(grads, ins[0], &|gx| {
                    for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(x) {
                        if xv > F::zero() {
                            *d = *d + gv;
                        } else if xv < F::zero() {
                            *d = *d - gv;
                        }
                    }
                });
            }
            Op::Ln => {
                let x = self.data(ins[0]);
                let lo = F::of(CLAMP_EPS);
                acc(grads, ins[0], &|gx| {
                    for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(x) {
                        if xv > lo {
                            *d = *d + gv / xv;
                        }
                    }
                });
            }
            Op::Scale(s) => {
                let s = F::of(*s);
                acc(grads, ins[0], &|gx| {
                    for (d, &gv) in gx.iter_mut().zip(g) {
                        *d = *d + gv * s;
                    }
                });
            }
            Op::AddScalar(_) | Op::Reshape => acc(grads, ins[0], &|gx| {
                for (d, &gv) in gx.iter_mut().zip(g) {
                    *d = *d + gv;
                }
            }),
            Op::Add | Op::Sub => {
                let neg = matches!(node.op, Op::Sub);
                acc(grads, ins[0], &|ga| {
                    for (d, &gv) in ga.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                });
                acc(grads, ins[1], &|gb| {
                    for (d, &gv) in gb.iter_mut().zip(g) {
                        *d = if neg { *d - gv } else { *d + gv };
                    }
                });
            }
            Op::Mul => {
                let (a, b) = (self.data(ins[0]), self.data(ins[1]));
                acc(grads, ins[0], &|ga| {
                    for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(b) {
                        *d = *d + gv * bv;
                    }
                });
                acc(grads, ins[1], &|gb| {
                    for ((d, &gv), &av) in gb.iter_mut().zip(g).zip(a) {
                        *d = *d + gv * av;
                    }
                });
            }
            Op::Div => {
                let b = self.data(ins[1]);
                acc(grads, ins[0], &|ga| {
                    for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(b) {
                        *d = *d + gv / bv;
                    }
                });
                acc(grads, ins[1], &|gb| {
                    for (((d, &gv), &bv), &yv) in gb.iter_mut().zip(g).zip(b).zip(y) {
                        *d = *d - gv * yv / bv;
                    }
                });
            }
            Op::Transpose => {
                let s = self.shape(ins[0]);
                let n = s.len();
                let (r, c) = (s[n - 2], s[n - 1]);
                let batch = g.len() / (r * c);
                let gt = transpose(g, batch, c, r);
                acc(grads, ins[0], &|gx| {
                    for (d, &gv) in gx.iter_mut().zip(&gt) {
                        *d = *d + gv;
                    }
                });
            }
            Op::Concat { axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &x in ins {
                    let len = self.shape(x)[*axis] * inner;
                    acc(grads, x, &|gx| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            for (d, &gv) in gx[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d = *d + gv;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::GlobalAvgPool => {
                let s = self.shape(ins[0]);
                let plane = s[1] * s[2];
                let inv = F::of(1.0 / plane as f64);
                acc(grads, ins[0], &|gx| {
                    for (ch, &gv) in gx.chunks_mut(plane).zip(g) {
                        ch.iter_mut().for_each(|d| *d = *d + gv * inv);
                    }
                });
            }
            Op::Upsample { height, width } => {
                let s = self.shape(ins[0]);
                let (c, h, w) = (s[0], s[1], s[2]);
                acc(grads, ins[0], &|gx| {
                    upsample_backward(g, c, (h, w), (*height, *width), gx)
                });
            }
            Op::MaskedSoftmax { .. } => {
                let cols = *node.value.shape().last().unwrap();
                acc(grads, ins[0], &|gx| {
                    for ((d, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((dv, &gv), &yv) in d.iter_mut().zip(gr).zip(yr) {
                            *dv = *dv + yv * (gv - dot);
                        }
                    }
                });
            }
            Op::SumAxis { axis } => {
                let s = self.shape(ins[0]);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let n = s[*axis];
                acc(grads, ins[0], &|gx| {
                    for o in 0..outer {
                        for a in 0..n {
                            let base = (o * n + a) * inner;
                            for i in 0..inner {
                                gx[base + i] = gx[base + i] + g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::SumAll => acc(grads, ins[0], &|gx| {
                gx.iter_mut().for_each(|d| *d = *d + g[0]);
            }),
            Op::MeanAll => {
                let inv = F::of(1.0 / self.value(ins[0]).numel() as f64);
                acc(grads, ins[0], &|gx| {
                    gx.iter_mut().for_each(|d| *d = *d + g[0] * inv);
                });
            }
            Op::ScaleChannels => {
                let (x, gate) = (ins[0], ins[1]);
                let plane = g.len() / self.shape(gate)[0];
                let (xd, gd) = (self.data(x), self.data(gate));
                acc(grads, x, &|gx| {
                    for ((d, gr), &gv) in gx.chunks_mut(plane).zip(g.chunks(plane)).zip(gd) {
                        for (dv, &up) in d.iter_mut().zip(gr) {
                            *dv = *dv + up * gv;
                        }
                    }
                });
                acc(grads, gate, &|gg| {
                    for ((d, gr), xr) in gg.iter_mut().zip(g.chunks(plane)).zip(xd.chunks(plane)) {
                        *d = *d + gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<F>();
                    }
                });
            }
            Op::SliceRows { start, len } => {
                let inner = g.len() / len;
                acc(grads, ins[0], &|gx| {
                    for (d, &gv) in gx[start * inner..(start + len) * inner].iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                });
            }
            Op::Embedding { ids } => {
                let e = self.shape(ins[0])[1];
                acc(grads, ins[0], &|gt| {
                    for (row, &id) in g.chunks(e).zip(ids) {
                        for (d, &gv) in gt[id * e..(id + 1) * e].iter_mut().zip(row) {
                            *d = *d + gv;
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_of_ones_is_inner_dim() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(Tensor::full(&[2, 3], 1.0));
        let b = tp.constant(Tensor::full(&[3, 4], 1.0));
        let c = tp.matmul(a, b).unwrap();
        assert_eq!(tp.shape(c), &[2, 4]);
        assert!(tp.data(c).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn relu_clips_negatives() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tp.relu(x);
        assert_eq!(tp.data(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn upsample_preserves_constants() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::full(&[1, 4, 4], 0.3));
        let y = tp.upsample2x(x).unwrap();
        assert_eq!(tp.shape(y), &[1, 8, 8]);
        assert!(tp.data(y).iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn softmax_examples() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(t(&[1, 4], &[0.0; 4]));
        let y = tp.masked_softmax(x, None).unwrap();
        assert_eq!(tp.data(y), &[0.25; 4]);

        let x = tp.constant(t(&[1, 2], &[0.0, 2f64.ln()]));
        let y = tp.masked_softmax(x, None).unwrap();
        assert!((tp.data(y)[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((tp.data(y)[1] - 2.0 / 3.0).abs() < 1e-12);

        let x = tp.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let y = tp
            .masked_softmax(x, Some(&[true, true, false]))
            .unwrap();
        assert_eq!(tp.data(y), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn softmax_rejects_fully_masked_rows() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(t(&[1, 2], &[1.0, 2.0]));
        assert!(tp.masked_softmax(x, Some(&[false, false])).is_err());
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(Tensor::zeros(&[2, 3]));
        let b = tp.constant(Tensor::zeros(&[2, 3]));
        let msg = tp.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn unknown_op_kind_rejected() {
        assert!(matches!(
            "softplus".parse::<OpKind>(),
            Err(Error::UnknownOp(_))
        ));
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
    }

    #[test]
    fn add_passes_gradient_and_mul_swaps_operands() {
        let mut tp = Tape::<f64>::new();
        let a = tp.input(t(&[2], &[2.0, -3.0]));
        let b = tp.input(t(&[2], &[5.0, 7.0]));
        let s = tp.add(a, b).unwrap();
        let p = tp.mul(s, b).unwrap();
        let l = tp.sum_all(p);
        tp.backward(l).unwrap();
        // l = (a+b)·b → dl/da = b, dl/db = a + 2b
        assert_eq!(tp.grad(a).unwrap(), &[5.0, 7.0]);
        assert_eq!(tp.grad(b).unwrap(), &[12.0, 11.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tp = Tape::<f64>::new();
        let a = tp.input(Tensor::zeros(&[2]));
        assert!(tp.backward(a).is_err());
    }

    #[test]
    fn dispatch_matches_direct_call() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(t(&[3], &[-1.0, 0.5, 2.0]));
        let d = tp.op_forward(OpKind::Abs, &[a], &OpAttrs::default()).unwrap();
        assert_eq!(tp.data(d), &[1.0, 0.5, 2.0]);
        let attrs = OpAttrs {
            scalar: Some(2.0),
            ..Default::default()
        };
        let s = tp.op_forward(OpKind::Scale, &[a], &attrs).unwrap();
        assert_eq!(tp.data(s), &[-2.0, 1.0, 4.0]);
    }
}
