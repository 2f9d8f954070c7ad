use std::fmt;

use super::kernels::{self, ConvGeom};
use super::{strides, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

macro_rules! op_kinds {
    ($($kind:ident => $name:literal),* $(,)?) => {
        /// Names every recorded operation; used for diagnostics and for
        /// fault injection in the gradient-check harness.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum OpKind { $($kind),* }

        impl OpKind {
            pub const ALL: &'static [OpKind] = &[$(OpKind::$kind),*];

            pub fn name(self) -> &'static str {
                match self { $(OpKind::$kind => $name),* }
            }

            pub fn from_name(name: &str) -> Option<Self> {
                match name { $($name => Some(OpKind::$kind),)* _ => None }
            }
        }
    };
}

op_kinds! {
    Leaf => "leaf",
    Add => "add",
    Sub => "sub",
    Mul => "mul",
    Div => "div",
    Scale => "scale",
    AddScalar => "add_scalar",
    Exp => "exp",
    Log => "log",
    Abs => "abs",
    Sqrt => "sqrt",
    Sigmoid => "sigmoid",
    Relu => "relu",
    Gelu => "gelu",
    ClampMin => "clamp_min",
    Sum => "sum",
    Mean => "mean",
    MeanLastDim => "mean_lastdim",
    Reshape => "reshape",
    Permute => "permute",
    Narrow => "narrow",
    Concat => "concat",
    Pad2d => "pad2d",
    MatMul => "matmul",
    AddBias => "add_bias",
    Conv2d => "conv2d",
    Softmax => "softmax",
    LogSoftmax => "log_softmax",
    LayerNorm => "layer_norm",
    Bilinear => "bilinear_resize",
    RoiAlign => "roi_align",
    Gather => "gather",
    FocalLoss => "focal_loss",
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    w: f64,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanLastDim(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Pad2d { x: Var, pads: [usize; 4] },
    MatMul { a: Var, b: Var, m: usize, k: usize, p: usize, batches: Vec<(usize, usize)> },
    AddBias { x: Var, b: Var, axis: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Bilinear { x: Var, ys: Vec<(usize, usize, f64)>, xs: Vec<(usize, usize, f64)> },
    RoiAlign { x: Var, batch: usize, ys: Vec<Tap>, xs: Vec<Tap> },
    Gather { x: Var, idx: Vec<usize> },
    FocalLoss { pred: Var, gt: Vec<f64>, alpha: f64, beta: f64, norm: f64 },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Abs(..) => OpKind::Abs,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::ClampMin(..) => OpKind::ClampMin,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::MeanLastDim(..) => OpKind::MeanLastDim,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute(..) => OpKind::Permute,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Concat { .. } => OpKind::Concat,
            Op::Pad2d { .. } => OpKind::Pad2d,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Bilinear { .. } => OpKind::Bilinear,
            Op::RoiAlign { .. } => OpKind::RoiAlign,
            Op::Gather { .. } => OpKind::Gather,
            Op::FocalLoss { .. } => OpKind::FocalLoss,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of every operation evaluated through it.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// consumers; [`Tape::backward`] walks the list back to front.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

fn dim_err<T>(msg: String) -> Result<T> {
    Err(TensorError::Dimension(msg))
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn accum(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts the backward rule of `kind` (gradients scaled by 1.5).
    /// Exists solely so the gradient checker can prove it detects faults.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        let mut value = t;
        value.grad = None;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::Numeric(format!("{} produced a non-finite value", op.kind())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.kind().name())?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(value, op, &[a, b])
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// Gaussian-error linear unit, exact erf form.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Result<Var> {
        self.unary(x, Op::ClampMin(x, min), |v| v.max(min))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over the last axis; a rank-1 input yields a one-element tensor.
    pub fn mean_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let data: Vec<f64> = self.data(x).chunks(d).map(|c| c.iter().sum::<f64>() / d as f64).collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(&out_shape, data)?;
        self.push(value, Op::MeanLastDim(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape, self.data(x).to_vec())
            .map_err(|_| TensorError::Dimension(format!("cannot reshape {:?} to {shape:?}", self.shape(x))))?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("invalid permutation {perm:?} for shape {shape:?}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.data(x), &shape, perm);
        let value = Tensor::new(&out_shape, data)?;
        self.push(value, Op::Permute(x, perm.to_vec()), &[x])
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return dim_err(format!("narrow({axis}, {start}, {len}) out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        self.push(value, Op::Narrow { x, axis, start }, &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return Err(TensorError::Usage("concat of zero tensors".into())),
        };
        if axis >= first.len() {
            return dim_err(format!("concat axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return dim_err(format!("concat: incompatible shapes {first:?} and {s:?}"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let value = Tensor::new(&out_shape, data)?;
        self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Zero padding of an NCHW map: `pads = [top, bottom, left, right]`.
    pub fn pad2d(&mut self, x: Var, pads: [usize; 4]) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x, "pad2d")?;
        let [top, bottom, left, right] = pads;
        let (oh, ow) = (h + top + bottom, w + left + right);
        let src = self.data(x);
        let mut data = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..h {
                let d = p * oh * ow + (y + top) * ow + left;
                data[d..d + w].copy_from_slice(&src[p * h * w + y * w..p * h * w + (y + 1) * w]);
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], data)?;
        self.push(value, Op::Pad2d { x, pads }, &[x])
    }

    fn nchw(&self, x: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape(x) {
            [n, c, h, w] => Ok((n, c, h, w)),
            ref s => dim_err(format!("{what} expects an NCHW tensor, got {s:?}")),
        }
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return dim_err(format!("matmul needs rank ≥ 2, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return dim_err(format!("matmul inner dimensions differ: {sa:?} × {sb:?}"));
        }
        let (lead_a, lead_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (m, batches, out_lead) = if lead_b.is_empty() {
            // Fold a's leading axes into the row dimension.
            let rows = lead_a.iter().product::<usize>() * m;
            (rows, vec![(0, 0)], lead_a.to_vec())
        } else {
            let rank = lead_a.len().max(lead_b.len());
            let pad = |s: &[usize]| -> Vec<usize> {
                let mut v = vec![1; rank - s.len()];
                v.extend_from_slice(s);
                v
            };
            let (pa, pb) = (pad(lead_a), pad(lead_b));
            let mut out = Vec::with_capacity(rank);
            for (&x, &y) in pa.iter().zip(&pb) {
                if x != y && x != 1 && y != 1 {
                    return dim_err(format!("matmul leading dims not broadcastable: {sa:?} × {sb:?}"));
                }
                out.push(x.max(y));
            }
            let (st_a, st_b) = (strides(&pa), strides(&pb));
            let total: usize = out.iter().product();
            let mut batches = Vec::with_capacity(total);
            let mut idx = vec![0usize; rank];
            for _ in 0..total {
                let (mut oa, mut ob) = (0, 0);
                for d in 0..rank {
                    if pa[d] != 1 {
                        oa += idx[d] * st_a[d];
                    }
                    if pb[d] != 1 {
                        ob += idx[d] * st_b[d];
                    }
                }
                batches.push((oa * m * k, ob * k * p));
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    if idx[d] < out[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            (m, batches, out)
        };
        let (da, db) = (self.data(a), self.data(b));
        let mut data = vec![0.0; batches.len() * m * p];
        for (bi, &(oa, ob)) in batches.iter().enumerate() {
            kernels::gemm(m, k, p, &da[oa..oa + m * k], &db[ob..ob + k * p], &mut data[bi * m * p..(bi + 1) * m * p]);
        }
        let mut out_shape = out_lead;
        out_shape.push(sa[sa.len() - 2]);
        out_shape.push(p);
        let value = Tensor::new(&out_shape, data)?;
        self.push(value, Op::MatMul { a, b, m, k, p, batches }, &[a, b])
    }

    /// Adds a vector `b` along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(b) != [shape[axis]] {
            return dim_err(format!("bias {:?} does not match axis {axis} of {shape:?}", self.shape(b)));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let c = shape[axis];
        let bias = self.data(b);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v + bias[(i / inner) % c]).collect();
        let value = Tensor::new(&shape, data)?;
        self.push(value, Op::AddBias { x, b, axis }, &[x, b])
    }

    /// `x @ w + b` over the last axis; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let axis = self.shape(y).len() - 1;
                self.add_bias(y, b, axis)
            }
            None => Ok(y),
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let (n, c, h, wd) = self.nchw(x, "conv2d input")?;
        let (o, cg, kh, kw) = self.nchw(w, "conv2d weight")?;
        if groups == 0 || c % groups != 0 || o % groups != 0 || cg != c / groups {
            return dim_err(format!("conv2d: {c} input channels, weight {:?}, groups {groups}", self.shape(w)));
        }
        if stride == 0 {
            return Err(TensorError::Usage("conv2d stride must be ≥ 1".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return dim_err(format!("conv2d bias {:?} for {o} outputs", self.shape(b)));
            }
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return dim_err(format!("conv2d kernel {kh}×{kw} larger than padded input {h}×{wd}"));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (wd + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom { channels: cg, height: h, width: wd, kh, kw, stride, padding, out_h, out_w };
        let og = o / groups;
        let (krows, pix) = (geom.col_rows(), geom.col_cols());
        let (dx, dw) = (self.data(x), self.data(w));
        let mut data = vec![0.0; n * o * pix];
        let mut col = vec![0.0; krows * pix];
        for ni in 0..n {
            for g in 0..groups {
                let xs = &dx[(ni * c + g * cg) * h * wd..(ni * c + (g + 1) * cg) * h * wd];
                kernels::im2col(xs, &geom, &mut col);
                let ws = &dw[g * og * krows..(g + 1) * og * krows];
                let out = &mut data[(ni * o + g * og) * pix..(ni * o + (g + 1) * og) * pix];
                kernels::gemm(og, krows, pix, ws, &col, out);
            }
        }
        if let Some(b) = b {
            let bias = self.data(b);
            for (i, chunk) in data.chunks_mut(pix).enumerate() {
                let bv = bias[i % o];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new(&[n, o, out_h, out_w], data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv2d { x, w, b, stride, padding, groups }, &inputs)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.lastdim(x, "softmax")?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(self.shape(x), data)?;
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.lastdim(x, "log_softmax")?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(self.shape(x), data)?;
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    fn lastdim(&self, x: Var, what: &str) -> Result<usize> {
        match self.shape(x).last() {
            Some(&d) if d >= 1 => Ok(d),
            _ => dim_err(format!("{what}: empty last dimension")),
        }
    }

    /// Normalizes each last-axis slice to zero mean / unit variance, then
    /// applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.lastdim(x, "layer_norm")?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return dim_err(format!("layer_norm affine params must be [{d}]"));
        }
        if eps <= 0.0 {
            return Err(TensorError::Usage("layer_norm eps must be positive".into()));
        }
        let (g, bt) = (self.data(gamma), self.data(beta));
        let src = self.data(x);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                data[r * d + j] = xh * g[j] + bt[j];
            }
        }
        let value = Tensor::new(self.shape(x), data)?;
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    /// Bilinear resize of an NCHW map with half-pixel centers
    /// (`align_corners = false`); source coordinates below zero clamp to 0.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x, "bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return dim_err("bilinear_resize target must be at least 1×1".into());
        }
        let ys = kernels::bilinear_taps(h, out_h);
        let xs = kernels::bilinear_taps(w, out_w);
        let src = self.data(x);
        let mut data = vec![0.0; n * c * out_h * out_w];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let out = &mut data[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                    let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                    out[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        let value = Tensor::new(&[n, c, out_h, out_w], data)?;
        self.push(value, Op::Bilinear { x, ys, xs }, &[x])
    }

    /// RoI-align crop of image `batch` of an NCHW map. `bbox` is
    /// `[x1, y1, x2, y2]` in feature-map coordinates where cell `i` spans
    /// `[i, i+1)`; samples sit at the centers of an `r×r` grid over the box.
    pub fn roi_align(&mut self, x: Var, batch: usize, bbox: [f64; 4], r: usize) -> Result<Var> {
        let (n, c, h, w) = self.nchw(x, "roi_align")?;
        if batch >= n || r == 0 {
            return dim_err(format!("roi_align batch {batch} / size {r} invalid for {:?}", self.shape(x)));
        }
        let x1 = bbox[0].clamp(0.0, w as f64);
        let y1 = bbox[1].clamp(0.0, h as f64);
        let x2 = bbox[2].clamp(0.0, w as f64);
        let y2 = bbox[3].clamp(0.0, h as f64);
        if !(x2 > x1 && y2 > y1) {
            return Err(TensorError::Usage(format!("degenerate RoI {bbox:?} after clamping to {w}×{h}")));
        }
        let taps = |lo: f64, hi: f64, len: usize| -> Vec<Tap> {
            (0..r)
                .map(|i| {
                    let s = lo + (i as f64 + 0.5) * (hi - lo) / r as f64 - 0.5;
                    let (lo, hi, w) = kernels::sample_taps(s, len);
                    Tap { lo, hi, w }
                })
                .collect()
        };
        let ys = taps(y1, y2, h);
        let xs = taps(x1, x2, w);
        let src = self.data(x);
        let mut data = vec![0.0; c * r * r];
        for ch in 0..c {
            let plane = &src[(batch * c + ch) * h * w..(batch * c + ch + 1) * h * w];
            for (i, ty) in ys.iter().enumerate() {
                for (j, tx) in xs.iter().enumerate() {
                    let top = plane[ty.lo * w + tx.lo] * (1.0 - tx.w) + plane[ty.lo * w + tx.hi] * tx.w;
                    let bot = plane[ty.hi * w + tx.lo] * (1.0 - tx.w) + plane[ty.hi * w + tx.hi] * tx.w;
                    data[(ch * r + i) * r + j] = top * (1.0 - ty.w) + bot * ty.w;
                }
            }
        }
        let value = Tensor::new(&[c, r, r], data)?;
        self.push(value, Op::RoiAlign { x, batch, ys, xs }, &[x])
    }

    /// Picks flat-indexed elements into a rank-1 tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.data(x);
        if idx.is_empty() {
            return Err(TensorError::Usage("gather with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return dim_err(format!("gather index {bad} out of range {}", src.len()));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(&[idx.len()], data)?;
        self.push(value, Op::Gather { x, idx: idx.to_vec() }, &[x])
    }

    /// Penalty-reduced pixelwise focal loss against a constant target map.
    /// Cells with target exactly 1 are positives; the sum is normalized by
    /// `max(#positives, 1)`. Logs are taken of values clamped at 1e-12.
    pub fn focal_loss(&mut self, pred: Var, gt: &Tensor, alpha: f64, beta: f64) -> Result<Var> {
        if self.shape(pred) != gt.shape() {
            return dim_err(format!("focal_loss: pred {:?} vs target {:?}", self.shape(pred), gt.shape()));
        }
        let p = self.data(pred);
        let positives = gt.data().iter().filter(|&&g| g == 1.0).count();
        let norm = positives.max(1) as f64;
        let mut total = 0.0;
        for (&pv, &g) in p.iter().zip(gt.data()) {
            total += if g == 1.0 {
                -(1.0 - pv).powf(alpha) * pv.max(1e-12).ln()
            } else {
                -(1.0 - g).powf(beta) * pv.powf(alpha) * (1.0 - pv).max(1e-12).ln()
            };
        }
        let value = Tensor::scalar(total / norm);
        let op = Op::FocalLoss { pred, gt: gt.data().to_vec(), alpha, beta, norm };
        self.push(value, op, &[pred])
    }

    /// Reverse pass from a one-element `loss`. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = adj[i].take() else { continue };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            self.backward_node(i, &g, &mut adj);
        }
        for (i, g) in leaf_grads {
            add_into(&mut self.nodes[i].value.grad, &g);
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let n_of = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.rg(v) {
                        add_into(&mut adj[v.0], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(&mut adj[a.0], g);
                }
                if self.rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut adj[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    let acc = accum(adj, *a, da.len());
                    for j in 0..g.len() {
                        acc[j] += g[j] * db[j];
                    }
                }
                if self.rg(*b) {
                    let acc = accum(adj, *b, db.len());
                    for j in 0..g.len() {
                        acc[j] += g[j] * da[j];
                    }
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    let acc = accum(adj, *a, da.len());
                    for j in 0..g.len() {
                        acc[j] += g[j] / db[j];
                    }
                }
                if self.rg(*b) {
                    let acc = accum(adj, *b, db.len());
                    for j in 0..g.len() {
                        acc[j] -= g[j] * da[j] / (db[j] * db[j]);
                    }
                }
            }
            Op::Scale(x, s) => {
                let acc = accum(adj, *x, g.len());
                acc.iter_mut().zip(g).for_each(|(a, gv)| *a += gv * s);
            }
            Op::AddScalar(x) => add_into(&mut adj[x.0], g),
            Op::Exp(x) => {
                let acc = accum(adj, *x, g.len());
                for j in 0..g.len() {
                    acc[j] += g[j] * out[j];
                }
            }
            Op::Log(x) => {
                let dx = self.data(*x);
                let acc = accum(adj, *x, g.len());
                for j in 0..g.len() {
                    acc[j] += g[j] / dx[j];
                }
            }
            Op::Abs(x) => {
                let dx = self.data(*x);
                let acc = accum(adj, *x, g.len());
                for j in 0..g.len() {
                    let s = if dx[j] > 0.0 { 1.0 } else if dx[j] < 0.0 { -1.0 } else { 0.0 };
                    acc[j] += g[j] * s;
                }
            }
            Op::Sqrt(x) => {
                let acc = accum(adj, *x, g.len());
                for j in 0..g.len() {
                    acc[j] += g[j] * 0.5 / out[j];
                }
            }
            Op::Sigmoid(x) => {
                let acc = accum(adj, *x, g.len());
                for j in 0..g.len() {
                    acc[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }
            Op::Relu(x) => {
                let dx = self.data(*x);
                let acc = accum(adj, *x, g.len());
                for j in 0..g.len() {
                    if dx[j] > 0.0 {
                        acc[j] += g[j];
                    }
                }
            }
            Op::Gelu(x) => {
                let dx = self.data(*x);
                let acc = accum(adj, *x, g.len());
                for j in 0..g.len() {
                    acc[j] += g[j] * kernels::gelu_grad(dx[j]);
                }
            }
            Op::ClampMin(x, m) => {
                let dx = self.data(*x);
                let acc = accum(adj, *x, g.len());
                for j in 0..g.len() {
                    if dx[j] > *m {
                        acc[j] += g[j];
                    }
                }
            }
            Op::Sum(x) => {
                let acc = accum(adj, *x, n_of(*x));
                acc.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::Mean(x) => {
                let n = n_of(*x);
                let acc = accum(adj, *x, n);
                acc.iter_mut().for_each(|a| *a += g[0] / n as f64);
            }
            Op::MeanLastDim(x) => {
                let d = *self.shape(*x).last().unwrap();
                let acc = accum(adj, *x, n_of(*x));
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += g[j / d] / d as f64;
                }
            }
            Op::Reshape(x) => add_into(&mut adj[x.0], g),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inv);
                add_into(&mut adj[x.0], &back);
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let len = node.value.shape()[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let acc = accum(adj, *x, n_of(*x));
                for o in 0..outer {
                    let base = (o * shape[*axis] + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    acc[base..base + len * inner].iter_mut().zip(src).for_each(|(a, v)| *a += v);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut off = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let acc = accum(adj, v, n_of(v));
                        for o in 0..outer {
                            let src = &g[o * row + off..o * row + off + len];
                            acc[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(a, s)| *a += s);
                        }
                    }
                    off += len;
                }
            }
            Op::Pad2d { x, pads } => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let acc = accum(adj, *x, n_of(*x));
                for p in 0..s[0] * s[1] {
                    for y in 0..h {
                        let src = p * oh * ow + (y + pads[0]) * ow + pads[2];
                        let dst = p * h * w + y * w;
                        acc[dst..dst + w].iter_mut().zip(&g[src..src + w]).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::MatMul { a, b, m, k, p, batches } => {
                let (m, k, p) = (*m, *k, *p);
                let (da, db) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    let acc = accum(adj, *a, da.len());
                    for (bi, &(oa, ob)) in batches.iter().enumerate() {
                        let gs = &g[bi * m * p..(bi + 1) * m * p];
                        kernels::gemm_nt(m, k, p, gs, &db[ob..ob + k * p], &mut acc[oa..oa + m * k]);
                    }
                }
                if self.rg(*b) {
                    let acc = accum(adj, *b, db.len());
                    for (bi, &(oa, ob)) in batches.iter().enumerate() {
                        let gs = &g[bi * m * p..(bi + 1) * m * p];
                        kernels::gemm_tn(m, k, p, &da[oa..oa + m * k], gs, &mut acc[ob..ob + k * p]);
                    }
                }
            }
            Op::AddBias { x, b, axis } => {
                if self.rg(*x) {
                    add_into(&mut adj[x.0], g);
                }
                if self.rg(*b) {
                    let shape = node.value.shape();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let c = shape[*axis];
                    let acc = accum(adj, *b, c);
                    for (j, gv) in g.iter().enumerate() {
                        acc[(j / inner) % c] += gv;
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, padding, groups } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (out_h, out_w) = (node.value.shape()[2], node.value.shape()[3]);
                let geom = ConvGeom { channels: cg, height: h, width: wd, kh, kw, stride: *stride, padding: *padding, out_h, out_w };
                let og = o / groups;
                let (krows, pix) = (geom.col_rows(), geom.col_cols());
                let (dx, dw) = (self.data(*x), self.data(*w));
                let mut col = vec![0.0; krows * pix];
                if self.rg(*w) {
                    let mut gw = vec![0.0; dw.len()];
                    for ni in 0..n {
                        for grp in 0..*groups {
                            let xs = &dx[(ni * c + grp * cg) * h * wd..(ni * c + (grp + 1) * cg) * h * wd];
                            kernels::im2col(xs, &geom, &mut col);
                            let gs = &g[(ni * o + grp * og) * pix..(ni * o + (grp + 1) * og) * pix];
                            kernels::gemm_nt(og, krows, pix, gs, &col, &mut gw[grp * og * krows..(grp + 1) * og * krows]);
                        }
                    }
                    add_into(&mut adj[w.0], &gw);
                }
                if self.rg(*x) {
                    let acc = accum(adj, *x, dx.len());
                    for ni in 0..n {
                        for grp in 0..*groups {
                            col.iter_mut().for_each(|v| *v = 0.0);
                            let ws = &dw[grp * og * krows..(grp + 1) * og * krows];
                            let gs = &g[(ni * o + grp * og) * pix..(ni * o + (grp + 1) * og) * pix];
                            kernels::gemm_tn(og, krows, pix, ws, gs, &mut col);
                            let xs = &mut acc[(ni * c + grp * cg) * h * wd..(ni * c + (grp + 1) * cg) * h * wd];
                            kernels::col2im(&col, &geom, xs);
                        }
                    }
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let acc = accum(adj, b, o);
                    for (j, chunk) in g.chunks(pix).enumerate() {
                        acc[j % o] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap();
                let acc = accum(adj, *x, g.len());
                for r in 0..g.len() / d {
                    let (ys, gs) = (&out[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: f64 = ys.iter().zip(gs).map(|(y, gv)| y * gv).sum();
                    for j in 0..d {
                        acc[r * d + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let d = *node.value.shape().last().unwrap();
                let acc = accum(adj, *x, g.len());
                for r in 0..g.len() / d {
                    let gs = &g[r * d..(r + 1) * d];
                    let s: f64 = gs.iter().sum();
                    for j in 0..d {
                        acc[r * d + j] += gs[j] - out[r * d + j].exp() * s;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.shape(*gamma)[0];
                let gm = self.data(*gamma);
                if self.rg(*gamma) {
                    let acc = accum(adj, *gamma, d);
                    for (j, gv) in g.iter().enumerate() {
                        acc[j % d] += gv * xhat[j];
                    }
                }
                if self.rg(*beta) {
                    let acc = accum(adj, *beta, d);
                    for (j, gv) in g.iter().enumerate() {
                        acc[j % d] += gv;
                    }
                }
                if self.rg(*x) {
                    let acc = accum(adj, *x, g.len());
                    let mut gx = vec![0.0; d];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            gx[j] = g[r * d + j] * gm[j];
                            s1 += gx[j];
                            s2 += gx[j] * xh[j];
                        }
                        for j in 0..d {
                            acc[r * d + j] += is / d as f64 * (d as f64 * gx[j] - s1 - xh[j] * s2);
                        }
                    }
                }
            }
            Op::Bilinear { x, ys, xs } => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (ys.len(), xs.len());
                let acc = accum(adj, *x, n_of(*x));
                for p in 0..s[0] * s[1] {
                    let plane = &mut acc[p * h * w..(p + 1) * h * w];
                    let gs = &g[p * oh * ow..(p + 1) * oh * ow];
                    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                            let gv = gs[oy * ow + ox];
                            plane[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                            plane[y0 * w + x1] += gv * (1.0 - wy) * wx;
                            plane[y1 * w + x0] += gv * wy * (1.0 - wx);
                            plane[y1 * w + x1] += gv * wy * wx;
                        }
                    }
                }
            }
            Op::RoiAlign { x, batch, ys, xs } => {
                let s = self.shape(*x).to_vec();
                let (c, h, w) = (s[1], s[2], s[3]);
                let r = ys.len();
                let acc = accum(adj, *x, n_of(*x));
                for ch in 0..c {
                    let plane = &mut acc[(batch * c + ch) * h * w..(batch * c + ch + 1) * h * w];
                    for (i, ty) in ys.iter().enumerate() {
                        for (j, tx) in xs.iter().enumerate() {
                            let gv = g[(ch * r + i) * r + j];
                            plane[ty.lo * w + tx.lo] += gv * (1.0 - ty.w) * (1.0 - tx.w);
                            plane[ty.lo * w + tx.hi] += gv * (1.0 - ty.w) * tx.w;
                            plane[ty.hi * w + tx.lo] += gv * ty.w * (1.0 - tx.w);
                            plane[ty.hi * w + tx.hi] += gv * ty.w * tx.w;
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                let acc = accum(adj, *x, n_of(*x));
                for (gv, &j) in g.iter().zip(idx) {
                    acc[j] += gv;
                }
            }
            Op::FocalLoss { pred, gt, alpha, beta, norm } => {
                let p = self.data(*pred);
                let acc = accum(adj, *pred, p.len());
                let scale = g[0] / norm;
                for j in 0..p.len() {
                    let (pv, t) = (p[j], gt[j]);
                    let d = if t == 1.0 {
                        let lp = if pv > 1e-12 { pv.ln() } else { 1e-12f64.ln() };
                        let dlog = if pv > 1e-12 { 1.0 / pv } else { 0.0 };
                        alpha * (1.0 - pv).powf(alpha - 1.0) * lp - (1.0 - pv).powf(*alpha) * dlog
                    } else {
                        let q = 1.0 - pv;
                        let lq = if q > 1e-12 { q.ln() } else { 1e-12f64.ln() };
                        let dlog = if q > 1e-12 { -1.0 / q } else { 0.0 };
                        -(1.0 - t).powf(*beta) * (alpha * pv.powf(alpha - 1.0) * lq + pv.powf(*alpha) * dlog)
                    };
                    acc[j] += scale * d;
                }
            }
        }
    }
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}
