use std::collections::BTreeMap;

use super::ops::{self, ChannelLayout, ConvDims};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d { input: Var, kernel: Var, padding: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddChannel(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    BatchMean(Var),
    BatchVar(Var),
    NormalizeAffine { x: Var, mean: Var, var: Var, gamma: Var, beta: Var, eps: f64 },
    AvgPool2d(Var, usize),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    SqrtEps(Var),
    Concat(Vec<Var>),
    TotalVariation(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddChannel(a, b) => vec![*a, *b],
            Conv2d { input, kernel, .. } => vec![*input, *kernel],
            NormalizeAffine { x, mean, var, gamma, beta, .. } => vec![*x, *mean, *var, *gamma, *beta],
            Concat(vs) => vs.clone(),
            Scale(a, _) | Relu(a) | BatchMean(a) | BatchVar(a) | AvgPool2d(a, _) | Reshape(a) | Softmax(a)
            | LogSoftmax(a) | Log(a) | Sum(a) | Mean(a) | Square(a) | SqrtEps(a) | TotalVariation(a) => {
                vec![*a]
            }
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation so it can be differentiated.
///
/// A tape is single-use in the sense that [`Tape::backward`] never mutates
/// it: calling backward twice yields identical gradients.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    checked: bool,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape in checked mode: any op producing NaN/Inf fails.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), checked: true }
    }

    pub fn unchecked() -> Self {
        Self { nodes: Vec::new(), checked: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, name: &'static str, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if self.checked && data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn require_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(shape_err(op, format!("expected rank {rank}, got {:?}", self.shape(v))));
        }
        Ok(())
    }

    fn channel_layout(&self, op: &'static str, v: Var) -> Result<ChannelLayout> {
        if self.shape(v).len() < 2 {
            return Err(shape_err(op, format!("expected [N, C, ...], got {:?}", self.shape(v))));
        }
        Ok(ChannelLayout::of(self.shape(v)))
    }

    fn channel_vec(&self, op: &'static str, v: Var, channels: usize) -> Result<()> {
        if self.shape(v) != [channels] {
            return Err(shape_err(op, format!("expected per-channel [{channels}], got {:?}", self.shape(v))));
        }
        Ok(())
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_rank("matmul", a, 2)?;
        self.require_rank("matmul", b, 2)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if sb[0] != k {
            return Err(shape_err("matmul", format!("inner dims {sa:?} x {sb:?}")));
        }
        let out = ops::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Op::MatMul(a, b), "matmul", vec![m, n], out)
    }

    /// Stride-1 convolution with symmetric zero padding.
    /// `x: [N, Cin, H, W]`, `kernel: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, padding: usize) -> Result<Var> {
        self.require_rank("conv2d", x, 4)?;
        self.require_rank("conv2d", kernel, 4)?;
        let d = self.conv_dims(x, kernel, padding)?;
        let out = ops::conv2d(self.value(x).data(), self.value(kernel).data(), d);
        self.push(
            Op::Conv2d { input: x, kernel, padding },
            "conv2d",
            vec![d.batch, d.out_ch, d.out_h(), d.out_w()],
            out,
        )
    }

    fn conv_dims(&self, x: Var, kernel: Var, padding: usize) -> Result<ConvDims> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx[1] != sk[1] || sk[2] != sk[3] {
            return Err(shape_err("conv2d", format!("input {sx:?} incompatible with kernel {sk:?}")));
        }
        if sx[2] + 2 * padding < sk[2] || sx[3] + 2 * padding < sk[2] {
            return Err(shape_err("conv2d", format!("kernel {sk:?} larger than padded input {sx:?}")));
        }
        Ok(ConvDims {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sk[0],
            kernel: sk[2],
            padding,
        })
    }

    fn zip(&mut self, op: Op, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, name, shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Add(a, b), "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Sub(a, b), "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Mul(a, b), "mul", a, b, |x, y| x * y)
    }

    /// Adds a per-channel vector along dimension 1 of `x`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let l = self.channel_layout("add_channel", x)?;
        self.channel_vec("add_channel", bias, l.channels)?;
        let b = self.value(bias).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v + b[l.channel_of(i)]).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::AddChannel(x, bias), "add_channel", shape, data)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let data = self.value(x).data().iter().map(|&v| v * f).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale(x, factor), "scale", shape, data)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu(x), "relu", shape, data)
    }

    /// Per-channel mean over batch and spatial dimensions.
    pub fn batch_mean(&mut self, x: Var) -> Result<Var> {
        let l = self.channel_layout("batch_stats", x)?;
        let mean = ops::channel_mean(self.value(x).data(), l);
        self.push(Op::BatchMean(x), "batch_stats", vec![l.channels], mean.into_iter().map(T::of).collect())
    }

    /// Per-channel biased variance over batch and spatial dimensions.
    pub fn batch_var(&mut self, x: Var) -> Result<Var> {
        let l = self.channel_layout("batch_stats", x)?;
        let (_, var) = ops::channel_var(self.value(x).data(), l);
        self.push(Op::BatchVar(x), "batch_stats", vec![l.channels], var.into_iter().map(T::of).collect())
    }

    /// `(mean, biased variance)` per channel.
    pub fn batch_stats(&mut self, x: Var) -> Result<(Var, Var)> {
        Ok((self.batch_mean(x)?, self.batch_var(x)?))
    }

    /// `(x - mean) / sqrt(var + eps) * gamma + beta`, per channel on dimension 1.
    pub fn normalize_affine(&mut self, x: Var, mean: Var, var: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let l = self.channel_layout("normalize_affine", x)?;
        for v in [mean, var, gamma, beta] {
            self.channel_vec("normalize_affine", v, l.channels)?;
        }
        let (m, s, g, b) = (self.value(mean).data(), self.value(var).data(), self.value(gamma).data(), self.value(beta).data());
        if s.iter().any(|&v| v.f64() + eps <= 0.0) {
            return Err(TensorError::Invalid { op: "normalize_affine", detail: "variance must be non-negative".into() });
        }
        let inv: Vec<f64> = s.iter().map(|v| 1.0 / (v.f64() + eps).sqrt()).collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = l.channel_of(i);
                T::of((v.f64() - m[c].f64()) * inv[c] * g[c].f64() + b[c].f64())
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::NormalizeAffine { x, mean, var, gamma, beta, eps }, "normalize_affine", shape, data)
    }

    /// Non-overlapping `k x k` average pooling; trailing rows/cols that do
    /// not fill a window are dropped.
    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        self.require_rank("avgpool2d", x, 4)?;
        let s = self.shape(x).to_vec();
        if k == 0 || s[2] < k || s[3] < k {
            return Err(shape_err("avgpool2d", format!("window {k} does not fit {s:?}")));
        }
        let (oh, ow) = (s[2] / k, s[3] / k);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        let norm = (k * k) as f64;
        for plane in 0..s[0] * s[1] {
            let base = plane * s[2] * s[3];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0f64;
                    for a in 0..k {
                        for b in 0..k {
                            acc += src[base + (i * k + a) * s[3] + j * k + b].f64();
                        }
                    }
                    out.push(T::of(acc / norm));
                }
            }
        }
        self.push(Op::AvgPool2d(x, k), "avgpool2d", vec![s[0], s[1], oh, ow], out)
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        let data = self.value(x).data().to_vec();
        self.push(Op::Reshape(x), "flatten", vec![n, rest.max(1)], data)
    }

    fn rows(&self, op: &'static str, x: Var) -> Result<usize> {
        self.require_rank(op, x, 2)?;
        Ok(self.shape(x)[1])
    }

    /// Row-wise softmax of a `[B, C]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.rows("softmax", x)?;
        let src = self.value(x).data();
        let lse = ops::row_logsumexp(src, cols);
        let data = src.iter().enumerate().map(|(i, v)| T::of((v.f64() - lse[i / cols]).exp())).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Softmax(x), "softmax", shape, data)
    }

    /// Row-wise log-softmax of a `[B, C]` tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.rows("log_softmax", x)?;
        let src = self.value(x).data();
        let lse = ops::row_logsumexp(src, cols);
        let data = src.iter().enumerate().map(|(i, v)| T::of(v.f64() - lse[i / cols])).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::LogSoftmax(x), "log_softmax", shape, data)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Log(x), "log", shape, data)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        self.push(Op::Sum(x), "sum", vec![1], vec![T::of(s)])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|v| v.f64()).sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean(x), "mean", vec![1], vec![T::of(s)])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * v).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Square(x), "square", shape, data)
    }

    /// `sqrt(x + eps)`.
    pub fn sqrt_eps(&mut self, x: Var, eps: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| T::of((v.f64() + eps).sqrt())).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::SqrtEps(x), "sqrt", shape, data)
    }

    /// Concatenation along dimension 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid { op: "concat", detail: "no inputs".into() });
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(shape_err("concat", format!("{:?} vs trailing {tail:?}", self.shape(p))));
            }
            rows += self.shape(p)[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(Op::Concat(parts.to_vec()), "concat", shape, data)
    }

    /// Sum of squared differences between vertically and horizontally
    /// adjacent pixels of `[N, C, H, W]`, divided by `N`.
    pub fn total_variation(&mut self, x: Var) -> Result<Var> {
        self.require_rank("total_variation", x, 4)?;
        let s = self.shape(x).to_vec();
        let src = self.value(x).data();
        let mut acc = 0.0f64;
        for plane in 0..s[0] * s[1] {
            let base = plane * s[2] * s[3];
            for i in 0..s[2] {
                for j in 0..s[3] {
                    let v = src[base + i * s[3] + j].f64();
                    if i + 1 < s[2] {
                        let d = src[base + (i + 1) * s[3] + j].f64() - v;
                        acc += d * d;
                    }
                    if j + 1 < s[3] {
                        let d = src[base + i * s[3] + j + 1].f64() - v;
                        acc += d * d;
                    }
                }
            }
        }
        self.push(Op::TotalVariation(x), "total_variation", vec![1], vec![T::of(acc / s[0] as f64)])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every trainable leaf gets an entry; leaves that do not influence the
    /// loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(TensorError::NotScalar(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = match grads.get_mut(id).and_then(Option::take) {
                    Some(g) => g.into_iter().map(T::of).collect(),
                    None => vec![T::zero(); node.value.numel()],
                };
                out.insert(Var(id), Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn vals(&self, v: Var) -> Vec<f64> {
        self.value(v).data().iter().map(|x| x.f64()).collect()
    }

    /// Vector-Jacobian products of node `id` against output gradient `g`.
    fn local_grads(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.vals(*a), self.vals(*b));
                vec![(*a, ops::matmul_nt(g, &bv, m, k, n)), (*b, ops::matmul_tn(&av, g, m, k, n))]
            }
            Op::Conv2d { input, kernel, padding } => {
                let d = self.conv_dims(*input, *kernel, *padding).expect("validated in forward");
                let (dx, dw) = ops::conv2d_backward(&self.vals(*input), &self.vals(*kernel), g, d);
                vec![(*input, dx), (*kernel, dw)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                vec![
                    (*a, g.iter().zip(&bv).map(|(g, b)| g * b).collect()),
                    (*b, g.iter().zip(&av).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::AddChannel(x, b) => {
                let l = ChannelLayout::of(out_shape);
                let mut db = vec![0.0; l.channels];
                for (i, gv) in g.iter().enumerate() {
                    db[l.channel_of(i)] += gv;
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Scale(x, f) => vec![(*x, g.iter().map(|v| v * f).collect())],
            Op::Relu(x) => {
                let xv = self.vals(*x);
                vec![(*x, g.iter().zip(&xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
            }
            Op::BatchMean(x) => {
                let l = ChannelLayout::of(self.shape(*x));
                let m = l.per_channel() as f64;
                let n = self.value(*x).numel();
                vec![(*x, (0..n).map(|i| g[l.channel_of(i)] / m).collect())]
            }
            Op::BatchVar(x) => {
                let l = ChannelLayout::of(self.shape(*x));
                let xv = self.vals(*x);
                let (mean, _) = ops::channel_var(&xv, l);
                let m = l.per_channel() as f64;
                let dx = xv
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let c = l.channel_of(i);
                        g[c] * 2.0 * (v - mean[c]) / m
                    })
                    .collect();
                vec![(*x, dx)]
            }
            Op::NormalizeAffine { x, mean, var, gamma, beta, eps } => {
                let l = ChannelLayout::of(out_shape);
                let (xv, mv, vv, gv) = (self.vals(*x), self.vals(*mean), self.vals(*var), self.vals(*gamma));
                let inv: Vec<f64> = vv.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut dx = vec![0.0; xv.len()];
                let (mut dm, mut dv, mut dg, mut db) =
                    (vec![0.0; l.channels], vec![0.0; l.channels], vec![0.0; l.channels], vec![0.0; l.channels]);
                for (i, (&xi, &gi)) in xv.iter().zip(g).enumerate() {
                    let c = l.channel_of(i);
                    let centered = xi - mv[c];
                    dx[i] = gi * gv[c] * inv[c];
                    dm[c] -= gi * gv[c] * inv[c];
                    dv[c] += gi * gv[c] * centered * -0.5 * inv[c].powi(3);
                    dg[c] += gi * centered * inv[c];
                    db[c] += gi;
                }
                vec![(*x, dx), (*mean, dm), (*var, dv), (*gamma, dg), (*beta, db)]
            }
            Op::AvgPool2d(x, k) => {
                let s = self.shape(*x);
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let mut dx = vec![0.0; self.value(*x).numel()];
                let norm = (k * k) as f64;
                for plane in 0..s[0] * s[1] {
                    let base = plane * s[2] * s[3];
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = g[(plane * oh + i) * ow + j] / norm;
                            for a in 0..*k {
                                for b in 0..*k {
                                    dx[base + (i * k + a) * s[3] + j * k + b] += gv;
                                }
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Softmax(x) => {
                let cols = out_shape[1];
                let y = self.vals(Var(id));
                let mut dx = vec![0.0; y.len()];
                for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LogSoftmax(x) => {
                let cols = out_shape[1];
                let y = self.vals(Var(id));
                let mut dx = vec![0.0; y.len()];
                for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let total: f64 = gr.iter().sum();
                    for c in 0..cols {
                        dx[r * cols + c] = gr[c] - yr[c].exp() * total;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Log(x) => {
                let xv = self.vals(*x);
                vec![(*x, g.iter().zip(&xv).map(|(g, x)| g / x).collect())]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Square(x) => {
                let xv = self.vals(*x);
                vec![(*x, g.iter().zip(&xv).map(|(g, x)| 2.0 * g * x).collect())]
            }
            Op::SqrtEps(x) => {
                let y = self.vals(Var(id));
                vec![(*x, g.iter().zip(&y).map(|(g, y)| g * 0.5 / y).collect())]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.value(p).numel();
                        let piece = g[offset..offset + n].to_vec();
                        offset += n;
                        (p, piece)
                    })
                    .collect()
            }
            Op::TotalVariation(x) => {
                let s = self.shape(*x);
                let xv = self.vals(*x);
                let scale = 2.0 * g[0] / s[0] as f64;
                let mut dx = vec![0.0; xv.len()];
                for plane in 0..s[0] * s[1] {
                    let base = plane * s[2] * s[3];
                    for i in 0..s[2] {
                        for j in 0..s[3] {
                            let here = base + i * s[3] + j;
                            if i + 1 < s[2] {
                                let below = here + s[3];
                                let d = xv[below] - xv[here];
                                dx[below] += scale * d;
                                dx[here] -= scale * d;
                            }
                            if j + 1 < s[3] {
                                let right = here + 1;
                                let d = xv[right] - xv[here];
                                dx[right] += scale * d;
                                dx[here] -= scale * d;
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 1], &[0.0; 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn batch_stats_two_samples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 1], &[1.0, 3.0]));
        let (m, v) = tape.batch_stats(x).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0]);
        assert_eq!(tape.value(v).data(), &[1.0]);
    }

    #[test]
    fn grad_of_sum_and_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[0.5, -1.0, 7.0]));
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[2.0, -3.0]));
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[4.0, -6.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let sq = tape.square(x).unwrap();
        assert!(matches!(tape.backward(sq), Err(TensorError::NotScalar(_))));
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(c).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), TensorError::Detached);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
        let y = tape.square(x).unwrap();
        let z = tape.mean(y).unwrap();
        let a = tape.backward(z).unwrap();
        let b = tape.backward(z).unwrap();
        assert!(a.get(x).unwrap().bit_eq(b.get(x).unwrap()));
    }

    #[test]
    fn checked_mode_rejects_non_finite() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, 1.0]));
        assert_eq!(tape.log(x).unwrap_err(), TensorError::NonFinite { op: "log" });

        let mut tape = Tape::<f64>::unchecked();
        let x = tape.constant(t(&[2], &[0.0, 1.0]));
        assert!(tape.log(x).is_ok());
    }

    #[test]
    fn conv2d_same_padding_preserves_size() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f64));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(t(&[1, 1, 3, 3], &k));
        let y = tape.conv2d(x, w, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::from_fn(vec![2, 3, 5, 5], |i| ((i * 37) % 11) as f32 * 0.1 - 0.4));
            let w = tape.constant(Tensor::from_fn(vec![4, 3, 3, 3], |i| ((i * 13) % 7) as f32 * 0.05 - 0.1));
            let y = tape.conv2d(x, w, 1).unwrap();
            let (m, v) = tape.batch_stats(y).unwrap();
            (tape.value(y).clone(), tape.value(m).clone(), tape.value(v).clone())
        };
        let (a, b) = (run(), run());
        assert!(a.0.bit_eq(&b.0) && a.1.bit_eq(&b.1) && a.2.bit_eq(&b.2));
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 5.0]));
        let a = tape.log_softmax(x).unwrap();
        let s = tape.softmax(x).unwrap();
        let b = tape.log(s).unwrap();
        for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
