//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation executed on it in execution order, so
//! the node list is already topologically sorted. [`Tape::backward`] walks it
//! once in reverse and returns a [`Gradients`] table; nothing is mutated, so
//! backward may be called repeatedly on the same tape. Parameter gradients
//! are moved into their [`ParamStore`] with [`ParamStore::accumulate`], which
//! adds to whatever is already there: call `zero_grad` between steps.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
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
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Deconv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ChannelAffine { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    GlobalAvgPool(Var),
    ChannelMul { x: Var, a: Var },
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Affine(Var, f64),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Softmax(Var),
    LogClamped { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (divisor `M - 1`) variance, the form running averages track.
    pub var_unbiased: Vec<f64>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| n.param.map(|p| (Var(i), p)))
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a trainable parameter; its gradient can later be moved into
    /// `store` with [`ParamStore::accumulate`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.value(id).clone(), true);
        self.nodes[v.0].param = Some(id);
        v
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_geom(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        transposed: bool,
    ) -> Result<ConvGeom> {
        let (batch, c_in, h, wd) = self.value(x).dims4()?;
        let ws = self.value(w).shape();
        let [w0, w1, kh, kw] = ws[..] else {
            return Err(Error::shape(op, format!("weight must be 4-d, got {ws:?}")));
        };
        if kh != kw {
            return Err(Error::shape(op, format!("only square kernels supported, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::shape(op, "stride must be positive"));
        }
        let (w_in, c_out) = if transposed { (w0, w1) } else { (w1, w0) };
        if w_in != c_in {
            return Err(Error::shape(op, format!("input has {c_in} channels, weight expects {w_in}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(Error::shape(
                    op,
                    format!("bias {:?} does not match {c_out} output channels", self.value(b).shape()),
                ));
            }
        }
        let k = kh;
        let (ho, wo) = if transposed {
            let out = |d: usize| ((d - 1) * stride + k).checked_sub(2 * padding).filter(|&o| o > 0);
            match (out(h), out(wd)) {
                (Some(ho), Some(wo)) => (ho, wo),
                _ => return Err(Error::shape(op, "padding leaves an empty output")),
            }
        } else {
            let out = |d: usize| -> Result<usize> {
                let span = (d + 2 * padding)
                    .checked_sub(k)
                    .ok_or_else(|| Error::shape(op, format!("kernel {k} larger than padded input {d}")))?;
                if span % stride != 0 {
                    return Err(Error::shape(
                        op,
                        format!("({d} + 2*{padding} - {k}) is not divisible by stride {stride}"),
                    ));
                }
                Ok(span / stride + 1)
            };
            (out(h)?, out(wd)?)
        };
        Ok(ConvGeom { batch, c_in, c_out, kernel: k, stride, padding, h, w: wd, ho, wo })
    }

    /// Cross-correlation with weight `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.conv_geom("conv2d", x, w, b, stride, padding, false)?;
        let out =
            kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let value = Tensor::new(vec![geom.batch, geom.c_out, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Transposed convolution with weight `[C_in, C_out, k, k]`;
    /// output side is `(H - 1)·s - 2p + k`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.conv_geom("deconv2d", x, w, b, stride, padding, true)?;
        let out = kernels::deconv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![geom.batch, geom.c_out, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("deconv2d", value, Op::Deconv2d { x, w, b, geom }, &inputs)
    }

    fn channel_params(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape(
                    op,
                    format!("affine parameter {:?} does not match {c} channels", self.value(p).shape()),
                ));
            }
        }
        Ok((n, c, h * w))
    }

    /// Batch normalization with statistics from the current batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, hw) = self.channel_params("batch_norm", x, gamma, beta)?;
        let count = n * hw;
        if count < 2 {
            return Err(Error::shape("batch_norm", "needs at least two values per channel"));
        }
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for s_i in 0..n {
                s += xv[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw].iter().sum::<f64>();
            }
            mean[ch] = s / count as f64;
            let mut ss = 0.0;
            for s_i in 0..n {
                ss += xv[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
            var[ch] = ss / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s_i in 0..n {
            for ch in 0..c {
                let base = (s_i * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let stats =
            BatchStats { mean, var_unbiased: var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect() };
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let v = self.push("batch_norm", value, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])?;
        Ok((v, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, hw) = self.channel_params("batch_norm", x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics do not match channels"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        for s_i in 0..n {
            for ch in 0..c {
                let base = (s_i * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = g[ch] * (xv[i] - mean[ch]) * inv_std[ch] + bt[ch];
                }
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(
            "batch_norm",
            value,
            Op::ChannelAffine { x, gamma, beta, mean: mean.to_vec(), inv_std },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push("leaky_relu", value, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::tanh);
        self.push("tanh", value, Op::Tanh(x), &[x])
    }

    /// `[N, C, H, W] -> [N, C, 1, 1]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let data: Vec<f64> =
            self.value(x).data().chunks(hw).map(|plane| plane.iter().sum::<f64>() / hw as f64).collect();
        let value = Tensor::new(vec![n, c, 1, 1], data)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(x), &[x])
    }

    /// Scales each channel of `x: [N, C, H, W]` by `a: [N, C, 1, 1]`.
    pub fn channel_mul(&mut self, x: Var, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(a).shape() != [n, c, 1, 1] {
            return Err(Error::shape(
                "channel_mul",
                format!("weights {:?} do not match input {:?}", self.value(a).shape(), [n, c, h, w]),
            ));
        }
        let hw = h * w;
        let av = self.value(a).data();
        let data: Vec<f64> =
            self.value(x).data().chunks(hw).zip(av).flat_map(|(plane, &s)| plane.iter().map(move |v| v * s)).collect();
        let value = Tensor::new(vec![n, c, h, w], data)?;
        self.push("channel_mul", value, Op::ChannelMul { x, a }, &[x, a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise product with a constant (non-differentiated) tensor.
    pub fn mul_const(&mut self, x: Var, factor: &Tensor) -> Result<Var> {
        same_shape("mul_const", self.value(x), factor)?;
        let value = self.value(x).zip_map(factor, |a, b| a * b)?;
        self.push("mul_const", value, Op::MulConst(x, factor.data().to_vec()), &[x])
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push("affine", value, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// `out[i] = x[index[i]]`, viewed with `shape`. Expresses any
    /// reshape-with-transpose; the backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, shape: impl Into<Vec<usize>>, index: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of range {}", src.len())));
        }
        let data: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push("gather", value, Op::Gather(x, index), &[x])
    }

    /// Batched product over the leading axes: `[.., M, K] · [.., K, N]`, or
    /// `[.., M, K] · [.., N, K]ᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", format!("{sa:?} vs {sb:?}")));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(Error::shape("matmul", format!("inner dimensions {k} vs {kb}")));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let a_i = &av[i * m * k..(i + 1) * m * k];
            let b_i = &bv[i * k * n..(i + 1) * k * n];
            let c_i = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(m, k, n, a_i, b_i, c_i);
            } else {
                kernels::gemm_nn(m, k, n, a_i, b_i, c_i);
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, batch, m, k, n, trans_b }, &[a, b])
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let l = *xv.shape().last().expect("non-empty shape");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(l) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where clamping is active.
    pub fn log_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.clamp(lo, hi).ln());
        self.push("log", value, Op::LogClamped { x, lo, hi }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean());
        self.push("mean", value, Op::Mean(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// with `logits: [N, K]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let [n, k] = lv.shape()[..] else {
            return Err(Error::shape("cross_entropy", format!("logits must be [N, K], got {:?}", lv.shape())));
        };
        if labels.len() != n || labels.iter().any(|&y| y >= k) {
            return Err(Error::shape("cross_entropy", "labels do not match logits"));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            softmax_in_place(row);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        let value = Tensor::scalar(loss / n as f64);
        self.push("cross_entropy", value, Op::CrossEntropy { logits, probs, labels: labels.to_vec() }, &[logits])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Backward(format!("variable {} was not recorded on this tape", loss.0)))?;
        if root.value.numel() != 1 {
            return Err(Error::Backward(format!("loss must be a scalar, got shape {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } | Op::Deconv2d { x, w, b, geom } => {
                let backward = if matches!(node.op, Op::Conv2d { .. }) {
                    kernels::conv2d_backward
                } else {
                    kernels::deconv2d_backward
                };
                let (dx, dw, db) = backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = dx {
                    add_into(&mut grads[x.0], &dx);
                }
                if let Some(dw) = dw {
                    add_into(&mut grads[w.0], &dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = node.value.dims4().expect("4-d");
                let hw = h * w;
                let count = (n * hw) as f64;
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch] / count;
                            for i in base..base + hw {
                                dx[i] = k * (count * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                if self.wants(*gamma) {
                    add_into(&mut grads[gamma.0], &sum_gx);
                }
                if self.wants(*beta) {
                    add_into(&mut grads[beta.0], &sum_g);
                }
            }
            Op::ChannelAffine { x, gamma, beta, mean, inv_std } => {
                let (n, c, h, w) = node.value.dims4().expect("4-d");
                let hw = h * w;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            dx[i] = g[i] * gv[ch] * inv_std[ch];
                            dgamma[ch] += g[i] * (xv[i] - mean[ch]) * inv_std[ch];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.wants(*x) {
                    add_into(&mut grads[x.0], &dx);
                }
                if self.wants(*gamma) {
                    add_into(&mut grads[gamma.0], &dgamma);
                }
                if self.wants(*beta) {
                    add_into(&mut grads[beta.0], &dbeta);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d: Vec<f64> = g.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let d: Vec<f64> = g.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { slope * g }).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Tanh(x) => {
                let d: Vec<f64> = g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4().expect("4-d");
                let hw = h * w;
                let d: Vec<f64> = g.iter().flat_map(|&gc| std::iter::repeat_n(gc / hw as f64, hw)).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::ChannelMul { x, a } => {
                let (_, _, h, w) = node.value.dims4().expect("4-d");
                let hw = h * w;
                let xv = self.value(*x).data();
                let av = self.value(*a).data();
                if self.wants(*x) {
                    let d: Vec<f64> = g.chunks(hw).zip(av).flat_map(|(gp, &s)| gp.iter().map(move |v| v * s)).collect();
                    add_into(&mut grads[x.0], &d);
                }
                if self.wants(*a) {
                    let d: Vec<f64> = g
                        .chunks(hw)
                        .zip(xv.chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                        .collect();
                    add_into(&mut grads[a.0], &d);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(&mut grads[v.0], g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(g, o)| g * o).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(g, o)| g * o).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::MulConst(x, factor) => {
                let d: Vec<f64> = g.iter().zip(factor).map(|(g, f)| g * f).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Affine(x, scale) => {
                let d: Vec<f64> = g.iter().map(|g| g * scale).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g),
            Op::Gather(x, index) => {
                let mut d = vec![0.0; self.value(*x).numel()];
                for (gi, &src) in g.iter().zip(index) {
                    d[src] += gi;
                }
                add_into(&mut grads[x.0], &d);
            }
            Op::MatMul { a, b, batch, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..*batch {
                        let g_i = &g[i * m * n..(i + 1) * m * n];
                        let b_i = &bv[i * k * n..(i + 1) * k * n];
                        let d_i = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            kernels::gemm_nn(m, n, k, g_i, b_i, d_i);
                        } else {
                            kernels::gemm_nt(m, n, k, g_i, b_i, d_i);
                        }
                    }
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..*batch {
                        let g_i = &g[i * m * n..(i + 1) * m * n];
                        let a_i = &av[i * m * k..(i + 1) * m * k];
                        let d_i = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            kernels::gemm_tn(n, m, k, g_i, a_i, d_i);
                        } else {
                            kernels::gemm_tn(k, m, n, a_i, g_i, d_i);
                        }
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Softmax(x) => {
                let l = *node.value.shape().last().expect("non-empty");
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_mut(l).zip(g.chunks(l)).zip(y.chunks(l)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = yv * (gv - dot);
                    }
                }
                add_into(&mut grads[x.0], &d);
            }
            Op::LogClamped { x, lo, hi } => {
                let xv = self.value(*x).data();
                let d: Vec<f64> =
                    g.iter().zip(xv).map(|(g, &v)| if v < *lo || v > *hi { 0.0 } else { g / v }).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).numel()];
                add_into(&mut grads[x.0], &d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let d = vec![g[0] / n as f64; n];
                add_into(&mut grads[x.0], &d);
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &y) in d.chunks_mut(k).zip(labels) {
                    row[y] -= scale;
                }
                add_into(&mut grads[logits.0], &d);
            }
        }
    }
}

/// Logistic function, kept strictly inside (0, 1) even where `f64` would
/// round to an endpoint.
pub fn sigmoid(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Max-subtracted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
