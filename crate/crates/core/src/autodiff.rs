//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node whose inputs already live on the tape, so
//! node order is a topological order and [`Tape::backward`] is a single reverse
//! sweep. A tape can be differentiated once; call [`Tape::zero_grad`] before
//! reusing it.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Element, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Softmax over the last dimension.
    Softmax,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2x {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    Select {
        input: Var,
        index: usize,
    },
    Reshape {
        input: Var,
    },
    Dice {
        pred: Var,
        target: Vec<T>,
        smooth: T,
    },
    Bce {
        pred: Var,
        target: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn bce_clamp<T: Element>() -> T {
    match T::DTYPE {
        crate::tensor::DType::F32 => T::from_f64_lossy(1e-7),
        crate::tensor::DType::F64 => T::from_f64_lossy(1e-12),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Records a copy of `tensor` as a leaf with an explicit gradient flag.
    pub fn param(&mut self, tensor: &Tensor<T>, requires_grad: bool) -> Var {
        let mut value = tensor.clone();
        value.zero_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears all gradients so the tape may be differentiated again.
    /// Hash of the branch taken by every piecewise op on the tape: ReLU input
    /// signs, max-pool argmax positions and BCE clamp regions. Two recordings
    /// of the same graph with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let clamp = bce_clamp::<T>();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu { input } => {
                    i.hash(&mut h);
                    for &v in self.value(*input).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Bce { pred, .. } => {
                    i.hash(&mut h);
                    for &p in self.value(*pred).data() {
                        let region: u8 = if p < clamp {
                            0
                        } else if p > T::one() - clamp {
                            2
                        } else {
                            1
                        };
                        region.hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        self.consumed = false;
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(Error::dim(format!(
                "conv2d: input has {cin} channels but weight expects {wcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d: stride must be >= 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != cout {
                return Err(Error::dim(format!(
                    "conv2d: bias has {} elements, expected {cout}",
                    self.value(b).numel()
                )));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        let value = Tensor::new([n, cout, geom.ho, geom.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        let (n, c, h, w) = dims;
        if size == 0 || stride == 0 || size > h || size > w {
            return Err(Error::dim(format!(
                "max_pool2d: window {size} / stride {stride} invalid for {h}x{w}"
            )));
        }
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::dim(format!(
                "max_pool2d: spatial dims {h}x{w} not divisible by stride {stride}"
            )));
        }
        let (out, argmax) = kernels::max_pool_forward(self.value(input).data(), dims, size, stride);
        let ho = (h - size) / stride + 1;
        let wo = (w - size) / stride + 1;
        let rg = self.any_grad(&[input]);
        let value = Tensor::new([n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        let out = kernels::upsample2x_forward(self.value(input).data(), dims);
        let rg = self.any_grad(&[input]);
        let value = Tensor::new([dims.0, dims.1, 2 * dims.2, 2 * dims.3], out)?;
        Ok(self.push(value, Op::Upsample2x { input }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::dim(format!(
                "concat_channels: [{na},{ca},{ha},{wa}] vs [{nb},{cb},{hb},{wb}]"
            )));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            out.extend_from_slice(&da[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&db[n * cb * plane..(n + 1) * cb * plane]);
        }
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new([na, ca + cb, ha, wa], out)?;
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => Ok(self.relu(input)),
            Activation::Sigmoid => Ok(self.sigmoid(input)),
            Activation::Softmax => self.softmax(input),
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Relu { input }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Sigmoid { input }, rg)
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let last = *x
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax on a 0-D tensor"))?;
        let mut data = x.data().to_vec();
        if last > 0 {
            for row in data.chunks_mut(last) {
                softmax_in_place(row);
            }
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Softmax { input }, rg))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, f) = self.value(input).dims2()?;
        let (wf, k) = self.value(weight).dims2()?;
        if wf != f {
            return Err(Error::dim(format!(
                "dense: input has {f} features, weight expects {wf}"
            )));
        }
        if self.value(bias).numel() != k {
            return Err(Error::dim(format!(
                "dense: bias has {} elements, expected {k}",
                self.value(bias).numel()
            )));
        }
        let mut out = vec![T::zero(); n * k];
        T::gemm(
            n,
            f,
            k,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            false,
            &mut out,
            false,
        );
        let b = self.value(bias).data();
        for row in out.chunks_mut(k) {
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o = *o + bv);
        }
        let rg = self.any_grad(&[input, weight, bias]);
        let value = Tensor::new([n, k], out)?;
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let plane = h * w;
        let inv = T::one() / T::from_usize(plane.max(1)).unwrap();
        let out = self
            .value(input)
            .data()
            .chunks(plane.max(1))
            .take(n * c)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.any_grad(&[input]);
        let value = Tensor::new([n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { input }, rg))
    }

    /// Batch norm using batch statistics; updates `stats` with momentum [`BN_MOMENTUM`].
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
    ) -> Result<Var> {
        let (n, c, h, w) = self.bn_check(input, gamma, beta, stats.channels())?;
        let plane = h * w;
        let m = n * plane;
        if m == 0 {
            return Err(Error::dim("batch_norm: empty batch"));
        }
        let eps = T::from_f64_lossy(BN_EPSILON);
        let mom = T::from_f64_lossy(BN_MOMENTUM);
        let mf = T::from_usize(m).unwrap();
        let x = self.value(input).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s = s + x[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
            let mu = s / mf;
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &x[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                    sq = sq + (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / mf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(input, gamma, beta, &mean, &inv_std);

        let unbias = if m > 1 {
            mf / T::from_usize(m - 1).unwrap()
        } else {
            T::one()
        };
        for ch in 0..c {
            stats.mean[ch] = mom * stats.mean[ch] + (T::one() - mom) * mean[ch];
            stats.var[ch] = mom * stats.var[ch] + (T::one() - mom) * var[ch] * unbias;
        }
        stats.initialized = true;

        let rg = self.any_grad(&[input, gamma, beta]);
        let value = Tensor::new([n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            rg,
        ))
    }

    /// Batch norm using running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats<T>,
        layer: &str,
    ) -> Result<Var> {
        if !stats.initialized {
            return Err(Error::UninitializedStats(layer.to_string()));
        }
        let (n, c, h, w) = self.bn_check(input, gamma, beta, stats.channels())?;
        let eps = T::from_f64_lossy(BN_EPSILON);
        let inv_std: Vec<T> = stats
            .var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let (out, xhat) = self.bn_apply(input, gamma, beta, &stats.mean, &inv_std);
        let rg = self.any_grad(&[input, gamma, beta]);
        let value = Tensor::new([n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            rg,
        ))
    }

    fn bn_check(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
    ) -> Result<(usize, usize, usize, usize)> {
        let dims = self.value(input).dims4()?;
        if self.value(gamma).numel() != dims.1
            || self.value(beta).numel() != dims.1
            || channels != dims.1
        {
            return Err(Error::dim(format!(
                "batch_norm: {} channels but gamma/beta/stats have {}/{}/{}",
                dims.1,
                self.value(gamma).numel(),
                self.value(beta).numel(),
                channels
            )));
        }
        Ok(dims)
    }

    fn bn_apply(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
    ) -> (Vec<T>, Vec<T>) {
        let (n, c, h, w) = self.value(input).dims4().expect("checked");
        let plane = h * w;
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        (out, xhat)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel().max(1);
        let s = self.sum(input);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Picks one element (flat index) as a scalar.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.value(input);
        let v = *x.data().get(index).ok_or_else(|| {
            Error::dim(format!("select: index {index} out of {}", x.numel()))
        })?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::scalar(v), Op::Select { input, index }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = Tensor::new(shape, self.value(input).data().to_vec())?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Smoothed soft Dice loss `1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)`.
    pub fn dice_loss(&mut self, pred: Var, target: &[T], smooth: T) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return Err(Error::dim(format!(
                "dice_loss: prediction has {} elements, target {}",
                p.len(),
                target.len()
            )));
        }
        let inter: T = p.iter().zip(target).map(|(&a, &b)| a * b).sum();
        let total = p.iter().copied().sum::<T>() + target.iter().copied().sum::<T>();
        let two = T::from_f64_lossy(2.0);
        let loss = T::one() - (two * inter + smooth) / (total + smooth);
        let rg = self.any_grad(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice {
                pred,
                target: target.to_vec(),
                smooth,
            },
            rg,
        ))
    }

    /// Mean pixelwise binary cross-entropy on probabilities.
    pub fn bce_loss(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::dim(format!(
                "bce_loss: prediction has {} elements, target {}",
                p.len(),
                target.len()
            )));
        }
        let lo = bce_clamp::<T>();
        let hi = T::one() - lo;
        let total: T = p
            .iter()
            .zip(target)
            .map(|(&pv, &t)| {
                let q = pv.max(lo).min(hi);
                -(t * q.ln() + (T::one() - t) * (T::one() - q).ln())
            })
            .sum();
        let loss = total / T::from_usize(p.len()).unwrap();
        let rg = self.any_grad(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Weighted mean of `-log softmax(logits)[label]` over the batch.
    ///
    /// `class_weights` defaults to all ones; the normalizer is the sum of the
    /// weights of the observed labels.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: Option<&[T]>,
    ) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::dim(format!(
                "cross_entropy: {n} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::dim(format!(
                "cross_entropy: label {bad} outside 0..{}",
                k - 1
            )));
        }
        let weights: Vec<T> = match class_weights {
            Some(w) if w.len() == k => w.to_vec(),
            Some(w) => {
                return Err(Error::dim(format!(
                    "cross_entropy: {} class weights for {k} classes",
                    w.len()
                )))
            }
            None => vec![T::one(); k],
        };
        let z = self.value(logits).data();
        let mut probs = z.to_vec();
        let mut total = T::zero();
        let mut norm = T::zero();
        for (row, (&label, zrow)) in probs.chunks_mut(k).zip(labels.iter().zip(z.chunks(k))) {
            let max = zrow.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + zrow.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total = total + weights[label] * (lse - zrow[label]);
            norm = norm + weights[label];
            softmax_in_place(row);
        }
        if norm <= T::zero() {
            return Err(Error::dim("cross_entropy: total class weight is zero"));
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / norm),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights,
                probs,
            },
            rg,
        ))
    }

    /// Populates gradients of `loss` with respect to every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Gradient(
                "tape already differentiated; call zero_grad() first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Gradient(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Gradient(
                "loss does not depend on any tensor that requires grad".into(),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>| {
            match &mut grads[v.0] {
                Some(existing) => existing
                    .iter_mut()
                    .zip(delta)
                    .for_each(|(e, d)| *e = *e + d),
                slot @ None => *slot = Some(delta),
            }
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = (
                    needs(*input),
                    needs(*weight),
                    bias.is_some_and(|b| needs(b)),
                );
                let cg = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    geom,
                    need,
                );
                if let Some(d) = cg.input {
                    acc(grads, *input, d);
                }
                if let Some(d) = cg.weight {
                    acc(grads, *weight, d);
                }
                if let (Some(b), Some(d)) = (bias, cg.bias) {
                    acc(grads, *b, d);
                }
            }
            Op::MaxPool { input, argmax } => {
                if needs(*input) {
                    let mut d = vec![T::zero(); self.value(*input).numel()];
                    for (&src, &gv) in argmax.iter().zip(g) {
                        d[src] = d[src] + gv;
                    }
                    acc(grads, *input, d);
                }
            }
            Op::Upsample2x { input } => {
                if needs(*input) {
                    let dims = self.value(*input).dims4()?;
                    acc(grads, *input, kernels::upsample2x_backward(g, dims));
                }
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.value(*b).dims4()?.1;
                let plane = h * w;
                let stride = (ca + cb) * plane;
                if needs(*a) {
                    let mut d = Vec::with_capacity(n * ca * plane);
                    for bi in 0..n {
                        d.extend_from_slice(&g[bi * stride..bi * stride + ca * plane]);
                    }
                    acc(grads, *a, d);
                }
                if needs(*b) {
                    let mut d = Vec::with_capacity(n * cb * plane);
                    for bi in 0..n {
                        d.extend_from_slice(&g[bi * stride + ca * plane..(bi + 1) * stride]);
                    }
                    acc(grads, *b, d);
                }
            }
            Op::Relu { input } => {
                if needs(*input) {
                    let x = self.value(*input).data();
                    let d = x
                        .iter()
                        .zip(g)
                        .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    acc(grads, *input, d);
                }
            }
            Op::Sigmoid { input } => {
                if needs(*input) {
                    let y = node.value.data();
                    let d = y
                        .iter()
                        .zip(g)
                        .map(|(&yv, &gv)| gv * yv * (T::one() - yv))
                        .collect();
                    acc(grads, *input, d);
                }
            }
            Op::Softmax { input } => {
                if needs(*input) {
                    let y = node.value.data();
                    let last = *node.value.shape().last().unwrap_or(&1);
                    let mut d = vec![T::zero(); y.len()];
                    if last > 0 {
                        for ((drow, yrow), grow) in
                            d.chunks_mut(last).zip(y.chunks(last)).zip(g.chunks(last))
                        {
                            let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                            for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                                *dv = yv * (gv - dot);
                            }
                        }
                    }
                    acc(grads, *input, d);
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (n, f) = self.value(*input).dims2()?;
                let k = self.value(*weight).dims2()?.1;
                if needs(*input) {
                    let mut d = vec![T::zero(); n * f];
                    T::gemm(n, k, f, g, false, self.value(*weight).data(), true, &mut d, false);
                    acc(grads, *input, d);
                }
                if needs(*weight) {
                    let mut d = vec![T::zero(); f * k];
                    T::gemm(f, n, k, self.value(*input).data(), true, g, false, &mut d, false);
                    acc(grads, *weight, d);
                }
                if needs(*bias) {
                    let mut d = vec![T::zero(); k];
                    for row in g.chunks(k) {
                        d.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    acc(grads, *bias, d);
                }
            }
            Op::GlobalAvgPool { input } => {
                if needs(*input) {
                    let (n, c, h, w) = self.value(*input).dims4()?;
                    let plane = h * w;
                    let inv = T::one() / T::from_usize(plane.max(1)).unwrap();
                    let mut d = Vec::with_capacity(n * c * plane);
                    for &gv in g.iter().take(n * c) {
                        d.extend(std::iter::repeat_n(gv * inv, plane));
                    }
                    acc(grads, *input, d);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let plane = h * w;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..n {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for i in off..off + plane {
                            sum_g[ch] = sum_g[ch] + g[i];
                            sum_gx[ch] = sum_gx[ch] + g[i] * xhat[i];
                        }
                    }
                }
                if needs(*input) {
                    let mut d = vec![T::zero(); g.len()];
                    let mf = T::from_usize(n * plane).unwrap();
                    for bi in 0..n {
                        for ch in 0..c {
                            let off = (bi * c + ch) * plane;
                            let s = gam[ch] * inv_std[ch];
                            for i in off..off + plane {
                                d[i] = if *train {
                                    s * (g[i] - sum_g[ch] / mf - xhat[i] * sum_gx[ch] / mf)
                                } else {
                                    s * g[i]
                                };
                            }
                        }
                    }
                    acc(grads, *input, d);
                }
                if needs(*gamma) {
                    acc(grads, *gamma, sum_gx);
                }
                if needs(*beta) {
                    acc(grads, *beta, sum_g);
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    acc(grads, *a, vb.iter().zip(g).map(|(&y, &gv)| y * gv).collect());
                }
                if needs(*b) {
                    acc(grads, *b, va.iter().zip(g).map(|(&x, &gv)| x * gv).collect());
                }
            }
            Op::Scale { input, factor } => {
                if needs(*input) {
                    acc(grads, *input, g.iter().map(|&gv| gv * *factor).collect());
                }
            }
            Op::Sum { input } => {
                if needs(*input) {
                    acc(grads, *input, vec![g[0]; self.value(*input).numel()]);
                }
            }
            Op::Select { input, index } => {
                if needs(*input) {
                    let mut d = vec![T::zero(); self.value(*input).numel()];
                    d[*index] = g[0];
                    acc(grads, *input, d);
                }
            }
            Op::Reshape { input } => {
                if needs(*input) {
                    acc(grads, *input, g.to_vec());
                }
            }
            Op::Dice {
                pred,
                target,
                smooth,
            } => {
                if needs(*pred) {
                    let p = self.value(*pred).data();
                    let two = T::from_f64_lossy(2.0);
                    let inter: T = p.iter().zip(target).map(|(&a, &b)| a * b).sum();
                    let denom = p.iter().copied().sum::<T>()
                        + target.iter().copied().sum::<T>()
                        + *smooth;
                    let num = two * inter + *smooth;
                    let d = target
                        .iter()
                        .map(|&t| g[0] * -(two * t * denom - num) / (denom * denom))
                        .collect();
                    acc(grads, *pred, d);
                }
            }
            Op::Bce { pred, target } => {
                if needs(*pred) {
                    let p = self.value(*pred).data();
                    let lo = bce_clamp::<T>();
                    let hi = T::one() - lo;
                    let inv_n = T::one() / T::from_usize(p.len()).unwrap();
                    let d = p
                        .iter()
                        .zip(target)
                        .map(|(&pv, &t)| {
                            if pv < lo || pv > hi {
                                T::zero()
                            } else {
                                g[0] * inv_n * (pv - t) / (pv * (T::one() - pv))
                            }
                        })
                        .collect();
                    acc(grads, *pred, d);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                if needs(*logits) {
                    let k = weights.len();
                    let norm: T = labels.iter().map(|&l| weights[l]).sum();
                    let mut d = probs.clone();
                    for (row, &label) in d.chunks_mut(k).zip(labels) {
                        row[label] = row[label] - T::one();
                        let s = g[0] * weights[label] / norm;
                        row.iter_mut().for_each(|v| *v = *v * s);
                    }
                    acc(grads, *logits, d);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / sum);
}

/// Non-differentiable 2x2 average pooling, the left inverse of nearest upsampling.
pub fn avg_pool2x2<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = x.dims4()?;
    if dims.2 % 2 != 0 || dims.3 % 2 != 0 {
        return Err(Error::dim("avg_pool2x2 needs even spatial dims"));
    }
    Tensor::new(
        [dims.0, dims.1, dims.2 / 2, dims.3 / 2],
        kernels::avg_pool2x2(x.data(), dims),
    )
}
