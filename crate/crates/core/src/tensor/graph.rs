//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! Every operation appends one node. [`Graph::backward`] walks the nodes in
//! exact reverse recording order and accumulates gradients additively into
//! every input, so recording order is a valid topological order.

use super::array::Tensor;
use super::conv::{conv_backward, conv_forward, ConvGeom, Padding};
use super::fft::{column_multiplicity, half_width, Plan2d};
use super::resample;
use crate::error::{arg_err, shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, f64),
    AddConst(Var),
    ScaleBy { x: Var, s: Var },
    Abs(Var),
    Square(Var),
    Relu(Var),
    Prelu { x: Var, slope: Var },
    Sum(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Spectrum(Var),
    InverseSpectrum(Var),
    Upsample2(Var),
    Downsample2(Var),
    Concat { parts: Vec<Var> },
    Narrow { x: Var, start: usize },
    ReverseHuber { x: Var, c: f64 },
    Pick { x: Var, index: usize },
    SoftmaxCrossEntropy { logits: Var, probs: Tensor, targets: Vec<Option<(usize, f64)>>, norm: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-channel running statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average toward the batch statistics.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (r, &m) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, &v) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

/// Statistics observed by a training-mode batch norm, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

/// Tape of recorded operations plus accumulated leaf gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn plane_iter(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2] * shape[3])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Learnable leaf: receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a learnable leaf, if any backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        let ng = self.ng(x);
        self.push(v, Op::MulConst(x, c), ng)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        let ng = self.ng(x);
        self.push(v, Op::AddConst(x), ng)
    }

    /// Multiply a tensor by a one-element (learnable) scalar.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scale_by", format!("scale must hold one value, got {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let v = self.value(x).map(|a| a * sv);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(v, Op::ScaleBy { x, s }, ng))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        let ng = self.ng(x);
        self.push(v, Op::Abs(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        let ng = self.ng(x);
        self.push(v, Op::Square(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { 0.0 });
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    /// Channel-wise parametric ReLU on a `[B, C, ...]` tensor.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let xs = self.value(x);
        let c = *xs.shape().get(1).ok_or_else(|| shape_err("prelu", "input needs a channel axis"))?;
        if self.value(slope).len() != c {
            return Err(shape_err("prelu", format!("{} slopes for {c} channels", self.value(slope).len())));
        }
        let inner: usize = xs.shape()[2..].iter().product();
        let sl = self.value(slope).data();
        let mut out = xs.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            if *v <= 0.0 {
                *v *= sl[(i / inner) % c];
            }
        }
        let v = Tensor::new(xs.shape(), out)?;
        let ng = self.ng(x) || self.ng(slope);
        Ok(self.push(v, Op::Prelu { x, slope }, ng))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.mul_const(s, 1.0 / n)
    }

    /// 2D convolution (cross-correlation) with `same` padding and stride.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let [bs, cin, h, wd] = self.value(x).dims4("conv2d")?;
        let [cout, wcin, kh, kw] = self.value(w).dims4("conv2d weight")?;
        if wcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("input has {cin} channels but weight {:?} expects {wcin}", self.shape(w)),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(arg_err("conv2d", format!("kernel {kh}x{kw} must have odd extents")));
        }
        if stride == 0 || h % stride != 0 || wd % stride != 0 {
            return Err(arg_err("conv2d", format!("extent {h}x{wd} not divisible by stride {stride}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(shape_err("conv2d", format!("bias has {} entries for {cout} outputs", self.value(b).len())));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            ho: h / stride,
            wo: wd / stride,
            padding,
        };
        let mut out = vec![0.0; bs * cout * geom.p()];
        conv_forward(
            &geom,
            bs,
            cout,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let v = Tensor::new(&[bs, cout, geom.ho, geom.wo], out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, ng))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<[usize; 4]> {
        let d = self.value(x).dims4("batch_norm")?;
        if !(eps > 0.0) {
            return Err(arg_err("batch_norm", format!("eps must be positive, got {eps}")));
        }
        if self.value(gamma).len() != d[1] || self.value(beta).len() != d[1] {
            return Err(shape_err("batch_norm", format!("affine parameters do not match {} channels", d[1])));
        }
        if d[0] * d[2] * d[3] == 0 {
            return Err(Error::Empty { op: "batch_norm", detail: "no elements per channel".into() });
        }
        Ok(d)
    }

    /// Batch normalization with batch statistics; returns them for running updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let [bs, c, h, w] = self.check_bn(x, gamma, beta, eps)?;
        let hw = h * w;
        let n = (bs * hw) as f64;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..bs {
            for ch in 0..c {
                mean[ch] += xv[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for b in 0..bs {
            for ch in 0..c {
                let m = mean[ch];
                var[ch] += xv[(b * c + ch) * hw..][..hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..bs {
            for ch in 0..c {
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let unbiased = if n > 1.0 {
            var.iter().map(|v| v * n / (n - 1.0)).collect()
        } else {
            var.clone()
        };
        let shape = self.shape(x).to_vec();
        let v = Tensor::new(&shape, out)?;
        let xhat = Tensor::new(&shape, xhat)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let y = self.push(v, Op::BatchNormTrain { x, gamma, beta, xhat, inv_std }, ng);
        Ok((y, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, stats: &RunningStats, eps: f64) -> Result<Var> {
        let [bs, c, h, w] = self.check_bn(x, gamma, beta, eps)?;
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(shape_err("batch_norm", "running statistics do not match channel count"));
        }
        let hw = h * w;
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        for b in 0..bs {
            for ch in 0..c {
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    out[i] = gv[ch] * (xv[i] - stats.mean[ch]) * inv_std[ch] + bv[ch];
                }
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let mean = stats.mean.clone();
        Ok(self.push(v, Op::BatchNormEval { x, gamma, beta, mean, inv_std }, ng))
    }

    fn check_pow2(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        let d = self.value(x).dims4(op)?;
        if !d[2].is_power_of_two() || !d[3].is_power_of_two() {
            return Err(arg_err(op, format!("spatial extent {}x{} must be powers of two", d[2], d[3])));
        }
        Ok(d)
    }

    /// Real 2D DFT with real parts in channels `0..C` and imaginary parts in `C..2C`.
    pub fn spectrum(&mut self, x: Var) -> Result<Var> {
        let [bs, c, h, w] = self.check_pow2("rfft2", x)?;
        let wf = half_width(w);
        let plan = Plan2d::new(h, w);
        let xv = self.value(x).data();
        let mut out = vec![0.0; bs * 2 * c * h * wf];
        let sp = h * wf;
        for b in 0..bs {
            for ch in 0..c {
                let src = &xv[(b * c + ch) * h * w..][..h * w];
                let base = b * 2 * c * sp;
                let (lo, hi) = out[base..base + 2 * c * sp].split_at_mut(c * sp);
                plan.rfft2(src, &mut lo[ch * sp..(ch + 1) * sp], &mut hi[ch * sp..(ch + 1) * sp]);
            }
        }
        let v = Tensor::new(&[bs, 2 * c, h, wf], out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Spectrum(x), ng))
    }

    /// Inverse of [`Graph::spectrum`] back to `width` real columns.
    pub fn inverse_spectrum(&mut self, s: Var, width: usize) -> Result<Var> {
        let [bs, c2, h, wf] = self.value(s).dims4("irfft2")?;
        if c2 % 2 != 0 || !width.is_power_of_two() || half_width(width) != wf || !h.is_power_of_two() {
            return Err(shape_err("irfft2", format!("spectrum {:?} does not match width {width}", self.shape(s))));
        }
        let c = c2 / 2;
        let plan = Plan2d::new(h, width);
        let sv = self.value(s).data();
        let sp = h * wf;
        let mut out = vec![0.0; bs * c * h * width];
        for b in 0..bs {
            for ch in 0..c {
                let re = &sv[(b * c2 + ch) * sp..][..sp];
                let im = &sv[(b * c2 + c + ch) * sp..][..sp];
                plan.irfft2(re, im, &mut out[(b * c + ch) * h * width..][..h * width]);
            }
        }
        let v = Tensor::new(&[bs, c, h, width], out)?;
        let ng = self.ng(s);
        Ok(self.push(v, Op::InverseSpectrum(s), ng))
    }

    /// Forward real 2D DFT as separate `(real, imag)` half spectra.
    pub fn rfft2(&mut self, x: Var) -> Result<(Var, Var)> {
        let c = self.value(x).dims4("rfft2")?[1];
        let s = self.spectrum(x)?;
        Ok((self.narrow_channels(s, 0, c)?, self.narrow_channels(s, c, c)?))
    }

    pub fn irfft2(&mut self, re: Var, im: Var, width: usize) -> Result<Var> {
        self.same_shape("irfft2", re, im)?;
        let s = self.concat_channels(&[re, im])?;
        self.inverse_spectrum(s, width)
    }

    /// Bilinear ×2 upscaling, wrapping columns and clamping rows.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [bs, c, h, w] = self.value(x).dims4("upsample")?;
        let mut out = vec![0.0; bs * c * 4 * h * w];
        resample::upsample2(self.value(x).data(), bs * c, h, w, &mut out);
        let v = Tensor::new(&[bs, c, 2 * h, 2 * w], out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Upsample2(x), ng))
    }

    /// 2×2 average pooling.
    pub fn downsample2(&mut self, x: Var) -> Result<Var> {
        let [bs, c, h, w] = self.value(x).dims4("downsample")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(arg_err("downsample", format!("extent {h}x{w} must be even")));
        }
        let mut out = vec![0.0; bs * c * h * w / 4];
        resample::downsample2(self.value(x).data(), bs * c, h, w, &mut out);
        let v = Tensor::new(&[bs, c, h / 2, w / 2], out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Downsample2(x), ng))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).dims4("concat")?;
        let mut ctot = 0;
        for &p in parts {
            let d = self.value(p).dims4("concat")?;
            if d[0] != first[0] || d[2] != first[2] || d[3] != first[3] {
                return Err(shape_err("concat", format!("{:?} vs {:?}", first, d)));
            }
            ctot += d[1];
        }
        let [bs, _, h, w] = first;
        let hw = h * w;
        let mut out = Vec::with_capacity(bs * ctot * hw);
        for b in 0..bs {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let v = Tensor::new(&[bs, ctot, h, w], out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::Concat { parts: parts.to_vec() }, ng))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [bs, c, h, w] = self.value(x).dims4("narrow")?;
        if start + len > c || len == 0 {
            return Err(shape_err("narrow", format!("channels {start}..{} out of {c}", start + len)));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bs * len * hw);
        for b in 0..bs {
            out.extend_from_slice(&xv[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let v = Tensor::new(&[bs, len, h, w], out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Narrow { x, start }, ng))
    }

    /// Element-wise reverse Huber penalty with threshold `c`.
    pub fn reverse_huber(&mut self, x: Var, c: f64) -> Result<Var> {
        if !(c > 0.0) {
            return Err(arg_err("reverse_huber", format!("threshold must be positive, got {c}")));
        }
        let v = self.value(x).map(|e| berhu(e, c));
        let ng = self.ng(x);
        Ok(self.push(v, Op::ReverseHuber { x, c }, ng))
    }

    /// Select one element as a rank-0 tensor.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .data()
            .get(index)
            .ok_or_else(|| shape_err("pick", format!("index {index} out of range")))?;
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, ng))
    }

    /// Maximum over the elements where `mask` is true (first occurrence wins).
    pub fn masked_max(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let i = self.arg_extreme(x, mask, |a, b| a > b)?;
        self.pick(x, i)
    }

    pub fn masked_min(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let i = self.arg_extreme(x, mask, |a, b| a < b)?;
        self.pick(x, i)
    }

    fn arg_extreme(&self, x: Var, mask: Option<&[bool]>, better: impl Fn(f64, f64) -> bool) -> Result<usize> {
        let data = self.value(x).data();
        let mut best: Option<usize> = None;
        for (i, &v) in data.iter().enumerate() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            if best.map_or(true, |b| better(v, data[b])) {
                best = Some(i);
            }
        }
        best.ok_or_else(|| Error::Empty { op: "extremum", detail: "no selected elements".into() })
    }

    /// Class-weighted softmax cross entropy over `[B, C, H, W]` logits.
    ///
    /// `labels` holds one id per pixel; pixels equal to `ignore` are skipped.
    /// The result is normalized by the summed weight of contributing pixels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8], weights: &[f64], ignore: u8) -> Result<Var> {
        let [bs, c, h, w] = self.value(logits).dims4("cross_entropy")?;
        let hw = h * w;
        if labels.len() != bs * hw || weights.len() != c {
            return Err(shape_err("cross_entropy", format!("{} labels / {} weights for logits {:?}", labels.len(), weights.len(), self.shape(logits))));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; lv.len()];
        let mut targets = vec![None; bs * hw];
        let mut loss = 0.0;
        let mut norm = 0.0;
        for b in 0..bs {
            for p in 0..hw {
                let at = |k: usize| (b * c + k) * hw + p;
                let m = (0..c).map(|k| lv[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..c {
                    let e = (lv[at(k)] - m).exp();
                    probs[at(k)] = e;
                    z += e;
                }
                for k in 0..c {
                    probs[at(k)] /= z;
                }
                let lab = labels[b * hw + p];
                if lab == ignore {
                    continue;
                }
                let t = lab as usize;
                if t >= c {
                    return Err(arg_err("cross_entropy", format!("label {t} outside {c} classes")));
                }
                let wt = weights[t];
                if wt == 0.0 {
                    continue;
                }
                loss += wt * (z.ln() - (lv[at(t)] - m));
                norm += wt;
                targets[b * hw + p] = Some((t, wt));
            }
        }
        if norm <= 0.0 {
            return Err(Error::Empty { op: "cross_entropy", detail: "every pixel is ignored or has zero weight".into() });
        }
        let probs = Tensor::new(self.shape(logits), probs)?;
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss / norm), Op::SoftmaxCrossEntropy { logits, probs, targets, norm }, ng))
    }

    /// Backpropagate from a scalar, accumulating into learnable leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(g) => g.add_assign(&gy),
                    slot => *slot = Some(gy),
                }
                continue;
            }
            self.propagate(&node.op, &node.value, gy, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, y: &Tensor, gy: Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => g.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(b, gy.clone());
                acc(a, gy);
            }
            Op::Sub(a, b) => {
                acc(b, gy.map(|g| -g));
                acc(a, gy);
            }
            Op::Mul(a, b) => {
                acc(a, gy.zip_map(val(b), |g, v| g * v));
                acc(b, gy.zip_map(val(a), |g, v| g * v));
            }
            Op::MulConst(x, c) => acc(x, gy.map(|g| g * c)),
            Op::AddConst(x) => acc(x, gy),
            Op::ScaleBy { x, s } => {
                let sv = val(s).item();
                let gs: f64 = gy.data().iter().zip(val(x).data()).map(|(g, v)| g * v).sum();
                acc(s, Tensor::full(val(s).shape(), gs));
                acc(x, gy.map(|g| g * sv));
            }
            Op::Abs(x) => acc(x, gy.zip_map(val(x), |g, v| if v > 0.0 { g } else if v < 0.0 { -g } else { 0.0 })),
            Op::Square(x) => acc(x, gy.zip_map(val(x), |g, v| 2.0 * v * g)),
            Op::Relu(x) => acc(x, gy.zip_map(val(x), |g, v| if v > 0.0 { g } else { 0.0 })),
            Op::Prelu { x, slope } => {
                let xs = val(x);
                let c = xs.shape()[1];
                let inner: usize = xs.shape()[2..].iter().product();
                let sl = val(slope).data();
                let mut gx = gy.data().to_vec();
                let mut gs = vec![0.0; c];
                for (i, g) in gx.iter_mut().enumerate() {
                    let xv = xs.data()[i];
                    if xv <= 0.0 {
                        let ch = (i / inner) % c;
                        gs[ch] += *g * xv;
                        *g *= sl[ch];
                    }
                }
                acc(slope, Tensor::new(val(slope).shape(), gs).expect("slope shape"));
                acc(x, Tensor::new(xs.shape(), gx).expect("prelu shape"));
            }
            Op::Sum(x) => acc(x, Tensor::full(val(x).shape(), gy.item())),
            Op::Conv2d { x, w, b, ref geom } => {
                let bs = val(x).shape()[0];
                let cout = val(w).shape()[0];
                let mut gx = self.ng(x).then(|| vec![0.0; val(x).len()]);
                let mut gw = self.ng(w).then(|| vec![0.0; val(w).len()]);
                let mut gb = b.filter(|&b| self.ng(b)).map(|_| vec![0.0; cout]);
                conv_backward(
                    geom,
                    bs,
                    cout,
                    val(x).data(),
                    val(w).data(),
                    gy.data(),
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let (Some(b), Some(gb)) = (b, gb) {
                    acc(b, Tensor::new(&[cout], gb).expect("bias shape"));
                }
                if let Some(gw) = gw {
                    acc(w, Tensor::new(val(w).shape(), gw).expect("weight shape"));
                }
                if let Some(gx) = gx {
                    acc(x, Tensor::new(val(x).shape(), gx).expect("input shape"));
                }
            }
            Op::BatchNormTrain { x, gamma, beta, ref xhat, ref inv_std } => {
                let (bs, c, hw) = plane_iter(y.shape());
                let n = (bs * hw) as f64;
                let (g, xh) = (gy.data(), xhat.data());
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..bs {
                    for ch in 0..c {
                        let o = (b * c + ch) * hw;
                        for i in o..o + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xh[i];
                        }
                    }
                }
                if self.ng(x) {
                    let gv = val(gamma).data();
                    let mut gx = vec![0.0; g.len()];
                    for b in 0..bs {
                        for ch in 0..c {
                            let k = gv[ch] * inv_std[ch] / n;
                            let o = (b * c + ch) * hw;
                            for i in o..o + hw {
                                gx[i] = k * (n * g[i] - sum_g[ch] - xh[i] * sum_gx[ch]);
                            }
                        }
                    }
                    acc(x, Tensor::new(y.shape(), gx).expect("bn shape"));
                }
                acc(gamma, Tensor::new(&[c], sum_gx).expect("bn gamma"));
                acc(beta, Tensor::new(&[c], sum_g).expect("bn beta"));
            }
            Op::BatchNormEval { x, gamma, beta, ref mean, ref inv_std } => {
                let (bs, c, hw) = plane_iter(y.shape());
                let (g, gv, xv) = (gy.data(), val(gamma).data(), val(x).data());
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                let mut gx = vec![0.0; g.len()];
                for b in 0..bs {
                    for ch in 0..c {
                        let o = (b * c + ch) * hw;
                        for i in o..o + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * (xv[i] - mean[ch]) * inv_std[ch];
                            gx[i] = g[i] * gv[ch] * inv_std[ch];
                        }
                    }
                }
                acc(gamma, Tensor::new(&[c], sum_gx).expect("bn gamma"));
                acc(beta, Tensor::new(&[c], sum_g).expect("bn beta"));
                acc(x, Tensor::new(y.shape(), gx).expect("bn shape"));
            }
            Op::Spectrum(x) => {
                let [bs, c, h, w] = val(x).dims4("rfft2").expect("rank 4");
                let wf = half_width(w);
                let sp = h * wf;
                let plan = Plan2d::new(h, w);
                let g = gy.data();
                let mut gx = vec![0.0; val(x).len()];
                for b in 0..bs {
                    for ch in 0..c {
                        let re = &g[(b * 2 * c + ch) * sp..][..sp];
                        let im = &g[(b * 2 * c + c + ch) * sp..][..sp];
                        plan.synthesize(re, im, |_| 1.0, 1.0, &mut gx[(b * c + ch) * h * w..][..h * w]);
                    }
                }
                acc(x, Tensor::new(val(x).shape(), gx).expect("rfft2 grad"));
            }
            Op::InverseSpectrum(s) => {
                let [bs, c, h, w] = y.dims4("irfft2").expect("rank 4");
                let wf = half_width(w);
                let sp = h * wf;
                let plan = Plan2d::new(h, w);
                let scale = 1.0 / (h * w) as f64;
                let g = gy.data();
                let mut gs = vec![0.0; val(s).len()];
                for b in 0..bs {
                    for ch in 0..c {
                        let base = b * 2 * c * sp;
                        let (lo, hi) = gs[base..base + 2 * c * sp].split_at_mut(c * sp);
                        let (re, im) = (&mut lo[ch * sp..(ch + 1) * sp], &mut hi[ch * sp..(ch + 1) * sp]);
                        plan.rfft2(&g[(b * c + ch) * h * w..][..h * w], re, im);
                        for r in 0..h {
                            for k in 0..wf {
                                let m = column_multiplicity(k, w) * scale;
                                re[r * wf + k] *= m;
                                im[r * wf + k] *= m;
                            }
                        }
                    }
                }
                acc(s, Tensor::new(val(s).shape(), gs).expect("irfft2 grad"));
            }
            Op::Upsample2(x) => {
                let [bs, c, h, w] = val(x).dims4("upsample").expect("rank 4");
                let mut gx = vec![0.0; val(x).len()];
                resample::upsample2_adjoint(gy.data(), bs * c, h, w, &mut gx);
                acc(x, Tensor::new(val(x).shape(), gx).expect("upsample grad"));
            }
            Op::Downsample2(x) => {
                let [bs, c, h, w] = val(x).dims4("downsample").expect("rank 4");
                let mut gx = vec![0.0; val(x).len()];
                resample::downsample2_adjoint(gy.data(), bs * c, h, w, &mut gx);
                acc(x, Tensor::new(val(x).shape(), gx).expect("downsample grad"));
            }
            Op::Concat { ref parts } => {
                let [bs, ctot, h, w] = y.dims4("concat").expect("rank 4");
                let hw = h * w;
                let mut off = 0;
                for &p in parts {
                    let c = val(p).shape()[1];
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(bs * c * hw);
                        for b in 0..bs {
                            gp.extend_from_slice(&gy.data()[(b * ctot + off) * hw..(b * ctot + off + c) * hw]);
                        }
                        acc(p, Tensor::new(val(p).shape(), gp).expect("concat grad"));
                    }
                    off += c;
                }
            }
            Op::Narrow { x, start } => {
                let [bs, c, h, w] = val(x).dims4("narrow").expect("rank 4");
                let len = y.shape()[1];
                let hw = h * w;
                let mut gx = vec![0.0; val(x).len()];
                for b in 0..bs {
                    gx[(b * c + start) * hw..(b * c + start + len) * hw]
                        .copy_from_slice(&gy.data()[b * len * hw..(b + 1) * len * hw]);
                }
                acc(x, Tensor::new(val(x).shape(), gx).expect("narrow grad"));
            }
            Op::ReverseHuber { x, c } => acc(
                x,
                gy.zip_map(val(x), |g, e| {
                    if e.abs() <= c {
                        if e > 0.0 {
                            g
                        } else if e < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    } else {
                        g * e / c
                    }
                }),
            ),
            Op::Pick { x, index } => {
                let mut gx = Tensor::zeros(val(x).shape());
                gx.data_mut()[index] = gy.item();
                acc(x, gx);
            }
            Op::SoftmaxCrossEntropy { logits, ref probs, ref targets, norm } => {
                let [bs, c, h, w] = probs.dims4("cross_entropy").expect("rank 4");
                let hw = h * w;
                let scale = gy.item() / norm;
                let mut gl = vec![0.0; probs.len()];
                for b in 0..bs {
                    for p in 0..hw {
                        if let Some((t, wt)) = targets[b * hw + p] {
                            for k in 0..c {
                                let i = (b * c + k) * hw + p;
                                let onehot = if k == t { 1.0 } else { 0.0 };
                                gl[i] = scale * wt * (probs.data()[i] - onehot);
                            }
                        }
                    }
                }
                acc(logits, Tensor::new(probs.shape(), gl).expect("ce grad"));
            }
        }
    }
}

/// Reverse Huber (berHu) penalty of one residual.
pub fn berhu(e: f64, c: f64) -> f64 {
    let a = e.abs();
    if a <= c {
        a
    } else {
        (e * e + c * c) / (2.0 * c)
    }
}
