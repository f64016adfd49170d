//! Built-in differentiable operations.

use super::gemm::matmul;
use super::graph::{CustomOp, Graph, Var};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.batch * self.oh * self.ow
    }
}

/// Unfolds `x` into a `[in_ch*kh*kw, batch*oh*ow]` matrix.
fn im2col<T: Float>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let n = g.cols();
    let plane = g.oh * g.ow;
    let mut cols = vec![T::zero(); g.k() * n];
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let src = &x[(b * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, d) in dst_seg.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto the input.
fn col2im<T: Float>(g: &ConvGeom, cols: &[T]) -> Vec<T> {
    let n = g.cols();
    let plane = g.oh * g.ow;
    let mut dx = vec![T::zero(); g.batch * g.in_ch * g.h * g.w];
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let dst = &mut dx[(b * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, &s) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

struct Conv2d<T> {
    inputs: [Var; 2],
    geom: ConvGeom,
    cols: Vec<T>,
}

impl<T: Float> CustomOp<T> for Conv2d<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let (k, n, plane) = (g.k(), g.cols(), g.oh * g.ow);
        // [batch, out, plane] -> [out, batch*plane]
        let mut dout = vec![T::zero(); g.out_ch * n];
        for b in 0..g.batch {
            for o in 0..g.out_ch {
                let src = &grad[(b * g.out_ch + o) * plane..][..plane];
                dout[o * n + b * plane..][..plane].copy_from_slice(src);
            }
        }
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); g.out_ch * k];
            matmul(g.out_ch, n, k, &dout, false, &self.cols, true, &mut dw, T::one(), T::zero());
            dw
        });
        let dx = needs[0].then(|| {
            let mut dcols = vec![T::zero(); k * n];
            matmul(k, g.out_ch, n, inputs[1].data(), true, &dout, false, &mut dcols, T::one(), T::zero());
            col2im(g, &dcols)
        });
        vec![dx, dw]
    }
}

/// Normalization mode of a batch-norm layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Running mean and variance of a batch-norm layer. Not trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Float> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

struct BatchNorm<T> {
    inputs: [Var; 3],
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mode: BnMode,
    batch: usize,
    channels: usize,
    plane: usize,
}

impl<T: Float> CustomOp<T> for BatchNorm<T> {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (bsz, ch, plane) = (self.batch, self.channels, self.plane);
        let gamma = inputs[1].data();
        let mut dgamma = vec![T::zero(); ch];
        let mut dbeta = vec![T::zero(); ch];
        for b in 0..bsz {
            for c in 0..ch {
                let off = (b * ch + c) * plane;
                let g = &grad[off..off + plane];
                let xh = &self.xhat[off..off + plane];
                let mut sg = T::zero();
                let mut sgx = T::zero();
                for (&gi, &xi) in g.iter().zip(xh) {
                    sg += gi;
                    sgx += gi * xi;
                }
                dbeta[c] += sg;
                dgamma[c] += sgx;
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); grad.len()];
            let count = T::from_usize(bsz * plane).unwrap();
            for b in 0..bsz {
                for c in 0..ch {
                    let off = (b * ch + c) * plane;
                    let scale = gamma[c] * self.inv_std[c];
                    let (g, xh, d) = (&grad[off..off + plane], &self.xhat[off..off + plane], &mut dx[off..off + plane]);
                    match self.mode {
                        BnMode::Eval => {
                            for (di, &gi) in d.iter_mut().zip(g) {
                                *di = scale * gi;
                            }
                        }
                        BnMode::Train => {
                            let mean_g = dbeta[c] / count;
                            let mean_gx = dgamma[c] / count;
                            for ((di, &gi), &xi) in d.iter_mut().zip(g).zip(xh) {
                                *di = scale * (gi - mean_g - xi * mean_gx);
                            }
                        }
                    }
                }
            }
            dx
        });
        vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    }
}

#[derive(Clone, Copy)]
enum Pointwise {
    Relu,
    Sigmoid,
}

struct Unary {
    inputs: [Var; 1],
    kind: Pointwise,
}

impl<T: Float> CustomOp<T> for Unary {
    fn name(&self) -> &'static str {
        match self.kind {
            Pointwise::Relu => "relu",
            Pointwise::Sigmoid => "sigmoid",
        }
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let y = output.data();
        let dx = match self.kind {
            Pointwise::Relu => grad
                .iter()
                .zip(y)
                .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                .collect(),
            Pointwise::Sigmoid => grad
                .iter()
                .zip(y)
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect(),
        };
        vec![Some(dx)]
    }
}

/// `[outer, axis, inner]` factorization of a shape around one axis.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct Softmax {
    inputs: [Var; 1],
    axis: usize,
}

impl<T: Float> CustomOp<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (outer, len, inner) = split_axis(output.shape(), self.axis);
        let y = output.data();
        let mut dx = vec![T::zero(); y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let dot: T = (0..len).map(|a| grad[idx(a)] * y[idx(a)]).sum();
                for a in 0..len {
                    dx[idx(a)] = y[idx(a)] * (grad[idx(a)] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Numerically stable softmax of a strided lane, written into `out`.
pub(crate) fn softmax_lane<T: Float>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Mul,
}

struct Elementwise {
    inputs: [Var; 2],
    kind: Binary,
}

impl<T: Float> CustomOp<T> for Elementwise {
    fn name(&self) -> &'static str {
        match self.kind {
            Binary::Add => "add",
            Binary::Mul => "mul",
        }
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        match self.kind {
            Binary::Add => vec![
                needs[0].then(|| grad.to_vec()),
                needs[1].then(|| grad.to_vec()),
            ],
            Binary::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    needs[0].then(|| grad.iter().zip(b).map(|(&g, &b)| g * b).collect()),
                    needs[1].then(|| grad.iter().zip(a).map(|(&g, &a)| g * a).collect()),
                ]
            }
        }
    }
}

struct SumAll {
    inputs: [Var; 1],
}

impl<T: Float> CustomOp<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0]; inputs[0].numel()])]
    }
}

struct Reshape {
    inputs: [Var; 1],
}

impl<T: Float> CustomOp<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec())]
    }
}

struct Linear {
    inputs: [Var; 3],
    batch: usize,
    in_f: usize,
    out_f: usize,
}

impl<T: Float> CustomOp<T> for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (b, i, o) = (self.batch, self.in_f, self.out_f);
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); b * i];
            matmul(b, o, i, grad, false, inputs[1].data(), false, &mut dx, T::one(), T::zero());
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); o * i];
            matmul(o, b, i, grad, true, inputs[0].data(), false, &mut dw, T::one(), T::zero());
            dw
        });
        let db = needs[2].then(|| {
            let mut db = vec![T::zero(); o];
            for row in grad.chunks_exact(o) {
                db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
            }
            db
        });
        vec![dx, dw, db]
    }
}

/// Bin `[start, end)` of output cell `i` when `len` inputs map onto `out` cells.
fn pool_bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, (i + 1) * len / out)
}

struct AvgPool {
    inputs: [Var; 1],
    shape: [usize; 4],
    out_h: usize,
    out_w: usize,
}

impl<T: Float> CustomOp<T> for AvgPool {
    fn name(&self) -> &'static str {
        "adaptive_avg_pool2d"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let [b, c, h, w] = self.shape;
        let mut dx = vec![T::zero(); b * c * h * w];
        for plane in 0..b * c {
            let src = &grad[plane * self.out_h * self.out_w..];
            let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
            for oy in 0..self.out_h {
                let (y0, y1) = pool_bin(oy, h, self.out_h);
                for ox in 0..self.out_w {
                    let (x0, x1) = pool_bin(ox, w, self.out_w);
                    let share = src[oy * self.out_w + ox] / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                    for y in y0..y1 {
                        for d in &mut dst[y * w + x0..y * w + x1] {
                            *d += share;
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

fn rank4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(op, format!("expected rank 4, got {shape:?}"))),
    }
}

impl<T: Float> Graph<T> {
    /// Bias-free 2-d convolution of `[B, C, H, W]` by `[O, C, KH, KW]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let [batch, in_ch, h, w] = rank4("conv2d", self.shape(x))?;
        let [out_ch, wc, kh, kw] = rank4("conv2d", self.shape(weight))?;
        if wc != in_ch {
            return Err(Error::shape(
                "conv2d",
                format!("input has {in_ch} channels, weight expects {wc}"),
            ));
        }
        let (Some(oh), Some(ow)) = (
            conv_out_len(h, kh, stride, padding),
            conv_out_len(w, kw, stride, padding),
        ) else {
            return Err(Error::shape(
                "conv2d",
                format!("{h}x{w} input too small for {kh}x{kw} kernel, stride {stride}, padding {padding}"),
            ));
        };
        let geom = ConvGeom {
            batch,
            in_ch,
            h,
            w,
            out_ch,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
        };
        let cols = im2col(&geom, self.value(x).data());
        let n = geom.cols();
        let mut out_mat = vec![T::zero(); out_ch * n];
        matmul(out_ch, geom.k(), n, self.value(weight).data(), false, &cols, false, &mut out_mat, T::one(), T::zero());
        let plane = oh * ow;
        let mut out = vec![T::zero(); out_mat.len()];
        for b in 0..batch {
            for o in 0..out_ch {
                out[(b * out_ch + o) * plane..][..plane].copy_from_slice(&out_mat[o * n + b * plane..][..plane]);
            }
        }
        let value = Tensor::from_vec(&[batch, out_ch, oh, ow], out)?;
        self.custom(
            value,
            Box::new(Conv2d {
                inputs: [x, weight],
                geom,
                cols,
            }),
        )
    }

    /// Per-channel batch normalization of `[B, C, H, W]` with affine `gamma`/`beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BnMode,
    ) -> Result<Var> {
        let [batch, channels, h, w] = rank4("batchnorm2d", self.shape(x))?;
        let plane = h * w;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [channels] {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("{name} shape {:?} for {channels} channels", self.shape(v)),
                ));
            }
        }
        if stats.mean.len() != channels || stats.var.len() != channels {
            return Err(Error::shape("batchnorm2d", "running stats channel count"));
        }
        let xs = self.value(x).data();
        let eps = T::lit(stats.eps);
        let (mean, var) = match mode {
            BnMode::Eval => (stats.mean.clone(), stats.var.clone()),
            BnMode::Train => {
                let count = batch * plane;
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        mean[c] += xs[(b * channels + c) * plane..][..plane].iter().copied().sum();
                    }
                }
                let n = T::from_usize(count).unwrap();
                mean.iter_mut().for_each(|m| *m /= n);
                for b in 0..batch {
                    for c in 0..channels {
                        let m = mean[c];
                        var[c] += xs[(b * channels + c) * plane..][..plane]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum();
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
                let mom = T::lit(stats.momentum);
                let unbias = if count > 1 {
                    n / T::from_usize(count - 1).unwrap()
                } else {
                    T::one()
                };
                for c in 0..channels {
                    stats.mean[c] = (T::one() - mom) * stats.mean[c] + mom * mean[c];
                    stats.var[c] = (T::one() - mom) * stats.var[c] + mom * var[c] * unbias;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                for i in off..off + plane {
                    xhat[i] = (xs[i] - mean[c]) * inv_std[c];
                    out[i] = gs[c] * xhat[i] + bs[c];
                }
            }
        }
        let value = Tensor::from_vec(&[batch, channels, h, w], out)?;
        self.custom(
            value,
            Box::new(BatchNorm {
                inputs: [x, gamma, beta],
                xhat,
                inv_std,
                mode,
                batch,
                channels,
                plane,
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Sigmoid)
    }

    fn pointwise(&mut self, x: Var, kind: Pointwise) -> Result<Var> {
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .map(|&v| match kind {
                Pointwise::Relu => v.max(T::zero()),
                Pointwise::Sigmoid => T::one() / (T::one() + (-v).exp()),
            })
            .collect();
        let value = Tensor::from_vec(src.shape(), data)?;
        self.custom(value, Box::new(Unary { inputs: [x], kind }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        if axis >= src.rank() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {:?}", src.shape()),
            ));
        }
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let xs = src.data();
        let mut out = vec![T::zero(); xs.len()];
        let mut lane = vec![T::zero(); len];
        let mut lane_out = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                for a in 0..len {
                    lane[a] = xs[(o * len + a) * inner + i];
                }
                softmax_lane(&lane, &mut lane_out);
                for a in 0..len {
                    out[(o * len + a) * inner + i] = lane_out[a];
                }
            }
        }
        let value = Tensor::from_vec(src.shape(), out)?;
        self.custom(value, Box::new(Softmax { inputs: [x], axis }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "elementwise",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Mul => x * y,
            })
            .collect();
        let value = Tensor::from_vec(ta.shape(), data)?;
        self.custom(value, Box::new(Elementwise { inputs: [a, b], kind }))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        self.custom(Tensor::scalar(total), Box::new(SumAll { inputs: [x] }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.custom(value, Box::new(Reshape { inputs: [x] }))
    }

    /// `x [B, in] * weight[out, in]^T + bias[out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (batch, in_f) = match *self.shape(x) {
            [b, i] => (b, i),
            ref s => return Err(Error::shape("linear", format!("input must be rank 2, got {s:?}"))),
        };
        let out_f = match *self.shape(weight) {
            [o, i] if i == in_f => o,
            ref s => return Err(Error::shape("linear", format!("weight {s:?} for {in_f} inputs"))),
        };
        if self.shape(bias) != [out_f] {
            return Err(Error::shape("linear", format!("bias {:?}", self.shape(bias))));
        }
        let mut out = vec![T::zero(); batch * out_f];
        for row in out.chunks_exact_mut(out_f) {
            row.copy_from_slice(self.value(bias).data());
        }
        matmul(batch, in_f, out_f, self.value(x).data(), false, self.value(weight).data(), true, &mut out, T::one(), T::one());
        let value = Tensor::from_vec(&[batch, out_f], out)?;
        self.custom(
            value,
            Box::new(Linear {
                inputs: [x, weight, bias],
                batch,
                in_f,
                out_f,
            }),
        )
    }

    /// Averages `[B, C, H, W]` over a near-equal partition into `out_h x out_w` cells.
    ///
    /// Cell `i` along an axis of length `L` covers `floor(i*L/out) .. floor((i+1)*L/out)`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = rank4("adaptive_avg_pool2d", self.shape(x))?;
        let [b, c, h, w] = shape;
        if h < out_h || w < out_w || out_h == 0 || out_w == 0 {
            return Err(Error::shape(
                "adaptive_avg_pool2d",
                format!("cannot pool {h}x{w} to {out_h}x{out_w}"),
            ));
        }
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); b * c * out_h * out_w];
        for plane in 0..b * c {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            for oy in 0..out_h {
                let (y0, y1) = pool_bin(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = pool_bin(ox, w, out_w);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        acc += src[y * w + x0..y * w + x1].iter().copied().sum();
                    }
                    out[(plane * out_h + oy) * out_w + ox] = acc / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, out_h, out_w], out)?;
        self.custom(
            value,
            Box::new(AvgPool {
                inputs: [x],
                shape,
                out_h,
                out_w,
            }),
        )
    }
}
