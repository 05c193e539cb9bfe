use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Activation fused into a convolution or dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Linear,
    Relu,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    Conv1D {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        #[serde(default)]
        activation: Activation,
    },
    MaxPool1D {
        pool: usize,
    },
    UpSample1D {
        factor: usize,
    },
    Dense {
        units: usize,
        #[serde(default)]
        activation: Activation,
    },
    Flatten,
    BatchNorm {
        momentum: f64,
        epsilon: f64,
    },
    Dropout {
        rate: f64,
    },
    ReLU,
    LeakyReLU {
        slope: f64,
    },
    Softmax,
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: usize, stride: usize, padding: Padding, activation: Activation) -> Self {
        LayerSpec::Conv1D {
            filters,
            kernel,
            stride,
            padding,
            activation,
        }
    }

    pub fn dense(units: usize, activation: Activation) -> Self {
        LayerSpec::Dense { units, activation }
    }

    /// Batch normalization with momentum 0.99 and epsilon 1e-5.
    pub fn batch_norm() -> Self {
        LayerSpec::BatchNorm {
            momentum: 0.99,
            epsilon: 1e-5,
        }
    }

    /// Row label used in layer tables.
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv1D { .. } => "Conv1D",
            LayerSpec::MaxPool1D { .. } => "MaxPooling",
            LayerSpec::UpSample1D { .. } => "UpSampling",
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::BatchNorm { .. } => "BatchNormalization",
            LayerSpec::Dropout { .. } => "Dropout",
            LayerSpec::ReLU => "ReLU",
            LayerSpec::LeakyReLU { .. } => "Leaky ReLu",
            LayerSpec::Softmax => "Softmax",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match *self {
            LayerSpec::Conv1D { filters, kernel, stride, .. } if filters == 0 || kernel == 0 || stride == 0 => {
                bad(format!("Conv1D needs positive filters/kernel/stride: {self:?}"))
            }
            LayerSpec::MaxPool1D { pool: 0 } => bad("pool size must be >= 1".into()),
            LayerSpec::UpSample1D { factor: 0 } => bad("upsample factor must be >= 1".into()),
            LayerSpec::Dense { units: 0, .. } => bad("Dense needs at least one unit".into()),
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                bad(format!("dropout rate {rate} must lie in [0, 1)"))
            }
            LayerSpec::BatchNorm { momentum, epsilon } if !(0.0..=1.0).contains(&momentum) || !(epsilon > 0.0) => {
                bad(format!("invalid batch-norm settings {self:?}"))
            }
            LayerSpec::LeakyReLU { slope } if !(slope >= 0.0) => bad(format!("leaky slope {slope} must be >= 0")),
            _ => Ok(()),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let seq = || -> Result<(usize, usize)> {
            match input {
                [l, c] => Ok((*l, *c)),
                _ => Err(Error::Shape(format!(
                    "{} expects a [length, channels] input, got {input:?}",
                    self.kind_name()
                ))),
            }
        };
        match *self {
            LayerSpec::Conv1D {
                filters,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (l, _) = seq()?;
                let out = match padding {
                    Padding::Same => l.div_ceil(stride),
                    Padding::Valid => {
                        if l < kernel {
                            return Err(Error::Shape(format!("valid conv kernel {kernel} longer than input {l}")));
                        }
                        (l - kernel) / stride + 1
                    }
                };
                Ok(vec![out, filters])
            }
            LayerSpec::MaxPool1D { pool } => {
                let (l, c) = seq()?;
                if l < pool {
                    return Err(Error::Shape(format!("pool {pool} longer than input {l}")));
                }
                Ok(vec![l / pool, c])
            }
            LayerSpec::UpSample1D { factor } => {
                let (l, c) = seq()?;
                Ok(vec![l * factor, c])
            }
            LayerSpec::Dense { units, .. } => match input {
                [_] => Ok(vec![units]),
                _ => Err(Error::Shape(format!("Dense expects a flat input, got {input:?}"))),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            _ => Ok(input.to_vec()),
        }
    }

    /// Names and shapes of the parameter tensors for a given input shape.
    pub fn param_shapes(&self, input: &[usize]) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Conv1D { filters, kernel, .. } => {
                let cin = input.last().copied().unwrap_or(0);
                vec![("kernel", vec![kernel, cin, filters]), ("bias", vec![filters])]
            }
            LayerSpec::Dense { units, .. } => {
                let n = input.iter().product();
                vec![("kernel", vec![n, units]), ("bias", vec![units])]
            }
            LayerSpec::BatchNorm { .. } => {
                let c = input.last().copied().unwrap_or(0);
                vec![
                    ("gamma", vec![c]),
                    ("beta", vec![c]),
                    ("moving_mean", vec![c]),
                    ("moving_var", vec![c]),
                ]
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self, input: &[usize]) -> usize {
        self.param_shapes(input)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Whether the `idx`-th parameter receives gradients.
    pub fn is_trainable_param(&self, idx: usize) -> bool {
        !matches!(self, LayerSpec::BatchNorm { .. } if idx >= 2)
    }

    /// Fan-in used for He initialization of the kernel.
    pub fn fan_in(&self, input: &[usize]) -> usize {
        match *self {
            LayerSpec::Conv1D { kernel, .. } => kernel * input.last().copied().unwrap_or(1),
            LayerSpec::Dense { .. } => input.iter().product(),
            _ => 1,
        }
    }
}

/// Gradient arriving at a layer's output. `PreActivation` skips the fused
/// activation (softmax + cross-entropy hands over `p - t` directly).
pub enum Upstream<T> {
    Output(Tensor<T>),
    PreActivation(Tensor<T>),
}

impl<T> Upstream<T> {
    fn into_parts(self) -> (Tensor<T>, bool) {
        match self {
            Upstream::Output(t) => (t, false),
            Upstream::PreActivation(t) => (t, true),
        }
    }
}

/// Values recorded during a forward pass and needed by the backward pass.
#[derive(Clone, Debug)]
pub enum Cache<T> {
    Conv { padded: Vec<T>, output: Vec<T> },
    Pool { argmax: Vec<u32> },
    Dense { input_t: Vec<T>, output: Vec<T> },
    Norm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: Option<(Vec<T>, Vec<T>)>,
    },
    Mask(Vec<T>),
    Input(Vec<T>),
    Output(Vec<T>),
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub name: String,
    pub spec: LayerSpec,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    pub params: Vec<Tensor<T>>,
    /// Frozen layers receive no parameter gradients.
    pub frozen: bool,
}

fn apply_activation<T: Scalar>(act: Activation, rows: &mut [T], width: usize) {
    match act {
        Activation::Linear => {}
        Activation::Relu => rows.iter_mut().for_each(|v| *v = v.max(T::zero())),
        Activation::Softmax => rows.chunks_mut(width).for_each(softmax_in_place),
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Gradient through a fused activation given its output `y`.
fn activation_backward<T: Scalar>(act: Activation, y: &[T], dy: &mut [T], width: usize) {
    match act {
        Activation::Linear => {}
        Activation::Relu => {
            for (g, &v) in dy.iter_mut().zip(y) {
                if v <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        Activation::Softmax => {
            for (g, p) in dy.chunks_mut(width).zip(y.chunks(width)) {
                let s = dot(g, p);
                for (gi, &pi) in g.iter_mut().zip(p) {
                    *gi = pi * (*gi - s);
                }
            }
        }
    }
}

impl<T: Scalar> Layer<T> {
    /// Layer with zero-initialized parameters (BatchNorm gets gamma = 1 and
    /// moving variance = 1).
    pub fn new(name: impl Into<String>, spec: LayerSpec, input_shape: &[usize]) -> Result<Self> {
        let output_shape = spec.output_shape(input_shape)?;
        let params = spec
            .param_shapes(input_shape)
            .into_iter()
            .map(|(pname, shape)| {
                let one = matches!(pname, "gamma" | "moving_var");
                Tensor::filled(shape, if one { T::one() } else { T::zero() })
            })
            .collect();
        Ok(Self {
            name: name.into(),
            spec,
            input_shape: input_shape.to_vec(),
            output_shape,
            params,
            frozen: false,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        self.spec
            .param_shapes(&self.input_shape)
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "layer {} expects [batch, {:?}], got {:?}",
                self.name,
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    fn batch_shape(&self, b: usize) -> Vec<usize> {
        let mut s = vec![b];
        s.extend_from_slice(&self.output_shape);
        s
    }

    /// `(padded length, left padding)` of the convolution input.
    fn conv_geometry(&self) -> (usize, usize) {
        let LayerSpec::Conv1D { kernel, stride, padding, .. } = self.spec else {
            unreachable!()
        };
        let l = self.input_shape[0];
        let lo = self.output_shape[0];
        match padding {
            Padding::Valid => (l, 0),
            Padding::Same => {
                let total = ((lo - 1) * stride + kernel).saturating_sub(l);
                (l + total, total / 2)
            }
        }
    }

    /// Kernel `[k, cin, cout]` rearranged to `[cout, k * cin]`.
    fn kernel_by_filter(&self) -> Vec<T> {
        let w = self.params[0].data();
        let s = self.params[0].shape();
        let (kc, cout) = (s[0] * s[1], s[2]);
        let mut out = vec![T::zero(); kc * cout];
        for r in 0..kc {
            for co in 0..cout {
                out[co * kc + r] = w[r * cout + co];
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode, seed: u64) -> Result<(Tensor<T>, Cache<T>)> {
        self.check_input(x)?;
        let b = x.batch();
        match self.spec {
            LayerSpec::Conv1D { stride, kernel, activation, .. } => {
                let cin = self.input_shape[1];
                let (l, lo, cout) = (self.input_shape[0], self.output_shape[0], self.output_shape[1]);
                let (lp, pad_left) = self.conv_geometry();
                let kc = kernel * cin;
                let wt = self.kernel_by_filter();
                let bias = self.params[1].data();
                let mut padded = vec![T::zero(); b * lp * cin];
                let mut output = vec![T::zero(); b * lo * cout];
                padded
                    .par_chunks_mut(lp * cin)
                    .zip(output.par_chunks_mut(lo * cout))
                    .enumerate()
                    .for_each(|(i, (xp, y))| {
                        xp[pad_left * cin..(pad_left + l) * cin].copy_from_slice(x.item(i));
                        for t in 0..lo {
                            let seg = &xp[t * stride * cin..t * stride * cin + kc];
                            let row = &mut y[t * cout..(t + 1) * cout];
                            for co in 0..cout {
                                row[co] = bias[co] + dot(&wt[co * kc..(co + 1) * kc], seg);
                            }
                        }
                        apply_activation(activation, y, cout);
                    });
                let y = Tensor::from_parts(self.batch_shape(b), output.clone());
                Ok((y, Cache::Conv { padded, output }))
            }
            LayerSpec::MaxPool1D { pool } => {
                let (lo, c) = (self.output_shape[0], self.output_shape[1]);
                let mut out = vec![T::zero(); b * lo * c];
                let mut argmax = vec![0u32; b * lo * c];
                for i in 0..b {
                    let xi = x.item(i);
                    for t in 0..lo {
                        for ch in 0..c {
                            let mut best = t * pool * c + ch;
                            for j in 1..pool {
                                let idx = (t * pool + j) * c + ch;
                                if xi[idx] > xi[best] {
                                    best = idx;
                                }
                            }
                            let o = i * lo * c + t * c + ch;
                            out[o] = xi[best];
                            argmax[o] = best as u32;
                        }
                    }
                }
                Ok((Tensor::from_parts(self.batch_shape(b), out), Cache::Pool { argmax }))
            }
            LayerSpec::UpSample1D { factor } => {
                let (l, c) = (self.input_shape[0], self.input_shape[1]);
                let mut out = Vec::with_capacity(b * l * factor * c);
                for i in 0..b {
                    for row in x.item(i).chunks(c) {
                        for _ in 0..factor {
                            out.extend_from_slice(row);
                        }
                    }
                }
                Ok((Tensor::from_parts(self.batch_shape(b), out), Cache::Empty))
            }
            LayerSpec::Dense { units, activation } => {
                let n = self.input_shape[0];
                let w = self.params[0].data();
                let bias = self.params[1].data();
                // Input transposed to [n, B] so each kernel row meets a contiguous column.
                let mut input_t = vec![T::zero(); n * b];
                for i in 0..b {
                    for (r, &v) in x.item(i).iter().enumerate() {
                        input_t[r * b + i] = v;
                    }
                }
                const CHUNK: usize = 256;
                let blocks: Vec<Vec<T>> = (0..units.div_ceil(CHUNK))
                    .into_par_iter()
                    .map(|blk| {
                        let c0 = blk * CHUNK;
                        let c1 = (c0 + CHUNK).min(units);
                        let width = c1 - c0;
                        let mut acc = vec![T::zero(); b * width];
                        for r in 0..n {
                            let wrow = &w[r * units + c0..r * units + c1];
                            for (i, &xv) in input_t[r * b..(r + 1) * b].iter().enumerate() {
                                if xv != T::zero() {
                                    axpy(xv, wrow, &mut acc[i * width..(i + 1) * width]);
                                }
                            }
                        }
                        acc
                    })
                    .collect();
                let mut output = vec![T::zero(); b * units];
                for (blk, acc) in blocks.iter().enumerate() {
                    let c0 = blk * CHUNK;
                    let width = acc.len() / b;
                    for i in 0..b {
                        for j in 0..width {
                            output[i * units + c0 + j] = acc[i * width + j] + bias[c0 + j];
                        }
                    }
                }
                apply_activation(activation, &mut output, units);
                let y = Tensor::from_parts(self.batch_shape(b), output.clone());
                Ok((y, Cache::Dense { input_t, output }))
            }
            LayerSpec::Flatten => {
                let y = x.clone().reshape(self.batch_shape(b))?;
                Ok((y, Cache::Empty))
            }
            LayerSpec::BatchNorm { epsilon, .. } => {
                let c = *self.input_shape.last().unwrap();
                let rows = x.len() / c;
                let eps = T::from_f64_lossy(epsilon);
                let (gamma, beta) = (self.params[0].data(), self.params[1].data());
                let (mean, var) = match mode {
                    Mode::Train => {
                        let nr = T::from_usize_lossy(rows);
                        let mut mean = vec![T::zero(); c];
                        for row in x.data().chunks(c) {
                            for (m, &v) in mean.iter_mut().zip(row) {
                                *m += v;
                            }
                        }
                        mean.iter_mut().for_each(|m| *m /= nr);
                        let mut var = vec![T::zero(); c];
                        for row in x.data().chunks(c) {
                            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                                *s += (v - m) * (v - m);
                            }
                        }
                        var.iter_mut().for_each(|s| *s /= nr);
                        (mean, var)
                    }
                    Mode::Infer => (self.params[2].data().to_vec(), self.params[3].data().to_vec()),
                };
                let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
                let mut xhat = x.data().to_vec();
                let mut out = vec![T::zero(); x.len()];
                for (xr, orow) in xhat.chunks_mut(c).zip(out.chunks_mut(c)) {
                    for ch in 0..c {
                        xr[ch] = (xr[ch] - mean[ch]) * inv_std[ch];
                        orow[ch] = gamma[ch] * xr[ch] + beta[ch];
                    }
                }
                let batch_stats = (mode == Mode::Train).then_some((mean, var));
                Ok((
                    Tensor::from_parts(x.shape().to_vec(), out),
                    Cache::Norm {
                        xhat,
                        inv_std,
                        batch_stats,
                    },
                ))
            }
            LayerSpec::Dropout { rate } => {
                if mode == Mode::Infer || rate == 0.0 {
                    return Ok((x.clone(), Cache::Empty));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
                let mask: Vec<T> = (0..x.len())
                    .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                    .collect();
                let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                Ok((Tensor::from_parts(x.shape().to_vec(), out), Cache::Mask(mask)))
            }
            LayerSpec::ReLU => {
                let out = x.data().iter().map(|&v| v.max(T::zero())).collect();
                Ok((Tensor::from_parts(x.shape().to_vec(), out), Cache::Input(x.data().to_vec())))
            }
            LayerSpec::LeakyReLU { slope } => {
                let a = T::from_f64_lossy(slope);
                let out = x.data().iter().map(|&v| if v > T::zero() { v } else { a * v }).collect();
                Ok((Tensor::from_parts(x.shape().to_vec(), out), Cache::Input(x.data().to_vec())))
            }
            LayerSpec::Softmax => {
                let c = *self.input_shape.last().unwrap();
                let mut out = x.data().to_vec();
                out.chunks_mut(c).for_each(softmax_in_place);
                Ok((Tensor::from_parts(x.shape().to_vec(), out.clone()), Cache::Output(out)))
            }
        }
    }

    /// Reverse pass. Returns the input gradient (when `need_input_grad`) and
    /// one entry per parameter (`None` for frozen or non-trainable ones).
    pub fn backward(
        &self,
        cache: &Cache<T>,
        upstream: Upstream<T>,
        need_input_grad: bool,
    ) -> Result<(Option<Tensor<T>>, Vec<Option<Tensor<T>>>)> {
        let (dy, pre_activation) = upstream.into_parts();
        let b = dy.batch();
        let in_shape = {
            let mut s = vec![b];
            s.extend_from_slice(&self.input_shape);
            s
        };
        let want_params = !self.frozen;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];
        let dx: Option<Tensor<T>> = match (&self.spec, cache) {
            (&LayerSpec::Conv1D { stride, kernel, activation, .. }, Cache::Conv { padded, output }) => {
                let (cin, l) = (self.input_shape[1], self.input_shape[0]);
                let (lo, cout) = (self.output_shape[0], self.output_shape[1]);
                let (lp, pad_left) = self.conv_geometry();
                let kc = kernel * cin;
                let mut dz = dy.into_data();
                if !pre_activation {
                    activation_backward(activation, output, &mut dz, cout);
                }
                let wt = self.kernel_by_filter();
                let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..b)
                    .into_par_iter()
                    .map(|i| {
                        let xp = &padded[i * lp * cin..(i + 1) * lp * cin];
                        let g = &dz[i * lo * cout..(i + 1) * lo * cout];
                        let mut dxp = if need_input_grad { vec![T::zero(); lp * cin] } else { Vec::new() };
                        let mut dw = if want_params { vec![T::zero(); cout * kc] } else { Vec::new() };
                        let mut db = vec![T::zero(); cout];
                        for t in 0..lo {
                            let off = t * stride * cin;
                            for co in 0..cout {
                                let gv = g[t * cout + co];
                                if gv == T::zero() {
                                    continue;
                                }
                                db[co] += gv;
                                if want_params {
                                    axpy(gv, &xp[off..off + kc], &mut dw[co * kc..(co + 1) * kc]);
                                }
                                if need_input_grad {
                                    axpy(gv, &wt[co * kc..(co + 1) * kc], &mut dxp[off..off + kc]);
                                }
                            }
                        }
                        let dx = if need_input_grad {
                            dxp[pad_left * cin..(pad_left + l) * cin].to_vec()
                        } else {
                            Vec::new()
                        };
                        (dx, dw, db)
                    })
                    .collect();
                if want_params {
                    let mut dw = vec![T::zero(); cout * kc];
                    let mut db = vec![T::zero(); cout];
                    for (_, pw, pb) in &partials {
                        dw.iter_mut().zip(pw).for_each(|(a, &v)| *a += v);
                        db.iter_mut().zip(pb).for_each(|(a, &v)| *a += v);
                    }
                    let mut dk = vec![T::zero(); kc * cout];
                    for co in 0..cout {
                        for r in 0..kc {
                            dk[r * cout + co] = dw[co * kc + r];
                        }
                    }
                    grads[0] = Some(Tensor::from_parts(self.params[0].shape().to_vec(), dk));
                    grads[1] = Some(Tensor::from_parts(vec![cout], db));
                }
                need_input_grad.then(|| {
                    let data = partials.into_iter().flat_map(|(dx, _, _)| dx).collect();
                    Tensor::from_parts(in_shape, data)
                })
            }
            (LayerSpec::MaxPool1D { .. }, Cache::Pool { argmax }) => {
                let n_in = self.input_shape.iter().product::<usize>();
                let n_out = self.output_shape.iter().product::<usize>();
                let mut dx = vec![T::zero(); b * n_in];
                for (o, &g) in dy.data().iter().enumerate() {
                    let i = o / n_out;
                    dx[i * n_in + argmax[o] as usize] += g;
                }
                Some(Tensor::from_parts(in_shape, dx))
            }
            (&LayerSpec::UpSample1D { factor }, _) => {
                let c = self.input_shape[1];
                let n_in = self.input_shape.iter().product::<usize>();
                let mut dx = vec![T::zero(); b * n_in];
                for (r, row) in dy.data().chunks(c).enumerate() {
                    let dst = (r / factor) * c;
                    for (d, &g) in dx[dst..dst + c].iter_mut().zip(row) {
                        *d += g;
                    }
                }
                Some(Tensor::from_parts(in_shape, dx))
            }
            (&LayerSpec::Dense { units, activation }, Cache::Dense { input_t, output }) => {
                let n = self.input_shape[0];
                let mut dz = dy.into_data();
                if !pre_activation {
                    activation_backward(activation, output, &mut dz, units);
                }
                let w = self.params[0].data();
                let mut dxt = if need_input_grad { vec![T::zero(); n * b] } else { Vec::new() };
                if want_params {
                    let mut db = vec![T::zero(); units];
                    for row in dz.chunks(units) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    let mut dw = vec![T::zero(); n * units];
                    const ROWS: usize = 64;
                    let dz_ref = &dz;
                    if need_input_grad {
                        dw.par_chunks_mut(ROWS * units)
                            .zip(dxt.par_chunks_mut(ROWS * b))
                            .enumerate()
                            .for_each(|(blk, (dwb, dxb))| {
                                for (k, dwr) in dwb.chunks_mut(units).enumerate() {
                                    let r = blk * ROWS + k;
                                    let wrow = &w[r * units..(r + 1) * units];
                                    for i in 0..b {
                                        let g = &dz_ref[i * units..(i + 1) * units];
                                        let xv = input_t[r * b + i];
                                        if xv != T::zero() {
                                            axpy(xv, g, dwr);
                                        }
                                        dxb[k * b + i] = dot(wrow, g);
                                    }
                                }
                            });
                    } else {
                        dw.par_chunks_mut(ROWS * units).enumerate().for_each(|(blk, dwb)| {
                            for (k, dwr) in dwb.chunks_mut(units).enumerate() {
                                let r = blk * ROWS + k;
                                for i in 0..b {
                                    let xv = input_t[r * b + i];
                                    if xv != T::zero() {
                                        axpy(xv, &dz_ref[i * units..(i + 1) * units], dwr);
                                    }
                                }
                            }
                        });
                    }
                    grads[0] = Some(Tensor::from_parts(vec![n, units], dw));
                    grads[1] = Some(Tensor::from_parts(vec![units], db));
                } else if need_input_grad {
                    dxt.par_chunks_mut(b).enumerate().for_each(|(r, dxr)| {
                        let wrow = &w[r * units..(r + 1) * units];
                        for (i, d) in dxr.iter_mut().enumerate() {
                            *d = dot(wrow, &dz[i * units..(i + 1) * units]);
                        }
                    });
                }
                need_input_grad.then(|| {
                    let mut dx = vec![T::zero(); b * n];
                    for r in 0..n {
                        for i in 0..b {
                            dx[i * n + r] = dxt[r * b + i];
                        }
                    }
                    Tensor::from_parts(in_shape, dx)
                })
            }
            (LayerSpec::Flatten, _) => Some(dy.reshape(in_shape)?),
            (LayerSpec::BatchNorm { .. }, Cache::Norm { xhat, inv_std, batch_stats }) => {
                let c = *self.input_shape.last().unwrap();
                let gamma = self.params[0].data();
                let g = dy.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        dgamma[ch] += gr[ch] * xr[ch];
                        dbeta[ch] += gr[ch];
                    }
                }
                let dx = match batch_stats {
                    // Batch statistics depend on the input.
                    Some(_) => {
                        let nr = T::from_usize_lossy(g.len() / c);
                        let mut dx = vec![T::zero(); g.len()];
                        for ((d, gr), xr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                            for ch in 0..c {
                                let k = gamma[ch] * inv_std[ch] / nr;
                                d[ch] = k * (nr * gr[ch] - dbeta[ch] - xr[ch] * dgamma[ch]);
                            }
                        }
                        dx
                    }
                    None => g
                        .chunks(c)
                        .flat_map(|gr| (0..c).map(move |ch| gr[ch] * gamma[ch] * inv_std[ch]))
                        .collect(),
                };
                if want_params {
                    grads[0] = Some(Tensor::from_parts(vec![c], dgamma));
                    grads[1] = Some(Tensor::from_parts(vec![c], dbeta));
                }
                Some(Tensor::from_parts(in_shape, dx))
            }
            (LayerSpec::Dropout { .. }, Cache::Mask(mask)) => {
                let dx = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                Some(Tensor::from_parts(in_shape, dx))
            }
            (LayerSpec::Dropout { .. }, Cache::Empty) => Some(dy.reshape(in_shape)?),
            (LayerSpec::ReLU, Cache::Input(x)) => {
                let dx = dy
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                Some(Tensor::from_parts(in_shape, dx))
            }
            (&LayerSpec::LeakyReLU { slope }, Cache::Input(x)) => {
                let a = T::from_f64_lossy(slope);
                let dx = dy
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > T::zero() { g } else { a * g })
                    .collect();
                Some(Tensor::from_parts(in_shape, dx))
            }
            (LayerSpec::Softmax, Cache::Output(y)) => {
                let c = *self.input_shape.last().unwrap();
                let mut g = dy.into_data();
                if !pre_activation {
                    activation_backward(Activation::Softmax, y, &mut g, c);
                }
                Some(Tensor::from_parts(in_shape, g))
            }
            (spec, _) => {
                return Err(Error::State(format!(
                    "cache does not match layer {} ({})",
                    self.name,
                    spec.kind_name()
                )))
            }
        };
        Ok((if need_input_grad { dx } else { None }, grads))
    }

    /// Fold batch statistics from a training forward pass into the running
    /// mean and variance.
    pub fn update_running_stats(&mut self, cache: &Cache<T>) {
        if let (LayerSpec::BatchNorm { momentum, .. }, Cache::Norm { batch_stats: Some((mean, var)), .. }) =
            (&self.spec, cache)
        {
            let mom = T::from_f64_lossy(*momentum);
            let rest = T::one() - mom;
            let (head, tail) = self.params.split_at_mut(3);
            for (r, &m) in head[2].data_mut().iter_mut().zip(mean) {
                *r = mom * *r + rest * m;
            }
            for (r, &v) in tail[0].data_mut().iter_mut().zip(var) {
                *r = mom * *r + rest * v;
            }
        }
    }
}
