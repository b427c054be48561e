//! Batched layers with hand-written backward passes. Every activation tensor
//! carries a leading batch dimension.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// `c = beta * c + op(a) * op(b)`, row-major slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    ta: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    let av = ArrayView2::from_shape((a_rows, a_cols), a).expect("gemm lhs shape");
    let bv = ArrayView2::from_shape((b_rows, b_cols), b).expect("gemm rhs shape");
    let av = if ta { av.reversed_axes() } else { av };
    let bv = if tb { bv.reversed_axes() } else { bv };
    let mut cv = ArrayViewMut2::from_shape((av.nrows(), bv.ncols()), c).expect("gemm out shape");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    fn new(name: &'static str, shape: Vec<usize>, value: Vec<f64>) -> Self {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Self { name, shape, value, grad: vec![0.0; n] }
    }

    fn uniform(name: &'static str, shape: Vec<usize>, limit: f64, rng: &mut dyn RngCore) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
        Self::new(name, shape, value)
    }

    fn constant(name: &'static str, shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![v; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Serializable layer description; the architecture descriptor of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Lstm { cells: usize },
    Dropout { rate: f64 },
    Conv2d { filters: usize, kernel_h: usize, kernel_w: usize, stride: usize },
    Relu,
    MaxPool2d { size: usize, stride: usize },
    Flatten,
    Dense { units: usize },
    Softmax,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Lstm { .. } => "lstm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Image-like shape `(h, w, c)`; 2-D inputs are single-channel.
fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w] => Ok((h, w, 1)),
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::Shape(format!("expected an image-shaped input, got {shape:?}"))),
    }
}

fn valid_out(n: usize, k: usize, s: usize) -> Result<usize> {
    if n < k {
        return Err(Error::Shape(format!("kernel {k} larger than input extent {n}")));
    }
    Ok((n - k) / s + 1)
}

#[derive(Debug, Clone)]
pub struct Lstm {
    pub cells: usize,
    pub input_dim: usize,
    /// `[input_dim, 4H]`, gate order i, f, g, o.
    pub w: Param,
    /// `[H, 4H]`.
    pub u: Param,
    pub b: Param,
    cache: Option<LstmCache>,
}

#[derive(Debug, Clone)]
struct LstmCache {
    batch: usize,
    steps: usize,
    /// Time-major input `[T*B, D]`.
    x: Vec<f64>,
    /// Post-activation gates `[T*B, 4H]`.
    gates: Vec<f64>,
    /// Cell states `[T*B, H]`.
    c: Vec<f64>,
    /// `tanh(c)`.
    tc: Vec<f64>,
    /// Hidden states `[T*B, H]`.
    h: Vec<f64>,
}

impl Lstm {
    pub fn new(input_dim: usize, cells: usize, rng: &mut dyn RngCore) -> Self {
        let limit = 1.0 / (cells as f64).sqrt();
        let w = Param::uniform("lstm.w", vec![input_dim, 4 * cells], limit, rng);
        let u = Param::uniform("lstm.u", vec![cells, 4 * cells], limit, rng);
        let mut b = Param::constant("lstm.b", vec![4 * cells], 0.0);
        // forget-gate bias of one keeps early gradients alive
        b.value[cells..2 * cells].fill(1.0);
        Self { cells, input_dim, w, u, b, cache: None }
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (bsz, t_len, d) = match x.shape[..] {
            [b, t, d] => (b, t, d),
            _ => return Err(Error::Shape(format!("lstm expects [B, T, D], got {:?}", x.shape))),
        };
        if d != self.input_dim {
            return Err(Error::Shape(format!("lstm expects width {}, got {d}", self.input_dim)));
        }
        let h_n = self.cells;
        let g_n = 4 * h_n;
        let mut xt = vec![0.0; t_len * bsz * d];
        for b in 0..bsz {
            for t in 0..t_len {
                let src = &x.data[(b * t_len + t) * d..(b * t_len + t + 1) * d];
                xt[(t * bsz + b) * d..(t * bsz + b + 1) * d].copy_from_slice(src);
            }
        }
        let mut gates = vec![0.0; t_len * bsz * g_n];
        for row in gates.chunks_exact_mut(g_n) {
            row.copy_from_slice(&self.b.value);
        }
        gemm(&xt, t_len * bsz, d, false, &self.w.value, d, g_n, false, &mut gates, 1.0);
        let mut c = vec![0.0; t_len * bsz * h_n];
        let mut tc = vec![0.0; t_len * bsz * h_n];
        let mut h = vec![0.0; t_len * bsz * h_n];
        for t in 0..t_len {
            let g_t = &mut gates[t * bsz * g_n..(t + 1) * bsz * g_n];
            if t > 0 {
                let h_prev = &h[(t - 1) * bsz * h_n..t * bsz * h_n];
                gemm(h_prev, bsz, h_n, false, &self.u.value, h_n, g_n, false, g_t, 1.0);
            }
            for b in 0..bsz {
                let g = &mut g_t[b * g_n..(b + 1) * g_n];
                let base = (t * bsz + b) * h_n;
                for k in 0..h_n {
                    let i = sigmoid(g[k]);
                    let f = sigmoid(g[h_n + k]);
                    let gg = g[2 * h_n + k].tanh();
                    let o = sigmoid(g[3 * h_n + k]);
                    g[k] = i;
                    g[h_n + k] = f;
                    g[2 * h_n + k] = gg;
                    g[3 * h_n + k] = o;
                    let c_prev = if t > 0 { c[base - bsz * h_n + k] } else { 0.0 };
                    let ct = f * c_prev + i * gg;
                    c[base + k] = ct;
                    tc[base + k] = ct.tanh();
                    h[base + k] = o * tc[base + k];
                }
            }
        }
        let mut out = vec![0.0; bsz * t_len * h_n];
        for b in 0..bsz {
            for t in 0..t_len {
                out[(b * t_len + t) * h_n..(b * t_len + t + 1) * h_n]
                    .copy_from_slice(&h[(t * bsz + b) * h_n..(t * bsz + b + 1) * h_n]);
            }
        }
        self.cache = Some(LstmCache { batch: bsz, steps: t_len, x: xt, gates, c, tc, h });
        Tensor::new(vec![bsz, t_len, h_n], out)
    }

    fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let cache = self.cache.as_ref().expect("lstm backward before forward");
        let (bsz, t_len, h_n, d) = (cache.batch, cache.steps, self.cells, self.input_dim);
        let g_n = 4 * h_n;
        let mut da = vec![0.0; t_len * bsz * g_n];
        let mut dh_next = vec![0.0; bsz * h_n];
        let mut dc_next = vec![0.0; bsz * h_n];
        for t in (0..t_len).rev() {
            for b in 0..bsz {
                let base = (t * bsz + b) * h_n;
                let gb = (t * bsz + b) * g_n;
                for k in 0..h_n {
                    let i = cache.gates[gb + k];
                    let f = cache.gates[gb + h_n + k];
                    let g = cache.gates[gb + 2 * h_n + k];
                    let o = cache.gates[gb + 3 * h_n + k];
                    let tc = cache.tc[base + k];
                    let dh = dy.data[(b * t_len + t) * h_n + k] + dh_next[b * h_n + k];
                    let dc = dc_next[b * h_n + k] + dh * o * (1.0 - tc * tc);
                    let c_prev = if t > 0 { cache.c[base - bsz * h_n + k] } else { 0.0 };
                    da[gb + k] = dc * g * i * (1.0 - i);
                    da[gb + h_n + k] = dc * c_prev * f * (1.0 - f);
                    da[gb + 2 * h_n + k] = dc * i * (1.0 - g * g);
                    da[gb + 3 * h_n + k] = dh * tc * o * (1.0 - o);
                    dc_next[b * h_n + k] = dc * f;
                }
            }
            let da_t = &da[t * bsz * g_n..(t + 1) * bsz * g_n];
            if t > 0 {
                let h_prev = &cache.h[(t - 1) * bsz * h_n..t * bsz * h_n];
                gemm(h_prev, bsz, h_n, true, da_t, bsz, g_n, false, &mut self.u.grad, 1.0);
                gemm(da_t, bsz, g_n, false, &self.u.value, h_n, g_n, true, &mut dh_next, 0.0);
            }
        }
        gemm(&cache.x, t_len * bsz, d, true, &da, t_len * bsz, g_n, false, &mut self.w.grad, 1.0);
        for row in da.chunks_exact(g_n) {
            self.b.grad.iter_mut().zip(row).for_each(|(g, v)| *g += v);
        }
        if !need_dx {
            return None;
        }
        let mut dxt = vec![0.0; t_len * bsz * d];
        gemm(&da, t_len * bsz, g_n, false, &self.w.value, d, g_n, true, &mut dxt, 0.0);
        let mut dx = vec![0.0; bsz * t_len * d];
        for b in 0..bsz {
            for t in 0..t_len {
                dx[(b * t_len + t) * d..(b * t_len + t + 1) * d]
                    .copy_from_slice(&dxt[(t * bsz + b) * d..(t * bsz + b + 1) * d]);
            }
        }
        Some(Tensor { shape: vec![bsz, t_len, d], data: dx })
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        Self { rate, mask: None }
    }

    fn forward(&mut self, x: &Tensor, training: bool, rng: &mut dyn RngCore) -> Tensor {
        if !training || self.rate == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let scale = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..x.data.len())
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { scale })
            .collect();
        let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.mask = Some(mask);
        Tensor { shape: x.shape.clone(), data }
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        match &self.mask {
            None => dy.clone(),
            Some(mask) => Tensor { shape: dy.shape.clone(), data: dy.data.iter().zip(mask).map(|(g, m)| g * m).collect() },
        }
    }
}

/// Valid-padding 2-D convolution over channel-last `[B, H, W, C]` inputs.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub channels: usize,
    /// `[kernel_h * kernel_w * channels, filters]`.
    pub kernel: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(channels: usize, filters: usize, kernel_h: usize, kernel_w: usize, stride: usize, rng: &mut dyn RngCore) -> Self {
        let fan_in = kernel_h * kernel_w * channels;
        let limit = (6.0 / fan_in as f64).sqrt();
        let kernel = Param::uniform("conv2d.kernel", vec![fan_in, filters], limit, rng);
        let bias = Param::constant("conv2d.bias", vec![filters], 0.0);
        Self { filters, kernel_h, kernel_w, stride, channels, kernel, bias, input: None }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (h, w, c) = image_dims(input)?;
        if c != self.channels {
            return Err(Error::Shape(format!("conv expects {} channels, got {c}", self.channels)));
        }
        Ok(vec![valid_out(h, self.kernel_h, self.stride)?, valid_out(w, self.kernel_w, self.stride)?, self.filters])
    }

    fn im2col(&self, x: &[f64], w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let c = self.channels;
        let k = self.kernel_h * self.kernel_w * c;
        let mut col = vec![0.0; oh * ow * k];
        for r in 0..oh {
            for q in 0..ow {
                let dst = &mut col[(r * ow + q) * k..(r * ow + q + 1) * k];
                for i in 0..self.kernel_h {
                    let src = ((r * self.stride + i) * w + q * self.stride) * c;
                    let len = self.kernel_w * c;
                    dst[i * len..(i + 1) * len].copy_from_slice(&x[src..src + len]);
                }
            }
        }
        col
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let bsz = x.shape[0];
        let out_shape = self.output_shape(&x.shape[1..])?;
        let (h, w, _) = image_dims(&x.shape[1..])?;
        let (oh, ow, f) = (out_shape[0], out_shape[1], self.filters);
        let k = self.kernel_h * self.kernel_w * self.channels;
        let in_len = h * w * self.channels;
        let mut out = vec![0.0; bsz * oh * ow * f];
        for b in 0..bsz {
            let col = self.im2col(&x.data[b * in_len..(b + 1) * in_len], w, oh, ow);
            let y = &mut out[b * oh * ow * f..(b + 1) * oh * ow * f];
            for row in y.chunks_exact_mut(f) {
                row.copy_from_slice(&self.bias.value);
            }
            gemm(&col, oh * ow, k, false, &self.kernel.value, k, f, false, y, 1.0);
        }
        self.input = Some(x.clone());
        let mut shape = vec![bsz];
        shape.extend(out_shape);
        Tensor::new(shape, out)
    }

    fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let x = self.input.as_ref().expect("conv backward before forward");
        let bsz = x.shape[0];
        let (h, w, c) = image_dims(&x.shape[1..]).unwrap();
        let (oh, ow, f) = (dy.shape[1], dy.shape[2], self.filters);
        let k = self.kernel_h * self.kernel_w * c;
        let in_len = h * w * c;
        let mut dx = if need_dx { vec![0.0; x.data.len()] } else { Vec::new() };
        let mut dcol = vec![0.0; oh * ow * k];
        for b in 0..bsz {
            let col = self.im2col(&x.data[b * in_len..(b + 1) * in_len], w, oh, ow);
            let g = &dy.data[b * oh * ow * f..(b + 1) * oh * ow * f];
            gemm(&col, oh * ow, k, true, g, oh * ow, f, false, &mut self.kernel.grad, 1.0);
            for row in g.chunks_exact(f) {
                self.bias.grad.iter_mut().zip(row).for_each(|(bg, v)| *bg += v);
            }
            if need_dx {
                gemm(g, oh * ow, f, false, &self.kernel.value, k, f, true, &mut dcol, 0.0);
                let dxb = &mut dx[b * in_len..(b + 1) * in_len];
                for r in 0..oh {
                    for q in 0..ow {
                        let src = &dcol[(r * ow + q) * k..(r * ow + q + 1) * k];
                        for i in 0..self.kernel_h {
                            let dst = ((r * self.stride + i) * w + q * self.stride) * c;
                            let len = self.kernel_w * c;
                            dxb[dst..dst + len].iter_mut().zip(&src[i * len..(i + 1) * len]).for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
        }
        need_dx.then(|| Tensor { shape: x.shape.clone(), data: dx })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.mask = x.data.iter().map(|&v| v > 0.0).collect();
        Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| v.max(0.0)).collect() }
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let data = dy.data.iter().zip(&self.mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect();
        Tensor { shape: dy.shape.clone(), data }
    }
}

/// Valid-padding max pooling, first maximum wins on ties.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub size: usize,
    pub stride: usize,
    argmax: Vec<usize>,
    input_shape: Vec<usize>,
}

impl MaxPool2d {
    pub fn new(size: usize, stride: usize) -> Self {
        Self { size, stride, argmax: Vec::new(), input_shape: Vec::new() }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (h, w, c) = image_dims(input)?;
        Ok(vec![valid_out(h, self.size, self.stride)?, valid_out(w, self.size, self.stride)?, c])
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let bsz = x.shape[0];
        let (h, w, c) = image_dims(&x.shape[1..])?;
        let os = self.output_shape(&x.shape[1..])?;
        let (oh, ow) = (os[0], os[1]);
        let mut out = Vec::with_capacity(bsz * oh * ow * c);
        self.argmax.clear();
        for b in 0..bsz {
            let base = b * h * w * c;
            for r in 0..oh {
                for q in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0;
                        for i in 0..self.size {
                            for j in 0..self.size {
                                let idx = base + ((r * self.stride + i) * w + q * self.stride + j) * c + ch;
                                if x.data[idx] > best {
                                    best = x.data[idx];
                                    arg = idx;
                                }
                            }
                        }
                        out.push(best);
                        self.argmax.push(arg);
                    }
                }
            }
        }
        self.input_shape = x.shape.clone();
        let mut shape = vec![bsz];
        shape.extend(os);
        Tensor::new(shape, out)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut dx = vec![0.0; self.input_shape.iter().product()];
        for (&idx, &g) in self.argmax.iter().zip(&dy.data) {
            dx[idx] += g;
        }
        Tensor { shape: self.input_shape.clone(), data: dx }
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub input_dim: usize,
    pub units: usize,
    /// `[input_dim, units]`.
    pub w: Param,
    pub b: Param,
    input: Option<Tensor>,
}

impl Dense {
    /// `gain` is 6 for layers feeding a rectifier (He) and 3 otherwise (LeCun).
    pub fn new(input_dim: usize, units: usize, gain: f64, rng: &mut dyn RngCore) -> Self {
        let limit = (gain / input_dim as f64).sqrt();
        let w = Param::uniform("dense.w", vec![input_dim, units], limit, rng);
        let b = Param::constant("dense.b", vec![units], 0.0);
        Self { input_dim, units, w, b, input: None }
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 2 || x.shape[1] != self.input_dim {
            return Err(Error::Shape(format!("dense expects [B, {}], got {:?}", self.input_dim, x.shape)));
        }
        let bsz = x.shape[0];
        let mut out = vec![0.0; bsz * self.units];
        for row in out.chunks_exact_mut(self.units) {
            row.copy_from_slice(&self.b.value);
        }
        gemm(&x.data, bsz, self.input_dim, false, &self.w.value, self.input_dim, self.units, false, &mut out, 1.0);
        self.input = Some(x.clone());
        Tensor::new(vec![bsz, self.units], out)
    }

    fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let x = self.input.as_ref().expect("dense backward before forward");
        let bsz = x.shape[0];
        gemm(&x.data, bsz, self.input_dim, true, &dy.data, bsz, self.units, false, &mut self.w.grad, 1.0);
        for row in dy.data.chunks_exact(self.units) {
            self.b.grad.iter_mut().zip(row).for_each(|(g, v)| *g += v);
        }
        need_dx.then(|| {
            let mut dx = vec![0.0; bsz * self.input_dim];
            gemm(&dy.data, bsz, self.units, false, &self.w.value, self.input_dim, self.units, true, &mut dx, 0.0);
            Tensor { shape: x.shape.clone(), data: dx }
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Softmax {
    out: Option<Tensor>,
}

pub fn softmax_row(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

impl Softmax {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let n = *x.shape.last().unwrap();
        let mut data = vec![0.0; x.data.len()];
        for (z, o) in x.data.chunks_exact(n).zip(data.chunks_exact_mut(n)) {
            softmax_row(z, o);
        }
        let out = Tensor { shape: x.shape.clone(), data };
        self.out = Some(out.clone());
        out
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let p = self.out.as_ref().expect("softmax backward before forward");
        let n = *p.shape.last().unwrap();
        let mut dx = vec![0.0; p.data.len()];
        for ((pr, gr), dr) in p.data.chunks_exact(n).zip(dy.data.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
            let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for k in 0..n {
                dr[k] = pr[k] * (gr[k] - dot);
            }
        }
        Tensor { shape: p.shape.clone(), data: dx }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Lstm(Lstm),
    Dropout(Dropout),
    Conv2d(Conv2d),
    Relu(Relu),
    MaxPool2d(MaxPool2d),
    Flatten(Vec<usize>),
    Dense(Dense),
    Softmax(Softmax),
}

impl Layer {
    /// Instantiates `spec` for a per-sample `input` shape, returning the
    /// layer and its per-sample output shape.
    pub fn build(spec: &LayerSpec, input: &[usize], gain: f64, rng: &mut dyn RngCore) -> Result<(Layer, Vec<usize>)> {
        Ok(match *spec {
            LayerSpec::Lstm { cells } => {
                let [t, d] = input[..] else {
                    return Err(Error::Shape(format!("lstm expects [T, D] input, got {input:?}")));
                };
                (Layer::Lstm(Lstm::new(d, cells, rng)), vec![t, cells])
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::InvalidParameter(format!("dropout rate {rate} outside [0, 1)")));
                }
                (Layer::Dropout(Dropout::new(rate)), input.to_vec())
            }
            LayerSpec::Conv2d { filters, kernel_h, kernel_w, stride } => {
                if filters == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
                    return Err(Error::InvalidParameter("conv dimensions must be positive".into()));
                }
                let (_, _, c) = image_dims(input)?;
                let conv = Conv2d::new(c, filters, kernel_h, kernel_w, stride, rng);
                let out = conv.output_shape(input)?;
                (Layer::Conv2d(conv), out)
            }
            LayerSpec::Relu => (Layer::Relu(Relu::default()), input.to_vec()),
            LayerSpec::MaxPool2d { size, stride } => {
                if size == 0 || stride == 0 {
                    return Err(Error::InvalidParameter("pool dimensions must be positive".into()));
                }
                let pool = MaxPool2d::new(size, stride);
                let out = pool.output_shape(input)?;
                (Layer::MaxPool2d(pool), out)
            }
            LayerSpec::Flatten => (Layer::Flatten(Vec::new()), vec![input.iter().product()]),
            LayerSpec::Dense { units } => {
                let [d] = input[..] else {
                    return Err(Error::Shape(format!("dense expects a flat input, got {input:?}")));
                };
                (Layer::Dense(Dense::new(d, units, gain, rng)), vec![units])
            }
            LayerSpec::Softmax => (Layer::Softmax(Softmax::default()), input.to_vec()),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Lstm(_) => "lstm",
            Layer::Dropout(_) => "dropout",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu(_) => "relu",
            Layer::MaxPool2d(_) => "maxpool2d",
            Layer::Flatten(_) => "flatten",
            Layer::Dense(_) => "dense",
            Layer::Softmax(_) => "softmax",
        }
    }

    pub fn forward(&mut self, x: &Tensor, training: bool, rng: &mut dyn RngCore) -> Result<Tensor> {
        match self {
            Layer::Lstm(l) => l.forward(x),
            Layer::Dropout(l) => Ok(l.forward(x, training, rng)),
            Layer::Conv2d(l) => l.forward(x),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::MaxPool2d(l) => l.forward(x),
            Layer::Flatten(shape) => {
                *shape = x.shape.clone();
                let per: usize = x.shape[1..].iter().product();
                Ok(Tensor { shape: vec![x.shape[0], per], data: x.data.clone() })
            }
            Layer::Dense(l) => l.forward(x),
            Layer::Softmax(l) => Ok(l.forward(x)),
        }
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_dx` (parameter-free layers always return it).
    pub fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        match self {
            Layer::Lstm(l) => l.backward(dy, need_dx),
            Layer::Dropout(l) => Some(l.backward(dy)),
            Layer::Conv2d(l) => l.backward(dy, need_dx),
            Layer::Relu(l) => Some(l.backward(dy)),
            Layer::MaxPool2d(l) => Some(l.backward(dy)),
            Layer::Flatten(shape) => Some(Tensor { shape: shape.clone(), data: dy.data.clone() }),
            Layer::Dense(l) => l.backward(dy, need_dx),
            Layer::Softmax(l) => Some(l.backward(dy)),
        }
    }

    /// Branch decisions taken by the last forward pass: ReLU signs and
    /// pooling winners. The layer is smooth in its input while they hold.
    pub fn switch_pattern(&self) -> Vec<usize> {
        match self {
            Layer::Relu(l) => l.mask.iter().map(|&m| usize::from(m)).collect(),
            Layer::MaxPool2d(l) => l.argmax.clone(),
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Lstm(l) => vec![&l.w, &l.u, &l.b],
            Layer::Conv2d(l) => vec![&l.kernel, &l.bias],
            Layer::Dense(l) => vec![&l.w, &l.b],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Lstm(l) => vec![&mut l.w, &mut l.u, &mut l.b],
            Layer::Conv2d(l) => vec![&mut l.kernel, &mut l.bias],
            Layer::Dense(l) => vec![&mut l.w, &mut l.b],
            _ => Vec::new(),
        }
    }
}
