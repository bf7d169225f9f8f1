//! Dense rank-3 tensors and the handful of operations the recurrent cells need.
//!
//! Memory order is row-major `(height, width, channels)`: the channel index
//! varies fastest. Convolution kernels are stored `(kh, kw, in, out)` and
//! applied as cross-correlation with zero padding so that output height and
//! width equal the input's ("same" padding).

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// `(height, width, channels)`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape3(pub usize, pub usize, pub usize);

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.0, self.1, self.2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Invalid(format!(
                "tensor dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let len = height * width * channels;
        if data.len() != len {
            return Err(Error::shape(
                "Tensor3::new",
                format!("{len} values for {height}x{width}x{channels}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor3 {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(
            height > 0 && width > 0 && channels > 0,
            "tensor dimensions must be positive"
        );
        Tensor3 {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros_like(other: &Tensor3) -> Self {
        Self::zeros(other.height, other.width, other.channels)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Self::zeros(height, width, channels);
        let mut k = 0;
        for i in 0..height {
            for j in 0..width {
                for d in 0..channels {
                    t.data[k] = f(i, j, d);
                    k += 1;
                }
            }
        }
        t
    }

    /// Entries drawn uniformly from `[-scale, scale)`.
    pub fn random_uniform<R: Rng + ?Sized>(
        height: usize,
        width: usize,
        channels: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut t = Self::zeros(height, width, channels);
        for v in &mut t.data {
            *v = rng.random_range(-scale..scale);
        }
        t
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> Shape3 {
        Shape3(self.height, self.width, self.channels)
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, d: usize) -> usize {
        debug_assert!(i < self.height && j < self.width && d < self.channels);
        (i * self.width + j) * self.channels + d
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, d: usize) -> f64 {
        self.data[self.offset(i, j, d)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, d: usize, value: f64) {
        let o = self.offset(i, j, d);
        self.data[o] = value;
    }

    /// Channel vector at spatial position `(i, j)`.
    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.width + j) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = (i * self.width + j) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Result<Tensor3> {
        self.expect_shape("zip_map", other.shape())?;
        Ok(self.zip_unchecked(other, f))
    }

    pub(crate) fn zip_unchecked(&self, other: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Tensor3 {
        debug_assert_eq!(self.shape(), other.shape());
        Tensor3 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor3) -> Result<()> {
        self.expect_shape("add_assign", other.shape())?;
        self.add_assign_unchecked(other);
        Ok(())
    }

    pub(crate) fn add_assign_unchecked(&mut self, other: &Tensor3) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn expect_shape(&self, op: &'static str, expected: Shape3) -> Result<()> {
        if self.shape() == expected {
            Ok(())
        } else {
            Err(Error::shape(op, expected, self.shape()))
        }
    }

    pub(crate) fn expect_spatial(&self, op: &'static str, other: &Tensor3) -> Result<()> {
        if self.height == other.height && self.width == other.width {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("{}x{} spatial grid", other.height, other.width),
                self.shape(),
            ))
        }
    }
}

/// Convolution kernel stored `(kh, kw, in_channels, out_channels)`, the output
/// channel varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    kh: usize,
    kw: usize,
    in_channels: usize,
    out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl ConvKernel {
    pub fn new(
        kh: usize,
        kw: usize,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Invalid(format!(
                "kernel size must be odd, got {kh}x{kw}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Invalid("kernel channel counts must be positive".into()));
        }
        let len = kh * kw * in_channels * out_channels;
        if weights.len() != len {
            return Err(Error::shape(
                "ConvKernel::new",
                format!("{len} weights"),
                format!("{} weights", weights.len()),
            ));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(Error::shape(
                    "ConvKernel::new",
                    format!("bias of length {out_channels}"),
                    format!("bias of length {}", b.len()),
                ));
            }
        }
        Ok(ConvKernel {
            kh,
            kw,
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    /// Zero weights and no bias.
    pub fn zeros(kh: usize, kw: usize, in_channels: usize, out_channels: usize) -> Self {
        Self::new(
            kh,
            kw,
            in_channels,
            out_channels,
            vec![0.0; kh * kw * in_channels * out_channels],
            None,
        )
        .expect("valid kernel dimensions")
    }

    /// Glorot-uniform weights, `limit = sqrt(6 / (fan_in + fan_out))` with fans
    /// counted over `kh * kw * channels`.
    pub fn glorot<R: Rng + ?Sized>(
        kh: usize,
        kw: usize,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let mut k = Self::zeros(kh, kw, in_channels, out_channels);
        let fan_in = (kh * kw * in_channels) as f64;
        let fan_out = (kh * kw * out_channels) as f64;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        for w in &mut k.weights {
            *w = rng.random_range(-limit..limit);
        }
        k
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != self.out_channels {
            return Err(Error::shape(
                "ConvKernel::with_bias",
                format!("bias of length {}", self.out_channels),
                format!("bias of length {}", bias.len()),
            ));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn kh(&self) -> usize {
        self.kh
    }

    pub fn kw(&self) -> usize {
        self.kw
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `[kh, kw, in, out]`
    pub fn dims(&self) -> [usize; 4] {
        [self.kh, self.kw, self.in_channels, self.out_channels]
    }

    #[inline]
    fn tap(&self, ky: usize, kx: usize, ci: usize) -> &[f64] {
        let o = ((ky * self.kw + kx) * self.in_channels + ci) * self.out_channels;
        &self.weights[o..o + self.out_channels]
    }

    fn describe(&self) -> String {
        format!(
            "{}x{} kernel {}->{}",
            self.kh, self.kw, self.in_channels, self.out_channels
        )
    }
}

/// Gradients of a [`conv2d_same`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor3,
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

/// Same-padded 2-D cross-correlation. The kernel's bias is added when present.
pub fn conv2d_same(input: &Tensor3, kernel: &ConvKernel) -> Result<Tensor3> {
    if input.channels() != kernel.in_channels {
        return Err(Error::shape(
            "conv2d_same",
            kernel.describe(),
            format!("input {}", input.shape()),
        ));
    }
    let (h, w) = (input.height(), input.width());
    let mut out = Tensor3::zeros(h, w, kernel.out_channels);
    conv2d_accumulate(input, kernel, &mut out);
    if let Some(b) = &kernel.bias {
        for i in 0..h {
            for j in 0..w {
                for (o, bv) in out.pixel_mut(i, j).iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
    }
    Ok(out)
}

/// `out += input * kernel` without bias; shapes are the caller's responsibility.
pub(crate) fn conv2d_accumulate(input: &Tensor3, kernel: &ConvKernel, out: &mut Tensor3) {
    debug_assert_eq!(input.channels(), kernel.in_channels);
    debug_assert_eq!(out.channels(), kernel.out_channels);
    const BLOCK: usize = 8;
    let (h, w) = (input.height() as isize, input.width() as isize);
    let ph = (kernel.kh / 2) as isize;
    let pw = (kernel.kw / 2) as isize;
    let co = kernel.out_channels;
    for y in 0..h {
        for x in 0..w {
            let o = ((y * w + x) as usize) * co;
            // Output channels in blocks held in registers across all taps.
            for b0 in (0..co).step_by(BLOCK) {
                let width = BLOCK.min(co - b0);
                let mut acc = [0.0; BLOCK];
                for ky in 0..kernel.kh {
                    let iy = y + ky as isize - ph;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for kx in 0..kernel.kw {
                        let ix = x + kx as isize - pw;
                        if ix < 0 || ix >= w {
                            continue;
                        }
                        let src = input.pixel(iy as usize, ix as usize);
                        for (ci, &a) in src.iter().enumerate() {
                            let taps = &kernel.tap(ky, kx, ci)[b0..];
                            if width == BLOCK {
                                for k in 0..BLOCK {
                                    acc[k] += a * taps[k];
                                }
                            } else {
                                for k in 0..width {
                                    acc[k] += a * taps[k];
                                }
                            }
                        }
                    }
                }
                for (d, v) in out.data[o + b0..o + b0 + width].iter_mut().zip(acc) {
                    *d += v;
                }
            }
        }
    }
}

/// Adjoint of [`conv2d_same`]: returns gradients w.r.t. input, weights and
/// (when the kernel has one) bias.
pub fn conv2d_backward(input: &Tensor3, kernel: &ConvKernel, grad_out: &Tensor3) -> Result<ConvGrads> {
    if input.channels() != kernel.in_channels {
        return Err(Error::shape(
            "conv2d_backward",
            kernel.describe(),
            format!("input {}", input.shape()),
        ));
    }
    grad_out.expect_shape(
        "conv2d_backward",
        Shape3(input.height(), input.width(), kernel.out_channels),
    )?;
    let mut grad_input = Tensor3::zeros_like(input);
    let mut grad_weights = vec![0.0; kernel.weights.len()];
    conv2d_backward_accumulate(input, kernel, grad_out, Some(&mut grad_input), &mut grad_weights);
    let bias = kernel.bias.as_ref().map(|_| {
        let mut b = vec![0.0; kernel.out_channels];
        accumulate_bias_grad(grad_out, &mut b);
        b
    });
    Ok(ConvGrads {
        input: grad_input,
        weights: grad_weights,
        bias,
    })
}

/// Accumulating adjoint: `grad_input += K^T g`, `grad_weights += x (x) g`.
pub(crate) fn conv2d_backward_accumulate(
    input: &Tensor3,
    kernel: &ConvKernel,
    grad_out: &Tensor3,
    mut grad_input: Option<&mut Tensor3>,
    grad_weights: &mut [f64],
) {
    debug_assert_eq!(grad_weights.len(), kernel.weights.len());
    let (h, w) = (input.height() as isize, input.width() as isize);
    let ph = (kernel.kh / 2) as isize;
    let pw = (kernel.kw / 2) as isize;
    let (ci_n, co) = (kernel.in_channels, kernel.out_channels);
    // Kernel as (kh, kw, out, in) so the input adjoint is a run of axpys.
    let transposed: Vec<f64> = if grad_input.is_some() {
        let mut t = vec![0.0; kernel.weights.len()];
        for (tap, block) in kernel.weights.chunks_exact(ci_n * co).enumerate() {
            let dst = &mut t[tap * ci_n * co..(tap + 1) * ci_n * co];
            for ci in 0..ci_n {
                for o in 0..co {
                    dst[o * ci_n + ci] = block[ci * co + o];
                }
            }
        }
        t
    } else {
        Vec::new()
    };
    for y in 0..h {
        for x in 0..w {
            let g = grad_out.pixel(y as usize, x as usize);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..kernel.kh {
                let iy = y + ky as isize - ph;
                if iy < 0 || iy >= h {
                    continue;
                }
                for kx in 0..kernel.kw {
                    let ix = x + kx as isize - pw;
                    if ix < 0 || ix >= w {
                        continue;
                    }
                    let tap = ky * kernel.kw + kx;
                    let src = input.pixel(iy as usize, ix as usize);
                    for (ci, &a) in src.iter().enumerate() {
                        if a != 0.0 {
                            let off = (tap * ci_n + ci) * co;
                            for (gw, &gv) in grad_weights[off..off + co].iter_mut().zip(g) {
                                *gw += a * gv;
                            }
                        }
                    }
                    if let Some(gi) = grad_input.as_deref_mut() {
                        let dst = gi.pixel_mut(iy as usize, ix as usize);
                        let taps = &transposed[tap * ci_n * co..(tap + 1) * ci_n * co];
                        for (&gv, row) in g.iter().zip(taps.chunks_exact(ci_n)) {
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, &wv) in dst.iter_mut().zip(row) {
                                *d += gv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `grad_bias[c] += sum over positions of grad_out[., ., c]`
pub(crate) fn accumulate_bias_grad(grad_out: &Tensor3, grad_bias: &mut [f64]) {
    debug_assert_eq!(grad_bias.len(), grad_out.channels());
    for px in grad_out.data.chunks_exact(grad_out.channels()) {
        for (b, g) in grad_bias.iter_mut().zip(px) {
            *b += g;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Invalid(format!(
                "unknown activation {other:?} (expected sigmoid or tanh)"
            ))),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(t: &Tensor3, kind: Activation) -> Tensor3 {
    t.map(|x| kind.apply(x))
}

/// Softmax taken jointly over every spatial position of a one-channel map.
pub fn softmax_grid(logits: &Tensor3) -> Result<Tensor3> {
    if logits.channels() != 1 {
        return Err(Error::shape(
            "softmax_grid",
            format!("{}x{}x1", logits.height(), logits.width()),
            logits.shape(),
        ));
    }
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.map(|z| (z - max).exp());
    let total: f64 = out.data().iter().sum();
    for v in out.data_mut() {
        *v /= total;
    }
    Ok(out)
}

/// Vector-Jacobian product of [`softmax_grid`] given its output `probs`.
pub(crate) fn softmax_grid_backward(probs: &Tensor3, grad_probs: &Tensor3) -> Tensor3 {
    let dot: f64 = probs
        .data()
        .iter()
        .zip(grad_probs.data())
        .map(|(p, g)| p * g)
        .sum();
    probs.zip_unchecked(grad_probs, |p, g| p * (g - dot))
}

/// `out[i, j, d] = map[i, j] * features[i, j, d]`
pub fn broadcast_mul(map: &Tensor3, features: &Tensor3) -> Result<Tensor3> {
    if map.channels() != 1 {
        return Err(Error::shape(
            "broadcast_mul",
            format!("{}x{}x1 map", map.height(), map.width()),
            map.shape(),
        ));
    }
    map.expect_spatial("broadcast_mul", features)?;
    let mut out = features.clone();
    for i in 0..features.height() {
        for j in 0..features.width() {
            let m = map.get(i, j, 0);
            for v in out.pixel_mut(i, j) {
                *v *= m;
            }
        }
    }
    Ok(out)
}

/// Per-channel mean over all spatial positions.
pub fn global_avg_pool(t: &Tensor3) -> Vec<f64> {
    let mut out = vec![0.0; t.channels()];
    for px in t.data().chunks_exact(t.channels()) {
        for (o, v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let n = t.positions() as f64;
    for o in &mut out {
        *o /= n;
    }
    out
}

/// Spreads a pooled gradient uniformly back over the grid.
pub(crate) fn global_avg_pool_backward(grad: &[f64], height: usize, width: usize) -> Tensor3 {
    let n = (height * width) as f64;
    Tensor3::from_fn(height, width, grad.len(), |_, _, d| grad[d] / n)
}
