//! Convolutional LSTM cell with a spatial soft-attention input.
//!
//! One attentive step computes
//!
//! ```text
//! e  = tanh(W_ha * h_prev + W_xa * F + b_a)      (1x1 convolutions)
//! l  = softmax_grid(W_z * e)                      (one map over the K x K grid)
//! x  = l . F                                      (broadcast over channels)
//! i, f, o = sigmoid(W_x? * x + W_h? * h_prev + b_?)
//! g  = act(W_xc * x + W_hc * h_prev + b_c)        (act = sigmoid or tanh)
//! c  = f . c_prev + i . g
//! h  = o . tanh(c)
//! ```
//!
//! `W_xa` reads the raw frame features `F`, since `x` is not yet available
//! when the map is built. [`AttentionInput::HiddenOnly`] drops that term.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    accumulate_bias_grad, broadcast_mul, conv2d_accumulate, conv2d_backward_accumulate,
    softmax_grid, softmax_grid_backward, Activation, ConvKernel, Shape3, Tensor3,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmParams {
    pub w_xi: ConvKernel,
    pub w_hi: ConvKernel,
    pub b_i: Vec<f64>,
    pub w_xf: ConvKernel,
    pub w_hf: ConvKernel,
    pub b_f: Vec<f64>,
    pub w_xo: ConvKernel,
    pub w_ho: ConvKernel,
    pub b_o: Vec<f64>,
    pub w_xc: ConvKernel,
    pub w_hc: ConvKernel,
    pub b_c: Vec<f64>,
}

/// Initial forget-gate bias.
pub const FORGET_BIAS_INIT: f64 = 1.0;

impl ConvLstmParams {
    pub fn zeros(in_channels: usize, n_hidden: usize, kernel_size: usize) -> Self {
        let k = kernel_size;
        let x = || ConvKernel::zeros(k, k, in_channels, n_hidden);
        let h = || ConvKernel::zeros(k, k, n_hidden, n_hidden);
        let b = || vec![0.0; n_hidden];
        ConvLstmParams {
            w_xi: x(),
            w_hi: h(),
            b_i: b(),
            w_xf: x(),
            w_hf: h(),
            b_f: b(),
            w_xo: x(),
            w_ho: h(),
            b_o: b(),
            w_xc: x(),
            w_hc: h(),
            b_c: b(),
        }
    }

    /// Glorot-uniform kernels, forget bias [`FORGET_BIAS_INIT`], other biases zero.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        n_hidden: usize,
        kernel_size: usize,
        rng: &mut R,
    ) -> Self {
        let k = kernel_size;
        let mut p = Self::zeros(in_channels, n_hidden, kernel_size);
        for (wx, wh, _) in p.gates_mut() {
            *wx = ConvKernel::glorot(k, k, in_channels, n_hidden, rng);
            *wh = ConvKernel::glorot(k, k, n_hidden, n_hidden, rng);
        }
        p.b_f.fill(FORGET_BIAS_INIT);
        p
    }

    pub fn in_channels(&self) -> usize {
        self.w_xi.in_channels()
    }

    pub fn n_hidden(&self) -> usize {
        self.w_hi.out_channels()
    }

    pub fn kernel_size(&self) -> usize {
        self.w_xi.kh()
    }

    /// Gate parameter triples in the order input, forget, output, candidate.
    pub fn gates(&self) -> [(&ConvKernel, &ConvKernel, &Vec<f64>); 4] {
        [
            (&self.w_xi, &self.w_hi, &self.b_i),
            (&self.w_xf, &self.w_hf, &self.b_f),
            (&self.w_xo, &self.w_ho, &self.b_o),
            (&self.w_xc, &self.w_hc, &self.b_c),
        ]
    }

    pub fn gates_mut(&mut self) -> [(&mut ConvKernel, &mut ConvKernel, &mut Vec<f64>); 4] {
        [
            (&mut self.w_xi, &mut self.w_hi, &mut self.b_i),
            (&mut self.w_xf, &mut self.w_hf, &mut self.b_f),
            (&mut self.w_xo, &mut self.w_ho, &mut self.b_o),
            (&mut self.w_xc, &mut self.w_hc, &mut self.b_c),
        ]
    }

    /// Zeroed copy, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels(), self.n_hidden(), self.kernel_size())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_ha: ConvKernel,
    pub w_xa: ConvKernel,
    pub b_a: Vec<f64>,
    pub w_z: ConvKernel,
}

impl AttentionParams {
    pub fn zeros(feature_channels: usize, n_hidden: usize, a_channels: usize) -> Self {
        AttentionParams {
            w_ha: ConvKernel::zeros(1, 1, n_hidden, a_channels),
            w_xa: ConvKernel::zeros(1, 1, feature_channels, a_channels),
            b_a: vec![0.0; a_channels],
            w_z: ConvKernel::zeros(1, 1, a_channels, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(
        feature_channels: usize,
        n_hidden: usize,
        a_channels: usize,
        rng: &mut R,
    ) -> Self {
        AttentionParams {
            w_ha: ConvKernel::glorot(1, 1, n_hidden, a_channels, rng),
            w_xa: ConvKernel::glorot(1, 1, feature_channels, a_channels, rng),
            b_a: vec![0.0; a_channels],
            w_z: ConvKernel::glorot(1, 1, a_channels, 1, rng),
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.w_xa.in_channels()
    }

    pub fn n_hidden(&self) -> usize {
        self.w_ha.in_channels()
    }

    pub fn a_channels(&self) -> usize {
        self.w_ha.out_channels()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.feature_channels(), self.n_hidden(), self.a_channels())
    }
}

/// Which inputs drive the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionInput {
    /// Previous hidden state and the current frame's features.
    Features,
    /// Previous hidden state only (`W_xa` unused).
    HiddenOnly,
}

impl AttentionInput {
    pub fn name(self) -> &'static str {
        match self {
            AttentionInput::Features => "features",
            AttentionInput::HiddenOnly => "hidden_only",
        }
    }
}

impl std::str::FromStr for AttentionInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(AttentionInput::Features),
            "hidden_only" => Ok(AttentionInput::HiddenOnly),
            other => Err(Error::Invalid(format!(
                "unknown attention input {other:?} (expected features or hidden_only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Tensor3,
    pub c: Tensor3,
}

impl CellState {
    pub fn zeros(height: usize, width: usize, n_hidden: usize) -> Self {
        CellState {
            h: Tensor3::zeros(height, width, n_hidden),
            c: Tensor3::zeros(height, width, n_hidden),
        }
    }
}

/// Attention-side intermediates of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache {
    pub features: Tensor3,
    /// `tanh(W_ha * h_prev + W_xa * F + b_a)`
    pub hidden: Tensor3,
    pub logits: Tensor3,
    pub map: Tensor3,
    pub mode: AttentionInput,
}

/// Everything the adjoint of one step needs.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    pub attention: Option<AttentionCache>,
    pub x: Tensor3,
    pub h_prev: Tensor3,
    pub c_prev: Tensor3,
    pub i: Tensor3,
    pub f: Tensor3,
    pub o: Tensor3,
    pub g: Tensor3,
    pub c: Tensor3,
    pub tanh_c: Tensor3,
    pub h: Tensor3,
    pub g_activation: Activation,
}

/// Gradients produced by [`step_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrads {
    pub params: ConvLstmParams,
    pub attention: Option<AttentionParams>,
    /// W.r.t. the raw frame features when the step was attentive, else w.r.t. `x`.
    pub input: Tensor3,
    pub h_prev: Tensor3,
    pub c_prev: Tensor3,
}

fn attention_forward(
    f_t: &Tensor3,
    h_prev: &Tensor3,
    p: &AttentionParams,
    mode: AttentionInput,
) -> Result<AttentionCache> {
    f_t.expect_spatial("attention_map", h_prev)?;
    if h_prev.channels() != p.n_hidden() {
        return Err(Error::shape(
            "attention_map",
            format!("hidden state with {} channels", p.n_hidden()),
            h_prev.shape(),
        ));
    }
    if mode == AttentionInput::Features && f_t.channels() != p.feature_channels() {
        return Err(Error::shape(
            "attention_map",
            format!("features with {} channels", p.feature_channels()),
            f_t.shape(),
        ));
    }
    let (kh, kw) = (f_t.height(), f_t.width());
    let mut pre = Tensor3::zeros(kh, kw, p.a_channels());
    conv2d_accumulate(h_prev, &p.w_ha, &mut pre);
    if mode == AttentionInput::Features {
        conv2d_accumulate(f_t, &p.w_xa, &mut pre);
    }
    add_channel_bias(&mut pre, &p.b_a);
    let hidden = pre.map(f64::tanh);
    let mut logits = Tensor3::zeros(kh, kw, 1);
    conv2d_accumulate(&hidden, &p.w_z, &mut logits);
    let map = softmax_grid(&logits)?;
    Ok(AttentionCache {
        features: f_t.clone(),
        hidden,
        logits,
        map,
        mode,
    })
}

/// Attention map over the grid and the logits it was computed from.
pub fn attention_map(
    f_t: &Tensor3,
    h_prev: &Tensor3,
    p: &AttentionParams,
    mode: AttentionInput,
) -> Result<(Tensor3, Tensor3)> {
    let cache = attention_forward(f_t, h_prev, p, mode)?;
    Ok((cache.map, cache.logits))
}

/// Weights every feature column by its attention value.
pub fn apply_attention(f_t: &Tensor3, l_t: &Tensor3) -> Result<Tensor3> {
    broadcast_mul(l_t, f_t)
}

fn add_channel_bias(t: &mut Tensor3, bias: &[f64]) {
    for px in t.data_mut().chunks_exact_mut(bias.len()) {
        for (v, b) in px.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// One ConvLSTM update on an already-formed input `x_t`.
pub fn cell_step(
    x_t: &Tensor3,
    prev: &CellState,
    p: &ConvLstmParams,
    g_activation: Activation,
) -> Result<(CellState, StepCache)> {
    let n = p.n_hidden();
    if x_t.channels() != p.in_channels() {
        return Err(Error::shape(
            "cell_step",
            format!("input with {} channels", p.in_channels()),
            x_t.shape(),
        ));
    }
    let state_shape = Shape3(x_t.height(), x_t.width(), n);
    prev.h.expect_shape("cell_step (h_prev)", state_shape)?;
    prev.c.expect_shape("cell_step (c_prev)", state_shape)?;

    let pre_activation = |wx: &ConvKernel, wh: &ConvKernel, b: &[f64]| {
        let mut z = Tensor3::zeros(x_t.height(), x_t.width(), n);
        conv2d_accumulate(x_t, wx, &mut z);
        conv2d_accumulate(&prev.h, wh, &mut z);
        add_channel_bias(&mut z, b);
        z
    };
    let i = pre_activation(&p.w_xi, &p.w_hi, &p.b_i).map(|z| Activation::Sigmoid.apply(z));
    let f = pre_activation(&p.w_xf, &p.w_hf, &p.b_f).map(|z| Activation::Sigmoid.apply(z));
    let o = pre_activation(&p.w_xo, &p.w_ho, &p.b_o).map(|z| Activation::Sigmoid.apply(z));
    let g = pre_activation(&p.w_xc, &p.w_hc, &p.b_c).map(|z| g_activation.apply(z));

    let mut c = f.zip_unchecked(&prev.c, |f, c| f * c);
    for ((cv, iv), gv) in c.data_mut().iter_mut().zip(i.data()).zip(g.data()) {
        *cv += iv * gv;
    }
    let tanh_c = c.map(f64::tanh);
    let h = o.zip_unchecked(&tanh_c, |o, t| o * t);

    let next = CellState {
        h: h.clone(),
        c: c.clone(),
    };
    let cache = StepCache {
        attention: None,
        x: x_t.clone(),
        h_prev: prev.h.clone(),
        c_prev: prev.c.clone(),
        i,
        f,
        o,
        g,
        c,
        tanh_c,
        h,
        g_activation,
    };
    Ok((next, cache))
}

/// Attention map, feature weighting and cell update for one frame.
pub fn attentive_step(
    f_t: &Tensor3,
    prev: &CellState,
    p: &ConvLstmParams,
    ap: &AttentionParams,
    mode: AttentionInput,
    g_activation: Activation,
) -> Result<(CellState, StepCache)> {
    let att = attention_forward(f_t, &prev.h, ap, mode)?;
    let x_t = apply_attention(f_t, &att.map)?;
    let (next, mut cache) = cell_step(&x_t, prev, p, g_activation)?;
    cache.attention = Some(att);
    Ok((next, cache))
}

/// Exact adjoint of one step. `ap` is required iff the step was attentive.
pub fn step_backward(
    cache: &StepCache,
    p: &ConvLstmParams,
    ap: Option<&AttentionParams>,
    grad_h: &Tensor3,
    grad_c: &Tensor3,
) -> Result<StepGrads> {
    let mut params = p.zeros_like();
    let mut attention = ap.map(AttentionParams::zeros_like);
    let (input, h_prev, c_prev) =
        step_backward_into(cache, p, ap, grad_h, grad_c, &mut params, attention.as_mut())?;
    Ok(StepGrads {
        params,
        attention,
        input,
        h_prev,
        c_prev,
    })
}

/// Accumulating adjoint. Returns `(grad_input, grad_h_prev, grad_c_prev)`.
pub(crate) fn step_backward_into(
    cache: &StepCache,
    p: &ConvLstmParams,
    ap: Option<&AttentionParams>,
    grad_h: &Tensor3,
    grad_c: &Tensor3,
    grads: &mut ConvLstmParams,
    attention_grads: Option<&mut AttentionParams>,
) -> Result<(Tensor3, Tensor3, Tensor3)> {
    let state_shape = cache.c.shape();
    grad_h.expect_shape("step_backward (grad_h)", state_shape)?;
    grad_c.expect_shape("step_backward (grad_c)", state_shape)?;
    if p.n_hidden() != state_shape.2 || p.in_channels() != cache.x.channels() {
        return Err(Error::shape(
            "step_backward",
            format!("cell {}->{}", cache.x.channels(), state_shape.2),
            format!("parameters {}->{}", p.in_channels(), p.n_hidden()),
        ));
    }
    if cache.attention.is_some() != ap.is_some() || ap.is_some() != attention_grads.is_some() {
        return Err(Error::Invalid(
            "step_backward: attention parameters must be supplied exactly for attentive steps"
                .into(),
        ));
    }

    // dL/dc including the path through h = o * tanh(c).
    let len = cache.c.data().len();
    let mut dc = vec![0.0; len];
    let mut dz = [
        Tensor3::zeros_like(&cache.c),
        Tensor3::zeros_like(&cache.c),
        Tensor3::zeros_like(&cache.c),
        Tensor3::zeros_like(&cache.c),
    ];
    let mut grad_c_prev = Tensor3::zeros_like(&cache.c);
    for k in 0..len {
        let dh = grad_h.data()[k];
        let t = cache.tanh_c.data()[k];
        let o = cache.o.data()[k];
        let i = cache.i.data()[k];
        let f = cache.f.data()[k];
        let g = cache.g.data()[k];
        dc[k] = grad_c.data()[k] + dh * o * (1.0 - t * t);
        let d_o = dh * t;
        let d_i = dc[k] * g;
        let d_f = dc[k] * cache.c_prev.data()[k];
        let d_g = dc[k] * i;
        grad_c_prev.data_mut()[k] = dc[k] * f;
        dz[0].data_mut()[k] = d_i * i * (1.0 - i);
        dz[1].data_mut()[k] = d_f * f * (1.0 - f);
        dz[2].data_mut()[k] = d_o * o * (1.0 - o);
        dz[3].data_mut()[k] = d_g * cache.g_activation.derivative_from_output(g);
    }

    let mut grad_x = Tensor3::zeros_like(&cache.x);
    let mut grad_h_prev = Tensor3::zeros_like(&cache.h_prev);
    for ((wx, wh, b), ((gwx, gwh, gb), dz)) in p
        .gates()
        .into_iter()
        .zip(grads.gates_mut().into_iter().zip(&dz))
    {
        conv2d_backward_accumulate(&cache.x, wx, dz, Some(&mut grad_x), &mut gwx.weights);
        conv2d_backward_accumulate(&cache.h_prev, wh, dz, Some(&mut grad_h_prev), &mut gwh.weights);
        debug_assert_eq!(b.len(), gb.len());
        accumulate_bias_grad(dz, gb);
    }

    let grad_input = match (&cache.attention, ap, attention_grads) {
        (Some(att), Some(ap), Some(ag)) => {
            let features = &att.features;
            // x = l . F: product rule into both the map and the features.
            let mut grad_features = broadcast_mul(&att.map, &grad_x)?;
            let grad_map = Tensor3::from_fn(features.height(), features.width(), 1, |i, j, _| {
                grad_x
                    .pixel(i, j)
                    .iter()
                    .zip(features.pixel(i, j))
                    .map(|(g, f)| g * f)
                    .sum()
            });
            let grad_logits = softmax_grid_backward(&att.map, &grad_map);
            let mut grad_hidden = Tensor3::zeros_like(&att.hidden);
            conv2d_backward_accumulate(
                &att.hidden,
                &ap.w_z,
                &grad_logits,
                Some(&mut grad_hidden),
                &mut ag.w_z.weights,
            );
            let grad_pre = att
                .hidden
                .zip_unchecked(&grad_hidden, |e, g| g * (1.0 - e * e));
            accumulate_bias_grad(&grad_pre, &mut ag.b_a);
            conv2d_backward_accumulate(
                &cache.h_prev,
                &ap.w_ha,
                &grad_pre,
                Some(&mut grad_h_prev),
                &mut ag.w_ha.weights,
            );
            if att.mode == AttentionInput::Features {
                conv2d_backward_accumulate(
                    features,
                    &ap.w_xa,
                    &grad_pre,
                    Some(&mut grad_features),
                    &mut ag.w_xa.weights,
                );
            }
            grad_features
        }
        _ => grad_x,
    };

    Ok((grad_input, grad_h_prev, grad_c_prev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const K: usize = 3;
    const D: usize = 4;
    const N: usize = 8;
    const A: usize = 5;

    fn random_setup(seed: u64) -> (Tensor3, CellState, ConvLstmParams, AttentionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ConvLstmParams::init(D, N, 3, &mut rng);
        for (_, _, b) in p.gates_mut() {
            for v in b.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let mut ap = AttentionParams::init(D, N, A, &mut rng);
        for v in &mut ap.b_a {
            *v = rng.random_range(-0.5..0.5);
        }
        // Larger attention weights so the softmax is far from uniform.
        for w in ap.w_z.weights.iter_mut() {
            *w *= 3.0;
        }
        let f_t = Tensor3::random_uniform(K, K, D, 1.5, &mut rng);
        let prev = CellState {
            h: Tensor3::random_uniform(K, K, N, 0.9, &mut rng),
            c: Tensor3::random_uniform(K, K, N, 1.5, &mut rng),
        };
        (f_t, prev, p, ap)
    }

    #[test]
    fn zero_attention_is_uniform() {
        let ap = AttentionParams::zeros(D, N, A);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f_t = Tensor3::random_uniform(K, K, D, 1.0, &mut rng);
        let h = Tensor3::random_uniform(K, K, N, 1.0, &mut rng);
        let (map, _) = attention_map(&f_t, &h, &ap, AttentionInput::Features).unwrap();
        for &v in map.data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_cell_grid_gets_full_weight() {
        let (_, _, _, ap) = random_setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f_t = Tensor3::random_uniform(1, 1, D, 1.0, &mut rng);
        let h = Tensor3::random_uniform(1, 1, N, 1.0, &mut rng);
        let (map, _) = attention_map(&f_t, &h, &ap, AttentionInput::Features).unwrap();
        assert_eq!(map.data(), &[1.0]);
        assert_eq!(apply_attention(&f_t, &map).unwrap(), f_t);
    }

    // Same map built directly from the public tensor ops.
    #[test]
    fn attention_map_matches_composition() {
        use crate::tensor::{activation, conv2d_same};
        let (f_t, prev, _, ap) = random_setup(3);
        let (map, logits) = attention_map(&f_t, &prev.h, &ap, AttentionInput::Features).unwrap();
        let wh = conv2d_same(&prev.h, &ap.w_ha).unwrap();
        let wx = conv2d_same(&f_t, &ap.w_xa.clone().with_bias(ap.b_a.clone()).unwrap()).unwrap();
        let pre = wh.zip_map(&wx, |a, b| a + b).unwrap();
        let z = conv2d_same(&activation(&pre, Activation::Tanh), &ap.w_z).unwrap();
        let expected = softmax_grid(&z).unwrap();
        for (a, b) in logits.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in map.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concentrated_map_selects_one_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f_t = Tensor3::random_uniform(K, K, D, 1.0, &mut rng);
        let mut logits = Tensor3::zeros(K, K, 1);
        logits.set(1, 2, 0, 40.0);
        let map = softmax_grid(&logits).unwrap();
        let x = apply_attention(&f_t, &map).unwrap();
        // off-peak weight is e^-40 / (1 + 8 e^-40) < 5e-18
        for i in 0..K {
            for j in 0..K {
                for d in 0..D {
                    let expected = if (i, j) == (1, 2) { f_t.get(i, j, d) } else { 0.0 };
                    assert!((x.get(i, j, d) - expected).abs() < 1e-16);
                }
            }
        }
        // sum over positions equals the attention-weighted average of F
        for d in 0..D {
            let total: f64 = (0..K).flat_map(|i| (0..K).map(move |j| (i, j))).map(|(i, j)| x.get(i, j, d)).sum();
            let weighted: f64 = (0..K)
                .flat_map(|i| (0..K).map(move |j| (i, j)))
                .map(|(i, j)| map.get(i, j, 0) * f_t.get(i, j, d))
                .sum();
            assert!((total - weighted).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_parameter_step_closed_forms() {
        let p = ConvLstmParams::zeros(D, N, 3);
        let x = Tensor3::filled(K, K, D, 0.7);
        let prev = CellState::zeros(K, K, N);
        let (s, cache) = cell_step(&x, &prev, &p, Activation::Sigmoid).unwrap();
        let expected_h = 0.5 * 0.25f64.tanh();
        assert!((expected_h - 0.122459).abs() < 1e-6);
        for (&c, &h) in s.c.data().iter().zip(s.h.data()) {
            assert_eq!(c, 0.25);
            assert!((h - expected_h).abs() < 1e-15);
        }
        for t in [&cache.i, &cache.f, &cache.o, &cache.g] {
            assert!(t.data().iter().all(|&v| v == 0.5));
        }

        let (s, _) = cell_step(&x, &prev, &p, Activation::Tanh).unwrap();
        assert!(s.c.data().iter().all(|&v| v == 0.0));
        assert!(s.h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forget_bias_retains_memory() {
        let mut p = ConvLstmParams::zeros(D, N, 3);
        p.b_f.fill(10.0);
        let x = Tensor3::filled(K, K, D, 0.3);
        for v in [-1.5, 0.0, 0.8, 2.0] {
            let prev = CellState {
                h: Tensor3::zeros(K, K, N),
                c: Tensor3::filled(K, K, N, v),
            };
            let (s, _) = cell_step(&x, &prev, &p, Activation::Sigmoid).unwrap();
            for &c in s.c.data() {
                assert!((c - (v * sigmoid(10.0) + 0.25)).abs() < 1e-15);
                assert!((c - (v + 0.25)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn saturated_gates_preserve_memory() {
        for g_act in [Activation::Sigmoid, Activation::Tanh] {
            let (_, prev, mut p, _) = random_setup(9);
            // kernels to zero so the biases alone decide the gates
            for (wx, wh, _) in p.gates_mut() {
                wx.weights.fill(0.0);
                wh.weights.fill(0.0);
            }
            p.b_f.fill(30.0);
            p.b_i.fill(-30.0);
            let x = Tensor3::filled(K, K, D, 0.2);
            let (s, _) = cell_step(&x, &prev, &p, g_act).unwrap();
            let diff = s.c.zip_map(&prev.c, |a, b| a - b).unwrap();
            assert!(diff.max_abs() < 1e-9, "{}", diff.max_abs());
        }
    }

    #[test]
    fn shape_errors() {
        let (f_t, prev, p, ap) = random_setup(5);
        let bad = Tensor3::zeros(K, K, D + 1);
        assert!(cell_step(&bad, &prev, &p, Activation::Sigmoid).is_err());
        let wrong_grid = Tensor3::zeros(K + 1, K, D);
        assert!(attention_map(&wrong_grid, &prev.h, &ap, AttentionInput::Features).is_err());
        let (_, cache) =
            attentive_step(&f_t, &prev, &p, &ap, AttentionInput::Features, Activation::Sigmoid)
                .unwrap();
        let g = Tensor3::zeros(K, K, N + 1);
        assert!(step_backward(&cache, &p, Some(&ap), &g, &g).is_err());
        let g = Tensor3::zeros(K, K, N);
        assert!(step_backward(&cache, &p, None, &g, &g).is_err());
    }

    #[test]
    fn zero_incoming_gradient_gives_zero() {
        let (f_t, prev, p, ap) = random_setup(6);
        let (_, cache) =
            attentive_step(&f_t, &prev, &p, &ap, AttentionInput::Features, Activation::Sigmoid)
                .unwrap();
        let z = Tensor3::zeros(K, K, N);
        let g = step_backward(&cache, &p, Some(&ap), &z, &z).unwrap();
        assert_eq!(g.params, p.zeros_like());
        assert_eq!(g.attention.unwrap(), ap.zeros_like());
        assert_eq!(g.input.max_abs(), 0.0);
        assert_eq!(g.h_prev.max_abs(), 0.0);
        assert_eq!(g.c_prev.max_abs(), 0.0);
    }

    // ---- finite-difference oracle -------------------------------------

    /// Scalar loss `sum(h^2) + sum(w . c)` of one attentive step; the second
    /// term routes gradient through the cell-state output as well.
    fn step_loss(
        f_t: &Tensor3,
        prev: &CellState,
        p: &ConvLstmParams,
        ap: &AttentionParams,
        mode: AttentionInput,
        g_act: Activation,
        c_weight: &Tensor3,
    ) -> f64 {
        let (s, _) = attentive_step(f_t, prev, p, ap, mode, g_act).unwrap();
        let hh: f64 = s.h.data().iter().map(|v| v * v).sum();
        let cw: f64 = s.c.data().iter().zip(c_weight.data()).map(|(a, b)| a * b).sum();
        hh + cw
    }

    // Plain f64 differences: the loss is O(10), so its roundoff puts ~1e-10 of
    // noise on each quotient. The end-to-end check runs in extended precision.
    fn agrees(a: f64, n: f64) -> bool {
        (a - n).abs() <= 1e-4 * a.abs().max(n.abs()) + 1e-9
    }

    fn check_slice(
        label: &str,
        analytic: &[f64],
        mut perturbed_loss: impl FnMut(usize, f64) -> f64,
    ) {
        let eps = 1e-5;
        for (idx, &a) in analytic.iter().enumerate() {
            let n = (perturbed_loss(idx, eps) - perturbed_loss(idx, -eps)) / (2.0 * eps);
            assert!(agrees(a, n), "{label}[{idx}]: analytic {a}, numeric {n}");
        }
    }

    fn finite_difference_check(mode: AttentionInput, g_act: Activation, seed: u64) {
        let (f_t, prev, p, ap) = random_setup(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let c_weight = Tensor3::random_uniform(K, K, N, 1.0, &mut rng);
        let (s, cache) = attentive_step(&f_t, &prev, &p, &ap, mode, g_act).unwrap();
        let grad_h = s.h.map(|v| 2.0 * v);
        let grads = step_backward(&cache, &p, Some(&ap), &grad_h, &c_weight).unwrap();
        let loss = |f: &Tensor3, st: &CellState, p: &ConvLstmParams, ap: &AttentionParams| {
            step_loss(f, st, p, ap, mode, g_act, &c_weight)
        };

        let names = ["i", "f", "o", "c"];
        for gate in 0..4 {
            let analytic = grads.params.gates();
            let (gwx, gwh, gb) = analytic[gate];
            check_slice(&format!("w_x{}", names[gate]), &gwx.weights, |idx, e| {
                let mut q = p.clone();
                q.gates_mut()[gate].0.weights[idx] += e;
                loss(&f_t, &prev, &q, &ap)
            });
            check_slice(&format!("w_h{}", names[gate]), &gwh.weights, |idx, e| {
                let mut q = p.clone();
                q.gates_mut()[gate].1.weights[idx] += e;
                loss(&f_t, &prev, &q, &ap)
            });
            check_slice(&format!("b_{}", names[gate]), gb, |idx, e| {
                let mut q = p.clone();
                q.gates_mut()[gate].2[idx] += e;
                loss(&f_t, &prev, &q, &ap)
            });
        }

        let ag = grads.attention.as_ref().unwrap();
        check_slice("w_ha", &ag.w_ha.weights, |idx, e| {
            let mut q = ap.clone();
            q.w_ha.weights[idx] += e;
            loss(&f_t, &prev, &p, &q)
        });
        check_slice("w_xa", &ag.w_xa.weights, |idx, e| {
            let mut q = ap.clone();
            q.w_xa.weights[idx] += e;
            loss(&f_t, &prev, &p, &q)
        });
        check_slice("b_a", &ag.b_a, |idx, e| {
            let mut q = ap.clone();
            q.b_a[idx] += e;
            loss(&f_t, &prev, &p, &q)
        });
        check_slice("w_z", &ag.w_z.weights, |idx, e| {
            let mut q = ap.clone();
            q.w_z.weights[idx] += e;
            loss(&f_t, &prev, &p, &q)
        });
        check_slice("features", grads.input.data(), |idx, e| {
            let mut f = f_t.clone();
            f.data_mut()[idx] += e;
            loss(&f, &prev, &p, &ap)
        });
        check_slice("h_prev", grads.h_prev.data(), |idx, e| {
            let mut st = prev.clone();
            st.h.data_mut()[idx] += e;
            loss(&f_t, &st, &p, &ap)
        });
        check_slice("c_prev", grads.c_prev.data(), |idx, e| {
            let mut st = prev.clone();
            st.c.data_mut()[idx] += e;
            loss(&f_t, &st, &p, &ap)
        });
        if mode == AttentionInput::HiddenOnly {
            assert!(ag.w_xa.weights.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn step_backward_matches_finite_differences_sigmoid() {
        finite_difference_check(AttentionInput::Features, Activation::Sigmoid, 21);
    }

    #[test]
    fn step_backward_matches_finite_differences_tanh() {
        finite_difference_check(AttentionInput::Features, Activation::Tanh, 22);
    }

    #[test]
    fn step_backward_matches_finite_differences_hidden_only() {
        finite_difference_check(AttentionInput::HiddenOnly, Activation::Sigmoid, 23);
    }

    #[test]
    fn plain_cell_backward_matches_finite_differences() {
        let (_, prev, p, _) = random_setup(31);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = Tensor3::random_uniform(K, K, D, 1.0, &mut rng);
        let loss = |x: &Tensor3, st: &CellState, p: &ConvLstmParams| {
            let (s, _) = cell_step(x, st, p, Activation::Tanh).unwrap();
            s.h.data().iter().map(|v| v * v).sum::<f64>()
        };
        let (s, cache) = cell_step(&x, &prev, &p, Activation::Tanh).unwrap();
        let grads =
            step_backward(&cache, &p, None, &s.h.map(|v| 2.0 * v), &Tensor3::zeros(K, K, N))
                .unwrap();
        assert!(grads.attention.is_none());
        check_slice("x", grads.input.data(), |idx, e| {
            let mut q = x.clone();
            q.data_mut()[idx] += e;
            loss(&q, &prev, &p)
        });
        check_slice("w_hc", &grads.params.w_hc.weights, |idx, e| {
            let mut q = p.clone();
            q.w_hc.weights[idx] += e;
            loss(&x, &prev, &q)
        });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn gate_and_state_ranges(seed in any::<u64>(), tanh_g in any::<bool>()) {
            let (f_t, prev, p, ap) = random_setup(seed);
            let g_act = if tanh_g { Activation::Tanh } else { Activation::Sigmoid };
            let (s, cache) = attentive_step(&f_t, &prev, &p, &ap, AttentionInput::Features, g_act).unwrap();
            for t in [&cache.i, &cache.f, &cache.o] {
                prop_assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
            prop_assert!(s.h.data().iter().all(|&v| v > -1.0 && v < 1.0));
            let map = &cache.attention.as_ref().unwrap().map;
            prop_assert!((map.sum() - 1.0).abs() < 1e-6);
            prop_assert!(map.data().iter().all(|&v| v > 0.0));
        }

        #[test]
        fn attention_logit_shift_leaves_map_unchanged(seed in any::<u64>(), shift in -20.0f64..20.0) {
            let (f_t, prev, _, ap) = random_setup(seed);
            let (map, logits) = attention_map(&f_t, &prev.h, &ap, AttentionInput::Features).unwrap();
            let shifted = softmax_grid(&logits.map(|z| z + shift)).unwrap();
            for (a, b) in map.data().iter().zip(shifted.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
