//! Single-layer Conv-Attention and the two-layer hierarchical model.
//!
//! Layer 1 is an attentive ConvLSTM that runs on every frame. Layer 2 is a
//! plain ConvLSTM that reads layer 1's hidden state every `skip_stride`
//! frames. At each aligned step the spatially pooled hidden states of both
//! layers are concatenated, passed through dropout and an affine head, and
//! turned into class probabilities. Training sums per-step cross-entropy;
//! prediction averages the per-step probabilities over time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cell::{
    attentive_step, cell_step, step_backward_into, AttentionInput, AttentionParams, CellState,
    ConvLstmParams, StepCache,
};
use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::tensor::{global_avg_pool, global_avg_pool_backward, Activation, Shape3, Tensor3};

/// Probabilities are clipped to `[PROB_FLOOR, 1]` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ChamConfig {
    /// Spatial grid side `K`.
    pub grid: usize,
    pub feature_channels: usize,
    pub n_hidden: usize,
    pub a_channels: usize,
    pub num_classes: usize,
    pub seq_len: usize,
    pub skip_stride: usize,
    /// Side of the square input-to-state and state-to-state kernels.
    pub kernel_size: usize,
    /// Width of an optional tanh layer in the classifier head; 0 disables it.
    pub head_hidden: usize,
    pub g_activation: Activation,
    pub attention_input: AttentionInput,
    pub dropout_rate: f64,
    pub layer2_enabled: bool,
}

impl Default for ChamConfig {
    fn default() -> Self {
        ChamConfig {
            grid: 7,
            feature_channels: 16,
            n_hidden: 32,
            a_channels: 32,
            num_classes: 3,
            seq_len: 12,
            skip_stride: 2,
            kernel_size: 3,
            head_hidden: 0,
            g_activation: Activation::Sigmoid,
            attention_input: AttentionInput::Features,
            dropout_rate: 0.5,
            layer2_enabled: true,
        }
    }
}

impl ChamConfig {
    /// Small configuration used for finite-difference gradient checks.
    pub fn gradcheck() -> Self {
        ChamConfig {
            grid: 3,
            feature_channels: 4,
            n_hidden: 6,
            a_channels: 4,
            num_classes: 2,
            seq_len: 4,
            skip_stride: 2,
            dropout_rate: 0.0,
            ..ChamConfig::default()
        }
    }

    /// Feature maps of 7x7x2048, 512 hidden and attention channels, 60 frames.
    pub fn full_scale(num_classes: usize) -> Self {
        ChamConfig {
            grid: 7,
            feature_channels: 2048,
            n_hidden: 512,
            a_channels: 512,
            num_classes,
            seq_len: 60,
            skip_stride: 2,
            ..ChamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid", self.grid),
            ("feature_channels", self.feature_channels),
            ("n_hidden", self.n_hidden),
            ("a_channels", self.a_channels),
            ("num_classes", self.num_classes),
            ("seq_len", self.seq_len),
            ("skip_stride", self.skip_stride),
            ("kernel_size", self.kernel_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.layer2_enabled && self.seq_len < self.skip_stride {
            return Err(Error::Config(format!(
                "seq_len {} is shorter than skip_stride {}: layer 2 would never run",
                self.seq_len, self.skip_stride
            )));
        }
        Ok(())
    }

    /// Number of classifier evaluations per sequence. A tail of
    /// `seq_len % skip_stride` frames feeds layer 1 only.
    pub fn aligned_steps(&self) -> usize {
        if self.layer2_enabled {
            self.seq_len / self.skip_stride
        } else {
            self.seq_len
        }
    }

    /// 0-based frame index that feeds aligned step `k`.
    pub fn tap_frame(&self, k: usize) -> usize {
        if self.layer2_enabled {
            (k + 1) * self.skip_stride - 1
        } else {
            k
        }
    }

    pub fn head_input_width(&self) -> usize {
        if self.layer2_enabled {
            2 * self.n_hidden
        } else {
            self.n_hidden
        }
    }

    pub fn frame_shape(&self) -> Shape3 {
        Shape3(self.grid, self.grid, self.feature_channels)
    }
}

/// Affine map `y = W x + b`, `W` stored row-major `(outputs, inputs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut d = Self::zeros(inputs, outputs);
        for w in &mut d.weight {
            *w = rng.random_range(-limit..limit);
        }
        d
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients into `grads`; returns `dL/dx`.
    fn backward_into(&self, x: &[f64], grad_out: &[f64], grads: &mut Dense) -> Vec<f64> {
        let mut grad_x = vec![0.0; self.inputs];
        for (r, &g) in grad_out.iter().enumerate() {
            grads.bias[r] += g;
            let row = &self.weight[r * self.inputs..(r + 1) * self.inputs];
            let grow = &mut grads.weight[r * self.inputs..(r + 1) * self.inputs];
            for ((gw, gx), (&w, &v)) in grow.iter_mut().zip(grad_x.iter_mut()).zip(row.iter().zip(x)) {
                *gw += g * v;
                *gx += g * w;
            }
        }
        grad_x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub hidden: Option<Dense>,
    pub output: Dense,
}

impl HeadParams {
    fn zeros(config: &ChamConfig) -> Self {
        let width = config.head_input_width();
        if config.head_hidden > 0 {
            HeadParams {
                hidden: Some(Dense::zeros(width, config.head_hidden)),
                output: Dense::zeros(config.head_hidden, config.num_classes),
            }
        } else {
            HeadParams {
                hidden: None,
                output: Dense::zeros(width, config.num_classes),
            }
        }
    }

    fn init<R: Rng + ?Sized>(config: &ChamConfig, rng: &mut R) -> Self {
        let width = config.head_input_width();
        if config.head_hidden > 0 {
            let hidden = Dense::glorot(width, config.head_hidden, rng);
            let output = Dense::glorot(config.head_hidden, config.num_classes, rng);
            HeadParams {
                hidden: Some(hidden),
                output,
            }
        } else {
            HeadParams {
                hidden: None,
                output: Dense::glorot(width, config.num_classes, rng),
            }
        }
    }

    fn zeros_like(&self) -> Self {
        HeadParams {
            hidden: self.hidden.as_ref().map(|d| Dense::zeros(d.inputs, d.outputs)),
            output: Dense::zeros(self.output.inputs, self.output.outputs),
        }
    }
}

/// A named view of one parameter tensor.
#[derive(Debug)]
pub struct ParamRef<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct ParamMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

/// Every trainable tensor of the model. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ChamParams {
    pub layer1: ConvLstmParams,
    pub attention: AttentionParams,
    pub layer2: Option<ConvLstmParams>,
    pub head: HeadParams,
}

pub type Gradients = ChamParams;

const LSTM_FIELDS: [&str; 12] = [
    "w_xi", "w_hi", "b_i", "w_xf", "w_hf", "b_f", "w_xo", "w_ho", "b_o", "w_xc", "w_hc", "b_c",
];

impl ChamParams {
    pub fn zeros(config: &ChamConfig) -> Self {
        let k = config.kernel_size;
        ChamParams {
            layer1: ConvLstmParams::zeros(config.feature_channels, config.n_hidden, k),
            attention: AttentionParams::zeros(
                config.feature_channels,
                config.n_hidden,
                config.a_channels,
            ),
            layer2: config
                .layer2_enabled
                .then(|| ConvLstmParams::zeros(config.n_hidden, config.n_hidden, k)),
            head: HeadParams::zeros(config),
        }
    }

    /// Draw order: layer 1, attention, layer 2 (when enabled), head.
    pub fn init(config: &ChamConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel_size;
        let layer1 = ConvLstmParams::init(config.feature_channels, config.n_hidden, k, &mut rng);
        let attention = AttentionParams::init(
            config.feature_channels,
            config.n_hidden,
            config.a_channels,
            &mut rng,
        );
        let layer2 = config
            .layer2_enabled
            .then(|| ConvLstmParams::init(config.n_hidden, config.n_hidden, k, &mut rng));
        let head = HeadParams::init(config, &mut rng);
        ChamParams {
            layer1,
            attention,
            layer2,
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ChamParams {
            layer1: self.layer1.zeros_like(),
            attention: self.attention.zeros_like(),
            layer2: self.layer2.as_ref().map(ConvLstmParams::zeros_like),
            head: self.head.zeros_like(),
        }
    }

    /// All tensors in serialization order.
    pub fn tensors(&self) -> Vec<ParamRef<'_>> {
        fn lstm<'a>(p: &'a ConvLstmParams, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
            let mut names = LSTM_FIELDS.iter();
            for (wx, wh, b) in p.gates() {
                for k in [wx, wh] {
                    out.push(ParamRef {
                        name: format!("{prefix}.{}", names.next().unwrap()),
                        dims: k.dims().to_vec(),
                        data: &k.weights,
                    });
                }
                out.push(ParamRef {
                    name: format!("{prefix}.{}", names.next().unwrap()),
                    dims: vec![b.len()],
                    data: b,
                });
            }
        }
        fn dense<'a>(d: &'a Dense, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
            out.push(ParamRef {
                name: format!("{prefix}.weight"),
                dims: vec![d.outputs, d.inputs],
                data: &d.weight,
            });
            out.push(ParamRef {
                name: format!("{prefix}.bias"),
                dims: vec![d.outputs],
                data: &d.bias,
            });
        }
        let mut out = Vec::new();
        lstm(&self.layer1, "layer1", &mut out);
        let a = &self.attention;
        out.push(ParamRef {
            name: "attention.w_ha".into(),
            dims: a.w_ha.dims().to_vec(),
            data: &a.w_ha.weights,
        });
        out.push(ParamRef {
            name: "attention.w_xa".into(),
            dims: a.w_xa.dims().to_vec(),
            data: &a.w_xa.weights,
        });
        out.push(ParamRef {
            name: "attention.b_a".into(),
            dims: vec![a.b_a.len()],
            data: &a.b_a,
        });
        out.push(ParamRef {
            name: "attention.w_z".into(),
            dims: a.w_z.dims().to_vec(),
            data: &a.w_z.weights,
        });
        if let Some(l2) = &self.layer2 {
            lstm(l2, "layer2", &mut out);
        }
        if let Some(h) = &self.head.hidden {
            dense(h, "head.hidden", &mut out);
        }
        dense(&self.head.output, "head.output", &mut out);
        out
    }

    /// Mutable views in the same order as [`ChamParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<ParamMut<'_>> {
        fn lstm<'a>(p: &'a mut ConvLstmParams, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
            let mut names = LSTM_FIELDS.iter();
            for (wx, wh, b) in p.gates_mut() {
                for k in [wx, wh] {
                    out.push(ParamMut {
                        name: format!("{prefix}.{}", names.next().unwrap()),
                        data: &mut k.weights,
                    });
                }
                out.push(ParamMut {
                    name: format!("{prefix}.{}", names.next().unwrap()),
                    data: b,
                });
            }
        }
        fn dense<'a>(d: &'a mut Dense, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
            out.push(ParamMut {
                name: format!("{prefix}.weight"),
                data: &mut d.weight,
            });
            out.push(ParamMut {
                name: format!("{prefix}.bias"),
                data: &mut d.bias,
            });
        }
        let mut out = Vec::new();
        lstm(&mut self.layer1, "layer1", &mut out);
        let a = &mut self.attention;
        out.push(ParamMut {
            name: "attention.w_ha".into(),
            data: &mut a.w_ha.weights,
        });
        out.push(ParamMut {
            name: "attention.w_xa".into(),
            data: &mut a.w_xa.weights,
        });
        out.push(ParamMut {
            name: "attention.b_a".into(),
            data: &mut a.b_a,
        });
        out.push(ParamMut {
            name: "attention.w_z".into(),
            data: &mut a.w_z.weights,
        });
        if let Some(l2) = &mut self.layer2 {
            lstm(l2, "layer2", &mut out);
        }
        if let Some(h) = &mut self.head.hidden {
            dense(h, "head.hidden", &mut out);
        }
        dense(&mut self.head.output, "head.output", &mut out);
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ChamParams, scale: f64) {
        let src = other.tensors();
        let dst = self.tensors_mut();
        assert_eq!(src.len(), dst.len(), "parameter sets differ in structure");
        for (d, s) in dst.into_iter().zip(src) {
            assert_eq!(d.data.len(), s.data.len(), "{}: length mismatch", d.name);
            for (a, b) in d.data.iter_mut().zip(s.data) {
                *a += scale * b;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from a generator seeded with `seed`.
    Train { seed: u64 },
    Eval,
}

/// Classifier evaluation at one aligned step.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRecord {
    /// 0-based frame whose layer-1 state fed this step.
    pub frame: usize,
    /// Pooled (and concatenated) features before dropout.
    pub input: Vec<f64>,
    /// Inverted-dropout multipliers; `None` when dropout was inactive.
    pub mask: Option<Vec<f64>>,
    pub hidden: Option<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layer1: Vec<StepCache>,
    pub layer2: Vec<StepCache>,
    pub heads: Vec<HeadRecord>,
}

impl ForwardTrace {
    /// Attention maps of every frame, in order.
    pub fn attention_maps(&self) -> impl Iterator<Item = &Tensor3> {
        self.layer1
            .iter()
            .filter_map(|c| c.attention.as_ref().map(|a| &a.map))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChamModel {
    pub config: ChamConfig,
    pub params: ChamParams,
}

impl ChamModel {
    pub fn new(config: ChamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ChamParams::init(&config, seed);
        Ok(ChamModel { config, params })
    }

    pub fn zeros(config: ChamConfig) -> Result<Self> {
        config.validate()?;
        let params = ChamParams::zeros(&config);
        Ok(ChamModel { config, params })
    }

    pub fn forward(&self, frames: &[Tensor3], mode: Mode) -> Result<ForwardTrace> {
        let cfg = &self.config;
        check_frames(cfg, frames)?;
        let layer1 = run_attention_layer(cfg, &self.params.layer1, &self.params.attention, frames)?;

        let mut layer2 = Vec::new();
        if cfg.layer2_enabled {
            let l2 = self.params.layer2.as_ref().ok_or_else(|| {
                Error::Invalid("layer 2 enabled in config but its parameters are missing".into())
            })?;
            let mut state = CellState::zeros(cfg.grid, cfg.grid, cfg.n_hidden);
            for k in 0..cfg.aligned_steps() {
                let tap = &layer1[cfg.tap_frame(k)].h;
                let (next, cache) = cell_step(tap, &state, l2, cfg.g_activation)?;
                state = next;
                layer2.push(cache);
            }
        }

        let mut dropout = DropoutSource::new(mode, cfg.dropout_rate);
        let mut heads = Vec::with_capacity(cfg.aligned_steps());
        for k in 0..cfg.aligned_steps() {
            let frame = cfg.tap_frame(k);
            let mut input = global_avg_pool(&layer1[frame].h);
            if cfg.layer2_enabled {
                input.extend(global_avg_pool(&layer2[k].h));
            }
            heads.push(head_forward(&self.params.head, frame, input, &mut dropout));
        }
        Ok(ForwardTrace {
            layer1,
            layer2,
            heads,
        })
    }

    pub fn forward_sequence(&self, seq: &FeatureSequence, mode: Mode) -> Result<ForwardTrace> {
        self.forward(&seq.frames, mode)
    }

    /// Exact gradient of [`sequence_loss`] with respect to every parameter.
    pub fn backward(&self, trace: &ForwardTrace, label: usize) -> Result<Gradients> {
        let cfg = &self.config;
        check_label(cfg.num_classes, label)?;
        let n_steps = cfg.aligned_steps();
        let expected_l2 = if cfg.layer2_enabled { n_steps } else { 0 };
        if trace.layer1.len() != cfg.seq_len
            || trace.layer2.len() != expected_l2
            || trace.heads.len() != n_steps
        {
            return Err(Error::shape(
                "backward_sequence",
                format!("trace lengths ({}, {expected_l2}, {n_steps})", cfg.seq_len),
                format!(
                    "({}, {}, {})",
                    trace.layer1.len(),
                    trace.layer2.len(),
                    trace.heads.len()
                ),
            ));
        }

        let p = &self.params;
        let mut grads = p.zeros_like();
        let (kh, kw, nh) = (cfg.grid, cfg.grid, cfg.n_hidden);

        // Gradients landing on h1 from the head and from layer 2's inputs.
        let mut extra_h1: Vec<Option<Tensor3>> = vec![None; cfg.seq_len];
        let mut head_h2: Vec<Vec<f64>> = Vec::with_capacity(n_steps);

        for rec in &trace.heads {
            if rec.probs.len() != cfg.num_classes || rec.input.len() != cfg.head_input_width() {
                return Err(Error::shape(
                    "backward_sequence",
                    format!("head of width {} -> {}", cfg.head_input_width(), cfg.num_classes),
                    format!("record {} -> {}", rec.input.len(), rec.probs.len()),
                ));
            }
            let grad_input = head_backward(&p.head, rec, label, &mut grads.head);
            let (g1, g2) = grad_input.split_at(nh);
            accumulate(&mut extra_h1[rec.frame], global_avg_pool_backward(g1, kh, kw));
            head_h2.push(g2.to_vec());
        }

        if cfg.layer2_enabled {
            let l2 = p.layer2.as_ref().expect("validated above");
            let g2 = grads.layer2.as_mut().expect("mirrors params");
            let mut dh_next = Tensor3::zeros(kh, kw, nh);
            let mut dc_next = Tensor3::zeros(kh, kw, nh);
            for k in (0..n_steps).rev() {
                dh_next.add_assign_unchecked(&global_avg_pool_backward(&head_h2[k], kh, kw));
                let (dx, dh, dc) =
                    step_backward_into(&trace.layer2[k], l2, None, &dh_next, &dc_next, g2, None)?;
                accumulate(&mut extra_h1[cfg.tap_frame(k)], dx);
                dh_next = dh;
                dc_next = dc;
            }
        }

        let mut dh_next = Tensor3::zeros(kh, kw, nh);
        let mut dc_next = Tensor3::zeros(kh, kw, nh);
        for t in (0..cfg.seq_len).rev() {
            if let Some(extra) = &extra_h1[t] {
                dh_next.add_assign_unchecked(extra);
            }
            let (_, dh, dc) = step_backward_into(
                &trace.layer1[t],
                &p.layer1,
                Some(&p.attention),
                &dh_next,
                &dc_next,
                &mut grads.layer1,
                Some(&mut grads.attention),
            )?;
            dh_next = dh;
            dc_next = dc;
        }
        Ok(grads)
    }

    /// Loss and gradient for one labelled sequence.
    pub fn loss_and_gradients(&self, seq: &FeatureSequence, mode: Mode) -> Result<(f64, Gradients)> {
        let trace = self.forward(&seq.frames, mode)?;
        let loss = sequence_loss(&trace, seq.label)?;
        let grads = self.backward(&trace, seq.label)?;
        Ok((loss, grads))
    }
}

/// Free-function form of [`ChamModel::forward`].
pub fn forward_sequence(model: &ChamModel, frames: &FeatureSequence, mode: Mode) -> Result<ForwardTrace> {
    model.forward(&frames.frames, mode)
}

/// Free-function form of [`ChamModel::backward`].
pub fn backward_sequence(model: &ChamModel, trace: &ForwardTrace, label: usize) -> Result<Gradients> {
    model.backward(trace, label)
}

/// The attention layer on its own with a per-frame classifier: the
/// single-layer Conv-Attention baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvAttention {
    pub config: ChamConfig,
    pub layer: ConvLstmParams,
    pub attention: AttentionParams,
    pub head: HeadParams,
}

impl ConvAttention {
    /// Same parameter draws as [`ChamModel::new`] with layer 2 disabled.
    pub fn new(config: ChamConfig, seed: u64) -> Result<Self> {
        if config.layer2_enabled {
            return Err(Error::Config(
                "Conv-Attention is single-layer: set layer2_enabled = false".into(),
            ));
        }
        config.validate()?;
        let ChamParams {
            layer1,
            attention,
            head,
            ..
        } = ChamParams::init(&config, seed);
        Ok(ConvAttention {
            config,
            layer: layer1,
            attention,
            head,
        })
    }

    pub fn forward(&self, frames: &[Tensor3], mode: Mode) -> Result<ForwardTrace> {
        check_frames(&self.config, frames)?;
        let layer1 = run_attention_layer(&self.config, &self.layer, &self.attention, frames)?;
        let mut dropout = DropoutSource::new(mode, self.config.dropout_rate);
        let heads = layer1
            .iter()
            .enumerate()
            .map(|(t, cache)| head_forward(&self.head, t, global_avg_pool(&cache.h), &mut dropout))
            .collect();
        Ok(ForwardTrace {
            layer1,
            layer2: Vec::new(),
            heads,
        })
    }
}

fn check_frames(cfg: &ChamConfig, frames: &[Tensor3]) -> Result<()> {
    if frames.len() != cfg.seq_len {
        return Err(Error::shape(
            "forward_sequence",
            format!("{} frames", cfg.seq_len),
            format!("{} frames", frames.len()),
        ));
    }
    for f in frames {
        f.expect_shape("forward_sequence", cfg.frame_shape())?;
    }
    Ok(())
}

fn check_label(num_classes: usize, label: usize) -> Result<()> {
    if label >= num_classes {
        Err(Error::Label { label, num_classes })
    } else {
        Ok(())
    }
}

fn run_attention_layer(
    cfg: &ChamConfig,
    p: &ConvLstmParams,
    ap: &AttentionParams,
    frames: &[Tensor3],
) -> Result<Vec<StepCache>> {
    let mut state = CellState::zeros(cfg.grid, cfg.grid, cfg.n_hidden);
    let mut caches = Vec::with_capacity(frames.len());
    for f_t in frames {
        let (next, cache) =
            attentive_step(f_t, &state, p, ap, cfg.attention_input, cfg.g_activation)?;
        state = next;
        caches.push(cache);
    }
    Ok(caches)
}

struct DropoutSource {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl DropoutSource {
    fn new(mode: Mode, rate: f64) -> Self {
        let rng = match mode {
            Mode::Train { seed } if rate > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        DropoutSource { rate, rng }
    }

    fn mask(&mut self, len: usize) -> Option<Vec<f64>> {
        let keep = 1.0 - self.rate;
        let rng = self.rng.as_mut()?;
        Some(
            (0..len)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        )
    }
}

fn head_forward(
    head: &HeadParams,
    frame: usize,
    input: Vec<f64>,
    dropout: &mut DropoutSource,
) -> HeadRecord {
    let mask = dropout.mask(input.len());
    let dropped: Vec<f64> = match &mask {
        Some(m) => input.iter().zip(m).map(|(x, m)| x * m).collect(),
        None => input.clone(),
    };
    let hidden = head
        .hidden
        .as_ref()
        .map(|d| d.forward(&dropped).into_iter().map(f64::tanh).collect::<Vec<_>>());
    let logits = head.output.forward(hidden.as_deref().unwrap_or(&dropped));
    let probs = softmax(&logits);
    HeadRecord {
        frame,
        input,
        mask,
        hidden,
        logits,
        probs,
    }
}

/// Gradient of `-ln(clip(p[label]))` back to the head input (before dropout).
fn head_backward(head: &HeadParams, rec: &HeadRecord, label: usize, grads: &mut HeadParams) -> Vec<f64> {
    // Clipping flattens the loss below the floor.
    let grad_logits: Vec<f64> = if rec.probs[label] < PROB_FLOOR {
        vec![0.0; rec.probs.len()]
    } else {
        rec.probs
            .iter()
            .enumerate()
            .map(|(c, &p)| if c == label { p - 1.0 } else { p })
            .collect()
    };
    let dropped: Vec<f64> = match &rec.mask {
        Some(m) => rec.input.iter().zip(m).map(|(x, m)| x * m).collect(),
        None => rec.input.clone(),
    };
    let mut grad = match (&head.hidden, &rec.hidden) {
        (Some(hd), Some(hv)) => {
            let g_hidden = head.output.backward_into(hv, &grad_logits, &mut grads.output);
            let g_pre: Vec<f64> = g_hidden.iter().zip(hv).map(|(g, y)| g * (1.0 - y * y)).collect();
            hd.backward_into(&dropped, &g_pre, grads.hidden.as_mut().expect("mirrors params"))
        }
        _ => head.output.backward_into(&dropped, &grad_logits, &mut grads.output),
    };
    if let Some(m) = &rec.mask {
        for (g, m) in grad.iter_mut().zip(m) {
            *g *= m;
        }
    }
    grad
}

fn accumulate(slot: &mut Option<Tensor3>, t: Tensor3) {
    match slot {
        Some(acc) => acc.add_assign_unchecked(&t),
        None => *slot = Some(t),
    }
}

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy summed over the aligned steps of a trace.
pub fn sequence_loss(trace: &ForwardTrace, label: usize) -> Result<f64> {
    let mut loss = 0.0;
    for rec in &trace.heads {
        check_label(rec.probs.len(), label)?;
        loss -= rec.probs[label].clamp(PROB_FLOOR, 1.0).ln();
    }
    Ok(loss)
}

/// Temporal mean of the per-step probabilities and its argmax (lowest index
/// wins ties).
pub fn predict(trace: &ForwardTrace) -> (usize, Vec<f64>) {
    assert!(!trace.heads.is_empty(), "predict on an empty trace");
    let c = trace.heads[0].probs.len();
    let mut mean = vec![0.0; c];
    for rec in &trace.heads {
        for (m, p) in mean.iter_mut().zip(&rec.probs) {
            *m += p;
        }
    }
    let n = trace.heads.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    (argmax(&mean), mean)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Attention map used at frame `t` (1-based).
pub fn export_attention(trace: &ForwardTrace, t: usize) -> Result<Tensor3> {
    let n = trace.layer1.len();
    if t == 0 || t > n {
        return Err(Error::Invalid(format!(
            "attention step {t} out of range 1..={n}"
        )));
    }
    trace.layer1[t - 1]
        .attention
        .as_ref()
        .map(|a| a.map.clone())
        .ok_or_else(|| Error::Invalid(format!("step {t} has no attention map")))
}
