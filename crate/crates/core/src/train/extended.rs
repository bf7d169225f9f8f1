//! Double-double reference forward pass, used as the finite-difference oracle.
//!
//! In f64 the sequence loss carries about one ulp of roundoff, so a central
//! difference with eps = 1e-5 has ~1e-11 of noise. Entries whose true gradient
//! is below ~1e-7 then cannot be resolved to 1e-4 relative error. Evaluating
//! the loss here (~32 significant digits) removes that noise floor.

use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::cell::AttentionInput;
use crate::error::{Error, Result};
use crate::model::{ChamModel, PROB_FLOOR};
use crate::tensor::{Activation, Tensor3};

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub(crate) struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: 6.931471805599452862e-1,
    lo: 2.319046813846299558e-17,
};

/// `1/n!` for n = 0..=9; enough for |r| <= 2.8e-3.
const INV_FACTORIALS: [Dd; 10] = [
    Dd { hi: 1.0, lo: 0.0 },
    Dd { hi: 1.0, lo: 0.0 },
    Dd { hi: 0.5, lo: 0.0 },
    Dd { hi: 0.16666666666666666, lo: 9.25185853854297e-18 },
    Dd { hi: 0.041666666666666664, lo: 2.3129646346357427e-18 },
    Dd { hi: 0.008333333333333333, lo: 1.1564823173178714e-19 },
    Dd { hi: 0.001388888888888889, lo: -5.300543954373577e-20 },
    Dd { hi: 0.0001984126984126984, lo: 1.7209558293420705e-22 },
    Dd { hi: 2.48015873015873e-05, lo: 2.1511947866775882e-23 },
    Dd { hi: 2.7557319223985893e-06, lo: -1.858393274046472e-22 },
];

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd {
        hi: s,
        lo: b - (s - a),
    }
}

impl From<f64> for Dd {
    fn from(hi: f64) -> Self {
        Dd { hi, lo: 0.0 }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

/// Exact product `a * b = p + e`.
#[cfg(target_feature = "fma")]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

// Dekker's split; `mul_add` without hardware FMA is a slow libm call.
#[cfg(not(target_feature = "fma"))]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    fn split(a: f64) -> (f64, f64) {
        let t = 134217729.0 * a;
        let hi = t - (t - a);
        (hi, a - hi)
    }
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        quick_two_sum(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * Dd::from(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Dd::from(q2);
        let q3 = r.hi / b.hi;
        quick_two_sum(q1, q2) + Dd::from(q3)
    }
}

impl Dd {
    const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    fn scale(self, s: f64) -> Dd {
        Dd {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    pub fn exp(self) -> Dd {
        if self.hi < -745.0 {
            return Dd::default();
        }
        if self.hi > 709.0 {
            return Dd::from(f64::INFINITY);
        }
        let k = (self.hi / LN2.hi).round();
        // r in [-ln2/2, ln2/2], shrunk by 2^-7 before the series.
        let r = (self - LN2 * Dd::from(k)).scale(1.0 / 128.0);
        let mut sum = Dd::default();
        for c in INV_FACTORIALS.iter().rev() {
            sum = sum * r + *c;
        }
        for _ in 0..7 {
            sum = sum * sum;
        }
        sum.scale(2f64.powi(k as i32))
    }

    pub fn ln(self) -> Dd {
        let mut y = Dd::from(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::ONE;
        }
        y
    }

    pub fn tanh(self) -> Dd {
        let t = self.abs().scale(-2.0).exp();
        let v = (Dd::ONE - t) / (Dd::ONE + t);
        if self.hi < 0.0 {
            -v
        } else {
            v
        }
    }

    pub fn sigmoid(self) -> Dd {
        if self.hi >= 0.0 {
            Dd::ONE / (Dd::ONE + (-self).exp())
        } else {
            let e = self.exp();
            e / (Dd::ONE + e)
        }
    }

    fn abs(self) -> Dd {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

fn act(kind: Activation, z: Dd) -> Dd {
    match kind {
        Activation::Sigmoid => z.sigmoid(),
        Activation::Tanh => z.tanh(),
    }
}

#[derive(Clone)]
struct Grid {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<Dd>,
}

impl Grid {
    fn zeros(h: usize, w: usize, c: usize) -> Self {
        Grid {
            h,
            w,
            c,
            data: vec![Dd::default(); h * w * c],
        }
    }

    fn from_tensor(t: &Tensor3) -> Self {
        Grid {
            h: t.height(),
            w: t.width(),
            c: t.channels(),
            data: t.data().iter().map(|&v| Dd::from(v)).collect(),
        }
    }
}

/// `acc += input * kernel`, kernel laid out `(k, k, in, out)`, zero padding.
fn conv_into(input: &Grid, kernel: &[Dd], k: usize, acc: &mut Grid) {
    let (h, w) = (input.h as isize, input.w as isize);
    let pad = (k / 2) as isize;
    let (cin, cout) = (input.c, acc.c);
    debug_assert_eq!(kernel.len(), k * k * cin * cout);
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) as usize * cout;
            for ky in 0..k {
                let iy = y + ky as isize - pad;
                for kx in 0..k {
                    let ix = x + kx as isize - pad;
                    if iy < 0 || iy >= h || ix < 0 || ix >= w {
                        continue;
                    }
                    let src = (iy * w + ix) as usize * cin;
                    for ci in 0..cin {
                        let a = input.data[src + ci];
                        let tap = ((ky * k + kx) * cin + ci) * cout;
                        for co in 0..cout {
                            acc.data[o + co] = acc.data[o + co] + a * kernel[tap + co];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(g: &mut Grid, bias: &[Dd]) {
    for px in g.data.chunks_exact_mut(bias.len()) {
        for (v, b) in px.iter_mut().zip(bias) {
            *v = *v + *b;
        }
    }
}

fn pool(g: &Grid) -> Vec<Dd> {
    let mut out = vec![Dd::default(); g.c];
    for px in g.data.chunks_exact(g.c) {
        for (o, v) in out.iter_mut().zip(px) {
            *o = *o + *v;
        }
    }
    let n = Dd::from((g.h * g.w) as f64);
    out.into_iter().map(|v| v / n).collect()
}

fn dense(weight: &[Dd], bias: &[Dd], x: &[Dd]) -> Vec<Dd> {
    weight
        .chunks_exact(x.len())
        .zip(bias)
        .map(|(row, b)| row.iter().zip(x).fold(*b, |s, (w, v)| s + *w * *v))
        .collect()
}

/// Model parameters promoted to double-double, looked up by tensor name.
#[derive(Clone)]
pub(crate) struct ExtendedParams {
    slots: Vec<Vec<Dd>>,
    index: HashMap<String, usize>,
}

impl ExtendedParams {
    pub fn from_model(model: &ChamModel) -> Self {
        let mut slots = Vec::new();
        let mut index = HashMap::new();
        for (i, t) in model.params.tensors().into_iter().enumerate() {
            slots.push(t.data.iter().map(|&v| Dd::from(v)).collect());
            index.insert(t.name, i);
        }
        ExtendedParams { slots, index }
    }

    /// Adds `delta` to one entry; exact, since both summands are f64.
    pub fn perturb(&mut self, slot: usize, idx: usize, delta: f64) {
        let v = &mut self.slots[slot][idx];
        *v = *v + Dd::from(delta);
    }

    fn get(&self, name: &str) -> &[Dd] {
        &self.slots[self.index[name]]
    }
}

fn lstm_step(
    p: &ExtendedParams,
    prefix: &str,
    k: usize,
    g_act: Activation,
    x: &Grid,
    h: &Grid,
    c: &Grid,
) -> (Grid, Grid) {
    let gate = |name: char, kind: Activation| {
        let mut z = Grid::zeros(h.h, h.w, h.c);
        conv_into(x, p.get(&format!("{prefix}.w_x{name}")), k, &mut z);
        conv_into(h, p.get(&format!("{prefix}.w_h{name}")), k, &mut z);
        add_bias(&mut z, p.get(&format!("{prefix}.b_{name}")));
        z.data.iter_mut().for_each(|v| *v = act(kind, *v));
        z
    };
    let i = gate('i', Activation::Sigmoid);
    let f = gate('f', Activation::Sigmoid);
    let o = gate('o', Activation::Sigmoid);
    let g = gate('c', g_act);
    let mut c_next = c.clone();
    let mut h_next = h.clone();
    for n in 0..c.data.len() {
        c_next.data[n] = f.data[n] * c.data[n] + i.data[n] * g.data[n];
        h_next.data[n] = o.data[n] * c_next.data[n].tanh();
    }
    (h_next, c_next)
}

fn attend(p: &ExtendedParams, mode: AttentionInput, f_t: &Grid, h: &Grid) -> Grid {
    let a = p.get("attention.b_a");
    let mut pre = Grid::zeros(h.h, h.w, a.len());
    conv_into(h, p.get("attention.w_ha"), 1, &mut pre);
    if mode == AttentionInput::Features {
        conv_into(f_t, p.get("attention.w_xa"), 1, &mut pre);
    }
    add_bias(&mut pre, a);
    pre.data.iter_mut().for_each(|v| *v = v.tanh());
    let mut logits = Grid::zeros(h.h, h.w, 1);
    conv_into(&pre, p.get("attention.w_z"), 1, &mut logits);
    let max = logits.data.iter().map(|v| v.hi).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<Dd> = logits.data.iter().map(|&z| (z - Dd::from(max)).exp()).collect();
    let total = exps.iter().fold(Dd::default(), |s, &e| s + e);
    let mut x = f_t.clone();
    for (px, e) in x.data.chunks_exact_mut(f_t.c).zip(&exps) {
        let l = *e / total;
        px.iter_mut().for_each(|v| *v = *v * l);
    }
    x
}

/// Hidden states of the attentive layer, one per frame.
pub(crate) struct Layer1Trace(Vec<Grid>);

pub(crate) fn layer1_extended(
    model: &ChamModel,
    params: &ExtendedParams,
    frames: &[Tensor3],
) -> Result<Layer1Trace> {
    let cfg = &model.config;
    if frames.len() != cfg.seq_len {
        return Err(Error::shape(
            "sequence_loss_extended",
            format!("{} frames", cfg.seq_len),
            format!("{} frames", frames.len()),
        ));
    }
    let zero = Grid::zeros(cfg.grid, cfg.grid, cfg.n_hidden);
    let (mut h, mut c) = (zero.clone(), zero);
    let mut states = Vec::with_capacity(frames.len());
    for f in frames {
        let f = Grid::from_tensor(f);
        let x = attend(params, cfg.attention_input, &f, &h);
        (h, c) = lstm_step(params, "layer1", cfg.kernel_size, cfg.g_activation, &x, &h, &c);
        states.push(h.clone());
    }
    Ok(Layer1Trace(states))
}

/// Second layer, head and loss on top of a precomputed first layer.
pub(crate) fn loss_from_layer1(
    model: &ChamModel,
    params: &ExtendedParams,
    layer1: &Layer1Trace,
    label: usize,
) -> Result<Dd> {
    let cfg = &model.config;
    if label >= cfg.num_classes {
        return Err(Error::Label {
            label,
            num_classes: cfg.num_classes,
        });
    }
    let zero = Grid::zeros(cfg.grid, cfg.grid, cfg.n_hidden);
    let (mut h2, mut c2) = (zero.clone(), zero);
    let mut loss = Dd::default();
    for step in 0..cfg.aligned_steps() {
        let tap = &layer1.0[cfg.tap_frame(step)];
        let mut input = pool(tap);
        if cfg.layer2_enabled {
            (h2, c2) = lstm_step(params, "layer2", cfg.kernel_size, cfg.g_activation, tap, &h2, &c2);
            input.extend(pool(&h2));
        }
        if cfg.head_hidden > 0 {
            input = dense(params.get("head.hidden.weight"), params.get("head.hidden.bias"), &input)
                .into_iter()
                .map(Dd::tanh)
                .collect();
        }
        let logits = dense(params.get("head.output.weight"), params.get("head.output.bias"), &input);
        let max = logits.iter().map(|v| v.hi).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<Dd> = logits.iter().map(|&z| (z - Dd::from(max)).exp()).collect();
        let total = exps.iter().fold(Dd::default(), |s, &e| s + e);
        let mut p = exps[label] / total;
        if p.hi < PROB_FLOOR {
            p = Dd::from(PROB_FLOOR);
        } else if p.hi > 1.0 {
            p = Dd::ONE;
        }
        loss = loss - p.ln();
    }
    Ok(loss)
}

/// Evaluation-mode sequence loss computed entirely in double-double arithmetic.
pub(crate) fn sequence_loss_extended(
    model: &ChamModel,
    params: &ExtendedParams,
    frames: &[Tensor3],
    label: usize,
) -> Result<Dd> {
    let layer1 = layer1_extended(model, params, frames)?;
    loss_from_layer1(model, params, &layer1, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sequence_loss, ChamConfig, Mode};
    use crate::train::gradcheck_instance;

    fn close(a: Dd, hi: f64, lo: f64, tol: f64) {
        let d = (a - Dd { hi, lo }).to_f64().abs();
        assert!(d < tol, "{a:?} vs ({hi}, {lo}): {d:e}");
    }

    #[test]
    fn arithmetic_keeps_low_order_bits() {
        let third = Dd::ONE / Dd::from(3.0);
        let back = third * Dd::from(3.0) - Dd::ONE;
        assert!(back.to_f64().abs() < 1e-31);
        let tiny = Dd::ONE + Dd::from(1e-20) - Dd::ONE;
        assert!((tiny.to_f64() - 1e-20).abs() < 1e-35);
    }

    #[test]
    fn transcendental_values() {
        // e and ln 2 to double-double precision.
        close(Dd::ONE.exp(), 2.718281828459045091, 1.445646891729250158e-16, 1e-29);
        close(Dd::from(2.0).ln(), LN2.hi, LN2.lo, 1e-31);
        for x in [-20.0, -3.7, -0.4, 1e-3, 0.9, 12.5] {
            let d = Dd::from(x);
            assert!((d.exp().ln() - d).to_f64().abs() < 1e-29, "{x}");
            assert!((d.tanh().to_f64() - x.tanh()).abs() < 1e-15);
            assert!((d.sigmoid().to_f64() - crate::tensor::sigmoid(x)).abs() < 1e-15);
            // tanh(x) = 2 sigmoid(2x) - 1
            let lhs = d.tanh();
            let rhs = (d + d).sigmoid().scale(2.0) - Dd::ONE;
            assert!((lhs - rhs).to_f64().abs() < 1e-30, "{x}");
        }
        assert_eq!(Dd::from(-800.0).exp(), Dd::default());
    }

    #[test]
    fn matches_f64_forward() {
        for (g_act, layer2, hidden) in [
            (Activation::Sigmoid, true, 0),
            (Activation::Tanh, true, 3),
            (Activation::Sigmoid, false, 0),
        ] {
            let cfg = ChamConfig {
                g_activation: g_act,
                layer2_enabled: layer2,
                head_hidden: hidden,
                ..ChamConfig::gradcheck()
            };
            let (model, seq) = gradcheck_instance(&cfg, 3).unwrap();
            let f64_loss =
                sequence_loss(&model.forward(&seq.frames, Mode::Eval).unwrap(), seq.label).unwrap();
            let ext = ExtendedParams::from_model(&model);
            let dd_loss = sequence_loss_extended(&model, &ext, &seq.frames, seq.label).unwrap();
            assert!(
                (dd_loss.to_f64() - f64_loss).abs() < 1e-13 * f64_loss.abs().max(1.0),
                "{g_act:?}: {dd_loss:?} vs {f64_loss}"
            );
        }
    }
}
