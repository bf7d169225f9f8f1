//! Central finite-difference verification of the analytic BPTT gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::FeatureSequence;
use crate::error::Result;
use crate::model::{ChamConfig, ChamModel, Gradients, Mode};
use crate::train::extended::{
    layer1_extended, loss_from_layer1, sequence_loss_extended, ExtendedParams,
};
use crate::tensor::Tensor3;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const PASS_THRESHOLD: f64 = 1e-4;
const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    /// Entries compared (all of them unless sampling was requested).
    pub checked: usize,
    pub max_rel_error: f64,
    /// Index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl TensorCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < PASS_THRESHOLD
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(TensorCheck::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_rel_error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let width = self.tensors.iter().map(|t| t.name.len()).max().unwrap_or(0);
        for t in &self.tensors {
            out.push_str(&format!(
                "{:<width$}  entries {:>6}  max rel err {:.3e}  {}\n",
                t.name,
                t.checked,
                t.max_rel_error,
                if t.passed() { "ok" } else { "FAIL" },
            ));
        }
        out.push_str(&format!(
            "max relative error {:.3e} (threshold {PASS_THRESHOLD:.0e}, eps {:.0e}): {}\n",
            self.max_rel_error(),
            self.epsilon,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Compares `analytic` against central differences of the sequence loss.
/// The loss is evaluated in double-double arithmetic, so the numeric side is
/// free of f64 roundoff. With `max_entries`, an evenly spaced subset of each
/// tensor is checked.
pub fn check_gradients(
    model: &ChamModel,
    seq: &FeatureSequence,
    analytic: &Gradients,
    epsilon: f64,
    max_entries: Option<usize>,
) -> Result<GradCheckReport> {
    let base = ExtendedParams::from_model(model);
    let base_layer1 = layer1_extended(model, &base, &seq.frames)?;
    let grads = analytic.tensors();
    let mut tensors = Vec::with_capacity(grads.len());

    for (slot, g) in grads.iter().enumerate() {
        let len = g.data.len();
        let indices: Vec<usize> = match max_entries {
            Some(m) if m < len => (0..m).map(|k| k * len / m).collect(),
            _ => (0..len).collect(),
        };
        // Entries past the attentive layer leave its states untouched.
        let upstream = g.name.starts_with("layer1.") || g.name.starts_with("attention.");
        let numeric: Vec<f64> = indices
            .par_iter()
            .map(|&idx| {
                let loss_at = |delta: f64| {
                    let mut p = base.clone();
                    p.perturb(slot, idx, delta);
                    if upstream {
                        sequence_loss_extended(model, &p, &seq.frames, seq.label)
                    } else {
                        loss_from_layer1(model, &p, &base_layer1, seq.label)
                    }
                };
                let diff = loss_at(epsilon)? - loss_at(-epsilon)?;
                Ok(diff.to_f64() / (2.0 * epsilon))
            })
            .collect::<Result<_>>()?;

        let mut check = TensorCheck {
            name: g.name.clone(),
            checked: indices.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (n, &idx) in numeric.into_iter().zip(&indices) {
            let a = g.data[idx];
            let e = relative_error(a, n);
            if e > check.max_rel_error || (check.max_rel_error == 0.0 && idx == 0) {
                check.max_rel_error = e;
                check.worst_index = idx;
                check.analytic = a;
                check.numeric = n;
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { epsilon, tensors })
}

/// Random model and sequence for `config` (dropout forced to 0).
pub fn gradcheck_instance(config: &ChamConfig, seed: u64) -> Result<(ChamModel, FeatureSequence)> {
    let config = ChamConfig {
        dropout_rate: 0.0,
        ..config.clone()
    };
    let mut model = ChamModel::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_F00D);
    // Non-trivial biases so every bias path carries gradient.
    for t in model.params.tensors_mut() {
        if t.name.contains(".b_") || t.name.ends_with(".bias") {
            for v in t.data.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
    let frames = (0..config.seq_len)
        .map(|_| {
            Tensor3::random_uniform(config.grid, config.grid, config.feature_channels, 1.0, &mut rng)
        })
        .collect();
    let label = rng.random_range(0..config.num_classes);
    let seq = FeatureSequence::new(frames, label, "gradcheck")?;
    Ok((model, seq))
}

/// Full check: random instance, analytic BPTT, finite differences.
pub fn grad_check(
    config: &ChamConfig,
    seed: u64,
    epsilon: f64,
    max_entries: Option<usize>,
) -> Result<GradCheckReport> {
    let (model, seq) = gradcheck_instance(config, seed)?;
    let trace = model.forward(&seq.frames, Mode::Train { seed })?;
    let analytic = model.backward(&trace, seq.label)?;
    check_gradients(&model, &seq, &analytic, epsilon, max_entries)
}
