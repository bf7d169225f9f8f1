//! Synthetic moving-blob sequences.
//!
//! Every sequence carries one Gaussian blob on a random row. Its column moves
//! with time according to the class:
//!
//! * class 0 sweeps left to right,
//! * class 1 sweeps right to left,
//! * class 2 sweeps left to right over the first half, then back.
//!
//! The blob's channel profile depends on its heading (the lower half of the
//! channels dominates while moving right, the upper half while moving left),
//! the way appearance features of a moving subject differ with its facing
//! direction. i.i.d. Gaussian noise with standard deviation [`NOISE_STD`]
//! is added to every entry.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{write_features, write_manifest, FeatureSequence, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub const SYNTH_CLASSES: usize = 3;
pub const NOISE_STD: f64 = 0.1;
const BLOB_SIGMA: f64 = 0.75;
const OFF_HEADING_GAIN: f64 = 0.3;

/// `(T, height, width, D)`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl SequenceShape {
    pub fn square(frames: usize, grid: usize, channels: usize) -> Self {
        SequenceShape {
            frames,
            height: grid,
            width: grid,
            channels,
        }
    }
}

impl std::fmt::Display for SequenceShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.frames, self.height, self.width, self.channels
        )
    }
}

/// Column position and heading (+1 right, -1 left) at frame `t`.
fn trajectory(class_id: usize, t: usize, frames: usize, width: usize) -> (f64, f64) {
    let span = (width - 1) as f64;
    let progress = |t: usize, n: usize| if n <= 1 { 0.0 } else { t as f64 / (n - 1) as f64 };
    match class_id {
        0 => (progress(t, frames) * span, 1.0),
        1 => ((1.0 - progress(t, frames)) * span, -1.0),
        _ => {
            let first = frames.div_ceil(2);
            if t < first {
                (progress(t, first) * span, 1.0)
            } else {
                let rest = frames - first;
                ((1.0 - progress(t - first, rest)) * span, -1.0)
            }
        }
    }
}

fn mix_seed(class_id: usize, seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (class_id as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Deterministic in `(class_id, seed, shape)`.
pub fn generate_sequence(class_id: usize, seed: u64, shape: SequenceShape) -> Result<FeatureSequence> {
    if class_id >= SYNTH_CLASSES {
        return Err(Error::Label {
            label: class_id,
            num_classes: SYNTH_CLASSES,
        });
    }
    if shape.frames == 0 || shape.height == 0 || shape.width == 0 || shape.channels == 0 {
        return Err(Error::Invalid(format!("sequence shape {shape} has an empty dimension")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(class_id, seed));
    let row = rng.random_range(0..shape.height) as f64;
    let amplitude = rng.random_range(0.8..1.2);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid noise scale");
    let lead = shape.channels.div_ceil(2);

    let frames = (0..shape.frames)
        .map(|t| {
            let (col, heading) = trajectory(class_id, t, shape.frames, shape.width);
            Tensor3::from_fn(shape.height, shape.width, shape.channels, |i, j, d| {
                let di = i as f64 - row;
                let dj = j as f64 - col;
                let bump = (-(di * di + dj * dj) / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
                let leading = (d < lead) == (heading > 0.0);
                let gain = if leading { 1.0 } else { OFF_HEADING_GAIN };
                amplitude * bump * gain + noise.sample(&mut rng)
            })
        })
        .collect();
    FeatureSequence::new(frames, class_id, format!("synth-c{class_id}-s{seed}"))
}

/// Writes `train_per_class + test_per_class` sequences per class into `dir`
/// along with `manifest.csv`. Returns the manifest records.
pub fn generate_dataset(
    dir: &Path,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
    shape: SequenceShape,
) -> Result<Vec<ManifestRecord>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::new();
    let mut index: u64 = 0;
    for (split, count) in [(Split::Train, train_per_class), (Split::Test, test_per_class)] {
        for class_id in 0..SYNTH_CLASSES {
            for n in 0..count {
                let sample_seed = seed.wrapping_mul(1_000_003).wrapping_add(index);
                index += 1;
                let seq = generate_sequence(class_id, sample_seed, shape)?;
                let name = format!("{}_c{class_id}_{n:04}.chamfeat", split.as_str());
                write_features(&dir.join(&name), &seq)?;
                records.push(ManifestRecord {
                    path: name.into(),
                    label: class_id,
                    split,
                });
            }
        }
    }
    write_manifest(&dir.join("manifest.csv"), &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::global_avg_pool;

    const SHAPE: SequenceShape = SequenceShape {
        frames: 12,
        height: 7,
        width: 7,
        channels: 16,
    };

    fn column_argmax(f: &Tensor3) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for j in 0..f.width() {
            let mass: f64 = (0..f.height())
                .flat_map(|i| f.pixel(i, j).iter().copied().collect::<Vec<_>>())
                .sum();
            if mass > best.1 {
                best = (j, mass);
            }
        }
        best.0
    }

    #[test]
    fn deterministic() {
        for c in 0..3 {
            assert_eq!(
                generate_sequence(c, 42, SHAPE).unwrap(),
                generate_sequence(c, 42, SHAPE).unwrap()
            );
        }
        assert_ne!(
            generate_sequence(0, 1, SHAPE).unwrap(),
            generate_sequence(0, 2, SHAPE).unwrap()
        );
    }

    #[test]
    fn invalid_class() {
        assert!(generate_sequence(3, 0, SHAPE).is_err());
    }

    #[test]
    fn sweep_directions() {
        for seed in 0..20 {
            let s = generate_sequence(0, seed, SHAPE).unwrap();
            assert!(column_argmax(&s.frames[0]) < column_argmax(&s.frames[11]));
            let s = generate_sequence(1, seed, SHAPE).unwrap();
            assert!(column_argmax(&s.frames[0]) > column_argmax(&s.frames[11]));
            let s = generate_sequence(2, seed, SHAPE).unwrap();
            let (a, m, b) = (
                column_argmax(&s.frames[0]),
                column_argmax(&s.frames[5]),
                column_argmax(&s.frames[11]),
            );
            assert!(a < m && m > b, "seed {seed}: {a} {m} {b}");
        }
    }

    #[test]
    fn noise_level() {
        // Far from the blob the entries are pure noise.
        let s = generate_sequence(0, 9, SequenceShape::square(1, 40, 8)).unwrap();
        let f = &s.frames[0];
        let far: Vec<f64> = (0..40)
            .flat_map(|i| (20..40).map(move |j| (i, j)))
            .flat_map(|(i, j)| f.pixel(i, j).to_vec())
            .collect();
        let mean = far.iter().sum::<f64>() / far.len() as f64;
        let var = far.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / far.len() as f64;
        assert!((var.sqrt() - NOISE_STD).abs() < 0.01, "{}", var.sqrt());
    }

    // One-nearest-neighbour on time-averaged pooled features, leave-one-out.
    #[test]
    fn left_and_right_sweeps_are_separable() {
        let features = |class: usize, seed: u64| -> Vec<f64> {
            let s = generate_sequence(class, seed, SHAPE).unwrap();
            let mut acc = vec![0.0; SHAPE.channels];
            for f in &s.frames {
                for (a, p) in acc.iter_mut().zip(global_avg_pool(f)) {
                    *a += p / SHAPE.frames as f64;
                }
            }
            acc
        };
        let mut samples = Vec::new();
        for n in 0..50u64 {
            samples.push((0usize, features(0, 1000 + n)));
            samples.push((1usize, features(1, 2000 + n)));
        }
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let correct = (0..samples.len())
            .filter(|&q| {
                let nearest = (0..samples.len())
                    .filter(|&r| r != q)
                    .min_by(|&a, &b| {
                        dist(&samples[q].1, &samples[a].1).total_cmp(&dist(&samples[q].1, &samples[b].1))
                    })
                    .unwrap();
                samples[nearest].0 == samples[q].0
            })
            .count();
        let accuracy = correct as f64 / samples.len() as f64;
        assert!(accuracy >= 0.9, "1-NN accuracy {accuracy}");
    }
}
