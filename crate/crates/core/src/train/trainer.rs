//! Mini-batch training with Adam.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::model::{predict, ChamModel, Gradients, Mode};

use super::{adam_step, AdamState, Checkpoint, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Completed iterations.
    pub iter: u64,
    /// Mean per-sequence loss of the latest batch.
    pub loss: f64,
    /// Eval-mode accuracy over the whole training set.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    /// Mean batch loss of every iteration.
    pub losses: Vec<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Dropout seed for batch position `slot` of iteration `iter`.
pub fn sample_seed(seed: u64, iter: u64, slot: usize) -> u64 {
    splitmix64(seed ^ splitmix64(iter.wrapping_mul(0x1_0000).wrapping_add(slot as u64)))
}

/// Eval-mode predicted class of every sequence.
pub fn evaluate(model: &ChamModel, data: &[FeatureSequence]) -> Result<Vec<usize>> {
    data.par_iter()
        .map(|seq| Ok(predict(&model.forward(&seq.frames, Mode::Eval)?).0))
        .collect()
}

pub fn accuracy(model: &ChamModel, data: &[FeatureSequence]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("accuracy of an empty dataset".into()));
    }
    let pred = evaluate(model, data)?;
    let hits = pred.iter().zip(data).filter(|(p, s)| **p == s.label).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Endless stream of indices: each pass over the data is a fresh seeded shuffle.
struct Batches {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        Batches {
            order: (0..n).collect(),
            cursor: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Trains from `model`'s parameters. `on_row` sees each metrics row as it is
/// produced. Aborts with [`Error::Diverged`] on a non-finite loss or gradient.
pub fn train_loop(
    model: &ChamModel,
    train: &[FeatureSequence],
    val: &[FeatureSequence],
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut model = model.clone();
    let mut adam = AdamState::new(&model.params);
    let mut batches = Batches::new(train.len(), cfg.seed);
    let mut metrics = Vec::new();
    let mut losses = Vec::with_capacity(cfg.max_iters as usize);
    let scale = 1.0 / cfg.batch_size as f64;

    for iter in 0..cfg.max_iters {
        let batch = batches.next(cfg.batch_size);
        let results: Vec<(f64, Gradients)> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mode = Mode::Train {
                    seed: sample_seed(cfg.seed, iter, slot),
                };
                model.loss_and_gradients(&train[i], mode)
            })
            .collect::<Result<_>>()?;

        // Fixed summation order keeps runs reproducible.
        let mut grads = model.params.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l * scale;
            grads.add_scaled(g, scale);
        }
        let diverged = |what: String, model: &ChamModel, adam: &AdamState| -> Result<Error> {
            Ok(Error::Diverged {
                iteration: iter,
                what,
                last_good: Box::new(Checkpoint::new(&model.config, &model.params, iter, Some(adam))?),
            })
        };
        if !loss.is_finite() {
            return Err(diverged("loss".into(), &model, &adam)?);
        }
        if let Err(e) = adam_step(&mut model.params, &grads, &mut adam, cfg) {
            return Err(match e {
                Error::NonFinite { name } => diverged(name, &model, &adam)?,
                other => other,
            });
        }
        losses.push(loss);

        let done = iter + 1;
        if done % cfg.eval_every == 0 || done == cfg.max_iters {
            let row = MetricsRow {
                iter: done,
                loss,
                train_acc: accuracy(&model, train)?,
                val_acc: if val.is_empty() {
                    None
                } else {
                    Some(accuracy(&model, val)?)
                },
            };
            on_row(&row);
            metrics.push(row);
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(&model.config, &model.params, cfg.max_iters, Some(&adam))?,
        metrics,
        losses,
    })
}

/// CSV with header `iter,loss,train_acc,val_acc`; a missing validation
/// accuracy is an empty field.
pub fn write_metrics<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "loss", "train_acc", "val_acc"])?;
    for r in rows {
        w.write_record([
            r.iter.to_string(),
            r.loss.to_string(),
            r.train_acc.to_string(),
            r.val_acc.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("metrics", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sequence, SequenceShape};
    use crate::model::ChamConfig;

    fn tiny_task() -> (ChamConfig, Vec<FeatureSequence>) {
        let cfg = ChamConfig {
            grid: 5,
            feature_channels: 4,
            n_hidden: 6,
            a_channels: 4,
            num_classes: 3,
            seq_len: 6,
            ..ChamConfig::default()
        };
        let shape = SequenceShape::square(6, 5, 4);
        let data = (0..6)
            .map(|n| generate_sequence(n % 3, 100 + n as u64, shape).unwrap())
            .collect();
        (cfg, data)
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut b = Batches::new(5, 3);
        let mut first: Vec<usize> = b.next(5);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        let mut next = b.next(3);
        next.extend(b.next(2));
        next.sort();
        assert_eq!(next, vec![0, 1, 2, 3, 4]);
        assert_eq!(Batches::new(1, 0).next(4), vec![0; 4]);
    }

    #[test]
    fn sample_seeds_differ() {
        let mut seen = std::collections::HashSet::new();
        for iter in 0..50 {
            for slot in 0..8 {
                assert!(seen.insert(sample_seed(7, iter, slot)));
            }
        }
    }

    #[test]
    fn runs_are_reproducible_and_log_on_schedule() {
        let (cfg, data) = tiny_task();
        let model = ChamModel::new(cfg, 1).unwrap();
        let tc = TrainConfig {
            batch_size: 4,
            max_iters: 7,
            eval_every: 3,
            lr_initial: 1e-3,
            seed: 11,
            ..Default::default()
        };
        let a = train_loop(&model, &data, &data[..2], &tc, |_| {}).unwrap();
        let b = train_loop(&model, &data, &data[..2], &tc, |_| {}).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        let iters: Vec<u64> = a.metrics.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![3, 6, 7]);
        assert_eq!(a.losses.len(), 7);
        assert_eq!(a.checkpoint.iteration, 7);
        assert_eq!(a.checkpoint.adam.as_ref().unwrap().step, 7);
        assert!(a.metrics.iter().all(|r| r.val_acc.is_some()));
    }

    #[test]
    fn metrics_csv_format() {
        let rows = [
            MetricsRow { iter: 50, loss: 1.5, train_acc: 0.25, val_acc: Some(0.5) },
            MetricsRow { iter: 60, loss: 0.75, train_acc: 1.0, val_acc: None },
        ];
        let mut buf = Vec::new();
        write_metrics(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iter,loss,train_acc,val_acc\n50,1.5,0.25,0.5\n60,0.75,1,\n"
        );
    }

    #[test]
    fn non_finite_input_aborts_with_last_good_checkpoint() {
        let (cfg, mut data) = tiny_task();
        let model = ChamModel::new(cfg, 2).unwrap();
        data[0].frames[1].data_mut()[0] = f64::NAN;
        let tc = TrainConfig { batch_size: 6, max_iters: 3, ..Default::default() };
        match train_loop(&model, &data, &[], &tc, |_| {}) {
            Err(Error::Diverged { iteration, last_good, .. }) => {
                assert_eq!(iteration, 0);
                assert_eq!(last_good.iteration, 0);
                let expect = Checkpoint::new(&model.config, &model.params, 0, None).unwrap();
                assert_eq!(last_good.params, expect.params);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let (cfg, _) = tiny_task();
        let model = ChamModel::new(cfg, 0).unwrap();
        assert!(train_loop(&model, &[], &[], &TrainConfig::default(), |_| {}).is_err());
    }
}
