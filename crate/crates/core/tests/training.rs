use cham::data::{generate_dataset, load_manifest, generate_sequence, SequenceShape};
use cham::model::{ChamConfig, ChamModel};
use cham::train::{train_loop, write_metrics, TrainConfig};

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (num, den) = ys.iter().enumerate().fold((0.0, 0.0), |(a, b), (i, y)| {
        let dx = i as f64 - mx;
        (a + dx * (y - my), b + dx * dx)
    });
    num / den
}

#[test]
fn early_loss_trends_down() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), 20, 10, 7, SequenceShape::square(12, 7, 16)).unwrap();
    let (_, ds) = load_manifest(&dir.path().join("manifest.csv"), 3).unwrap();
    let model = ChamModel::new(ChamConfig::default(), 7).unwrap();
    let tc = TrainConfig { lr_initial: 1e-3, seed: 7, max_iters: 50, ..TrainConfig::default() };
    let out = train_loop(&model, &ds.train, &[], &tc, |_| {}).unwrap();
    assert_eq!(out.losses.len(), 50);
    let smooth: Vec<f64> = out.losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    assert!(slope(&smooth) < 0.0, "{smooth:?}");
    assert!(smooth.last().unwrap() < smooth.first().unwrap(), "{smooth:?}");
}

#[test]
fn equal_seeds_give_identical_runs() {
    let cfg = ChamConfig { grid: 4, feature_channels: 3, n_hidden: 4, a_channels: 3, seq_len: 6, ..ChamConfig::default() };
    let shape = SequenceShape::square(6, 4, 3);
    let data: Vec<_> = (0..9).map(|i| generate_sequence(i % 3, 40 + i as u64, shape).unwrap()).collect();
    let tc = TrainConfig { batch_size: 4, max_iters: 8, eval_every: 4, lr_initial: 1e-3, seed: 5, ..TrainConfig::default() };
    let run = |seed| {
        let model = ChamModel::new(cfg.clone(), 2).unwrap();
        let out = train_loop(&model, &data[..6], &data[6..], &TrainConfig { seed, ..tc.clone() }, |_| {}).unwrap();
        let mut log = Vec::new();
        write_metrics(&mut log, &out.metrics).unwrap();
        (log, out.losses, out.checkpoint.to_bytes())
    };
    let a = run(5);
    assert_eq!(a, run(5));
    let c = run(6);
    assert_ne!(a.1, c.1);
}
