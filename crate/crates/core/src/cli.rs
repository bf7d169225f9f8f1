//! The `cham` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::data::{generate_dataset, load_manifest, read_features, SequenceShape, SYNTH_CLASSES};
use crate::error::{Error, Result};
use crate::model::{export_attention, ChamConfig, ChamModel, Mode};
use crate::tensor::Activation;
use crate::train::{
    evaluate, grad_check, read_checkpoint, train_loop, write_checkpoint, write_metrics,
};
use crate::viz::{write_attention_csv, write_pgm, PgmScale};

#[derive(Debug, Parser)]
#[command(name = "cham", version, about = "Convolutional hierarchical attention model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic 3-class dataset and its manifest.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Training sequences per class.
        #[arg(long)]
        per_class: usize,
        /// Test sequences per class [default: half of --per-class, at least 1].
        #[arg(long)]
        test_per_class: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Takes seq_len, grid and feature_channels from this file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on the train split of a manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Per-class and overall accuracy on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        /// Model to check [default: the small check model, both g activations].
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check at most this many evenly spaced entries per tensor.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Export the attention map of every frame of one feature file.
    Attend {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = MapFormat::Csv)]
        format: MapFormat,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MapFormat {
    Csv,
    Pgm,
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 on runtime failure, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match dispatch(cli.command, &mut out) {
        Ok(code) => code,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                msg.push_str(&format!(": {s}"));
                source = s.source();
            }
            eprintln!("{msg}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn check_data_shape(cfg: &ChamConfig, shape: SequenceShape, data: &Path) -> Result<()> {
    let want = SequenceShape::square(cfg.seq_len, cfg.grid, cfg.feature_channels);
    if shape != want {
        return Err(Error::Config(format!(
            "{} holds sequences of shape {shape}, the model expects {want}",
            data.display()
        )));
    }
    Ok(())
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn dispatch(command: Command, out: &mut impl Write) -> Result<i32> {
    match command {
        Command::Gen {
            out: dir,
            per_class,
            test_per_class,
            seed,
            config,
        } => {
            if per_class == 0 {
                return Err(Error::Config("--per-class must be positive".into()));
            }
            let cfg = load_config(config.as_deref())?.model;
            let test = test_per_class.unwrap_or((per_class / 2).max(1));
            let shape = SequenceShape::square(cfg.seq_len, cfg.grid, cfg.feature_channels);
            generate_dataset(&dir, per_class, test, seed, shape)?;
            writeln!(
                out,
                "wrote {} train and {} test sequences of shape {shape} to {}",
                per_class * SYNTH_CLASSES,
                test * SYNTH_CLASSES,
                dir.join("manifest.csv").display()
            )
            .map_err(io_err)?;
            Ok(0)
        }

        Command::Train {
            config,
            data,
            out: ckpt_path,
            metrics,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (_, dataset) = load_manifest(&data, cfg.model.num_classes)?;
            if let Some(shape) = dataset.shape() {
                check_data_shape(&cfg.model, shape, &data)?;
            }
            let model = ChamModel::new(cfg.model.clone(), cfg.train.seed)?;
            let result = train_loop(&model, &dataset.train, &dataset.test, &cfg.train, |r| {
                let val = r.val_acc.map(|v| format!(" val_acc {v:.4}")).unwrap_or_default();
                eprintln!("iter {} loss {:.6} train_acc {:.4}{val}", r.iter, r.loss, r.train_acc);
            });
            let outcome = match result {
                Ok(o) => o,
                Err(Error::Diverged {
                    iteration,
                    what,
                    last_good,
                }) => {
                    write_checkpoint(&ckpt_path, &last_good)?;
                    eprintln!(
                        "last good checkpoint (iteration {}) written to {}",
                        last_good.iteration,
                        ckpt_path.display()
                    );
                    return Err(Error::Diverged {
                        iteration,
                        what,
                        last_good,
                    });
                }
                Err(e) => return Err(e),
            };
            write_checkpoint(&ckpt_path, &outcome.checkpoint)?;
            if let Some(p) = &metrics {
                let file = fs::File::create(p).map_err(|e| Error::io(p, e))?;
                write_metrics(file, &outcome.metrics)?;
            }
            if let Some(last) = outcome.metrics.last() {
                writeln!(out, "iterations {}", last.iter).map_err(io_err)?;
                writeln!(out, "final batch loss {:.6}", last.loss).map_err(io_err)?;
                writeln!(out, "train accuracy {:.4}", last.train_acc).map_err(io_err)?;
                if let Some(v) = last.val_acc {
                    writeln!(out, "test accuracy {v:.4}").map_err(io_err)?;
                }
            }
            writeln!(out, "checkpoint written to {}", ckpt_path.display()).map_err(io_err)?;
            Ok(0)
        }

        Command::Eval { ckpt, data } => {
            let ckpt = read_checkpoint(&ckpt)?;
            let model = ckpt.model();
            let (_, dataset) = load_manifest(&data, model.config.num_classes)?;
            if let Some(shape) = dataset.shape() {
                check_data_shape(&model.config, shape, &data)?;
            }
            let pred = evaluate(&model, &dataset.test)?;
            let c = model.config.num_classes;
            let mut hits = vec![0usize; c];
            let mut totals = vec![0usize; c];
            for (p, seq) in pred.iter().zip(&dataset.test) {
                totals[seq.label] += 1;
                hits[seq.label] += (*p == seq.label) as usize;
            }
            for k in 0..c {
                let acc = if totals[k] > 0 {
                    format!("{:.4}", hits[k] as f64 / totals[k] as f64)
                } else {
                    "n/a".into()
                };
                writeln!(out, "class {k}: {}/{} {acc}", hits[k], totals[k]).map_err(io_err)?;
            }
            let (h, n): (usize, usize) = (hits.iter().sum(), totals.iter().sum());
            writeln!(out, "overall: {h}/{n} {:.4}", h as f64 / n as f64).map_err(io_err)?;
            Ok(0)
        }

        Command::Gradcheck {
            config,
            seed,
            samples,
        } => {
            let configs = match &config {
                Some(p) => vec![RunConfig::from_file(p)?.model],
                None => [Activation::Sigmoid, Activation::Tanh]
                    .into_iter()
                    .map(|g| ChamConfig {
                        g_activation: g,
                        ..ChamConfig::gradcheck()
                    })
                    .collect(),
            };
            let mut passed = true;
            for cfg in &configs {
                let report = grad_check(cfg, seed, crate::train::gradcheck::DEFAULT_EPSILON, samples)?;
                writeln!(out, "g_activation = {}", cfg.g_activation.name()).map_err(io_err)?;
                write!(out, "{}", report.render()).map_err(io_err)?;
                passed &= report.passed();
            }
            writeln!(out, "{}", if passed { "PASS" } else { "FAIL" }).map_err(io_err)?;
            Ok(if passed { 0 } else { 1 })
        }

        Command::Attend {
            ckpt,
            input,
            out: dir,
            format,
        } => {
            let model = read_checkpoint(&ckpt)?.model();
            let seq = read_features(&input)?;
            check_data_shape(&model.config, seq.shape(), &input)?;
            let trace = model.forward(&seq.frames, Mode::Eval)?;
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for t in 1..=seq.len() {
                let map = export_attention(&trace, t)?;
                match format {
                    MapFormat::Csv => write_attention_csv(&dir.join(format!("step_{t:03}.csv")), &map)?,
                    MapFormat::Pgm => {
                        write_pgm(&dir.join(format!("step_{t:03}.pgm")), &map, PgmScale::MinMax)?
                    }
                }
            }
            writeln!(out, "wrote {} attention maps to {}", seq.len(), dir.display()).map_err(io_err)?;
            Ok(0)
        }
    }
}
