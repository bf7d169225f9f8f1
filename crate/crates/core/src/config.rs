//! `key = value` run configuration files.
//!
//! One setting per line, `#` starts a comment, whitespace around keys and
//! values is ignored. Every key is optional and defaults to the desk-scale
//! value; unknown or repeated keys are errors.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ChamConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ChamConfig,
    pub train: TrainConfig,
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value {value:?} for {key}")))
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "line {line}: invalid value {value:?} for {key} (expected true or false)"
        ))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: {key} is set twice")));
            }
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            match key {
                "grid" => m.grid = parse_value(line, key, value)?,
                "feature_channels" => m.feature_channels = parse_value(line, key, value)?,
                "n_hidden" => m.n_hidden = parse_value(line, key, value)?,
                "a_channels" => m.a_channels = parse_value(line, key, value)?,
                "num_classes" => m.num_classes = parse_value(line, key, value)?,
                "seq_len" => m.seq_len = parse_value(line, key, value)?,
                "skip_stride" => m.skip_stride = parse_value(line, key, value)?,
                "kernel_size" => m.kernel_size = parse_value(line, key, value)?,
                "head_hidden" => m.head_hidden = parse_value(line, key, value)?,
                "g_activation" => {
                    m.g_activation = value
                        .parse()
                        .map_err(|e| Error::Config(format!("line {line}: {e}")))?
                }
                "attention_input" => {
                    m.attention_input = value
                        .parse()
                        .map_err(|e| Error::Config(format!("line {line}: {e}")))?
                }
                "dropout_rate" => m.dropout_rate = parse_value(line, key, value)?,
                "layer2_enabled" => m.layer2_enabled = parse_bool(line, key, value)?,
                "batch_size" => t.batch_size = parse_value(line, key, value)?,
                "lr_initial" => t.lr_initial = parse_value(line, key, value)?,
                "lr_after" => t.lr_after = parse_value(line, key, value)?,
                "lr_switch_iter" => t.lr_switch_iter = parse_value(line, key, value)?,
                "beta1" => t.beta1 = parse_value(line, key, value)?,
                "beta2" => t.beta2 = parse_value(line, key, value)?,
                "adam_eps" => t.adam_eps = parse_value(line, key, value)?,
                "max_iters" => t.max_iters = parse_value(line, key, value)?,
                "seed" => t.seed = parse_value(line, key, value)?,
                "eval_every" => t.eval_every = parse_value(line, key, value)?,
                other => return Err(Error::Config(format!("line {line}: unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Renders every key; parsing the output gives back the same configuration.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.model;
        let t = &self.train;
        writeln!(f, "# model")?;
        writeln!(f, "grid = {}", m.grid)?;
        writeln!(f, "feature_channels = {}", m.feature_channels)?;
        writeln!(f, "n_hidden = {}", m.n_hidden)?;
        writeln!(f, "a_channels = {}", m.a_channels)?;
        writeln!(f, "num_classes = {}", m.num_classes)?;
        writeln!(f, "seq_len = {}", m.seq_len)?;
        writeln!(f, "skip_stride = {}", m.skip_stride)?;
        writeln!(f, "kernel_size = {}", m.kernel_size)?;
        writeln!(f, "head_hidden = {}", m.head_hidden)?;
        writeln!(f, "g_activation = {}", m.g_activation.name())?;
        writeln!(f, "attention_input = {}", m.attention_input.name())?;
        writeln!(f, "dropout_rate = {}", m.dropout_rate)?;
        writeln!(f, "layer2_enabled = {}", m.layer2_enabled)?;
        writeln!(f, "# training")?;
        writeln!(f, "batch_size = {}", t.batch_size)?;
        writeln!(f, "lr_initial = {}", t.lr_initial)?;
        writeln!(f, "lr_after = {}", t.lr_after)?;
        writeln!(f, "lr_switch_iter = {}", t.lr_switch_iter)?;
        writeln!(f, "beta1 = {}", t.beta1)?;
        writeln!(f, "beta2 = {}", t.beta2)?;
        writeln!(f, "adam_eps = {}", t.adam_eps)?;
        writeln!(f, "max_iters = {}", t.max_iters)?;
        writeln!(f, "seed = {}", t.seed)?;
        writeln!(f, "eval_every = {}", t.eval_every)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::AttentionInput;
    use crate::tensor::Activation;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# nothing\n\n   \n").unwrap(), RunConfig::default());
    }

    #[test]
    fn parses_every_kind_of_value() {
        let text = "
            grid=5   # trailing comment
              g_activation =   tanh
            attention_input = hidden_only
            layer2_enabled = false
            dropout_rate = 0.25
            lr_initial = 3e-3
            max_iters = 20
            seed = 99
        ";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.model.grid, 5);
        assert_eq!(c.model.g_activation, Activation::Tanh);
        assert_eq!(c.model.attention_input, AttentionInput::HiddenOnly);
        assert!(!c.model.layer2_enabled);
        assert_eq!(c.model.dropout_rate, 0.25);
        assert_eq!(c.train.lr_initial, 3e-3);
        assert_eq!(c.train.max_iters, 20);
        assert_eq!(c.train.seed, 99);
        assert_eq!(c.model.n_hidden, ChamConfig::default().n_hidden);
    }

    #[test]
    fn display_round_trips() {
        let mut c = RunConfig::default();
        c.model.head_hidden = 7;
        c.model.g_activation = Activation::Tanh;
        c.train.adam_eps = 1e-7;
        c.train.lr_after = 2.5e-6;
        assert_eq!(RunConfig::parse(&c.to_string()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            ("grid = 3\nbogus = 1\n", "line 2: unknown key \"bogus\""),
            ("grid = seven", "line 1: invalid value \"seven\" for grid"),
            ("grid 3", "line 1: expected `key = value`"),
            ("seed = 1\nseed = 2", "line 2: seed is set twice"),
            ("layer2_enabled = yes", "line 1: invalid value \"yes\" for layer2_enabled"),
            ("g_activation = relu", "line 1: unknown activation"),
        ];
        for (text, want) in cases {
            let e = RunConfig::parse(text).unwrap_err().to_string();
            assert!(e.contains(want), "{text:?}: {e}");
        }
    }

    #[test]
    fn invariants_checked_before_use() {
        for text in ["kernel_size = 2", "dropout_rate = 1.0", "beta1 = 1", "batch_size = 0", "lr_initial = -1"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}
