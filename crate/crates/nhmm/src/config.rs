//! Run configuration: a flat `key = value` plain-text file with `#`
//! comments, merged with command-line overrides. Unknown keys and
//! out-of-range values are rejected with messages naming the key.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::model::{CellType, ModelConfig, Variant};
use crate::training::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                n_states: 5,
                time_shift: 5,
                hop: 1,
                feat_dim: 40,
                hidden_dim: 64,
                num_layers: 1,
                cell: CellType::Elman,
                variant: Variant::NeuralHmm,
                tap_layer: None,
            },
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::validation(format!(
                    "{}:{}: expected `key = value`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Apply one override; errors name the offending key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |key: &str, value: &str| {
            Error::validation(format!("bad value {value:?} for key `{key}`"))
        };
        let parse_usize = |key: &str, value: &str, min: usize| -> Result<usize> {
            let v: usize = value.parse().map_err(|_| bad(key, value))?;
            if v < min {
                return Err(Error::validation(format!(
                    "key `{key}` must be >= {min}, got {v}"
                )));
            }
            Ok(v)
        };
        match key {
            "n_states" => self.model.n_states = parse_usize(key, value, 1)?,
            "time_shift" => self.model.time_shift = parse_usize(key, value, 1)?,
            "hop" => self.model.hop = parse_usize(key, value, 1)?,
            "feat_dim" => self.model.feat_dim = parse_usize(key, value, 1)?,
            "hidden_dim" => self.model.hidden_dim = parse_usize(key, value, 1)?,
            "num_layers" => self.model.num_layers = parse_usize(key, value, 1)?,
            "cell" => {
                self.model.cell = match value {
                    "elman" => CellType::Elman,
                    "lstm" => CellType::Lstm,
                    _ => return Err(bad(key, value)),
                }
            }
            "variant" => {
                self.model.variant = match value {
                    "neural_hmm" => Variant::NeuralHmm,
                    "vq_apc" => Variant::VqApc,
                    _ => return Err(bad(key, value)),
                }
            }
            "tap_layer" => {
                self.model.tap_layer = match value {
                    "top" => None,
                    _ => Some(parse_usize(key, value, 0)?),
                }
            }
            "learning_rate" => {
                let v: f64 = value.parse().map_err(|_| bad(key, value))?;
                if v <= 0.0 {
                    return Err(Error::validation(format!(
                        "key `learning_rate` must be > 0, got {v}"
                    )));
                }
                self.train.learning_rate = v;
            }
            "epochs" => self.train.epochs = parse_usize(key, value, 1)?,
            "batch_size" => self.train.batch_size = parse_usize(key, value, 1)?,
            "seed" => self.train.seed = value.parse().map_err(|_| bad(key, value))?,
            "grad_clip_norm" => {
                let v: f64 = value.parse().map_err(|_| bad(key, value))?;
                if v <= 0.0 {
                    return Err(Error::validation(format!(
                        "key `grad_clip_norm` must be > 0, got {v}"
                    )));
                }
                self.train.grad_clip_norm = v;
            }
            _ => return Err(Error::validation(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Render the effective merged configuration for provenance.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let m = &self.model;
        let t = &self.train;
        let _ = writeln!(out, "n_states = {}", m.n_states);
        let _ = writeln!(out, "time_shift = {}", m.time_shift);
        let _ = writeln!(out, "hop = {}", m.hop);
        let _ = writeln!(out, "feat_dim = {}", m.feat_dim);
        let _ = writeln!(out, "hidden_dim = {}", m.hidden_dim);
        let _ = writeln!(out, "num_layers = {}", m.num_layers);
        let _ = writeln!(
            out,
            "cell = {}",
            match m.cell {
                CellType::Elman => "elman",
                CellType::Lstm => "lstm",
            }
        );
        let _ = writeln!(
            out,
            "variant = {}",
            match m.variant {
                Variant::NeuralHmm => "neural_hmm",
                Variant::VqApc => "vq_apc",
            }
        );
        let _ = writeln!(
            out,
            "tap_layer = {}",
            m.tap_layer
                .map(|v| v.to_string())
                .unwrap_or_else(|| "top".into())
        );
        let _ = writeln!(out, "learning_rate = {}", t.learning_rate);
        let _ = writeln!(out, "epochs = {}", t.epochs);
        let _ = writeln!(out, "batch_size = {}", t.batch_size);
        let _ = writeln!(out, "seed = {}", t.seed);
        let _ = writeln!(out, "grad_clip_norm = {}", t.grad_clip_norm);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("bogus", "1").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn out_of_range_names_the_key() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("hop", "0").unwrap_err();
        assert!(err.to_string().contains("hop"));
        assert!(cfg.set("hop", "7").is_ok());
        assert_eq!(cfg.model.hop, 7);
    }

    #[test]
    fn file_round_trip_through_render() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        let mut cfg = RunConfig::default();
        cfg.set("variant", "vq_apc").unwrap();
        cfg.set("learning_rate", "0.01").unwrap();
        std::fs::write(&path, cfg.render()).unwrap();
        let read = RunConfig::from_file(&path).unwrap();
        assert_eq!(read.render(), cfg.render());
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# a comment\n\nhop = 3 # trailing\n").unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.model.hop, 3);
    }
}
