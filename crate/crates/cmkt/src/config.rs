//! Model and training configuration, presets, and the key=value config
//! file format.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Acoustic encoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Number of encoder blocks.
    pub m_a: usize,
    /// Acoustic width.
    pub d_a: usize,
    /// Textual width (adapter target).
    pub d_t: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Depthwise convolution kernel, odd.
    pub conv_kernel: usize,
    pub subsample_layers: usize,
    /// Adapter/CM branch attaches at blocks stride, 2·stride, …
    pub attachment_stride: usize,
    /// Input feature width.
    pub d_in: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_a == 0 || self.d_a == 0 || self.d_t == 0 || self.heads == 0 || self.ffn_dim == 0
        {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.d_a % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_a {} not divisible by heads {}",
                self.d_a, self.heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conv_kernel {} must be odd",
                self.conv_kernel
            )));
        }
        if self.attachment_stride == 0 {
            return Err(Error::Config("attachment_stride must be ≥ 1".into()));
        }
        if self.d_in == 0 {
            return Err(Error::Config("d_in must be positive".into()));
        }
        Ok(())
    }

    /// Blocks where the adapter/CM branch attaches (1-based).
    pub fn attachment_blocks(&self) -> Vec<usize> {
        (1..=self.m_a)
            .filter(|b| b % self.attachment_stride == 0)
            .collect()
    }
}

/// Which per-layer OT problem contributes the EOT loss at an attachment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EotScope {
    /// Only the last CM layer's coupling.
    Last,
    /// Sum over all CM layers.
    Sum,
}

/// Topology switches for the ablation conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    /// Text branch + alignment/EOT losses on.
    pub cmkt_enabled: bool,
    /// Adapter feedback (FC3 path) into the acoustic stream on.
    pub feedback_enabled: bool,
    /// Fused output replaces the block output as input to the next block.
    pub feed_forward_fused: bool,
}

/// How target text representations are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub seed: u64,
    /// Frozen self-attention depth of the oracle encoder.
    pub depth: usize,
    /// When set, targets load from feature files `<dir>/<utt_id>.cmkt`
    /// instead of the oracle.
    pub dir: Option<PathBuf>,
}

/// Full model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// CM-encoder layer count.
    pub m_t: usize,
    pub sinkhorn_k: usize,
    /// Entropy regularization coefficient.
    pub alpha: f64,
    /// CTC weight in the composite loss.
    pub lambda: f64,
    /// Scale on the knowledge-transfer terms.
    pub w: f64,
    /// Content characters in id order; ids start after the reserved four.
    pub alphabet: String,
    pub target: TargetConfig,
    pub flags: Flags,
    pub eot_scope: EotScope,
}

impl ModelConfig {
    pub fn vocab_size(&self) -> usize {
        crate::FIRST_CONTENT_ID + self.alphabet.chars().count()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.m_t == 0 {
            return Err(Error::Config("m_t must be ≥ 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0,1], got {}",
                self.lambda
            )));
        }
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::Config(format!("w must be ≥ 0, got {}", self.w)));
        }
        if self.alphabet.is_empty() {
            return Err(Error::Config("alphabet must be nonempty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for ch in self.alphabet.chars() {
            if !seen.insert(ch) {
                return Err(Error::Config(format!("alphabet repeats '{}'", ch)));
            }
        }
        Ok(())
    }
}

/// Optimization and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup: usize,
    pub peak_lr: f64,
    pub seed: u64,
    pub grad_clip: f64,
    /// Average checkpoints of the last N epochs for the final model
    /// (0 = use the final state directly).
    pub avg_last: usize,
}

/// Everything a run needs: model plus training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    /// Small preset that trains in seconds and overfits a toy corpus.
    pub fn desk() -> Self {
        Config {
            model: ModelConfig {
                encoder: EncoderConfig {
                    m_a: 4,
                    d_a: 32,
                    d_t: 48,
                    heads: 4,
                    ffn_dim: 64,
                    conv_kernel: 7,
                    subsample_layers: 1,
                    attachment_stride: 2,
                    d_in: 16,
                },
                m_t: 2,
                sinkhorn_k: 3,
                alpha: 1.0,
                lambda: 0.3,
                w: 1.0,
                alphabet: "abcdefgh".into(),
                target: TargetConfig {
                    seed: 1913,
                    depth: 2,
                    dir: None,
                },
                flags: Flags {
                    cmkt_enabled: true,
                    feedback_enabled: true,
                    feed_forward_fused: true,
                },
                eot_scope: EotScope::Last,
            },
            train: TrainConfig {
                epochs: 30,
                batch_size: 8,
                warmup: 100,
                peak_lr: 1e-3,
                seed: 0,
                grad_clip: 5.0,
                avg_last: 0,
            },
        }
    }

    /// Full-scale settings as published; kept for documentation — training
    /// at this size is outside desk scope.
    pub fn paper() -> Self {
        Config {
            model: ModelConfig {
                encoder: EncoderConfig {
                    m_a: 16,
                    d_a: 256,
                    d_t: 768,
                    heads: 4,
                    ffn_dim: 2048,
                    conv_kernel: 15,
                    subsample_layers: 2,
                    attachment_stride: 3,
                    d_in: 83,
                },
                m_t: 5,
                sinkhorn_k: 3,
                alpha: 1.0,
                lambda: 0.3,
                w: 1.0,
                alphabet: "abcdefghijklmnopqrstuvwxyz".into(),
                target: TargetConfig {
                    seed: 1913,
                    depth: 12,
                    dir: None,
                },
                flags: Flags {
                    cmkt_enabled: true,
                    feedback_enabled: true,
                    feed_forward_fused: true,
                },
                eot_scope: EotScope::Last,
            },
            train: TrainConfig {
                epochs: 130,
                batch_size: 32,
                warmup: 20000,
                peak_lr: 1e-3,
                seed: 0,
                grad_clip: 5.0,
                avg_last: 10,
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown preset '{}' (expected desk or paper)",
                other
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
        }
        if self.train.warmup == 0 {
            return Err(Error::Config("warmup must be ≥ 1".into()));
        }
        if !(self.train.peak_lr > 0.0) {
            return Err(Error::Config("peak_lr must be > 0".into()));
        }
        Ok(())
    }

    /// Parses UTF-8 `key=value` lines ('#' comments, blank lines ignored).
    /// A `preset=` line selects the base; every other key overrides one
    /// field. Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(&str, &str)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{}'", lineno + 1, line))
            })?;
            pairs.push((key.trim(), value.trim()));
        }

        let mut cfg = Config::desk();
        for &(k, v) in &pairs {
            if k == "preset" {
                cfg = Config::preset(v)?;
            }
        }
        for (key, value) in pairs {
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{}' for {}", value, key)))
        }
        let enc = &mut self.model.encoder;
        match key {
            "preset" => {} // applied in a first pass
            "m_a" => enc.m_a = num(key, value)?,
            "d_a" => enc.d_a = num(key, value)?,
            "d_t" => enc.d_t = num(key, value)?,
            "heads" => enc.heads = num(key, value)?,
            "ffn_dim" => enc.ffn_dim = num(key, value)?,
            "conv_kernel" => enc.conv_kernel = num(key, value)?,
            "subsample_layers" => enc.subsample_layers = num(key, value)?,
            "attachment_stride" => enc.attachment_stride = num(key, value)?,
            "d_in" => enc.d_in = num(key, value)?,
            "m_t" => self.model.m_t = num(key, value)?,
            "sinkhorn_k" => self.model.sinkhorn_k = num(key, value)?,
            "alpha" => self.model.alpha = num(key, value)?,
            "lambda" => self.model.lambda = num(key, value)?,
            "w" => self.model.w = num(key, value)?,
            "alphabet" => self.model.alphabet = value.to_string(),
            "target_seed" => self.model.target.seed = num(key, value)?,
            "target_depth" => self.model.target.depth = num(key, value)?,
            "target_dir" => self.model.target.dir = Some(PathBuf::from(value)),
            "cmkt_enabled" => self.model.flags.cmkt_enabled = num(key, value)?,
            "feedback_enabled" => self.model.flags.feedback_enabled = num(key, value)?,
            "feed_forward_fused" => self.model.flags.feed_forward_fused = num(key, value)?,
            "eot_scope" => {
                self.model.eot_scope = match value {
                    "last" => EotScope::Last,
                    "sum" => EotScope::Sum,
                    _ => {
                        return Err(Error::Config(format!(
                            "eot_scope must be last or sum, got '{}'",
                            value
                        )))
                    }
                }
            }
            "epochs" => self.train.epochs = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "warmup" => self.train.warmup = num(key, value)?,
            "peak_lr" => self.train.peak_lr = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "grad_clip" => self.train.grad_clip = num(key, value)?,
            "avg_last" => self.train.avg_last = num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key '{}'", other)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        Config::desk().validate().unwrap();
        Config::paper().validate().unwrap();
    }

    #[test]
    fn desk_attachments_are_even_blocks() {
        let cfg = Config::desk();
        assert_eq!(cfg.model.encoder.attachment_blocks(), vec![2, 4]);
    }

    #[test]
    fn paper_attachments_every_third() {
        let cfg = Config::paper();
        assert_eq!(
            cfg.model.encoder.attachment_blocks(),
            vec![3, 6, 9, 12, 15]
        );
    }

    #[test]
    fn parse_overrides_preset() {
        let cfg = Config::parse("preset=desk\nm_t=1\nlambda=0.5\n# comment\n\nepochs=2").unwrap();
        assert_eq!(cfg.model.m_t, 1);
        assert_eq!(cfg.model.lambda, 0.5);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.model.encoder.m_a, 4);
    }

    #[test]
    fn parse_rejects_unknown_keys_and_bad_values() {
        assert!(Config::parse("does_not_exist=1").is_err());
        assert!(Config::parse("lambda=notanumber").is_err());
        assert!(Config::parse("lambda=1.5").is_err());
        assert!(Config::parse("conv_kernel=4").is_err());
        assert!(Config::parse("just a line").is_err());
    }

    #[test]
    fn vocab_size_counts_reserved_ids() {
        // Eight content letters plus blank/unk/cls/sep.
        assert_eq!(Config::desk().model.vocab_size(), 12);
    }

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = Config::desk();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: Config = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
