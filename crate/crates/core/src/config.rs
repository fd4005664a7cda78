//! Run configuration: a flat `key = value` text file with `#` comments.
//!
//! A `preset` key (applied before any other key, wherever it appears)
//! selects the starting values; every other key overrides one field.
//! The corpus vocabulary size and bin count also fix the model's.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{AdamConfig, CorpusSettings, RFSchedule, TrainConfig};
use std::collections::BTreeSet;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// The reference schedule and widths: 2000 epochs, r from 5 to 2.
    Full,
    /// Laptop-sized model on the default synthetic corpus.
    Desk,
    /// Small model on a larger corpus with longer symbols, where
    /// cross-attention alignment emerges within tens of epochs.
    Alignment,
    /// Width-8 model for smoke tests.
    Tiny,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "desk" => Ok(Self::Desk),
            "alignment" => Ok(Self::Alignment),
            "tiny" => Ok(Self::Tiny),
            _ => Err(Error::Config(format!("unknown preset `{s}` (full, desk, alignment, tiny)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusSettings,
    pub train: TrainConfig,
    /// Frames added to the predicted length at synthesis; `None` means 10% of
    /// the training corpus's mean length.
    pub length_bias: Option<usize>,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let corpus = CorpusSettings::default();
        let base = TrainConfig {
            model: ModelConfig::desk(),
            schedule: RFSchedule {
                initial_r: 5,
                step_every: 25,
                floor_r: 2,
            },
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::full_scale()
            },
            alpha: 3e-2,
            beta: 1.0,
            epochs: 100,
            batch_size: 4,
            clip_norm: 5.0,
            checkpoint_every: 10,
            val_fraction: 0.1,
            seed: 7,
        };
        let mut cfg = match p {
            Preset::Desk => Self {
                corpus,
                train: base,
                length_bias: None,
            },
            Preset::Full => Self {
                corpus,
                train: TrainConfig {
                    model: ModelConfig::full_scale(),
                    schedule: RFSchedule::full_scale(),
                    adam: AdamConfig::full_scale(),
                    epochs: 2000,
                    checkpoint_every: 100,
                    ..base
                },
                length_bias: None,
            },
            Preset::Alignment => Self {
                corpus: CorpusSettings {
                    vocab_size: 8,
                    n_bins: 8,
                    n_utterances: 400,
                    min_chars: 6,
                    max_chars: 12,
                    min_duration: 4,
                    max_duration: 6,
                    ..corpus
                },
                train: TrainConfig {
                    model: ModelConfig {
                        embed_dim: 32,
                        prenet_layers: 3,
                        prenet_filters: 32,
                        d_model: 32,
                        n_heads: 2,
                        d_ffn: 64,
                        text_blocks: 1,
                        posterior_blocks: 1,
                        decoder_blocks: 1,
                        d_z: 8,
                        flow_blocks: 2,
                        coupling_blocks: 1,
                        postnet_layers: 3,
                        postnet_channels: 16,
                        ..ModelConfig::desk()
                    },
                    schedule: RFSchedule::fixed(5),
                    epochs: 60,
                    ..base
                },
                length_bias: None,
            },
            Preset::Tiny => Self {
                corpus: CorpusSettings {
                    vocab_size: 6,
                    n_bins: 3,
                    n_utterances: 8,
                    min_chars: 2,
                    max_chars: 4,
                    ..corpus
                },
                train: TrainConfig {
                    model: ModelConfig::tiny(),
                    schedule: RFSchedule {
                        initial_r: 2,
                        step_every: 2,
                        floor_r: 1,
                    },
                    epochs: 3,
                    batch_size: 2,
                    checkpoint_every: 1,
                    ..base
                },
                length_bias: None,
            },
        };
        cfg.sync();
        cfg
    }

    /// Copies the corpus-owned sizes and the schedule's range into the model.
    fn sync(&mut self) {
        let m = &mut self.train.model;
        m.vocab_size = self.corpus.vocab_size;
        m.n_bins = self.corpus.n_bins;
        m.reduction_factors = self.train.schedule.values();
        m.reduction_factors.reverse();
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            entries.push((n + 1, k, v));
        }
        let preset = entries
            .iter()
            .find(|(_, k, _)| *k == "preset")
            .map(|(_, _, v)| v.parse())
            .transpose()?
            .unwrap_or(Preset::Desk);
        let mut cfg = Self::preset(preset);
        for (line, k, v) in entries {
            if k != "preset" {
                cfg.set(k, v).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
            }
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}` for `{key}`"))
        }
        let c = &mut self.corpus;
        let t = &mut self.train;
        let m = &mut t.model;
        let s = &mut t.schedule;
        let o = &mut t.adam;
        match key {
            "corpus.vocab_size" => c.vocab_size = p(key, value)?,
            "corpus.n_bins" => c.n_bins = p(key, value)?,
            "corpus.n_utterances" => c.n_utterances = p(key, value)?,
            "corpus.min_chars" => c.min_chars = p(key, value)?,
            "corpus.max_chars" => c.max_chars = p(key, value)?,
            "corpus.min_duration" => c.min_duration = p(key, value)?,
            "corpus.max_duration" => c.max_duration = p(key, value)?,
            "corpus.duration_jitter" => c.duration_jitter = p(key, value)?,
            "corpus.noise_std" => c.noise_std = p(key, value)?,
            "corpus.seed" => c.seed = p(key, value)?,
            "model.embed_dim" => m.embed_dim = p(key, value)?,
            "model.prenet_layers" => m.prenet_layers = p(key, value)?,
            "model.prenet_kernel" => m.prenet_kernel = p(key, value)?,
            "model.prenet_filters" => m.prenet_filters = p(key, value)?,
            "model.d_model" => m.d_model = p(key, value)?,
            "model.n_heads" => m.n_heads = p(key, value)?,
            "model.d_ffn" => m.d_ffn = p(key, value)?,
            "model.dropout" => m.dropout = p(key, value)?,
            "model.text_blocks" => m.text_blocks = p(key, value)?,
            "model.posterior_blocks" => m.posterior_blocks = p(key, value)?,
            "model.decoder_blocks" => m.decoder_blocks = p(key, value)?,
            "model.d_z" => m.d_z = p(key, value)?,
            "model.flow_blocks" => m.flow_blocks = p(key, value)?,
            "model.coupling_blocks" => m.coupling_blocks = p(key, value)?,
            "model.postnet_layers" => m.postnet_layers = p(key, value)?,
            "model.postnet_kernel" => m.postnet_kernel = p(key, value)?,
            "model.postnet_channels" => m.postnet_channels = p(key, value)?,
            "model.causal_mask" => m.causal_mask = p(key, value)?,
            "model.seed" => m.seed = p(key, value)?,
            "schedule.initial_r" => s.initial_r = p(key, value)?,
            "schedule.step_every" => s.step_every = p(key, value)?,
            "schedule.floor_r" => s.floor_r = p(key, value)?,
            "optimizer.lr" => o.lr = p(key, value)?,
            "optimizer.beta1" => o.beta1 = p(key, value)?,
            "optimizer.beta2" => o.beta2 = p(key, value)?,
            "optimizer.eps" => o.eps = p(key, value)?,
            "train.epochs" => t.epochs = p(key, value)?,
            "train.batch_size" => t.batch_size = p(key, value)?,
            "train.alpha" => t.alpha = p(key, value)?,
            "train.beta" => t.beta = p(key, value)?,
            "train.clip_norm" => t.clip_norm = p(key, value)?,
            "train.checkpoint_every" => t.checkpoint_every = p(key, value)?,
            "train.val_fraction" => t.val_fraction = p(key, value)?,
            "train.seed" => t.seed = p(key, value)?,
            "synth.length_bias" => self.length_bias = Some(p(key, value)?),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.train.adam.lr.is_finite() && self.train.adam.lr > 0.0) {
            return Err(Error::Config(format!("optimizer.lr must be positive, got {}", self.train.adam.lr)));
        }
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Ok((Self::parse(&text)?, text))
    }
}
