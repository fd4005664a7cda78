//! Synthetic corpus, reduction-factor schedule, optimizer, checkpoints and
//! the epoch loop that ties them together.

pub mod checkpoint;
pub mod corpus;
pub mod diagnostics;
pub mod optim;
pub mod schedule;

pub use checkpoint::Checkpoint;
pub use corpus::{Corpus, CorpusSettings, SyntheticCorpusSpec, Utterance};
pub use diagnostics::{alignment_diagnostics, mean_diagnostics, AlignmentDiagnostics};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use schedule::RFSchedule;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{LossBreakdown, ModelConfig, Vaenar};
use crate::nn::{update_running_stats, Ctx, ParamStore};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const METRICS_HEADER: &str = "epoch,r,recon,kl,length,total,diagonality,monotonicity";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.vnck";
pub const BEST_FILE: &str = "best.vnck";
pub const CONFIG_ECHO_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: RFSchedule,
    pub adam: AdamConfig,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub checkpoint_every: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if let Some(r) = self.schedule.values().into_iter().find(|r| !self.model.reduction_factors.contains(r)) {
            return Err(Error::Config(format!("schedule reaches r = {r} but the model has no head for it")));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_size and checkpoint_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.clip_norm <= 0.0 || self.adam.lr <= 0.0 {
            return Err(Error::Config("alpha, beta must be >= 0; clip_norm and lr > 0".into()));
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub r: usize,
    pub recon: f64,
    pub kl: f64,
    pub length: f64,
    pub total: f64,
    pub diagonality: f64,
    pub monotonicity: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.r, self.recon, self.kl, self.length, self.total, self.diagonality, self.monotonicity
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub loss: LossBreakdown,
    pub alignment: AlignmentDiagnostics,
    /// Same metrics on the last posterior block.
    pub posterior_alignment: AlignmentDiagnostics,
}

/// Stateless 64-bit mixer used to derive per-step seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Vaenar,
    pub store: ParamStore,
    pub adam: Adam,
    pub next_epoch: usize,
    pub best_val: Option<f64>,
    pub last_validation: Option<ValidationReport>,
    corpus: Corpus,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, corpus: Corpus) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::Config("corpus is empty".into()));
        }
        if corpus.n_bins != cfg.model.n_bins || corpus.vocab_size > cfg.model.vocab_size {
            return Err(Error::Config(format!(
                "corpus has {} bins and {} symbols; model expects {} and at most {}",
                corpus.n_bins, corpus.vocab_size, cfg.model.n_bins, cfg.model.vocab_size
            )));
        }
        let mut store = ParamStore::new();
        let model = Vaenar::new(cfg.model.clone(), &mut store)?;
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5eed])));
        let n_val = if corpus.len() < 2 || cfg.val_fraction == 0.0 {
            0
        } else {
            ((cfg.val_fraction * corpus.len() as f64).round() as usize).clamp(1, corpus.len() - 1)
        };
        let mut val_idx = order[..n_val].to_vec();
        let mut train_idx = order[n_val..].to_vec();
        val_idx.sort_unstable();
        train_idx.sort_unstable();
        if val_idx.is_empty() {
            val_idx = train_idx.clone();
        }
        Ok(Self {
            adam: Adam::new(cfg.adam),
            cfg,
            model,
            store,
            next_epoch: 0,
            best_val: None,
            last_validation: None,
            corpus,
            train_idx,
            val_idx,
        })
    }

    /// Restores parameters, optimizer state and epoch counter from `ckpt`.
    pub fn resume(cfg: TrainConfig, corpus: Corpus, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg, corpus)?;
        for (name, p) in t.store.params() {
            match ckpt.store.get(name) {
                Some(q) if q.shape() == p.shape() => {}
                _ => return Err(Error::Format(format!("checkpoint lacks a compatible `{name}`"))),
            }
        }
        t.store = ckpt.store.clone();
        t.adam = ckpt.adam.clone();
        t.next_epoch = ckpt.next_epoch as usize;
        t.best_val = ckpt.extra("best_val");
        Ok(t)
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn validation_indices(&self) -> &[usize] {
        &self.val_idx
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn current_r(&self) -> usize {
        self.cfg.schedule.r_at_epoch(self.next_epoch)
    }

    /// One pass over the training split followed by validation diagnostics.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.next_epoch;
        let r = self.cfg.schedule.r_at_epoch(epoch);
        let mut order = self.train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.seed, epoch as u64, 1])));
        let mut sums = [0.0; 4];
        for (step, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let b = self.train_step(epoch, step, batch, r)?;
            for (s, v) in sums.iter_mut().zip([b.recon_mse, b.kl, b.length_loss, b.total]) {
                *s += v;
            }
        }
        let n = order.len() as f64;
        let val = self.validate(r)?;
        let alignment = val.alignment;
        self.last_validation = Some(val);
        self.next_epoch += 1;
        Ok(EpochMetrics {
            epoch,
            r,
            recon: sums[0] / n,
            kl: sums[1] / n,
            length: sums[2] / n,
            total: sums[3] / n,
            diagonality: alignment.diagonality,
            monotonicity: alignment.monotonicity,
        })
    }

    /// Averages gradients over `batch`, clips, and applies one Adam update.
    /// Returns the summed (not averaged) loss terms of the batch.
    pub fn train_step(&mut self, epoch: usize, step: usize, batch: &[usize], r: usize) -> Result<LossBreakdown> {
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut stats = Vec::with_capacity(batch.len());
        let mut sum = LossBreakdown {
            recon_mse: 0.0,
            kl: 0.0,
            length_loss: 0.0,
            total: 0.0,
            alpha: self.cfg.alpha,
            beta: self.cfg.beta,
        };
        let scale = 1.0 / batch.len() as f64;
        for &u in batch {
            let utt = &self.corpus.utterances[u];
            let parts = [self.cfg.seed, epoch as u64, step as u64, u as u64];
            let ctx = Ctx::train(&self.store, mix_seed(&[parts[0], parts[1], parts[2], parts[3], 0]));
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[parts[0], parts[1], parts[2], parts[3], 1]));
            let noise = self.model.latent_noise(utt.n_frames(), r, &mut rng);
            let out = self
                .model
                .compute_loss(&ctx, &utt.char_ids, &utt.spectrogram, &noise, r, self.cfg.alpha, self.cfg.beta)?;
            if !out.breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            let grads = ctx.param_grads(&ctx.tape.backward(out.loss)?);
            for (name, g) in grads {
                match acc.get_mut(&name) {
                    Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += scale * g),
                    None => {
                        acc.insert(name, g.map(|v| v * scale));
                    }
                }
            }
            stats.push(ctx.take_stats());
            let b = out.breakdown;
            sum.recon_mse += b.recon_mse;
            sum.kl += b.kl;
            sum.length_loss += b.length_loss;
            sum.total += b.total;
        }
        clip_global_norm(&mut acc, self.cfg.clip_norm);
        self.adam.step(&mut self.store, &acc)?;
        update_running_stats(&mut self.store, &stats);
        Ok(sum)
    }

    /// Eval-mode pass over the validation split using the posterior mean.
    pub fn validate(&self, r: usize) -> Result<ValidationReport> {
        let mut loss = [0.0; 4];
        let mut diags = Vec::with_capacity(self.val_idx.len());
        let mut post_diags = Vec::with_capacity(self.val_idx.len());
        for &u in &self.val_idx {
            let utt = &self.corpus.utterances[u];
            let ctx = Ctx::eval(&self.store);
            let noise = Tensor::zeros(&[utt.n_frames().div_ceil(r), self.cfg.model.d_z]);
            let out = self
                .model
                .compute_loss(&ctx, &utt.char_ids, &utt.spectrogram, &noise, r, self.cfg.alpha, self.cfg.beta)?;
            let b = out.breakdown;
            for (s, v) in loss.iter_mut().zip([b.recon_mse, b.kl, b.length_loss, b.total]) {
                *s += v;
            }
            if let Some(last) = out.attention.last() {
                diags.push(alignment_diagnostics(&last.mean_over_heads()));
            }
            if let Some(last) = out.posterior_attention.last() {
                post_diags.push(alignment_diagnostics(&last.mean_over_heads()));
            }
        }
        let n = self.val_idx.len().max(1) as f64;
        Ok(ValidationReport {
            loss: LossBreakdown {
                recon_mse: loss[0] / n,
                kl: loss[1] / n,
                length_loss: loss[2] / n,
                total: loss[3] / n,
                alpha: self.cfg.alpha,
                beta: self.cfg.beta,
            },
            alignment: mean_diagnostics(&diags),
            posterior_alignment: mean_diagnostics(&post_diags),
        })
    }

    pub fn checkpoint(&self, config_text: &str) -> Checkpoint {
        let mut extras = BTreeMap::from([("mean_frames".to_string(), Tensor::scalar(self.corpus.mean_frames()))]);
        if let Some(b) = self.best_val {
            extras.insert("best_val".to_string(), Tensor::scalar(b));
        }
        Checkpoint {
            store: self.store.clone(),
            adam: self.adam.clone(),
            schedule: self.cfg.schedule,
            next_epoch: self.next_epoch as u32,
            extras,
            config_text: config_text.to_string(),
        }
    }
}

/// Files written by a training run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::Input(format!("cannot create {}: {e}", root.display())))?;
        Ok(Self { root })
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join(CHECKPOINT_FILE)
    }

    pub fn best(&self) -> PathBuf {
        self.root.join(BEST_FILE)
    }

    pub fn config_echo(&self) -> PathBuf {
        self.root.join(CONFIG_ECHO_FILE)
    }
}

/// Keeps the header and the rows for epochs before `next_epoch`.
fn metrics_prefix(path: &Path, next_epoch: usize) -> Result<String> {
    let mut out = format!("{METRICS_HEADER}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let epoch: usize = line
                .split(',')
                .next()
                .and_then(|e| e.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad metrics row `{line}`")))?;
            if epoch < next_epoch {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Runs epochs until `cfg.epochs`, keeping the metrics log, the periodic
/// checkpoint and the best-validation checkpoint in `dir`. A fresh run
/// writes its initial state first, so a non-finite loss always leaves a
/// usable checkpoint behind.
pub fn train(trainer: &mut Trainer, dir: &RunDir, config_text: &str, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<Vec<EpochMetrics>> {
    write_atomic(&dir.config_echo(), config_text.as_bytes())?;
    let mut log = metrics_prefix(&dir.metrics(), trainer.next_epoch)?;
    write_atomic(&dir.metrics(), log.as_bytes())?;
    if !dir.checkpoint().exists() {
        trainer.checkpoint(config_text).save(&dir.checkpoint())?;
    }
    let mut rows = Vec::new();
    while trainer.next_epoch < trainer.cfg.epochs {
        let m = trainer.run_epoch()?;
        log.push_str(&m.csv_row());
        log.push('\n');
        write_atomic(&dir.metrics(), log.as_bytes())?;
        let val = trainer.last_validation.as_ref().map_or(f64::NAN, |v| v.loss.total);
        if val.is_finite() && trainer.best_val.is_none_or(|b| val < b) {
            trainer.best_val = Some(val);
            trainer.checkpoint(config_text).save(&dir.best())?;
        }
        let done = trainer.next_epoch == trainer.cfg.epochs;
        if done || trainer.next_epoch.is_multiple_of(trainer.cfg.checkpoint_every) {
            trainer.checkpoint(config_text).save(&dir.checkpoint())?;
        }
        on_epoch(&m);
        rows.push(m);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_setup(n_utt: usize) -> (TrainConfig, Corpus) {
        let model = ModelConfig::tiny();
        let spec = SyntheticCorpusSpec::from_settings(&CorpusSettings {
            vocab_size: model.vocab_size,
            n_bins: model.n_bins,
            n_utterances: n_utt,
            min_chars: 2,
            max_chars: 4,
            min_duration: 2,
            max_duration: 3,
            ..CorpusSettings::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            schedule: RFSchedule {
                initial_r: 2,
                step_every: 2,
                floor_r: 1,
            },
            model,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::full_scale()
            },
            alpha: 1e-3,
            beta: 1.0,
            epochs: 4,
            batch_size: 2,
            clip_norm: 5.0,
            checkpoint_every: 2,
            val_fraction: 0.1,
            seed: 3,
        };
        (cfg, Corpus::generate(&spec).unwrap())
    }

    #[test]
    fn seeds_differ_per_part() {
        assert_ne!(mix_seed(&[1, 2, 3]), mix_seed(&[1, 3, 2]));
        assert_eq!(mix_seed(&[7, 8]), mix_seed(&[7, 8]));
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let (cfg, corpus) = tiny_setup(20);
        let t = Trainer::new(cfg, corpus).unwrap();
        assert_eq!(t.validation_indices().len(), 2);
        assert_eq!(t.train_indices().len(), 18);
        assert!(t.validation_indices().iter().all(|i| !t.train_indices().contains(i)));
    }

    #[test]
    fn epochs_follow_schedule_and_log_rows() {
        let (cfg, corpus) = tiny_setup(6);
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path()).unwrap();
        let mut t = Trainer::new(cfg, corpus).unwrap();
        let rows = train(&mut t, &run, "preset = tiny\n", |_| {}).unwrap();
        assert_eq!(rows.iter().map(|m| m.r).collect::<Vec<_>>(), vec![2, 2, 1, 1]);
        let log = fs::read_to_string(run.metrics()).unwrap();
        assert_eq!(log.lines().count(), 5);
        assert_eq!(log.lines().next(), Some(METRICS_HEADER));
        assert!(run.checkpoint().exists() && run.best().exists());
        assert_eq!(fs::read_to_string(run.config_echo()).unwrap(), "preset = tiny\n");
        assert_eq!(Checkpoint::load(&run.checkpoint()).unwrap().next_epoch, 4);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (cfg, corpus) = tiny_setup(6);
        let a_dir = tempfile::tempdir().unwrap();
        let a = RunDir::new(a_dir.path()).unwrap();
        let mut full = Trainer::new(cfg.clone(), corpus.clone()).unwrap();
        train(&mut full, &a, "", |_| {}).unwrap();

        let b_dir = tempfile::tempdir().unwrap();
        let b = RunDir::new(b_dir.path()).unwrap();
        let half = TrainConfig { epochs: 2, ..cfg.clone() };
        let mut first = Trainer::new(half, corpus.clone()).unwrap();
        train(&mut first, &b, "", |_| {}).unwrap();
        let ckpt = Checkpoint::load(&b.checkpoint()).unwrap();
        let mut second = Trainer::resume(cfg, corpus, &ckpt).unwrap();
        train(&mut second, &b, "", |_| {}).unwrap();

        assert_eq!(fs::read(a.metrics()).unwrap(), fs::read(b.metrics()).unwrap());
        assert_eq!(fs::read(a.checkpoint()).unwrap(), fs::read(b.checkpoint()).unwrap());
    }

    #[test]
    fn divergent_lr_halts_and_keeps_last_checkpoint() {
        let (mut cfg, corpus) = tiny_setup(4);
        cfg.adam.lr = 1e3;
        cfg.clip_norm = 1e12;
        cfg.epochs = 50;
        cfg.checkpoint_every = 1;
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path()).unwrap();
        let mut t = Trainer::new(cfg, corpus).unwrap();
        let err = train(&mut t, &run, "", |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_)), "{err:?}");
        let ckpt = Checkpoint::load(&run.checkpoint()).unwrap();
        assert!(ckpt.store.params().values().all(|p| p.is_finite()));
    }
}
