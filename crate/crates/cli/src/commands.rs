use crate::NoiseArg;
use std::fmt::Write as _;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;
use vaenar_core::config::RunConfig;
use vaenar_core::io::{write_atomic, write_spectrogram};
use vaenar_core::model::{NoiseMode, Synthesis, Vaenar};
use vaenar_core::nn::{Ctx, ParamStore};
use vaenar_core::selfcheck::{run_all, SelfcheckOptions, Subject};
use vaenar_core::train::{self, alignment_diagnostics, Checkpoint, Corpus, RunDir, SyntheticCorpusSpec, Trainer};
use vaenar_core::vocab::Vocabulary;
use vaenar_core::{Error, Result};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) | Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn load_config(path: Option<&Path>) -> Result<(RunConfig, String)> {
    match path {
        Some(p) => RunConfig::read(p),
        None => Ok((RunConfig::parse("")?, String::new())),
    }
}

pub fn gen_corpus(config: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let (cfg, _) = load_config(config)?;
    let corpus = Corpus::generate(&SyntheticCorpusSpec::from_settings(&cfg.corpus)?)?;
    corpus
        .save(out)
        .map_err(|e| Error::Input(format!("cannot write corpus to {}: {e}", out.display())))?;
    println!("wrote {} utterances to {}", corpus.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train(config: Option<&Path>, corpus_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<ExitCode> {
    let ckpt = resume.map(Checkpoint::load).transpose()?;
    let (cfg, text) = match (config, &ckpt) {
        (None, Some(c)) => (RunConfig::parse(&c.config_text)?, c.config_text.clone()),
        _ => load_config(config)?,
    };
    let corpus = Corpus::load(corpus_dir, &Vocabulary::new(cfg.corpus.vocab_size)?)?;
    let mut trainer = match &ckpt {
        Some(c) => Trainer::resume(cfg.train.clone(), corpus, c)?,
        None => Trainer::new(cfg.train.clone(), corpus)?,
    };
    let dir = RunDir::new(out)?;
    println!("{}", train::METRICS_HEADER);
    match train::train(&mut trainer, &dir, &text, |m| println!("{}", m.csv_row())) {
        Ok(_) => Ok(ExitCode::SUCCESS),
        Err(e @ (Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_))) => {
            eprintln!("training halted: {e}");
            eprintln!("last good checkpoint: {}", dir.checkpoint().display());
            Ok(ExitCode::from(3))
        }
        Err(e) => Err(e),
    }
}

/// A trained model restored from a checkpoint, with its run configuration.
struct Loaded {
    cfg: RunConfig,
    model: Vaenar,
    store: ParamStore,
    ckpt: Checkpoint,
}

impl Loaded {
    fn open(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let cfg = RunConfig::parse(&ckpt.config_text)?;
        let mut scratch = ParamStore::new();
        let model = Vaenar::new(cfg.train.model.clone(), &mut scratch)?;
        for (name, p) in scratch.params() {
            if ckpt.store.get(name).map(|q| q.shape()) != Some(p.shape()) {
                return Err(Error::Format(format!("checkpoint lacks a compatible `{name}`")));
            }
        }
        Ok(Self {
            store: ckpt.store.clone(),
            cfg,
            model,
            ckpt,
        })
    }

    /// The reduction factor of the last completed epoch.
    fn final_r(&self) -> usize {
        self.ckpt.schedule.r_at_epoch((self.ckpt.next_epoch as usize).saturating_sub(1))
    }

    fn default_bias(&self) -> usize {
        self.cfg.length_bias.unwrap_or_else(|| {
            let mean = self.ckpt.extra("mean_frames").unwrap_or(0.0);
            (0.1 * mean).round() as usize
        })
    }

    fn synthesize(&self, text: &str, bias: usize, noise: NoiseMode) -> Result<Synthesis> {
        let ids = Vocabulary::new(self.cfg.corpus.vocab_size)?.encode(text)?;
        let ctx = Ctx::eval(&self.store);
        self.model.synthesize(&ctx, &ids, self.final_r(), bias, noise)
    }
}

pub fn synthesize(checkpoint: &Path, text: &str, out: &Path, length_bias: Option<usize>, noise: NoiseArg, seed: u64) -> Result<ExitCode> {
    let m = Loaded::open(checkpoint)?;
    let bias = length_bias.unwrap_or_else(|| m.default_bias());
    let mode = match noise {
        NoiseArg::Zeros => NoiseMode::Zeros,
        NoiseArg::Sample => NoiseMode::Sample { seed },
    };
    let start = Instant::now();
    let s = m.synthesize(text, bias, mode)?;
    let elapsed = start.elapsed().as_secs_f64();
    write_spectrogram(out, &s.spectrogram)?;
    println!("r: {}", m.final_r());
    println!("predicted_frames: {:.3}", s.predicted_frames);
    println!("length_bias: {bias}");
    println!("realized_frames: {}", s.frames);
    println!("elapsed_s: {elapsed:.6}");
    println!("frames_per_s: {:.1}", s.frames as f64 / elapsed.max(1e-12));
    Ok(ExitCode::SUCCESS)
}

pub fn dump_alignment(checkpoint: &Path, text: &str, out: &Path) -> Result<ExitCode> {
    let m = Loaded::open(checkpoint)?;
    let s = m.synthesize(text, m.default_bias(), NoiseMode::Zeros)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Input(format!("cannot create {}: {e}", out.display())))?;
    let mut last = None;
    for (b, w) in s.attention.iter().enumerate() {
        let a = w.mean_over_heads();
        let mut csv = String::new();
        for i in 0..a.shape()[0] {
            let row: Vec<String> = a.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(csv, "{}", row.join(",")).expect("writing to a String");
        }
        write_atomic(&out.join(format!("block{b}.csv")), csv.as_bytes())?;
        last = Some(a);
    }
    let d = alignment_diagnostics(&last.ok_or_else(|| Error::Config("model has no decoder blocks".into()))?);
    let line = format!("diagonality={} monotonicity={}", d.diagonality, d.monotonicity);
    write_atomic(&out.join("diagnostics.txt"), format!("{line}\n").as_bytes())?;
    println!("{line}");
    Ok(ExitCode::SUCCESS)
}

pub fn selfcheck(seed: u64) -> Result<ExitCode> {
    let opts = SelfcheckOptions {
        seed,
        ..SelfcheckOptions::default()
    };
    let reports = run_all(&Subject::default(), &opts);
    for r in &reports {
        println!("{}", r.line());
    }
    Ok(if reports.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
