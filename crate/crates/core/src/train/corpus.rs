//! Synthetic text/spectrogram pairs with known per-symbol durations.
//!
//! Every symbol owns a base duration and a spectral profile; an utterance
//! repeats each symbol's profile for its (jittered) duration and adds noise.

use crate::error::{Error, Result};
use crate::io::{read_spectrogram, write_spectrogram};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fs;
use std::path::Path;

/// Smallest unit-normalized L2 distance allowed between two profiles.
pub const MIN_PROFILE_DISTANCE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SymbolTemplate {
    pub base_duration: usize,
    pub profile: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpusSpec {
    pub vocab_size: usize,
    pub n_bins: usize,
    pub n_utterances: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    pub templates: Vec<SymbolTemplate>,
    pub duration_jitter: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// Knobs for [`SyntheticCorpusSpec::generate_templates`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSettings {
    pub vocab_size: usize,
    pub n_bins: usize,
    pub n_utterances: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub duration_jitter: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            vocab_size: 12,
            n_bins: 16,
            n_utterances: 200,
            min_chars: 5,
            max_chars: 15,
            min_duration: 2,
            max_duration: 5,
            duration_jitter: 0.2,
            noise_std: 0.05,
            seed: 1,
        }
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n.max(1e-300)).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl SyntheticCorpusSpec {
    /// Draws one template per symbol, resampling profiles that land too
    /// close to an earlier one.
    pub fn from_settings(s: &CorpusSettings) -> Result<Self> {
        if s.vocab_size == 0 || s.n_bins == 0 {
            return Err(Error::Config("corpus needs a nonempty vocabulary and at least one bin".into()));
        }
        if s.min_duration < 2 || s.max_duration < s.min_duration {
            return Err(Error::Config(format!(
                "durations must satisfy 2 <= min <= max, got {}..{}",
                s.min_duration, s.max_duration
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x7e3a_91c5_0d2f_4b68);
        let mut templates: Vec<SymbolTemplate> = Vec::with_capacity(s.vocab_size);
        while templates.len() < s.vocab_size {
            let profile: Vec<f64> = (0..s.n_bins).map(|_| rng.sample(StandardNormal)).collect();
            let u = unit(&profile);
            if templates.iter().all(|t| distance(&unit(&t.profile), &u) > MIN_PROFILE_DISTANCE) {
                let base_duration = rng.gen_range(s.min_duration..=s.max_duration);
                templates.push(SymbolTemplate { base_duration, profile });
            }
        }
        let spec = Self {
            vocab_size: s.vocab_size,
            n_bins: s.n_bins,
            n_utterances: s.n_utterances,
            min_chars: s.min_chars,
            max_chars: s.max_chars,
            templates,
            duration_jitter: s.duration_jitter,
            noise_std: s.noise_std,
            seed: s.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Config("corpus vocabulary is empty".into()));
        }
        if self.templates.len() != self.vocab_size {
            return Err(Error::Config(format!(
                "{} templates for {} symbols",
                self.templates.len(),
                self.vocab_size
            )));
        }
        if self.min_chars == 0 || self.max_chars < self.min_chars {
            return Err(Error::Config(format!(
                "character counts must satisfy 1 <= min <= max, got {}..{}",
                self.min_chars, self.max_chars
            )));
        }
        if !(0.0..1.0).contains(&self.duration_jitter) || self.noise_std < 0.0 {
            return Err(Error::Config("jitter must be in [0, 1) and noise_std nonnegative".into()));
        }
        for (i, t) in self.templates.iter().enumerate() {
            if t.base_duration < 2 {
                return Err(Error::Config(format!("symbol {i} has base duration {}", t.base_duration)));
            }
            if t.profile.len() != self.n_bins {
                return Err(Error::Config(format!("symbol {i} profile has {} bins", t.profile.len())));
            }
            for (j, u) in self.templates[..i].iter().enumerate() {
                let d = distance(&unit(&t.profile), &unit(&u.profile));
                if d <= MIN_PROFILE_DISTANCE {
                    return Err(Error::Config(format!("profiles {j} and {i} are only {d:.3} apart")));
                }
            }
        }
        Ok(())
    }

    /// Renders one utterance from explicit ids; `rng` drives jitter and noise.
    pub fn render<R: Rng + ?Sized>(&self, char_ids: &[usize], rng: &mut R) -> (Tensor, Vec<usize>) {
        let mut durations = Vec::with_capacity(char_ids.len());
        let mut data = Vec::new();
        for &c in char_ids {
            let t = &self.templates[c];
            let jitter = if self.duration_jitter > 0.0 {
                1.0 + self.duration_jitter * rng.gen_range(-1.0..=1.0)
            } else {
                1.0
            };
            let d = ((t.base_duration as f64 * jitter).round() as usize).max(1);
            durations.push(d);
            for _ in 0..d {
                for &p in &t.profile {
                    let n: f64 = if self.noise_std > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                    data.push(p + self.noise_std * n);
                }
            }
        }
        let frames = durations.iter().sum();
        (Tensor::new(vec![frames, self.n_bins], data).expect("rendered frames"), durations)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub char_ids: Vec<usize>,
    pub spectrogram: Tensor,
    /// Ground-truth frames per symbol; never shown to the model.
    pub durations: Vec<usize>,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.spectrogram.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub n_bins: usize,
    pub vocab_size: usize,
}

pub const INDEX_FILE: &str = "index.tsv";
const INDEX_HEADER: &str = "id\ttext\tn_frames\tdurations";

impl Corpus {
    pub fn generate(spec: &SyntheticCorpusSpec) -> Result<Self> {
        spec.validate()?;
        let vocab = Vocabulary::new(spec.vocab_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut utterances = Vec::with_capacity(spec.n_utterances);
        for i in 0..spec.n_utterances {
            let len = rng.gen_range(spec.min_chars..=spec.max_chars);
            let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
            let (spectrogram, durations) = spec.render(&ids, &mut rng);
            utterances.push(Utterance {
                id: format!("utt_{i:04}"),
                text: vocab.decode(&ids),
                char_ids: ids,
                spectrogram,
                durations,
            });
        }
        Ok(Self {
            utterances,
            n_bins: spec.n_bins,
            vocab_size: spec.vocab_size,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn mean_frames(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.utterances.iter().map(|u| u.n_frames() as f64).sum::<f64>() / self.len() as f64
    }

    /// Writes `index.tsv` and one spectrogram file per utterance.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut index = String::from(INDEX_HEADER);
        index.push('\n');
        for u in &self.utterances {
            let durations: Vec<String> = u.durations.iter().map(|d| d.to_string()).collect();
            index.push_str(&format!("{}\t{}\t{}\t{}\n", u.id, u.text, u.n_frames(), durations.join(",")));
            write_spectrogram(&dir.join(format!("{}.vspg", u.id)), &u.spectrogram)?;
        }
        crate::io::write_atomic(&dir.join(INDEX_FILE), index.as_bytes())
    }

    pub fn load(dir: &Path, vocab: &Vocabulary) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&index_path)
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", index_path.display())))?;
        let mut lines = text.lines();
        if lines.next() != Some(INDEX_HEADER) {
            return Err(Error::Format(format!("{} has an unexpected header", index_path.display())));
        }
        let mut utterances = Vec::new();
        let mut n_bins = None;
        for (k, line) in lines.enumerate() {
            let bad = || Error::Format(format!("{}: malformed line {}", index_path.display(), k + 2));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad());
            }
            let n_frames: usize = cols[2].parse().map_err(|_| bad())?;
            let durations = if cols[3].is_empty() {
                Vec::new()
            } else {
                cols[3].split(',').map(|d| d.parse().map_err(|_| bad())).collect::<Result<Vec<usize>>>()?
            };
            let spectrogram = read_spectrogram(&dir.join(format!("{}.vspg", cols[0])))?;
            if spectrogram.shape()[0] != n_frames {
                return Err(Error::Format(format!(
                    "{}: index says {n_frames} frames, file holds {}",
                    cols[0],
                    spectrogram.shape()[0]
                )));
            }
            let bins = spectrogram.shape()[1];
            if *n_bins.get_or_insert(bins) != bins {
                return Err(Error::Format(format!("{}: inconsistent bin count {bins}", cols[0])));
            }
            utterances.push(Utterance {
                id: cols[0].to_string(),
                text: cols[1].to_string(),
                char_ids: vocab.encode(cols[1])?,
                spectrogram,
                durations,
            });
        }
        Ok(Self {
            utterances,
            n_bins: n_bins.unwrap_or(0),
            vocab_size: vocab.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticCorpusSpec {
        SyntheticCorpusSpec::from_settings(&CorpusSettings {
            n_utterances: 8,
            ..CorpusSettings::default()
        })
        .unwrap()
    }

    #[test]
    fn noiseless_single_symbol_repeats_profile() {
        let mut s = spec();
        s.duration_jitter = 0.0;
        s.noise_std = 0.0;
        s.templates[0].base_duration = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, d) = s.render(&[0], &mut rng);
        assert_eq!(d, vec![4]);
        assert_eq!(y.shape(), &[4, 16]);
        for i in 0..4 {
            assert_eq!(y.row(i), s.templates[0].profile.as_slice());
        }
    }

    #[test]
    fn generation_is_deterministic_and_bookkept() {
        let a = Corpus::generate(&spec()).unwrap();
        let b = Corpus::generate(&spec()).unwrap();
        assert_eq!(a, b);
        for u in &a.utterances {
            assert_eq!(u.n_frames(), u.durations.iter().sum::<usize>());
            assert_eq!(u.char_ids.len(), u.durations.len());
            assert!((5..=15).contains(&u.char_ids.len()));
        }
    }

    #[test]
    fn templates_are_distinct_and_long_enough() {
        let s = spec();
        assert!(s.templates.iter().all(|t| t.base_duration >= 2));
        let mut bad = s.clone();
        bad.templates[1].profile = bad.templates[0].profile.iter().map(|v| v * 3.0).collect();
        assert!(bad.validate().is_err());
        let mut short = s;
        short.templates[2].base_duration = 1;
        assert!(short.validate().is_err());
        let empty = CorpusSettings {
            vocab_size: 0,
            ..CorpusSettings::default()
        };
        assert!(SyntheticCorpusSpec::from_settings(&empty).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let c = Corpus::generate(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path(), &Vocabulary::new(12).unwrap()).unwrap();
        assert_eq!(back.len(), c.len());
        for (x, y) in back.utterances.iter().zip(&c.utterances) {
            assert_eq!(x.text, y.text);
            assert_eq!(x.durations, y.durations);
            assert!(x.spectrogram.max_abs_diff(&y.spectrogram) < 1e-6);
        }
    }
}
