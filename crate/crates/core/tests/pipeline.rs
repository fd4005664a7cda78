use vaenar_core::config::{Preset, RunConfig};
use vaenar_core::model::{NoiseMode, Vaenar};
use vaenar_core::nn::{Ctx, ParamStore};
use vaenar_core::train::{self, Checkpoint, Corpus, RunDir, SyntheticCorpusSpec, Trainer};
use vaenar_core::vocab::Vocabulary;

#[test]
fn corpus_train_checkpoint_synthesize() {
    let text = "preset = tiny\ntrain.epochs = 3\n";
    let cfg = RunConfig::parse(text).unwrap();
    assert_eq!(cfg.corpus, RunConfig::preset(Preset::Tiny).corpus);

    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = dir.path().join("corpus");
    Corpus::generate(&SyntheticCorpusSpec::from_settings(&cfg.corpus).unwrap())
        .unwrap()
        .save(&corpus_dir)
        .unwrap();
    let corpus = Corpus::load(&corpus_dir, &Vocabulary::new(cfg.corpus.vocab_size).unwrap()).unwrap();
    assert_eq!(corpus.len(), cfg.corpus.n_utterances);

    let run = RunDir::new(dir.path().join("run")).unwrap();
    let mut trainer = Trainer::new(cfg.train.clone(), corpus).unwrap();
    let rows = train::train(&mut trainer, &run, text, |_| {}).unwrap();
    assert_eq!(rows.len(), 3);
    let log = std::fs::read_to_string(run.metrics()).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert_eq!(std::fs::read_to_string(run.config_echo()).unwrap(), text);

    let ckpt = Checkpoint::load(&run.checkpoint()).unwrap();
    assert_eq!(ckpt.next_epoch, 3);
    assert_eq!(ckpt.config_text, text);
    assert!(run.best().exists());

    let mut scratch = ParamStore::new();
    let model = Vaenar::new(RunConfig::parse(&ckpt.config_text).unwrap().train.model, &mut scratch).unwrap();
    let ids = Vocabulary::new(6).unwrap().encode("abcd").unwrap();
    let synth = |bias| {
        let ctx = Ctx::eval(&ckpt.store);
        model.synthesize(&ctx, &ids, 1, bias, NoiseMode::Zeros).unwrap()
    };
    let (a, b) = (synth(0), synth(0));
    assert_eq!(a.spectrogram, b.spectrogram);
    assert_eq!(synth(7).frames, a.frames + 7);
}
