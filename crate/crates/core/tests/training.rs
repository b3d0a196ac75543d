use agmask_core::dataio::synth::render_sample;
use agmask_core::dataio::SynthConfig;
use agmask_core::encoder::train::{train_pairs, TrainConfig, TrainPair};
use agmask_core::encoder::DualEncoder;

fn pairs(n: usize) -> Vec<TrainPair> {
    let synth = SynthConfig { count_per_concept: 1, ..SynthConfig::default() };
    synth
        .concepts()
        .iter()
        .take(n)
        .map(|c| {
            let s = render_sample(&synth, c, 0).unwrap();
            TrainPair { image: s.image, caption: c.caption() }
        })
        .collect()
}

fn captions(p: &[TrainPair]) -> Vec<&str> {
    p.iter().map(|p| p.caption.as_str()).collect()
}

#[test]
fn loss_decreases_over_two_epochs() {
    let p = pairs(8);
    let cfg = TrainConfig { batch_size: 4, epochs: 2, lr: 1e-2, seed: 1, ..TrainConfig::default() };
    let report = train_pairs(&p, captions(&p), &cfg).unwrap();
    assert_eq!(report.epoch_losses.len(), 3);
    assert!(report.epoch_losses[2] < report.epoch_losses[0], "{:?}", report.epoch_losses);
}

#[test]
fn training_is_deterministic() {
    let p = pairs(6);
    let cfg = TrainConfig { batch_size: 3, epochs: 2, seed: 9, distinct_captions: true, ..TrainConfig::default() };
    let a = train_pairs(&p, captions(&p), &cfg).unwrap();
    let b = train_pairs(&p, captions(&p), &cfg).unwrap();
    assert_eq!(a.encoder, b.encoder);
    assert_eq!(a.epoch_losses, b.epoch_losses);
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let p = pairs(4);
    let cfg = TrainConfig { epochs: 0, seed: 3, ..TrainConfig::default() };
    let report = train_pairs(&p, captions(&p), &cfg).unwrap();
    let vocab = DualEncoder::vocab_from_captions(captions(&p));
    assert_eq!(report.encoder, DualEncoder::init(cfg.encoder, &vocab, 3).unwrap());
    assert_eq!(report.epoch_losses.len(), 1);
}

#[test]
fn checkpoint_round_trip() {
    let p = pairs(4);
    let cfg = TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::default() };
    let report = train_pairs(&p, captions(&p), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.agmw");
    report.encoder.save(&path).unwrap();
    assert_eq!(DualEncoder::load(&path).unwrap(), report.encoder);
}

#[test]
fn empty_training_set_is_rejected() {
    assert!(train_pairs(&[], Vec::<&str>::new(), &TrainConfig::default()).is_err());
}
