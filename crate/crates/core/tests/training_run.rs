use srnn_core::audio::{make_windows, mulaw_encode, RangeMode, WindowConfig};
use srnn_core::conditioning::ConditioningFrame;
use srnn_core::model::{ModelConfig, SampleRnn, SpeakerMode};
use srnn_core::training::{train, SpeakerSource, TrainConfig, UtteranceWindows};

fn micro() -> ModelConfig {
    ModelConfig {
        hidden_size: 12,
        speaker_embedding_size: 4,
        global_features_size: 4,
        categorical_embedding_size: 2,
        code_embedding_size: 4,
        mlp_hidden: 12,
        categorical_vocab: vec![3],
        numeric_dim: 1,
        speaker_mode: SpeakerMode::OneHot {
            speakers: vec!["lo".into(), "hi".into()],
        },
        ..ModelConfig::default()
    }
}

fn utterance(speaker: &str, hz: f64, idx: usize) -> UtteranceWindows {
    let n = 1040 * 3;
    let samples: Vec<f64> = (0..n)
        .map(|i| 0.4 * (2.0 * std::f64::consts::PI * hz * (i + 97 * idx) as f64 / 16000.0).sin())
        .collect();
    let id = format!("{speaker}/{idx}");
    let (seq, _) = mulaw_encode(&samples, &id, RangeMode::Strict).unwrap();
    let frames: Vec<ConditioningFrame> = (0..n / 80)
        .map(|f| ConditioningFrame {
            categorical: vec![(f % 3) as u32],
            numeric: vec![(f as f64 / 10.0).sin()],
        })
        .collect();
    let (windows, _) = make_windows(&seq, &frames, speaker, &WindowConfig::default()).unwrap();
    UtteranceWindows {
        speaker_id: speaker.into(),
        utterance_id: id,
        windows,
    }
}

fn split(offset: usize, count: usize) -> Vec<UtteranceWindows> {
    (offset..offset + count)
        .flat_map(|i| [utterance("lo", 200.0, i), utterance("hi", 450.0, i)])
        .collect()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        learning_rate: 3e-3,
        epochs: 3,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn training_improves_on_the_initial_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = SampleRnn::new(micro(), 1).unwrap();
    let log = train(&mut model, &split(0, 3), &split(10, 1), &SpeakerSource::Table, &cfg(), Some(dir.path())).unwrap();
    assert_eq!(log.epochs.len(), 4);
    assert!(log.epochs[0].train_nll.is_none());
    assert!(log.best_val().unwrap() < log.epochs[0].val_nll, "{}", log.to_csv());
    let best = SampleRnn::load(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(best, model);
    assert!(dir.path().join("last.ckpt").exists());
}

#[test]
fn identical_seeds_give_identical_runs() {
    let run = || {
        let mut model = SampleRnn::new(micro(), 2).unwrap();
        let log = train(&mut model, &split(0, 2), &split(10, 1), &SpeakerSource::Table, &cfg(), None).unwrap();
        (log.to_csv(), model)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

#[test]
fn snapshots_follow_the_configured_period() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = SampleRnn::new(micro(), 3).unwrap();
    let c = TrainConfig {
        epochs: 2,
        snapshot_every: 1,
        ..cfg()
    };
    train(&mut model, &split(0, 1), &split(10, 1), &SpeakerSource::Table, &c, Some(dir.path())).unwrap();
    for e in 0..=2 {
        assert!(dir.path().join(format!("epoch_{e:03}.ckpt")).exists(), "epoch {e}");
    }
}
