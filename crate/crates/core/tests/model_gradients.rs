use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srnn_core::audio::{mulaw_encode_sample, TrainingWindow};
use srnn_core::conditioning::ConditioningFrame;
use srnn_core::model::{ModelConfig, SampleRnn, SpeakerMode, SpeakerRef};
use srnn_core::nn::Parameters;

fn micro() -> ModelConfig {
    ModelConfig {
        hidden_size: 8,
        speaker_embedding_size: 6,
        global_features_size: 5,
        categorical_embedding_size: 3,
        code_embedding_size: 4,
        mlp_hidden: 8,
        categorical_vocab: vec![5, 4],
        numeric_dim: 3,
        speaker_mode: SpeakerMode::OneHot {
            speakers: vec!["a".into(), "b".into()],
        },
        ..ModelConfig::default()
    }
}

fn window(cfg: &ModelConfig, seed: u64) -> TrainingWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.window_len() + cfg.frame_size;
    let codes: Vec<u8> = (0..n)
        .map(|i| mulaw_encode_sample(0.5 * (i as f64 * 0.05).sin() + rng.random_range(-0.1..0.1)))
        .collect();
    TrainingWindow {
        context: codes[..cfg.frame_size].to_vec(),
        input_codes: codes[cfg.frame_size - 1..n - 1].to_vec(),
        target_codes: codes[cfg.frame_size..].to_vec(),
        conditioning: (0..cfg.seq_len)
            .map(|_| ConditioningFrame {
                categorical: cfg.categorical_vocab.iter().map(|&v| rng.random_range(0..v as u32)).collect(),
                numeric: (0..cfg.numeric_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect(),
        speaker_id: "b".into(),
        utterance_id: "u".into(),
        index: 0,
    }
}

fn perturb(model: &SampleRnn, flat_index: usize, delta: f64) -> SampleRnn {
    let mut m = model.clone();
    let mut k = 0;
    m.visit_mut("", &mut |_, v| {
        if flat_index >= k && flat_index < k + v.len() {
            v[flat_index - k] += delta;
        }
        k += v.len();
    });
    m
}

#[test]
fn analytic_gradients_match_central_differences() {
    let cfg = micro();
    let model = SampleRnn::new(cfg.clone(), 11).unwrap();
    let w = window(&cfg, 3);
    let spk = SpeakerRef::Index(1);
    let mut grad = model.zeros_like();
    model.accumulate_gradient(&w, spk, None, &mut grad, 1.0).unwrap();
    let analytic = grad.flatten();

    let mut groups = Vec::new();
    let mut off = 0;
    model.visit("", &mut |name, v| {
        groups.push((name.to_string(), off, v.len()));
        off += v.len();
    });
    let loss = |m: &SampleRnn| m.forward_training(&w, spk, None).unwrap().mean_nll;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = 1e-5;
    for (name, start, len) in groups {
        let mut idx: Vec<usize> = (start..start + len).collect();
        idx.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
        let mut probe: Vec<usize> = idx.iter().take(6).copied().collect();
        probe.extend((0..6).map(|_| rng.random_range(start..start + len)));
        let (mut diff, mut norm_a, mut norm_n) = (0.0f64, 0.0f64, 0.0f64);
        for i in probe {
            let num = (loss(&perturb(&model, i, h)) - loss(&perturb(&model, i, -h))) / (2.0 * h);
            diff += (analytic[i] - num).powi(2);
            norm_a += analytic[i].powi(2);
            norm_n += num.powi(2);
        }
        let rel = diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-12);
        assert!(norm_a > 0.0, "{name} has zero gradient");
        assert!(rel < 1e-4, "{name}: relative error {rel:e}");
    }
}

#[test]
fn carried_state_cuts_initial_state_gradient() {
    let cfg = micro();
    let model = SampleRnn::new(cfg.clone(), 12).unwrap();
    let w = window(&cfg, 4);
    let first = model.forward_training(&w, SpeakerRef::Index(0), None).unwrap();
    let mut grad = model.zeros_like();
    model
        .accumulate_gradient(&w, SpeakerRef::Index(0), Some(&first.state), &mut grad, 1.0)
        .unwrap();
    assert!(grad.top_h0.iter().all(|&v| v == 0.0));
    assert!(grad.mid_h0.iter().all(|&v| v == 0.0));
    let mut grad = model.zeros_like();
    model.accumulate_gradient(&w, SpeakerRef::Index(0), None, &mut grad, 1.0).unwrap();
    assert!(grad.top_h0.iter().any(|&v| v != 0.0));
    assert!(grad.mid_h0.iter().any(|&v| v != 0.0));
}

#[test]
fn predictions_ignore_current_and_future_codes() {
    let cfg = micro();
    let model = SampleRnn::new(cfg.clone(), 13).unwrap();
    let w = window(&cfg, 5);
    let base = model.teacher_forced_log_probs(&w, SpeakerRef::Index(0), None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let n = rng.random_range(0..cfg.window_len());
        let mut p = w.clone();
        for t in n..cfg.window_len() {
            p.target_codes[t] = rng.random();
        }
        let lp = model.teacher_forced_log_probs(&p, SpeakerRef::Index(0), None).unwrap();
        for t in 0..=n {
            assert_eq!(lp.row(t), base.row(t), "position {t} moved after perturbing {n}..");
        }
        if n + 1 < cfg.window_len() {
            let later: Array1<f64> = &lp.row(cfg.window_len() - 1) - &base.row(cfg.window_len() - 1);
            assert!(later.iter().any(|v| *v != 0.0));
        }
    }
}
