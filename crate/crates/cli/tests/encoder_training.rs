use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srnn_cli::synth::{synthesize_utterance, Voice};
use srnn_core::datasets::Gender;
use srnn_core::embeddings::{train_encoder, EncoderTrainConfig, WorkerKind};

#[test]
fn mfcc_worker_loss_halves_on_ten_minutes_of_speech() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut clips = Vec::new();
    let mut total = 0.0;
    let mut k = 0;
    while total < 600.0 {
        let g = if k % 2 == 0 { Gender::Female } else { Gender::Male };
        let v = Voice::random(&format!("s{}", k % 6), g, &mut rng);
        let u = synthesize_utterance(&v, &format!("s/{k}"), 4.0, &mut rng);
        total += u.clip.duration_seconds();
        clips.push(u.clip);
        k += 1;
    }
    let cfg = EncoderTrainConfig {
        workers: vec![WorkerKind::Mfcc],
        ..EncoderTrainConfig::default()
    };
    let r = train_encoder(&clips, &cfg).unwrap();
    let (a, b) = (r.initial_loss[&WorkerKind::Mfcc], r.final_loss[&WorkerKind::Mfcc]);
    assert!(b <= 0.5 * a, "mfcc loss {a} -> {b}");
}
