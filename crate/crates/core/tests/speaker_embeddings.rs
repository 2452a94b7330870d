use std::collections::BTreeMap;

use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use srnn_core::audio::WaveformClip;
use srnn_core::embeddings::{
    average_embedding, average_pooled, embed_seed, sample_seed, ConvEncoder, ConvEncoderConfig, EncoderFrames,
    Provenance, SpeechEncoder, FRAME_DIM, FRAME_HOP,
};
use srnn_core::Result;

fn prov() -> Provenance {
    Provenance::EncoderAveraged {
        seed_id: "s".into(),
        seconds: 1.0,
    }
}

fn frames(rows: Vec<Vec<f64>>) -> EncoderFrames {
    let n = rows.len();
    EncoderFrames {
        frames: Array2::from_shape_vec((n, FRAME_DIM), rows.into_iter().flatten().collect()).unwrap(),
        source: "u".into(),
    }
}

fn rows(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, FRAME_DIM), 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constant_frames_average_to_themselves(v in prop::collection::vec(-10.0f64..10.0, FRAME_DIM), n in 1usize..40) {
        let e = average_embedding(&frames(vec![v.clone(); n]), "a", prov()).unwrap();
        for (x, y) in e.vector.iter().zip(&v) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn frame_order_does_not_matter(r in rows(30), seed in any::<u64>()) {
        let mut shuffled = r.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let a = average_embedding(&frames(r), "a", prov()).unwrap();
        let b = average_embedding(&frames(shuffled), "a", prov()).unwrap();
        for (x, y) in a.vector.iter().zip(&b.vector) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn concatenation_is_a_weighted_mean(a in rows(30), b in rows(30)) {
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let ea = average_embedding(&frames(a.clone()), "a", prov()).unwrap();
        let eb = average_embedding(&frames(b.clone()), "a", prov()).unwrap();
        let joined = average_embedding(&frames([a.clone(), b.clone()].concat()), "a", prov()).unwrap();
        let pooled = average_pooled(&[frames(a), frames(b)], "a", prov()).unwrap();
        for d in 0..FRAME_DIM {
            let expect = (na * ea.vector[d] + nb * eb.vector[d]) / (na + nb);
            prop_assert!((joined.vector[d] - expect).abs() <= 1e-9);
            prop_assert!((pooled.vector[d] - expect).abs() <= 1e-9);
        }
    }
}

/// Frozen encoder whose whole-clip frames are computed once and sliced per segment.
struct Memoized {
    frames: BTreeMap<String, Array2<f64>>,
}

impl Memoized {
    fn new(inner: &dyn SpeechEncoder, pool: &[WaveformClip]) -> Self {
        let frames = pool
            .iter()
            .map(|c| (c.utterance_id.clone(), inner.encode(c).unwrap().frames))
            .collect();
        Self { frames }
    }

    fn all(&self) -> Vec<EncoderFrames> {
        self.frames
            .values()
            .map(|f| EncoderFrames {
                frames: f.clone(),
                source: String::new(),
            })
            .collect()
    }
}

impl SpeechEncoder for Memoized {
    fn name(&self) -> &str {
        "memoized"
    }

    fn encode(&self, clip: &WaveformClip) -> Result<EncoderFrames> {
        self.encode_segment(clip, 0, clip.samples.len())
    }

    fn encode_segment(&self, clip: &WaveformClip, start: usize, len: usize) -> Result<EncoderFrames> {
        let f = &self.frames[&clip.utterance_id];
        let lo = (start / FRAME_HOP).min(f.nrows());
        let hi = (lo + len / FRAME_HOP).min(f.nrows());
        Ok(EncoderFrames {
            frames: f.slice(s![lo..hi, ..]).to_owned(),
            source: clip.utterance_id.clone(),
        })
    }
}

/// Second-order resonance driven by white noise: stationary, with a fixed spectral envelope.
fn stationary_pool(clips: usize, seconds: usize, seed: u64) -> Vec<WaveformClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.05).unwrap();
    let (r, w) = (0.95f64, 2.0 * std::f64::consts::PI * 700.0 / 16000.0);
    let (a1, a2) = (2.0 * r * w.cos(), -r * r);
    (0..clips)
        .map(|i| {
            let (mut y1, mut y2) = (0.0, 0.0);
            let samples = (0..seconds * 16000)
                .map(|_| {
                    let y = normal.sample(&mut rng) + a1 * y1 + a2 * y2;
                    y2 = y1;
                    y1 = y;
                    (0.1 * y).clamp(-1.0, 1.0)
                })
                .collect();
            WaveformClip::new(samples, "src", format!("src_{i}"))
        })
        .collect()
}

#[test]
fn longer_seeds_land_closer_to_the_population_embedding() {
    let pool = stationary_pool(10, 30, 1);
    let conv = ConvEncoder::new(&ConvEncoderConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let enc = Memoized::new(&conv, &pool);
    let target = average_pooled(&enc.all(), "src", prov()).unwrap().vector;
    let lengths = [1.0, 10.0, 60.0, 120.0];
    let mut violations = 0;
    for trial in 0..100u64 {
        let dist: Vec<f64> = lengths
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let seed = sample_seed(&pool, t, trial * 16 + i as u64).unwrap();
                let e = embed_seed(&seed, &pool, &enc).unwrap().vector;
                e.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        if dist.windows(2).any(|p| p[1] > p[0]) {
            violations += 1;
        }
    }
    assert!(violations < 10, "ordering violated in {violations} of 100 trials");
}
