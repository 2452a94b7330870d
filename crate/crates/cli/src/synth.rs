//! Synthetic multi-speaker corpus: formant-synthesized babble with aligned full-context labels.
//!
//! Each speaker has its own pitch range, vocal-tract scale, spectral tilt and breathiness, so
//! speaker identity is audible in the waveform and recoverable by an encoder.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use srnn_core::audio::{write_waveform, WaveformClip, SAMPLE_RATE};
use srnn_core::datasets::Gender;
use srnn_core::{Error, Result};

/// Label time units per sample at 16 kHz.
const HTK_PER_SAMPLE: u64 = 625;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Manner {
    Vowel,
    Nasal,
    Approximant,
    Fricative { voiced: bool },
    Stop { voiced: bool },
    Silence,
}

#[derive(Debug, Clone, Copy)]
struct Phone {
    name: &'static str,
    manner: Manner,
    formants: [f64; 3],
    /// Centre and bandwidth of the frication or burst noise.
    noise: (f64, f64),
}

const fn phone(name: &'static str, manner: Manner, formants: [f64; 3], noise: (f64, f64)) -> Phone {
    Phone {
        name,
        manner,
        formants,
        noise,
    }
}

const VOWELS: &[Phone] = &[
    phone("aa", Manner::Vowel, [730.0, 1090.0, 2440.0], (0.0, 0.0)),
    phone("ae", Manner::Vowel, [660.0, 1720.0, 2410.0], (0.0, 0.0)),
    phone("ah", Manner::Vowel, [520.0, 1190.0, 2390.0], (0.0, 0.0)),
    phone("eh", Manner::Vowel, [530.0, 1840.0, 2480.0], (0.0, 0.0)),
    phone("ih", Manner::Vowel, [390.0, 1990.0, 2550.0], (0.0, 0.0)),
    phone("iy", Manner::Vowel, [270.0, 2290.0, 3010.0], (0.0, 0.0)),
    phone("uw", Manner::Vowel, [300.0, 870.0, 2240.0], (0.0, 0.0)),
    phone("ow", Manner::Vowel, [570.0, 840.0, 2410.0], (0.0, 0.0)),
    phone("er", Manner::Vowel, [490.0, 1350.0, 1690.0], (0.0, 0.0)),
];

const CONSONANTS: &[Phone] = &[
    phone("m", Manner::Nasal, [280.0, 1000.0, 2200.0], (0.0, 0.0)),
    phone("n", Manner::Nasal, [280.0, 1700.0, 2600.0], (0.0, 0.0)),
    phone("l", Manner::Approximant, [360.0, 1300.0, 2700.0], (0.0, 0.0)),
    phone("r", Manner::Approximant, [310.0, 1060.0, 1380.0], (0.0, 0.0)),
    phone("w", Manner::Approximant, [300.0, 610.0, 2200.0], (0.0, 0.0)),
    phone("y", Manner::Approximant, [260.0, 2070.0, 3020.0], (0.0, 0.0)),
    phone("s", Manner::Fricative { voiced: false }, [320.0, 1800.0, 2600.0], (5500.0, 1800.0)),
    phone("sh", Manner::Fricative { voiced: false }, [320.0, 1900.0, 2500.0], (3000.0, 1200.0)),
    phone("f", Manner::Fricative { voiced: false }, [320.0, 1400.0, 2500.0], (4500.0, 3000.0)),
    phone("z", Manner::Fricative { voiced: true }, [320.0, 1800.0, 2600.0], (5500.0, 1800.0)),
    phone("v", Manner::Fricative { voiced: true }, [320.0, 1400.0, 2500.0], (4500.0, 3000.0)),
    phone("p", Manner::Stop { voiced: false }, [400.0, 1100.0, 2400.0], (1500.0, 1500.0)),
    phone("t", Manner::Stop { voiced: false }, [400.0, 1800.0, 2600.0], (4000.0, 2000.0)),
    phone("k", Manner::Stop { voiced: false }, [400.0, 2000.0, 2500.0], (2500.0, 1000.0)),
    phone("b", Manner::Stop { voiced: true }, [400.0, 1100.0, 2400.0], (1500.0, 1500.0)),
    phone("d", Manner::Stop { voiced: true }, [400.0, 1800.0, 2600.0], (4000.0, 2000.0)),
    phone("g", Manner::Stop { voiced: true }, [400.0, 2000.0, 2500.0], (2500.0, 1000.0)),
];

const SIL: Phone = phone("sil", Manner::Silence, [500.0, 1500.0, 2500.0], (0.0, 0.0));
const PAU: Phone = phone("pau", Manner::Silence, [500.0, 1500.0, 2500.0], (0.0, 0.0));

/// Acoustic identity of a synthetic speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct Voice {
    pub speaker_id: String,
    pub gender: Gender,
    pub f0_hz: f64,
    /// Multiplies every formant frequency (shorter vocal tracts give larger values).
    pub formant_scale: f64,
    /// One-pole low-pass coefficient applied to the glottal source.
    pub tilt: f64,
    /// Aspiration noise level relative to voicing.
    pub breathiness: f64,
    /// Multiplies every phone duration.
    pub tempo: f64,
}

impl Voice {
    /// Draws a voice; speaker ids and genders decide the pitch and tract-length ranges.
    pub fn random(speaker_id: &str, gender: Gender, rng: &mut impl Rng) -> Self {
        let (f0, scale) = match gender {
            Gender::Female => (rng.random_range(180.0..250.0), rng.random_range(1.10..1.25)),
            Gender::Male => (rng.random_range(95.0..140.0), rng.random_range(0.92..1.05)),
        };
        Self {
            speaker_id: speaker_id.to_string(),
            gender,
            f0_hz: f0,
            formant_scale: scale,
            tilt: rng.random_range(0.1..0.6),
            breathiness: rng.random_range(0.01..0.08),
            tempo: rng.random_range(0.85..1.15),
        }
    }
}

#[derive(Debug, Clone)]
struct Segment {
    phone: Phone,
    start: usize,
    end: usize,
    /// (position in syllable, syllable length, syllable index in word, syllables in word,
    /// word index, words in utterance); `None` for silences.
    context: Option<[usize; 6]>,
}

/// A synthesized utterance with its label file contents.
#[derive(Debug, Clone)]
pub struct SyntheticUtterance {
    pub clip: WaveformClip,
    pub labels: String,
}

fn seconds(s: f64) -> usize {
    (s * SAMPLE_RATE as f64).round() as usize
}

fn plan_segments(voice: &Voice, target_speech: f64, rng: &mut impl Rng) -> Vec<Segment> {
    let mut words: Vec<Vec<Vec<Phone>>> = Vec::new();
    let mut planned = 0.0;
    while planned < target_speech {
        let n_syl = rng.random_range(1..=3);
        let word: Vec<Vec<Phone>> = (0..n_syl)
            .map(|_| {
                let mut syl = Vec::new();
                if rng.random_bool(0.85) {
                    syl.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())]);
                }
                syl.push(VOWELS[rng.random_range(0..VOWELS.len())]);
                if rng.random_bool(0.35) {
                    syl.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())]);
                }
                syl
            })
            .collect();
        planned += word.iter().map(|s| s.len()).sum::<usize>() as f64 * 0.1 * voice.tempo;
        words.push(word);
    }
    let n_words = words.len();
    let mut segs = Vec::new();
    let mut t = 0usize;
    let mut push = |phone: Phone, len: usize, context: Option<[usize; 6]>, t: &mut usize| {
        segs.push(Segment {
            phone,
            start: *t,
            end: *t + len,
            context,
        });
        *t += len;
    };
    push(SIL, seconds(rng.random_range(0.25..0.45)), None, &mut t);
    for (wi, word) in words.iter().enumerate() {
        if wi > 0 && rng.random_bool(0.2) {
            push(PAU, seconds(rng.random_range(0.12..0.25)), None, &mut t);
        }
        for (si, syl) in word.iter().enumerate() {
            for (pi, &ph) in syl.iter().enumerate() {
                let base = match ph.manner {
                    Manner::Vowel => rng.random_range(0.08..0.16),
                    Manner::Stop { .. } => rng.random_range(0.06..0.09),
                    _ => rng.random_range(0.05..0.10),
                };
                let ctx = [pi + 1, syl.len(), si + 1, word.len(), wi + 1, n_words];
                push(ph, seconds(base * voice.tempo), Some(ctx), &mut t);
            }
        }
    }
    push(SIL, seconds(rng.random_range(0.25..0.45)), None, &mut t);
    segs
}

/// Full-context label in the HTS layout read by the default feature schema.
fn full_context(segs: &[Segment], i: usize) -> String {
    let name = |j: isize| -> &str {
        if j < 0 || j as usize >= segs.len() {
            "x"
        } else {
            segs[j as usize].phone.name
        }
    };
    let i_ = i as isize;
    let mut s = format!(
        "{}^{}-{}+{}={}",
        name(i_ - 2),
        name(i_ - 1),
        name(i_),
        name(i_ + 1),
        name(i_ + 2)
    );
    let total_syl: usize = segs
        .iter()
        .filter_map(|g| g.context)
        .filter(|c| c[0] == 1)
        .count();
    let n_words = segs.iter().find_map(|g| g.context).map_or(0, |c| c[5]);
    match segs[i].context {
        None => {
            let _ = write!(
                s,
                "@x_x/A:0_0_0/B:x-x-x@x-x&x-x#x-x$x-x!x-x;x-x|x/C:0+0+0/D:0_0/E:x+x@x+x&x+x#x+x/F:0_0/G:0_0/H:x=x@1=1|0/I:0_0/J:{total_syl}+{n_words}-1"
            );
        }
        Some([pi, pl, si, sl, wi, wl]) => {
            let stressed = u8::from(si == 1);
            let vowel = segs[i].phone.name;
            let _ = write!(
                s,
                "@{pi}_{}/A:0_0_0/B:{stressed}-0-{pl}@{si}-{}&{si}-{}#1-1${wi}-{}!0-1;0-1|{vowel}/C:1+0+2/D:0_0/E:content+{sl}@{wi}+{}&{wi}+{}#0+1/F:content_1/G:0_0/H:{total_syl}={n_words}@1=1|L-L%/I:0_0/J:{total_syl}+{n_words}-1",
                pl + 1 - pi,
                sl + 1 - si,
                total_syl,
                wl + 1 - wi,
                wl + 1 - wi,
                wl - wi,
            );
        }
    }
    s
}

/// Two-pole resonator in the Klatt formulation, unity gain at DC.
#[derive(Default, Clone, Copy)]
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tune(&mut self, freq: f64, bw: f64) {
        let t = 1.0 / SAMPLE_RATE as f64;
        let freq = freq.min(0.45 * SAMPLE_RATE as f64);
        self.c = -(-2.0 * PI * bw * t).exp();
        self.b = 2.0 * (-PI * bw * t).exp() * (2.0 * PI * freq * t).cos();
        self.a = 1.0 - self.b - self.c;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Per-sample control targets `[f1, f2, f3, voicing, noise, noise_fc, noise_bw]`.
fn targets(seg: &Segment, voice: &Voice, pos: usize) -> [f64; 7] {
    let p = seg.phone;
    let f = p.formants.map(|v| v * voice.formant_scale);
    let len = seg.end - seg.start;
    let (voicing, noise) = match p.manner {
        Manner::Vowel => (1.0, 0.0),
        Manner::Nasal => (0.45, 0.0),
        Manner::Approximant => (0.7, 0.0),
        Manner::Fricative { voiced } => (if voiced { 0.35 } else { 0.0 }, 0.35),
        Manner::Stop { voiced } => {
            if pos < len * 2 / 3 {
                (if voiced { 0.08 } else { 0.0 }, 0.0)
            } else {
                (if voiced { 0.3 } else { 0.0 }, 0.5)
            }
        }
        Manner::Silence => (0.0, 0.0),
    };
    [f[0], f[1], f[2], voicing, noise, p.noise.0, p.noise.1]
}

fn glottal_pulse(phase: f64) -> f64 {
    if phase < 0.6 {
        0.5 * (1.0 - (PI * phase / 0.6).cos())
    } else if phase < 0.8 {
        (0.5 * PI * (phase - 0.6) / 0.2).cos()
    } else {
        0.0
    }
}

/// Renders one utterance of roughly `speech_seconds` of speech framed by silence.
pub fn synthesize_utterance(
    voice: &Voice,
    utterance_id: &str,
    speech_seconds: f64,
    rng: &mut impl Rng,
) -> SyntheticUtterance {
    let segs = plan_segments(voice, speech_seconds, rng);
    let n = segs.last().map_or(0, |s| s.end);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let declination = rng.random_range(0.05..0.15);
    let vibrato_rate = rng.random_range(2.0..4.0);
    let vibrato_phase = rng.random_range(0.0..2.0 * PI);
    let accents: Vec<f64> = segs.iter().map(|_| rng.random_range(-0.05..0.08)).collect();

    let mut formants = [Resonator::default(); 4];
    let mut fric = Resonator::default();
    let mut state = targets(&segs[0], voice, 0);
    let mut pitch = voice.f0_hz;
    let mut phase = 0.0;
    let (mut prev_pulse, mut tilted) = (0.0, 0.0);
    let mut out = Vec::with_capacity(n);
    let alpha_formant = 1.0 - (-1.0 / (0.008 * SAMPLE_RATE as f64)).exp();
    let alpha_amp = 1.0 - (-1.0 / (0.004 * SAMPLE_RATE as f64)).exp();
    let mut seg_idx = 0;
    for t in 0..n {
        while segs[seg_idx].end <= t {
            seg_idx += 1;
        }
        let seg = &segs[seg_idx];
        let target = targets(seg, voice, t - seg.start);
        for k in 0..7 {
            let a = if k == 3 || k == 4 { alpha_amp } else { alpha_formant };
            state[k] += a * (target[k] - state[k]);
        }
        let progress = t as f64 / n as f64;
        let f0_target = voice.f0_hz
            * (1.0 + declination * (0.5 - progress))
            * (1.0 + 0.03 * (2.0 * PI * vibrato_rate * t as f64 / SAMPLE_RATE as f64 + vibrato_phase).sin())
            * (1.0 + accents[seg_idx]);
        pitch += 0.002 * (f0_target - pitch);
        if t % 8 == 0 {
            for (k, r) in formants.iter_mut().enumerate() {
                let (f, bw) = if k < 3 {
                    (state[k], 60.0 + 0.05 * state[k])
                } else {
                    (3500.0 * voice.formant_scale, 250.0)
                };
                r.tune(f, bw);
            }
            fric.tune(state[5].max(100.0), state[6].max(100.0));
        }
        phase += pitch / SAMPLE_RATE as f64;
        if phase >= 1.0 {
            phase -= 1.0;
        }
        let pulse = glottal_pulse(phase);
        let source = pulse - prev_pulse;
        prev_pulse = pulse;
        tilted = (1.0 - voice.tilt) * source + voice.tilt * tilted;
        let aspiration = voice.breathiness * gauss.sample(rng);
        let mut v = (tilted * 40.0 + aspiration) * state[3];
        for r in formants.iter_mut() {
            v = r.step(v);
        }
        let noise = fric.step(gauss.sample(rng)) * state[4] * 3.0;
        out.push(v + noise);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    for v in &mut out {
        *v = 0.5 * *v / peak + 3e-4 * gauss.sample(rng);
    }

    let mut labels = String::new();
    for (i, s) in segs.iter().enumerate() {
        let _ = writeln!(
            labels,
            "{} {} {}",
            s.start as u64 * HTK_PER_SAMPLE,
            s.end as u64 * HTK_PER_SAMPLE,
            full_context(&segs, i)
        );
    }
    SyntheticUtterance {
        clip: WaveformClip::new(out, voice.speaker_id.clone(), utterance_id),
        labels,
    }
}

/// One speaker to generate and how much speech they get.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerRequest {
    pub speaker_id: String,
    pub gender: Gender,
    pub seconds: f64,
}

/// Alternating female/male speakers `f01, m01, f02, ...`: `n_large` with `large_seconds` each
/// followed by `n_small` with `small_seconds`.
pub fn speaker_requests(n_large: usize, large_seconds: f64, n_small: usize, small_seconds: f64) -> Vec<SpeakerRequest> {
    (0..n_large + n_small)
        .map(|i| {
            let gender = if i % 2 == 0 { Gender::Female } else { Gender::Male };
            SpeakerRequest {
                speaker_id: format!("{}{:02}", gender.tag().to_lowercase(), i / 2 + 1),
                gender,
                seconds: if i < n_large { large_seconds } else { small_seconds },
            }
        })
        .collect()
}

/// Writes `<root>/speakers.tsv` and `<root>/<speaker>/<utt>.{wav,lab}`. Returns the voices.
pub fn generate_corpus(root: &Path, speakers: &[SpeakerRequest], seed: u64) -> Result<Vec<Voice>> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut tsv = String::from("# speaker\tgender\n");
    let mut voices = Vec::new();
    for (si, req) in speakers.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(si as u64));
        let voice = Voice::random(&req.speaker_id, req.gender, &mut rng);
        let dir = root.join(&req.speaker_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut total = 0.0;
        let mut k = 0;
        while total < req.seconds {
            let speech = rng.random_range(2.0..4.5f64).min(req.seconds - total + 0.5);
            let stem = format!("{}_{:04}", req.speaker_id, k + 1);
            let utt = synthesize_utterance(&voice, &format!("{}/{stem}", req.speaker_id), speech, &mut rng);
            write_waveform(&dir.join(format!("{stem}.wav")), &utt.clip)?;
            let lab = dir.join(format!("{stem}.lab"));
            std::fs::write(&lab, &utt.labels).map_err(|e| Error::io(&lab, e))?;
            total += utt.clip.duration_seconds();
            k += 1;
        }
        let _ = writeln!(tsv, "{}\t{}", req.speaker_id, req.gender.tag());
        voices.push(voice);
    }
    let p = root.join("speakers.tsv");
    std::fs::write(&p, tsv).map_err(|e| Error::io(&p, e))?;
    Ok(voices)
}
