//! Objective distortion between natural and synthesized speech, and the seed-length
//! adaptation curve.

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{mulaw_decode, WaveformClip, SAMPLE_RATE};
use crate::conditioning::{extract_f0_uv, ConditioningFrame, F0Config, ProsodyTrack};
use crate::dsp::MelCepstrum;
use crate::embeddings::{embed_seed, sample_seed, SpeechEncoder};
use crate::error::{Error, Result};
use crate::model::{SampleRnn, Sampling, SpeakerRef};

/// Cepstral order, excluding `c0`.
pub const CEPSTRAL_ORDER: usize = 24;
pub const CEPSTRAL_WINDOW: usize = 400;
pub const CEPSTRAL_HOP: usize = 80;
const CEPSTRAL_MELS: usize = 40;
/// Largest frame-count difference that is truncated rather than rejected.
pub const FRAME_TOLERANCE: usize = 2;

/// `frames × (order + 1)` mel cepstra; column 0 is `c0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CepstraTrack {
    pub coeffs: Array2<f64>,
}

impl CepstraTrack {
    pub fn len(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.nrows() == 0
    }
}

/// Mel cepstra with a 25 ms window every 5 ms, one frame per 80-sample conditioning interval.
///
/// Coefficients are cosine-series terms of the mel-warped log amplitude spectrum,
/// `c_d = mean_k L_k cos(π d (k + ½) / K)`, with `c0` the mean log amplitude.
pub fn extract_cepstra(clip: &WaveformClip) -> Result<CepstraTrack> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::Config(format!(
            "{}: cepstra need {SAMPLE_RATE} Hz audio, got {}",
            clip.utterance_id, clip.sample_rate
        )));
    }
    if clip.samples.len() < CEPSTRAL_WINDOW {
        return Err(Error::Insufficient(format!(
            "{}: {} samples, shorter than one {CEPSTRAL_WINDOW}-sample analysis window",
            clip.utterance_id,
            clip.samples.len()
        )));
    }
    let cep = MelCepstrum::new(CEPSTRAL_WINDOW, CEPSTRAL_MELS, CEPSTRAL_ORDER + 1, SAMPLE_RATE as f64);
    let n = clip.samples.len().div_ceil(CEPSTRAL_HOP);
    let mut coeffs = Array2::zeros((n, CEPSTRAL_ORDER + 1));
    let k = CEPSTRAL_MELS as f64;
    for m in 0..n {
        let c = cep.cepstrum(&clip.samples, m * CEPSTRAL_HOP + CEPSTRAL_HOP / 2);
        for (d, v) in c.into_iter().enumerate() {
            coeffs[[m, d]] = if d == 0 { v / k.sqrt() } else { v / (2.0 * k).sqrt() };
        }
    }
    Ok(CepstraTrack { coeffs })
}

fn aligned_len(what: &str, a: usize, b: usize) -> Result<usize> {
    if a.abs_diff(b) > FRAME_TOLERANCE {
        return Err(Error::Alignment(format!(
            "{what}: {a} reference frames vs {b} synthesized frames"
        )));
    }
    Ok(a.min(b))
}

/// Mean mel-cepstral distortion in dB over frames, `c0` excluded.
pub fn mcd(reference: &CepstraTrack, synthesized: &CepstraTrack) -> Result<f64> {
    let n = aligned_len("mcd", reference.len(), synthesized.len())?;
    if n == 0 {
        return Err(Error::Insufficient("mcd of empty tracks".into()));
    }
    if reference.coeffs.ncols() != synthesized.coeffs.ncols() {
        return Err(Error::Dimension {
            what: "cepstral order",
            expected: reference.coeffs.ncols(),
            got: synthesized.coeffs.ncols(),
        });
    }
    let k = 10.0 / std::f64::consts::LN_10;
    let mut total = 0.0;
    for t in 0..n {
        let r = reference.coeffs.row(t);
        let s = synthesized.coeffs.row(t);
        let sq: f64 = (1..r.len()).map(|d| (r[d] - s[d]).powi(2)).sum();
        total += k * (2.0 * sq).sqrt();
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum F0Rmse {
    Defined { hz: f64, frames: usize },
    /// No frame is voiced in both tracks.
    Undefined,
}

impl F0Rmse {
    pub fn hz(&self) -> Option<f64> {
        match self {
            F0Rmse::Defined { hz, .. } => Some(*hz),
            F0Rmse::Undefined => None,
        }
    }
}

/// RMSE in Hz over frames voiced in both tracks.
pub fn rmse_f0(reference: &ProsodyTrack, synthesized: &ProsodyTrack) -> Result<F0Rmse> {
    let n = aligned_len("rmse_f0", reference.len(), synthesized.len())?;
    let (mut sq, mut count) = (0.0, 0usize);
    for t in 0..n {
        if reference.uv[t] == 1 && synthesized.uv[t] == 1 {
            sq += (reference.log_f0[t].exp() - synthesized.log_f0[t].exp()).powi(2);
            count += 1;
        }
    }
    Ok(if count == 0 {
        F0Rmse::Undefined
    } else {
        F0Rmse::Defined {
            hz: (sq / count as f64).sqrt(),
            frames: count,
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionRow {
    pub speaker_id: String,
    pub utterance_id: String,
    /// Seed length in seconds, when the embedding came from a seed.
    pub seed_seconds: Option<f64>,
    pub mcd_db: f64,
    pub rmse_f0: F0Rmse,
    pub frames: usize,
}

/// Compares a synthesized clip against its reference.
pub fn distortion(reference: &WaveformClip, synthesized: &WaveformClip, f0: &F0Config) -> Result<(f64, F0Rmse, usize)> {
    let r = extract_cepstra(reference)?;
    let s = extract_cepstra(synthesized)?;
    let m = mcd(&r, &s)?;
    let f = rmse_f0(&extract_f0_uv(reference, f0), &extract_f0_uv(synthesized, f0))?;
    Ok((m, f, r.len().min(s.len())))
}

/// A held-out utterance: reference audio and the conditioning frames it was aligned with.
#[derive(Debug, Clone, PartialEq)]
pub struct TestUtterance {
    pub utterance_id: String,
    pub reference: WaveformClip,
    pub frames: Vec<ConditioningFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub sampling: Sampling,
    pub seed: u64,
    pub f0: F0Config,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            sampling: Sampling::default(),
            seed: 0,
            f0: F0Config::default(),
        }
    }
}

/// Synthesizes `frames` and decodes the codes back to a clip.
pub fn synthesize(
    model: &SampleRnn,
    frames: &[ConditioningFrame],
    speaker: SpeakerRef<'_>,
    speaker_id: &str,
    utterance_id: &str,
    sampling: Sampling,
    seed: u64,
) -> Result<WaveformClip> {
    let codes = model.generate(frames, speaker, seed, sampling)?;
    Ok(WaveformClip::new(mulaw_decode(&codes.codes), speaker_id, utterance_id))
}

fn utterance_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Synthesizes every test utterance with one speaker vector and scores it. Utterances run in
/// parallel; each has its own sampling seed so the result does not depend on scheduling.
pub fn evaluate_speaker(
    model: &SampleRnn,
    speaker_id: &str,
    speaker: SpeakerRef<'_>,
    tests: &[TestUtterance],
    seed_seconds: Option<f64>,
    cfg: &SynthesisConfig,
) -> Result<Vec<DistortionRow>> {
    tests
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let syn = synthesize(
                model,
                &t.frames,
                speaker,
                speaker_id,
                &t.utterance_id,
                cfg.sampling,
                utterance_seed(cfg.seed, i),
            )?;
            let (mcd_db, rmse, frames) = distortion(&t.reference, &syn, &cfg.f0)?;
            Ok(DistortionRow {
                speaker_id: speaker_id.to_string(),
                utterance_id: t.utterance_id.clone(),
                seed_seconds,
                mcd_db,
                rmse_f0: rmse,
                frames,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationSpeaker {
    pub speaker_id: String,
    pub seed_pool: Vec<WaveformClip>,
    pub tests: Vec<TestUtterance>,
}

pub const SEED_SECONDS: [f64; 4] = [1.0, 10.0, 60.0, 120.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub seed_seconds: f64,
    pub mcd_db: f64,
    /// Mean over speakers with at least one defined value.
    pub rmse_f0_hz: Option<f64>,
    pub speakers: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistortionReport {
    pub rows: Vec<DistortionRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl DistortionReport {
    /// `(speaker, T)` means over utterances. Undefined F0 errors are left out of the mean.
    pub fn per_speaker(&self) -> BTreeMap<(String, Option<u64>), (f64, Option<f64>, usize)> {
        let mut groups: BTreeMap<(String, Option<u64>), Vec<&DistortionRow>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.speaker_id.clone(), r.seed_seconds.map(f64::to_bits)))
                .or_default()
                .push(r);
        }
        groups
            .into_iter()
            .map(|(k, rows)| {
                let m = mean(rows.iter().map(|r| r.mcd_db)).unwrap_or(f64::NAN);
                let f = mean(rows.iter().filter_map(|r| r.rmse_f0.hz()));
                (k, (m, f, rows.len()))
            })
            .collect()
    }

    /// Per seed length, the arithmetic mean of the per-speaker values.
    pub fn curve(&self) -> Vec<CurvePoint> {
        let mut by_t: BTreeMap<u64, Vec<(f64, Option<f64>)>> = BTreeMap::new();
        for ((_, t), (m, f, _)) in self.per_speaker() {
            if let Some(t) = t {
                by_t.entry(t).or_default().push((m, f));
            }
        }
        let mut points: Vec<CurvePoint> = by_t
            .into_iter()
            .map(|(t, v)| CurvePoint {
                seed_seconds: f64::from_bits(t),
                mcd_db: mean(v.iter().map(|p| p.0)).unwrap_or(f64::NAN),
                rmse_f0_hz: mean(v.iter().filter_map(|p| p.1)),
                speakers: v.len(),
            })
            .collect();
        points.sort_by(|a, b| a.seed_seconds.total_cmp(&b.seed_seconds));
        points
    }

    /// `speaker,utterance,T,mcd_db,rmse_f0_hz,frames`; undefined values are empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("speaker,utterance,T,mcd_db,rmse_f0_hz,frames\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{},{}\n",
                r.speaker_id,
                r.utterance_id,
                r.seed_seconds.map(|t| t.to_string()).unwrap_or_default(),
                r.mcd_db,
                r.rmse_f0.hz().map(|v| format!("{v:.6}")).unwrap_or_default(),
                r.frames
            ));
        }
        out
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("T,mcd_db,rmse_f0_hz,speakers\n");
        for p in self.curve() {
            out.push_str(&format!(
                "{},{:.6},{},{}\n",
                p.seed_seconds,
                p.mcd_db,
                p.rmse_f0_hz.map(|v| format!("{v:.6}")).unwrap_or_default(),
                p.speakers
            ));
        }
        out
    }
}

/// For every adaptation speaker and seed length: draw a seed, average its encoder frames into
/// an embedding, synthesize the speaker's test utterances and score them.
pub fn adaptation_curve(
    model: &SampleRnn,
    encoder: &dyn SpeechEncoder,
    speakers: &[AdaptationSpeaker],
    seed_seconds: &[f64],
    cfg: &SynthesisConfig,
) -> Result<DistortionReport> {
    let longest = seed_seconds.iter().copied().fold(0.0, f64::max);
    for spk in speakers {
        sample_seed(&spk.seed_pool, longest, cfg.seed)?;
    }
    let mut report = DistortionReport::default();
    for (si, spk) in speakers.iter().enumerate() {
        for (ti, &t) in seed_seconds.iter().enumerate() {
            let rng_seed = utterance_seed(cfg.seed, si * 1000 + ti);
            let seed = sample_seed(&spk.seed_pool, t, rng_seed)?;
            let emb = embed_seed(&seed, &spk.seed_pool, encoder)?;
            let run_cfg = SynthesisConfig {
                seed: rng_seed,
                ..cfg.clone()
            };
            report.rows.extend(evaluate_speaker(
                model,
                &spk.speaker_id,
                SpeakerRef::Vector(&emb.vector),
                &spk.tests,
                Some(t),
                &run_cfg,
            )?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(rows: &[&[f64]]) -> CepstraTrack {
        let n = rows[0].len();
        CepstraTrack {
            coeffs: Array2::from_shape_vec((rows.len(), n), rows.concat()).unwrap(),
        }
    }

    fn pros(hz: &[f64], uv: &[u8]) -> ProsodyTrack {
        ProsodyTrack {
            log_f0: hz.iter().map(|v| v.ln()).collect(),
            uv: uv.to_vec(),
            filled: uv.iter().map(|&v| v == 0).collect(),
        }
    }

    #[test]
    fn mcd_closed_form() {
        let mut a = vec![0.0; 25];
        let b = vec![0.0; 25];
        a[3] = 1.0;
        let v = mcd(&track(&[&a]), &track(&[&b])).unwrap();
        assert!((v - 6.1421).abs() < 1e-3);
        assert_eq!(mcd(&track(&[&a]), &track(&[&a])).unwrap(), 0.0);
        a[0] = 100.0;
        assert!((mcd(&track(&[&a]), &track(&[&b])).unwrap() - v).abs() < 1e-12);
    }

    #[test]
    fn mcd_frame_tolerance() {
        let z = vec![0.0; 25];
        let three = track(&[&z, &z, &z]);
        let six = track(&[&z, &z, &z, &z, &z, &z]);
        let four = track(&[&z, &z, &z, &z]);
        assert!(mcd(&three, &four).is_ok());
        assert!(matches!(mcd(&three, &six), Err(Error::Alignment(_))));
    }

    #[test]
    fn rmse_f0_examples() {
        let r = pros(&[100.0, 200.0], &[1, 1]);
        let s = pros(&[110.0, 190.0], &[1, 1]);
        assert!((rmse_f0(&r, &s).unwrap().hz().unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(rmse_f0(&r, &r).unwrap().hz(), Some(0.0));
        let r3 = pros(&[100.0, 200.0, 300.0], &[1, 1, 0]);
        let s3 = pros(&[110.0, 190.0, 50.0], &[1, 1, 1]);
        assert!((rmse_f0(&r3, &s3).unwrap().hz().unwrap() - 10.0).abs() < 1e-9);
        let none = pros(&[100.0], &[0]);
        assert_eq!(rmse_f0(&none, &none).unwrap(), F0Rmse::Undefined);
    }

    #[test]
    fn cepstra_framing_and_gain() {
        let x: Vec<f64> = (0..16000)
            .map(|i| 0.3 * (i as f64 * 0.05).sin() + 0.1 * ((i * i) as f64 * 0.37).sin())
            .collect();
        let a = extract_cepstra(&WaveformClip::new(x.clone(), "s", "u")).unwrap();
        assert_eq!(a.len(), 200);
        let b = extract_cepstra(&WaveformClip::new(x.iter().map(|v| 2.0 * v).collect(), "s", "u")).unwrap();
        let shift = 2f64.ln();
        for t in 0..a.len() {
            assert!((b.coeffs[[t, 0]] - a.coeffs[[t, 0]] - shift).abs() < 1e-8);
            for d in 1..=CEPSTRAL_ORDER {
                assert!((b.coeffs[[t, d]] - a.coeffs[[t, d]]).abs() < 1e-8);
            }
        }
        assert!(extract_cepstra(&WaveformClip::new(vec![0.1; 300], "s", "u")).is_err());
    }

    #[test]
    fn curve_is_mean_of_speaker_means() {
        let row = |s: &str, t: f64, m: f64, f: Option<f64>| DistortionRow {
            speaker_id: s.into(),
            utterance_id: format!("{s}/u"),
            seed_seconds: Some(t),
            mcd_db: m,
            rmse_f0: f.map_or(F0Rmse::Undefined, |hz| F0Rmse::Defined { hz, frames: 1 }),
            frames: 10,
        };
        let report = DistortionReport {
            rows: vec![
                row("a", 1.0, 10.0, Some(20.0)),
                row("a", 1.0, 12.0, None),
                row("b", 1.0, 6.0, Some(10.0)),
                row("a", 10.0, 8.0, Some(5.0)),
            ],
        };
        let c = report.curve();
        assert_eq!(c.len(), 2);
        assert!((c[0].mcd_db - (11.0 + 6.0) / 2.0).abs() < 1e-12);
        assert_eq!(c[0].rmse_f0_hz, Some(15.0));
        assert_eq!(c[1].speakers, 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tracks(n: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-5.0f64..5.0, n * 25)
        }

        proptest! {
            #[test]
            fn mcd_is_a_pseudometric(a in tracks(6), b in tracks(6), c in tracks(6)) {
                let t = |v: Vec<f64>| CepstraTrack { coeffs: Array2::from_shape_vec((6, 25), v).unwrap() };
                let (a, b, c) = (t(a), t(b), t(c));
                let ab = mcd(&a, &b).unwrap();
                prop_assert!((ab - mcd(&b, &a).unwrap()).abs() < 1e-12);
                prop_assert_eq!(mcd(&a, &a).unwrap(), 0.0);
                prop_assert!(mcd(&a, &c).unwrap() <= ab + mcd(&b, &c).unwrap() + 1e-9);
            }

            #[test]
            fn rmse_f0_ignores_joint_frame_order(
                frames in proptest::collection::vec((60.0f64..400.0, 60.0f64..400.0, 0u8..2, 0u8..2), 1..40),
                seed in any::<u64>(),
            ) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let build = |fr: &[(f64, f64, u8, u8)]| {
                    let r: Vec<f64> = fr.iter().map(|f| f.0).collect();
                    let s: Vec<f64> = fr.iter().map(|f| f.1).collect();
                    let ru: Vec<u8> = fr.iter().map(|f| f.2).collect();
                    let su: Vec<u8> = fr.iter().map(|f| f.3).collect();
                    rmse_f0(&pros(&r, &ru), &pros(&s, &su)).unwrap()
                };
                let before = build(&frames);
                let mut shuffled = frames.clone();
                shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let after = build(&shuffled);
                match (before, after) {
                    (F0Rmse::Defined { hz: a, frames: n }, F0Rmse::Defined { hz: b, frames: m }) => {
                        prop_assert_eq!(n, m);
                        prop_assert!((a - b).abs() < 1e-9);
                    }
                    (x, y) => prop_assert_eq!(x, y),
                }
            }
        }
    }
}
