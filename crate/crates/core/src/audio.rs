//! Waveform ingestion, silence trimming, μ-law quantization and training-window framing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningFrame;
use crate::error::{Error, Result};

/// Sample rate every clip is brought to at ingestion.
pub const SAMPLE_RATE: u32 = 16_000;

/// Number of μ-law quantization levels (8 bits).
pub const MULAW_LEVELS: usize = 256;

const MU: f64 = 255.0;

/// Code that the quantizer assigns to a zero-amplitude sample.
pub const ZERO_CODE: u8 = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct WaveformClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub speaker_id: String,
    pub utterance_id: String,
}

impl WaveformClip {
    pub fn new(
        samples: Vec<f64>,
        speaker_id: impl Into<String>,
        utterance_id: impl Into<String>,
    ) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
            speaker_id: speaker_id.into(),
            utterance_id: utterance_id.into(),
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sub-clip `[start, start + len)`, clipped to the clip bounds.
    pub fn slice(&self, start: usize, len: usize) -> WaveformClip {
        let end = (start + len).min(self.samples.len());
        let start = start.min(end);
        WaveformClip {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
            speaker_id: self.speaker_id.clone(),
            utterance_id: self.utterance_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelPolicy {
    /// Average all channels into one.
    #[default]
    Downmix,
    Reject,
}

/// Reads a PCM/float WAV file, reduces it to mono and resamples it to 16 kHz.
pub fn load_waveform(
    path: &Path,
    speaker_id: &str,
    utterance_id: &str,
    channels: ChannelPolicy,
) -> Result<WaveformClip> {
    let ingest = |reason: String| Error::Ingest {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::open(path).map_err(|e| ingest(e.to_string()))?;
    let spec = reader.spec();
    let n_channels = spec.channels as usize;
    if n_channels == 0 {
        return Err(ingest("zero channels".into()));
    }
    if n_channels > 1 && channels == ChannelPolicy::Reject {
        return Err(ingest(format!("{n_channels} channels, expected mono")));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| ingest(e.to_string()))?,
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| ingest(e.to_string()))?
        }
    };
    let mono: Vec<f64> = interleaved
        .chunks(n_channels)
        .map(|frame| frame.iter().sum::<f64>() / n_channels as f64)
        .map(|s| s.clamp(-1.0, 1.0))
        .collect();
    let samples = if spec.sample_rate == SAMPLE_RATE {
        mono
    } else {
        resample(&mono, spec.sample_rate, SAMPLE_RATE)
            .into_iter()
            .map(|s| s.clamp(-1.0, 1.0))
            .collect()
    };
    Ok(WaveformClip::new(samples, speaker_id, utterance_id))
}

/// Writes a clip as 16-bit mono PCM.
pub fn write_waveform(path: &Path, clip: &WaveformClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let container = |e: hound::Error| Error::container(path, e.to_string());
    let mut writer = hound::WavWriter::create(path, spec).map_err(container)?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(container)?;
    }
    writer.finalize().map_err(container)
}

/// Hann-windowed sinc interpolation. Low-passes at the lower Nyquist rate when decimating.
pub fn resample(samples: &[f64], from_rate: u32, to_rate: u32) -> Vec<f64> {
    if from_rate == to_rate || samples.is_empty() {
        return samples.to_vec();
    }
    const ZERO_CROSSINGS: f64 = 16.0;
    let ratio = to_rate as f64 / from_rate as f64;
    let cutoff = ratio.min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;
    let out_len = (samples.len() as f64 * ratio).round() as usize;
    (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(samples.len() - 1);
            let mut acc = 0.0;
            for (k, &x) in samples.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - k as f64;
                let arg = cutoff * d;
                let sinc = if arg.abs() < 1e-12 {
                    1.0
                } else {
                    (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg)
                };
                let w = 0.5 + 0.5 * (std::f64::consts::PI * d / half_width).cos();
                acc += x * cutoff * sinc * w;
            }
            acc
        })
        .collect()
}

/// Frame-energy voice activity detector settings used by [`trim_silences`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VadConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    /// Speech must exceed the noise floor by this margin.
    pub margin_db: f64,
    /// Percentile of frame energies used as the noise floor estimate.
    pub floor_percentile: f64,
    /// The noise floor estimate is never taken above this level, so clips without pauses are
    /// not classified as silence.
    pub floor_ceiling_db: f64,
    pub max_silence_ms: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 10.0,
            margin_db: 6.0,
            floor_percentile: 10.0,
            floor_ceiling_db: -60.0,
            max_silence_ms: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrimStatus {
    Ok,
    /// No speech was detected; output is at most `max_silence_ms` long.
    AllSilence,
}

#[derive(Debug, Clone)]
pub struct TrimOutcome {
    pub clip: WaveformClip,
    pub status: TrimStatus,
    pub removed_samples: usize,
    /// Kept source ranges `(source_start, source_end)` in output order.
    pub kept: Vec<(usize, usize)>,
}

impl TrimOutcome {
    /// Maps a source sample index (or boundary) onto the trimmed time axis. Indices inside a
    /// removed stretch collapse onto the cut point.
    pub fn map_index(&self, source: usize) -> usize {
        let mut out = 0;
        for &(s, e) in &self.kept {
            if source <= s {
                return out;
            }
            if source < e {
                return out + (source - s);
            }
            out += e - s;
        }
        out
    }
}

/// Per-sample silence mask from the frame-energy VAD, with region edges refined to the first
/// sample above the detection threshold.
pub fn silence_mask(samples: &[f64], sample_rate: u32, vad: &VadConfig) -> Vec<bool> {
    let n = samples.len();
    if n == 0 {
        return Vec::new();
    }
    let sr = sample_rate as f64;
    let hop = ((vad.hop_ms * sr / 1000.0).round() as usize).max(1);
    let win = ((vad.window_ms * sr / 1000.0).round() as usize).max(hop);
    let n_frames = n.div_ceil(hop);
    let energies: Vec<f64> = (0..n_frames)
        .map(|k| {
            let center = k * hop + hop / 2;
            let lo = center.saturating_sub(win / 2);
            let hi = (center + win - win / 2).min(n);
            let e = samples[lo..hi].iter().map(|x| x * x).sum::<f64>() / (hi - lo).max(1) as f64;
            10.0 * (e + 1e-12).log10()
        })
        .collect();
    let mut sorted = energies.clone();
    sorted.sort_by(f64::total_cmp);
    let idx = ((vad.floor_percentile / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    let floor = sorted[idx].min(vad.floor_ceiling_db);
    let threshold_db = floor + vad.margin_db;

    let mut mask = vec![false; n];
    for (k, &e) in energies.iter().enumerate() {
        if e <= threshold_db {
            let lo = k * hop;
            let hi = (lo + hop).min(n);
            mask[lo..hi].iter_mut().for_each(|m| *m = true);
        }
    }

    // Grow silence into neighbouring speech hops while samples stay below the threshold
    // amplitude; stops at the first audible sample.
    let amp = 10f64.powf(threshold_db / 20.0);
    let reach = win;
    let original = mask.clone();
    for i in 0..n {
        if !original[i] {
            continue;
        }
        if i + 1 < n && !original[i + 1] {
            let mut j = i + 1;
            while j < n && j <= i + reach && samples[j].abs() <= amp {
                mask[j] = true;
                j += 1;
            }
        }
        if i > 0 && !original[i - 1] {
            let mut j = i - 1;
            loop {
                if samples[j].abs() > amp || i - j > reach {
                    break;
                }
                mask[j] = true;
                if j == 0 {
                    break;
                }
                j -= 1;
            }
        }
    }
    mask
}

/// Shortens every silence region longer than `max_silence_ms`, keeping its first and last
/// halves of the allowed length. Speech samples are copied through untouched.
pub fn trim_silences(clip: &WaveformClip, vad: &VadConfig) -> TrimOutcome {
    let mask = silence_mask(&clip.samples, clip.sample_rate, vad);
    let max_len = (vad.max_silence_ms * clip.sample_rate as f64 / 1000.0).round() as usize;
    let head = max_len / 2;
    let tail = max_len - head;
    let mut out = Vec::with_capacity(clip.samples.len());
    let mut kept: Vec<(usize, usize)> = Vec::new();
    let mut keep = |s: usize, e: usize| match kept.last_mut() {
        Some(last) if last.1 == s => last.1 = e,
        _ => kept.push((s, e)),
    };
    let mut i = 0;
    let mut any_speech = false;
    while i < mask.len() {
        let mut j = i;
        while j < mask.len() && mask[j] == mask[i] {
            j += 1;
        }
        let run = &clip.samples[i..j];
        if mask[i] && run.len() > max_len {
            out.extend_from_slice(&run[..head]);
            out.extend_from_slice(&run[run.len() - tail..]);
            keep(i, i + head);
            keep(j - tail, j);
        } else {
            any_speech |= !mask[i];
            out.extend_from_slice(run);
            keep(i, j);
        }
        i = j;
    }
    let status = if any_speech || clip.samples.is_empty() {
        TrimStatus::Ok
    } else {
        warn!("{}: no speech detected", clip.utterance_id);
        TrimStatus::AllSilence
    };
    TrimOutcome {
        removed_samples: clip.samples.len() - out.len(),
        kept,
        clip: WaveformClip {
            samples: out,
            ..clip.clone()
        },
        status,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedSequence {
    pub codes: Vec<u8>,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeMode {
    /// Clamp out-of-range samples into [-1, 1] and count them.
    #[default]
    Clamp,
    Strict,
}

/// μ-law compression `F(x) = sign(x)·ln(1 + 255|x|)/ln(256)`.
pub fn mulaw_compress(x: f64) -> f64 {
    x.signum() * (MU * x.abs()).ln_1p() / (1.0 + MU).ln()
}

/// Inverse of [`mulaw_compress`].
pub fn mulaw_expand(y: f64) -> f64 {
    y.signum() * ((1.0 + MU).powf(y.abs()) - 1.0) / MU
}

/// Quantizes one sample already known to be in [-1, 1].
#[inline]
pub fn mulaw_encode_sample(x: f64) -> u8 {
    let f = mulaw_compress(x);
    ((f + 1.0) / 2.0 * MU + 0.5).floor().clamp(0.0, MU) as u8
}

/// Bin centre of `code` in the amplitude domain.
#[inline]
pub fn mulaw_decode_code(code: u8) -> f64 {
    mulaw_expand(2.0 * code as f64 / MU - 1.0)
}

/// Encodes samples into 8-bit μ-law codes. Returns the sequence and the number of samples that
/// had to be clamped.
pub fn mulaw_encode(
    samples: &[f64],
    source: &str,
    mode: RangeMode,
) -> Result<(QuantizedSequence, usize)> {
    let mut clamped = 0usize;
    let mut codes = Vec::with_capacity(samples.len());
    for (i, &x) in samples.iter().enumerate() {
        if !x.is_finite() || !(-1.0..=1.0).contains(&x) {
            if mode == RangeMode::Strict || !x.is_finite() {
                return Err(Error::OutOfRange(format!(
                    "{source}: sample {i} = {x} outside [-1, 1]"
                )));
            }
            clamped += 1;
        }
        codes.push(mulaw_encode_sample(x.clamp(-1.0, 1.0)));
    }
    if clamped > 0 {
        warn!("{source}: clamped {clamped} out-of-range samples");
    }
    Ok((
        QuantizedSequence {
            codes,
            source: source.to_string(),
        },
        clamped,
    ))
}

pub fn mulaw_decode(codes: &[u8]) -> Vec<f64> {
    codes.iter().map(|&c| mulaw_decode_code(c)).collect()
}

/// Decodes wider integer codes, rejecting anything outside `[0, 255]`.
pub fn mulaw_decode_checked(codes: &[i64]) -> Result<Vec<f64>> {
    codes
        .iter()
        .map(|&c| {
            u8::try_from(c)
                .map(mulaw_decode_code)
                .map_err(|_| Error::OutOfRange(format!("μ-law code {c} outside [0, 255]")))
        })
        .collect()
}

const CODES_MAGIC: &[u8; 4] = b"SRNQ";
const CODES_VERSION: u32 = 1;

/// Persists codes as `magic "SRNQ" | u32 version | u64 count | u32 source-len | source | codes`,
/// integers little-endian.
pub fn write_codes(path: &Path, seq: &QuantizedSequence) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let src = seq.source.as_bytes();
    let res: std::io::Result<()> = (|| {
        w.write_all(CODES_MAGIC)?;
        w.write_all(&CODES_VERSION.to_le_bytes())?;
        w.write_all(&(seq.codes.len() as u64).to_le_bytes())?;
        w.write_all(&(src.len() as u32).to_le_bytes())?;
        w.write_all(src)?;
        w.write_all(&seq.codes)?;
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_codes(path: &Path) -> Result<QuantizedSequence> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::container(path, why);
    if buf.len() < 20 || &buf[..4] != CODES_MAGIC {
        return Err(bad("missing SRNQ header"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != CODES_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let src_len = u32::from_le_bytes(buf[16..20].try_into().unwrap()) as usize;
    let body = &buf[20..];
    if body.len() != src_len + count {
        return Err(bad("length does not match header"));
    }
    let source = String::from_utf8(body[..src_len].to_vec()).map_err(|_| bad("source not utf-8"))?;
    Ok(QuantizedSequence {
        codes: body[src_len..].to_vec(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailPolicy {
    #[default]
    Drop,
    Pad,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WindowConfig {
    /// Samples per conditioning frame (Δt).
    pub frame_size: usize,
    /// Top-tier frames per window.
    pub seq_len: usize,
    pub tail: TailPolicy,
    /// Strict mode skips utterances shorter than one window; lenient mode pads them.
    pub strict: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            frame_size: 80,
            seq_len: 13,
            tail: TailPolicy::Drop,
            strict: true,
        }
    }
}

impl WindowConfig {
    pub fn window_len(&self) -> usize {
        self.frame_size * self.seq_len
    }
}

/// One truncated-BPTT training segment.
///
/// The input stream is the code sequence with one zero-amplitude code prepended, so
/// `input_codes[n]` is stream position `n`, `target_codes[n]` is stream position `n + 1`.
/// `context` holds the `frame_size` codes that precede `target_codes[0]` (zero-code padded at
/// the utterance head); the frame-level tiers read their first input frame from it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub context: Vec<u8>,
    pub input_codes: Vec<u8>,
    pub target_codes: Vec<u8>,
    pub conditioning: Vec<ConditioningFrame>,
    pub speaker_id: String,
    pub utterance_id: String,
    /// Position of this window within its utterance.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WindowWarning {
    TooShort { utterance_id: String, len: usize },
}

/// Cuts an utterance into consecutive non-overlapping windows of `seq_len` frames.
pub fn make_windows(
    seq: &QuantizedSequence,
    frames: &[ConditioningFrame],
    speaker_id: &str,
    cfg: &WindowConfig,
) -> Result<(Vec<TrainingWindow>, Vec<WindowWarning>)> {
    let fs = cfg.frame_size;
    let expected = seq.codes.len().div_ceil(fs);
    if frames.len() != expected {
        return Err(Error::Alignment(format!(
            "{}: {} conditioning frames for {} codes (expected {expected})",
            seq.source,
            frames.len(),
            seq.codes.len()
        )));
    }
    let wlen = cfg.window_len();
    let mut warnings = Vec::new();
    let mut codes = seq.codes.clone();
    let mut frames = frames.to_vec();
    let pad_to = |codes: &mut Vec<u8>, frames: &mut Vec<ConditioningFrame>, len: usize| {
        codes.resize(len, ZERO_CODE);
        let last = frames.last().cloned();
        if let Some(last) = last {
            frames.resize(len / fs, last);
        }
    };
    if codes.len() < wlen {
        if cfg.strict || frames.is_empty() {
            warn!("{}: {} codes, shorter than one window", seq.source, codes.len());
            warnings.push(WindowWarning::TooShort {
                utterance_id: seq.source.clone(),
                len: codes.len(),
            });
            return Ok((Vec::new(), warnings));
        }
        pad_to(&mut codes, &mut frames, wlen);
    } else if codes.len() % wlen != 0 && cfg.tail == TailPolicy::Pad {
        let len = codes.len().div_ceil(wlen) * wlen;
        pad_to(&mut codes, &mut frames, len);
    }
    let n_windows = codes.len() / wlen;
    let mut stream = vec![ZERO_CODE; fs];
    stream.extend_from_slice(&codes[..n_windows * wlen]);
    let windows = (0..n_windows)
        .map(|w| {
            let start = w * wlen;
            TrainingWindow {
                context: stream[start..start + fs].to_vec(),
                input_codes: stream[start + fs - 1..start + fs - 1 + wlen].to_vec(),
                target_codes: stream[start + fs..start + fs + wlen].to_vec(),
                conditioning: frames[w * cfg.seq_len..(w + 1) * cfg.seq_len].to_vec(),
                speaker_id: speaker_id.to_string(),
                utterance_id: seq.source.clone(),
                index: w,
            }
        })
        .collect();
    Ok((windows, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(n: usize, start: usize) -> Vec<f64> {
        (start..start + n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 220.0 * i as f64 / 16000.0 + 0.3).sin())
            .collect()
    }

    fn frames(n: usize) -> Vec<ConditioningFrame> {
        (0..n)
            .map(|i| ConditioningFrame {
                categorical: vec![],
                numeric: vec![i as f64],
            })
            .collect()
    }

    #[test]
    fn endpoint_and_zero_codes() {
        assert_eq!(mulaw_encode_sample(1.0), 255);
        assert_eq!(mulaw_encode_sample(-1.0), 0);
        assert_eq!(mulaw_encode_sample(0.0), ZERO_CODE);
    }

    #[test]
    fn half_amplitude_round_trip() {
        let back = mulaw_decode_code(mulaw_encode_sample(0.5));
        assert!((back - 0.5).abs() < 0.02, "{back}");
    }

    #[test]
    fn code_128_is_smallest_non_negative_centre() {
        let centres: Vec<f64> = (0..=255u8).map(mulaw_decode_code).collect();
        let best = (0..256)
            .filter(|&c| centres[c] >= 0.0)
            .min_by(|&a, &b| centres[a].total_cmp(&centres[b]))
            .unwrap();
        assert_eq!(best, 128);
    }

    fn widest_bin() -> f64 {
        let edge = |k: f64| {
            let y = 2.0 * k / 255.0 - 1.0;
            y.signum() * (256f64.powf(y.abs()) - 1.0) / 255.0
        };
        (0..255).map(|k| edge(k as f64 + 1.0) - edge(k as f64)).fold(0.0, f64::max)
    }

    #[test]
    fn round_trip_grid_within_widest_bin() {
        let w = widest_bin();
        for i in 0..=100_000 {
            let x = -1.0 + 2.0 * i as f64 / 100_000.0;
            let back = mulaw_decode_code(mulaw_encode_sample(x));
            assert!((x - back).abs() <= w, "x={x} back={back} w={w}");
        }
    }

    proptest::proptest! {
        #[test]
        fn encode_is_monotone(a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            proptest::prop_assert!(mulaw_encode_sample(lo) <= mulaw_encode_sample(hi));
        }

        #[test]
        fn encode_is_symmetric(x in -1.0f64..=1.0) {
            let scaled = (x.signum() * (255.0 * x.abs()).ln_1p() / 256f64.ln() + 1.0) / 2.0 * 255.0;
            let frac = scaled - scaled.floor();
            proptest::prop_assume!((frac - 0.5).abs() > 1e-9);
            proptest::prop_assert_eq!(mulaw_encode_sample(-x), 255 - mulaw_encode_sample(x));
        }

        #[test]
        fn round_trip_is_bounded(x in -1.0f64..=1.0) {
            let back = mulaw_decode_code(mulaw_encode_sample(x));
            proptest::prop_assert!((x - back).abs() <= widest_bin());
        }

        #[test]
        fn encode_matches_formula(x in -1.0f64..=1.0) {
            let f = x.signum() * (1.0 + 255.0 * x.abs()).ln() / 256f64.ln();
            let code = ((f + 1.0) / 2.0 * 255.0 + 0.5).floor().clamp(0.0, 255.0);
            proptest::prop_assert_eq!(mulaw_encode_sample(x) as f64, code);
        }
    }

    #[test]
    fn strict_mode_rejects_out_of_range() {
        assert!(mulaw_encode(&[0.0, 1.5], "u", RangeMode::Strict).is_err());
        let (seq, clamped) = mulaw_encode(&[0.0, 1.5, -2.0], "u", RangeMode::Clamp).unwrap();
        assert_eq!(clamped, 2);
        assert_eq!(seq.codes, vec![128, 255, 0]);
        assert!(mulaw_decode_checked(&[0, 255]).is_ok());
        assert!(mulaw_decode_checked(&[256]).is_err());
        assert!(mulaw_decode_checked(&[-1]).is_err());
    }

    #[test]
    fn resample_preserves_duration() {
        let x: Vec<f64> = (0..48000)
            .map(|i| (2.0 * std::f64::consts::PI * 300.0 * i as f64 / 48000.0).sin() * 0.5)
            .collect();
        let y = resample(&x, 48000, 16000);
        assert_eq!(y.len(), 16000);
        // in-band tone survives with its amplitude
        let peak = y[1000..15000].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.5).abs() < 0.01, "{peak}");
    }

    #[test]
    fn trims_internal_silence_to_limit() {
        let mut x = tone(8000, 0);
        x.extend(vec![0.0; 8000]);
        x.extend(tone(8000, 16000));
        let clip = WaveformClip::new(x.clone(), "s", "u");
        let out = trim_silences(&clip, &VadConfig::default());
        assert_eq!(out.status, TrimStatus::Ok);
        assert_eq!(out.removed_samples, 8000 - 1600);
        assert_eq!(&out.clip.samples[..8000], &x[..8000]);
        assert_eq!(&out.clip.samples[9600..], &x[16000..]);
        assert_eq!(out.map_index(100), 100);
        assert_eq!(out.map_index(12000), 8800);
        assert_eq!(out.map_index(16000), 9600);
        assert_eq!(out.map_index(24000), 17600);
    }

    #[test]
    fn clip_without_silence_is_unchanged() {
        let clip = WaveformClip::new(tone(16000, 0), "s", "u");
        let out = trim_silences(&clip, &VadConfig::default());
        assert_eq!(out.clip, clip);
    }

    #[test]
    fn pure_silence_collapses() {
        let clip = WaveformClip::new(vec![0.0; 32000], "s", "u");
        let out = trim_silences(&clip, &VadConfig::default());
        assert_eq!(out.status, TrimStatus::AllSilence);
        assert!(out.clip.samples.len() <= 1600);
    }

    #[test]
    fn windows_cover_utterance() {
        let codes: Vec<u8> = (0..2080).map(|i| (i % 256) as u8).collect();
        let seq = QuantizedSequence {
            codes: codes.clone(),
            source: "u".into(),
        };
        let (w, warn) = make_windows(&seq, &frames(26), "s", &WindowConfig::default()).unwrap();
        assert!(warn.is_empty());
        assert_eq!(w.len(), 2);
        let mut stream = vec![ZERO_CODE];
        stream.extend_from_slice(&codes);
        for (n, win) in w.iter().enumerate() {
            assert_eq!(win.target_codes[0], stream[n * 1040 + 1]);
            assert_eq!(win.input_codes[0], stream[n * 1040]);
            assert_eq!(win.conditioning[0].numeric[0], (n * 13) as f64);
        }
        assert_eq!(w[1].context, codes[960..1040].to_vec());
        assert_eq!(w[0].context, vec![ZERO_CODE; 80]);
    }

    #[test]
    fn short_utterance_strict_and_lenient() {
        let seq = QuantizedSequence {
            codes: vec![7; 1039],
            source: "u".into(),
        };
        let (w, warn) = make_windows(&seq, &frames(13), "s", &WindowConfig::default()).unwrap();
        assert!(w.is_empty());
        assert_eq!(warn.len(), 1);
        let lenient = WindowConfig {
            strict: false,
            ..Default::default()
        };
        let (w, _) = make_windows(&seq, &frames(13), "s", &lenient).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].target_codes[1039], ZERO_CODE);
    }

    #[test]
    fn frame_count_mismatch_is_an_error() {
        let seq = QuantizedSequence {
            codes: vec![7; 1040],
            source: "u".into(),
        };
        assert!(make_windows(&seq, &frames(12), "s", &WindowConfig::default()).is_err());
    }

    #[test]
    fn codes_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.codes");
        let seq = QuantizedSequence {
            codes: vec![0, 128, 255, 3],
            source: "spk/u".into(),
        };
        write_codes(&path, &seq).unwrap();
        assert_eq!(read_codes(&path).unwrap(), seq);
        std::fs::write(&path, b"garbage").unwrap();
        assert!(read_codes(&path).is_err());
    }
}
