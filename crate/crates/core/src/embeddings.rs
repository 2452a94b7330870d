//! Speaker embeddings: a trainable one-hot table, or the time average of a speech encoder's
//! 100 Hz frames over a seed signal of the target speaker.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{WaveformClip, SAMPLE_RATE};
use crate::container;
use crate::dsp::{MelCepstrum, SpectralAnalyzer};
use crate::error::{Error, Result};
use crate::nn::{join, relu, relu_backward, Adam, AdamConfig, Conv1d, Embedding, Linear, Parameters};

/// Encoder frame dimension.
pub const FRAME_DIM: usize = 100;
/// Samples per encoder frame at 16 kHz (100 Hz frame rate).
pub const FRAME_HOP: usize = 160;
/// Speaker embedding size E.
pub const EMBEDDING_DIM: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderFrames {
    /// `L × 100`.
    pub frames: Array2<f64>,
    pub source: String,
}

impl EncoderFrames {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    OnehotTable { index: usize },
    EncoderAveraged { seed_id: String, seconds: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub speaker_id: String,
    pub provenance: Provenance,
    pub vector: Vec<f64>,
}

pub trait SpeechEncoder: Send + Sync {
    fn name(&self) -> &str;

    /// Shortest input that yields one frame.
    fn min_samples(&self) -> usize {
        FRAME_HOP
    }

    /// Encodes a whole clip into `floor(len / 160)` frames.
    fn encode(&self, clip: &WaveformClip) -> Result<EncoderFrames>;

    /// Encodes `[start, start + len)` of a clip as an independent signal.
    fn encode_segment(&self, clip: &WaveformClip, start: usize, len: usize) -> Result<EncoderFrames> {
        self.encode(&clip.slice(start, len))
    }
}

impl fmt::Debug for dyn SpeechEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SpeechEncoder({})", self.name())
    }
}

/// Validates the clip and runs the encoder.
pub fn encode_frames(clip: &WaveformClip, encoder: &dyn SpeechEncoder) -> Result<EncoderFrames> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::Config(format!(
            "{}: encoder expects {SAMPLE_RATE} Hz, got {}",
            clip.utterance_id, clip.sample_rate
        )));
    }
    if clip.samples.len() < encoder.min_samples() {
        return Err(Error::Insufficient(format!(
            "{}: {} samples, encoder needs at least {}",
            clip.utterance_id,
            clip.samples.len(),
            encoder.min_samples()
        )));
    }
    encoder.encode(clip)
}

/// Time average of encoder frames: `e = (1/L) Σ frames[n]`.
pub fn average_embedding(
    frames: &EncoderFrames,
    speaker_id: &str,
    provenance: Provenance,
) -> Result<SpeakerEmbedding> {
    average_pooled(std::slice::from_ref(frames), speaker_id, provenance)
}

/// Averages the union of several frame sets, weighting every frame equally.
pub fn average_pooled(
    sets: &[EncoderFrames],
    speaker_id: &str,
    provenance: Provenance,
) -> Result<SpeakerEmbedding> {
    let total: usize = sets.iter().map(EncoderFrames::len).sum();
    if total == 0 {
        return Err(Error::Insufficient(format!(
            "no encoder frames to average for {speaker_id}"
        )));
    }
    let dim = sets.iter().find(|s| !s.is_empty()).unwrap().frames.ncols();
    let mut sum = Array1::<f64>::zeros(dim);
    for s in sets {
        if s.frames.ncols() != dim && !s.is_empty() {
            return Err(Error::Dimension {
                what: "encoder frame width",
                expected: dim,
                got: s.frames.ncols(),
            });
        }
        for row in s.frames.rows() {
            sum += &row;
        }
    }
    Ok(SpeakerEmbedding {
        speaker_id: speaker_id.to_string(),
        provenance,
        vector: (sum / total as f64).to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedChunk {
    /// Index into the pool the seed was sampled from.
    pub utterance: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSignal {
    pub speaker_id: String,
    pub seed_id: String,
    pub seconds: f64,
    pub chunks: Vec<SeedChunk>,
}

impl SeedSignal {
    pub fn total_samples(&self) -> usize {
        self.chunks.iter().map(|c| c.len).sum()
    }

    /// Concatenated seed audio.
    pub fn samples(&self, pool: &[WaveformClip]) -> Vec<f64> {
        self.chunks
            .iter()
            .flat_map(|c| pool[c.utterance].samples[c.start..c.start + c.len].iter().copied())
            .collect()
    }
}

/// Draws random 1 s chunks from a speaker's pool until exactly `seconds` of audio are
/// collected (the last chunk is shortened as needed).
pub fn sample_seed(pool: &[WaveformClip], seconds: f64, rng_seed: u64) -> Result<SeedSignal> {
    let speaker_id = pool
        .first()
        .map(|c| c.speaker_id.clone())
        .ok_or_else(|| Error::Insufficient("empty seed pool".into()))?;
    if let Some(other) = pool.iter().find(|c| c.speaker_id != speaker_id) {
        return Err(Error::Config(format!(
            "seed pool mixes speakers {speaker_id} and {}",
            other.speaker_id
        )));
    }
    let want = (seconds * SAMPLE_RATE as f64).round() as usize;
    let available: usize = pool.iter().map(|c| c.samples.len()).sum();
    if want == 0 {
        return Err(Error::Config("seed length must be positive".into()));
    }
    if available < want {
        return Err(Error::Insufficient(format!(
            "seed pool of {speaker_id} holds {:.2} s, {seconds} s requested (short by {:.2} s)",
            available as f64 / SAMPLE_RATE as f64,
            (want - available) as f64 / SAMPLE_RATE as f64
        )));
    }
    let sec = SAMPLE_RATE as usize;
    let mut chunks: Vec<SeedChunk> = pool
        .iter()
        .enumerate()
        .flat_map(|(u, c)| {
            (0..c.samples.len().div_ceil(sec)).map(move |k| SeedChunk {
                utterance: u,
                start: k * sec,
                len: sec.min(c.samples.len() - k * sec),
            })
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    chunks.shuffle(&mut rng);
    let mut picked = Vec::new();
    let mut total = 0;
    for mut c in chunks {
        if total >= want {
            break;
        }
        c.len = c.len.min(want - total);
        total += c.len;
        picked.push(c);
    }
    Ok(SeedSignal {
        seed_id: format!("{speaker_id}-T{seconds}-r{rng_seed}"),
        speaker_id,
        seconds,
        chunks: picked,
    })
}

/// Encodes each seed chunk separately, pools all frames and averages them.
pub fn embed_seed(
    seed: &SeedSignal,
    pool: &[WaveformClip],
    encoder: &dyn SpeechEncoder,
) -> Result<SpeakerEmbedding> {
    let mut sets = Vec::with_capacity(seed.chunks.len());
    for c in &seed.chunks {
        if c.len < encoder.min_samples() {
            continue;
        }
        sets.push(encoder.encode_segment(&pool[c.utterance], c.start, c.len)?);
    }
    average_pooled(
        &sets,
        &seed.speaker_id,
        Provenance::EncoderAveraged {
            seed_id: seed.seed_id.clone(),
            seconds: seed.seconds,
        },
    )
}

/// Trainable speaker lookup table, one row per training speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTable {
    pub speakers: Vec<String>,
    pub table: Embedding,
}

impl SpeakerTable {
    pub fn index_of(&self, speaker: &str) -> Result<usize> {
        self.speakers
            .iter()
            .position(|s| s == speaker)
            .ok_or_else(|| Error::UnknownSpeaker(speaker.to_string()))
    }

    pub fn lookup(&self, index: usize) -> Result<SpeakerEmbedding> {
        let id = self
            .speakers
            .get(index)
            .ok_or_else(|| Error::UnknownSpeaker(format!("index {index} of {}", self.speakers.len())))?;
        Ok(SpeakerEmbedding {
            speaker_id: id.clone(),
            provenance: Provenance::OnehotTable { index },
            vector: self.table.row(index).to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }
}

impl Parameters for SpeakerTable {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.table.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.table.visit_mut(prefix, f)
    }
}

/// Builds the one-hot embedding table for a fixed speaker index space.
pub fn onehot_table(speakers: &[String], dim: usize, rng: &mut impl Rng) -> SpeakerTable {
    SpeakerTable {
        speakers: speakers.to_vec(),
        table: Embedding::new(rng, speakers.len(), dim, 1.0),
    }
}

const EMBEDDINGS_FORMAT: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingFile {
    format_version: u32,
    embeddings: Vec<SpeakerEmbedding>,
}

pub fn write_embeddings(path: &Path, embeddings: &[SpeakerEmbedding]) -> Result<()> {
    let file = EmbeddingFile {
        format_version: EMBEDDINGS_FORMAT,
        embeddings: embeddings.to_vec(),
    };
    let text = serde_json::to_string_pretty(&file).expect("embeddings serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<SpeakerEmbedding>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: EmbeddingFile =
        serde_json::from_str(&text).map_err(|e| Error::container(path, e.to_string()))?;
    if file.format_version != EMBEDDINGS_FORMAT {
        return Err(Error::container(
            path,
            format!("unsupported format version {}", file.format_version),
        ));
    }
    for e in &file.embeddings {
        if e.vector.len() != EMBEDDING_DIM {
            return Err(Error::container(
                path,
                format!("{}: {} values, expected {EMBEDDING_DIM}", e.speaker_id, e.vector.len()),
            ));
        }
    }
    Ok(file.embeddings)
}

/// Deterministic fallback encoder: 50 log-mel energies and their 50 cepstral coefficients per
/// 10 ms frame.
pub struct MfccStatsEncoder {
    cep: MelCepstrum,
}

impl Default for MfccStatsEncoder {
    fn default() -> Self {
        Self {
            cep: MelCepstrum::new(400, FRAME_DIM / 2, FRAME_DIM / 2, SAMPLE_RATE as f64),
        }
    }
}

impl SpeechEncoder for MfccStatsEncoder {
    fn name(&self) -> &str {
        "mfcc-stats"
    }

    fn encode(&self, clip: &WaveformClip) -> Result<EncoderFrames> {
        let n = clip.samples.len() / FRAME_HOP;
        let mut frames = Array2::zeros((n, FRAME_DIM));
        for m in 0..n {
            let center = m * FRAME_HOP + FRAME_HOP / 2;
            let mel = self.cep.log_mel(&clip.samples, center);
            let cep = crate::dsp::dct_ii(&mel, FRAME_DIM / 2);
            let mut row = frames.row_mut(m);
            row.slice_mut(s![..FRAME_DIM / 2]).assign(&Array1::from(mel));
            row.slice_mut(s![FRAME_DIM / 2..]).assign(&Array1::from(cep));
        }
        Ok(EncoderFrames {
            frames,
            source: clip.utterance_id.clone(),
        })
    }
}

/// Reads frames computed by an external encoder from `<dir>/<utterance id>.frames`: one frame
/// per line, 100 whitespace-separated reals, 100 frames per second.
pub struct PrecomputedEncoder {
    dir: PathBuf,
}

impl PrecomputedEncoder {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, utterance_id: &str) -> PathBuf {
        self.dir.join(format!("{}.frames", utterance_id.replace('/', "__")))
    }

    fn load(&self, utterance_id: &str) -> Result<Array2<f64>> {
        let path = self.path_for(utterance_id);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut values = Vec::new();
        let mut rows = 0;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let before = values.len();
            for tok in line.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.clone(),
                    line: i + 1,
                    reason: format!("bad value {tok:?}"),
                })?);
            }
            if values.len() - before != FRAME_DIM {
                return Err(Error::Parse {
                    path: path.clone(),
                    line: i + 1,
                    reason: format!("{} values, expected {FRAME_DIM}", values.len() - before),
                });
            }
            rows += 1;
        }
        Ok(Array2::from_shape_vec((rows, FRAME_DIM), values).expect("shape checked"))
    }
}

pub fn write_frames(path: &Path, frames: &EncoderFrames) -> Result<()> {
    let mut text = String::new();
    for row in frames.frames.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl SpeechEncoder for PrecomputedEncoder {
    fn name(&self) -> &str {
        "precomputed"
    }

    fn encode(&self, clip: &WaveformClip) -> Result<EncoderFrames> {
        let frames = self.load(&clip.utterance_id)?;
        let n = (clip.samples.len() / FRAME_HOP).min(frames.nrows());
        Ok(EncoderFrames {
            frames: frames.slice(s![..n, ..]).to_owned(),
            source: clip.utterance_id.clone(),
        })
    }

    fn encode_segment(&self, clip: &WaveformClip, start: usize, len: usize) -> Result<EncoderFrames> {
        let frames = self.load(&clip.utterance_id)?;
        let lo = (start / FRAME_HOP).min(frames.nrows());
        let hi = (lo + len / FRAME_HOP).min(frames.nrows());
        Ok(EncoderFrames {
            frames: frames.slice(s![lo..hi, ..]).to_owned(),
            source: format!("{}@{start}+{len}", clip.utterance_id),
        })
    }
}

/// Fully convolutional waveform encoder: strided stack with overall decimation 160.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvEncoder {
    pub layers: Vec<Conv1d>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvEncoderConfig {
    /// `(out_channels, kernel, stride)` per layer; the last layer must output 100 channels.
    pub layers: Vec<(usize, usize, usize)>,
}

impl Default for ConvEncoderConfig {
    fn default() -> Self {
        Self {
            layers: vec![(32, 10, 5), (64, 8, 4), (64, 8, 4), (FRAME_DIM, 4, 2)],
        }
    }
}

struct ConvTrace {
    /// Inputs to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    patches: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ConvEncoder {
    pub fn new(cfg: &ConvEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let decimation: usize = cfg.layers.iter().map(|l| l.2).product();
        if decimation != FRAME_HOP {
            return Err(Error::Config(format!(
                "encoder strides multiply to {decimation}, need {FRAME_HOP}"
            )));
        }
        if cfg.layers.last().map(|l| l.0) != Some(FRAME_DIM) {
            return Err(Error::Config(format!("last encoder layer must have {FRAME_DIM} channels")));
        }
        let mut c_in = 1;
        let mut layers = Vec::new();
        for &(c_out, k, st) in &cfg.layers {
            if k < st {
                return Err(Error::Config(format!("kernel {k} shorter than stride {st}")));
            }
            layers.push(Conv1d::new(rng, c_in, c_out, k, st));
            c_in = c_out;
        }
        Ok(Self { layers })
    }

    fn trace(&self, samples: &[f64]) -> ConvTrace {
        let mut x = Array2::from_shape_vec((samples.len(), 1), samples.to_vec()).unwrap();
        let mut inputs = Vec::new();
        let mut patches = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, p) = layer.forward(&x.view());
            inputs.push(x);
            patches.push(p);
            x = if i < last { relu(&y) } else { y };
        }
        ConvTrace {
            inputs,
            patches,
            output: x,
        }
    }

    fn backward(&self, trace: &ConvTrace, d_out: &ArrayView2<f64>, grad: &mut ConvEncoder) {
        let mut d = d_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                // trace.inputs[i + 1] is relu(y_i)
                d = relu_backward(&trace.inputs[i + 1], &d);
            }
            d = self.layers[i].backward(
                trace.inputs[i].nrows(),
                &trace.patches[i],
                &d.view(),
                &mut grad.layers[i],
            );
        }
    }

    /// Input sample range `[lo, hi)` that frame `m` depends on (may extend past the clip).
    pub fn receptive_field(&self, m: usize) -> (isize, isize) {
        let (mut lo, mut hi) = (m as isize, m as isize + 1);
        for layer in self.layers.iter().rev() {
            let pad = layer.left_pad() as isize;
            let st = layer.stride as isize;
            lo = lo * st - pad;
            hi = (hi - 1) * st - pad + layer.kernel as isize;
        }
        (lo, hi)
    }
}

impl Parameters for ConvEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("conv{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
    }
}

impl SpeechEncoder for ConvEncoder {
    fn name(&self) -> &str {
        "conv"
    }

    fn encode(&self, clip: &WaveformClip) -> Result<EncoderFrames> {
        Ok(EncoderFrames {
            frames: self.trace(&clip.samples).output,
            source: clip.utterance_id.clone(),
        })
    }
}

const ENCODER_KIND: &str = "conv-encoder";

impl ConvEncoder {
    pub fn save(&self, path: &Path) -> Result<()> {
        let shapes: Vec<(usize, usize, usize)> = self
            .layers
            .iter()
            .map(|l| (l.c_out(), l.kernel, l.stride))
            .collect();
        let meta = serde_json::to_string(&ConvEncoderConfig { layers: shapes }).unwrap();
        container::write(path, ENCODER_KIND, &meta, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let contents = container::read(path, ENCODER_KIND)?;
        let cfg: ConvEncoderConfig = serde_json::from_str(&contents.metadata)
            .map_err(|e| Error::container(path, e.to_string()))?;
        let mut enc = ConvEncoder::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        container::load_into(path, &contents, &mut enc)?;
        Ok(enc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerKind {
    /// Reconstructs the 160 samples under each frame.
    Waveform,
    /// 25 ms log power spectrum (257 bins).
    LogPowerSpectrum,
    /// 20 MFCCs from 40 mel bands.
    Mfcc,
}

impl WorkerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "waveform" => Ok(Self::Waveform),
            "lps" | "log_power_spectrum" => Ok(Self::LogPowerSpectrum),
            "mfcc" => Ok(Self::Mfcc),
            other => Err(Error::Config(format!("unknown worker {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Waveform => "waveform",
            Self::LogPowerSpectrum => "lps",
            Self::Mfcc => "mfcc",
        }
    }
}

/// Computes regression targets for a worker, one row per encoder frame.
struct TargetExtractor {
    lps: SpectralAnalyzer,
    mfcc: MelCepstrum,
}

impl TargetExtractor {
    fn new() -> Self {
        Self {
            lps: SpectralAnalyzer::new(400),
            mfcc: MelCepstrum::new(400, 40, 20, SAMPLE_RATE as f64),
        }
    }

    fn dim(&self, kind: WorkerKind) -> usize {
        match kind {
            WorkerKind::Waveform => FRAME_HOP,
            WorkerKind::LogPowerSpectrum => self.lps.n_bins(),
            WorkerKind::Mfcc => 20,
        }
    }

    fn targets(&self, kind: WorkerKind, samples: &[f64]) -> Array2<f64> {
        let n = samples.len() / FRAME_HOP;
        let dim = self.dim(kind);
        let mut out = Array2::zeros((n, dim));
        for m in 0..n {
            let center = m * FRAME_HOP + FRAME_HOP / 2;
            let row: Vec<f64> = match kind {
                WorkerKind::Waveform => samples[m * FRAME_HOP..(m + 1) * FRAME_HOP].to_vec(),
                WorkerKind::LogPowerSpectrum => self
                    .lps
                    .power(samples, center)
                    .into_iter()
                    .map(|p| (p + 1e-10).ln())
                    .collect(),
                WorkerKind::Mfcc => self.mfcc.cepstrum(samples, center),
            };
            out.row_mut(m).assign(&Array1::from(row));
        }
        out
    }
}

/// Small MLP head regressing z-normalized worker targets from encoder frames.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerHead {
    pub kind: WorkerKind,
    pub hidden: Linear,
    pub out: Linear,
    mean: Array1<f64>,
    std: Array1<f64>,
}

impl Parameters for WorkerHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderWithWorkers {
    encoder: ConvEncoder,
    workers: Vec<WorkerHead>,
}

impl Parameters for EncoderWithWorkers {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        for w in &self.workers {
            w.visit(&join(prefix, &format!("{:?}", w.kind)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        for w in &mut self.workers {
            let name = format!("{:?}", w.kind);
            w.visit_mut(&join(prefix, &name), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub workers: Vec<WorkerKind>,
    pub encoder: ConvEncoderConfig,
    pub steps: usize,
    pub batch: usize,
    pub crop_samples: usize,
    pub worker_hidden: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fixed crops used to measure worker losses before and after training.
    pub eval_crops: usize,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            workers: vec![WorkerKind::Waveform, WorkerKind::LogPowerSpectrum, WorkerKind::Mfcc],
            encoder: ConvEncoderConfig::default(),
            steps: 1000,
            batch: 4,
            crop_samples: SAMPLE_RATE as usize,
            worker_hidden: 128,
            lr: 1e-3,
            seed: 0,
            eval_crops: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderTrainReport {
    pub encoder: ConvEncoder,
    pub initial_loss: BTreeMap<WorkerKind, f64>,
    pub final_loss: BTreeMap<WorkerKind, f64>,
    pub skipped: Vec<String>,
}

struct Crop {
    samples: Vec<f64>,
    targets: Vec<Array2<f64>>,
}

/// Trains the convolutional encoder so that every worker head regresses its target from the
/// encoder frames. Workers are discarded afterwards; the returned encoder is frozen.
pub fn train_encoder(corpus: &[WaveformClip], cfg: &EncoderTrainConfig) -> Result<EncoderTrainReport> {
    if cfg.workers.is_empty() {
        return Err(Error::Config("at least one worker is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let extractor = TargetExtractor::new();
    let mut skipped = Vec::new();
    let usable: Vec<&WaveformClip> = corpus
        .iter()
        .filter(|c| {
            let ok = c.samples.len() >= cfg.crop_samples && c.samples.iter().all(|v| v.is_finite());
            if !ok {
                warn!("encoder training: skipping {}", c.utterance_id);
                skipped.push(c.utterance_id.clone());
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Insufficient(format!(
            "no utterance is at least {} samples long",
            cfg.crop_samples
        )));
    }
    let make_crop = |rng: &mut ChaCha8Rng| -> Crop {
        let clip = usable[rng.random_range(0..usable.len())];
        let start = rng.random_range(0..=clip.samples.len() - cfg.crop_samples);
        let samples = clip.samples[start..start + cfg.crop_samples].to_vec();
        let targets = cfg
            .workers
            .iter()
            .map(|&k| extractor.targets(k, &samples))
            .collect();
        Crop { samples, targets }
    };
    let eval: Vec<Crop> = (0..cfg.eval_crops.max(1)).map(|_| make_crop(&mut rng)).collect();

    let mut workers = Vec::new();
    for (wi, &kind) in cfg.workers.iter().enumerate() {
        let all = ndarray::concatenate(
            Axis(0),
            &eval.iter().map(|c| c.targets[wi].view()).collect::<Vec<_>>(),
        )
        .expect("same width");
        let mean = all.mean_axis(Axis(0)).unwrap();
        let std = all.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-6));
        workers.push(WorkerHead {
            kind,
            hidden: Linear::new(&mut rng, FRAME_DIM, cfg.worker_hidden),
            out: Linear::new(&mut rng, cfg.worker_hidden, extractor.dim(kind)),
            mean,
            std,
        });
    }
    let mut model = EncoderWithWorkers {
        encoder: ConvEncoder::new(&cfg.encoder, &mut rng)?,
        workers,
    };

    let initial_loss = evaluate_workers(&model, &eval);
    info!("encoder training: initial worker losses {initial_loss:?}");
    let mut adam = Adam::new(AdamConfig::default(), model.num_parameters());
    for step in 0..cfg.steps {
        let mut grad = model.zeros_like();
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let crop = make_crop(&mut rng);
            total += crop_loss(&model, &crop, Some(&mut grad), 1.0 / cfg.batch as f64);
        }
        if !total.is_finite() {
            return Err(Error::Numerical(format!("encoder loss diverged at step {step}")));
        }
        adam.step(&mut model, &grad, cfg.lr);
    }
    let final_loss = evaluate_workers(&model, &eval);
    info!("encoder training: final worker losses {final_loss:?}");
    Ok(EncoderTrainReport {
        encoder: model.encoder,
        initial_loss,
        final_loss,
        skipped,
    })
}

fn evaluate_workers(model: &EncoderWithWorkers, crops: &[Crop]) -> BTreeMap<WorkerKind, f64> {
    let mut out = BTreeMap::new();
    for (wi, w) in model.workers.iter().enumerate() {
        let mut sum = 0.0;
        for c in crops {
            let z = model.encoder.trace(&c.samples).output;
            let (_, _, loss) = worker_forward(w, &z, &c.targets[wi]);
            sum += loss;
        }
        out.insert(w.kind, sum / crops.len() as f64);
    }
    out
}

/// Returns `(hidden activation, prediction - normalized target, mse)`.
fn worker_forward(w: &WorkerHead, z: &Array2<f64>, target: &Array2<f64>) -> (Array2<f64>, Array2<f64>, f64) {
    let h = relu(&w.hidden.forward(&z.view()));
    let pred = w.out.forward(&h.view());
    let norm = (target - &w.mean) / &w.std;
    let diff = pred - norm;
    let mse = diff.mapv(|v| v * v).mean().unwrap_or(0.0);
    (h, diff, mse)
}

/// Mean worker loss on one crop; accumulates `weight ×` its gradient when `grad` is given.
fn crop_loss(
    model: &EncoderWithWorkers,
    crop: &Crop,
    grad: Option<&mut EncoderWithWorkers>,
    weight: f64,
) -> f64 {
    let trace = model.encoder.trace(&crop.samples);
    let z = &trace.output;
    let n_workers = model.workers.len() as f64;
    let mut total = 0.0;
    let mut dz = Array2::<f64>::zeros(z.dim());
    let mut grad = grad;
    for (wi, w) in model.workers.iter().enumerate() {
        let (h, diff, mse) = worker_forward(w, z, &crop.targets[wi]);
        total += mse / n_workers;
        if let Some(g) = grad.as_deref_mut() {
            let scale = 2.0 * weight / (n_workers * diff.len() as f64);
            let d_pred = diff * scale;
            let gw = &mut g.workers[wi];
            let dh = w.out.backward(&h.view(), &d_pred.view(), &mut gw.out);
            let dh = relu_backward(&h, &dh);
            dz += &w.hidden.backward(&z.view(), &dh.view(), &mut gw.hidden);
        }
    }
    if let Some(g) = grad {
        model.encoder.backward(&trace, &dz.view(), &mut g.encoder);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_clip(n: usize, seed: u64, id: &str) -> WaveformClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WaveformClip::new((0..n).map(|_| rng.random_range(-0.3..0.3)).collect(), "spk", id)
    }

    #[test]
    fn conv_encoder_decimates_by_160() {
        let enc = ConvEncoder::new(&ConvEncoderConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let f = encode_frames(&noise_clip(16000, 1, "u"), &enc).unwrap();
        assert_eq!(f.frames.dim(), (100, FRAME_DIM));
        assert!(encode_frames(&noise_clip(100, 1, "u"), &enc).is_err());
        let (lo, hi) = enc.receptive_field(10);
        assert!(lo <= 1600 && hi >= 1760);
    }

    #[test]
    fn encoder_frame_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ConvEncoderConfig {
            layers: vec![(3, 10, 5), (4, 8, 4), (5, 8, 4), (FRAME_DIM, 4, 2)],
        };
        let enc = ConvEncoder::new(&cfg, &mut rng).unwrap();
        let x = noise_clip(800, 2, "u").samples;
        let weights = Array2::from_shape_fn((5, FRAME_DIM), |(i, j)| ((i * 31 + j * 7) % 11) as f64 / 11.0 - 0.5);
        let loss = |e: &ConvEncoder| (&e.trace(&x).output * &weights).sum();
        let trace = enc.trace(&x);
        let mut grad = enc.zeros_like();
        enc.backward(&trace, &weights.view(), &mut grad);
        let analytic = grad.flatten();
        let base = enc.flatten();
        let h = 1e-6;
        for idx in (0..base.len()).step_by(97) {
            let mut plus = enc.clone();
            let mut minus = enc.clone();
            let mut k = 0;
            plus.visit_mut("", &mut |_, v| {
                for x in v.iter_mut() {
                    if k == idx {
                        *x += h;
                    }
                    k += 1;
                }
            });
            k = 0;
            minus.visit_mut("", &mut |_, v| {
                for x in v.iter_mut() {
                    if k == idx {
                        *x -= h;
                    }
                    k += 1;
                }
            });
            let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic[idx];
            assert!((a - num).abs() <= 1e-6 * a.abs().max(num.abs()).max(1e-3), "{idx}: {a} vs {num}");
        }
    }

    #[test]
    fn averaging_rules() {
        let mut f = Array2::from_elem((4, FRAME_DIM), 0.25);
        let frames = EncoderFrames {
            frames: f.clone(),
            source: "u".into(),
        };
        let p = Provenance::EncoderAveraged {
            seed_id: "s".into(),
            seconds: 1.0,
        };
        let e = average_embedding(&frames, "spk", p.clone()).unwrap();
        assert!(e.vector.iter().all(|&v| v == 0.25));
        f[[0, 0]] = 1.0;
        f[[1, 0]] = 3.0;
        let two = EncoderFrames {
            frames: f.slice(s![..2, ..]).to_owned(),
            source: "u".into(),
        };
        assert_eq!(average_embedding(&two, "spk", p.clone()).unwrap().vector[0], 2.0);
        let empty = EncoderFrames {
            frames: Array2::zeros((0, FRAME_DIM)),
            source: "u".into(),
        };
        assert!(average_embedding(&empty, "spk", p).is_err());
    }

    #[test]
    fn seed_sampling() {
        let pool: Vec<WaveformClip> = (0..4)
            .map(|i| noise_clip(30 * 16000, i, &format!("u{i}")))
            .collect();
        let one = sample_seed(&pool, 1.0, 5).unwrap();
        assert_eq!(one.total_samples(), 16000);
        assert_eq!(sample_seed(&pool, 1.0, 5).unwrap(), one);
        let all = sample_seed(&pool, 120.0, 9).unwrap();
        assert_eq!(all.total_samples(), 120 * 16000);
        let mut covered: Vec<(usize, usize)> = all.chunks.iter().map(|c| (c.utterance, c.start)).collect();
        covered.sort();
        covered.dedup();
        assert_eq!(covered.len(), 120);
        match sample_seed(&pool, 121.0, 1) {
            Err(Error::Insufficient(msg)) => assert!(msg.contains("short by 1.00 s"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seed_embedding_has_fixed_width() {
        let pool = vec![noise_clip(3 * 16000 + 500, 1, "u0")];
        let enc = MfccStatsEncoder::default();
        for t in [1.0, 2.5, 3.0] {
            let seed = sample_seed(&pool, t, 2).unwrap();
            let e = embed_seed(&seed, &pool, &enc).unwrap();
            assert_eq!(e.vector.len(), EMBEDDING_DIM);
        }
    }

    #[test]
    fn onehot_lookup() {
        let ids: Vec<String> = (0..40).map(|i| format!("s{i}")).collect();
        let t = onehot_table(&ids, EMBEDDING_DIM, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(t.table.table.dim(), (40, 100));
        assert_eq!(t.lookup(3).unwrap(), t.lookup(3).unwrap());
        assert!(matches!(t.lookup(41), Err(Error::UnknownSpeaker(_))));
    }

    #[test]
    fn precomputed_frames_are_sliced_by_time() {
        let dir = tempfile::tempdir().unwrap();
        let clip = noise_clip(32000, 3, "spk/u1");
        let frames = MfccStatsEncoder::default().encode(&clip).unwrap();
        let enc = PrecomputedEncoder::new(dir.path());
        write_frames(&enc.path_for(&clip.utterance_id), &frames).unwrap();
        let all = enc.encode(&clip).unwrap();
        assert_eq!(all.frames, frames.frames);
        let seg = enc.encode_segment(&clip, 16000, 8000).unwrap();
        assert_eq!(seg.frames, frames.frames.slice(s![100..150, ..]).to_owned());
    }

    #[test]
    fn embedding_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.json");
        let e = SpeakerEmbedding {
            speaker_id: "spk".into(),
            provenance: Provenance::EncoderAveraged {
                seed_id: "seed".into(),
                seconds: 60.0,
            },
            vector: (0..100).map(|i| i as f64 / 7.0).collect(),
        };
        write_embeddings(&path, &[e.clone()]).unwrap();
        assert_eq!(read_embeddings(&path).unwrap(), vec![e]);
    }
}
