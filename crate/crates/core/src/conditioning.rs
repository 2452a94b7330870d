//! Per-Δt linguistic-prosodic conditioning: label parsing, duration features, F0/UV tracks,
//! frame upsampling and speaker-dependent z-normalization.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::audio::WaveformClip;
use crate::error::{Error, Result};

/// HTK label times are in units of 100 ns.
const HTK_UNITS_PER_SECOND: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Categorical,
    Numeric,
}

/// One answer extracted from a full-context label: group 1 of `pattern`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFeature {
    pub name: String,
    pub kind: FeatureKind,
    pub pattern: String,
    /// Name of the vocabulary mapping categorical answers to ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<String>,
}

/// Declares which answers are read from each label line and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    /// Value used for numeric answers that are absent or not numbers (`x` in HTS labels).
    pub missing_value: f64,
    pub features: Vec<LabelFeature>,
    /// Vocabularies; id 0 is reserved for unknown symbols, so entry `i` maps to id `i + 1`.
    pub vocabularies: BTreeMap<String, Vec<String>>,
}

pub const DEFAULT_FEATURE_COUNT: usize = 53;

pub const PHONES: &[&str] = &[
    "x", "sil", "pau", "aa", "ae", "ah", "ao", "aw", "ay", "b", "ch", "d", "dh", "eh", "er", "ey",
    "f", "g", "hh", "ih", "iy", "jh", "k", "l", "m", "n", "ng", "ow", "oy", "p", "r", "s", "sh",
    "t", "th", "uh", "uw", "v", "w", "y", "z", "zh",
];

const HTS_NUMERIC_FIELDS: &[(&str, &str)] = &[
    ("p6", r"@([^_]+)_"),
    ("p7", r"@[^_]+_([^/]+)/A:"),
    ("a1", r"/A:([^_]+)_"),
    ("a2", r"/A:[^_]+_([^_]+)_"),
    ("a3", r"/A:[^_]+_[^_]+_([^/]+)/B:"),
    ("b1", r"/B:([^-]+)-"),
    ("b2", r"/B:[^-]+-([^-]+)-"),
    ("b3", r"/B:[^-]+-[^-]+-([^@]+)@"),
    ("b4", r"/B:[^@]+@([^-]+)-"),
    ("b5", r"/B:[^@]+@[^-]+-([^&]+)&"),
    ("b6", r"/B:[^&]+&([^-]+)-"),
    ("b7", r"/B:[^&]+&[^-]+-([^#]+)#"),
    ("b8", r"/B:[^#]+#([^-]+)-"),
    ("b9", r"/B:[^#]+#[^-]+-([^$]+)\$"),
    ("b10", r"/B:[^$]+\$([^-]+)-"),
    ("b11", r"/B:[^$]+\$[^-]+-([^!]+)!"),
    ("b12", r"/B:[^!]+!([^-]+)-"),
    ("b13", r"/B:[^!]+![^-]+-([^;]+);"),
    ("b14", r"/B:[^;]+;([^-]+)-"),
    ("b15", r"/B:[^;]+;[^-]+-([^|]+)\|"),
    ("b16", r"/B:[^|]+\|([^/]+)/C:"),
    ("c1", r"/C:([^+]+)\+"),
    ("c2", r"/C:[^+]+\+([^+]+)\+"),
    ("c3", r"/C:[^+]+\+[^+]+\+([^/]+)/D:"),
    ("d1", r"/D:([^_]+)_"),
    ("d2", r"/D:[^_]+_([^/]+)/E:"),
    ("e1", r"/E:([^+]+)\+"),
    ("e2", r"/E:[^+]+\+([^@]+)@"),
    ("e3", r"/E:[^@]+@([^+]+)\+"),
    ("e4", r"/E:[^@]+@[^+]+\+([^&]+)&"),
    ("e5", r"/E:[^&]+&([^+]+)\+"),
    ("e6", r"/E:[^&]+&[^+]+\+([^#]+)#"),
    ("e7", r"/E:[^#]+#([^+]+)\+"),
    ("e8", r"/E:[^#]+#[^+]+\+([^/]+)/F:"),
    ("f1", r"/F:([^_]+)_"),
    ("f2", r"/F:[^_]+_([^/]+)/G:"),
    ("g1", r"/G:([^_]+)_"),
    ("g2", r"/G:[^_]+_([^/]+)/H:"),
    ("h1", r"/H:([^=]+)="),
    ("h2", r"/H:[^=]+=([^@]+)@"),
    ("h3", r"/H:[^@]+@([^=]+)="),
    ("h4", r"/H:[^@]+@[^=]+=([^|]+)\|"),
    ("h5", r"/H:[^|]+\|([^/]+)/I:"),
    ("i1", r"/I:([^_]+)_"),
    ("i2", r"/I:[^_]+_([^/]+)/J:"),
    ("j1", r"/J:([^+]+)\+"),
    ("j2", r"/J:[^+]+\+([^-]+)-"),
    ("j3", r"/J:[^+]+\+[^-]+-(.+)$"),
];

impl Default for FeatureSchema {
    /// HTS English full-context labels: quinphone identities as categorical answers, the 48
    /// positional/count fields as numeric answers.
    fn default() -> Self {
        let quinphone = [
            ("ll", r"^([^\^]+)\^"),
            ("l", r"\^([^-]+)-"),
            ("c", r"-([^+]+)\+"),
            ("r", r"\+([^=]+)="),
            ("rr", r"=([^@]+)@"),
        ];
        let mut features: Vec<LabelFeature> = quinphone
            .iter()
            .map(|(name, pattern)| LabelFeature {
                name: (*name).to_string(),
                kind: FeatureKind::Categorical,
                pattern: (*pattern).to_string(),
                vocab: Some("phones".into()),
            })
            .collect();
        features.extend(HTS_NUMERIC_FIELDS.iter().map(|(name, pattern)| LabelFeature {
            name: (*name).to_string(),
            kind: FeatureKind::Numeric,
            pattern: (*pattern).to_string(),
            vocab: None,
        }));
        let mut vocabularies = BTreeMap::new();
        vocabularies.insert(
            "phones".to_string(),
            PHONES.iter().map(|p| p.to_string()).collect(),
        );
        Self {
            missing_value: 0.0,
            features,
            vocabularies,
        }
    }
}

impl FeatureSchema {
    pub fn from_toml(text: &str) -> Result<Self> {
        let schema: FeatureSchema =
            toml::from_str(text).map_err(|e| Error::Config(format!("feature schema: {e}")))?;
        schema.compile()?;
        Ok(schema)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn n_categorical(&self) -> usize {
        self.features
            .iter()
            .filter(|f| f.kind == FeatureKind::Categorical)
            .count()
    }

    pub fn n_numeric(&self) -> usize {
        self.features.len() - self.n_categorical()
    }

    /// Vocabulary size (including the unknown id) of every categorical feature, in order.
    pub fn categorical_cardinalities(&self) -> Vec<usize> {
        self.features
            .iter()
            .filter(|f| f.kind == FeatureKind::Categorical)
            .map(|f| {
                f.vocab
                    .as_ref()
                    .and_then(|v| self.vocabularies.get(v))
                    .map_or(1, |v| v.len() + 1)
            })
            .collect()
    }

    pub fn compile(&self) -> Result<CompiledSchema> {
        let mut lookups: HashMap<String, HashMap<String, u32>> = HashMap::new();
        for (name, words) in &self.vocabularies {
            let map = words
                .iter()
                .enumerate()
                .map(|(i, w)| (w.clone(), i as u32 + 1))
                .collect();
            lookups.insert(name.clone(), map);
        }
        let mut features = Vec::with_capacity(self.features.len());
        for f in &self.features {
            let re = Regex::new(&f.pattern)
                .map_err(|e| Error::Config(format!("feature {}: {e}", f.name)))?;
            if re.captures_len() < 2 {
                return Err(Error::Config(format!(
                    "feature {}: pattern has no capture group",
                    f.name
                )));
            }
            let vocab = match (f.kind, &f.vocab) {
                (FeatureKind::Categorical, Some(v)) => Some(
                    lookups
                        .get(v)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("unknown vocabulary {v}")))?,
                ),
                (FeatureKind::Categorical, None) => {
                    return Err(Error::Config(format!(
                        "categorical feature {} has no vocabulary",
                        f.name
                    )))
                }
                _ => None,
            };
            features.push((f.kind, re, vocab));
        }
        Ok(CompiledSchema {
            features,
            missing_value: self.missing_value,
        })
    }
}

pub struct CompiledSchema {
    features: Vec<(FeatureKind, Regex, Option<HashMap<String, u32>>)>,
    missing_value: f64,
}

impl CompiledSchema {
    /// Extracts `(categorical ids, numeric answers)` from one full-context label.
    pub fn answers(&self, label: &str) -> (Vec<u32>, Vec<f64>) {
        let mut cat = Vec::new();
        let mut num = Vec::new();
        for (kind, re, vocab) in &self.features {
            let cap = re
                .captures(label)
                .and_then(|c| c.get(1))
                .map(|m| m.as_str());
            match kind {
                FeatureKind::Categorical => {
                    let id = cap
                        .and_then(|s| vocab.as_ref().and_then(|v| v.get(s)))
                        .copied()
                        .unwrap_or(0);
                    cat.push(id);
                }
                FeatureKind::Numeric => num.push(
                    cap.and_then(|s| s.parse::<f64>().ok())
                        .filter(|v| v.is_finite())
                        .unwrap_or(self.missing_value),
                ),
            }
        }
        (cat, num)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeAnnotation {
    pub start_time: f64,
    pub end_time: f64,
    pub categorical: Vec<u32>,
    pub numeric: Vec<f64>,
}

impl PhonemeAnnotation {
    pub fn duration(&self) -> f64 {
        self.end_time - self.start_time
    }
}

pub fn parse_label_file(path: &Path, schema: &CompiledSchema) -> Result<Vec<PhonemeAnnotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, schema, path)
}

/// Parses time-aligned label lines `start end full-context-label` (HTK 100 ns units).
pub fn parse_labels(
    text: &str,
    schema: &CompiledSchema,
    path: &Path,
) -> Result<Vec<PhonemeAnnotation>> {
    let mut out: Vec<PhonemeAnnotation> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(s), Some(e), Some(label)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err("expected `start end label`".into()));
        };
        let parse_time = |t: &str| -> Result<f64> {
            t.parse::<i64>()
                .map(|v| v as f64 / HTK_UNITS_PER_SECOND)
                .map_err(|_| err(format!("bad timestamp {t:?}")))
        };
        let start = parse_time(s)?;
        let end = parse_time(e)?;
        if end <= start {
            return Err(err(format!("end {end} s not after start {start} s")));
        }
        if let Some(prev) = out.last() {
            if start < prev.end_time {
                return Err(err(format!(
                    "phone starting at {start} s overlaps or precedes previous phone ending at {} s",
                    prev.end_time
                )));
            }
        }
        let (categorical, numeric) = schema.answers(label);
        out.push(PhonemeAnnotation {
            start_time: start,
            end_time: end,
            categorical,
            numeric,
        });
    }
    Ok(out)
}

/// Shifts label boundaries through a silence-trimming time map, dropping phones that vanish.
pub fn remap_annotations(
    ann: &[PhonemeAnnotation],
    sample_rate: u32,
    map: impl Fn(usize) -> usize,
) -> Vec<PhonemeAnnotation> {
    let sr = sample_rate as f64;
    ann.iter()
        .filter_map(|a| {
            let s = map((a.start_time * sr).round() as usize);
            let e = map((a.end_time * sr).round() as usize);
            (e > s).then(|| PhonemeAnnotation {
                start_time: s as f64 / sr,
                end_time: e as f64 / sr,
                ..a.clone()
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DurationFeature {
    /// Index of the phone covering the interval midpoint.
    pub phone: usize,
    /// Total duration of that phone, seconds.
    pub absolute: f64,
    /// Position of the interval midpoint inside the phone, in [0, 1].
    pub relative: f64,
}

/// Duration features for `n_frames` consecutive intervals of `frame_size` samples.
///
/// Midpoints falling past the last phone by at most `edge_tolerance` seconds are attributed
/// to the last phone.
pub fn append_duration_features(
    ann: &[PhonemeAnnotation],
    n_frames: usize,
    frame_size: usize,
    sample_rate: u32,
    edge_tolerance: f64,
) -> Result<Vec<DurationFeature>> {
    let sr = sample_rate as f64;
    let mut out = Vec::with_capacity(n_frames);
    let mut p = 0usize;
    for n in 0..n_frames {
        let mid = (n * frame_size) as f64 / sr + frame_size as f64 / (2.0 * sr);
        while p < ann.len() && ann[p].end_time <= mid {
            p += 1;
        }
        let idx = if p < ann.len() && ann[p].start_time <= mid {
            p
        } else if p == ann.len() && !ann.is_empty() && mid - ann[p - 1].end_time <= edge_tolerance
        {
            p - 1
        } else {
            return Err(Error::Alignment(format!(
                "interval {n} (midpoint {mid:.4} s) not covered by any phone"
            )));
        };
        let a = &ann[idx];
        let relative = ((mid - a.start_time) / a.duration()).clamp(0.0, 1.0);
        out.push(DurationFeature {
            phone: idx,
            absolute: a.duration(),
            relative,
        });
    }
    Ok(out)
}

/// Per-Δt log-F0 (natural log of Hz) with voicing flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsodyTrack {
    pub log_f0: Vec<f64>,
    pub uv: Vec<u8>,
    /// True where `log_f0` was filled in rather than measured (exactly the unvoiced frames).
    pub filled: Vec<bool>,
}

impl ProsodyTrack {
    pub fn len(&self) -> usize {
        self.log_f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_f0.is_empty()
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.uv.is_empty() {
            return 0.0;
        }
        self.uv.iter().filter(|&&v| v == 1).count() as f64 / self.uv.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F0Config {
    pub window_ms: f64,
    /// Frame hop in samples; equal to Δt so one value lands on every conditioning frame.
    pub hop_samples: usize,
    pub min_hz: f64,
    pub max_hz: f64,
    /// Minimum normalized autocorrelation peak for a voiced decision.
    pub voicing_threshold: f64,
    /// Frames whose RMS is below this are unvoiced without analysis.
    pub silence_rms: f64,
    /// Candidate peaks within this fraction of the best are preferred at shorter lags.
    pub octave_ratio: f64,
    pub default_f0_hz: f64,
}

impl Default for F0Config {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_samples: 80,
            min_hz: 50.0,
            max_hz: 500.0,
            voicing_threshold: 0.3,
            silence_rms: 1e-4,
            octave_ratio: 0.9,
            default_f0_hz: 100.0,
        }
    }
}

/// Autocorrelation pitch tracker, one estimate per `hop_samples` interval.
pub fn extract_f0_uv(clip: &WaveformClip, cfg: &F0Config) -> ProsodyTrack {
    let x = &clip.samples;
    let sr = clip.sample_rate as f64;
    let n_frames = x.len().div_ceil(cfg.hop_samples);
    let win = (cfg.window_ms * sr / 1000.0).round() as usize;
    let min_lag = (sr / cfg.max_hz).floor().max(2.0) as usize;
    let max_lag = (sr / cfg.min_hz).ceil() as usize;
    let at = |i: isize| -> f64 {
        if i < 0 || i as usize >= x.len() {
            0.0
        } else {
            x[i as usize]
        }
    };

    let mut f0 = vec![f64::NAN; n_frames];
    let mut corr = vec![0.0; max_lag + 2];
    for (n, slot) in f0.iter_mut().enumerate() {
        let center = (n * cfg.hop_samples + cfg.hop_samples / 2) as isize;
        let start = center - (win / 2) as isize;
        let a: Vec<f64> = (0..win as isize).map(|k| at(start + k)).collect();
        let ea: f64 = a.iter().map(|v| v * v).sum();
        if (ea / win as f64).sqrt() < cfg.silence_rms {
            continue;
        }
        let ext: Vec<f64> = (0..(win + max_lag + 1) as isize)
            .map(|k| at(start + k))
            .collect();
        for lag in min_lag - 1..=max_lag + 1 {
            let b = &ext[lag..lag + win];
            let eb: f64 = b.iter().map(|v| v * v).sum();
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            corr[lag] = if eb > 0.0 { dot / (ea * eb).sqrt() } else { 0.0 };
        }
        let peaks: Vec<usize> = (min_lag..=max_lag)
            .filter(|&l| corr[l] >= corr[l - 1] && corr[l] >= corr[l + 1])
            .collect();
        let Some(best) = peaks
            .iter()
            .map(|&l| corr[l])
            .max_by(f64::total_cmp)
        else {
            continue;
        };
        if best < cfg.voicing_threshold {
            continue;
        }
        let lag = peaks
            .iter()
            .copied()
            .find(|&l| corr[l] >= cfg.octave_ratio * best)
            .unwrap();
        let (ym, y0, yp) = (corr[lag - 1], corr[lag], corr[lag + 1]);
        let denom = ym - 2.0 * y0 + yp;
        let offset = if denom.abs() > 1e-12 {
            (0.5 * (ym - yp) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        *slot = sr / (lag as f64 + offset);
    }

    let uv: Vec<u8> = f0.iter().map(|v| u8::from(v.is_finite())).collect();
    let measured: Vec<Option<f64>> = f0
        .iter()
        .map(|v| v.is_finite().then(|| v.ln()))
        .collect();
    let log_f0 = fill_unvoiced(&measured, cfg.default_f0_hz.ln());
    ProsodyTrack {
        log_f0,
        filled: uv.iter().map(|&v| v == 0).collect(),
        uv,
    }
}

/// Linear interpolation across gaps, constant extrapolation at the ends, `default` if empty.
pub fn fill_unvoiced(values: &[Option<f64>], default: f64) -> Vec<f64> {
    let known: Vec<(usize, f64)> = values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i, v)))
        .collect();
    if known.is_empty() {
        return vec![default; values.len()];
    }
    let mut out = vec![0.0; values.len()];
    let mut k = 0;
    for (i, slot) in out.iter_mut().enumerate() {
        while k + 1 < known.len() && known[k + 1].0 <= i {
            k += 1;
        }
        let (i0, v0) = known[k];
        *slot = if i <= i0 {
            v0
        } else if k + 1 < known.len() {
            let (i1, v1) = known[k + 1];
            v0 + (v1 - v0) * (i - i0) as f64 / (i1 - i0) as f64
        } else {
            v0
        };
    }
    out
}

/// A single Δt conditioning vector. Categorical ids are expanded into learned embeddings by
/// the model; `numeric` follows the [`FrameLayout`] ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningFrame {
    pub categorical: Vec<u32>,
    pub numeric: Vec<f64>,
}

/// Column layout of [`ConditioningFrame::numeric`]:
/// `[linguistic numeric answers.., absolute duration, relative duration, (log F0, UV)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLayout {
    pub n_categorical: usize,
    pub n_linguistic: usize,
    pub with_prosody: bool,
}

impl FrameLayout {
    pub fn for_schema(schema: &FeatureSchema, with_prosody: bool) -> Self {
        Self {
            n_categorical: schema.n_categorical(),
            n_linguistic: schema.n_numeric(),
            with_prosody,
        }
    }

    pub fn numeric_dim(&self) -> usize {
        self.n_linguistic + 2 + if self.with_prosody { 2 } else { 0 }
    }

    pub fn absolute_duration(&self) -> usize {
        self.n_linguistic
    }

    pub fn relative_duration(&self) -> usize {
        self.n_linguistic + 1
    }

    pub fn log_f0(&self) -> Option<usize> {
        self.with_prosody.then_some(self.n_linguistic + 2)
    }

    pub fn uv(&self) -> Option<usize> {
        self.with_prosody.then_some(self.n_linguistic + 3)
    }

    /// Columns eligible for z-normalization: everything but relative duration and the
    /// binary UV flag.
    pub fn normalizable(&self) -> Vec<bool> {
        (0..self.numeric_dim())
            .map(|i| i != self.relative_duration() && Some(i) != self.uv())
            .collect()
    }
}

/// Repeats phone answers over their Δt intervals and attaches duration and prosody columns.
pub fn upsample_to_frames(
    ann: &[PhonemeAnnotation],
    durations: &[DurationFeature],
    prosody: Option<&ProsodyTrack>,
) -> Result<Vec<ConditioningFrame>> {
    if let Some(p) = prosody {
        if p.len() != durations.len() {
            return Err(Error::Dimension {
                what: "prosody track frames",
                expected: durations.len(),
                got: p.len(),
            });
        }
    }
    durations
        .iter()
        .enumerate()
        .map(|(n, d)| {
            let a = ann.get(d.phone).ok_or_else(|| {
                Error::Alignment(format!("frame {n} refers to missing phone {}", d.phone))
            })?;
            let mut numeric = a.numeric.clone();
            numeric.push(d.absolute);
            numeric.push(d.relative);
            if let Some(p) = prosody {
                numeric.push(p.log_f0[n]);
                numeric.push(p.uv[n] as f64);
            }
            Ok(ConditioningFrame {
                categorical: a.categorical.clone(),
                numeric,
            })
        })
        .collect()
}

/// Replaces the prosody columns with new values, or drops them when `prosody` is `None`.
pub fn with_prosody(
    frames: &[ConditioningFrame],
    layout: &FrameLayout,
    prosody: Option<&ProsodyTrack>,
) -> Vec<ConditioningFrame> {
    let keep = layout.n_linguistic + 2;
    frames
        .iter()
        .enumerate()
        .map(|(n, f)| {
            let mut numeric = f.numeric[..keep].to_vec();
            if let Some(p) = prosody {
                numeric.push(p.log_f0[n]);
                numeric.push(p.uv[n] as f64);
            }
            ConditioningFrame {
                categorical: f.categorical.clone(),
                numeric,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Whether each numeric column is z-normalized.
    pub normalized: Vec<bool>,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SpeakerStats {
    pub speakers: BTreeMap<String, FeatureStats>,
}

/// Mean/variance accumulator that merges exactly like Chan et al.'s pairwise update.
#[derive(Debug, Clone)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn of(frames: &[ConditioningFrame], dim: usize) -> Self {
        let mut m = Moments {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        };
        for f in frames {
            m.n += 1.0;
            for d in 0..dim {
                let delta = f.numeric[d] - m.mean[d];
                m.mean[d] += delta / m.n;
                m.m2[d] += delta * (f.numeric[d] - m.mean[d]);
            }
        }
        m
    }

    fn merge(&mut self, other: &Moments) {
        if other.n == 0.0 {
            return;
        }
        let n = self.n + other.n;
        for d in 0..self.mean.len() {
            let delta = other.mean[d] - self.mean[d];
            self.mean[d] += delta * other.n / n;
            self.m2[d] += other.m2[d] + delta * delta * self.n * other.n / n;
        }
        self.n = n;
    }
}

/// One utterance's frames, tagged for statistics.
pub struct StatsInput<'a> {
    pub speaker_id: &'a str,
    pub utterance_id: &'a str,
    pub frames: &'a [ConditioningFrame],
}

/// Population mean/std per speaker over the given (training) utterances.
///
/// Partial moments are merged in (speaker, utterance) order, so the result does not depend on
/// the order utterances are supplied in.
pub fn compute_speaker_stats(inputs: &[StatsInput<'_>], layout: &FrameLayout) -> Result<SpeakerStats> {
    const MIN_STD: f64 = 1e-12;
    let dim = layout.numeric_dim();
    let mut sorted: Vec<&StatsInput<'_>> = inputs.iter().collect();
    sorted.sort_by(|a, b| (a.speaker_id, a.utterance_id).cmp(&(b.speaker_id, b.utterance_id)));
    let mut per_speaker: BTreeMap<String, Moments> = BTreeMap::new();
    for inp in sorted {
        if let Some(f) = inp.frames.iter().find(|f| f.numeric.len() != dim) {
            return Err(Error::Dimension {
                what: "numeric conditioning columns",
                expected: dim,
                got: f.numeric.len(),
            });
        }
        let part = Moments::of(inp.frames, dim);
        per_speaker
            .entry(inp.speaker_id.to_string())
            .or_insert_with(|| Moments {
                n: 0.0,
                mean: vec![0.0; dim],
                m2: vec![0.0; dim],
            })
            .merge(&part);
    }
    let eligible = layout.normalizable();
    let mut speakers = BTreeMap::new();
    for (spk, m) in per_speaker {
        if m.n < 2.0 {
            return Err(Error::Insufficient(format!(
                "speaker {spk} has {} frames, need at least 2",
                m.n
            )));
        }
        let std: Vec<f64> = m.m2.iter().map(|v| (v / m.n).max(0.0).sqrt()).collect();
        let normalized: Vec<bool> = (0..dim)
            .map(|d| eligible[d] && std[d] > MIN_STD * m.mean[d].abs().max(1.0))
            .collect();
        let constant = (0..dim).filter(|&d| eligible[d] && !normalized[d]).count();
        if constant > 0 {
            warn!("speaker {spk}: {constant} constant feature columns left unnormalized");
        }
        speakers.insert(
            spk,
            FeatureStats {
                mean: m.mean,
                std,
                normalized,
                frames: m.n as usize,
            },
        );
    }
    Ok(SpeakerStats { speakers })
}

impl SpeakerStats {
    pub fn get(&self, speaker: &str) -> Result<&FeatureStats> {
        self.speakers
            .get(speaker)
            .ok_or_else(|| Error::UnknownSpeaker(speaker.to_string()))
    }

    pub fn merge(&mut self, other: SpeakerStats) {
        self.speakers.extend(other.speakers);
    }

    /// Tab-separated table: `speaker  column  mean  std  normalized`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("speaker\tcolumn\tmean\tstd\tnormalized\tframes\n");
        for (spk, st) in &self.speakers {
            for d in 0..st.mean.len() {
                let _ = writeln!(
                    s,
                    "{spk}\t{d}\t{}\t{}\t{}\t{}",
                    st.mean[d],
                    st.std[d],
                    u8::from(st.normalized[d]),
                    st.frames
                );
            }
        }
        s
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut speakers: BTreeMap<String, FeatureStats> = BTreeMap::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: reason.to_string(),
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(err("expected 6 columns"));
            }
            let column: usize = cols[1].parse().map_err(|_| err("bad column index"))?;
            let mean: f64 = cols[2].parse().map_err(|_| err("bad mean"))?;
            let std: f64 = cols[3].parse().map_err(|_| err("bad std"))?;
            let frames: usize = cols[5].parse().map_err(|_| err("bad frame count"))?;
            let st = speakers.entry(cols[0].to_string()).or_insert(FeatureStats {
                mean: vec![],
                std: vec![],
                normalized: vec![],
                frames,
            });
            if column != st.mean.len() {
                return Err(err("columns out of order"));
            }
            st.mean.push(mean);
            st.std.push(std);
            st.normalized.push(cols[4] == "1");
        }
        Ok(SpeakerStats { speakers })
    }
}

/// `(x - mean) / std` on normalized columns; everything else passes through.
pub fn zscore_normalize(
    frames: &[ConditioningFrame],
    speaker: &str,
    stats: &SpeakerStats,
) -> Result<Vec<ConditioningFrame>> {
    let st = stats.get(speaker)?;
    frames
        .iter()
        .map(|f| {
            if f.numeric.len() != st.mean.len() {
                return Err(Error::Dimension {
                    what: "numeric conditioning columns",
                    expected: st.mean.len(),
                    got: f.numeric.len(),
                });
            }
            let numeric = f
                .numeric
                .iter()
                .enumerate()
                .map(|(d, &x)| {
                    if st.normalized[d] {
                        (x - st.mean[d]) / st.std[d]
                    } else {
                        x
                    }
                })
                .collect();
            Ok(ConditioningFrame {
                categorical: f.categorical.clone(),
                numeric,
            })
        })
        .collect()
}

pub fn zscore_denormalize(
    frames: &[ConditioningFrame],
    speaker: &str,
    stats: &SpeakerStats,
) -> Result<Vec<ConditioningFrame>> {
    let st = stats.get(speaker)?;
    Ok(frames
        .iter()
        .map(|f| ConditioningFrame {
            categorical: f.categorical.clone(),
            numeric: f
                .numeric
                .iter()
                .enumerate()
                .map(|(d, &x)| {
                    if st.normalized[d] {
                        x * st.std[d] + st.mean[d]
                    } else {
                        x
                    }
                })
                .collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_label(ll: &str, l: &str, c: &str, r: &str, rr: &str, pos: usize) -> String {
        format!(
            "{ll}^{l}-{c}+{r}={rr}@{pos}_2/A:0_0_0/B:1-1-2@1-1&1-3#1-2$1-1!0-1;0-1|ah/C:1+1+2/D:0_0/E:content+1@1+2&1+1#0+1/F:content_1/G:0_0/H:3=2@1=1|L-L%/I:0_0/J:3+2-1"
        )
    }

    #[test]
    fn default_schema_has_53_features() {
        let s = FeatureSchema::default();
        assert_eq!(s.features.len(), DEFAULT_FEATURE_COUNT);
        assert_eq!(s.n_categorical(), 5);
        assert_eq!(s.n_numeric(), 48);
        let back = FeatureSchema::from_toml(&s.to_toml()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn extracts_hts_answers() {
        let compiled = FeatureSchema::default().compile().unwrap();
        let (cat, num) = compiled.answers(&full_label("sil", "hh", "ah", "l", "ow", 1));
        let phone = |p: &str| PHONES.iter().position(|q| *q == p).unwrap() as u32 + 1;
        assert_eq!(cat, vec![phone("sil"), phone("hh"), phone("ah"), phone("l"), phone("ow")]);
        assert_eq!(num.len(), 48);
        assert_eq!(num[0], 1.0); // p6
        assert_eq!(num[1], 2.0); // p7
        assert_eq!(num[7], 2.0); // b3
        assert_eq!(num[20], 0.0); // b16 is a vowel name -> missing value
        assert_eq!(num[45], 3.0); // j1
        assert_eq!(num[47], 1.0); // j3
    }

    #[test]
    fn parses_two_phone_file() {
        let compiled = FeatureSchema::default().compile().unwrap();
        let text = format!(
            "0 1000000 {}\n1000000 3000000 {}\n",
            full_label("x", "sil", "hh", "ah", "l", 1),
            full_label("sil", "hh", "ah", "l", "ow", 1)
        );
        let ann = parse_labels(&text, &compiled, Path::new("t.lab")).unwrap();
        assert_eq!(ann.len(), 2);
        assert!((ann[0].duration() - 0.1).abs() < 1e-12);
        assert!((ann[1].duration() - 0.2).abs() < 1e-12);
        assert!(parse_labels("", &compiled, Path::new("e.lab")).unwrap().is_empty());
    }

    #[test]
    fn overlapping_phones_report_line() {
        let compiled = FeatureSchema::default().compile().unwrap();
        let l = full_label("x", "sil", "hh", "ah", "l", 1);
        let text = format!("0 2000000 {l}\n1000000 3000000 {l}\n");
        match parse_labels(&text, &compiled, Path::new("o.lab")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    fn phone(start: f64, end: f64, value: f64) -> PhonemeAnnotation {
        PhonemeAnnotation {
            start_time: start,
            end_time: end,
            categorical: vec![1],
            numeric: vec![value],
        }
    }

    #[test]
    fn relative_duration_ramp() {
        let d = append_duration_features(&[phone(0.0, 0.4, 1.0)], 80, 80, 16000, 0.0).unwrap();
        assert_eq!(d.len(), 80);
        assert!((d[0].relative - 0.00625).abs() < 1e-12);
        assert!((d[79].relative - 0.99375).abs() < 1e-12);
        assert!(d.iter().all(|f| (f.absolute - 0.4).abs() < 1e-12));
        assert!(d.windows(2).all(|w| w[0].relative < w[1].relative));
    }

    #[test]
    fn uncovered_interval_is_an_error() {
        let ann = [phone(0.0, 0.1, 1.0), phone(0.2, 0.3, 1.0)];
        assert!(append_duration_features(&ann, 60, 80, 16000, 0.0).is_err());
        let tail = append_duration_features(&[phone(0.0, 0.1, 1.0)], 21, 80, 16000, 0.0);
        assert!(tail.is_err());
        let tolerated = append_duration_features(&[phone(0.0, 0.1, 1.0)], 21, 80, 16000, 0.01);
        assert_eq!(tolerated.unwrap()[20].phone, 0);
    }

    #[test]
    fn upsampled_frames_repeat_phone_features() {
        let ann = [phone(0.0, 0.2, 3.0), phone(0.2, 0.4, 5.0)];
        let d = append_duration_features(&ann, 80, 80, 16000, 0.0).unwrap();
        let frames = upsample_to_frames(&ann, &d, None).unwrap();
        assert_eq!(frames.len(), 80);
        assert!(frames[..40].iter().all(|f| f.numeric[0] == 3.0));
        assert!(frames[40..].iter().all(|f| f.numeric[0] == 5.0));
        let short = ProsodyTrack {
            log_f0: vec![0.0; 79],
            uv: vec![0; 79],
            filled: vec![true; 79],
        };
        assert!(upsample_to_frames(&ann, &d, Some(&short)).is_err());
    }

    #[test]
    fn fill_interpolates_and_extrapolates() {
        let v = fill_unvoiced(&[None, Some(1.0), None, None, Some(4.0), None], 9.0);
        assert_eq!(v, vec![1.0, 1.0, 2.0, 3.0, 4.0, 4.0]);
        assert_eq!(fill_unvoiced(&[None, None], 9.0), vec![9.0, 9.0]);
    }

    fn frame(values: &[f64]) -> ConditioningFrame {
        ConditioningFrame {
            categorical: vec![],
            numeric: values.to_vec(),
        }
    }

    #[test]
    fn population_stats_and_exclusions() {
        let layout = FrameLayout {
            n_categorical: 0,
            n_linguistic: 2,
            with_prosody: false,
        };
        let frames = vec![frame(&[1.0, 3.0, 0.2, 0.1]), frame(&[3.0, 3.0, 0.4, 0.9])];
        let stats = compute_speaker_stats(
            &[StatsInput {
                speaker_id: "s",
                utterance_id: "u",
                frames: &frames,
            }],
            &layout,
        )
        .unwrap();
        let st = stats.get("s").unwrap();
        assert!((st.mean[0] - 2.0).abs() < 1e-12);
        assert!((st.std[0] - 1.0).abs() < 1e-12);
        assert_eq!(st.normalized, vec![true, false, true, false]);

        let normed = zscore_normalize(&frames, "s", &stats).unwrap();
        assert!((normed[0].numeric[0] + 1.0).abs() < 1e-12);
        assert!((normed[1].numeric[0] - 1.0).abs() < 1e-12);
        assert_eq!(normed[0].numeric[1], 3.0);
        assert_eq!(normed[1].numeric[3], 0.9);
        assert!(zscore_normalize(&frames, "other", &stats).is_err());
    }

    #[test]
    fn single_frame_speaker_rejected() {
        let layout = FrameLayout {
            n_categorical: 0,
            n_linguistic: 1,
            with_prosody: false,
        };
        let frames = vec![frame(&[1.0, 0.1, 0.5])];
        let r = compute_speaker_stats(
            &[StatsInput {
                speaker_id: "s",
                utterance_id: "u",
                frames: &frames,
            }],
            &layout,
        );
        assert!(matches!(r, Err(Error::Insufficient(_))));
    }

    #[test]
    fn stats_tsv_round_trip() {
        let layout = FrameLayout {
            n_categorical: 0,
            n_linguistic: 1,
            with_prosody: true,
        };
        let frames = vec![
            frame(&[1.0, 0.1, 0.5, 4.6, 1.0]),
            frame(&[2.5, 0.3, 0.7, 5.0, 0.0]),
        ];
        let stats = compute_speaker_stats(
            &[StatsInput {
                speaker_id: "s",
                utterance_id: "u",
                frames: &frames,
            }],
            &layout,
        )
        .unwrap();
        let back = SpeakerStats::from_tsv(&stats.to_tsv(), Path::new("stats.tsv")).unwrap();
        assert_eq!(back, stats);
    }
}
