//! Corpus catalog and the base/adaptation split protocol.
//!
//! Corpus layout: `<root>/speakers.tsv` (`speaker<TAB>gender`, `#` comments allowed) and
//! `<root>/<speaker>/<utterance>.wav` with an optional `<utterance>.lab` next to it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{load_waveform, trim_silences, ChannelPolicy, TrimStatus, VadConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f" | "female" => Some(Gender::Female),
            "m" | "male" => Some(Gender::Male),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Gender::Female => "F",
            Gender::Male => "M",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceInfo {
    /// `<speaker>/<stem>`, unique across the catalog.
    pub utterance_id: String,
    pub wav: PathBuf,
    pub lab: Option<PathBuf>,
    /// Seconds of speech after silence trimming.
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerInfo {
    pub gender: Gender,
    pub corpus: String,
    pub utterances: Vec<UtteranceInfo>,
}

impl SpeakerInfo {
    pub fn total_duration(&self) -> f64 {
        self.utterances.iter().map(|u| u.duration).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusCatalog {
    pub speakers: BTreeMap<String, SpeakerInfo>,
    /// Files that could not be read, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl CorpusCatalog {
    pub fn total_duration(&self) -> f64 {
        self.speakers.values().map(SpeakerInfo::total_duration).sum()
    }

    pub fn n_utterances(&self) -> usize {
        self.speakers.values().map(|s| s.utterances.len()).sum()
    }
}

fn read_genders(root: &Path) -> Result<BTreeMap<String, Gender>> {
    let path = root.join("speakers.tsv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(spk), Some(g)) = (cols.next(), cols.next()) else {
            return Err(Error::Parse {
                path: path.clone(),
                line: i + 1,
                reason: "expected speaker<TAB>gender".into(),
            });
        };
        let gender = Gender::parse(g).ok_or_else(|| Error::Parse {
            path: path.clone(),
            line: i + 1,
            reason: format!("unknown gender {g:?}"),
        })?;
        out.insert(spk.trim().to_string(), gender);
    }
    Ok(out)
}

/// Scans corpus roots and measures every utterance after silence trimming. Unreadable files
/// are logged and recorded in `skipped`.
pub fn build_catalog(roots: &[PathBuf], vad: &VadConfig) -> Result<CorpusCatalog> {
    let mut catalog = CorpusCatalog::default();
    for root in roots {
        let corpus = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| root.display().to_string());
        let genders = read_genders(root)?;
        for (speaker, gender) in genders {
            if let Some(prev) = catalog.speakers.get(&speaker) {
                return Err(Error::Config(format!(
                    "speaker id {speaker} appears in corpora {} and {corpus}; namespace the ids",
                    prev.corpus
                )));
            }
            let dir = root.join(&speaker);
            let mut wavs: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "wav"))
                .collect();
            wavs.sort();
            let mut utterances = Vec::new();
            for wav in wavs {
                let stem = wav.file_stem().unwrap().to_string_lossy().into_owned();
                let utt_id = format!("{speaker}/{stem}");
                let clip = match load_waveform(&wav, &speaker, &utt_id, ChannelPolicy::Downmix) {
                    Ok(c) => c,
                    Err(e) => {
                        warn!("skipping {}: {e}", wav.display());
                        catalog.skipped.push((wav, e.to_string()));
                        continue;
                    }
                };
                let trimmed = trim_silences(&clip, vad);
                if trimmed.status == TrimStatus::AllSilence {
                    warn!("skipping {}: all silence", wav.display());
                    catalog.skipped.push((wav, "all silence".into()));
                    continue;
                }
                let lab = wav.with_extension("lab");
                utterances.push(UtteranceInfo {
                    utterance_id: utt_id,
                    lab: lab.exists().then_some(lab),
                    wav,
                    duration: trimmed.clip.duration_seconds(),
                });
            }
            catalog.speakers.insert(
                speaker,
                SpeakerInfo {
                    gender,
                    corpus: corpus.clone(),
                    utterances,
                },
            );
        }
    }
    Ok(catalog)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    /// Adaptation speaker material from which seed signals are drawn.
    Seed,
    AdaptTest,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Seed => "seed",
            Split::AdaptTest => "adapt_test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "train" => Split::Train,
            "validation" => Split::Validation,
            "test" => Split::Test,
            "seed" => Split::Seed,
            "adapt_test" => Split::AdaptTest,
            _ => return None,
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_per_gender: usize,
    pub n_adapt_per_gender: usize,
    pub validation_seconds: f64,
    pub test_seconds: f64,
    pub seed_pool_seconds: f64,
    pub adapt_test_seconds: f64,
    /// Multiplies every duration target.
    pub scale: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_per_gender: 20,
            n_adapt_per_gender: 5,
            validation_seconds: 45.0,
            test_seconds: 45.0,
            seed_pool_seconds: 120.0,
            adapt_test_seconds: 180.0,
            scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub speaker_id: String,
    pub utterance_id: String,
    pub split: Split,
    pub duration: f64,
    pub gender: Gender,
    pub wav: PathBuf,
    pub lab: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub base_speakers: Vec<String>,
    pub adapt_speakers: Vec<String>,
    pub entries: Vec<SplitEntry>,
}

impl SplitPlan {
    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &SplitEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn duration(&self, speaker: &str, split: Split) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.speaker_id == speaker && e.split == split)
            .map(|e| e.duration)
            .sum()
    }

    const HEADER: &'static str = "speaker\tutterance\tsplit\tduration_s\tgender\twav\tlab";

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{}\t{}\t{}\n",
                e.speaker_id,
                e.utterance_id,
                e.split,
                e.duration,
                e.gender.tag(),
                e.wav.display(),
                e.lab.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
            ));
        }
        out
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == Self::HEADER => {}
            _ => return Err(bad(1, "missing manifest header".into())),
        }
        let mut entries = Vec::new();
        let mut base = BTreeSet::new();
        let mut adapt = BTreeSet::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 7 {
                return Err(bad(i + 1, format!("{} columns, expected 7", cols.len())));
            }
            let split = Split::parse(cols[2]).ok_or_else(|| bad(i + 1, format!("unknown split {:?}", cols[2])))?;
            let duration: f64 = cols[3]
                .parse()
                .map_err(|_| bad(i + 1, format!("bad duration {:?}", cols[3])))?;
            let gender = Gender::parse(cols[4]).ok_or_else(|| bad(i + 1, format!("bad gender {:?}", cols[4])))?;
            match split {
                Split::Train | Split::Validation | Split::Test => base.insert(cols[0].to_string()),
                Split::Seed | Split::AdaptTest => adapt.insert(cols[0].to_string()),
            };
            entries.push(SplitEntry {
                speaker_id: cols[0].to_string(),
                utterance_id: cols[1].to_string(),
                split,
                duration,
                gender,
                wav: PathBuf::from(cols[5]),
                lab: (!cols[6].is_empty()).then(|| PathBuf::from(cols[6])),
            });
        }
        Ok(SplitPlan {
            base_speakers: base.into_iter().collect(),
            adapt_speakers: adapt.into_iter().collect(),
            entries,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, path)
    }
}

/// Takes utterances in order until `target` seconds are first met or exceeded.
fn take_until(queue: &mut Vec<&UtteranceInfo>, target: f64) -> Vec<UtteranceInfo> {
    let mut out = Vec::new();
    let mut acc = 0.0;
    while acc < target {
        let Some(u) = queue.pop() else { break };
        acc += u.duration;
        out.push(u.clone());
    }
    out
}

fn shuffled<'a>(info: &'a SpeakerInfo, rng: &mut ChaCha8Rng) -> Vec<&'a UtteranceInfo> {
    let mut v: Vec<&UtteranceInfo> = info.utterances.iter().collect();
    v.shuffle(rng);
    v
}

/// Selects the `n_per_gender` longest speakers of each gender as base speakers and
/// `n_adapt_per_gender` random other speakers of each gender for adaptation, then assigns
/// utterances to splits.
pub fn make_split_plan(catalog: &CorpusCatalog, cfg: &SplitConfig) -> Result<SplitPlan> {
    if !(cfg.scale > 0.0) {
        return Err(Error::Config(format!("split scale must be positive, got {}", cfg.scale)));
    }
    let val_t = cfg.validation_seconds * cfg.scale;
    let test_t = cfg.test_seconds * cfg.scale;
    let seed_t = cfg.seed_pool_seconds * cfg.scale;
    let adapt_t = cfg.adapt_test_seconds * cfg.scale;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut base_speakers = Vec::new();
    let mut adapt_speakers = Vec::new();
    for gender in [Gender::Female, Gender::Male] {
        let mut pool: Vec<(&String, &SpeakerInfo)> =
            catalog.speakers.iter().filter(|(_, s)| s.gender == gender).collect();
        pool.sort_by(|a, b| {
            b.1.total_duration()
                .total_cmp(&a.1.total_duration())
                .then_with(|| a.0.cmp(b.0))
        });
        if pool.len() < cfg.n_per_gender + cfg.n_adapt_per_gender {
            return Err(Error::Insufficient(format!(
                "{} {gender:?} speakers, need {} base + {} adaptation",
                pool.len(),
                cfg.n_per_gender,
                cfg.n_adapt_per_gender
            )));
        }
        for (id, s) in &pool[..cfg.n_per_gender] {
            if s.total_duration() <= val_t + test_t {
                return Err(Error::Insufficient(format!(
                    "base speaker {id} has {:.1} s, needs more than {:.1} s for validation + test + train",
                    s.total_duration(),
                    val_t + test_t
                )));
            }
            base_speakers.push((*id).clone());
        }
        let mut eligible: Vec<&String> = pool[cfg.n_per_gender..]
            .iter()
            .filter(|(_, s)| s.total_duration() >= seed_t + adapt_t)
            .map(|(id, _)| *id)
            .collect();
        if eligible.len() < cfg.n_adapt_per_gender {
            return Err(Error::Insufficient(format!(
                "{} non-base {gender:?} speakers hold at least {:.1} s (seed pool + adaptation test), need {}",
                eligible.len(),
                seed_t + adapt_t,
                cfg.n_adapt_per_gender
            )));
        }
        eligible.sort();
        eligible.shuffle(&mut rng);
        let mut picked: Vec<String> = eligible[..cfg.n_adapt_per_gender].iter().map(|s| (*s).clone()).collect();
        picked.sort();
        adapt_speakers.extend(picked);
    }

    let mut entries = Vec::new();
    let mut push = |speaker: &str, info: &SpeakerInfo, utts: Vec<UtteranceInfo>, split: Split| {
        for u in utts {
            entries.push(SplitEntry {
                speaker_id: speaker.to_string(),
                utterance_id: u.utterance_id,
                split,
                duration: u.duration,
                gender: info.gender,
                wav: u.wav,
                lab: u.lab,
            });
        }
    };
    for speaker in &base_speakers {
        let info = &catalog.speakers[speaker];
        let mut queue = shuffled(info, &mut rng);
        let val = take_until(&mut queue, val_t);
        let test = take_until(&mut queue, test_t);
        let train: Vec<UtteranceInfo> = queue.into_iter().rev().cloned().collect();
        if train.is_empty() {
            return Err(Error::Insufficient(format!(
                "base speaker {speaker} has no training material left after validation and test"
            )));
        }
        push(speaker, info, train, Split::Train);
        push(speaker, info, val, Split::Validation);
        push(speaker, info, test, Split::Test);
    }
    for speaker in &adapt_speakers {
        let info = &catalog.speakers[speaker];
        let mut queue = shuffled(info, &mut rng);
        let test = take_until(&mut queue, adapt_t);
        let seed: Vec<UtteranceInfo> = queue.into_iter().rev().cloned().collect();
        let seed_dur: f64 = seed.iter().map(|u| u.duration).sum();
        if seed_dur < seed_t {
            return Err(Error::Insufficient(format!(
                "adaptation speaker {speaker}: seed pool {seed_dur:.1} s after the test split, need {seed_t:.1} s"
            )));
        }
        push(speaker, info, seed, Split::Seed);
        push(speaker, info, test, Split::AdaptTest);
    }
    Ok(SplitPlan {
        base_speakers,
        adapt_speakers,
        entries,
    })
}
