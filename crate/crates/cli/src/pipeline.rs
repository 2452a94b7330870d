//! Feature preparation: trimmed audio to μ-law codes plus aligned conditioning frames, and the
//! per-variant views used by training and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use srnn_core::audio::{
    load_waveform, make_windows, mulaw_encode, read_codes, trim_silences, write_codes, ChannelPolicy,
    QuantizedSequence, RangeMode, VadConfig, WaveformClip, WindowConfig,
};
use srnn_core::conditioning::{
    append_duration_features, compute_speaker_stats, extract_f0_uv, parse_label_file, remap_annotations,
    upsample_to_frames, with_prosody, zscore_normalize, CompiledSchema, ConditioningFrame, F0Config,
    FeatureSchema, FrameLayout, SpeakerStats, StatsInput,
};
use srnn_core::datasets::{build_catalog, make_split_plan, Split, SplitEntry, SplitPlan};
use srnn_core::evaluation::TestUtterance;
use srnn_core::training::UtteranceWindows;
use srnn_core::{Error, Result};

use crate::cache::{cache_path, is_fresh, read_frames, write_frames, write_if_changed};
use crate::config::ExperimentConfig;
use crate::manifest::ExperimentManifest;

/// Codes and full-layout (with prosody) frames for one trimmed utterance, before
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedUtterance {
    pub codes: QuantizedSequence,
    pub frames: Vec<ConditioningFrame>,
}

pub fn load_trimmed(entry: &SplitEntry) -> Result<WaveformClip> {
    let clip = load_waveform(&entry.wav, &entry.speaker_id, &entry.utterance_id, ChannelPolicy::Downmix)?;
    Ok(trim_silences(&clip, &VadConfig::default()).clip)
}

/// Loads, trims, aligns labels to the trimmed audio, tracks F0 and quantizes.
pub fn prepare_utterance(
    entry: &SplitEntry,
    schema: &CompiledSchema,
    cfg: &ExperimentConfig,
) -> Result<PreparedUtterance> {
    let lab = entry
        .lab
        .as_ref()
        .ok_or_else(|| Error::Insufficient(format!("{} has no label file", entry.utterance_id)))?;
    let clip = load_waveform(&entry.wav, &entry.speaker_id, &entry.utterance_id, ChannelPolicy::Downmix)?;
    let trimmed = trim_silences(&clip, &VadConfig::default());
    let ann = parse_label_file(lab, schema)?;
    let ann = remap_annotations(&ann, clip.sample_rate, |i| trimmed.map_index(i));
    let fs = cfg.top_frame_level_inp_size;
    let n_frames = trimmed.clip.samples.len().div_ceil(fs);
    let durations = append_duration_features(&ann, n_frames, fs, clip.sample_rate, cfg.label_edge_tolerance)
        .map_err(|e| Error::Alignment(format!("{}: {e}", lab.display())))?;
    let prosody = extract_f0_uv(
        &trimmed.clip,
        &F0Config {
            hop_samples: fs,
            ..F0Config::default()
        },
    );
    let frames = upsample_to_frames(&ann, &durations, Some(&prosody))?;
    let (codes, _) = mulaw_encode(&trimmed.clip.samples, &entry.utterance_id, RangeMode::Clamp)?;
    Ok(PreparedUtterance { codes, frames })
}

/// Summary of one `prepare` run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrepareReport {
    pub excluded: Vec<(String, String)>,
    pub cached: usize,
    pub rewritten: usize,
}

impl PrepareReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("item\treason\n");
        for (item, reason) in &self.excluded {
            s.push_str(&format!("{item}\t{}\n", reason.replace(['\t', '\n'], " ")));
        }
        s
    }
}

/// Catalogs the corpora, plans splits, fills the code/frame caches and computes speaker
/// statistics. Fresh cache entries and unchanged files are left alone.
pub fn prepare(
    roots: &[PathBuf],
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seed: u64,
    desk_scale: bool,
) -> Result<(ExperimentManifest, PrepareReport)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = ExperimentManifest::new(out_dir, roots.to_vec(), seed, desk_scale);
    let mut report = PrepareReport::default();
    let mut catalog = build_catalog(roots, &VadConfig::default())?;
    for (path, why) in &catalog.skipped {
        report.excluded.push((path.display().to_string(), why.clone()));
    }
    for spk in catalog.speakers.values_mut() {
        spk.utterances.retain(|u| {
            if u.lab.is_none() {
                warn!("excluding {}: no label file", u.utterance_id);
                report.excluded.push((u.utterance_id.clone(), "missing label file".into()));
            }
            u.lab.is_some()
        });
    }
    let plan = make_split_plan(&catalog, &cfg.split_config(seed))?;
    write_if_changed(&manifest.path(&manifest.config), cfg.to_toml().as_bytes())?;
    write_if_changed(&manifest.path(&manifest.split_plan), plan.to_tsv().as_bytes())?;

    let schema = FeatureSchema::default().compile()?;
    let cache = manifest.path(&manifest.cache_dir);
    let outcomes: Vec<(String, Result<bool>)> = plan
        .entries
        .par_iter()
        .map(|e| (e.utterance_id.clone(), fill_cache(e, &schema, cfg, &cache)))
        .collect();
    let mut failed = Vec::new();
    for (utt, r) in outcomes {
        match r {
            Ok(true) => report.rewritten += 1,
            Ok(false) => report.cached += 1,
            Err(e) => {
                warn!("excluding {utt}: {e}");
                report.excluded.push((utt.clone(), e.to_string()));
                failed.push(utt);
            }
        }
    }
    let plan = if failed.is_empty() {
        plan
    } else {
        let kept = SplitPlan {
            entries: plan.entries.into_iter().filter(|e| !failed.contains(&e.utterance_id)).collect(),
            ..plan
        };
        write_if_changed(&manifest.path(&manifest.split_plan), kept.to_tsv().as_bytes())?;
        kept
    };

    let stats = stats_for_plan(&plan, &cache)?;
    write_if_changed(&manifest.path(&manifest.speaker_stats), stats.to_tsv().as_bytes())?;
    write_if_changed(&manifest.path(&manifest.report), report.to_tsv().as_bytes())?;
    manifest.write()?;
    info!(
        "prepared {} utterances ({} cached, {} rewritten, {} excluded)",
        plan.entries.len(),
        report.cached,
        report.rewritten,
        report.excluded.len()
    );
    Ok((manifest, report))
}

fn fill_cache(entry: &SplitEntry, schema: &CompiledSchema, cfg: &ExperimentConfig, cache: &Path) -> Result<bool> {
    let codes_path = cache_path(cache, &entry.utterance_id, "codes");
    let frames_path = cache_path(cache, &entry.utterance_id, "frames");
    let mut inputs: Vec<&Path> = vec![&entry.wav];
    if let Some(l) = &entry.lab {
        inputs.push(l);
    }
    if is_fresh(&[&codes_path, &frames_path], &inputs) {
        return Ok(false);
    }
    let p = prepare_utterance(entry, schema, cfg)?;
    if let Some(dir) = codes_path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_codes(&codes_path, &p.codes)?;
    write_frames(&frames_path, &p.frames)?;
    Ok(true)
}

/// Base speakers are described by their training split, adaptation speakers by their seed
/// pool.
fn stats_for_plan(plan: &SplitPlan, cache: &Path) -> Result<SpeakerStats> {
    let layout = FrameLayout::for_schema(&FeatureSchema::default(), true);
    let sources: Vec<&SplitEntry> = plan
        .entries
        .iter()
        .filter(|e| matches!(e.split, Split::Train | Split::Seed))
        .collect();
    let frames: Vec<Vec<ConditioningFrame>> = sources
        .par_iter()
        .map(|e| read_frames(&cache_path(cache, &e.utterance_id, "frames")))
        .collect::<Result<_>>()?;
    let inputs: Vec<StatsInput<'_>> = sources
        .iter()
        .zip(&frames)
        .map(|(e, f)| StatsInput {
            speaker_id: &e.speaker_id,
            utterance_id: &e.utterance_id,
            frames: f,
        })
        .collect();
    compute_speaker_stats(&inputs, &layout)
}

/// Read access to a prepared experiment.
pub struct FeatureStore {
    pub manifest: ExperimentManifest,
    pub config: ExperimentConfig,
    pub plan: SplitPlan,
    pub stats: SpeakerStats,
    pub layout: FrameLayout,
    cache: PathBuf,
}

impl FeatureStore {
    pub fn open(manifest: ExperimentManifest, config: ExperimentConfig) -> Result<Self> {
        let plan = SplitPlan::read(&manifest.path(&manifest.split_plan))?;
        let stats_path = manifest.path(&manifest.speaker_stats);
        let text = std::fs::read_to_string(&stats_path).map_err(|e| Error::io(&stats_path, e))?;
        let stats = SpeakerStats::from_tsv(&text, &stats_path)?;
        let cache = manifest.path(&manifest.cache_dir);
        Ok(Self {
            manifest,
            config,
            plan,
            stats,
            layout: FrameLayout::for_schema(&FeatureSchema::default(), true),
            cache,
        })
    }

    pub fn entries(&self, split: Split) -> Vec<&SplitEntry> {
        self.plan.entries_in(split).collect()
    }

    pub fn entry(&self, utterance_id: &str) -> Result<&SplitEntry> {
        self.plan
            .entries
            .iter()
            .find(|e| e.utterance_id == utterance_id)
            .ok_or_else(|| Error::Insufficient(format!("utterance {utterance_id} is not in the split plan")))
    }

    pub fn codes(&self, entry: &SplitEntry) -> Result<QuantizedSequence> {
        read_codes(&self.cached(entry, "codes")?)
    }

    fn cached(&self, entry: &SplitEntry, ext: &str) -> Result<PathBuf> {
        let p = cache_path(&self.cache, &entry.utterance_id, ext);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Insufficient(format!(
                "{} is missing; rerun `srnn prepare`",
                p.display()
            )))
        }
    }

    /// Numeric width of the frames fed to a model.
    pub fn numeric_dim(&self, f0uv: bool) -> usize {
        FrameLayout {
            with_prosody: f0uv,
            ..self.layout
        }
        .numeric_dim()
    }

    /// Whether a model with `numeric_dim` inputs was trained with F0/UV conditioning.
    pub fn f0uv_for(&self, numeric_dim: usize) -> Result<bool> {
        if numeric_dim == self.numeric_dim(true) {
            Ok(true)
        } else if numeric_dim == self.numeric_dim(false) {
            Ok(false)
        } else {
            Err(Error::Dimension {
                what: "model numeric conditioning width",
                expected: self.numeric_dim(true),
                got: numeric_dim,
            })
        }
    }

    /// Speaker-normalized frames, with the prosody columns dropped unless `f0uv`.
    pub fn frames(&self, entry: &SplitEntry, f0uv: bool) -> Result<Vec<ConditioningFrame>> {
        let raw = read_frames(&self.cached(entry, "frames")?)?;
        let norm = zscore_normalize(&raw, &entry.speaker_id, &self.stats)?;
        Ok(if f0uv { norm } else { with_prosody(&norm, &self.layout, None) })
    }

    pub fn windows(&self, split: Split, f0uv: bool) -> Result<Vec<UtteranceWindows>> {
        let wcfg = WindowConfig {
            frame_size: self.config.top_frame_level_inp_size,
            seq_len: self.config.top_frame_level_seq_length,
            ..WindowConfig::default()
        };
        self.entries(split)
            .par_iter()
            .map(|e| {
                let codes = self.codes(e)?;
                let frames = self.frames(e, f0uv)?;
                let (windows, _) = make_windows(&codes, &frames, &e.speaker_id, &wcfg)?;
                Ok(UtteranceWindows {
                    speaker_id: e.speaker_id.clone(),
                    utterance_id: e.utterance_id.clone(),
                    windows,
                })
            })
            .collect()
    }

    /// Test utterances of `speaker` in `split`, at most `max` (0 = all) in plan order.
    pub fn test_utterances(&self, speaker: &str, split: Split, f0uv: bool, max: usize) -> Result<Vec<TestUtterance>> {
        let mut entries: Vec<&SplitEntry> = self.entries(split).into_iter().filter(|e| e.speaker_id == speaker).collect();
        if max > 0 {
            entries.truncate(max);
        }
        entries
            .par_iter()
            .map(|e| {
                Ok(TestUtterance {
                    utterance_id: e.utterance_id.clone(),
                    reference: load_trimmed(e)?,
                    frames: self.frames(e, f0uv)?,
                })
            })
            .collect()
    }

    /// Trimmed clips of a speaker's utterances in `split`, in plan order.
    pub fn clips(&self, speaker: &str, split: Split) -> Result<Vec<WaveformClip>> {
        let entries: Vec<&SplitEntry> = self.entries(split).into_iter().filter(|e| e.speaker_id == speaker).collect();
        entries.par_iter().map(|e| load_trimmed(e)).collect()
    }

    /// Speakers present in `split`, sorted.
    pub fn speakers_in(&self, split: Split) -> Vec<String> {
        let set: BTreeMap<&str, ()> = self.plan.entries_in(split).map(|e| (e.speaker_id.as_str(), ())).collect();
        set.keys().map(|s| s.to_string()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, speaker_requests};

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            base_speakers_per_gender: 1,
            adapt_speakers_per_gender: 1,
            split_scale: 0.05,
            ..ExperimentConfig::desk_scale()
        }
    }

    #[test]
    fn prepare_is_idempotent_and_reports_exclusions() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        generate_corpus(&corpus, &speaker_requests(2, 30.0, 2, 24.0), 3).unwrap();
        let lab = std::fs::read_dir(corpus.join("f02"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "lab"))
            .min()
            .unwrap();
        std::fs::remove_file(&lab).unwrap();
        let work = dir.path().join("work");
        let cfg = tiny_config();
        let (m, r) = prepare(&[corpus.clone()], &cfg, &work, 5, true).unwrap();
        assert_eq!(r.cached, 0);
        assert!(r.excluded.iter().any(|(_, why)| why.contains("missing label")));
        assert_eq!(m.seed, 5);
        let text = std::fs::read_to_string(work.join("manifest.toml")).unwrap();
        assert!(text.contains("seed = 5"));

        let stamp = |p: &Path| std::fs::metadata(p).unwrap().modified().unwrap();
        let split = work.join("split.tsv");
        let before = stamp(&split);
        let (_, r2) = prepare(&[corpus], &cfg, &work, 5, true).unwrap();
        assert_eq!(r2.rewritten, 0);
        assert_eq!(r2.cached, r.rewritten);
        assert_eq!(stamp(&split), before);

        let store = FeatureStore::open(ExperimentManifest::load(&work).unwrap(), cfg).unwrap();
        let train = store.windows(Split::Train, true).unwrap();
        let w = &train.iter().find(|u| !u.windows.is_empty()).unwrap().windows[0];
        assert_eq!(w.conditioning[0].numeric.len(), store.numeric_dim(true));
        let nof0 = store.windows(Split::Train, false).unwrap();
        assert_eq!(nof0[0].windows[0].conditioning[0].numeric.len(), store.numeric_dim(false));
        assert!(store.f0uv_for(store.numeric_dim(true)).unwrap());
        assert!(!store.f0uv_for(store.numeric_dim(false)).unwrap());
    }
}
