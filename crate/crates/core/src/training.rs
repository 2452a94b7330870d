//! Truncated-BPTT training with Adam, plateau learning-rate halving and the 2×2 variant grid.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::TrainingWindow;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SampleRnn, SpeakerMode, SpeakerRef, TierState};
use crate::nn::{Adam, AdamConfig, Parameters};

/// Windows accumulated per gradient partial sum. Partial sums are added in a fixed order so
/// results do not depend on the number of worker threads.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerKind {
    Onehot,
    Encoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub speaker: SpeakerKind,
    pub f0uv: bool,
}

impl Variant {
    pub fn all() -> [Variant; 4] {
        [
            Variant { speaker: SpeakerKind::Onehot, f0uv: true },
            Variant { speaker: SpeakerKind::Onehot, f0uv: false },
            Variant { speaker: SpeakerKind::Encoder, f0uv: true },
            Variant { speaker: SpeakerKind::Encoder, f0uv: false },
        ]
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.speaker {
            SpeakerKind::Onehot => "onehot",
            SpeakerKind::Encoder => "encoder",
        };
        write!(f, "{s}-{}", if self.f0uv { "f0uv" } else { "nof0uv" })
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts `onehot-f0uv`, `encoder_nof0uv`, `onehotxf0uv` and similar spellings.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (speaker, rest) = if let Some(r) = lower.strip_prefix("onehot") {
            (SpeakerKind::Onehot, r)
        } else if let Some(r) = lower.strip_prefix("encoder") {
            (SpeakerKind::Encoder, r)
        } else {
            return Err(Error::Config(format!("unknown variant {s:?}")));
        };
        let rest = rest.trim_start_matches(['-', '_', '+', '/', ',', 'x']);
        let f0uv = match rest {
            "f0uv" => true,
            "nof0uv" => false,
            _ => return Err(Error::Config(format!("unknown variant {s:?}"))),
        };
        Ok(Variant { speaker, f0uv })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_patience: usize,
    pub lr_scale: f64,
    pub epochs: usize,
    /// Minimum validation decrease (nats) that counts as an improvement.
    pub improvement_threshold: f64,
    pub seed: u64,
    /// Write `epoch_NNN.ckpt` every this many epochs (0 disables).
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-4,
            lr_patience: 3,
            lr_scale: 0.5,
            epochs: 50,
            improvement_threshold: 1e-4,
            seed: 0,
            snapshot_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr_patience == 0 {
            return Err(Error::Config("batch_size and lr_patience must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_scale > 0.0 && self.lr_scale < 1.0) {
            return Err(Error::Config(format!(
                "need learning_rate > 0 and 0 < lr_scale < 1, got {} and {}",
                self.learning_rate, self.lr_scale
            )));
        }
        Ok(())
    }
}

/// Halves the learning rate once validation has failed to improve for `patience` consecutive
/// epochs, then starts counting again.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub threshold: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64, threshold: f64) -> Self {
        Self {
            lr,
            patience,
            factor,
            threshold,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.lr_patience, cfg.lr_scale, cfg.improvement_threshold)
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records a validation loss; returns whether it improved on the best so far.
    pub fn observe(&mut self, val: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(b) => val <= b - self.threshold,
        };
        if improved {
            self.best = Some(val);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        improved
    }
}

/// All windows of one utterance in temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceWindows {
    pub speaker_id: String,
    pub utterance_id: String,
    pub windows: Vec<TrainingWindow>,
}

/// Where speaker vectors come from during training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum SpeakerSource {
    /// The model's own one-hot table.
    Table,
    /// Fixed embeddings keyed by speaker id.
    Embeddings(BTreeMap<String, Vec<f64>>),
}

impl SpeakerSource {
    pub fn resolve<'a>(&'a self, model: &SampleRnn, speaker: &str) -> Result<SpeakerRef<'a>> {
        match self {
            SpeakerSource::Table => {
                let table = model
                    .speaker_table
                    .as_ref()
                    .ok_or_else(|| Error::Config("model has no speaker table".into()))?;
                Ok(SpeakerRef::Index(table.index_of(speaker)?))
            }
            SpeakerSource::Embeddings(map) => map
                .get(speaker)
                .map(|v| SpeakerRef::Vector(v))
                .ok_or_else(|| Error::UnknownSpeaker(format!("no embedding for {speaker}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training NLL over the epoch; absent for the evaluation before training.
    pub train_nll: Option<f64>,
    pub val_nll: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

impl RunLog {
    pub fn best_val(&self) -> Option<f64> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch).map(|e| e.val_nll)
    }

    /// `epoch,train_nll,val_nll,lr`, NLL in nats per sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_nll,val_nll,lr\n");
        for e in &self.epochs {
            let train = e.train_nll.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!("{},{train},{:.6},{:e}\n", e.epoch, e.val_nll, e.lr));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut log = RunLog::default();
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let mut best = f64::INFINITY;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Config(format!("run log: {e}")))?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("run log: bad field {:?}", rec.get(i))))
            };
            let epoch = num(0)? as usize;
            let train_nll = if rec.get(1).unwrap_or("").is_empty() { None } else { Some(num(1)?) };
            let val_nll = num(2)?;
            if val_nll < best {
                best = val_nll;
                log.best_epoch = epoch;
            }
            log.epochs.push(EpochRecord {
                epoch,
                train_nll,
                val_nll,
                lr: num(3)?,
                seconds: 0.0,
            });
        }
        Ok(log)
    }
}

fn run_utterance(
    model: &SampleRnn,
    utt: &UtteranceWindows,
    speakers: &SpeakerSource,
) -> Result<(f64, usize)> {
    let spk = speakers.resolve(model, &utt.speaker_id)?;
    let mut state: Option<TierState> = None;
    let mut sum = 0.0;
    for w in &utt.windows {
        let r = model.forward_training(w, spk, state.as_ref())?;
        sum += r.mean_nll;
        state = Some(r.state);
    }
    Ok((sum, utt.windows.len()))
}

/// Mean teacher-forced NLL (nats/sample) over a split, carrying tier states across the
/// windows of each utterance.
pub fn evaluate_nll(model: &SampleRnn, split: &[UtteranceWindows], speakers: &SpeakerSource) -> Result<f64> {
    let parts: Vec<Result<(f64, usize)>> = split
        .par_iter()
        .map(|u| run_utterance(model, u, speakers))
        .collect();
    let (mut sum, mut n) = (0.0, 0);
    for p in parts {
        let (s, k) = p?;
        sum += s;
        n += k;
    }
    if n == 0 {
        return Err(Error::Insufficient("cannot evaluate NLL on an empty split".into()));
    }
    Ok(sum / n as f64)
}

struct Lane {
    utterance: usize,
    state: Option<TierState>,
}

/// One epoch's schedule: at each step the list of `(lane, utterance, window)` jobs.
fn epoch_schedule(split: &[UtteranceWindows], lanes: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, usize, usize)>> {
    let mut queue: Vec<usize> = (0..split.len()).filter(|&i| !split[i].windows.is_empty()).collect();
    queue.shuffle(rng);
    queue.reverse();
    let mut active: Vec<Option<(usize, usize)>> = vec![None; lanes];
    let mut steps = Vec::new();
    loop {
        let mut jobs = Vec::new();
        for (lane, slot) in active.iter_mut().enumerate() {
            if slot.is_none_or(|(u, next)| next >= split[u].windows.len()) {
                *slot = queue.pop().map(|u| (u, 0));
            }
            if let Some((u, next)) = slot {
                jobs.push((lane, *u, *next));
                *next += 1;
            }
        }
        if jobs.is_empty() {
            return steps;
        }
        steps.push(jobs);
    }
}

/// Trains in place and restores the best-validation parameters at the end. With `out_dir`,
/// `best.ckpt` and `last.ckpt` are written there after every epoch.
pub fn train(
    model: &mut SampleRnn,
    train_split: &[UtteranceWindows],
    validation: &[UtteranceWindows],
    speakers: &SpeakerSource,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<RunLog> {
    cfg.validate()?;
    if train_split.iter().all(|u| u.windows.is_empty()) {
        return Err(Error::Insufficient("no training windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sched = PlateauScheduler::from_config(cfg);
    let mut adam = Adam::new(AdamConfig::default(), model.num_parameters());
    let mut log = RunLog::default();
    let best_path = out_dir.map(|d| d.join("best.ckpt"));
    let last_path = out_dir.map(|d| d.join("last.ckpt"));

    let t0 = Instant::now();
    let v0 = evaluate_nll(model, validation, speakers)?;
    sched.observe(v0);
    log.epochs.push(EpochRecord {
        epoch: 0,
        train_nll: None,
        val_nll: v0,
        lr: cfg.learning_rate,
        seconds: t0.elapsed().as_secs_f64(),
    });
    info!("epoch 0: val {v0:.4}");
    let mut best = model.clone();
    if let Some(p) = &best_path {
        model.save(p)?;
        log.best_checkpoint = Some(p.clone());
    }
    snapshot(model, cfg, out_dir, 0)?;

    for epoch in 1..=cfg.epochs {
        let t = Instant::now();
        let lr = sched.lr;
        let steps = epoch_schedule(train_split, cfg.batch_size, &mut rng);
        let mut lanes: Vec<Lane> = (0..cfg.batch_size)
            .map(|_| Lane {
                utterance: usize::MAX,
                state: None,
            })
            .collect();
        let (mut loss_sum, mut n_windows) = (0.0, 0usize);
        for jobs in steps {
            for &(lane, u, w) in &jobs {
                let l = &mut lanes[lane];
                if l.utterance != u || w == 0 {
                    *l = Lane {
                        utterance: u,
                        state: None,
                    };
                }
            }
            let weight = 1.0 / jobs.len() as f64;
            let chunks: Vec<Result<(SampleRnn, Vec<(usize, f64, TierState)>)>> = jobs
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut grad = model.zeros_like();
                    let mut out = Vec::with_capacity(chunk.len());
                    for &(lane, u, w) in chunk {
                        let utt = &train_split[u];
                        let spk = speakers.resolve(model, &utt.speaker_id)?;
                        let r = model.accumulate_gradient(
                            &utt.windows[w],
                            spk,
                            lanes[lane].state.as_ref(),
                            &mut grad,
                            weight,
                        )?;
                        out.push((lane, r.mean_nll, r.state));
                    }
                    Ok((grad, out))
                })
                .collect();
            let mut total: Option<SampleRnn> = None;
            for c in chunks {
                let (g, results) = c.map_err(|e| match (e, &last_path) {
                    (Error::Numerical(msg), Some(p)) if p.exists() => {
                        Error::Numerical(format!("{msg}; last good checkpoint {}", p.display()))
                    }
                    (e, _) => e,
                })?;
                match &mut total {
                    None => total = Some(g),
                    Some(t) => t.add_assign(&g),
                }
                for (lane, nll, state) in results {
                    loss_sum += nll;
                    n_windows += 1;
                    lanes[lane].state = Some(state);
                }
            }
            adam.step(model, total.as_ref().expect("non-empty step"), lr);
        }
        let train_nll = loss_sum / n_windows as f64;
        let val = evaluate_nll(model, validation, speakers)?;
        let improved = sched.observe(val);
        if improved {
            best = model.clone();
            log.best_epoch = epoch;
            if let Some(p) = &best_path {
                model.save(p)?;
            }
        }
        if let Some(p) = &last_path {
            model.save(p)?;
            log.last_checkpoint = Some(p.clone());
        }
        snapshot(model, cfg, out_dir, epoch)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_nll: Some(train_nll),
            val_nll: val,
            lr,
            seconds: t.elapsed().as_secs_f64(),
        });
        info!(
            "epoch {epoch}: train {train_nll:.4} val {val:.4} lr {lr:e}{}",
            if improved { " (best)" } else { "" }
        );
    }
    *model = best;
    Ok(log)
}

fn snapshot(model: &SampleRnn, cfg: &TrainConfig, out_dir: Option<&Path>, epoch: usize) -> Result<()> {
    match out_dir {
        Some(d) if cfg.snapshot_every > 0 && epoch % cfg.snapshot_every == 0 => {
            model.save(&d.join(format!("epoch_{epoch:03}.ckpt")))
        }
        _ => Ok(()),
    }
}

/// Inputs for one grid variant: model configuration and prepared windows.
pub struct VariantData {
    pub model: ModelConfig,
    pub train: Vec<UtteranceWindows>,
    pub validation: Vec<UtteranceWindows>,
}

/// Trains the four variants on shared splits and seeds. `prepare(with_f0uv)` supplies the
/// windows; encoder variants need cached embeddings for every training speaker.
pub fn run_grid(
    base: &ModelConfig,
    cfg: &TrainConfig,
    embeddings: Option<&BTreeMap<String, Vec<f64>>>,
    mut prepare: impl FnMut(bool) -> Result<(Vec<UtteranceWindows>, Vec<UtteranceWindows>, usize)>,
    out_dir: Option<&Path>,
) -> Result<Vec<(Variant, RunLog)>> {
    let mut runs = Vec::new();
    for variant in Variant::all() {
        let (train_split, validation, numeric_dim) = prepare(variant.f0uv)?;
        let data = variant_data(base, variant, train_split, validation, numeric_dim)?;
        let speakers = match variant.speaker {
            SpeakerKind::Onehot => SpeakerSource::Table,
            SpeakerKind::Encoder => {
                let map = embeddings.ok_or_else(|| {
                    Error::Config("encoder variants need cached speaker embeddings".into())
                })?;
                for u in data.train.iter().chain(&data.validation) {
                    if !map.contains_key(&u.speaker_id) {
                        return Err(Error::UnknownSpeaker(format!(
                            "no cached embedding for {}",
                            u.speaker_id
                        )));
                    }
                }
                SpeakerSource::Embeddings(map.clone())
            }
        };
        let dir = out_dir.map(|d| d.join(variant.to_string()));
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut model = SampleRnn::new(data.model, cfg.seed)?;
        let log = train(&mut model, &data.train, &data.validation, &speakers, cfg, dir.as_deref())?;
        if let Some(d) = &dir {
            let p = d.join("runlog.csv");
            std::fs::write(&p, log.to_csv()).map_err(|e| Error::io(&p, e))?;
        }
        runs.push((variant, log));
    }
    Ok(runs)
}

/// Model configuration for a variant: one-hot variants index the sorted training speakers.
pub fn variant_data(
    base: &ModelConfig,
    variant: Variant,
    train: Vec<UtteranceWindows>,
    validation: Vec<UtteranceWindows>,
    numeric_dim: usize,
) -> Result<VariantData> {
    let mut model = base.clone();
    model.numeric_dim = numeric_dim;
    model.speaker_mode = match variant.speaker {
        SpeakerKind::Onehot => {
            let mut ids: Vec<String> = train.iter().map(|u| u.speaker_id.clone()).collect();
            ids.sort();
            ids.dedup();
            SpeakerMode::OneHot { speakers: ids }
        }
        SpeakerKind::Encoder => SpeakerMode::Encoder,
    };
    model.validate()?;
    Ok(VariantData {
        model,
        train,
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::all() {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert_eq!(
            "encoderxnof0uv".parse::<Variant>().unwrap(),
            Variant { speaker: SpeakerKind::Encoder, f0uv: false }
        );
        assert!("pase-f0".parse::<Variant>().is_err());
    }

    #[test]
    fn worsening_validation_halves_once_in_five_epochs() {
        let mut s = PlateauScheduler::new(1e-4, 3, 0.5, 1e-4);
        let mut lrs = Vec::new();
        for v in [5.0, 5.1, 5.2, 5.3, 5.4] {
            s.observe(v);
            lrs.push(s.lr);
        }
        assert_eq!(lrs, vec![1e-4, 1e-4, 1e-4, 5e-5, 5e-5]);
    }

    #[test]
    fn small_improvements_do_not_count() {
        let mut s = PlateauScheduler::new(1e-4, 3, 0.5, 1e-4);
        s.observe(5.0);
        for _ in 0..6 {
            assert!(!s.observe(5.0 - 5e-5));
        }
        assert_eq!(s.lr, 2.5e-5);
    }

    #[test]
    fn schedule_covers_every_window_once_in_order() {
        let mk = |n: usize, id: &str| UtteranceWindows {
            speaker_id: "s".into(),
            utterance_id: id.into(),
            windows: (0..n)
                .map(|i| TrainingWindow {
                    context: vec![],
                    input_codes: vec![],
                    target_codes: vec![],
                    conditioning: vec![],
                    speaker_id: "s".into(),
                    utterance_id: id.into(),
                    index: i,
                })
                .collect(),
        };
        let split = vec![mk(3, "a"), mk(1, "b"), mk(5, "c"), mk(0, "d"), mk(2, "e")];
        let steps = epoch_schedule(&split, 2, &mut ChaCha8Rng::seed_from_u64(1));
        let mut seen: Vec<(usize, usize)> = steps.iter().flatten().map(|&(_, u, w)| (u, w)).collect();
        assert_eq!(seen.len(), 11);
        for lane in 0..2 {
            let mine: Vec<(usize, usize)> = steps.iter().flatten().filter(|j| j.0 == lane).map(|j| (j.1, j.2)).collect();
            for pair in mine.windows(2) {
                assert!(pair[1].0 != pair[0].0 || pair[1].1 == pair[0].1 + 1);
            }
        }
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 11);
    }

    #[test]
    fn run_log_csv_round_trip() {
        let log = RunLog {
            epochs: vec![
                EpochRecord { epoch: 0, train_nll: None, val_nll: 5.5, lr: 1e-4, seconds: 1.0 },
                EpochRecord { epoch: 1, train_nll: Some(5.0), val_nll: 4.9, lr: 1e-4, seconds: 1.0 },
            ],
            best_epoch: 1,
            ..RunLog::default()
        };
        let back = RunLog::from_csv(&log.to_csv()).unwrap();
        assert_eq!(back.best_epoch, 1);
        assert_eq!(back.to_csv(), log.to_csv());
    }
}
