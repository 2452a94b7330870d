//! Command-line interface: argument parsing and one function per subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use srnn_core::audio::write_waveform;
use srnn_core::datasets::Split;
use srnn_core::embeddings::{
    embed_seed, read_embeddings, sample_seed, train_encoder, write_embeddings, ConvEncoder, MfccStatsEncoder,
    SpeakerEmbedding, SpeechEncoder,
};
use srnn_core::evaluation::{adaptation_curve, evaluate_speaker, synthesize, AdaptationSpeaker, DistortionReport};
use srnn_core::model::{SampleRnn, SpeakerMode};
use srnn_core::training::{run_grid, train, variant_data, RunLog, SpeakerKind, SpeakerSource, Variant};
use srnn_core::{Error, Result};

use crate::cache::write_if_changed;
use crate::config::ExperimentConfig;
use crate::manifest::{artifacts, ExperimentManifest};
use crate::pipeline::{prepare, FeatureStore};
use crate::plot::{render, Panel, Series};
use crate::synth::{generate_corpus, speaker_requests};

#[derive(Debug, Parser)]
#[command(name = "srnn", version, about = "Multi-speaker waveform synthesis experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment manifest written by `prepare` (file or its directory).
    #[arg(long, default_value = "work")]
    pub manifest: PathBuf,
    /// Configuration overriding the one recorded in the manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// RNG seed (defaults to the configuration's `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-speaker corpus with aligned labels.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        /// Speakers with `--seconds` of audio each (genders alternate F, M).
        #[arg(long, default_value_t = 2)]
        speakers: usize,
        #[arg(long, default_value_t = 330.0)]
        seconds: f64,
        /// Further speakers with `--extra-seconds` each.
        #[arg(long, default_value_t = 2)]
        extra_speakers: usize,
        #[arg(long, default_value_t = 180.0)]
        extra_seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Catalog corpora, plan splits and fill the code and feature caches.
    Prepare {
        /// Corpus root holding `speakers.tsv` and one directory per speaker.
        #[arg(long = "corpus", required = true)]
        corpora: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the manifest and caches.
        #[arg(long, default_value = "work")]
        out: PathBuf,
        /// Small model and corpus targets for CPU runs.
        #[arg(long)]
        desk_scale: bool,
    },
    /// Train the convolutional speech encoder on the training split.
    TrainEncoder {
        #[command(flatten)]
        common: Common,
        /// Output location (defaults to a fixed place under the manifest directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average encoder frames into one embedding per speaker.
    ExtractEmbeddings {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint, or `mfcc` for the fixed cepstral encoder.
        #[arg(long)]
        encoder: Option<String>,
        /// Seconds of seed material per speaker.
        #[arg(long = "T")]
        seconds: Option<f64>,
        /// Output location (defaults to a fixed place under the manifest directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one variant (`onehot|encoder` x `f0uv|nof0uv`) or `all` four.
    Train {
        #[command(flatten)]
        common: Common,
        /// `onehot-f0uv`, `onehot-nof0uv`, `encoder-f0uv`, `encoder-nof0uv` or `all`.
        #[arg(long, default_value = "all")]
        variant: String,
        /// Speaker embeddings file (defaults to the one `extract-embeddings` wrote).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Output location (defaults to a fixed place under the manifest directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize utterances from a checkpoint, optionally in another speaker's voice.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Utterance ids (`speaker/stem`); defaults to the first test utterance of every base
        /// speaker.
        #[arg(long = "utterance")]
        utterances: Vec<String>,
        /// Voice to use instead of each utterance's own speaker.
        #[arg(long)]
        speaker: Option<String>,
        /// Speaker embeddings file (defaults to the one `extract-embeddings` wrote).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Output location (defaults to a fixed place under the manifest directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score synthesized test utterances with MCD and F0 RMSE.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Training run directory; every `epoch_NNN.ckpt` snapshot is scored as well.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Speaker embeddings file (defaults to the one `extract-embeddings` wrote).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Output location (defaults to a fixed place under the manifest directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distortion against seed length for unseen speakers.
    AdaptCurve {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Encoder checkpoint, or `mfcc` for the fixed cepstral encoder.
        #[arg(long)]
        encoder: Option<String>,
        /// Seed lengths in seconds, comma separated.
        #[arg(long = "T", value_delimiter = ',')]
        seconds: Vec<f64>,
        /// Output location (defaults to a fixed place under the manifest directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render SVG figures from run logs and distortion CSVs.
    Plot {
        #[arg(long = "runlog")]
        runlogs: Vec<PathBuf>,
        #[arg(long = "epoch-distortion")]
        epoch_distortion: Vec<PathBuf>,
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long, default_value = "figures")]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthCorpus {
            out,
            speakers,
            seconds,
            extra_speakers,
            extra_seconds,
            seed,
        } => cmd_synth_corpus(&out, speakers, seconds, extra_speakers, extra_seconds, seed),
        Command::Prepare {
            corpora,
            config,
            seed,
            out,
            desk_scale,
        } => cmd_prepare(&corpora, config.as_deref(), seed, &out, desk_scale),
        Command::TrainEncoder { common, out } => cmd_train_encoder(&common, out),
        Command::ExtractEmbeddings {
            common,
            encoder,
            seconds,
            out,
        } => cmd_extract_embeddings(&common, encoder.as_deref(), seconds, out),
        Command::Train {
            common,
            variant,
            embeddings,
            out,
        } => cmd_train(&common, &variant, embeddings, out),
        Command::Synthesize {
            common,
            checkpoint,
            utterances,
            speaker,
            embeddings,
            out,
        } => cmd_synthesize(&common, &checkpoint, &utterances, speaker.as_deref(), embeddings, out),
        Command::Evaluate {
            common,
            checkpoint,
            run,
            embeddings,
            out,
        } => cmd_evaluate(&common, checkpoint, run, embeddings, out),
        Command::AdaptCurve {
            common,
            checkpoint,
            encoder,
            seconds,
            out,
        } => cmd_adapt_curve(&common, &checkpoint, encoder.as_deref(), &seconds, out),
        Command::Plot {
            runlogs,
            epoch_distortion,
            curve,
            out,
        } => cmd_plot(&runlogs, &epoch_distortion, curve.as_deref(), &out),
    }
}

struct Session {
    store: FeatureStore,
    seed: u64,
}

impl Session {
    fn open(common: &Common) -> Result<Self> {
        let manifest = ExperimentManifest::load(&common.manifest)?;
        let config = manifest.config(common.config.as_deref())?;
        let seed = common.seed.unwrap_or(config.seed);
        Ok(Self {
            store: FeatureStore::open(manifest, config)?,
            seed,
        })
    }

    fn manifest(&self) -> &ExperimentManifest {
        &self.store.manifest
    }

    fn config(&self) -> &ExperimentConfig {
        &self.store.config
    }

    fn out(&self, given: Option<PathBuf>, default: &str) -> PathBuf {
        given.unwrap_or_else(|| self.manifest().path(default))
    }

    fn encoder(&self, spec: Option<&str>) -> Result<Box<dyn SpeechEncoder>> {
        match spec {
            Some("mfcc") => Ok(Box::new(MfccStatsEncoder::default())),
            Some(p) => Ok(Box::new(ConvEncoder::load(Path::new(p))?)),
            None => {
                let p = self
                    .manifest()
                    .require(self.manifest().path(artifacts::ENCODER), "train-encoder")?;
                Ok(Box::new(ConvEncoder::load(&p)?))
            }
        }
    }

    fn embeddings(&self, given: Option<PathBuf>) -> Result<BTreeMap<String, Vec<f64>>> {
        let p = match given {
            Some(p) => p,
            None => self
                .manifest()
                .require(self.manifest().path(artifacts::EMBEDDINGS), "extract-embeddings")?,
        };
        Ok(read_embeddings(&p)?.into_iter().map(|e| (e.speaker_id, e.vector)).collect())
    }

    /// Speaker source matching a model: its own table, or embeddings from disk.
    fn speakers_for(&self, model: &SampleRnn, embeddings: Option<PathBuf>) -> Result<SpeakerSource> {
        match model.config.speaker_mode {
            SpeakerMode::OneHot { .. } => Ok(SpeakerSource::Table),
            SpeakerMode::Encoder => Ok(SpeakerSource::Embeddings(self.embeddings(embeddings)?)),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_if_changed(path, text.as_bytes()).map(|_| ())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn cmd_synth_corpus(out: &Path, n: usize, secs: f64, n_extra: usize, extra_secs: f64, seed: u64) -> Result<()> {
    let voices = generate_corpus(out, &speaker_requests(n, secs, n_extra, extra_secs), seed)?;
    for v in &voices {
        info!(
            "{} ({}): f0 {:.0} Hz, formant scale {:.2}",
            v.speaker_id,
            v.gender.tag(),
            v.f0_hz,
            v.formant_scale
        );
    }
    Ok(())
}

fn cmd_prepare(corpora: &[PathBuf], config: Option<&Path>, seed: Option<u64>, out: &Path, desk: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(config, desk)?;
    let seed = seed.unwrap_or(cfg.seed);
    let (m, report) = prepare(corpora, &cfg, out, seed, desk)?;
    println!(
        "manifest {} ({} cached, {} rewritten, {} excluded; see {})",
        m.path(crate::manifest::MANIFEST_FILE).display(),
        report.cached,
        report.rewritten,
        report.excluded.len(),
        m.path(&m.report).display()
    );
    Ok(())
}

fn cmd_train_encoder(common: &Common, out: Option<PathBuf>) -> Result<()> {
    let s = Session::open(common)?;
    let out = s.out(out, artifacts::ENCODER);
    let mut clips = Vec::new();
    for spk in s.store.speakers_in(Split::Train) {
        clips.extend(s.store.clips(&spk, Split::Train)?);
    }
    let report = train_encoder(&clips, &s.config().encoder_config(s.seed)?)?;
    if let Some(dir) = out.parent() {
        create_dir(dir)?;
    }
    report.encoder.save(&out)?;
    let mut csv = String::from("worker,initial_loss,final_loss\n");
    for (w, init) in &report.initial_loss {
        csv.push_str(&format!("{},{init:.6},{:.6}\n", w.name(), report.final_loss[w]));
    }
    write_text(&out.with_file_name(artifacts::ENCODER_LOSS), &csv)?;
    println!("encoder written to {}", out.display());
    Ok(())
}

fn cmd_extract_embeddings(common: &Common, encoder: Option<&str>, seconds: Option<f64>, out: Option<PathBuf>) -> Result<()> {
    let s = Session::open(common)?;
    let enc = s.encoder(encoder)?;
    let want = seconds.unwrap_or(s.config().embedding_seconds);
    let out = s.out(out, artifacts::EMBEDDINGS);
    let mut embeddings: Vec<SpeakerEmbedding> = Vec::new();
    let groups = [(Split::Train, &s.store.plan.base_speakers), (Split::Seed, &s.store.plan.adapt_speakers)];
    for (split, speakers) in groups {
        for (i, spk) in speakers.iter().enumerate() {
            let pool = s.store.clips(spk, split)?;
            let available: f64 = pool.iter().map(|c| c.duration_seconds()).sum();
            let t = if available < want {
                warn!("{spk}: only {available:.1} s of {split} material, using all of it");
                (available * 1000.0).floor() / 1000.0
            } else {
                want
            };
            let seed = sample_seed(&pool, t, s.seed.wrapping_add(i as u64))?;
            embeddings.push(embed_seed(&seed, &pool, enc.as_ref())?);
        }
    }
    if let Some(dir) = out.parent() {
        create_dir(dir)?;
    }
    write_embeddings(&out, &embeddings)?;
    println!("{} embeddings written to {}", embeddings.len(), out.display());
    Ok(())
}

fn cmd_train(common: &Common, variant: &str, embeddings: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let s = Session::open(common)?;
    let out = s.out(out, artifacts::RUNS);
    let mut tcfg = s.config().train_config();
    tcfg.seed = s.seed;
    let base = s.config().model_config();
    let needs_embeddings = variant == "all" || variant.parse::<Variant>()?.speaker == SpeakerKind::Encoder;
    let emb = if needs_embeddings { Some(s.embeddings(embeddings)?) } else { None };
    let prepare = |f0uv: bool| -> Result<_> {
        Ok((
            s.store.windows(Split::Train, f0uv)?,
            s.store.windows(Split::Validation, f0uv)?,
            s.store.numeric_dim(f0uv),
        ))
    };
    let runs: Vec<(Variant, RunLog)> = if variant == "all" {
        run_grid(&base, &tcfg, emb.as_ref(), prepare, Some(&out))?
    } else {
        let v: Variant = variant.parse()?;
        let (train_split, val, dim) = prepare(v.f0uv)?;
        let data = variant_data(&base, v, train_split, val, dim)?;
        let speakers = match (v.speaker, emb) {
            (SpeakerKind::Encoder, Some(map)) => SpeakerSource::Embeddings(map),
            _ => SpeakerSource::Table,
        };
        let dir = out.join(v.to_string());
        create_dir(&dir)?;
        let mut model = SampleRnn::new(data.model, s.seed)?;
        let log = train(&mut model, &data.train, &data.validation, &speakers, &tcfg, Some(&dir))?;
        write_text(&dir.join("runlog.csv"), &log.to_csv())?;
        vec![(v, log)]
    };
    for (v, log) in runs {
        write_text(&out.join(v.to_string()).join("run.toml"), &format!("variant = \"{v}\"\nseed = {}\n", s.seed))?;
        println!(
            "{v}: best epoch {} val {:.4} (epoch 0 {:.4})",
            log.best_epoch,
            log.best_val().unwrap_or(f64::NAN),
            log.epochs[0].val_nll
        );
    }
    Ok(())
}

fn sanitize(id: &str) -> String {
    id.replace('/', "__")
}

fn cmd_synthesize(
    common: &Common,
    checkpoint: &Path,
    utterances: &[String],
    voice: Option<&str>,
    embeddings: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let s = Session::open(common)?;
    let model = SampleRnn::load(&s.manifest().require(checkpoint.to_path_buf(), "train")?)?;
    let f0uv = s.store.f0uv_for(model.config.numeric_dim)?;
    let speakers = s.speakers_for(&model, embeddings)?;
    let sampling = s.config().sampling()?;
    let out = s.out(out, artifacts::SYNTH);
    create_dir(&out)?;
    let ids: Vec<String> = if utterances.is_empty() {
        s.store
            .plan
            .base_speakers
            .iter()
            .filter_map(|spk| {
                s.store
                    .entries(Split::Test)
                    .into_iter()
                    .find(|e| &e.speaker_id == spk)
                    .map(|e| e.utterance_id.clone())
            })
            .collect()
    } else {
        utterances.to_vec()
    };
    for (i, id) in ids.iter().enumerate() {
        let entry = s.store.entry(id)?;
        let spk = voice.unwrap_or(&entry.speaker_id);
        let frames = s.store.frames(entry, f0uv)?;
        let clip = synthesize(
            &model,
            &frames,
            speakers.resolve(&model, spk)?,
            spk,
            id,
            sampling,
            s.seed.wrapping_add(i as u64),
        )?;
        let stem = id.rsplit('/').next().unwrap_or(id);
        let path = out.join(format!("{}__{}.wav", sanitize(spk), sanitize(stem)));
        write_waveform(&path, &clip)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn score(s: &Session, model: &SampleRnn, speakers: &SpeakerSource) -> Result<DistortionReport> {
    let f0uv = s.store.f0uv_for(model.config.numeric_dim)?;
    let cfg = s.config().synthesis_config(s.seed)?;
    let mut report = DistortionReport::default();
    for (i, spk) in s.store.plan.base_speakers.iter().enumerate() {
        let tests = s.store.test_utterances(spk, Split::Test, f0uv, s.config().max_test_utterances)?;
        let cfg = srnn_core::evaluation::SynthesisConfig {
            seed: cfg.seed.wrapping_add(1000 * i as u64),
            ..cfg.clone()
        };
        report
            .rows
            .extend(evaluate_speaker(model, spk, speakers.resolve(model, spk)?, &tests, None, &cfg)?);
    }
    Ok(report)
}

fn summary(report: &DistortionReport) -> (f64, Option<f64>, usize) {
    let n = report.rows.len();
    let mcd = report.rows.iter().map(|r| r.mcd_db).sum::<f64>() / n.max(1) as f64;
    let f0: Vec<f64> = report.rows.iter().filter_map(|r| r.rmse_f0.hz()).collect();
    let f0 = (!f0.is_empty()).then(|| f0.iter().sum::<f64>() / f0.len() as f64);
    (mcd, f0, n)
}

fn cmd_evaluate(
    common: &Common,
    checkpoint: Option<PathBuf>,
    run: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let s = Session::open(common)?;
    let out = s.out(out, artifacts::EVAL);
    create_dir(&out)?;
    let main = match (&checkpoint, &run) {
        (Some(c), _) => s.manifest().require(c.clone(), "train")?,
        (None, Some(r)) => s.manifest().require(r.join("best.ckpt"), "train")?,
        (None, None) => return Err(Error::Config("evaluate needs --checkpoint or --run".into())),
    };
    let model = SampleRnn::load(&main)?;
    let speakers = s.speakers_for(&model, embeddings)?;
    let report = score(&s, &model, &speakers)?;
    write_text(&out.join("distortion.csv"), &report.to_csv())?;
    let (mcd, f0, n) = summary(&report);
    println!(
        "{}: MCD {mcd:.3} dB, RMSE-F0 {} over {n} utterances",
        main.display(),
        f0.map_or("undefined".into(), |v| format!("{v:.2} Hz"))
    );
    if let Some(r) = run {
        let mut snaps: Vec<(usize, PathBuf)> = std::fs::read_dir(&r)
            .map_err(|e| Error::io(&r, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let name = p.file_name()?.to_str()?;
                let epoch = name.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse().ok()?;
                Some((epoch, p))
            })
            .collect();
        snaps.sort();
        if snaps.is_empty() {
            warn!("{} has no epoch snapshots; set snapshot_every to record them", r.display());
        }
        let mut csv = String::from("epoch,mcd_db,rmse_f0_hz,utterances\n");
        for (epoch, p) in snaps {
            let m = SampleRnn::load(&p)?;
            let (mcd, f0, n) = summary(&score(&s, &m, &speakers)?);
            csv.push_str(&format!(
                "{epoch},{mcd:.6},{},{n}\n",
                f0.map(|v| format!("{v:.6}")).unwrap_or_default()
            ));
        }
        write_text(&out.join("distortion_by_epoch.csv"), &csv)?;
    }
    Ok(())
}

fn cmd_adapt_curve(
    common: &Common,
    checkpoint: &Path,
    encoder: Option<&str>,
    seconds: &[f64],
    out: Option<PathBuf>,
) -> Result<()> {
    let s = Session::open(common)?;
    let model = SampleRnn::load(&s.manifest().require(checkpoint.to_path_buf(), "train")?)?;
    if model.config.speaker_mode != SpeakerMode::Encoder {
        return Err(Error::Config(
            "adaptation needs an encoder-variant checkpoint; one-hot models cannot take unseen speakers".into(),
        ));
    }
    let f0uv = s.store.f0uv_for(model.config.numeric_dim)?;
    let enc = s.encoder(encoder)?;
    let seconds = if seconds.is_empty() { s.config().adapt_seed_seconds.clone() } else { seconds.to_vec() };
    let out = s.out(out, artifacts::ADAPT);
    create_dir(&out)?;
    let speakers: Vec<AdaptationSpeaker> = s
        .store
        .plan
        .adapt_speakers
        .iter()
        .map(|spk| {
            Ok(AdaptationSpeaker {
                speaker_id: spk.clone(),
                seed_pool: s.store.clips(spk, Split::Seed)?,
                tests: s.store.test_utterances(spk, Split::AdaptTest, f0uv, s.config().max_test_utterances)?,
            })
        })
        .collect::<Result<_>>()?;
    let report = adaptation_curve(&model, enc.as_ref(), &speakers, &seconds, &s.config().synthesis_config(s.seed)?)?;
    write_text(&out.join("adapt_rows.csv"), &report.to_csv())?;
    write_text(&out.join("adapt_curve.csv"), &report.curve_csv())?;
    print!("{}", report.curve_csv());
    Ok(())
}

fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    rdr.records()
        .enumerate()
        .map(|(i, r)| {
            let r = r.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                reason: e.to_string(),
            })?;
            Ok(headers.iter().map(String::from).zip(r.iter().map(String::from)).collect())
        })
        .collect()
}

fn column(rows: &[BTreeMap<String, String>], x: &str, y: &str) -> Vec<(f64, f64)> {
    rows.iter()
        .filter_map(|r| {
            let x = r.get(x)?.parse().ok()?;
            let y = r.get(y).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
            Some((x, y))
        })
        .collect()
}

fn run_label(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_plot(runlogs: &[PathBuf], epoch_csvs: &[PathBuf], curve: Option<&Path>, out: &Path) -> Result<()> {
    if runlogs.is_empty() && epoch_csvs.is_empty() && curve.is_none() {
        return Err(Error::Config("nothing to plot; pass --runlog, --epoch-distortion or --curve".into()));
    }
    create_dir(out)?;
    let mut written = Vec::new();
    if !runlogs.is_empty() {
        let mut series = Vec::new();
        for p in runlogs {
            let rows = read_csv(p)?;
            let label = run_label(p);
            series.push(Series {
                label: format!("{label} train"),
                points: column(&rows, "epoch", "train_nll"),
            });
            series.push(Series {
                label: format!("{label} val"),
                points: column(&rows, "epoch", "val_nll"),
            });
        }
        let svg = render(&[Panel {
            title: "Loss".into(),
            x_label: "epoch".into(),
            y_label: "NLL (nats/sample)".into(),
            log_x: false,
            series,
        }]);
        written.push(out.join("loss.svg"));
        write_text(written.last().unwrap(), &svg)?;
    }
    let two_panels = |rows: &[(String, Vec<BTreeMap<String, String>>)], x: &str, x_label: &str, log_x: bool| {
        ["mcd_db", "rmse_f0_hz"].map(|col| Panel {
            title: if col == "mcd_db" { "MCD".into() } else { "RMSE F0".into() },
            x_label: x_label.into(),
            y_label: if col == "mcd_db" { "dB".into() } else { "Hz".into() },
            log_x,
            series: rows
                .iter()
                .map(|(label, r)| Series {
                    label: label.clone(),
                    points: column(r, x, col),
                })
                .collect(),
        })
    };
    if !epoch_csvs.is_empty() {
        let rows = epoch_csvs
            .iter()
            .map(|p| Ok((run_label(p), read_csv(p)?)))
            .collect::<Result<Vec<_>>>()?;
        written.push(out.join("distortion_epoch.svg"));
        write_text(written.last().unwrap(), &render(&two_panels(&rows, "epoch", "epoch", false)))?;
    }
    if let Some(c) = curve {
        let rows = vec![("unseen speakers".to_string(), read_csv(c)?)];
        written.push(out.join("adaptation.svg"));
        write_text(written.last().unwrap(), &render(&two_panels(&rows, "T", "seed length T (s)", true)))?;
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

/// Process exit code for an error: 1 usage/configuration, 3 numerical failure, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Numerical("nan".into())), 3);
        assert_eq!(exit_code(&Error::Insufficient("x".into())), 2);
    }

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from(["srnn", "adapt-curve", "--checkpoint", "c", "--T", "1,10,60,120"]).unwrap();
        match cli.command {
            Command::AdaptCurve { seconds, common, .. } => {
                assert_eq!(seconds, vec![1.0, 10.0, 60.0, 120.0]);
                assert_eq!(common.manifest, PathBuf::from("work"));
            }
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["srnn", "prepare"]).is_err());
    }

    #[test]
    fn adaptation_figure_has_two_panels() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("adapt_curve.csv");
        std::fs::write(&csv, "T,mcd_db,rmse_f0_hz,speakers\n1,9.5,40.0,2\n10,8.0,,2\n120,7.0,30.0,2\n").unwrap();
        cmd_plot(&[], &[], Some(&csv), dir.path()).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("adaptation.svg")).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("MCD") && svg.contains("RMSE F0"));
    }
}
