//! Flat experiment configuration. Keys mirror the hyperparameter table; everything else has a
//! documented default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use srnn_core::audio::SAMPLE_RATE;
use srnn_core::datasets::SplitConfig;
use srnn_core::embeddings::{EncoderTrainConfig, WorkerKind};
use srnn_core::evaluation::{SynthesisConfig, SEED_SECONDS};
use srnn_core::model::{ModelConfig, Sampling, SpeakerMode};
use srnn_core::training::TrainConfig;
use srnn_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub speech_sampling_frequency: u32,
    pub speech_quantization_bits: u32,
    pub speaker_embedding_size: usize,
    pub global_features_size: usize,
    pub categorical_linguistic_features_embedding_size: usize,
    pub top_frame_level_seq_length: usize,
    pub top_frame_level_inp_size: usize,
    pub upsampling_ratios: Vec<usize>,
    pub gru_hidden_size: usize,
    pub batch_size: usize,
    pub initial_learning_rate: f64,
    pub learning_rate_patience: usize,
    pub learning_scaling_factor: f64,

    pub epochs: usize,
    pub improvement_threshold: f64,
    pub snapshot_every: usize,
    pub mlp_hidden_size: usize,
    pub code_embedding_size: usize,
    pub ar_order: usize,
    pub seed: u64,

    pub base_speakers_per_gender: usize,
    pub adapt_speakers_per_gender: usize,
    pub validation_seconds: f64,
    pub test_seconds: f64,
    pub seed_pool_seconds: f64,
    pub adapt_test_seconds: f64,
    pub split_scale: f64,
    /// Seconds a frame midpoint may fall past the last label before alignment fails.
    pub label_edge_tolerance: f64,

    pub encoder_workers: Vec<String>,
    pub encoder_steps: usize,
    pub encoder_batch: usize,
    pub encoder_crop_samples: usize,
    pub encoder_learning_rate: f64,
    /// Seconds of material averaged into each speaker embedding.
    pub embedding_seconds: f64,
    pub adapt_seed_seconds: Vec<f64>,

    /// `categorical` or `argmax`.
    pub sampling: String,
    pub temperature: f64,
    /// Cap on test utterances synthesized per speaker (0 = all).
    pub max_test_utterances: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let s = SplitConfig::default();
        let e = EncoderTrainConfig::default();
        Self {
            speech_sampling_frequency: SAMPLE_RATE,
            speech_quantization_bits: 8,
            speaker_embedding_size: m.speaker_embedding_size,
            global_features_size: m.global_features_size,
            categorical_linguistic_features_embedding_size: m.categorical_embedding_size,
            top_frame_level_seq_length: m.seq_len,
            top_frame_level_inp_size: m.frame_size,
            upsampling_ratios: m.upsampling_ratios.clone(),
            gru_hidden_size: m.hidden_size,
            batch_size: t.batch_size,
            initial_learning_rate: t.learning_rate,
            learning_rate_patience: t.lr_patience,
            learning_scaling_factor: t.lr_scale,
            epochs: t.epochs,
            improvement_threshold: t.improvement_threshold,
            snapshot_every: 0,
            mlp_hidden_size: m.mlp_hidden,
            code_embedding_size: m.code_embedding_size,
            ar_order: m.ar_order,
            seed: 0,
            base_speakers_per_gender: s.n_per_gender,
            adapt_speakers_per_gender: s.n_adapt_per_gender,
            validation_seconds: s.validation_seconds,
            test_seconds: s.test_seconds,
            seed_pool_seconds: s.seed_pool_seconds,
            adapt_test_seconds: s.adapt_test_seconds,
            split_scale: s.scale,
            label_edge_tolerance: 0.02,
            encoder_workers: e.workers.iter().map(|w| w.name().to_string()).collect(),
            encoder_steps: e.steps,
            encoder_batch: e.batch,
            encoder_crop_samples: e.crop_samples,
            encoder_learning_rate: e.lr,
            embedding_seconds: 60.0,
            adapt_seed_seconds: SEED_SECONDS.to_vec(),
            sampling: "categorical".into(),
            temperature: 1.0,
            max_test_utterances: 0,
        }
    }
}

impl ExperimentConfig {
    /// Small model and corpus targets that train on a CPU in minutes per epoch.
    pub fn desk_scale() -> Self {
        Self {
            gru_hidden_size: 64,
            mlp_hidden_size: 64,
            batch_size: 32,
            initial_learning_rate: 1e-3,
            epochs: 5,
            base_speakers_per_gender: 1,
            adapt_speakers_per_gender: 1,
            split_scale: 0.1,
            encoder_steps: 300,
            embedding_seconds: 60.0,
            max_test_utterances: 2,
            ..Self::default()
        }
    }

    /// Preset (default or desk scale) overlaid with the keys present in `path`.
    pub fn load(path: Option<&Path>, desk_scale: bool) -> Result<Self> {
        let base = if desk_scale { Self::desk_scale() } else { Self::default() };
        let cfg = match path {
            None => base,
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::overlay(base, &text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn overlay(base: Self, text: &str) -> std::result::Result<Self, String> {
        let patch: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| e.to_string())?;
        for (k, v) in patch {
            merged.insert(k, v);
        }
        toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.speech_sampling_frequency != SAMPLE_RATE {
            return Err(Error::Config(format!(
                "speech_sampling_frequency must be {SAMPLE_RATE}, got {}",
                self.speech_sampling_frequency
            )));
        }
        if self.speech_quantization_bits != 8 {
            return Err(Error::Config("speech_quantization_bits must be 8".into()));
        }
        self.sampling()?;
        self.workers()?;
        self.train_config().validate()?;
        if self.adapt_seed_seconds.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("adapt_seed_seconds must be positive".into()));
        }
        Ok(())
    }

    /// Model shape without the data-dependent parts (vocabularies, numeric width, speakers).
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            frame_size: self.top_frame_level_inp_size,
            seq_len: self.top_frame_level_seq_length,
            upsampling_ratios: self.upsampling_ratios.clone(),
            hidden_size: self.gru_hidden_size,
            speaker_embedding_size: self.speaker_embedding_size,
            global_features_size: self.global_features_size,
            categorical_embedding_size: self.categorical_linguistic_features_embedding_size,
            ar_order: self.ar_order,
            code_embedding_size: self.code_embedding_size,
            mlp_hidden: self.mlp_hidden_size,
            speaker_mode: SpeakerMode::Encoder,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.initial_learning_rate,
            lr_patience: self.learning_rate_patience,
            lr_scale: self.learning_scaling_factor,
            epochs: self.epochs,
            improvement_threshold: self.improvement_threshold,
            seed: self.seed,
            snapshot_every: self.snapshot_every,
        }
    }

    pub fn split_config(&self, seed: u64) -> SplitConfig {
        SplitConfig {
            n_per_gender: self.base_speakers_per_gender,
            n_adapt_per_gender: self.adapt_speakers_per_gender,
            validation_seconds: self.validation_seconds,
            test_seconds: self.test_seconds,
            seed_pool_seconds: self.seed_pool_seconds,
            adapt_test_seconds: self.adapt_test_seconds,
            scale: self.split_scale,
            seed,
        }
    }

    pub fn workers(&self) -> Result<Vec<WorkerKind>> {
        self.encoder_workers.iter().map(|w| WorkerKind::parse(w)).collect()
    }

    pub fn encoder_config(&self, seed: u64) -> Result<EncoderTrainConfig> {
        Ok(EncoderTrainConfig {
            workers: self.workers()?,
            steps: self.encoder_steps,
            batch: self.encoder_batch,
            crop_samples: self.encoder_crop_samples,
            lr: self.encoder_learning_rate,
            seed,
            ..EncoderTrainConfig::default()
        })
    }

    pub fn sampling(&self) -> Result<Sampling> {
        match self.sampling.as_str() {
            "argmax" => Ok(Sampling::Argmax),
            "categorical" if self.temperature > 0.0 => Ok(Sampling::Categorical {
                temperature: self.temperature,
            }),
            "categorical" => Err(Error::Config("temperature must be positive".into())),
            other => Err(Error::Config(format!(
                "sampling must be `categorical` or `argmax`, got {other:?}"
            ))),
        }
    }

    pub fn synthesis_config(&self, seed: u64) -> Result<SynthesisConfig> {
        Ok(SynthesisConfig {
            sampling: self.sampling()?,
            seed,
            ..SynthesisConfig::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_hyperparameter_table() {
        let c = ExperimentConfig::default();
        assert_eq!(c.speech_sampling_frequency, 16000);
        assert_eq!(c.speaker_embedding_size, 100);
        assert_eq!(c.global_features_size, 50);
        assert_eq!(c.categorical_linguistic_features_embedding_size, 15);
        assert_eq!(c.top_frame_level_seq_length, 13);
        assert_eq!(c.top_frame_level_inp_size, 80);
        assert_eq!(c.upsampling_ratios, vec![4, 20]);
        assert_eq!(c.gru_hidden_size, 1024);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.initial_learning_rate, 1e-4);
        assert_eq!(c.learning_rate_patience, 3);
        assert_eq!(c.learning_scaling_factor, 0.5);
        assert_eq!(c.adapt_seed_seconds, vec![1.0, 10.0, 60.0, 120.0]);
    }

    #[test]
    fn file_keys_override_the_preset() {
        let c = ExperimentConfig::overlay(ExperimentConfig::desk_scale(), "epochs = 7\n").unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.gru_hidden_size, 64);
        assert!(ExperimentConfig::overlay(ExperimentConfig::default(), "nonsense = 1\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::desk_scale();
        let back = ExperimentConfig::overlay(ExperimentConfig::default(), &c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}
