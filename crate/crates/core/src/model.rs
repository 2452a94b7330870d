//! Conditioned two-tier SampleRNN over 8-bit μ-law codes.
//!
//! A top frame tier runs once per 80-sample frame, a mid tier once per 20 samples, and a
//! sample-level MLP predicts every code from the last `ar_order` codes. A global conditioning
//! vector built from the speaker embedding and the linguistic frame feeds all three levels.

use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::audio::{mulaw_decode_code, QuantizedSequence, TrainingWindow, MULAW_LEVELS, ZERO_CODE};
use crate::conditioning::{ConditioningFrame, FeatureSchema};
use crate::container;
use crate::embeddings::{onehot_table, SpeakerTable};
use crate::error::{Error, Result};
use crate::nn::{join, log_softmax, log_softmax_vec, relu, relu_backward, Embedding, Gru, Linear, Parameters};

pub const CHECKPOINT_KIND: &str = "samplernn";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpeakerMode {
    /// Trainable table indexed by position in `speakers`.
    OneHot { speakers: Vec<String> },
    /// Fixed embeddings supplied from outside (encoder-averaged seeds).
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frame_size: usize,
    pub seq_len: usize,
    pub upsampling_ratios: Vec<usize>,
    pub hidden_size: usize,
    pub speaker_embedding_size: usize,
    pub global_features_size: usize,
    pub categorical_embedding_size: usize,
    pub quantization_levels: usize,
    pub ar_order: usize,
    pub code_embedding_size: usize,
    pub mlp_hidden: usize,
    /// Vocabulary size of each categorical input feature.
    pub categorical_vocab: Vec<usize>,
    pub numeric_dim: usize,
    pub speaker_mode: SpeakerMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let schema = FeatureSchema::default();
        Self {
            frame_size: 80,
            seq_len: 13,
            upsampling_ratios: vec![4, 20],
            hidden_size: 1024,
            speaker_embedding_size: 100,
            global_features_size: 50,
            categorical_embedding_size: 15,
            quantization_levels: MULAW_LEVELS,
            ar_order: 20,
            code_embedding_size: 16,
            mlp_hidden: 1024,
            categorical_vocab: schema.categorical_cardinalities(),
            numeric_dim: schema.n_numeric() + 4,
            speaker_mode: SpeakerMode::Encoder,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frame_size", self.frame_size),
            ("seq_len", self.seq_len),
            ("hidden_size", self.hidden_size),
            ("speaker_embedding_size", self.speaker_embedding_size),
            ("global_features_size", self.global_features_size),
            ("categorical_embedding_size", self.categorical_embedding_size),
            ("ar_order", self.ar_order),
            ("code_embedding_size", self.code_embedding_size),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.upsampling_ratios.len() != 2 || self.upsampling_ratios.contains(&0) {
            return Err(Error::Config(format!(
                "expected two positive upsampling ratios, got {:?}",
                self.upsampling_ratios
            )));
        }
        let prod: usize = self.upsampling_ratios.iter().product();
        if prod != self.frame_size {
            return Err(Error::Config(format!(
                "upsampling ratios {:?} multiply to {prod}, frame size is {}",
                self.upsampling_ratios, self.frame_size
            )));
        }
        if self.quantization_levels != MULAW_LEVELS {
            return Err(Error::Config(format!(
                "only {MULAW_LEVELS} quantization levels are supported, got {}",
                self.quantization_levels
            )));
        }
        if self.ar_order > self.frame_size {
            return Err(Error::Config(format!(
                "ar_order {} exceeds the frame size {}",
                self.ar_order, self.frame_size
            )));
        }
        if self.categorical_vocab.contains(&0) {
            return Err(Error::Config("categorical vocabularies must be non-empty".into()));
        }
        if let SpeakerMode::OneHot { speakers } = &self.speaker_mode {
            if speakers.is_empty() {
                return Err(Error::Config("one-hot speaker mode needs at least one speaker".into()));
            }
        }
        Ok(())
    }

    /// Samples per mid-tier step.
    pub fn mid_frame(&self) -> usize {
        self.upsampling_ratios[1]
    }

    pub fn mid_steps_per_frame(&self) -> usize {
        self.upsampling_ratios[0]
    }

    pub fn window_len(&self) -> usize {
        self.frame_size * self.seq_len
    }

    fn conditioning_input(&self) -> usize {
        self.speaker_embedding_size
            + self.categorical_vocab.len() * self.categorical_embedding_size
            + self.numeric_dim
    }

    fn sample_input(&self) -> usize {
        self.ar_order * self.code_embedding_size + self.hidden_size + self.global_features_size
    }
}

/// Recurrent state of both frame tiers.
#[derive(Debug, Clone, PartialEq)]
pub struct TierState {
    pub top: Array1<f64>,
    pub mid: Array1<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum SpeakerRef<'a> {
    /// Row of the one-hot table.
    Index(usize),
    Vector(&'a [f64]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Sampling {
    Argmax,
    Categorical { temperature: f64 },
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling::Categorical { temperature: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRnn {
    pub config: ModelConfig,
    pub speaker_table: Option<SpeakerTable>,
    pub categorical: Vec<Embedding>,
    pub conditioning: Linear,
    pub top: Gru,
    pub top_h0: Array1<f64>,
    pub top_up: Linear,
    pub mid: Gru,
    pub mid_h0: Array1<f64>,
    pub mid_up: Linear,
    pub code_embedding: Embedding,
    pub mlp_in: Linear,
    pub mlp_hidden: Linear,
    pub mlp_out: Linear,
    decode: Vec<f64>,
}

impl Parameters for SampleRnn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        if let Some(t) = &self.speaker_table {
            t.visit(&join(prefix, "speaker_table"), f);
        }
        for (i, e) in self.categorical.iter().enumerate() {
            e.visit(&join(prefix, &format!("categorical{i}")), f);
        }
        self.conditioning.visit(&join(prefix, "conditioning"), f);
        self.top.visit(&join(prefix, "top"), f);
        f(&join(prefix, "top_h0"), self.top_h0.as_slice().unwrap());
        self.top_up.visit(&join(prefix, "top_up"), f);
        self.mid.visit(&join(prefix, "mid"), f);
        f(&join(prefix, "mid_h0"), self.mid_h0.as_slice().unwrap());
        self.mid_up.visit(&join(prefix, "mid_up"), f);
        self.code_embedding.visit(&join(prefix, "code_embedding"), f);
        self.mlp_in.visit(&join(prefix, "mlp_in"), f);
        self.mlp_hidden.visit(&join(prefix, "mlp_hidden"), f);
        self.mlp_out.visit(&join(prefix, "mlp_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        if let Some(t) = &mut self.speaker_table {
            t.visit_mut(&join(prefix, "speaker_table"), f);
        }
        for (i, e) in self.categorical.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("categorical{i}")), f);
        }
        self.conditioning.visit_mut(&join(prefix, "conditioning"), f);
        self.top.visit_mut(&join(prefix, "top"), f);
        f(&join(prefix, "top_h0"), self.top_h0.as_slice_mut().unwrap());
        self.top_up.visit_mut(&join(prefix, "top_up"), f);
        self.mid.visit_mut(&join(prefix, "mid"), f);
        f(&join(prefix, "mid_h0"), self.mid_h0.as_slice_mut().unwrap());
        self.mid_up.visit_mut(&join(prefix, "mid_up"), f);
        self.code_embedding.visit_mut(&join(prefix, "code_embedding"), f);
        self.mlp_in.visit_mut(&join(prefix, "mlp_in"), f);
        self.mlp_hidden.visit_mut(&join(prefix, "mlp_hidden"), f);
        self.mlp_out.visit_mut(&join(prefix, "mlp_out"), f);
    }
}

/// Per-window result of teacher-forced evaluation.
#[derive(Debug, Clone)]
pub struct WindowResult {
    pub mean_nll: f64,
    /// NLL in nats of every target position.
    pub nll: Vec<f64>,
    /// States after the last step, for carrying into the next window.
    pub state: TierState,
}

struct Trace {
    g: Array2<f64>,
    top_x: Array2<f64>,
    top_hs: Array2<f64>,
    top_cache: crate::nn::GruCache,
    mid_x: Array2<f64>,
    mid_hs: Array2<f64>,
    mid_cache: crate::nn::GruCache,
    sample_x: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    log_probs: Array2<f64>,
}

impl SampleRnn {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &config;
        let h = cfg.hidden_size;
        let c = cfg.global_features_size;
        let speaker_table = match &cfg.speaker_mode {
            SpeakerMode::OneHot { speakers } => {
                Some(onehot_table(speakers, cfg.speaker_embedding_size, &mut rng))
            }
            SpeakerMode::Encoder => None,
        };
        let categorical = cfg
            .categorical_vocab
            .iter()
            .map(|&v| Embedding::new(&mut rng, v, cfg.categorical_embedding_size, 1.0))
            .collect();
        let conditioning = Linear::new(&mut rng, cfg.conditioning_input(), c);
        let mid_in = cfg.mid_frame() + c + h;
        let h0_dist = Uniform::new_inclusive(-0.1, 0.1).expect("valid bound");
        let model = Self {
            speaker_table,
            categorical,
            conditioning,
            top: Gru::new(&mut rng, cfg.frame_size + c, h),
            top_h0: Array1::from_shape_simple_fn(h, || h0_dist.sample(&mut rng)),
            top_up: Linear::new(&mut rng, h, cfg.mid_steps_per_frame() * h),
            mid: Gru::new(&mut rng, mid_in, h),
            mid_h0: Array1::from_shape_simple_fn(h, || h0_dist.sample(&mut rng)),
            mid_up: Linear::new(&mut rng, h, cfg.mid_frame() * h),
            code_embedding: Embedding::new(&mut rng, MULAW_LEVELS, cfg.code_embedding_size, 1.0),
            mlp_in: Linear::new(&mut rng, cfg.sample_input(), cfg.mlp_hidden),
            mlp_hidden: Linear::new(&mut rng, cfg.mlp_hidden, cfg.mlp_hidden),
            mlp_out: Linear::new(&mut rng, cfg.mlp_hidden, MULAW_LEVELS),
            decode: (0..=255u8).map(mulaw_decode_code).collect(),
            config,
        };
        Ok(model)
    }

    pub fn initial_state(&self) -> TierState {
        TierState {
            top: self.top_h0.clone(),
            mid: self.mid_h0.clone(),
        }
    }

    fn speaker_vector(&self, speaker: SpeakerRef<'_>) -> Result<Array1<f64>> {
        let e = match speaker {
            SpeakerRef::Index(i) => {
                let table = self.speaker_table.as_ref().ok_or_else(|| {
                    Error::Config("speaker index given to a model without a speaker table".into())
                })?;
                Array1::from(table.lookup(i)?.vector)
            }
            SpeakerRef::Vector(v) => Array1::from(v.to_vec()),
        };
        if e.len() != self.config.speaker_embedding_size {
            return Err(Error::Dimension {
                what: "speaker embedding",
                expected: self.config.speaker_embedding_size,
                got: e.len(),
            });
        }
        Ok(e)
    }

    fn conditioning_inputs(&self, e: &Array1<f64>, frames: &[ConditioningFrame]) -> Result<Array2<f64>> {
        let cfg = &self.config;
        let ce = cfg.categorical_embedding_size;
        let mut g = Array2::zeros((frames.len(), cfg.conditioning_input()));
        for (row_i, frame) in frames.iter().enumerate() {
            if frame.categorical.len() != cfg.categorical_vocab.len() {
                return Err(Error::Dimension {
                    what: "categorical features",
                    expected: cfg.categorical_vocab.len(),
                    got: frame.categorical.len(),
                });
            }
            if frame.numeric.len() != cfg.numeric_dim {
                return Err(Error::Dimension {
                    what: "numeric features",
                    expected: cfg.numeric_dim,
                    got: frame.numeric.len(),
                });
            }
            let mut row = g.row_mut(row_i);
            let e_len = e.len();
            row.slice_mut(s![..e_len]).assign(e);
            let mut off = e_len;
            for (k, &id) in frame.categorical.iter().enumerate() {
                let id = id as usize;
                if id >= cfg.categorical_vocab[k] {
                    return Err(Error::OutOfRange(format!(
                        "categorical feature {k} id {id} outside vocabulary of {}",
                        cfg.categorical_vocab[k]
                    )));
                }
                row.slice_mut(s![off..off + ce]).assign(&self.categorical[k].row(id));
                off += ce;
            }
            row.slice_mut(s![off..]).assign(&ArrayView1::from(&frame.numeric));
        }
        Ok(g)
    }

    /// `c = W [e ; categorical embeddings ; numeric] + b` for one Δt frame.
    pub fn build_global_conditioning(&self, speaker: SpeakerRef<'_>, frame: &ConditioningFrame) -> Result<Array1<f64>> {
        let e = self.speaker_vector(speaker)?;
        let g = self.conditioning_inputs(&e, std::slice::from_ref(frame))?;
        Ok(self.conditioning.forward_vec(&g.row(0)))
    }

    fn decoded(&self, codes: &[u8]) -> Array1<f64> {
        codes.iter().map(|&c| self.decode[c as usize]).collect()
    }

    fn check_state(&self, state: &ArrayView1<f64>) -> Result<()> {
        if state.len() != self.config.hidden_size {
            return Err(Error::Dimension {
                what: "tier state",
                expected: self.config.hidden_size,
                got: state.len(),
            });
        }
        Ok(())
    }

    fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
        if expected != got {
            return Err(Error::Dimension { what, expected, got });
        }
        Ok(())
    }

    /// One top-tier step on the previous frame. Returns one conditioning row per mid step and
    /// the new state.
    pub fn top_tier_step(
        &self,
        prev_frame: &[u8],
        c: &ArrayView1<f64>,
        state: &ArrayView1<f64>,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        let cfg = &self.config;
        Self::check_len("top tier frame", cfg.frame_size, prev_frame.len())?;
        Self::check_len("global conditioning", cfg.global_features_size, c.len())?;
        self.check_state(state)?;
        let x = concatenate![Axis(0), self.decoded(prev_frame), c.view()];
        let h = self.top.step(&x.view(), state);
        let up = self
            .top_up
            .forward_vec(&h.view())
            .into_shape_with_order((cfg.mid_steps_per_frame(), cfg.hidden_size))
            .expect("upsampling shape");
        Ok((up, h))
    }

    /// One mid-tier step. Returns one conditioning row per sample and the new state.
    pub fn mid_tier_step(
        &self,
        prev_frame: &[u8],
        top_conditioning: &ArrayView1<f64>,
        c: &ArrayView1<f64>,
        state: &ArrayView1<f64>,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        let cfg = &self.config;
        Self::check_len("mid tier frame", cfg.mid_frame(), prev_frame.len())?;
        Self::check_len("top conditioning", cfg.hidden_size, top_conditioning.len())?;
        Self::check_len("global conditioning", cfg.global_features_size, c.len())?;
        self.check_state(state)?;
        let x = concatenate![Axis(0), self.decoded(prev_frame), c.view(), top_conditioning.view()];
        let h = self.mid.step(&x.view(), state);
        let up = self
            .mid_up
            .forward_vec(&h.view())
            .into_shape_with_order((cfg.mid_frame(), cfg.hidden_size))
            .expect("upsampling shape");
        Ok((up, h))
    }

    /// Log-probabilities of the next code.
    fn sample_log_probs(&self, prev: &[u8], sample_conditioning: &ArrayView1<f64>, c: &ArrayView1<f64>) -> Result<Array1<f64>> {
        let cfg = &self.config;
        Self::check_len("sample history", cfg.ar_order, prev.len())?;
        Self::check_len("sample conditioning", cfg.hidden_size, sample_conditioning.len())?;
        Self::check_len("global conditioning", cfg.global_features_size, c.len())?;
        let d = cfg.code_embedding_size;
        let mut x = Array1::zeros(cfg.sample_input());
        for (p, &code) in prev.iter().enumerate() {
            x.slice_mut(s![p * d..(p + 1) * d])
                .assign(&self.code_embedding.row(code as usize));
        }
        let off = cfg.ar_order * d;
        x.slice_mut(s![off..off + cfg.hidden_size]).assign(sample_conditioning);
        x.slice_mut(s![off + cfg.hidden_size..]).assign(c);
        let h1 = self.mlp_in.forward_vec(&x.view()).mapv(|v| v.max(0.0));
        let h2 = self.mlp_hidden.forward_vec(&h1.view()).mapv(|v| v.max(0.0));
        Ok(log_softmax_vec(&self.mlp_out.forward_vec(&h2.view()).view()))
    }

    /// Distribution over the 256 codes given the last `ar_order` codes.
    pub fn sample_level_predict(
        &self,
        prev: &[u8],
        sample_conditioning: &ArrayView1<f64>,
        c: &ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        Ok(self.sample_log_probs(prev, sample_conditioning, c)?.mapv(f64::exp))
    }

    /// Validates a window and returns its history `context ++ targets`.
    fn window_history(&self, window: &TrainingWindow) -> Result<Vec<u8>> {
        let cfg = &self.config;
        Self::check_len("window context", cfg.frame_size, window.context.len())?;
        Self::check_len("window targets", cfg.window_len(), window.target_codes.len())?;
        Self::check_len("window conditioning", cfg.seq_len, window.conditioning.len())?;
        let mut hist = window.context.clone();
        hist.extend_from_slice(&window.target_codes);
        Ok(hist)
    }

    fn forward_trace(
        &self,
        hist: &[u8],
        frames: &[ConditioningFrame],
        speaker: SpeakerRef<'_>,
        init: Option<&TierState>,
    ) -> Result<Trace> {
        let cfg = &self.config;
        let (f, h, cdim) = (cfg.frame_size, cfg.hidden_size, cfg.global_features_size);
        let n_frames = frames.len();
        let n_mid = n_frames * cfg.mid_steps_per_frame();
        let n = n_frames * f;
        let mf = cfg.mid_frame();
        let e = self.speaker_vector(speaker)?;
        let g = self.conditioning_inputs(&e, frames)?;
        let c = self.conditioning.forward(&g.view());

        let (top_h0, mid_h0) = match init {
            Some(s) => {
                self.check_state(&s.top.view())?;
                self.check_state(&s.mid.view())?;
                (s.top.clone(), s.mid.clone())
            }
            None => (self.top_h0.clone(), self.mid_h0.clone()),
        };

        let mut top_x = Array2::zeros((n_frames, f + cdim));
        for j in 0..n_frames {
            let mut row = top_x.row_mut(j);
            row.slice_mut(s![..f]).assign(&self.decoded(&hist[j * f..(j + 1) * f]));
            row.slice_mut(s![f..]).assign(&c.row(j));
        }
        let (top_hs, top_cache) = self.top.forward_seq(&top_x.view(), &top_h0.view());
        let top_up = self
            .top_up
            .forward(&top_hs.view())
            .into_shape_with_order((n_mid, h))
            .expect("upsampling shape");

        let mut mid_x = Array2::zeros((n_mid, mf + cdim + h));
        for k in 0..n_mid {
            let start = f + k * mf - mf;
            let mut row = mid_x.row_mut(k);
            row.slice_mut(s![..mf]).assign(&self.decoded(&hist[start..start + mf]));
            row.slice_mut(s![mf..mf + cdim]).assign(&c.row(k / cfg.mid_steps_per_frame()));
            row.slice_mut(s![mf + cdim..]).assign(&top_up.row(k));
        }
        let (mid_hs, mid_cache) = self.mid.forward_seq(&mid_x.view(), &mid_h0.view());
        let mid_up = self
            .mid_up
            .forward(&mid_hs.view())
            .into_shape_with_order((n, h))
            .expect("upsampling shape");

        let d = cfg.code_embedding_size;
        let ar = cfg.ar_order;
        let mut sample_x = Array2::zeros((n, cfg.sample_input()));
        for t in 0..n {
            let mut row = sample_x.row_mut(t);
            for p in 0..ar {
                let code = hist[f + t - ar + p] as usize;
                row.slice_mut(s![p * d..(p + 1) * d])
                    .assign(&self.code_embedding.row(code));
            }
            row.slice_mut(s![ar * d..ar * d + h]).assign(&mid_up.row(t));
            row.slice_mut(s![ar * d + h..]).assign(&c.row(t / f));
        }
        let h1 = relu(&self.mlp_in.forward(&sample_x.view()));
        let h2 = relu(&self.mlp_hidden.forward(&h1.view()));
        let log_probs = log_softmax(&self.mlp_out.forward(&h2.view()));
        Ok(Trace {
            g,
            top_x,
            top_hs,
            top_cache,
            mid_x,
            mid_hs,
            mid_cache,
            sample_x,
            h1,
            h2,
            log_probs,
        })
    }

    fn result_of(&self, trace: &Trace, targets: &[u8]) -> Result<WindowResult> {
        let nll: Vec<f64> = targets
            .iter()
            .enumerate()
            .map(|(t, &y)| -trace.log_probs[[t, y as usize]])
            .collect();
        let mean_nll = nll.iter().sum::<f64>() / nll.len() as f64;
        if !mean_nll.is_finite() {
            let diag: Vec<String> = self
                .norms()
                .into_iter()
                .map(|(name, v)| format!("{name}={v:.3e}"))
                .collect();
            return Err(Error::Numerical(format!(
                "non-finite loss; parameter norms: {}",
                diag.join(", ")
            )));
        }
        let last = trace.top_hs.nrows() - 1;
        let last_mid = trace.mid_hs.nrows() - 1;
        Ok(WindowResult {
            mean_nll,
            nll,
            state: TierState {
                top: trace.top_hs.row(last).to_owned(),
                mid: trace.mid_hs.row(last_mid).to_owned(),
            },
        })
    }

    /// Teacher-forced NLL of one window. `init = None` starts from the learned initial states.
    pub fn forward_training(
        &self,
        window: &TrainingWindow,
        speaker: SpeakerRef<'_>,
        init: Option<&TierState>,
    ) -> Result<WindowResult> {
        let hist = self.window_history(window)?;
        let trace = self.forward_trace(&hist, &window.conditioning, speaker, init)?;
        self.result_of(&trace, &window.target_codes)
    }

    /// Teacher-forced log-probabilities, one row per target position.
    pub fn teacher_forced_log_probs(
        &self,
        window: &TrainingWindow,
        speaker: SpeakerRef<'_>,
        init: Option<&TierState>,
    ) -> Result<Array2<f64>> {
        let hist = self.window_history(window)?;
        Ok(self.forward_trace(&hist, &window.conditioning, speaker, init)?.log_probs)
    }

    /// Forward plus backward pass; adds `weight × d(mean NLL)/dθ` into `grad`. Gradients reach
    /// the learned initial states only when `init` is `None`.
    pub fn accumulate_gradient(
        &self,
        window: &TrainingWindow,
        speaker: SpeakerRef<'_>,
        init: Option<&TierState>,
        grad: &mut SampleRnn,
        weight: f64,
    ) -> Result<WindowResult> {
        let hist = self.window_history(window)?;
        let trace = self.forward_trace(&hist, &window.conditioning, speaker, init)?;
        let result = self.result_of(&trace, &window.target_codes)?;
        self.backward(&trace, &hist, &window.conditioning, speaker, init.is_none(), grad, weight);
        Ok(result)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        tr: &Trace,
        hist: &[u8],
        frames: &[ConditioningFrame],
        speaker: SpeakerRef<'_>,
        learned_init: bool,
        grad: &mut SampleRnn,
        weight: f64,
    ) {
        let cfg = &self.config;
        let (f, h, cdim) = (cfg.frame_size, cfg.hidden_size, cfg.global_features_size);
        let n = tr.log_probs.nrows();
        let n_mid = tr.mid_hs.nrows();
        let n_frames = tr.top_hs.nrows();
        let mf = cfg.mid_frame();
        let ar = cfg.ar_order;
        let d = cfg.code_embedding_size;
        let scale = weight / n as f64;

        let mut d_logits = tr.log_probs.mapv(f64::exp);
        for t in 0..n {
            d_logits[[t, hist[f + t] as usize]] -= 1.0;
        }
        d_logits *= scale;
        let dh2 = self.mlp_out.backward(&tr.h2.view(), &d_logits.view(), &mut grad.mlp_out);
        let dh2 = relu_backward(&tr.h2, &dh2);
        let dh1 = self.mlp_hidden.backward(&tr.h1.view(), &dh2.view(), &mut grad.mlp_hidden);
        let dh1 = relu_backward(&tr.h1, &dh1);
        let dx = self.mlp_in.backward(&tr.sample_x.view(), &dh1.view(), &mut grad.mlp_in);

        let mut dc = Array2::<f64>::zeros((n_frames, cdim));
        for t in 0..n {
            let row = dx.row(t);
            for p in 0..ar {
                let code = hist[f + t - ar + p] as usize;
                self.code_embedding
                    .accumulate(&mut grad.code_embedding, code, &row.slice(s![p * d..(p + 1) * d]));
            }
            let mut dcr = dc.row_mut(t / f);
            dcr += &row.slice(s![ar * d + h..]);
        }
        let d_mid_up = dx
            .slice(s![.., ar * d..ar * d + h])
            .to_owned()
            .into_shape_with_order((n_mid, mf * h))
            .expect("upsampling shape");
        let d_mid_hs = self.mid_up.backward(&tr.mid_hs.view(), &d_mid_up.view(), &mut grad.mid_up);
        let (d_mid_x, d_mid_h0) =
            self.mid
                .backward_seq(&tr.mid_x.view(), &tr.mid_cache, &d_mid_hs.view(), &mut grad.mid);
        for k in 0..n_mid {
            let mut dcr = dc.row_mut(k / cfg.mid_steps_per_frame());
            dcr += &d_mid_x.slice(s![k, mf..mf + cdim]);
        }
        let d_top_up = d_mid_x
            .slice(s![.., mf + cdim..])
            .to_owned()
            .into_shape_with_order((n_frames, cfg.mid_steps_per_frame() * h))
            .expect("upsampling shape");
        let d_top_hs = self.top_up.backward(&tr.top_hs.view(), &d_top_up.view(), &mut grad.top_up);
        let (d_top_x, d_top_h0) =
            self.top
                .backward_seq(&tr.top_x.view(), &tr.top_cache, &d_top_hs.view(), &mut grad.top);
        dc += &d_top_x.slice(s![.., f..]);
        if learned_init {
            grad.top_h0 += &d_top_h0;
            grad.mid_h0 += &d_mid_h0;
        }

        let dg = self.conditioning.backward(&tr.g.view(), &dc.view(), &mut grad.conditioning);
        let e_len = cfg.speaker_embedding_size;
        if let (SpeakerRef::Index(i), Some(gt)) = (speaker, grad.speaker_table.as_mut()) {
            let de = dg.slice(s![.., ..e_len]).sum_axis(Axis(0));
            let mut row = gt.table.table.row_mut(i);
            row += &de;
        }
        let ce = cfg.categorical_embedding_size;
        for (j, frame) in frames.iter().enumerate() {
            for (k, &id) in frame.categorical.iter().enumerate() {
                let off = e_len + k * ce;
                self.categorical[k].accumulate(
                    &mut grad.categorical[k],
                    id as usize,
                    &dg.slice(s![j, off..off + ce]),
                );
            }
        }
    }

    /// Autoregressive synthesis of `80 × frames.len()` codes, starting from zero-amplitude
    /// history and the learned initial states.
    pub fn generate(
        &self,
        frames: &[ConditioningFrame],
        speaker: SpeakerRef<'_>,
        seed: u64,
        sampling: Sampling,
    ) -> Result<QuantizedSequence> {
        if let Sampling::Categorical { temperature } = sampling {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
            }
        }
        let cfg = &self.config;
        let (f, mf, ar) = (cfg.frame_size, cfg.mid_frame(), cfg.ar_order);
        let e = self.speaker_vector(speaker)?;
        let c = self.conditioning.forward(&self.conditioning_inputs(&e, frames)?.view());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hist = vec![ZERO_CODE; f];
        hist.reserve(frames.len() * f);
        let mut state = self.initial_state();
        for j in 0..frames.len() {
            let cj = c.row(j);
            let base = hist.len();
            let (top_up, top_h) = self.top_tier_step(&hist[base - f..], &cj, &state.top.view())?;
            state.top = top_h;
            for i in 0..cfg.mid_steps_per_frame() {
                let len = hist.len();
                let (mid_up, mid_h) =
                    self.mid_tier_step(&hist[len - mf..], &top_up.row(i), &cj, &state.mid.view())?;
                state.mid = mid_h;
                for s_i in 0..mf {
                    let len = hist.len();
                    let lp = self.sample_log_probs(&hist[len - ar..], &mid_up.row(s_i), &cj)?;
                    hist.push(draw(&lp, sampling, &mut rng));
                }
            }
        }
        Ok(QuantizedSequence {
            codes: hist.split_off(f),
            source: "generated".into(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
        });
        container::write(path, CHECKPOINT_KIND, &meta.to_string(), self)
    }

    /// Loads a checkpoint, taking the configuration from the file.
    pub fn load(path: &Path) -> Result<Self> {
        let contents = container::read(path, CHECKPOINT_KIND)?;
        let meta: serde_json::Value = serde_json::from_str(&contents.metadata)
            .map_err(|e| Error::container(path, e.to_string()))?;
        let version = meta.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(SCHEMA_VERSION as u64) {
            return Err(Error::container(path, format!("unsupported schema version {version:?}")));
        }
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::container(path, format!("bad model config: {e}")))?;
        let mut model = SampleRnn::new(config, 0)?;
        container::load_into(path, &contents, &mut model)?;
        Ok(model)
    }

    /// Loads a checkpoint and refuses it unless its configuration equals `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if &model.config != expected {
            return Err(Error::container(
                path,
                format!(
                    "configuration mismatch: checkpoint has {}, expected {}",
                    serde_json::to_string(&model.config).unwrap(),
                    serde_json::to_string(expected).unwrap()
                ),
            ));
        }
        Ok(model)
    }
}

fn draw(log_probs: &Array1<f64>, sampling: Sampling, rng: &mut impl Rng) -> u8 {
    match sampling {
        Sampling::Argmax => argmax(log_probs.view()) as u8,
        Sampling::Categorical { temperature } => {
            let scaled = log_probs / temperature;
            let m = scaled.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let w: Vec<f64> = scaled.iter().map(|v| (v - m).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (i, wi) in w.iter().enumerate() {
                u -= wi;
                if u <= 0.0 {
                    return i as u8;
                }
            }
            (w.len() - 1) as u8
        }
    }
}

fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax code of every row.
pub fn argmax_codes(log_probs: &ArrayView2<f64>) -> Vec<u8> {
    log_probs.rows().into_iter().map(|r| argmax(r) as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Adam, AdamConfig};

    pub(crate) fn micro_config(mode: SpeakerMode) -> ModelConfig {
        ModelConfig {
            hidden_size: 8,
            speaker_embedding_size: 6,
            global_features_size: 5,
            categorical_embedding_size: 3,
            code_embedding_size: 4,
            mlp_hidden: 8,
            categorical_vocab: vec![7, 7],
            numeric_dim: 3,
            speaker_mode: mode,
            ..ModelConfig::default()
        }
    }

    fn window(seed: u64, cfg: &ModelConfig) -> TrainingWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.window_len();
        let codes: Vec<u8> = (0..n + cfg.frame_size)
            .map(|i| {
                let v = 0.6 * (i as f64 * 0.07).sin() + 0.05 * rng.random_range(-1.0..1.0);
                crate::audio::mulaw_encode_sample(v)
            })
            .collect();
        let frames = (0..cfg.seq_len)
            .map(|_| ConditioningFrame {
                categorical: cfg.categorical_vocab.iter().map(|&v| rng.random_range(0..v as u32)).collect(),
                numeric: (0..cfg.numeric_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        TrainingWindow {
            context: codes[..cfg.frame_size].to_vec(),
            input_codes: codes[cfg.frame_size - 1..cfg.frame_size - 1 + n].to_vec(),
            target_codes: codes[cfg.frame_size..].to_vec(),
            conditioning: frames,
            speaker_id: "s0".into(),
            utterance_id: "u".into(),
            index: 0,
        }
    }

    fn speakers() -> SpeakerMode {
        SpeakerMode::OneHot {
            speakers: vec!["s0".into(), "s1".into()],
        }
    }

    #[test]
    fn default_config_is_valid_and_ratios_checked() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.window_len(), 1040);
        let bad = ModelConfig {
            upsampling_ratios: vec![4, 10],
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn shape_chain() {
        let cfg = micro_config(speakers());
        let m = SampleRnn::new(cfg.clone(), 1).unwrap();
        let w = window(1, &cfg);
        let hist = m.window_history(&w).unwrap();
        let tr = m.forward_trace(&hist, &w.conditioning, SpeakerRef::Index(0), None).unwrap();
        assert_eq!(tr.top_hs.nrows(), 13);
        assert_eq!(tr.mid_hs.nrows(), 52);
        assert_eq!(tr.log_probs.dim(), (1040, 256));
    }

    #[test]
    fn zero_conditioning_map_gives_zero_vector() {
        let cfg = micro_config(speakers());
        let mut m = SampleRnn::new(cfg.clone(), 2).unwrap();
        m.conditioning.w.fill(0.0);
        m.conditioning.b.fill(0.0);
        let w = window(2, &cfg);
        let c = m.build_global_conditioning(SpeakerRef::Index(1), &w.conditioning[0]).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
        assert!(m
            .build_global_conditioning(SpeakerRef::Vector(&[0.0; 3]), &w.conditioning[0])
            .is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let cfg = micro_config(SpeakerMode::Encoder);
        let m = SampleRnn::new(cfg.clone(), 3).unwrap();
        let p = m
            .sample_level_predict(&[128; 20], &Array1::zeros(8).view(), &Array1::zeros(5).view())
            .unwrap();
        assert_eq!(p.len(), 256);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.sum() - 1.0).abs() < 1e-6);
        assert!(m
            .sample_level_predict(&[128; 19], &Array1::zeros(8).view(), &Array1::zeros(5).view())
            .is_err());
    }

    #[test]
    fn stream_matches_batch() {
        let cfg = micro_config(speakers());
        let m = SampleRnn::new(cfg.clone(), 4).unwrap();
        let w = window(4, &cfg);
        let hist = m.window_history(&w).unwrap();
        let tr = m.forward_trace(&hist, &w.conditioning, SpeakerRef::Index(0), None).unwrap();
        let mut state = m.initial_state();
        let mut k = 0;
        for j in 0..13 {
            let c = m.build_global_conditioning(SpeakerRef::Index(0), &w.conditioning[j]).unwrap();
            let c = c.view();
            let (up, th) = m.top_tier_step(&hist[j * 80..(j + 1) * 80], &c, &state.top.view()).unwrap();
            assert!((&th - &tr.top_hs.row(j)).iter().all(|v| v.abs() < 1e-12));
            state.top = th;
            for i in 0..4 {
                let start = 80 + k * 20 - 20;
                let (_, mh) = m
                    .mid_tier_step(&hist[start..start + 20], &up.row(i), &c, &state.mid.view())
                    .unwrap();
                assert!((&mh - &tr.mid_hs.row(k)).iter().all(|v| v.abs() < 1e-12));
                state.mid = mh;
                k += 1;
            }
        }
        assert_eq!(k, 52);
    }

    #[test]
    fn untrained_nll_is_near_uniform() {
        let cfg = micro_config(speakers());
        let m = SampleRnn::new(cfg.clone(), 5).unwrap();
        let r = m.forward_training(&window(5, &cfg), SpeakerRef::Index(0), None).unwrap();
        let uniform = (256f64).ln();
        assert!((r.mean_nll - uniform).abs() / uniform < 0.05, "{}", r.mean_nll);
    }

    #[test]
    fn overfit_one_window() {
        let cfg = micro_config(speakers());
        let mut m = SampleRnn::new(cfg.clone(), 6).unwrap();
        let w = window(6, &cfg);
        let first = m.forward_training(&w, SpeakerRef::Index(0), None).unwrap().mean_nll;
        let mut adam = Adam::new(AdamConfig::default(), m.num_parameters());
        let mut last = first;
        for _ in 0..200 {
            let mut g = m.zeros_like();
            last = m.accumulate_gradient(&w, SpeakerRef::Index(0), None, &mut g, 1.0).unwrap().mean_nll;
            adam.step(&mut m, &g, 3e-3);
        }
        assert!(last < first * 0.8, "{first} -> {last}");
    }

    #[test]
    fn generate_length_and_determinism() {
        let cfg = micro_config(speakers());
        let m = SampleRnn::new(cfg.clone(), 7).unwrap();
        let w = window(7, &cfg);
        let frames: Vec<_> = w.conditioning.iter().cycle().take(20).cloned().collect();
        let a = m.generate(&frames, SpeakerRef::Index(0), 9, Sampling::default()).unwrap();
        assert_eq!(a.codes.len(), 1600);
        let b = m.generate(&frames, SpeakerRef::Index(0), 9, Sampling::default()).unwrap();
        assert_eq!(a, b);
        let c = m.generate(&frames, SpeakerRef::Index(1), 9, Sampling::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = micro_config(speakers());
        let m = SampleRnn::new(cfg.clone(), 8).unwrap();
        m.save(&path).unwrap();
        let back = SampleRnn::load_expecting(&path, &cfg).unwrap();
        assert_eq!(back, m);
        let other = ModelConfig {
            mlp_hidden: 9,
            ..cfg
        };
        assert!(matches!(SampleRnn::load_expecting(&path, &other), Err(Error::Container { .. })));
    }
}
