//! Run configuration: a flat JSON object whose keys mirror the fields below.
//! Missing keys take the defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::Variant;
use crate::eval::EvalConfig;
use crate::losses::HtlConfig;
use crate::model::{DecodeOptions, ModelConfig};
use crate::synth::SynthConfig;
use crate::train::{OptimConfig, ToySceneConfig, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdSet {
    Official,
    Relaxed,
}

impl ThresholdSet {
    pub fn config(self) -> EvalConfig {
        match self {
            ThresholdSet::Official => EvalConfig::official(),
            ThresholdSet::Relaxed => EvalConfig::relaxed(),
        }
    }

    pub fn other(self) -> Self {
        match self {
            ThresholdSet::Official => ThresholdSet::Relaxed,
            ThresholdSet::Relaxed => ThresholdSet::Official,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<String>,
    /// KITTI-style directory read by `infer` and `eval`.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Prediction directory read by `eval`.
    pub pred_dir: Option<PathBuf>,
    pub variant: Variant,
    pub attention_enabled: bool,
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub htl_ramp_epochs: usize,
    pub htl_window: usize,
    pub htl_target_drop: f64,
    pub thresholds: ThresholdSet,
    pub seed: u64,
    pub k: usize,
    pub score_threshold: f64,
    pub num_images: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub focal: f64,
    pub max_objects: usize,
    pub z_min: f64,
    pub z_max: f64,
    /// Relative car, pedestrian and cyclist frequencies of synthetic scenes.
    pub class_weights: [f64; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        let optim = OptimConfig::default();
        let htl = HtlConfig::default();
        let scene = ToySceneConfig::default();
        let decode = DecodeOptions::default();
        Self {
            command: None,
            data_dir: None,
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            pred_dir: None,
            variant: Variant::Desk,
            attention_enabled: true,
            lr: optim.lr,
            decay_epochs: optim.decay_epochs,
            decay: optim.decay,
            warmup_epochs: optim.warmup_epochs,
            batch_size: 12,
            epochs: 140,
            htl_ramp_epochs: htl.ramp_epochs,
            htl_window: htl.recent_window,
            htl_target_drop: htl.target_drop,
            thresholds: ThresholdSet::Official,
            seed: 0,
            k: decode.k,
            score_threshold: decode.score_threshold,
            num_images: scene.num_images,
            image_height: scene.image_height,
            image_width: scene.image_width,
            focal: scene.focal,
            max_objects: scene.max_objects,
            z_min: scene.synth.z_range.0,
            z_max: scene.synth.z_range.1,
            class_weights: scene.synth.class_weights,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must be in (0, 1], got {}", self.decay));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.k == 0 || !(0.0..1.0).contains(&self.score_threshold) {
            return bad(format!("need k ≥ 1 and score_threshold in [0, 1), got {} and {}", self.k, self.score_threshold));
        }
        if self.image_height < 32 || self.image_width < 32 {
            return bad(format!("image size {}×{} is below 32", self.image_height, self.image_width));
        }
        if !(self.focal > 0.0) || !(0.0 < self.z_min && self.z_min < self.z_max) {
            return bad(format!("need focal > 0 and 0 < z_min < z_max, got {}, {}, {}", self.focal, self.z_min, self.z_max));
        }
        if self.class_weights.iter().any(|w| *w < 0.0) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return bad(format!("class_weights {:?} must be non-negative with a positive sum", self.class_weights));
        }
        if !(self.htl_target_drop > 0.0) {
            return bad(format!("htl_target_drop must be positive, got {}", self.htl_target_drop));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig::new(self.variant, self.attention_enabled)
    }

    pub fn decode(&self) -> DecodeOptions {
        DecodeOptions { k: self.k, score_threshold: self.score_threshold }
    }

    pub fn scene(&self) -> ToySceneConfig {
        ToySceneConfig {
            num_images: self.num_images,
            image_height: self.image_height,
            image_width: self.image_width,
            focal: self.focal,
            max_objects: self.max_objects,
            synth: SynthConfig { z_range: (self.z_min, self.z_max), class_weights: self.class_weights, ..ToySceneConfig::default().synth },
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optim: OptimConfig {
                lr: self.lr,
                warmup_epochs: self.warmup_epochs,
                decay_epochs: self.decay_epochs.clone(),
                decay: self.decay,
                ..OptimConfig::default()
            },
            htl: HtlConfig { ramp_epochs: self.htl_ramp_epochs, recent_window: self.htl_window, target_drop: self.htl_target_drop },
            seed: self.seed,
        }
    }
}
