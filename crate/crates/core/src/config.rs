//! Run configuration.
//!
//! Configs are written as TOML with one table per subsystem and are persisted
//! next to run artifacts in resolved JSON form. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub model: ModelConfig,
    pub lma: LmaConfig,
    pub trend: TrendConfig,
    pub wavelet: WaveletConfig,
    pub attention: AttentionConfig,
    pub correction: CorrectionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub plot: PlotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            data: DataConfig::default(),
            diffusion: DiffusionConfig::default(),
            model: ModelConfig::default(),
            lma: LmaConfig::default(),
            trend: TrendConfig::default(),
            wavelet: WaveletConfig::default(),
            attention: AttentionConfig::default(),
            correction: CorrectionConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            plot: PlotConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub feature_columns: Option<Vec<String>>,
    pub window: usize,
    pub stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            feature_columns: None,
            window: 24,
            stride: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Reverse-process noise scale.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `σ_s² = β_s (1 − ᾱ_{s−1}) / (1 − ᾱ_s)`.
    Posterior,
    /// `σ_s² = β_s`.
    Beta,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
    /// Clamp each sampling-time `x̂₀` to the data range before the reverse step.
    pub clip_x0: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            schedule: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma_mode: SigmaMode::Posterior,
            clip_x0: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    PredictX0,
    PredictEps,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden width `d` of the component encodings.
    pub width: usize,
    pub parameterization: Parameterization,
    /// Run the diffusion on `2x − 1` so `[0, 1]` data spans `[−1, 1]`.
    pub rescale: bool,
    /// Add a learnable per-timestep embedding, zero at initialisation, to
    /// both component encodings. Attention alone is blind to order.
    pub positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            parameterization: Parameterization::PredictX0,
            rescale: true,
            positional: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LmaConfig {
    /// `false` swaps in a fixed width-3 moving average with identity affine.
    pub enabled: bool,
    pub kernels: Vec<usize>,
    pub global_weights: bool,
    pub hidden: usize,
}

impl Default for LmaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            kernels: vec![1, 2, 4, 6, 12],
            global_weights: false,
            hidden: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrendConfig {
    pub layers: usize,
    pub hidden_mult: usize,
    pub activation: Activation,
}

impl Default for TrendConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden_mult: 2,
            activation: Activation::Silu,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(untagged)]
pub enum Levels {
    Fixed(usize),
    Auto(AutoTag),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum WaveletInit {
    Db3,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WaveletConfig {
    pub levels: Levels,
    pub reg_weight: f64,
    pub init: WaveletInit,
    /// `false` freezes the low-pass filter at its initial db3 taps.
    pub learnable: bool,
}

impl Default for WaveletConfig {
    fn default() -> Self {
        Self {
            levels: Levels::Auto(AutoTag::Auto),
            reg_weight: 0.1,
            init: WaveletInit::Db3,
            learnable: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Query/key width; defaults to the model width.
    pub dk: Option<usize>,
    /// Add each level's coefficients back onto its attention output.
    pub residual: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 1,
            dk: None,
            residual: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectionConfig {
    pub enabled: bool,
    pub dk: Option<usize>,
    pub residual: bool,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            dk: None,
            residual: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cosine_decay: bool,
    pub grad_clip: Option<f64>,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            cosine_decay: true,
            grad_clip: Some(1.0),
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub trials: usize,
    /// Optimisation steps for each recurrent evaluator.
    pub iterations: usize,
    pub batch_size: usize,
    pub encoder_width: usize,
    pub encoder_iterations: usize,
    /// Cached context encoder; trained and written here when absent.
    pub encoder_cache: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: 5,
            iterations: 2000,
            batch_size: 128,
            encoder_width: 16,
            encoder_iterations: 500,
            encoder_cache: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PlotConfig {
    pub perplexity: f64,
    pub tsne_iterations: usize,
    pub max_points: usize,
    pub density_points: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            tsne_iterations: 1000,
            max_points: 1000,
            density_points: 200,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            cfg.validate()?;
            Ok(cfg)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.data.window == 0 || self.data.stride == 0 {
            return bad("data.window and data.stride must be positive".into());
        }
        if self.model.width == 0 {
            return bad("model.width must be positive".into());
        }
        if self.attention.heads == 0 {
            return bad("attention.heads must be positive".into());
        }
        let dk = self.attention.dk.unwrap_or(self.model.width);
        if dk % self.attention.heads != 0 || self.model.width % self.attention.heads != 0 {
            return bad(format!(
                "attention.heads={} must divide attention.dk={dk} and model.width={}",
                self.attention.heads, self.model.width
            ));
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if self.eval.trials == 0 {
            return bad("eval.trials must be positive".into());
        }
        if self.lma.kernels.is_empty() || self.lma.kernels.contains(&0) {
            return bad("lma.kernels must be non-empty and positive".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the model-defining sections, hex encoded.
    pub fn model_hash(&self) -> String {
        let key = serde_json::json!({
            "window": self.data.window,
            "diffusion": self.diffusion,
            "model": self.model,
            "lma": self.lma,
            "trend": self.trend,
            "wavelet": self.wavelet,
            "attention": self.attention,
            "correction": self.correction,
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }
}
