//! Model, training, sampling and data configuration.
//!
//! Configuration files are TOML. Every field can be written either inside its
//! section (`[train]` / `lr_peak = 5e-4`) or as a dotted key
//! (`train.lr_peak = 5e-4`); both spellings produce the same table.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::MaskKind;

/// Image fed to the recurrent state initializer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RsiInput {
    /// Coil combination with the sensitivity maps (complex, 2 channels).
    Sense,
    /// Zero-filled root-sum-of-squares image (real, 1 channel).
    Rss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of unrolled iterations T.
    pub time_steps: usize,
    /// ConvGRU layers per recurrent unit.
    pub recurrent_layers: usize,
    pub hidden_channels: usize,
    pub rsi_dilations: Vec<usize>,
    pub rsi_filters: Vec<usize>,
    pub ser_filters: Vec<usize>,
    pub ser_leaky_slope: f64,
    pub use_ser: bool,
    pub use_rsi: bool,
    pub share_weights: bool,
    pub rsi_input: RsiInput,
    /// Debug initialisation: all recurrent-unit weights zero, so every block
    /// reduces to pure data consistency.
    pub zero_refinement: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            time_steps: 8,
            recurrent_layers: 4,
            hidden_channels: 128,
            rsi_dilations: vec![1, 1, 2, 4],
            rsi_filters: vec![32, 32, 64, 64],
            ser_filters: vec![8, 16, 32, 64],
            ser_leaky_slope: 0.2,
            use_ser: true,
            use_rsi: true,
            share_weights: false,
            rsi_input: RsiInput::Sense,
            zero_refinement: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_steps == 0 {
            return Err(Error::Config("model.time_steps must be >= 1".into()));
        }
        if self.recurrent_layers == 0 {
            return Err(Error::Config("model.recurrent_layers must be >= 1".into()));
        }
        if self.hidden_channels == 0 {
            return Err(Error::Config("model.hidden_channels must be >= 1".into()));
        }
        if self.rsi_dilations.len() != self.rsi_filters.len() || self.rsi_filters.is_empty() {
            return Err(Error::Config(
                "model.rsi_dilations and model.rsi_filters must have the same non-zero length"
                    .into(),
            ));
        }
        if self.rsi_dilations.contains(&0) || self.rsi_filters.contains(&0) {
            return Err(Error::Config("RSI dilations and filters must be positive".into()));
        }
        if self.ser_filters.is_empty() || self.ser_filters.contains(&0) {
            return Err(Error::Config("model.ser_filters must be non-empty and positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_iters: u64,
    pub decay_every: u64,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub total_iters: u64,
    /// Weight of the L1 term.
    pub w1: f64,
    /// Weight of the `1 - SSIM` term.
    pub w2: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub accelerations: Vec<f64>,
    pub checkpoint_every: u64,
    pub validate_every: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Draw a fresh mask per training sample (true) or reuse one mask per slice
    /// and acceleration (false).
    pub fresh_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 5e-4,
            warmup_iters: 1000,
            decay_every: 20000,
            decay_factor: 0.2,
            batch_size: 4,
            total_iters: 63000,
            w1: 1.0,
            w2: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            accelerations: vec![5.0, 10.0],
            checkpoint_every: 1000,
            validate_every: 1000,
            grad_clip: 0.0,
            fresh_masks: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.lr_peak", self.lr_peak >= 0.0),
            ("train.warmup_iters", self.warmup_iters > 0),
            ("train.decay_every", self.decay_every > 0),
            ("train.decay_factor", self.decay_factor > 0.0),
            ("train.batch_size", self.batch_size > 0),
            ("train.adam_eps", self.adam_eps > 0.0),
            ("train.checkpoint_every", self.checkpoint_every > 0),
            ("train.validate_every", self.validate_every > 0),
            ("train.grad_clip", self.grad_clip >= 0.0),
        ];
        for (name, ok) in positive {
            if !ok {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, w) in [("train.w1", self.w1), ("train.w2", self.w2)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {w}")));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.accelerations.is_empty() || self.accelerations.iter().any(|&r| r < 1.0) {
            return Err(Error::Config("train.accelerations must be a non-empty list of R >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub kind: MaskKind,
    /// Radius of the fully sampled disc of variable-density masks, as a fraction
    /// of half the smaller image side.
    pub center_radius: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            kind: MaskKind::VariableDensity,
            center_radius: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Where generated volumes and the manifest live (or are written).
    pub root: String,
    pub shape: [usize; 2],
    pub coils: usize,
    pub slices_per_volume: usize,
    pub sigma: f64,
    pub train_volumes: usize,
    pub val_volumes: usize,
    pub test_volumes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: "data".into(),
            shape: [64, 64],
            coils: 4,
            slices_per_volume: 4,
            sigma: 0.0,
            train_volumes: 4,
            val_volumes: 1,
            test_volumes: 1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shape[0] < 8 || self.shape[1] < 8 {
            return Err(Error::Config("data.shape must be at least 8x8".into()));
        }
        if self.coils == 0 || self.slices_per_volume == 0 {
            return Err(Error::Config("data.coils and data.slices_per_volume must be >= 1".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::Config("data.sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything a CLI run needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed. Required: runs are never seeded from the clock.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub data: DataConfig,
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeSet<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string());
        }
    }
}

impl Config {
    /// Every accepted dotted key.
    pub fn valid_keys() -> Vec<String> {
        let mut value = toml::Value::try_from(Config::default()).expect("config serializes");
        if let toml::Value::Table(t) = &mut value {
            t.insert("seed".into(), toml::Value::Integer(0));
        }
        let mut keys = BTreeSet::new();
        flatten("", &value, &mut keys);
        keys.into_iter().collect()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(format!("malformed TOML: {e}")))?;
        let mut present = BTreeSet::new();
        flatten("", &value, &mut present);
        let valid: BTreeSet<String> = Self::valid_keys().into_iter().collect();
        let unknown: Vec<_> = present.difference(&valid).cloned().collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown key(s) {}; valid keys are: {}",
                unknown.join(", "),
                valid.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }
        let cfg: Config = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if !(0.0..=1.0).contains(&self.sampling.center_radius) {
            return Err(Error::Config("sampling.center_radius must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| {
            Error::Config("a seed is required (set `seed = ...` in the config or pass --seed)".into())
        })
    }
}
